#include "convlora/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "convlora/ops.hpp"
#include "convlora/rng.hpp"
#include "convlora/serialize.hpp"

namespace convlora {

namespace fs = std::filesystem;

void DomainSpec::validate() const {
  if (domain_id.empty()) throw std::invalid_argument("domain spec: empty domain_id");
  if (!(gamma > 0.0)) throw std::invalid_argument("domain spec: gamma must be > 0");
  if (additive_noise_std < 0.0)
    throw std::invalid_argument("domain spec: noise std must be >= 0");
  if (bias_field_strength < 0.0)
    throw std::invalid_argument("domain spec: bias field strength must be >= 0");
  if (blur_sigma < 0.0) throw std::invalid_argument("domain spec: blur sigma must be >= 0");
  if (intensity_scale <= 0.0)
    throw std::invalid_argument("domain spec: intensity scale must be > 0");
}

void SuiteSpec::validate() const {
  if (n_train < 1 || n_test < 1)
    throw std::invalid_argument("suite spec: train and test counts must be >= 1");
  if (n_val < 1) throw std::invalid_argument("suite spec: val count must be >= 1");
  if (image_size < 8) throw std::invalid_argument("suite spec: image size must be >= 8");
}

const std::vector<DomainSpec>& domain_suite() {
  // Fixed severity presets; every knob grows monotonically down the list.
  static const std::vector<DomainSpec> suite = {
      {"source", 1.00, 1.00, 0.010, 0.00, 0.0},
      {"mild", 0.90, 1.06, 0.020, 0.05, 0.4},
      {"light", 0.80, 1.13, 0.030, 0.10, 0.7},
      {"moderate", 0.70, 1.22, 0.045, 0.16, 1.0},
      {"strong", 0.60, 1.35, 0.060, 0.24, 1.4},
      {"severe", 0.50, 1.50, 0.080, 0.33, 1.9},
  };
  return suite;
}

const DomainSpec& domain_by_id(const std::string& domain_id) {
  for (const auto& d : domain_suite())
    if (d.domain_id == domain_id) return d;
  throw std::invalid_argument("unknown domain '" + domain_id + "'");
}

std::vector<std::string> target_domain_ids() {
  std::vector<std::string> out;
  for (const auto& d : domain_suite())
    if (d.domain_id != "source") out.push_back(d.domain_id);
  return out;
}

const std::string& hardest_domain_id() { return domain_suite().back().domain_id; }

namespace {

struct Ellipse {
  double cx, cy;      // center, pixels
  double ax, ay;      // semi-axes, pixels
  double cos_t, sin_t;
};

// quadratic form: q <= 1 inside
double ellipse_q(const Ellipse& e, double x, double y) {
  const double dx = x - e.cx, dy = y - e.cy;
  const double u = dx * e.cos_t + dy * e.sin_t;
  const double v = -dx * e.sin_t + dy * e.cos_t;
  return (u * u) / (e.ax * e.ax) + (v * v) / (e.ay * e.ay);
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

BaseSample make_base_sample(std::size_t image_size, const std::string& sample_id,
                            std::uint64_t seed) {
  if (image_size < 8) throw std::invalid_argument("base sample: image size must be >= 8");
  const double S = double(image_size);
  Rng rng(derive_seed(seed, "sample/" + sample_id));

  // brain blobs
  const std::size_t n_blobs = 1 + rng.uniform_index(3);
  std::vector<Ellipse> blobs;
  for (std::size_t b = 0; b < n_blobs; ++b) {
    Ellipse e;
    e.cx = (0.30 + 0.40 * rng.uniform()) * S;
    e.cy = (0.30 + 0.40 * rng.uniform()) * S;
    e.ax = (0.10 + 0.14 * rng.uniform()) * S;
    e.ay = (0.10 + 0.14 * rng.uniform()) * S;
    const double theta = rng.uniform() * 3.14159265358979323846;
    e.cos_t = std::cos(theta);
    e.sin_t = std::sin(theta);
    blobs.push_back(e);
  }

  // skull rim: a thin bright ellipse ring outside the brain, class 0
  Ellipse rim;
  rim.cx = 0.5 * S;
  rim.cy = 0.5 * S;
  rim.ax = (0.40 + 0.05 * rng.uniform()) * S;
  rim.ay = (0.40 + 0.05 * rng.uniform()) * S;
  rim.cos_t = 1.0;
  rim.sin_t = 0.0;
  const double rim_half_width = 0.020 * S;

  const double bg_base = 0.12;
  const double bg_slope = 0.06;
  const double brain_level = 0.62 + 0.06 * rng.uniform();
  const double texture_freq = 2.0 + 2.0 * rng.uniform();
  const double texture_phase = rng.uniform() * 6.28318530717958647692;
  const double softness = 0.05;  // soft edge width in q units

  BaseSample s;
  s.image = TensorF({1, image_size, image_size});
  s.mask = TensorI({image_size, image_size});
  for (std::size_t y = 0; y < image_size; ++y)
    for (std::size_t x = 0; x < image_size; ++x) {
      const double px = double(x) + 0.5, py = double(y) + 0.5;
      double bg = bg_base + bg_slope * (py / S);

      // rim: bright where |sqrt(q) - 1| small in pixel terms
      const double rq = std::sqrt(ellipse_q(rim, px, py));
      const double rim_dist = std::abs(rq - 1.0) * std::min(rim.ax, rim.ay);
      const double rim_alpha = sigmoid((rim_half_width - rim_dist) / (0.35 * rim_half_width));
      bg = bg + rim_alpha * (0.85 - bg);

      double blob_field = 0.0;
      for (const auto& e : blobs)
        blob_field = std::max(blob_field, sigmoid((1.0 - ellipse_q(e, px, py)) / softness));

      const double texture =
          0.04 * std::sin(texture_freq * 6.28318530717958647692 * px / S + texture_phase) *
          std::cos(texture_freq * 6.28318530717958647692 * py / S);
      const double brain = brain_level + texture;
      const double v = (1.0 - blob_field) * bg + blob_field * brain;
      s.image.at3(0, y, x) = float(std::clamp(v, 0.0, 1.0));

      bool inside = false;
      for (const auto& e : blobs) inside = inside || ellipse_q(e, px, py) <= 1.0;
      s.mask.at2(y, x) = inside ? 1 : 0;
    }
  return s;
}

namespace {

TensorF gaussian_blur(const TensorF& img, double sigma) {
  if (sigma <= 0.0) return img;
  const std::size_t h = img.dim(1), w = img.dim(2);
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> k(std::size_t(radius) + 1);
  double norm = 0.0;
  for (int i = 0; i <= radius; ++i) {
    k[std::size_t(i)] = std::exp(-0.5 * (double(i) * double(i)) / (sigma * sigma));
    norm += (i == 0) ? k[std::size_t(i)] : 2.0 * k[std::size_t(i)];
  }
  for (auto& v : k) v /= norm;

  auto reflect = [](long i, long n) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -i - 1;
      if (i >= n) i = 2 * n - 1 - i;
    }
    return std::size_t(i);
  };

  TensorF tmp({1, h, w}), out({1, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += k[std::size_t(std::abs(i))] *
               double(img.at3(0, y, reflect(long(x) + i, long(w))));
      tmp.at3(0, y, x) = float(acc);
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += k[std::size_t(std::abs(i))] *
               double(tmp.at3(0, reflect(long(y) + i, long(h)), x));
      out.at3(0, y, x) = float(acc);
    }
  return out;
}

}  // namespace

TensorF apply_domain(const TensorF& clean, const DomainSpec& spec,
                     std::uint64_t xform_seed) {
  spec.validate();
  require_rank(clean, 3, "apply_domain image");
  if (clean.dim(0) != 1)
    throw std::invalid_argument("apply_domain: image must have one channel");
  const std::size_t h = clean.dim(1), w = clean.dim(2);
  Rng rng(xform_seed);

  TensorF img = gaussian_blur(clean, spec.blur_sigma);

  // smooth multiplicative bias field: one random low-frequency cosine
  const double cycles = 0.5 + rng.uniform();
  const double theta = rng.uniform() * 3.14159265358979323846;
  const double phase = rng.uniform() * 6.28318530717958647692;
  const double fx = std::cos(theta) * cycles, fy = std::sin(theta) * cycles;

  TensorF out({1, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double v = double(img.at3(0, y, x));
      if (spec.bias_field_strength > 0.0) {
        const double field = std::cos(
            6.28318530717958647692 * (fx * double(x) / double(w) + fy * double(y) / double(h)) +
            phase);
        v *= 1.0 + spec.bias_field_strength * field;
      }
      v *= spec.intensity_scale;
      v = std::pow(std::max(v, 0.0), spec.gamma);
      v += rng.normal(0.0, spec.additive_noise_std);
      out.at3(0, y, x) = float(std::clamp(v, 0.0, 1.0));
    }
  ensure_finite(out, "apply_domain");
  return out;
}

namespace {

std::string pad_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

}  // namespace

void save_sample(const fs::path& path, const TensorF& image, const TensorI& mask) {
  Container c;
  c.put("image", image);
  c.put("mask", mask);
  c.save(path);
}

SegmentationSample load_sample(const fs::path& path, const std::string& domain_id,
                               const std::string& sample_id) {
  Container c = Container::load(path);
  SegmentationSample s;
  s.image = c.get_f32("image");
  s.mask = c.get_i32("mask");
  s.domain_id = domain_id;
  s.sample_id = sample_id;
  require_rank(s.image, 3, "sample image");
  require_rank(s.mask, 2, "sample mask");
  if (s.image.dim(1) != s.mask.dim(0) || s.image.dim(2) != s.mask.dim(1))
    throw std::runtime_error("sample '" + sample_id + "': image " + s.image.shape_str() +
                             " and mask " + s.mask.shape_str() + " disagree");
  return s;
}

void generate_domain_suite(const fs::path& root, const SuiteSpec& spec) {
  spec.validate();
  const std::size_t total = spec.n_train + spec.n_val + spec.n_test;
  auto split_of = [&](std::size_t i) -> const char* {
    if (i < spec.n_train) return "train";
    if (i < spec.n_train + spec.n_val) return "val";
    return "test";
  };

  for (const auto& d : domain_suite())
    for (const char* split : {"train", "val", "test"})
      fs::create_directories(root / d.domain_id / split);

  for (std::size_t i = 0; i < total; ++i) {
    const std::string id = pad_id(i);
    BaseSample base = make_base_sample(spec.image_size, id, spec.seed);
    for (const auto& d : domain_suite()) {
      TensorF img = apply_domain(
          base.image, d, derive_seed(spec.seed, "xform/" + d.domain_id + "/" + id));
      save_sample(root / d.domain_id / split_of(i) / (id + ".clra"), img, base.mask);
    }
  }

  std::ostringstream m;
  m << "clra-dataset 1\n";
  m << "seed " << spec.seed << "\n";
  m << "image_size " << spec.image_size << "\n";
  m << "domains";
  for (const auto& d : domain_suite()) m << " " << d.domain_id;
  m << "\n";
  for (std::size_t i = 0; i < total; ++i)
    m << "sample " << pad_id(i) << " " << split_of(i) << "\n";
  const fs::path tmp = root / "manifest.txt.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << m.str();
  }
  fs::rename(tmp, root / "manifest.txt");
}

Manifest read_manifest(const fs::path& root) {
  std::ifstream in(root / "manifest.txt");
  if (!in) throw std::runtime_error("no manifest.txt under " + root.string());
  Manifest man;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "clra-dataset") {
      int version = 0;
      ls >> version;
      if (version != 1)
        throw std::runtime_error("manifest: unsupported version " + std::to_string(version));
      header_seen = true;
    } else if (key == "seed") {
      ls >> man.seed;
    } else if (key == "image_size") {
      ls >> man.image_size;
    } else if (key == "domains") {
      std::string d;
      while (ls >> d) man.domains.push_back(d);
    } else if (key == "sample") {
      ManifestEntry e;
      ls >> e.sample_id >> e.split;
      if (e.sample_id.empty() || e.split.empty())
        throw std::runtime_error("manifest: malformed sample line '" + line + "'");
      man.entries.push_back(std::move(e));
    } else {
      throw std::runtime_error("manifest: unknown key '" + key + "'");
    }
  }
  if (!header_seen) throw std::runtime_error("manifest: missing header line");
  return man;
}

std::vector<std::string> Manifest::ids_for(const std::string& split) const {
  std::vector<std::string> out;
  for (const auto& e : entries)
    if (e.split == split) out.push_back(e.sample_id);
  return out;
}

std::vector<SegmentationSample> load_split(const fs::path& root,
                                           const std::string& domain_id,
                                           const std::string& split) {
  Manifest man = read_manifest(root);
  if (std::find(man.domains.begin(), man.domains.end(), domain_id) == man.domains.end())
    throw std::invalid_argument("dataset has no domain '" + domain_id + "'");
  std::vector<SegmentationSample> out;
  for (const auto& id : man.ids_for(split))
    out.push_back(load_sample(root / domain_id / split / (id + ".clra"), domain_id, id));
  if (out.empty())
    throw std::runtime_error("split '" + split + "' of domain '" + domain_id + "' is empty");
  return out;
}

bool preprocess_image(const TensorF& raw, std::size_t target_size, TensorF& out) {
  require_rank(raw, 3, "preprocess image");
  if (raw.dim(0) != 1)
    throw std::invalid_argument("preprocess: image must have one channel");
  float lo = raw[0], hi = raw[0];
  for (std::size_t i = 0; i < raw.size(); ++i) {
    lo = std::min(lo, raw[i]);
    hi = std::max(hi, raw[i]);
  }
  if (hi <= 1e-6f) return false;  // black slice
  TensorF scaled({1, raw.dim(1), raw.dim(2)});
  const float span = hi - lo;
  for (std::size_t i = 0; i < raw.size(); ++i)
    scaled[i] = span > 0.0f ? (raw[i] - lo) / span : 0.0f;
  if (raw.dim(1) == target_size && raw.dim(2) == target_size) {
    out = std::move(scaled);
  } else {
    TensorF resized = bilinear_resize(scaled.reshaped({1, 1, raw.dim(1), raw.dim(2)}),
                                      target_size, target_size);
    out = resized.reshaped({1, target_size, target_size});
  }
  return true;
}

TensorI resize_mask_nearest(const TensorI& mask, std::size_t target_size) {
  require_rank(mask, 2, "resize mask");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  if (h == target_size && w == target_size) return mask;
  TensorI out({target_size, target_size});
  for (std::size_t y = 0; y < target_size; ++y)
    for (std::size_t x = 0; x < target_size; ++x) {
      const std::size_t sy = std::min(h - 1, std::size_t((double(y) + 0.5) * double(h) /
                                                         double(target_size)));
      const std::size_t sx = std::min(w - 1, std::size_t((double(x) + 0.5) * double(w) /
                                                         double(target_size)));
      out.at2(y, x) = mask.at2(sy, sx);
    }
  return out;
}

std::vector<SegmentationSample> load_external_slices(const fs::path& dir,
                                                     std::size_t target_size,
                                                     const std::string& domain_id) {
  if (!fs::is_directory(dir))
    throw std::invalid_argument("external slice directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".clra") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<SegmentationSample> out;
  for (const auto& f : files) {
    Container c = Container::load(f);
    TensorF raw = c.get_f32("image");
    if (raw.rank() == 2) raw = raw.reshaped({std::size_t(1), raw.dim(0), raw.dim(1)});
    TensorF img;
    if (!preprocess_image(raw, target_size, img)) continue;  // black slice dropped
    SegmentationSample s;
    s.image = std::move(img);
    s.mask = resize_mask_nearest(c.get_i32("mask"), target_size);
    s.domain_id = domain_id;
    s.sample_id = f.stem().string();
    out.push_back(std::move(s));
  }
  return out;
}

TensorF stack_images(const std::vector<SegmentationSample>& samples,
                     const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("stack_images: empty index list");
  const std::size_t h = samples.at(indices[0]).image.dim(1);
  const std::size_t w = samples.at(indices[0]).image.dim(2);
  TensorF out({indices.size(), 1, h, w});
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const TensorF& img = samples.at(indices[n]).image;
    require_shape(img, {1, h, w}, "stack_images sample");
    std::copy(img.vec().begin(), img.vec().end(),
              out.vec().begin() + std::ptrdiff_t(n * h * w));
  }
  return out;
}

TensorI stack_masks(const std::vector<SegmentationSample>& samples,
                    const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("stack_masks: empty index list");
  const std::size_t h = samples.at(indices[0]).mask.dim(0);
  const std::size_t w = samples.at(indices[0]).mask.dim(1);
  TensorI out({indices.size(), h, w});
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const TensorI& m = samples.at(indices[n]).mask;
    require_shape(m, {h, w}, "stack_masks sample");
    std::copy(m.vec().begin(), m.vec().end(),
              out.vec().begin() + std::ptrdiff_t(n * h * w));
  }
  return out;
}

}  // namespace convlora
