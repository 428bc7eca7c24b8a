#include "convlora/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace convlora {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1-d squared distance transform via the lower envelope of parabolas.
// On integer-valued f the envelope arithmetic is exact in doubles.
void dt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
           std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    double s;
    while (true) {
      if (f[v[k]] == kInf) {
        // previous vertex is unreachable; replace it outright
        if (k == 0) {
          v[0] = q;
          z[0] = -kInf;
          z[1] = kInf;
          break;
        }
        --k;
        continue;
      }
      s = ((f[q] + static_cast<double>(q) * q) - (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
          (2.0 * q - 2.0 * v[k]);
      if (s <= z[k]) {
        --k;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = kInf;
      break;
    }
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = (f[v[k]] == kInf) ? kInf : dq * dq + f[v[k]];
  }
}

void check_binary(const TensorI& mask, const char* which) {
  require_rank(mask, 2, which);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] != 0 && mask[i] != 1)
      throw std::invalid_argument(std::string(which) + ": mask must be binary, found value " +
                                  std::to_string(mask[i]));
}

}  // namespace

TensorD distance_transform_sq(const TensorI& mask) {
  check_binary(mask, "distance_transform");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  TensorD dist({h, w});

  // columns first
  {
    std::vector<double> f(h), d(h), z(h + 1);
    std::vector<int> v(h);
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t y = 0; y < h; ++y) f[y] = mask.at2(y, x) ? 0.0 : kInf;
      dt_1d(f, d, v, z);
      for (std::size_t y = 0; y < h; ++y) dist.at2(y, x) = d[y];
    }
  }
  // then rows
  {
    std::vector<double> f(w), d(w), z(w + 1);
    std::vector<int> v(w);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) f[x] = dist.at2(y, x);
      dt_1d(f, d, v, z);
      for (std::size_t x = 0; x < w; ++x) dist.at2(y, x) = d[x];
    }
  }
  return dist;
}

TensorI boundary_mask(const TensorI& mask) {
  check_binary(mask, "boundary_mask");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  TensorI b = TensorI::zeros({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!mask.at2(y, x)) continue;
      const bool edge = (y == 0 || !mask.at2(y - 1, x)) || (y + 1 == h || !mask.at2(y + 1, x)) ||
                        (x == 0 || !mask.at2(y, x - 1)) || (x + 1 == w || !mask.at2(y, x + 1));
      if (edge) b.at2(y, x) = 1;
    }
  return b;
}

double surface_dice(const TensorI& pred, const TensorI& truth, double tolerance_px) {
  check_binary(pred, "surface_dice pred");
  check_binary(truth, "surface_dice truth");
  if (pred.shape() != truth.shape())
    throw std::invalid_argument("surface_dice: shape mismatch " + pred.shape_str() + " vs " +
                                truth.shape_str());
  if (tolerance_px < 0) throw std::invalid_argument("surface_dice: negative tolerance");

  const TensorI bp = boundary_mask(pred);
  const TensorI bt = boundary_mask(truth);
  std::size_t np = 0, nt = 0;
  for (std::size_t i = 0; i < bp.size(); ++i) np += static_cast<std::size_t>(bp[i]);
  for (std::size_t i = 0; i < bt.size(); ++i) nt += static_cast<std::size_t>(bt[i]);
  if (np == 0 && nt == 0) return 1.0;
  if (np == 0 || nt == 0) return 0.0;

  const double tol_sq = tolerance_px * tolerance_px;
  const TensorD dist_to_t = distance_transform_sq(bt);
  const TensorD dist_to_p = distance_transform_sq(bp);
  std::size_t hit_p = 0, hit_t = 0;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    if (bp[i] && dist_to_t[i] <= tol_sq) ++hit_p;
    if (bt[i] && dist_to_p[i] <= tol_sq) ++hit_t;
  }
  return static_cast<double>(hit_p + hit_t) / static_cast<double>(np + nt);
}

double volumetric_dice(const TensorI& pred, const TensorI& truth) {
  check_binary(pred, "volumetric_dice pred");
  check_binary(truth, "volumetric_dice truth");
  if (pred.shape() != truth.shape())
    throw std::invalid_argument("volumetric_dice: shape mismatch " + pred.shape_str() + " vs " +
                                truth.shape_str());
  std::size_t inter = 0, np = 0, nt = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    np += static_cast<std::size_t>(pred[i]);
    nt += static_cast<std::size_t>(truth[i]);
    inter += static_cast<std::size_t>(pred[i] & truth[i]);
  }
  if (np + nt == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
}

ParamReport make_param_report(std::vector<ParamReportLine> lines) {
  ParamReport r;
  r.lines = std::move(lines);
  for (const auto& l : r.lines) {
    if (l.trainable > l.total)
      throw std::invalid_argument("param report: line '" + l.name +
                                  "' has trainable > total");
    r.total_params += l.total;
    r.trainable_params += l.trainable;
  }
  r.reduction_percent =
      r.total_params == 0
          ? 0.0
          : 100.0 * (1.0 - static_cast<double>(r.trainable_params) /
                               static_cast<double>(r.total_params));
  return r;
}

std::string ParamReport::to_text() const {
  std::ostringstream os;
  os << "layer                                    total   trainable\n";
  for (const auto& l : lines) {
    os << l.name;
    for (std::size_t i = l.name.size(); i < 38; ++i) os << ' ';
    os << ' ' << l.total;
    os << "  " << l.trainable << '\n';
  }
  os << "total " << total_params << "  trainable " << trainable_params << "  reduction "
     << reduction_percent << "%\n";
  return os.str();
}

}  // namespace convlora
