#pragma once

// Synthetic multi-domain segmentation suite plus dataset/preprocessing IO.
//
// A base sample is a smooth-blob "brain" (union of 1-3 soft ellipses) inside
// a bright "skull" rim, with an exact binary mask of the blob union.  Each
// domain renders the same base geometry through a fixed intensity transform
// (blur -> bias field -> scale -> gamma -> noise -> clip), so masks are
// identical across domains for a given sample id and only intensities shift.
//
// On disk: <root>/<domain_id>/{train,val,test}/<sample_id>.clra with entries
// "image" [1,H,W] f32 and "mask" [H,W] i32, plus one manifest.txt at the
// root listing ids and split assignment.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "convlora/tensor.hpp"

namespace convlora {

struct DomainSpec {
  std::string domain_id;
  double gamma = 1.0;             // contrast exponent, > 0
  double intensity_scale = 1.0;
  double additive_noise_std = 0.0;
  double bias_field_strength = 0.0;  // amplitude of the smooth multiplicative field
  double blur_sigma = 0.0;

  void validate() const;
};

struct SegmentationSample {
  TensorF image;  // [1,H,W], values in [0,1]
  TensorI mask;   // [H,W], values in [0, num_classes)
  std::string domain_id;
  std::string sample_id;
};

// Fixed presets, source first then five targets of increasing severity.
const std::vector<DomainSpec>& domain_suite();
const DomainSpec& domain_by_id(const std::string& domain_id);
std::vector<std::string> target_domain_ids();
const std::string& hardest_domain_id();

// Base geometry (clean source-style image + mask), deterministic in
// (seed, sample_id).
struct BaseSample {
  TensorF image;  // [1,S,S]
  TensorI mask;   // [S,S]
};
BaseSample make_base_sample(std::size_t image_size, const std::string& sample_id,
                            std::uint64_t seed);

// Intensity-only domain rendering; the mask never passes through here.
TensorF apply_domain(const TensorF& clean, const DomainSpec& spec,
                     std::uint64_t xform_seed);

struct SuiteSpec {
  std::size_t n_train = 16;
  std::size_t n_val = 2;
  std::size_t n_test = 10;
  std::size_t image_size = 64;
  std::uint64_t seed = 1;

  void validate() const;
};

void generate_domain_suite(const std::filesystem::path& root, const SuiteSpec& spec);

// Manifest access and split loading.
struct ManifestEntry {
  std::string sample_id;
  std::string split;  // "train" | "val" | "test"
};
struct Manifest {
  std::uint64_t seed = 0;
  std::size_t image_size = 0;
  std::vector<std::string> domains;
  std::vector<ManifestEntry> entries;

  std::vector<std::string> ids_for(const std::string& split) const;
};
Manifest read_manifest(const std::filesystem::path& root);

std::vector<SegmentationSample> load_split(const std::filesystem::path& root,
                                           const std::string& domain_id,
                                           const std::string& split);

void save_sample(const std::filesystem::path& path, const TensorF& image,
                 const TensorI& mask);
SegmentationSample load_sample(const std::filesystem::path& path,
                               const std::string& domain_id,
                               const std::string& sample_id);

// Preprocessing for externally supplied slices: black-slice drop, min-max
// scaling, bilinear resize.  Returns false (and leaves `out` untouched) for
// a dropped slice.
bool preprocess_image(const TensorF& raw, std::size_t target_size, TensorF& out);

// Nearest-neighbor label resize for external masks.
TensorI resize_mask_nearest(const TensorI& mask, std::size_t target_size);

// Optional external-data path: a directory of per-sample .clra containers
// with entries "image" (f32 [H,W] or [1,H,W], any intensity range) and
// "mask" (i32 [H,W]).  Black slices are dropped.
std::vector<SegmentationSample> load_external_slices(
    const std::filesystem::path& dir, std::size_t target_size,
    const std::string& domain_id);

// Batch assembly: stacks images into [N,1,H,W] and masks into [N,H,W].
TensorF stack_images(const std::vector<SegmentationSample>& samples,
                     const std::vector<std::size_t>& indices);
TensorI stack_masks(const std::vector<SegmentationSample>& samples,
                    const std::vector<std::size_t>& indices);

}  // namespace convlora
