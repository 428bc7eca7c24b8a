#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "convlora/tensor.hpp"

namespace convlora {

// Exact squared Euclidean distance to the nearest nonzero pixel, per pixel.
// All-zero input yields a tensor of +infinity. Squared distances on an
// integer grid are exact integers, so comparisons against a squared
// tolerance reproduce brute-force nearest-neighbor search bit for bit.
TensorD distance_transform_sq(const TensorI& mask);

// Foreground pixels with at least one background 4-neighbor; pixels on the
// image border count the outside as background.
TensorI boundary_mask(const TensorI& mask);

// Fraction of the two boundaries lying within `tolerance_px` of each other.
// Both masks empty -> 1.0; exactly one empty -> 0.0.
double surface_dice(const TensorI& pred, const TensorI& truth, double tolerance_px);

// 2|P n T| / (|P| + |T|); both empty -> 1.0.
double volumetric_dice(const TensorI& pred, const TensorI& truth);

struct ParamReportLine {
  std::string name;
  std::size_t total = 0;
  std::size_t trainable = 0;
};

struct ParamReport {
  std::vector<ParamReportLine> lines;
  std::size_t total_params = 0;
  std::size_t trainable_params = 0;
  double reduction_percent = 0.0;  // 100 * (1 - trainable/total)

  std::string to_text() const;
};

ParamReport make_param_report(std::vector<ParamReportLine> lines);

}  // namespace convlora
