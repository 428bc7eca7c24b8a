#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "convlora/rng.hpp"
#include "convlora/tensor.hpp"

namespace convlora {

// One tensor under test: gradcheck perturbs *value and compares against *grad.
struct GradCheckParam {
  std::string name;
  Tensor<double>* value;
  const Tensor<double>* grad;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  double denom_floor = 1e-6;      // keeps tiny-gradient coordinates from blowing up the ratio
  std::size_t max_per_tensor = 0; // 0 means check every coordinate
  std::uint64_t sample_seed = 17;
};

// Central differences in double precision. grad_fn must populate every
// param's grad tensor for the current values; loss_fn must be a pure
// evaluation of the same scalar objective.
inline GradCheckReport gradcheck(const std::function<double()>& loss_fn,
                                 const std::function<void()>& grad_fn,
                                 const std::vector<GradCheckParam>& params,
                                 const GradCheckOptions& opt = {}) {
  grad_fn();
  std::vector<std::vector<double>> analytic(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].grad->same_shape(*params[i].value))
      throw std::invalid_argument("gradcheck: grad/value shape mismatch for " + params[i].name);
    analytic[i] = params[i].grad->vec();
  }

  GradCheckReport report;
  Rng rng(opt.sample_seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& value = *params[pi].value;
    std::vector<std::size_t> coords;
    if (opt.max_per_tensor == 0 || value.size() <= opt.max_per_tensor) {
      coords.resize(value.size());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      // distinct random coordinates, order irrelevant
      std::vector<std::size_t> all(value.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      rng.shuffle(all.begin(), all.end());
      coords.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(opt.max_per_tensor));
    }
    for (std::size_t idx : coords) {
      const double saved = value[idx];
      value[idx] = saved + opt.step;
      const double lp = loss_fn();
      value[idx] = saved - opt.step;
      const double lm = loss_fn();
      value[idx] = saved;
      const double numeric = (lp - lm) / (2.0 * opt.step);
      const double a = analytic[pi][idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.denom_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = params[pi].name;
        report.worst_index = idx;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace convlora
