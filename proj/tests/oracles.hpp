#pragma once

// Reference implementations written straight from the operator definitions,
// kept deliberately naive and independent of the library's code paths.

#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "convlora/tensor.hpp"

namespace oracle {

using convlora::Tensor;
using convlora::TensorI;

template <typename T>
Tensor<T> conv2d(const Tensor<T>& in, const Tensor<T>& kernel, const Tensor<T>& bias, int stride,
                 int padding) {
  const std::size_t n_batch = in.dim(0), c_in = in.dim(1);
  const int h = static_cast<int>(in.dim(2)), w = static_cast<int>(in.dim(3));
  const std::size_t c_out = kernel.dim(0);
  const int k = static_cast<int>(kernel.dim(2));
  const std::size_t ho = static_cast<std::size_t>((h + 2 * padding - k) / stride + 1);
  const std::size_t wo = static_cast<std::size_t>((w + 2 * padding - k) / stride + 1);
  Tensor<T> out({n_batch, c_out, ho, wo});
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t co = 0; co < c_out; ++co)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) {
          double acc = bias[co];
          for (std::size_t ci = 0; ci < c_in; ++ci)
            for (int kh = 0; kh < k; ++kh)
              for (int kw = 0; kw < k; ++kw) {
                const int ih = static_cast<int>(oh) * stride + kh - padding;
                const int iw = static_cast<int>(ow) * stride + kw - padding;
                if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
                acc += static_cast<double>(kernel.at4(co, ci, static_cast<std::size_t>(kh),
                                                      static_cast<std::size_t>(kw))) *
                       in.at4(n, ci, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw));
              }
          out.at4(n, co, oh, ow) = static_cast<T>(acc);
        }
  return out;
}

template <typename T>
Tensor<T> maxpool(const Tensor<T>& in, int window) {
  const std::size_t n_batch = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
  const auto uw = static_cast<std::size_t>(window);
  Tensor<T> out({n_batch, c, h / uw, w / uw});
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oh = 0; oh < h / uw; ++oh)
        for (std::size_t ow = 0; ow < w / uw; ++ow) {
          T best = in.at4(n, ci, oh * uw, ow * uw);
          for (std::size_t kh = 0; kh < uw; ++kh)
            for (std::size_t kw = 0; kw < uw; ++kw)
              best = std::max(best, in.at4(n, ci, oh * uw + kh, ow * uw + kw));
          out.at4(n, ci, oh, ow) = best;
        }
  return out;
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  const std::size_t n_batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out(x.shape());
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t ih = 0; ih < h; ++ih)
      for (std::size_t iw = 0; iw < w; ++iw) {
        long double denom = 0;
        for (std::size_t ci = 0; ci < c; ++ci) denom += std::exp(static_cast<long double>(x.at4(n, ci, ih, iw)));
        for (std::size_t ci = 0; ci < c; ++ci)
          out.at4(n, ci, ih, iw) =
              static_cast<T>(std::exp(static_cast<long double>(x.at4(n, ci, ih, iw))) / denom);
      }
  return out;
}

template <typename T>
double cross_entropy(const Tensor<T>& logits, const TensorI& labels) {
  const Tensor<T> p = oracle::softmax_channels(logits);
  const std::size_t n_batch = logits.dim(0), h = logits.dim(2), w = logits.dim(3);
  long double total = 0;
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t ih = 0; ih < h; ++ih)
      for (std::size_t iw = 0; iw < w; ++iw) {
        const auto label = static_cast<std::size_t>(labels.at3(n, ih, iw));
        total += -std::log(static_cast<long double>(p.at4(n, label, ih, iw)));
      }
  return static_cast<double>(total / static_cast<long double>(n_batch * h * w));
}

// Batch normalization written as plain per-channel loops in long double.
template <typename T>
struct BnOracleOut {
  Tensor<T> output;
  std::vector<double> batch_mean, batch_var;
};

template <typename T>
BnOracleOut<T> batchnorm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                               double epsilon) {
  const std::size_t n_batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  BnOracleOut<T> r{Tensor<T>(x.shape()), std::vector<double>(c), std::vector<double>(c)};
  for (std::size_t ci = 0; ci < c; ++ci) {
    long double sum = 0;
    for (std::size_t n = 0; n < n_batch; ++n)
      for (std::size_t ih = 0; ih < h; ++ih)
        for (std::size_t iw = 0; iw < w; ++iw) sum += x.at4(n, ci, ih, iw);
    const long double mean = sum / static_cast<long double>(n_batch * h * w);
    long double acc = 0;
    for (std::size_t n = 0; n < n_batch; ++n)
      for (std::size_t ih = 0; ih < h; ++ih)
        for (std::size_t iw = 0; iw < w; ++iw) {
          const long double d = x.at4(n, ci, ih, iw) - mean;
          acc += d * d;
        }
    const long double var = acc / static_cast<long double>(n_batch * h * w);
    r.batch_mean[ci] = static_cast<double>(mean);
    r.batch_var[ci] = static_cast<double>(var);
    for (std::size_t n = 0; n < n_batch; ++n)
      for (std::size_t ih = 0; ih < h; ++ih)
        for (std::size_t iw = 0; iw < w; ++iw)
          r.output.at4(n, ci, ih, iw) = static_cast<T>(
              gamma[ci] * ((x.at4(n, ci, ih, iw) - mean) / std::sqrt(var + epsilon)) + beta[ci]);
  }
  return r;
}

// Surface dice by O(B^2) pairwise integer distances, straight from the
// definition: boundary = foreground pixel with a background 4-neighbor
// (outside the image counts as background).
inline std::vector<std::pair<int, int>> boundary_points(const TensorI& mask) {
  const int h = static_cast<int>(mask.dim(0)), w = static_cast<int>(mask.dim(1));
  std::vector<std::pair<int, int>> pts;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!mask.at2(static_cast<std::size_t>(y), static_cast<std::size_t>(x))) continue;
      auto bg = [&](int yy, int xx) {
        return yy < 0 || yy >= h || xx < 0 || xx >= w ||
               !mask.at2(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
      };
      if (bg(y - 1, x) || bg(y + 1, x) || bg(y, x - 1) || bg(y, x + 1)) pts.emplace_back(y, x);
    }
  return pts;
}

inline double surface_dice_bruteforce(const TensorI& pred, const TensorI& truth,
                                      double tolerance_px) {
  const auto bp = boundary_points(pred);
  const auto bt = boundary_points(truth);
  if (bp.empty() && bt.empty()) return 1.0;
  if (bp.empty() || bt.empty()) return 0.0;
  const double tol_sq = tolerance_px * tolerance_px;
  auto count_within = [&](const std::vector<std::pair<int, int>>& from,
                          const std::vector<std::pair<int, int>>& to) {
    std::size_t hits = 0;
    for (const auto& [y, x] : from) {
      long best = std::numeric_limits<long>::max();
      for (const auto& [ty, tx] : to) {
        const long dy = y - ty, dx = x - tx;
        best = std::min(best, dy * dy + dx * dx);
      }
      if (static_cast<double>(best) <= tol_sq) ++hits;
    }
    return hits;
  };
  return static_cast<double>(count_within(bp, bt) + count_within(bt, bp)) /
         static_cast<double>(bp.size() + bt.size());
}

// One Adam update computed coordinate-wise in long double.
template <typename T>
void adam_reference(std::vector<T>& param, const std::vector<T>& grad, std::vector<long double>& m,
                    std::vector<long double>& v, long t, double lr, double b1, double b2,
                    double eps) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = b1 * m[i] + (1.0L - static_cast<long double>(b1)) * grad[i];
    v[i] = b2 * v[i] + (1.0L - static_cast<long double>(b2)) * grad[i] * grad[i];
    const long double mh = m[i] / (1.0L - std::pow(static_cast<long double>(b1), t));
    const long double vh = v[i] / (1.0L - std::pow(static_cast<long double>(b2), t));
    param[i] -= static_cast<T>(lr * mh / (std::sqrt(vh) + eps));
  }
}

}  // namespace oracle
