#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "convlora/tensor.hpp"

namespace convlora {

// TRAIN: normalize by batch stats, update running stats, gamma/beta trainable.
// ADAPT: same math, but gamma/beta are contractually frozen (target-domain
//        statistics re-estimation with no new trainable parameters).
// EVAL:  fixed affine map from running stats; no state mutation.
enum class BnMode { TRAIN, ADAPT, EVAL };

inline const char* to_string(BnMode m) {
  switch (m) {
    case BnMode::TRAIN: return "TRAIN";
    case BnMode::ADAPT: return "ADAPT";
    case BnMode::EVAL: return "EVAL";
  }
  return "?";
}

template <typename T>
struct BnCache {
  BnMode mode = BnMode::EVAL;
  Tensor<T> xhat;               // normalized input, batch-stat modes only
  std::vector<double> inv_std;  // per channel, for whichever stats were used
  std::size_t m_count = 0;      // N*H*W reduction size
};

template <typename T>
struct BnGrads {
  Tensor<T> grad_input;
  Tensor<T> grad_gamma;
  Tensor<T> grad_beta;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels, double momentum = 0.1, double epsilon = 1e-5)
      : gamma(Tensor<T>::full({channels}, T(1))),
        beta(Tensor<T>::zeros({channels})),
        running_mean(Tensor<T>::zeros({channels})),
        running_var(Tensor<T>::full({channels}, T(1))),
        momentum(momentum),
        epsilon(epsilon) {
    if (momentum <= 0.0 || momentum > 1.0)
      throw std::invalid_argument("batchnorm: momentum must be in (0,1]");
    if (epsilon <= 0.0) throw std::invalid_argument("batchnorm: epsilon must be positive");
  }

  std::size_t channels() const { return gamma.size(); }

  Tensor<T> forward(const Tensor<T>& x, BnCache<T>* cache) {
    require_rank(x, 4, "batchnorm input");
    if (x.dim(1) != channels())
      throw std::invalid_argument("batchnorm: input has " + std::to_string(x.dim(1)) +
                                  " channels, layer has " + std::to_string(channels()));
    switch (mode) {
      case BnMode::EVAL:
        return forward_eval(x, cache);
      case BnMode::ADAPT:
        if (x.dim(0) < 2)
          throw std::invalid_argument(
              "batchnorm: ADAPT mode needs batch size >= 2 for meaningful statistics, got " +
              std::to_string(x.dim(0)));
        [[fallthrough]];
      case BnMode::TRAIN:
        return forward_batch_stats(x, cache);
    }
    throw std::logic_error("batchnorm: unreachable mode");
  }

  // Gradients for all three tensors; the caller's freeze policy decides which
  // are applied. EVAL/ADAPT callers simply ignore grad_gamma/grad_beta.
  BnGrads<T> backward(const Tensor<T>& grad_out, const BnCache<T>& cache) const {
    const std::size_t c = channels();
    BnGrads<T> g{Tensor<T>(grad_out.shape()), Tensor<T>::zeros({c}), Tensor<T>::zeros({c})};
    const std::size_t n_batch = grad_out.dim(0), h = grad_out.dim(2), w = grad_out.dim(3);
    const std::size_t plane = h * w;

    if (cache.mode == BnMode::EVAL) {
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T k = static_cast<T>(static_cast<double>(gamma[ci]) * cache.inv_std[ci]);
        for (std::size_t n = 0; n < n_batch; ++n) {
          const T* go = &grad_out.at4(n, ci, 0, 0);
          T* gi = &g.grad_input.at4(n, ci, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) gi[i] = k * go[i];
        }
      }
      ensure_finite(g.grad_input, "batchnorm backward (eval)");
      return g;
    }

    if (!cache.xhat.same_shape(grad_out))
      throw std::invalid_argument("batchnorm backward: cache shape " + cache.xhat.shape_str() +
                                  " != grad shape " + grad_out.shape_str());
    const double m_count = static_cast<double>(cache.m_count);
    for (std::size_t ci = 0; ci < c; ++ci) {
      double sum_g = 0, sum_gx = 0;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const T* go = &grad_out.at4(n, ci, 0, 0);
        const T* xh = &cache.xhat.at4(n, ci, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          sum_g += go[i];
          sum_gx += static_cast<double>(go[i]) * xh[i];
        }
      }
      g.grad_gamma[ci] = static_cast<T>(sum_gx);
      g.grad_beta[ci] = static_cast<T>(sum_g);
      const double k = static_cast<double>(gamma[ci]) * cache.inv_std[ci];
      for (std::size_t n = 0; n < n_batch; ++n) {
        const T* go = &grad_out.at4(n, ci, 0, 0);
        const T* xh = &cache.xhat.at4(n, ci, 0, 0);
        T* gi = &g.grad_input.at4(n, ci, 0, 0);
        for (std::size_t i = 0; i < plane; ++i)
          gi[i] = static_cast<T>(k * (go[i] - sum_g / m_count - xh[i] * sum_gx / m_count));
      }
    }
    ensure_finite(g.grad_input, "batchnorm backward");
    return g;
  }

  // source-statistics snapshot, so every target adaptation starts identically
  void snapshot_source() {
    src_mean = running_mean;
    src_var = running_var;
    has_snapshot = true;
  }
  void reset_stats() {
    if (!has_snapshot) throw std::logic_error("batchnorm: reset requested before any snapshot");
    running_mean = src_mean;
    running_var = src_var;
  }
  bool snapshot_taken() const { return has_snapshot; }

  // exact whole-set statistics, bypassing the EMA (one full sweep)
  void set_stats(const Tensor<T>& mean, const Tensor<T>& var) {
    require_shape(mean, {channels()}, "batchnorm set_stats mean");
    require_shape(var, {channels()}, "batchnorm set_stats var");
    for (std::size_t i = 0; i < var.size(); ++i)
      if (var[i] < T(0)) throw std::invalid_argument("batchnorm: negative variance");
    running_mean = mean;
    running_var = var;
  }

  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  Tensor<T> src_mean, src_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
  BnMode mode = BnMode::TRAIN;
  bool has_snapshot = false;

 private:
  Tensor<T> forward_eval(const Tensor<T>& x, BnCache<T>* cache) const {
    const std::size_t n_batch = x.dim(0), c = channels(), plane = x.dim(2) * x.dim(3);
    Tensor<T> out(x.shape());
    std::vector<double> inv_std(c);
    for (std::size_t ci = 0; ci < c; ++ci) {
      inv_std[ci] = 1.0 / std::sqrt(static_cast<double>(running_var[ci]) + epsilon);
      const T scale = static_cast<T>(static_cast<double>(gamma[ci]) * inv_std[ci]);
      const T shift = static_cast<T>(static_cast<double>(beta[ci]) -
                                     static_cast<double>(running_mean[ci]) *
                                         static_cast<double>(gamma[ci]) * inv_std[ci]);
      for (std::size_t n = 0; n < n_batch; ++n) {
        const T* in = &x.at4(n, ci, 0, 0);
        T* o = &out.at4(n, ci, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) o[i] = scale * in[i] + shift;
      }
    }
    if (cache) {
      cache->mode = BnMode::EVAL;
      cache->inv_std = std::move(inv_std);
      cache->xhat = Tensor<T>();
      cache->m_count = 0;
    }
    ensure_finite(out, "batchnorm forward (eval)");
    return out;
  }

  Tensor<T> forward_batch_stats(const Tensor<T>& x, BnCache<T>* cache) {
    const std::size_t n_batch = x.dim(0), c = channels(), plane = x.dim(2) * x.dim(3);
    const std::size_t m_count = n_batch * plane;
    if (m_count < 2)
      throw std::invalid_argument("batchnorm: need at least 2 values per channel for variance");
    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());
    std::vector<double> inv_std(c);
    for (std::size_t ci = 0; ci < c; ++ci) {
      double sum = 0, sumsq = 0;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const T* in = &x.at4(n, ci, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          sum += in[i];
          sumsq += static_cast<double>(in[i]) * in[i];
        }
      }
      const double mean = sum / static_cast<double>(m_count);
      double var = sumsq / static_cast<double>(m_count) - mean * mean;  // biased
      if (var < 0) var = 0;  // guard fp cancellation
      inv_std[ci] = 1.0 / std::sqrt(var + epsilon);
      const T g = gamma[ci], b = beta[ci];
      for (std::size_t n = 0; n < n_batch; ++n) {
        const T* in = &x.at4(n, ci, 0, 0);
        T* xh = &xhat.at4(n, ci, 0, 0);
        T* o = &out.at4(n, ci, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          const T v = static_cast<T>((in[i] - mean) * inv_std[ci]);
          xh[i] = v;
          o[i] = g * v + b;
        }
      }
      running_mean[ci] =
          static_cast<T>((1.0 - momentum) * running_mean[ci] + momentum * mean);
      running_var[ci] = static_cast<T>((1.0 - momentum) * running_var[ci] + momentum * var);
    }
    if (cache) {
      cache->mode = mode;
      cache->xhat = std::move(xhat);
      cache->inv_std = std::move(inv_std);
      cache->m_count = m_count;
    }
    ensure_finite(out, "batchnorm forward");
    return out;
  }
};

}  // namespace convlora
