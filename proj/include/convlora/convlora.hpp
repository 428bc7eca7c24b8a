#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

#include "convlora/ops.hpp"
#include "convlora/rng.hpp"
#include "convlora/tensor.hpp"

namespace convlora {

// Frozen convolution kernel W plus trainable low-rank delta X*Y. The 4-d
// kernel is treated as an m x n matrix with m = C_out and n = C_in*k*k; the
// product X*Y is reshaped row-major back into kernel layout, so row i of the
// matrix is output channel i's full filter.
template <typename T>
struct ConvLoRAAdapter {
  Tensor<T> frozen_kernel;  // [C_out, C_in, k, k], never updated
  Tensor<T> frozen_bias;    // [C_out], never updated
  Tensor<T> X;              // [m, r], Gaussian init
  Tensor<T> Y;              // [r, n], zero init
  int rank = 0;
  ConvSpec spec;
  double scale = 1.0;  // multiplier on the delta branch; 1 unless configured

  std::size_t m() const { return frozen_kernel.dim(0); }
  std::size_t n() const { return frozen_kernel.dim(1) * frozen_kernel.dim(2) * frozen_kernel.dim(3); }
  std::size_t trainable_param_count() const {
    return m() * static_cast<std::size_t>(rank) + static_cast<std::size_t>(rank) * n();
  }
};

template <typename T>
struct ConvLoRAGrads {
  Tensor<T> grad_X;
  Tensor<T> grad_Y;
  Tensor<T> grad_input;
};

template <typename T>
ConvLoRAAdapter<T> init_adapter(const Tensor<T>& frozen_kernel, const Tensor<T>& frozen_bias,
                                const ConvSpec& spec, int r, std::uint64_t seed) {
  spec.validate();
  require_shape(frozen_kernel,
                {static_cast<std::size_t>(spec.out_channels),
                 static_cast<std::size_t>(spec.in_channels),
                 static_cast<std::size_t>(spec.kernel_size),
                 static_cast<std::size_t>(spec.kernel_size)},
                "init_adapter kernel");
  require_shape(frozen_bias, {static_cast<std::size_t>(spec.out_channels)}, "init_adapter bias");
  ConvLoRAAdapter<T> a;
  a.frozen_kernel = frozen_kernel;
  a.frozen_bias = frozen_bias;
  a.spec = spec;
  const std::size_t m = a.m(), n = a.n();
  if (r < 1 || static_cast<std::size_t>(r) >= std::min(m, n))
    throw std::invalid_argument("init_adapter: rank " + std::to_string(r) +
                                " outside [1, min(m,n)) with m=" + std::to_string(m) +
                                " n=" + std::to_string(n));
  a.rank = r;
  a.X = Tensor<T>({m, static_cast<std::size_t>(r)});
  Rng rng(seed);
  const double sigma = 1.0 / std::sqrt(static_cast<double>(m));
  for (std::size_t i = 0; i < a.X.size(); ++i) a.X[i] = static_cast<T>(rng.normal(0.0, sigma));
  a.Y = Tensor<T>::zeros({static_cast<std::size_t>(r), n});
  return a;
}

// X*Y reshaped into kernel layout, including the configured scale
template <typename T>
Tensor<T> delta_kernel(const ConvLoRAAdapter<T>& a) {
  const std::size_t m = a.m(), n = a.n(), r = static_cast<std::size_t>(a.rank);
  Tensor<T> delta = Tensor<T>::zeros(a.frozen_kernel.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (std::size_t q = 0; q < r; ++q) acc += a.X.at2(i, q) * a.Y.at2(q, j);
      delta[i * n + j] = static_cast<T>(a.scale * acc);
    }
  return delta;
}

// h = W x + (XY) x: both branches convolved, summed coordinate-wise, bias once
template <typename T>
Tensor<T> adapter_forward(const ConvLoRAAdapter<T>& a, const Tensor<T>& x) {
  Tensor<T> base = conv2d_forward(x, a.frozen_kernel, a.frozen_bias, a.spec);
  const Tensor<T> zero_bias = Tensor<T>::zeros({a.m()});
  const Tensor<T> extra = conv2d_forward(x, delta_kernel(a), zero_bias, a.spec);
  for (std::size_t i = 0; i < base.size(); ++i) base[i] += extra[i];
  return base;
}

// Gradients reach only X, Y, and the input. The input gradient flows through
// both branches, which equals one backward pass through the summed kernel.
template <typename T>
ConvLoRAGrads<T> adapter_backward(const ConvLoRAAdapter<T>& a, const Tensor<T>& x,
                                  const Tensor<T>& grad_out) {
  Tensor<T> effective = a.frozen_kernel;
  const Tensor<T> delta = delta_kernel(a);
  for (std::size_t i = 0; i < effective.size(); ++i) effective[i] += delta[i];
  auto g = conv2d_backward(grad_out, x, effective, a.spec);

  const std::size_t m = a.m(), n = a.n(), r = static_cast<std::size_t>(a.rank);
  ConvLoRAGrads<T> out{Tensor<T>::zeros({m, r}), Tensor<T>::zeros({r, n}),
                       std::move(g.grad_input)};
  // dL/dX = scale * G Y^T, dL/dY = scale * X^T G, with G = dL/d(delta kernel)
  const Tensor<T>& gk = g.grad_kernel;  // [m, n] in flat row-major terms
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t q = 0; q < r; ++q) {
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += gk[i * n + j] * a.Y.at2(q, j);
      out.grad_X.at2(i, q) = static_cast<T>(a.scale * acc);
    }
  for (std::size_t q = 0; q < r; ++q)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (std::size_t i = 0; i < m; ++i) acc += a.X.at2(i, q) * gk[i * n + j];
      out.grad_Y.at2(q, j) = static_cast<T>(a.scale * acc);
    }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> merge(const ConvLoRAAdapter<T>& a) {
  Tensor<T> merged = a.frozen_kernel;
  const Tensor<T> delta = delta_kernel(a);
  for (std::size_t i = 0; i < merged.size(); ++i) merged[i] += delta[i];
  return {std::move(merged), a.frozen_bias};
}

}  // namespace convlora
