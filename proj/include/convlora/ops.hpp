#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "convlora/parallel.hpp"
#include "convlora/tensor.hpp"

namespace convlora {

// Square-kernel 2-d convolution geometry. Convolution here is
// cross-correlation (no kernel flip), the usual deep-learning convention.
struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel_size = 3;
  int stride = 1;
  int padding = 0;

  void validate() const {
    if (in_channels < 1 || out_channels < 1)
      throw std::invalid_argument("conv spec: channel counts must be >= 1");
    if (kernel_size < 1) throw std::invalid_argument("conv spec: kernel_size must be >= 1");
    if (stride < 1) throw std::invalid_argument("conv spec: stride must be >= 1");
    if (padding < 0) throw std::invalid_argument("conv spec: padding must be >= 0");
  }

  int out_dim(int in) const {
    int out = (in + 2 * padding - kernel_size) / stride + 1;
    if (in + 2 * padding < kernel_size || out < 1)
      throw std::invalid_argument("conv spec: spatial dim " + std::to_string(in) +
                                  " with kernel " + std::to_string(kernel_size) + ", stride " +
                                  std::to_string(stride) + ", padding " + std::to_string(padding) +
                                  " yields empty output");
    return out;
  }
};

namespace detail {

// y += a * x, contiguous rows; written so gcc vectorizes it
template <typename T>
inline void axpy(T* y, const T* x, T a, std::size_t len) {
  for (std::size_t i = 0; i < len; ++i) y[i] += a * x[i];
}

// fixed-order 8-lane dot product; deterministic and vectorizable
template <typename T>
inline T dot(const T* a, const T* b, std::size_t len) {
  T lane[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
  std::size_t i = 0;
  for (; i + 8 <= len; i += 8)
    for (std::size_t j = 0; j < 8; ++j) lane[j] += a[i + j] * b[i + j];
  T tail = T(0);
  for (; i < len; ++i) tail += a[i] * b[i];
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
         ((lane[4] + lane[5]) + (lane[6] + lane[7])) + tail;
}

// first output index whose input coordinate o*stride + off is >= 0
inline std::size_t out_lo(int off, int stride) {
  if (off >= 0) return 0;
  return static_cast<std::size_t>((-off + stride - 1) / stride);
}

// one past the last output index whose input coordinate stays < extent
inline std::size_t out_hi(int off, int stride, int extent, std::size_t out_extent) {
  int last = extent - 1 - off;  // largest o*stride allowed
  if (last < 0) return 0;
  return std::min<std::size_t>(out_extent, static_cast<std::size_t>(last / stride) + 1);
}

template <typename T>
void check_conv_args(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>* bias,
                     const ConvSpec& spec) {
  spec.validate();
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  const auto k = static_cast<std::size_t>(spec.kernel_size);
  if (input.dim(1) != static_cast<std::size_t>(spec.in_channels))
    throw std::invalid_argument("conv2d: input channel dim is " + std::to_string(input.dim(1)) +
                                ", spec expects " + std::to_string(spec.in_channels));
  if (kernel.dim(0) != static_cast<std::size_t>(spec.out_channels) ||
      kernel.dim(1) != static_cast<std::size_t>(spec.in_channels) || kernel.dim(2) != k ||
      kernel.dim(3) != k)
    throw std::invalid_argument("conv2d: kernel shape " + kernel.shape_str() +
                                " does not match spec [" + std::to_string(spec.out_channels) +
                                "," + std::to_string(spec.in_channels) + "," + std::to_string(k) +
                                "," + std::to_string(k) + "]");
  if (bias && bias->shape() != std::vector<std::size_t>{static_cast<std::size_t>(spec.out_channels)})
    throw std::invalid_argument("conv2d: bias shape " + bias->shape_str() + " must be [" +
                                std::to_string(spec.out_channels) + "]");
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                         const ConvSpec& spec) {
  detail::check_conv_args(input, kernel, &bias, spec);
  const std::size_t n_batch = input.dim(0), c_in = input.dim(1);
  const int h = static_cast<int>(input.dim(2)), w = static_cast<int>(input.dim(3));
  const std::size_t c_out = kernel.dim(0);
  const int k = spec.kernel_size, s = spec.stride, p = spec.padding;
  const std::size_t ho = static_cast<std::size_t>(spec.out_dim(h));
  const std::size_t wo = static_cast<std::size_t>(spec.out_dim(w));

  Tensor<T> out({n_batch, c_out, ho, wo});
  parallel_for(n_batch, [&](std::size_t n) {
    for (std::size_t co = 0; co < c_out; ++co) {
      T* out_plane = &out.at4(n, co, 0, 0);
      const T b = bias[co];
      for (std::size_t i = 0; i < ho * wo; ++i) out_plane[i] = b;
      for (std::size_t ci = 0; ci < c_in; ++ci) {
        const T* in_plane = &input.at4(n, ci, 0, 0);
        for (int kh = 0; kh < k; ++kh) {
          const int hoff = kh - p;
          const std::size_t hlo = detail::out_lo(hoff, s), hhi = detail::out_hi(hoff, s, h, ho);
          for (int kw = 0; kw < k; ++kw) {
            const T wgt = kernel.at4(co, ci, static_cast<std::size_t>(kh),
                                     static_cast<std::size_t>(kw));
            const int woff = kw - p;
            const std::size_t wlo = detail::out_lo(woff, s), whi = detail::out_hi(woff, s, w, wo);
            if (wlo >= whi) continue;
            for (std::size_t oh = hlo; oh < hhi; ++oh) {
              const T* in_row = in_plane + (static_cast<std::size_t>(static_cast<int>(oh) * s + hoff)) * w;
              T* out_row = out_plane + oh * wo;
              if (s == 1) {
                detail::axpy(out_row + wlo, in_row + wlo + woff, wgt, whi - wlo);
              } else {
                for (std::size_t ow = wlo; ow < whi; ++ow)
                  out_row[ow] += wgt * in_row[static_cast<int>(ow) * s + woff];
              }
            }
          }
        }
      }
    }
  });
  ensure_finite(out, "conv2d_forward");
  return out;
}

template <typename T>
struct Conv2dGrads {
  Tensor<T> grad_input;
  Tensor<T> grad_kernel;
  Tensor<T> grad_bias;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                               const Tensor<T>& kernel, const ConvSpec& spec) {
  detail::check_conv_args(input, kernel, static_cast<const Tensor<T>*>(nullptr), spec);
  const std::size_t n_batch = input.dim(0), c_in = input.dim(1);
  const int h = static_cast<int>(input.dim(2)), w = static_cast<int>(input.dim(3));
  const std::size_t c_out = kernel.dim(0);
  const int k = spec.kernel_size, s = spec.stride, p = spec.padding;
  const std::size_t ho = static_cast<std::size_t>(spec.out_dim(h));
  const std::size_t wo = static_cast<std::size_t>(spec.out_dim(w));
  require_shape(grad_out, {n_batch, c_out, ho, wo}, "conv2d_backward grad_out");

  Conv2dGrads<T> g{Tensor<T>::zeros(input.shape()), Tensor<T>::zeros(kernel.shape()),
                   Tensor<T>::zeros({c_out})};

  parallel_for(n_batch, [&](std::size_t n) {
    for (std::size_t co = 0; co < c_out; ++co) {
      const T* go_plane = &grad_out.at4(n, co, 0, 0);
      for (std::size_t ci = 0; ci < c_in; ++ci) {
        T* gi_plane = &g.grad_input.at4(n, ci, 0, 0);
        for (int kh = 0; kh < k; ++kh) {
          const int hoff = kh - p;
          const std::size_t hlo = detail::out_lo(hoff, s), hhi = detail::out_hi(hoff, s, h, ho);
          for (int kw = 0; kw < k; ++kw) {
            const T wgt = kernel.at4(co, ci, static_cast<std::size_t>(kh),
                                     static_cast<std::size_t>(kw));
            const int woff = kw - p;
            const std::size_t wlo = detail::out_lo(woff, s), whi = detail::out_hi(woff, s, w, wo);
            if (wlo >= whi) continue;
            for (std::size_t oh = hlo; oh < hhi; ++oh) {
              T* gi_row = gi_plane + (static_cast<std::size_t>(static_cast<int>(oh) * s + hoff)) * w;
              const T* go_row = go_plane + oh * wo;
              if (s == 1) {
                detail::axpy(gi_row + wlo + woff, go_row + wlo, wgt, whi - wlo);
              } else {
                for (std::size_t ow = wlo; ow < whi; ++ow)
                  gi_row[static_cast<int>(ow) * s + woff] += wgt * go_row[ow];
              }
            }
          }
        }
      }
    }
  });

  // kernel and bias gradients: one owner per output channel
  parallel_for(c_out, [&](std::size_t co) {
    T bias_acc = T(0);
    for (std::size_t n = 0; n < n_batch; ++n) {
      const T* go_plane = &grad_out.at4(n, co, 0, 0);
      for (std::size_t i = 0; i < ho * wo; ++i) bias_acc += go_plane[i];
      for (std::size_t ci = 0; ci < c_in; ++ci) {
        const T* in_plane = &input.at4(n, ci, 0, 0);
        for (int kh = 0; kh < k; ++kh) {
          const int hoff = kh - p;
          const std::size_t hlo = detail::out_lo(hoff, s), hhi = detail::out_hi(hoff, s, h, ho);
          for (int kw = 0; kw < k; ++kw) {
            const int woff = kw - p;
            const std::size_t wlo = detail::out_lo(woff, s), whi = detail::out_hi(woff, s, w, wo);
            if (wlo >= whi) continue;
            T acc = T(0);
            for (std::size_t oh = hlo; oh < hhi; ++oh) {
              const T* in_row = in_plane + (static_cast<std::size_t>(static_cast<int>(oh) * s + hoff)) * w;
              const T* go_row = go_plane + oh * wo;
              if (s == 1) {
                acc += detail::dot(go_row + wlo, in_row + wlo + woff, whi - wlo);
              } else {
                for (std::size_t ow = wlo; ow < whi; ++ow)
                  acc += go_row[ow] * in_row[static_cast<int>(ow) * s + woff];
              }
            }
            g.grad_kernel.at4(co, ci, static_cast<std::size_t>(kh), static_cast<std::size_t>(kw)) +=
                acc;
          }
        }
      }
    }
    g.grad_bias[co] = bias_acc;
  });

  ensure_finite(g.grad_input, "conv2d_backward grad_input");
  ensure_finite(g.grad_kernel, "conv2d_backward grad_kernel");
  ensure_finite(g.grad_bias, "conv2d_backward grad_bias");
  return g;
}

template <typename T>
struct MaxPoolResult {
  Tensor<T> output;
  TensorI argmax;  // flat index into the input tensor, ties to the lowest row-major index
};

template <typename T>
MaxPoolResult<T> maxpool2d(const Tensor<T>& input, int window = 2) {
  require_rank(input, 4, "maxpool2d input");
  if (window < 1) throw std::invalid_argument("maxpool2d: window must be >= 1");
  const std::size_t n_batch = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto uw = static_cast<std::size_t>(window);
  if (h % uw != 0 || w % uw != 0)
    throw std::invalid_argument("maxpool2d: spatial dims " + std::to_string(h) + "x" +
                                std::to_string(w) + " not divisible by window " +
                                std::to_string(window));
  const std::size_t ho = h / uw, wo = w / uw;
  MaxPoolResult<T> r{Tensor<T>({n_batch, c, ho, wo}), TensorI({n_batch, c, ho, wo})};
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) {
          std::size_t best = ((n * c + ci) * h + oh * uw) * w + ow * uw;
          T best_v = input[best];
          for (std::size_t kh = 0; kh < uw; ++kh)
            for (std::size_t kw = 0; kw < uw; ++kw) {
              std::size_t idx = ((n * c + ci) * h + oh * uw + kh) * w + ow * uw + kw;
              if (input[idx] > best_v) {
                best_v = input[idx];
                best = idx;
              }
            }
          r.output.at4(n, ci, oh, ow) = best_v;
          r.argmax.at4(n, ci, oh, ow) = static_cast<std::int32_t>(best);
        }
  ensure_finite(r.output, "maxpool2d");
  return r;
}

template <typename T>
Tensor<T> maxpool2d_backward(const Tensor<T>& grad_out, const TensorI& argmax,
                             const std::vector<std::size_t>& input_shape) {
  if (grad_out.shape() != argmax.shape())
    throw std::invalid_argument("maxpool2d_backward: grad_out shape " + grad_out.shape_str() +
                                " != argmax shape " + argmax.shape_str());
  Tensor<T> gi = Tensor<T>::zeros(input_shape);
  for (std::size_t i = 0; i < grad_out.size(); ++i)
    gi[static_cast<std::size_t>(argmax[i])] += grad_out[i];
  ensure_finite(gi, "maxpool2d_backward");
  return gi;
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor = 2) {
  require_rank(input, 4, "upsample_nearest input");
  if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
  const std::size_t n_batch = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto f = static_cast<std::size_t>(factor);
  Tensor<T> out({n_batch, c, h * f, w * f});
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oh = 0; oh < h * f; ++oh) {
        const T* in_row = &input.at4(n, ci, oh / f, 0);
        T* out_row = &out.at4(n, ci, oh, 0);
        for (std::size_t ow = 0; ow < w * f; ++ow) out_row[ow] = in_row[ow / f];
      }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& grad_out, int factor = 2) {
  require_rank(grad_out, 4, "upsample_nearest_backward grad_out");
  const std::size_t n_batch = grad_out.dim(0), c = grad_out.dim(1);
  const auto f = static_cast<std::size_t>(factor);
  if (grad_out.dim(2) % f != 0 || grad_out.dim(3) % f != 0)
    throw std::invalid_argument("upsample_nearest_backward: grad shape " + grad_out.shape_str() +
                                " not divisible by factor " + std::to_string(factor));
  const std::size_t h = grad_out.dim(2) / f, w = grad_out.dim(3) / f;
  Tensor<T> gi = Tensor<T>::zeros({n_batch, c, h, w});
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oh = 0; oh < h * f; ++oh) {
        const T* go_row = &grad_out.at4(n, ci, oh, 0);
        T* gi_row = &gi.at4(n, ci, oh / f, 0);
        for (std::size_t ow = 0; ow < w * f; ++ow) gi_row[ow / f] += go_row[ow];
      }
  ensure_finite(gi, "upsample_nearest_backward");
  return gi;
}

namespace detail {

// half-pixel-center sampling grid with clamped edges
struct LinearTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

inline std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    double f = std::floor(src);
    std::size_t i0 = static_cast<std::size_t>(f);
    if (i0 >= in - 1 && in > 1) i0 = in - 2;
    std::size_t i1 = (in == 1) ? 0 : i0 + 1;
    double w1 = (in == 1) ? 0.0 : src - static_cast<double>(i0);
    if (w1 < 0) w1 = 0;
    if (w1 > 1) w1 = 1;
    taps[o] = {i0, i1, w1};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input, 4, "bilinear_resize input");
  const std::size_t n_batch = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto ty = detail::linear_taps(h, out_h);
  const auto tx = detail::linear_taps(w, out_w);
  Tensor<T> out({n_batch, c, out_h, out_w});
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oh = 0; oh < out_h; ++oh) {
        const T* r0 = &input.at4(n, ci, ty[oh].i0, 0);
        const T* r1 = &input.at4(n, ci, ty[oh].i1, 0);
        const double wy = ty[oh].w1;
        T* out_row = &out.at4(n, ci, oh, 0);
        for (std::size_t ow = 0; ow < out_w; ++ow) {
          const auto& t = tx[ow];
          double top = (1.0 - t.w1) * r0[t.i0] + t.w1 * r0[t.i1];
          double bot = (1.0 - t.w1) * r1[t.i0] + t.w1 * r1[t.i1];
          out_row[ow] = static_cast<T>((1.0 - wy) * top + wy * bot);
        }
      }
  ensure_finite(out, "bilinear_resize");
  return out;
}

template <typename T>
Tensor<T> bilinear_resize_backward(const Tensor<T>& grad_out, std::size_t in_h, std::size_t in_w) {
  require_rank(grad_out, 4, "bilinear_resize_backward grad_out");
  const std::size_t n_batch = grad_out.dim(0), c = grad_out.dim(1);
  const std::size_t out_h = grad_out.dim(2), out_w = grad_out.dim(3);
  const auto ty = detail::linear_taps(in_h, out_h);
  const auto tx = detail::linear_taps(in_w, out_w);
  Tensor<T> gi = Tensor<T>::zeros({n_batch, c, in_h, in_w});
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oh = 0; oh < out_h; ++oh) {
        T* r0 = &gi.at4(n, ci, ty[oh].i0, 0);
        T* r1 = &gi.at4(n, ci, ty[oh].i1, 0);
        const double wy = ty[oh].w1;
        const T* go_row = &grad_out.at4(n, ci, oh, 0);
        for (std::size_t ow = 0; ow < out_w; ++ow) {
          const auto& t = tx[ow];
          const double g = go_row[ow];
          r0[t.i0] += static_cast<T>((1.0 - wy) * (1.0 - t.w1) * g);
          r0[t.i1] += static_cast<T>((1.0 - wy) * t.w1 * g);
          r1[t.i0] += static_cast<T>(wy * (1.0 - t.w1) * g);
          r1[t.i1] += static_cast<T>(wy * t.w1 * g);
        }
      }
  ensure_finite(gi, "bilinear_resize_backward");
  return gi;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& x) {
  if (!grad_out.same_shape(x))
    throw std::invalid_argument("relu_backward: grad shape " + grad_out.shape_str() +
                                " != input shape " + x.shape_str());
  Tensor<T> gi(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) gi[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return gi;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (v >= 0) {
      out[i] = static_cast<T>(1.0 / (1.0 + std::exp(-v)));
    } else {
      const double e = std::exp(v);
      out[i] = static_cast<T>(e / (1.0 + e));
    }
  }
  ensure_finite(out, "sigmoid");
  return out;
}

// takes the forward output, not the input
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad_out, const Tensor<T>& y) {
  if (!grad_out.same_shape(y))
    throw std::invalid_argument("sigmoid_backward: shape mismatch " + grad_out.shape_str() +
                                " vs " + y.shape_str());
  Tensor<T> gi(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) gi[i] = grad_out[i] * y[i] * (T(1) - y[i]);
  return gi;
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  require_rank(x, 4, "softmax_channels input");
  const std::size_t n_batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out(x.shape());
  const std::size_t plane = h * w;
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t pix = 0; pix < plane; ++pix) {
      const std::size_t base = n * c * plane + pix;
      double mx = x[base];
      for (std::size_t ci = 1; ci < c; ++ci) mx = std::max(mx, static_cast<double>(x[base + ci * plane]));
      double denom = 0;
      for (std::size_t ci = 0; ci < c; ++ci) denom += std::exp(static_cast<double>(x[base + ci * plane]) - mx);
      for (std::size_t ci = 0; ci < c; ++ci)
        out[base + ci * plane] = static_cast<T>(std::exp(static_cast<double>(x[base + ci * plane]) - mx) / denom);
    }
  ensure_finite(out, "softmax_channels");
  return out;
}

// takes the forward output s: grad_i = s_i * (g_i - sum_j g_j s_j) per pixel
template <typename T>
Tensor<T> softmax_channels_backward(const Tensor<T>& grad_out, const Tensor<T>& s) {
  if (!grad_out.same_shape(s))
    throw std::invalid_argument("softmax_channels_backward: shape mismatch " +
                                grad_out.shape_str() + " vs " + s.shape_str());
  const std::size_t n_batch = s.dim(0), c = s.dim(1), plane = s.dim(2) * s.dim(3);
  Tensor<T> gi(s.shape());
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t pix = 0; pix < plane; ++pix) {
      const std::size_t base = n * c * plane + pix;
      double d = 0;
      for (std::size_t ci = 0; ci < c; ++ci)
        d += static_cast<double>(grad_out[base + ci * plane]) * s[base + ci * plane];
      for (std::size_t ci = 0; ci < c; ++ci)
        gi[base + ci * plane] =
            static_cast<T>(s[base + ci * plane] * (grad_out[base + ci * plane] - d));
    }
  ensure_finite(gi, "softmax_channels_backward");
  return gi;
}

template <typename T>
struct CrossEntropyResult {
  T loss;
  Tensor<T> grad_logits;
};

// mean over all pixels of -log softmax(logits)[label]
template <typename T>
CrossEntropyResult<T> cross_entropy_loss(const Tensor<T>& logits, const TensorI& labels) {
  require_rank(logits, 4, "cross_entropy logits");
  const std::size_t n_batch = logits.dim(0), c = logits.dim(1);
  const std::size_t h = logits.dim(2), w = logits.dim(3);
  require_shape(labels, {n_batch, h, w}, "cross_entropy labels");

  const std::size_t plane = h * w;
  const double inv_count = 1.0 / static_cast<double>(n_batch * plane);
  Tensor<T> grad(logits.shape());
  double total = 0;
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t pix = 0; pix < plane; ++pix) {
      const std::int32_t label = labels[n * plane + pix];
      if (label < 0 || static_cast<std::size_t>(label) >= c)
        throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                    " out of range [0," + std::to_string(c) + ")");
      const std::size_t base = n * c * plane + pix;
      double mx = logits[base];
      for (std::size_t ci = 1; ci < c; ++ci)
        mx = std::max(mx, static_cast<double>(logits[base + ci * plane]));
      double denom = 0;
      for (std::size_t ci = 0; ci < c; ++ci)
        denom += std::exp(static_cast<double>(logits[base + ci * plane]) - mx);
      const double lse = mx + std::log(denom);
      total += lse - static_cast<double>(logits[base + static_cast<std::size_t>(label) * plane]);
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double p = std::exp(static_cast<double>(logits[base + ci * plane]) - lse);
        const double onehot = (static_cast<std::size_t>(label) == ci) ? 1.0 : 0.0;
        grad[base + ci * plane] = static_cast<T>((p - onehot) * inv_count);
      }
    }
  CrossEntropyResult<T> r{static_cast<T>(total * inv_count), std::move(grad)};
  if (!std::isfinite(static_cast<double>(r.loss)))
    throw std::runtime_error("cross_entropy: non-finite loss");
  return r;
}

template <typename T>
struct AdamState {
  Tensor<T> m;
  Tensor<T> v;
  std::int64_t t = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state,
               const AdamConfig& cfg) {
  if (!param.same_shape(grad))
    throw std::invalid_argument("adam_step: param shape " + param.shape_str() +
                                " != grad shape " + grad.shape_str());
  if (state.t == 0 && state.m.size() == 0) {
    state.m = Tensor<T>::zeros(param.shape());
    state.v = Tensor<T>::zeros(param.shape());
  }
  if (!state.m.same_shape(param))
    throw std::invalid_argument("adam_step: state shape " + state.m.shape_str() +
                                " != param shape " + param.shape_str());
  state.t += 1;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = b1 * state.m[i] + (1.0 - b1) * g;
    const double v = b2 * state.v[i] + (1.0 - b2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    param[i] -= static_cast<T>(cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.epsilon));
  }
  ensure_finite(param, "adam_step");
}

// channel concatenation for skip connections
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 4, "concat_channels a");
  require_rank(b, 4, "concat_channels b");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw std::invalid_argument("concat_channels: incompatible shapes " + a.shape_str() + " and " +
                                b.shape_str());
  const std::size_t n_batch = a.dim(0), plane = a.dim(2) * a.dim(3);
  Tensor<T> out({n_batch, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < n_batch; ++n) {
    std::copy(&a.at4(n, 0, 0, 0), &a.at4(n, 0, 0, 0) + a.dim(1) * plane, &out.at4(n, 0, 0, 0));
    std::copy(&b.at4(n, 0, 0, 0), &b.at4(n, 0, 0, 0) + b.dim(1) * plane,
              &out.at4(n, a.dim(1), 0, 0));
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, std::size_t c_first) {
  require_rank(x, 4, "split_channels input");
  if (c_first == 0 || c_first >= x.dim(1))
    throw std::invalid_argument("split_channels: split point " + std::to_string(c_first) +
                                " outside channel dim " + std::to_string(x.dim(1)));
  const std::size_t n_batch = x.dim(0), plane = x.dim(2) * x.dim(3);
  Tensor<T> a({n_batch, c_first, x.dim(2), x.dim(3)});
  Tensor<T> b({n_batch, x.dim(1) - c_first, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < n_batch; ++n) {
    std::copy(&x.at4(n, 0, 0, 0), &x.at4(n, 0, 0, 0) + c_first * plane, &a.at4(n, 0, 0, 0));
    std::copy(&x.at4(n, c_first, 0, 0), &x.at4(n, c_first, 0, 0) + (x.dim(1) - c_first) * plane,
              &b.at4(n, 0, 0, 0));
  }
  return {std::move(a), std::move(b)};
}

}  // namespace convlora
