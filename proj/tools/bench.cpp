// Micro-benchmark for the convolution kernels; prints GFLOP/s per shape.

#include <chrono>
#include <cstdio>
#include <string>

#include "convlora/ops.hpp"
#include "convlora/rng.hpp"

using namespace convlora;

namespace {

double seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

void bench_conv(const char* label, std::size_t n, int cin, int cout, std::size_t hw, int reps) {
  Rng rng(1);
  TensorF in({n, static_cast<std::size_t>(cin), hw, hw});
  TensorF k({static_cast<std::size_t>(cout), static_cast<std::size_t>(cin), 3, 3});
  TensorF b({static_cast<std::size_t>(cout)});
  for (std::size_t i = 0; i < in.size(); ++i) in[i] = static_cast<float>(rng.uniform(-1, 1));
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = static_cast<float>(rng.uniform(-1, 1));
  ConvSpec spec{cin, cout, 3, 1, 1};

  auto out = conv2d_forward(in, k, b, spec);
  double t0 = seconds();
  for (int r = 0; r < reps; ++r) out = conv2d_forward(in, k, b, spec);
  double fwd = (seconds() - t0) / reps;

  t0 = seconds();
  for (int r = 0; r < reps; ++r) auto g = conv2d_backward(out, in, k, spec);
  double bwd = (seconds() - t0) / reps;

  const double macs = static_cast<double>(n) * cout * cin * 9.0 * hw * hw;
  std::printf("%-28s fwd %7.2f ms (%5.2f GF/s)   bwd %7.2f ms (%5.2f GF/s)\n", label, fwd * 1e3,
              2 * macs / fwd * 1e-9, bwd * 1e3, 4 * macs / bwd * 1e-9);
}

}  // namespace

int main() {
  bench_conv("n8  c16->16  64x64", 8, 16, 16, 64, 5);
  bench_conv("n8  c32->32  32x32", 8, 32, 32, 32, 5);
  bench_conv("n8  c64->64  16x16", 8, 64, 64, 16, 5);
  bench_conv("n8  c128->128 8x8", 8, 128, 128, 8, 5);
  bench_conv("n32 c16->16  64x64", 32, 16, 16, 64, 3);
  return 0;
}
