#pragma once

#include <cstddef>
#include <functional>

namespace convlora {

// Number of worker threads used by parallel_for. Resolved once from the
// CONVLORA_THREADS environment variable (default: hardware concurrency).
std::size_t worker_count();

// Runs fn(i) for i in [0, count). Work is split into contiguous chunks, one
// chunk owner per index, so results are identical for any thread count as long
// as distinct indices touch distinct outputs.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace convlora
