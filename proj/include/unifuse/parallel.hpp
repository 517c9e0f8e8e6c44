#pragma once

#include <cstddef>
#include <functional>

namespace unifuse {

/// Worker cap: UNIFUSE_THREADS when set to a positive integer, otherwise the
/// number of logical cores (at least 1).
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Work is split
/// into contiguous chunks, so results written to slot i do not depend on the
/// thread count. The first exception thrown by any call is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// Keeps large freed blocks in the heap instead of returning them to the OS.
/// Training allocates and frees multi-megabyte temporaries every step, and
/// fresh pages cost a fault each. No-op outside glibc.
void retain_heap_memory();

}  // namespace unifuse
