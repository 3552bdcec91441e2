#pragma once

#include <cstddef>
#include <functional>

namespace atomo {

// Process-wide worker count (CLI --workers).  0 = hardware concurrency.
void set_worker_count(unsigned n);
unsigned worker_count();

// Runs body(i) for i in [0, n) on up to worker_count() threads.  Indices are
// split into contiguous blocks, so any per-index output written to slot i is
// independent of the thread count.  The first exception thrown by a body is
// rethrown after all threads joined.  Calls made from inside a body run
// serially on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace atomo
