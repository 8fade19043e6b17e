#pragma once

#include <functional>

namespace msgc {

// Worker count taken from the MSGC_THREADS environment variable (default 1).
// Read once per process.
int thread_count();

// Runs fn(i) for i in [0, n).  Work is split into contiguous index ranges,
// one per worker, so any per-index output slots are written by exactly one
// thread.  Callers must perform cross-index reductions themselves, in index
// order, to keep results independent of the worker count.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace msgc
