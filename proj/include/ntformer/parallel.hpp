#pragma once

#include <cstddef>
#include <functional>

namespace ntformer {

// Worker count from NTF_THREADS (clamped to >= 1), else hardware concurrency.
std::size_t worker_count();

// True when NTF_DETERMINISTIC=1. Every kernel here reduces each output row in
// a fixed order on one worker, so results never depend on the worker count;
// the flag is echoed into reports.
bool deterministic_mode();

// Splits [0, n) into contiguous chunks of at least `grain` items and runs
// `body(begin, end)` on each chunk. Chunks never overlap, so writers that only
// touch rows in their own range need no synchronization.
void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace ntformer
