#pragma once

#include <cstddef>
#include <functional>

namespace purifine {

/// Worker cap: PURIFINE_THREADS when set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t worker_count();

/// Runs fn(block) for block in [0, n_blocks) on up to worker_count() threads.
/// Callers write per-block results and reduce them in block order, so results
/// do not depend on the thread count. The first exception is rethrown.
void parallel_blocks(std::size_t n_blocks, const std::function<void(std::size_t)>& fn);

}  // namespace purifine
