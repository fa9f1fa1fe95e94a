#pragma once

#include <cstddef>
#include <functional>

namespace raml {

/// Worker count: the RAML_THREADS environment variable, default 1.
int worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads.
/// Callers write results to per-index slots and reduce them afterwards in
/// index order, which keeps outputs independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace raml
