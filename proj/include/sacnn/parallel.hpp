#pragma once

#include <functional>

namespace sacnn {

// Worker count: SACNN_JOBS env var when set, otherwise hardware concurrency.
int default_jobs();

// Runs fn(0..n-1) on up to n_jobs threads (n_jobs <= 1 runs inline). Tasks
// must be independent; the first exception is rethrown after all workers
// finish.
void parallel_for(int n_jobs, int n, const std::function<void(int)>& fn);

}  // namespace sacnn
