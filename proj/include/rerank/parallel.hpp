#pragma once

#include <exception>
#include <utility>

#include <omp.h>

namespace rerank {

// 0 or negative requests the OpenMP default thread count.
inline int resolve_threads(int requested) {
  return requested > 0 ? requested : omp_get_max_threads();
}

// Static-schedule parallel loop over [0, n). Each index must write only its
// own outputs; with that discipline results are bit-identical to the serial
// loop for any thread count. The first exception thrown by a worker is
// rethrown on the calling thread.
template <class F>
void parallel_for(int n, int threads, F&& f) {
  threads = resolve_threads(threads);
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::exception_ptr err;
#pragma omp parallel for schedule(static) num_threads(threads)
  for (int i = 0; i < n; ++i) {
    try {
      f(i);
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
}

}  // namespace rerank
