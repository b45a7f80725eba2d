#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace vcnn {

// Runs fn over [0, n) split into contiguous chunks, one per worker.
// threads <= 1 executes fn(0, n) inline, which is the reference path for
// every bit-exactness contract in the pipeline.
inline void parallel_for_chunks(size_t n, int threads,
                                const std::function<void(size_t, size_t)>& fn) {
  if (n == 0) return;
  if (threads <= 1 || n == 1) {
    fn(0, n);
    return;
  }
  const size_t workers = std::min<size_t>(threads, n);
  const size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) {
    const size_t begin = w * chunk;
    const size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back(fn, begin, end);
  }
  for (auto& t : pool) t.join();
}

}  // namespace vcnn
