#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace trajekt {

inline int effective_jobs(int jobs) {
  if (jobs > 0) return jobs;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(chunk_index, begin, end) over fixed-size chunks. Chunk boundaries
// depend only on n, never on the worker count, so per-chunk partial results
// merged in chunk order are bit-identical for any --jobs value.
inline void parallel_chunks(size_t n, size_t chunk,
                            const std::function<void(size_t, size_t, size_t)>& fn,
                            int jobs) {
  if (n == 0) return;
  size_t nchunks = (n + chunk - 1) / chunk;
  int workers = std::min<size_t>(effective_jobs(jobs), nchunks);
  if (workers <= 1) {
    for (size_t c = 0; c < nchunks; ++c)
      fn(c, c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        size_t c = next.fetch_add(1);
        if (c >= nchunks) return;
        fn(c, c * chunk, std::min(n, (c + 1) * chunk));
      }
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace trajekt
