#pragma once

// Minimal batch-level parallel loop. The worker count is capped by the
// HYBRID_ATTN_THREADS environment variable (default 1). Callers are
// responsible for giving each index disjoint outputs; combined with the
// per-item gradient buffers in train_step this keeps results bitwise
// independent of the worker count.

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace hattn {

inline int max_threads() {
  static const int cached = [] {
    const char* env = std::getenv("HYBRID_ATTN_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n >= 1 ? n : 1;
  }();
  return cached;
}

inline void parallel_for(int n, const std::function<void(int)>& fn) {
  const int workers = std::min(max_threads(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  for (std::thread& t : pool) t.join();
}

}  // namespace hattn
