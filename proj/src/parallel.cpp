#include "msgc/parallel.hpp"

#include <cstdlib>
#include <thread>
#include <vector>

namespace msgc {

static int read_thread_count() {
  const char* env = std::getenv("MSGC_THREADS");
  if (!env) return 1;
  int n = std::atoi(env);
  if (n < 1) return 1;
  if (n > 256) return 256;
  return n;
}

int thread_count() {
  static const int n = read_thread_count();
  return n;
}

void parallel_for(int n, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  int workers = thread_count();
  if (workers > n) workers = n;
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int t = 0; t < workers; ++t) {
    int lo = static_cast<int>(static_cast<long long>(n) * t / workers);
    int hi = static_cast<int>(static_cast<long long>(n) * (t + 1) / workers);
    pool.emplace_back([lo, hi, &fn] {
      for (int i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace msgc
