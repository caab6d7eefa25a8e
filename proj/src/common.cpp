#include "satts/common.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numbers>
#include <thread>

namespace satts {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller; u1 is nudged away from 0 so log stays finite.
  double u1 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  const double u2 = uniform();
  const double mag = std::sqrt(-2.0 * std::log(u1));
  const double ang = 2.0 * std::numbers::pi * u2;
  spare_ = mag * std::sin(ang);
  has_spare_ = true;
  return mag * std::cos(ang);
}

uint64_t Rng::below(uint64_t n) {
  if (n == 0) fail_validation("Rng::below: n must be positive");
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = gen_();
  } while (x >= limit);
  return x % n;
}

void Rng::shuffle(std::vector<int>& idx) {
  for (size_t i = idx.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(below(i));
    std::swap(idx[i - 1], idx[j]);
  }
}

uint64_t derive_seed(uint64_t base, uint64_t stream) {
  // splitmix64 finalizer over a combined word.
  uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

int worker_count(int jobs) {
  if (jobs <= 1) return 1;
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  if (const char* env = std::getenv("SATTS_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) hw = static_cast<int>(v);
  }
  return hw < jobs ? hw : jobs;
}

namespace {
thread_local int g_parallel_depth = 0;
}

void parallel_for(int n, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  // Nested calls run serially so worker counts stay bounded and results do
  // not depend on which level grabbed the pool first.
  const int workers = g_parallel_depth > 0 ? 1 : worker_count(n);
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto body = [&] {
    ++g_parallel_depth;
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) break;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
    --g_parallel_depth;
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace satts
