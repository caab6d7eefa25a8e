#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace satts {

inline constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Errors. One exception type with a kind tag; the CLI maps kinds to the
// stable exit-code contract (0 ok, 2 validation/shape, 3 numeric, 4 io/format).
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  enum class Kind { Validation, Shape, Numeric, Format, Io };

  Error(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}

  Kind kind() const { return kind_; }

  int exit_code() const {
    switch (kind_) {
      case Kind::Numeric: return 3;
      case Kind::Format:
      case Kind::Io: return 4;
      default: return 2;
    }
  }

 private:
  Kind kind_;
};

[[noreturn]] inline void fail_validation(const std::string& m) { throw Error(Error::Kind::Validation, m); }
[[noreturn]] inline void fail_shape(const std::string& m) { throw Error(Error::Kind::Shape, m); }
[[noreturn]] inline void fail_numeric(const std::string& m) { throw Error(Error::Kind::Numeric, m); }
[[noreturn]] inline void fail_format(const std::string& m) { throw Error(Error::Kind::Format, m); }
[[noreturn]] inline void fail_io(const std::string& m) { throw Error(Error::Kind::Io, m); }

// ---------------------------------------------------------------------------
// Rng: mt19937_64 with hand-rolled scalar draws. <random> distribution objects
// are implementation-defined, which would break the bit-exact determinism
// contracts, so uniform/normal are derived from raw 64-bit words directly.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  /// Uniform double in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (one spare cached per pair).
  double normal();

  /// Uniform integer in [0, n), rejection-sampled so every value is equally likely.
  uint64_t below(uint64_t n);

  /// Fisher-Yates permutation of the given index vector in place.
  void shuffle(std::vector<int>& idx);

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Splitmix64-style mixing so per-stream sub-seeds never collide trivially.
uint64_t derive_seed(uint64_t base, uint64_t stream);

// ---------------------------------------------------------------------------
// Worker pool. SATTS_THREADS caps the worker count (default: hardware).
// ---------------------------------------------------------------------------

int worker_count(int jobs);

/// Runs fn(0..n-1) across workers; each index owns its output slot, so results
/// are deterministic regardless of scheduling. First exception is rethrown.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace satts
