// Shared domain types for the discrete flow matching library: token
// sequences, exact distribution tables, couplings, error type, and the
// seeded PRNG every randomized component draws from.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfm {

// Error code travels with the message so callers can branch on it.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(code + ": " + what), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& msg) {
  throw Error(code, msg);
}

using Token = int;
using TokenSeq = std::vector<Token>;

inline constexpr double kTightTol = 1e-12;
inline constexpr double kInputTol = 1e-9;
inline constexpr double kZeroMass = 1e-15;
inline constexpr std::int64_t kEnumLimit = 1'000'000;

struct Vocab {
  int size = 0;       // d, mask token included
  Token mask_id = 0;  // reserved id inside [0, d)

  void validate() const {
    if (size < 2) fail("VocabInvalid", "vocabulary size must be >= 2");
    if (mask_id < 0 || mask_id >= size)
      fail("VocabInvalid", "mask id out of range");
  }
};

inline void check_tokens(const TokenSeq& x, const Vocab& v) {
  for (Token tok : x)
    if (tok < 0 || tok >= v.size) fail("TokenOutOfRange", "token id out of [0, d)");
}

// Number of states d^N; throws once past the enumeration bound.
inline std::int64_t state_space_size(int d, int n) {
  std::int64_t total = 1;
  for (int i = 0; i < n; ++i) {
    total *= d;
    if (total > kEnumLimit)
      fail("InstanceTooLarge", "d^N exceeds the enumeration bound 10^6");
  }
  return total;
}

std::vector<TokenSeq> enumerate_states(int d, int n);

// Exact PMF over token sequences. std::map keeps iteration deterministic.
struct DistTable {
  std::map<TokenSeq, double> mass;

  double at(const TokenSeq& x) const {
    auto it = mass.find(x);
    return it == mass.end() ? 0.0 : it->second;
  }
  void add(const TokenSeq& x, double m) {
    if (m != 0.0) mass[x] += m;
  }
  double total() const {
    double s = 0.0;
    for (const auto& [_, m] : mass) s += m;
    return s;
  }
  void normalize() {
    double s = total();
    if (s <= 0.0) fail("DistTableInvalid", "cannot normalize zero mass");
    for (auto& [_, m] : mass) m /= s;
  }
  void check_normalized(double tol = kTightTol) const {
    for (const auto& [_, m] : mass)
      if (m < -tol) fail("DistTableInvalid", "negative mass");
    if (std::abs(total() - 1.0) > tol)
      fail("DistTableInvalid", "mass does not sum to 1");
  }
};

inline double linf_gap(const DistTable& a, const DistTable& b) {
  double gap = 0.0;
  for (const auto& [x, m] : a.mass) gap = std::max(gap, std::abs(m - b.at(x)));
  for (const auto& [x, m] : b.mass) gap = std::max(gap, std::abs(m - a.at(x)));
  return gap;
}

// Joint PMF over (x0, x1) pairs.
struct Coupling {
  struct Pair {
    TokenSeq x0;
    TokenSeq x1;
    double weight = 0.0;
  };
  std::vector<Pair> pairs;

  void validate(double tol = kInputTol) const {
    double s = 0.0;
    for (const auto& p : pairs) {
      if (p.weight < -tol) fail("CouplingInvalid", "negative pair weight");
      s += p.weight;
    }
    if (std::abs(s - 1.0) > tol)
      fail("CouplingInvalid", "pair weights do not sum to 1");
  }
};

// splitmix64: the fixed, platform-independent generator all randomness in
// this project flows through. Per-component seeds are derived with
// derive_seed so streams never overlap.
struct Rng {
  std::uint64_t state;

  explicit Rng(std::uint64_t seed) : state(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  // Uniform in [0, 1).
  double next_unit() { return double(next_u64() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) {
    return std::uint64_t(next_unit() * double(n)) % n;
  }
  // Box-Muller, one value per call.
  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = next_unit();
    double u2 = next_unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

 private:
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  Rng r(seed ^ (0xd1b54a32d192ed03ULL * (stream + 1)));
  return r.next_u64();
}

}  // namespace dfm
