// Discrete-time discrete flow matching engine: probability paths built
// from scheduler-mixed conditionals, velocity validity, divergence, the
// discrete continuity equation, and exact push-forward on enumerable
// state spaces.
#pragma once

#include <functional>
#include <optional>

#include "dfm/common.hpp"

namespace dfm {

// Integer timestep t in {0, ..., n}.
struct Timestep {
  int t = 0;
  int horizon = 1;

  void validate() const {
    if (horizon < 1) fail("TimestepInvalid", "horizon must be positive");
    if (t < 0 || t > horizon) fail("TimestepInvalid", "t out of {0,...,n}");
  }
};

// kappa(t, pos, comp): mixture coefficients, one convex combination per
// (t, position).
struct Scheduler {
  int components = 0;
  std::function<double(int t, int pos, int comp)> kappa;

  // Throws SchedulerInvalid when a per-position coefficient row is not a
  // convex combination within tol.
  void validate_at(int t, int positions, double tol = kInputTol) const;
};

// Conditional probability path in product form: per position, a convex
// scheduler mixture of component PMFs w^j(token | x0, x1).
struct ConditionalPath {
  Scheduler scheduler;
  std::function<double(int comp, int pos, Token tok, const TokenSeq& x0,
                       const TokenSeq& x1)>
      w;
  Vocab vocab;
};

// Dense per-state velocity evaluation: rate(pos, tok) for one state z.
struct VelocitySlice {
  int positions = 0;
  int vocab = 0;
  std::vector<double> rate;  // positions * vocab, row-major

  static VelocitySlice zeros(int positions, int vocab) {
    VelocitySlice s;
    s.positions = positions;
    s.vocab = vocab;
    s.rate.assign(std::size_t(positions) * vocab, 0.0);
    return s;
  }
  double at(int pos, Token tok) const {
    return rate[std::size_t(pos) * vocab + tok];
  }
  double& ref(int pos, Token tok) { return rate[std::size_t(pos) * vocab + tok]; }
  double max_abs() const {
    double m = 0.0;
    for (double r : rate) m = std::max(m, std::abs(r));
    return m;
  }
};

inline double slice_linf(const VelocitySlice& a, const VelocitySlice& b) {
  if (a.positions != b.positions || a.vocab != b.vocab)
    fail("DimensionMismatch", "velocity slices have different shapes");
  double gap = 0.0;
  for (std::size_t i = 0; i < a.rate.size(); ++i)
    gap = std::max(gap, std::abs(a.rate[i] - b.rate[i]));
  return gap;
}

// u evaluated at (t, z), all positions and tokens at once.
using VelocityField =
    std::function<VelocitySlice(const Timestep& t, const TokenSeq& z)>;

// Conditional velocity u(.|x0, x1) evaluated at (t, z) for one coupling pair.
using ConditionalVelocity = std::function<VelocitySlice(
    const Timestep& t, const TokenSeq& z, const Coupling::Pair& pair)>;

struct VelocityViolation {
  TokenSeq state;
  int position = 0;  // 1-indexed in reports
  std::string kind;  // "sum" or "range"
  double value = 0.0;
};

struct ValidityReport {
  std::vector<VelocityViolation> violations;
  bool ok() const { return violations.empty(); }
};

// p_t(x | x0, x1) as a table over the product support.
DistTable conditional_path_eval(const ConditionalPath& path, const Timestep& t,
                                const TokenSeq& x0, const TokenSeq& x1);

// Probability of a single state under the conditional path; cheaper than
// materializing the full table.
double conditional_state_prob(const ConditionalPath& path, const Timestep& t,
                              const TokenSeq& x0, const TokenSeq& x1,
                              const TokenSeq& z);

// p_t(x) = sum over coupling pairs of the conditional path times pair weight.
DistTable marginal_path_eval(const ConditionalPath& path,
                             const Coupling& coupling, const Timestep& t);

// Zero-sum and range conditions per position, per state.
ValidityReport check_velocity_valid(const VelocityField& u, const Timestep& t,
                                    const std::vector<TokenSeq>& states,
                                    double tol = kInputTol);

// One sampling step from state z: product over positions of
// delta_{z^i} + u^i(., z).
DistTable step_kernel(const VelocityField& u, const Timestep& t,
                      const TokenSeq& z);

// Exact mixture push-forward of p_t through the step kernel, normalized.
DistTable push_forward(const DistTable& p_t, const VelocityField& u,
                       const Timestep& t);

// div_x(p_t u_t) at a single state x.
double divergence(const DistTable& p_t, const VelocityField& u,
                  const Timestep& t, const TokenSeq& x);

// div_x(p_t u_t) for every state it touches.
DistTable divergence_table(const DistTable& p_t, const VelocityField& u,
                           const Timestep& t);

// max over x of |p_{t+1}(x) - p_t(x) + div_x(p_t u_t)|.
double continuity_residual(const DistTable& p_t, const DistTable& p_next,
                           const VelocityField& u, const Timestep& t);

// Posterior-weighted mixture of conditional velocities at state z; throws
// ZeroMassState when p_t(z) < 1e-15.
VelocitySlice marginal_velocity(const ConditionalPath& path,
                                const Coupling& coupling,
                                const ConditionalVelocity& cond_u,
                                const Timestep& t, const TokenSeq& z);

}  // namespace dfm
