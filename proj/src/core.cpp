#include "dfm/core.hpp"

#include <algorithm>

namespace dfm {

std::vector<TokenSeq> enumerate_states(int d, int n) {
  std::int64_t total = state_space_size(d, n);
  std::vector<TokenSeq> out;
  out.reserve(std::size_t(total));
  TokenSeq cur(std::size_t(n), 0);
  for (std::int64_t idx = 0; idx < total; ++idx) {
    out.push_back(cur);
    for (int i = n - 1; i >= 0; --i) {
      if (++cur[std::size_t(i)] < d) break;
      cur[std::size_t(i)] = 0;
    }
  }
  return out;
}

void Scheduler::validate_at(int t, int positions, double tol) const {
  for (int i = 0; i < positions; ++i) {
    double sum = 0.0;
    for (int j = 0; j < components; ++j) {
      double k = kappa(t, i, j);
      if (k < -tol) fail("SchedulerInvalid", "negative scheduler coefficient");
      sum += k;
    }
    if (std::abs(sum - 1.0) > tol)
      fail("SchedulerInvalid", "scheduler coefficients do not sum to 1");
  }
}

namespace {

// Per-position mixture PMF q_i(tok) = sum_j kappa(t,i,j) w^j(tok | x0, x1).
std::vector<std::vector<double>> position_factors(const ConditionalPath& path,
                                                  const Timestep& t,
                                                  const TokenSeq& x0,
                                                  const TokenSeq& x1) {
  int n = int(x1.size());
  int d = path.vocab.size;
  path.scheduler.validate_at(t.t, n);
  std::vector<std::vector<double>> factors(std::size_t(n),
                                           std::vector<double>(std::size_t(d), 0.0));
  for (int i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int j = 0; j < path.scheduler.components; ++j) {
      double k = path.scheduler.kappa(t.t, i, j);
      if (k == 0.0) continue;
      for (Token a = 0; a < d; ++a)
        factors[std::size_t(i)][std::size_t(a)] += k * path.w(j, i, a, x0, x1);
    }
    for (Token a = 0; a < d; ++a) sum += factors[std::size_t(i)][std::size_t(a)];
    if (std::abs(sum - 1.0) > kInputTol)
      fail("ConditionalPathInvalid", "per-position mixture is not a PMF");
  }
  return factors;
}

// Expand a product of per-position PMFs over its joint support.
DistTable expand_product(const std::vector<std::vector<double>>& factors) {
  std::vector<std::vector<Token>> support(factors.size());
  std::int64_t total = 1;
  for (std::size_t i = 0; i < factors.size(); ++i) {
    for (Token a = 0; a < int(factors[i].size()); ++a)
      if (factors[i][std::size_t(a)] != 0.0) support[i].push_back(a);
    total *= std::int64_t(support[i].size());
    if (total > kEnumLimit)
      fail("InstanceTooLarge", "product support exceeds the enumeration bound");
  }
  DistTable out;
  TokenSeq cur(factors.size(), 0);
  std::vector<std::size_t> idx(factors.size(), 0);
  for (std::int64_t s = 0; s < total; ++s) {
    double mass = 1.0;
    for (std::size_t i = 0; i < factors.size(); ++i) {
      cur[i] = support[i][idx[i]];
      mass *= factors[i][std::size_t(cur[i])];
    }
    out.add(cur, mass);
    for (std::size_t i = factors.size(); i-- > 0;) {
      if (++idx[i] < support[i].size()) break;
      idx[i] = 0;
    }
  }
  return out;
}

}  // namespace

DistTable conditional_path_eval(const ConditionalPath& path, const Timestep& t,
                                const TokenSeq& x0, const TokenSeq& x1) {
  t.validate();
  if (x0.size() != x1.size())
    fail("DimensionMismatch", "x0 and x1 have different lengths");
  return expand_product(position_factors(path, t, x0, x1));
}

double conditional_state_prob(const ConditionalPath& path, const Timestep& t,
                              const TokenSeq& x0, const TokenSeq& x1,
                              const TokenSeq& z) {
  auto factors = position_factors(path, t, x0, x1);
  double p = 1.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p *= factors[i][std::size_t(z[i])];
    if (p == 0.0) return 0.0;
  }
  return p;
}

DistTable marginal_path_eval(const ConditionalPath& path,
                             const Coupling& coupling, const Timestep& t) {
  coupling.validate();
  DistTable out;
  for (const auto& pair : coupling.pairs) {
    if (pair.weight == 0.0) continue;
    DistTable cond = conditional_path_eval(path, t, pair.x0, pair.x1);
    for (const auto& [x, m] : cond.mass) out.add(x, pair.weight * m);
  }
  return out;
}

ValidityReport check_velocity_valid(const VelocityField& u, const Timestep& t,
                                    const std::vector<TokenSeq>& states,
                                    double tol) {
  ValidityReport report;
  for (const auto& z : states) {
    VelocitySlice s = u(t, z);
    for (int i = 0; i < s.positions; ++i) {
      double sum = 0.0;
      for (Token a = 0; a < s.vocab; ++a) {
        double r = s.at(i, a);
        sum += r;
        bool diag = (a == z[std::size_t(i)]);
        double lo = diag ? -1.0 : 0.0;
        double hi = diag ? 0.0 : 1.0;
        if (r < lo - tol || r > hi + tol)
          report.violations.push_back({z, i + 1, "range", r});
      }
      if (std::abs(sum) > tol)
        report.violations.push_back({z, i + 1, "sum", sum});
    }
  }
  return report;
}

DistTable step_kernel(const VelocityField& u, const Timestep& t,
                      const TokenSeq& z) {
  VelocitySlice s = u(t, z);
  std::vector<std::vector<double>> factors(
      std::size_t(s.positions), std::vector<double>(std::size_t(s.vocab), 0.0));
  for (int i = 0; i < s.positions; ++i) {
    for (Token a = 0; a < s.vocab; ++a) {
      double p = (a == z[std::size_t(i)] ? 1.0 : 0.0) + s.at(i, a);
      if (p < -kInputTol)
        fail("InvalidVelocity", "step kernel factor has negative mass");
      factors[std::size_t(i)][std::size_t(a)] = std::max(p, 0.0);
    }
  }
  return expand_product(factors);
}

DistTable push_forward(const DistTable& p_t, const VelocityField& u,
                       const Timestep& t) {
  p_t.check_normalized(kInputTol);
  DistTable out;
  for (const auto& [z, m] : p_t.mass) {
    if (m < kZeroMass) continue;
    DistTable step = step_kernel(u, t, z);
    for (const auto& [x, sm] : step.mass) out.add(x, m * sm);
  }
  out.normalize();
  return out;
}

DistTable divergence_table(const DistTable& p_t, const VelocityField& u,
                           const Timestep& t) {
  DistTable div;
  for (const auto& [z, m] : p_t.mass) {
    if (m < kZeroMass) continue;
    VelocitySlice s = u(t, z);
    TokenSeq x = z;
    for (int i = 0; i < s.positions; ++i) {
      for (Token a = 0; a < s.vocab; ++a) {
        double r = s.at(i, a);
        if (r == 0.0) continue;
        x[std::size_t(i)] = a;
        div.add(x, -m * r);
      }
      x[std::size_t(i)] = z[std::size_t(i)];
    }
  }
  return div;
}

double divergence(const DistTable& p_t, const VelocityField& u,
                  const Timestep& t, const TokenSeq& x) {
  double div = 0.0;
  for (const auto& [z, m] : p_t.mass) {
    if (m < kZeroMass) continue;
    // delta_z(x^{bar i}) is nonzero only when z and x agree off position i,
    // so states differing from x in two or more positions contribute nothing.
    int mismatch = -1;
    int mismatches = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (z[j] != x[j]) {
        mismatch = int(j);
        if (++mismatches > 1) break;
      }
    }
    if (mismatches > 1) continue;
    VelocitySlice s = u(t, z);
    if (mismatches == 1) {
      div += -m * s.at(mismatch, x[std::size_t(mismatch)]);
    } else {
      for (int i = 0; i < s.positions; ++i)
        div += -m * s.at(i, x[std::size_t(i)]);
    }
  }
  return div;
}

double continuity_residual(const DistTable& p_t, const DistTable& p_next,
                           const VelocityField& u, const Timestep& t) {
  p_t.check_normalized(kInputTol);
  p_next.check_normalized(kInputTol);
  DistTable div = divergence_table(p_t, u, t);
  std::map<TokenSeq, double> residual;
  for (const auto& [x, m] : p_next.mass) residual[x] += m;
  for (const auto& [x, m] : p_t.mass) residual[x] -= m;
  for (const auto& [x, m] : div.mass) residual[x] += m;
  double worst = 0.0;
  for (const auto& [_, r] : residual) worst = std::max(worst, std::abs(r));
  return worst;
}

VelocitySlice marginal_velocity(const ConditionalPath& path,
                                const Coupling& coupling,
                                const ConditionalVelocity& cond_u,
                                const Timestep& t, const TokenSeq& z) {
  coupling.validate();
  int n = int(z.size());
  int d = path.vocab.size;
  double p_z = 0.0;
  std::vector<double> cond_probs(coupling.pairs.size(), 0.0);
  for (std::size_t k = 0; k < coupling.pairs.size(); ++k) {
    const auto& pair = coupling.pairs[k];
    if (pair.weight == 0.0) continue;
    cond_probs[k] = conditional_state_prob(path, t, pair.x0, pair.x1, z);
    p_z += cond_probs[k] * pair.weight;
  }
  if (p_z < kZeroMass)
    fail("ZeroMassState", "marginal velocity queried at a zero-mass state");
  VelocitySlice out = VelocitySlice::zeros(n, d);
  for (std::size_t k = 0; k < coupling.pairs.size(); ++k) {
    double posterior = cond_probs[k] * coupling.pairs[k].weight / p_z;
    if (posterior == 0.0) continue;
    VelocitySlice cond = cond_u(t, z, coupling.pairs[k]);
    for (std::size_t r = 0; r < out.rate.size(); ++r)
      out.rate[r] += posterior * cond.rate[r];
  }
  return out;
}

}  // namespace dfm
