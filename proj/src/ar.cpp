#include "dfm/ar.hpp"

namespace dfm {

Coupling build_mask_coupling(const DistTable& q, int prefix_len,
                             const Vocab& vocab) {
  vocab.validate();
  q.check_normalized(kInputTol);
  Coupling coupling;
  for (const auto& [x1, mass] : q.mass) {
    if (mass == 0.0) continue;
    if (prefix_len > int(x1.size()))
      fail("PrefixTooLong", "prefix length exceeds sequence length");
    check_tokens(x1, vocab);
    for (Token tok : x1)
      if (tok == vocab.mask_id)
        fail("MaskInTarget", "target distribution puts mass on a masked sequence");
    coupling.pairs.push_back({ar_state(x1, prefix_len, 0, vocab), x1, mass});
  }
  return coupling;
}

TokenSeq ar_state(const TokenSeq& x1, int prefix_len, int t, const Vocab& vocab) {
  int n = int(x1.size());
  if (prefix_len < 0 || prefix_len > n)
    fail("PrefixTooLong", "prefix length out of [0, N]");
  if (t < 0 || t > n - prefix_len)
    fail("TimeOutOfRange", "t out of {0,...,N-P}");
  TokenSeq x = x1;
  for (int i = prefix_len + t; i < n; ++i) x[std::size_t(i)] = vocab.mask_id;
  return x;
}

DistTable ar_conditional_path(const Coupling::Pair& pair, int prefix_len, int t,
                              const Vocab& vocab) {
  DistTable out;
  out.add(ar_state(pair.x1, prefix_len, t, vocab), 1.0);
  return out;
}

VelocitySlice ar_conditional_velocity(const Coupling::Pair& pair,
                                      int prefix_len, int t, const TokenSeq& z,
                                      const Vocab& vocab) {
  int n = int(pair.x1.size());
  if (t < 0 || t >= n - prefix_len)
    fail("TimeOutOfRange", "velocity defined for t in {0,...,N-P-1}");
  VelocitySlice slice = VelocitySlice::zeros(n, vocab.size);
  TokenSeq x_t = ar_state(pair.x1, prefix_len, t, vocab);
  if (z != x_t) return slice;
  // Reveal position is P + t + 1 (1-indexed).
  int pos = prefix_len + t;
  TokenSeq x_next = ar_state(pair.x1, prefix_len, t + 1, vocab);
  slice.ref(pos, x_next[std::size_t(pos)]) += 1.0;
  slice.ref(pos, x_t[std::size_t(pos)]) -= 1.0;
  return slice;
}

ConditionalPath ar_path(int prefix_len, const Vocab& vocab) {
  ConditionalPath path;
  path.vocab = vocab;
  path.scheduler.components = 2;
  path.scheduler.kappa = [prefix_len](int t, int pos, int comp) {
    bool revealed = prefix_len + t >= pos + 1;  // pos is 0-indexed here
    double k1 = revealed ? 1.0 : 0.0;
    return comp == 1 ? k1 : 1.0 - k1;
  };
  path.w = [](int comp, int pos, Token tok, const TokenSeq& x0,
              const TokenSeq& x1) {
    const TokenSeq& ref = comp == 1 ? x1 : x0;
    return ref[std::size_t(pos)] == tok ? 1.0 : 0.0;
  };
  return path;
}

VelocityField ar_marginal_velocity_field(const Coupling& coupling,
                                         int prefix_len, const Vocab& vocab,
                                         int seq_len) {
  ConditionalPath path = ar_path(prefix_len, vocab);
  ConditionalVelocity cond_u = [prefix_len, vocab](const Timestep& t,
                                                   const TokenSeq& z,
                                                   const Coupling::Pair& pair) {
    return ar_conditional_velocity(pair, prefix_len, t.t, z, vocab);
  };
  return [coupling, path, cond_u, vocab, seq_len](const Timestep& t,
                                                  const TokenSeq& z) {
    double p_z = 0.0;
    for (const auto& pair : coupling.pairs)
      p_z += pair.weight * conditional_state_prob(path, t, pair.x0, pair.x1, z);
    if (p_z < kZeroMass) return VelocitySlice::zeros(seq_len, vocab.size);
    return marginal_velocity(path, coupling, cond_u, t, z);
  };
}

std::optional<int> check_one_sparse(const VelocityField& u, const Timestep& t,
                                    const std::vector<TokenSeq>& states,
                                    double tol) {
  std::optional<int> active;
  for (const auto& z : states) {
    VelocitySlice s = u(t, z);
    for (int i = 0; i < s.positions; ++i) {
      bool nonzero = false;
      for (Token a = 0; a < s.vocab; ++a)
        if (std::abs(s.at(i, a)) > tol) nonzero = true;
      if (!nonzero) continue;
      if (active && *active != i + 1)
        fail("NotOneSparse", "velocity active at two or more token positions");
      active = i + 1;
    }
  }
  return active;
}

ARVerifyReport verify_ar_generation(const DistTable& q, int prefix_len,
                                    const Vocab& vocab) {
  q.check_normalized(kInputTol);
  if (q.mass.empty()) fail("DistTableInvalid", "empty target distribution");
  int seq_len = int(q.mass.begin()->first.size());
  state_space_size(vocab.size, seq_len);
  int horizon = seq_len - prefix_len;

  Coupling coupling = build_mask_coupling(q, prefix_len, vocab);
  ConditionalPath path = ar_path(prefix_len, vocab);
  VelocityField u = ar_marginal_velocity_field(coupling, prefix_len, vocab, seq_len);

  ARVerifyReport report;
  Timestep t0{0, std::max(horizon, 1)};
  DistTable p_t = marginal_path_eval(path, coupling, t0);
  DistTable composed = p_t;
  for (int t = 0; t < horizon; ++t) {
    Timestep ts{t, horizon};
    DistTable p_next = marginal_path_eval(path, coupling, Timestep{t + 1, horizon});

    double residual = continuity_residual(p_t, p_next, u, ts);
    report.ce_residual.push_back(residual);
    report.max_ce_residual = std::max(report.max_ce_residual, residual);

    double gap = linf_gap(push_forward(p_t, u, ts), p_next);
    report.pushforward_gap.push_back(gap);
    report.max_pushforward_gap = std::max(report.max_pushforward_gap, gap);

    std::vector<TokenSeq> states;
    for (const auto& [z, m] : p_t.mass)
      if (m >= kZeroMass) states.push_back(z);
    auto pos = check_one_sparse(u, ts, states);
    report.sparsity_position.push_back(pos.value_or(0));

    composed = push_forward(composed, u, ts);
    p_t = p_next;
  }
  report.final_target_gap = linf_gap(composed, q);
  return report;
}

}  // namespace dfm
