// Autoregressive generation as a discrete-time flow: mask coupling,
// reveal scheduler, 1-sparse conditional velocity, and end-to-end
// verification that the continuity equation holds and generation follows.
//
// Convention: token positions are 1-indexed at every interface; position i
// is revealed at the end of step t = i - P, so after step t exactly P + t
// tokens are revealed.
#pragma once

#include <optional>

#include "dfm/core.hpp"

namespace dfm {

// Pairs each target sequence with its masked version: prefix of length P
// kept, remainder set to the mask token. Targets must be mask-free.
Coupling build_mask_coupling(const DistTable& q, int prefix_len,
                             const Vocab& vocab);

// State x_t: first P + t tokens of x1, masks after.
TokenSeq ar_state(const TokenSeq& x1, int prefix_len, int t, const Vocab& vocab);

// Degenerate conditional path delta_{x_t}.
DistTable ar_conditional_path(const Coupling::Pair& pair, int prefix_len, int t,
                              const Vocab& vocab);

// Conditional velocity: zero off the on-path state x_t; at x_t, a unit swap
// at the single reveal position P + t + 1 (1-indexed).
VelocitySlice ar_conditional_velocity(const Coupling::Pair& pair,
                                      int prefix_len, int t, const TokenSeq& z,
                                      const Vocab& vocab);

// The AR path in the generic two-component scheduler form, usable with the
// core path/velocity machinery.
ConditionalPath ar_path(int prefix_len, const Vocab& vocab);

// The marginal AR velocity field over a mask coupling; zero slice at states
// below the zero-mass cutoff.
VelocityField ar_marginal_velocity_field(const Coupling& coupling,
                                         int prefix_len, const Vocab& vocab,
                                         int seq_len);

// Returns the unique active position (1-indexed) of u on the given states,
// nullopt when u is identically zero there; throws NotOneSparse when two
// or more positions are active.
std::optional<int> check_one_sparse(const VelocityField& u, const Timestep& t,
                                    const std::vector<TokenSeq>& states,
                                    double tol = kTightTol);

struct ARVerifyReport {
  std::vector<double> ce_residual;       // per t in 0..n-1
  std::vector<double> pushforward_gap;   // per t
  std::vector<int> sparsity_position;    // per t, 1-indexed; 0 when u == 0
  double final_target_gap = 0.0;         // composed push-forward vs q
  double max_ce_residual = 0.0;
  double max_pushforward_gap = 0.0;
};

// Builds the coupling, marginal path, and marginal velocity for q, then
// checks the continuity equation, per-step push-forward, sparsity position,
// and that composing all steps from p_0 reproduces q.
ARVerifyReport verify_ar_generation(const DistTable& q, int prefix_len,
                                    const Vocab& vocab);

}  // namespace dfm
