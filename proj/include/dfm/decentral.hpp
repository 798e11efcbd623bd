// Decentralized decomposition of the generating velocity into
// router-weighted expert flows, the softmax/top-k feature router, and
// exact-posterior reference routing for equivalence checks.
#pragma once

#include "dfm/core.hpp"
#include "dfm/experts.hpp"

namespace dfm {

// Disjoint clusters of coupling pairs, indexed by pair position.
struct ClusterPartition {
  int num_clusters = 0;
  std::vector<int> assignment;  // pair index -> cluster id

  void validate(const Coupling& coupling) const;
};

struct RouterWeights {
  std::vector<double> weights;

  void validate(double tol = kTightTol) const {
    double sum = 0.0;
    for (double w : weights) {
      if (w < -tol) fail("RouterWeightsInvalid", "negative router weight");
      sum += w;
    }
    if (std::abs(sum - 1.0) > tol)
      fail("RouterWeightsInvalid", "router weights do not sum to 1");
  }
};

struct RouterConfig {
  double temperature = 0.0;  // tau > 0, always explicit in configs
  int top_k = 1;
  std::vector<std::vector<double>> centroids;  // K unit vectors

  void validate() const;
};

// Prior cluster mass p(S_k): total coupling weight of the cluster,
// time-invariant for convex (AR prefix) clusters.
double cluster_prior(const ClusterPartition& partition, const Coupling& coupling,
                     int cluster);

// Within-cluster state likelihood p_t(z | S_k).
double cluster_state_likelihood(const ClusterPartition& partition,
                                const ConditionalPath& path,
                                const Coupling& coupling, int cluster,
                                const Timestep& t, const TokenSeq& z);

// Cluster-conditional generating velocity (the expert flow): posterior
// mixture of conditional velocities over pairs in the cluster.
VelocitySlice expert_flow(const ClusterPartition& partition, int cluster,
                          const ConditionalPath& path, const Coupling& coupling,
                          const ConditionalVelocity& cond_u, const Timestep& t,
                          const TokenSeq& z);

// Bayes posterior over clusters given state z:
// weight_k = p_t(z|S_k) p(S_k) / p_t(z).
RouterWeights exact_posterior(const ClusterPartition& partition,
                              const ConditionalPath& path,
                              const Coupling& coupling, const Timestep& t,
                              const TokenSeq& z);

// Weighted sum of expert-flow slices. With exact-posterior weights this
// reproduces the centralized marginal velocity.
VelocitySlice combine_velocity(const std::vector<VelocitySlice>& flows,
                               const RouterWeights& weights);

// Equal-prior simplification: (1/K) sum_k (p_t(z|S_k)/p_t(z)) u(.|S_k),
// where p_t(z) is taken from the actual cluster priors. Matches
// combine_velocity with exact posteriors only when all priors are 1/K.
VelocitySlice combine_velocity_equal_prior(const std::vector<VelocitySlice>& flows,
                                           const std::vector<double>& likelihoods,
                                           double state_mass);

// Softmax over temperature-scaled cosine similarities to the centroids;
// time-independent and state-agnostic.
RouterWeights softmax_route(const std::vector<double>& features,
                            const RouterConfig& config);

// Keeps the k largest weights (ties to the lowest cluster id), zeroes the
// rest, renormalizes.
RouterWeights topk_filter(const RouterWeights& weights, int k);

// Router-weighted mixture of expert next-token distributions.
std::vector<double> ensemble_next_token(const std::vector<ExpertModel>& experts,
                                        const RouterWeights& weights,
                                        const TokenSeq& prefix);

}  // namespace dfm
