#include "dfm/decentral.hpp"

#include <algorithm>
#include <numeric>

namespace dfm {

void ClusterPartition::validate(const Coupling& coupling) const {
  if (num_clusters < 1) fail("PartitionInvalid", "need at least one cluster");
  if (assignment.size() != coupling.pairs.size())
    fail("PartitionInvalid", "assignment does not cover the coupling");
  std::vector<int> sizes(std::size_t(num_clusters), 0);
  for (int c : assignment) {
    if (c < 0 || c >= num_clusters)
      fail("PartitionInvalid", "cluster id out of range");
    ++sizes[std::size_t(c)];
  }
  for (int s : sizes)
    if (s == 0) fail("PartitionInvalid", "empty cluster");
}

void RouterConfig::validate() const {
  if (temperature <= 0.0) fail("RouterConfigInvalid", "temperature must be positive");
  if (centroids.empty()) fail("RouterConfigInvalid", "no centroids");
  int k = int(centroids.size());
  if (top_k < 1 || top_k > k) fail("BadK", "top_k out of [1, K]");
  for (const auto& c : centroids) {
    double norm = 0.0;
    for (double v : c) norm += v * v;
    if (std::abs(std::sqrt(norm) - 1.0) > kInputTol)
      fail("RouterConfigInvalid", "centroid is not unit-norm");
  }
}

double cluster_prior(const ClusterPartition& partition, const Coupling& coupling,
                     int cluster) {
  double mass = 0.0;
  for (std::size_t i = 0; i < coupling.pairs.size(); ++i)
    if (partition.assignment[i] == cluster) mass += coupling.pairs[i].weight;
  return mass;
}

double cluster_state_likelihood(const ClusterPartition& partition,
                                const ConditionalPath& path,
                                const Coupling& coupling, int cluster,
                                const Timestep& t, const TokenSeq& z) {
  double prior = cluster_prior(partition, coupling, cluster);
  if (prior < kZeroMass) fail("PartitionInvalid", "cluster carries no mass");
  double joint = 0.0;
  for (std::size_t i = 0; i < coupling.pairs.size(); ++i) {
    if (partition.assignment[i] != cluster) continue;
    const auto& pair = coupling.pairs[i];
    joint += pair.weight * conditional_state_prob(path, t, pair.x0, pair.x1, z);
  }
  return joint / prior;
}

VelocitySlice expert_flow(const ClusterPartition& partition, int cluster,
                          const ConditionalPath& path, const Coupling& coupling,
                          const ConditionalVelocity& cond_u, const Timestep& t,
                          const TokenSeq& z) {
  partition.validate(coupling);
  double prior = cluster_prior(partition, coupling, cluster);
  double likelihood =
      cluster_state_likelihood(partition, path, coupling, cluster, t, z);
  if (likelihood < kZeroMass)
    fail("ZeroClusterMassAtState", "cluster puts no mass on this state");
  VelocitySlice out = VelocitySlice::zeros(int(z.size()), path.vocab.size);
  for (std::size_t i = 0; i < coupling.pairs.size(); ++i) {
    if (partition.assignment[i] != cluster) continue;
    const auto& pair = coupling.pairs[i];
    double within_posterior =
        pair.weight * conditional_state_prob(path, t, pair.x0, pair.x1, z) /
        (prior * likelihood);
    if (within_posterior == 0.0) continue;
    VelocitySlice cond = cond_u(t, z, pair);
    for (std::size_t r = 0; r < out.rate.size(); ++r)
      out.rate[r] += within_posterior * cond.rate[r];
  }
  return out;
}

RouterWeights exact_posterior(const ClusterPartition& partition,
                              const ConditionalPath& path,
                              const Coupling& coupling, const Timestep& t,
                              const TokenSeq& z) {
  partition.validate(coupling);
  RouterWeights out;
  out.weights.resize(std::size_t(partition.num_clusters), 0.0);
  double total = 0.0;
  for (int k = 0; k < partition.num_clusters; ++k) {
    double joint = cluster_prior(partition, coupling, k) *
                   cluster_state_likelihood(partition, path, coupling, k, t, z);
    out.weights[std::size_t(k)] = joint;
    total += joint;
  }
  if (total < kZeroMass)
    fail("ZeroMassState", "posterior queried at a zero-mass state");
  for (double& w : out.weights) w /= total;
  return out;
}

VelocitySlice combine_velocity(const std::vector<VelocitySlice>& flows,
                               const RouterWeights& weights) {
  if (flows.size() != weights.weights.size())
    fail("DimensionMismatch", "one weight per expert flow required");
  weights.validate(kInputTol);
  VelocitySlice out = VelocitySlice::zeros(flows.at(0).positions, flows.at(0).vocab);
  for (std::size_t k = 0; k < flows.size(); ++k) {
    if (flows[k].positions != out.positions || flows[k].vocab != out.vocab)
      fail("DimensionMismatch", "expert flow slices have different shapes");
    for (std::size_t r = 0; r < out.rate.size(); ++r)
      out.rate[r] += weights.weights[k] * flows[k].rate[r];
  }
  return out;
}

VelocitySlice combine_velocity_equal_prior(const std::vector<VelocitySlice>& flows,
                                           const std::vector<double>& likelihoods,
                                           double state_mass) {
  if (flows.size() != likelihoods.size())
    fail("DimensionMismatch", "one likelihood per expert flow required");
  if (state_mass < kZeroMass) fail("ZeroMassState", "zero-mass state");
  double inv_k = 1.0 / double(flows.size());
  VelocitySlice out = VelocitySlice::zeros(flows.at(0).positions, flows.at(0).vocab);
  for (std::size_t k = 0; k < flows.size(); ++k) {
    double w = inv_k * likelihoods[k] / state_mass;
    for (std::size_t r = 0; r < out.rate.size(); ++r)
      out.rate[r] += w * flows[k].rate[r];
  }
  return out;
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) fail("DimensionMismatch", "feature dim mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) fail("ZeroFeatureVector", "zero-norm vector");
  return dot / std::sqrt(na * nb);
}

}  // namespace

RouterWeights softmax_route(const std::vector<double>& features,
                            const RouterConfig& config) {
  config.validate();
  double norm = 0.0;
  for (double v : features) norm += v * v;
  if (norm <= 0.0) fail("ZeroFeatureVector", "cannot route a zero feature vector");
  std::vector<double> scores;
  scores.reserve(config.centroids.size());
  for (const auto& c : config.centroids)
    scores.push_back(config.temperature * cosine(features, c));
  double peak = *std::max_element(scores.begin(), scores.end());
  RouterWeights out;
  double total = 0.0;
  for (double s : scores) {
    double e = std::exp(s - peak);
    out.weights.push_back(e);
    total += e;
  }
  for (double& w : out.weights) w /= total;
  return out;
}

RouterWeights topk_filter(const RouterWeights& weights, int k) {
  int n = int(weights.weights.size());
  if (k < 1 || k > n) fail("BadK", "k out of [1, K]");
  std::vector<int> order(weights.weights.size());
  std::iota(order.begin(), order.end(), 0);
  // Ties broken by lowest cluster id.
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return weights.weights[std::size_t(a)] > weights.weights[std::size_t(b)];
  });
  RouterWeights out;
  out.weights.assign(std::size_t(n), 0.0);
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    int idx = order[std::size_t(i)];
    out.weights[std::size_t(idx)] = weights.weights[std::size_t(idx)];
    total += weights.weights[std::size_t(idx)];
  }
  if (total <= 0.0) fail("RouterWeightsInvalid", "top-k kept zero total weight");
  for (double& w : out.weights) w /= total;
  return out;
}

std::vector<double> ensemble_next_token(const std::vector<ExpertModel>& experts,
                                        const RouterWeights& weights,
                                        const TokenSeq& prefix) {
  if (experts.size() != weights.weights.size())
    fail("DimensionMismatch", "one weight per expert required");
  weights.validate(kInputTol);
  int vocab = experts.at(0).vocab;
  std::vector<double> out(std::size_t(vocab), 0.0);
  bool any = false;
  for (std::size_t k = 0; k < experts.size(); ++k) {
    double w = weights.weights[k];
    if (w == 0.0) continue;
    if (experts[k].vocab != vocab)
      fail("DimensionMismatch", "experts do not share a vocabulary");
    try {
      std::vector<double> pmf = next_token(experts[k], prefix);
      for (std::size_t a = 0; a < out.size(); ++a) out[a] += w * pmf[a];
      any = true;
    } catch (const Error& e) {
      if (e.code() != "UnseenContext") throw;
    }
  }
  if (!any)
    fail("EmptyPrefixDistribution",
         "every positive-weight expert has an unseen prefix");
  // Renormalize in case an unseen-context expert dropped out.
  double total = std::accumulate(out.begin(), out.end(), 0.0);
  for (double& p : out) p /= total;
  return out;
}

}  // namespace dfm
