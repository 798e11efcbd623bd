#include "dfm/clustering.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace dfm {

double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) fail("DimensionMismatch", "vector dim mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Vec normalized(const Vec& v) {
  double norm = std::sqrt(dot(v, v));
  if (norm <= 0.0) fail("ZeroVector", "cannot normalize a zero vector");
  Vec out = v;
  for (double& x : out) x /= norm;
  return out;
}

FeatureSet normalize_features(const Matrix& raw, std::vector<std::string> ids) {
  FeatureSet out;
  out.vectors.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    double norm = std::sqrt(dot(raw[i], raw[i]));
    if (norm <= 0.0)
      fail("ZeroVector", "zero feature vector at row " + std::to_string(i));
    out.vectors.push_back(normalized(raw[i]));
  }
  if (ids.empty()) {
    for (std::size_t i = 0; i < raw.size(); ++i)
      out.ids.push_back(std::to_string(i));
  } else {
    if (ids.size() != raw.size())
      fail("DimensionMismatch", "one id per feature row required");
    out.ids = std::move(ids);
  }
  return out;
}

namespace {

struct ScoredEntry {
  double score;
  int item;
  int cluster;
};

// Capacity-constrained greedy assignment: per-cluster base capacity is
// floor(total/K); a shared budget of (total mod K) extra units lets a
// cluster exceed the base by at most one item's weight. Deterministic
// tie-break by (score desc, item asc, cluster asc).
std::vector<int> greedy_balanced_assign(const Matrix& vectors,
                                        const std::vector<std::int64_t>& weights,
                                        const Matrix& centroids) {
  int n = int(vectors.size());
  int k = int(centroids.size());
  std::vector<ScoredEntry> entries;
  entries.reserve(std::size_t(n) * std::size_t(k));
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < k; ++c)
      entries.push_back({dot(vectors[std::size_t(i)], centroids[std::size_t(c)]), i, c});
  std::sort(entries.begin(), entries.end(), [](const ScoredEntry& a, const ScoredEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.item != b.item) return a.item < b.item;
    return a.cluster < b.cluster;
  });

  std::int64_t total = std::accumulate(weights.begin(), weights.end(), std::int64_t(0));
  std::int64_t base = total / k;
  std::int64_t budget = total - base * k;
  std::vector<std::int64_t> load(std::size_t(k), 0);
  std::vector<int> assignment(std::size_t(n), -1);
  int assigned = 0;
  for (const auto& e : entries) {
    if (assigned == n) break;
    if (assignment[std::size_t(e.item)] != -1) continue;
    std::int64_t w = weights[std::size_t(e.item)];
    std::int64_t& l = load[std::size_t(e.cluster)];
    if (l + w <= base) {
      l += w;
    } else if (l <= base && l + w <= base + budget) {
      budget -= l + w - base;
      l += w;
    } else {
      continue;
    }
    assignment[std::size_t(e.item)] = e.cluster;
    ++assigned;
  }
  // Indivisible weights can leave items unplaced; park them on the least
  // loaded cluster. Never reached for unit weights.
  for (int i = 0; i < n; ++i) {
    if (assignment[std::size_t(i)] != -1) continue;
    int best = 0;
    for (int c = 1; c < k; ++c)
      if (load[std::size_t(c)] < load[std::size_t(best)]) best = c;
    load[std::size_t(best)] += weights[std::size_t(i)];
    assignment[std::size_t(i)] = best;
  }
  return assignment;
}

// k-means++-style seeding over cosine distance, driven by the seeded PRNG.
Matrix plusplus_init(const Matrix& vectors, const std::vector<std::int64_t>& weights,
                     int k, Rng& rng) {
  int n = int(vectors.size());
  std::vector<double> dist(std::size_t(n), 1.0);
  std::vector<bool> chosen(std::size_t(n), false);
  Matrix centroids;
  for (int c = 0; c < k; ++c) {
    std::vector<double> mass(std::size_t(n), 0.0);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      if (chosen[std::size_t(i)]) continue;
      mass[std::size_t(i)] = double(weights[std::size_t(i)]) *
                             (c == 0 ? 1.0 : std::max(dist[std::size_t(i)], 0.0));
      total += mass[std::size_t(i)];
    }
    int pick = -1;
    if (total > 0.0) {
      double target = rng.next_unit() * total;
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        acc += mass[std::size_t(i)];
        if (acc >= target && mass[std::size_t(i)] > 0.0) {
          pick = i;
          break;
        }
      }
    }
    if (pick == -1) {  // all remaining mass zero: lowest unchosen index
      for (int i = 0; i < n; ++i)
        if (!chosen[std::size_t(i)]) {
          pick = i;
          break;
        }
    }
    chosen[std::size_t(pick)] = true;
    centroids.push_back(vectors[std::size_t(pick)]);
    for (int i = 0; i < n; ++i)
      dist[std::size_t(i)] = std::min(
          dist[std::size_t(i)], 1.0 - dot(vectors[std::size_t(i)], centroids.back()));
  }
  return centroids;
}

double weighted_objective(const Matrix& vectors,
                          const std::vector<std::int64_t>& weights,
                          const std::vector<int>& assignment,
                          const Matrix& centroids) {
  double obj = 0.0;
  for (std::size_t i = 0; i < vectors.size(); ++i)
    obj += double(weights[i]) * dot(vectors[i], centroids[std::size_t(assignment[i])]);
  return obj;
}

Matrix update_centroids(const Matrix& vectors,
                        const std::vector<std::int64_t>& weights,
                        const std::vector<int>& assignment, int k,
                        const Matrix& previous) {
  std::size_t dim = vectors.at(0).size();
  Matrix centroids(std::size_t(k), Vec(dim, 0.0));
  for (std::size_t i = 0; i < vectors.size(); ++i)
    for (std::size_t j = 0; j < dim; ++j)
      centroids[std::size_t(assignment[i])][j] += double(weights[i]) * vectors[i][j];
  for (int c = 0; c < k; ++c) {
    double norm = std::sqrt(dot(centroids[std::size_t(c)], centroids[std::size_t(c)]));
    if (norm > 1e-12) {
      for (double& x : centroids[std::size_t(c)]) x /= norm;
      continue;
    }
    // Degenerate zero mean: fall back to the assigned vector farthest from
    // every other centroid (previous iterate's, which is still unit-norm).
    int best = -1;
    double best_score = 2.0;
    for (std::size_t i = 0; i < vectors.size(); ++i) {
      if (assignment[i] != c) continue;
      double worst = -1.0;
      for (int o = 0; o < k; ++o) {
        if (o == c) continue;
        worst = std::max(worst, dot(vectors[i], previous[std::size_t(o)]));
      }
      if (best == -1 || worst < best_score) {
        best = int(i);
        best_score = worst;
      }
    }
    centroids[std::size_t(c)] =
        best == -1 ? previous[std::size_t(c)] : vectors[std::size_t(best)];
  }
  return centroids;
}

ClusterModel weighted_balanced_kmeans(const Matrix& vectors,
                                      const std::vector<std::int64_t>& weights,
                                      int k, int max_iters, Rng& rng) {
  int n = int(vectors.size());
  if (k < 1) fail("TooFewItems", "need at least one cluster");
  if (n < k) fail("TooFewItems", "fewer items than clusters");
  ClusterModel model;
  Matrix centroids = plusplus_init(vectors, weights, k, rng);
  std::vector<int> assignment;
  double best_obj = -1e300;
  for (int iter = 0; iter < std::max(max_iters, 1); ++iter) {
    std::vector<int> next = greedy_balanced_assign(vectors, weights, centroids);
    Matrix next_centroids = update_centroids(vectors, weights, next, k, centroids);
    double obj = weighted_objective(vectors, weights, next, next_centroids);
    // Greedy assignment is not provably monotone; keep the best iterate and
    // stop on any regression so the recorded objective never decreases.
    if (obj < best_obj) break;
    bool fixpoint = (next == assignment);
    assignment = std::move(next);
    centroids = std::move(next_centroids);
    best_obj = obj;
    model.objective_history.push_back(obj);
    model.iterations = iter + 1;
    if (fixpoint) break;
  }
  model.centroids = std::move(centroids);
  model.assignment = std::move(assignment);
  model.sizes.assign(std::size_t(k), 0);
  for (int a : model.assignment) ++model.sizes[std::size_t(a)];
  return model;
}

// Plain spherical k-means (argmax-cosine assignment, no balance constraint).
ClusterModel unbalanced_kmeans(const Matrix& vectors, int k, int max_iters,
                               Rng& rng) {
  int n = int(vectors.size());
  if (n < k) fail("TooFewItems", "fewer items than clusters");
  std::vector<std::int64_t> unit(std::size_t(n), 1);
  Matrix centroids = plusplus_init(vectors, unit, k, rng);
  ClusterModel model;
  std::vector<int> assignment(std::size_t(n), -1);
  for (int iter = 0; iter < std::max(max_iters, 1); ++iter) {
    std::vector<int> next(std::size_t(n), 0);
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_score = dot(vectors[std::size_t(i)], centroids[0]);
      for (int c = 1; c < k; ++c) {
        double s = dot(vectors[std::size_t(i)], centroids[std::size_t(c)]);
        if (s > best_score) {
          best_score = s;
          best = c;
        }
      }
      next[std::size_t(i)] = best;
    }
    // Re-seed empty clusters with the worst-fitting item.
    std::vector<int> sizes(std::size_t(k), 0);
    for (int a : next) ++sizes[std::size_t(a)];
    for (int c = 0; c < k; ++c) {
      if (sizes[std::size_t(c)] > 0) continue;
      int worst = -1;
      double worst_score = 2.0;
      for (int i = 0; i < n; ++i) {
        if (sizes[std::size_t(next[std::size_t(i)])] <= 1) continue;
        double s = dot(vectors[std::size_t(i)],
                       centroids[std::size_t(next[std::size_t(i)])]);
        if (s < worst_score) {
          worst_score = s;
          worst = i;
        }
      }
      if (worst == -1) continue;
      --sizes[std::size_t(next[std::size_t(worst)])];
      next[std::size_t(worst)] = c;
      ++sizes[std::size_t(c)];
    }
    bool fixpoint = (next == assignment);
    assignment = std::move(next);
    centroids = update_centroids(vectors, unit, assignment, k, centroids);
    model.iterations = iter + 1;
    if (fixpoint) break;
  }
  model.centroids = std::move(centroids);
  model.assignment = std::move(assignment);
  model.sizes.assign(std::size_t(k), 0);
  for (int a : model.assignment) ++model.sizes[std::size_t(a)];
  return model;
}

}  // namespace

ClusterModel balanced_kmeans(const FeatureSet& features, int num_clusters,
                             int max_iters, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x6b6d65616e73ULL));
  std::vector<std::int64_t> unit(features.vectors.size(), 1);
  return weighted_balanced_kmeans(features.vectors, unit, num_clusters,
                                  max_iters, rng);
}

ClusterModel two_stage_balanced_kmeans(const FeatureSet& features,
                                       int num_clusters, int k_fine,
                                       int max_iters, std::uint64_t seed) {
  if (k_fine < num_clusters) fail("TooFewItems", "k_fine must be >= K");
  Rng rng(derive_seed(seed, 0x32737461676575ULL));
  ClusterModel fine = unbalanced_kmeans(features.vectors, k_fine, max_iters, rng);

  std::vector<std::int64_t> weights(std::size_t(k_fine), 0);
  for (int a : fine.assignment) ++weights[std::size_t(a)];
  ClusterModel coarse_of_fine = weighted_balanced_kmeans(
      fine.centroids, weights, num_clusters, max_iters, rng);

  ClusterModel model;
  model.centroids = coarse_of_fine.centroids;
  model.objective_history = coarse_of_fine.objective_history;
  model.iterations = fine.iterations + coarse_of_fine.iterations;
  model.assignment.reserve(features.vectors.size());
  for (int a : fine.assignment)
    model.assignment.push_back(coarse_of_fine.assignment[std::size_t(a)]);
  model.sizes.assign(std::size_t(num_clusters), 0);
  for (int a : model.assignment) ++model.sizes[std::size_t(a)];
  // Recompute coarse centroids from the member items themselves.
  std::vector<std::int64_t> unit(features.vectors.size(), 1);
  model.centroids = update_centroids(features.vectors, unit, model.assignment,
                                     num_clusters, model.centroids);
  return model;
}

std::vector<int> assign_to_nearest(const FeatureSet& features,
                                   const Matrix& centroids) {
  std::vector<int> out;
  out.reserve(features.vectors.size());
  for (const auto& v : features.vectors) {
    int best = 0;
    double best_score = dot(v, centroids.at(0));
    for (std::size_t c = 1; c < centroids.size(); ++c) {
      double s = dot(v, centroids[c]);
      if (s > best_score) {  // strict: ties keep the lowest id
        best_score = s;
        best = int(c);
      }
    }
    out.push_back(best);
  }
  return out;
}

Matrix load_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("IOError", "cannot open " + path);
  std::size_t n = 0, dim = 0;
  if (!(in >> n >> dim)) fail("IOError", "bad matrix header in " + path);
  Matrix m(n, Vec(dim, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dim; ++j)
      if (!(in >> m[i][j])) fail("IOError", "truncated matrix in " + path);
  return m;
}

void save_matrix(const Matrix& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("IOError", "cannot open " + path + " for writing");
  std::size_t dim = m.empty() ? 0 : m[0].size();
  out << m.size() << ' ' << dim << '\n';
  char buf[64];
  for (const auto& row : m) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", row[j]);
      out << (j ? " " : "") << buf;
    }
    out << '\n';
  }
}

std::vector<std::string> load_ids(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("IOError", "cannot open " + path);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ids.push_back(line);
  return ids;
}

void save_assignments_csv(const FeatureSet& features,
                          const std::vector<int>& assignment,
                          const std::string& path) {
  if (features.ids.size() != assignment.size())
    fail("DimensionMismatch", "one assignment per item required");
  std::ofstream out(path);
  if (!out) fail("IOError", "cannot open " + path + " for writing");
  out << "item_id,cluster_id\n";
  for (std::size_t i = 0; i < assignment.size(); ++i)
    out << features.ids[i] << ',' << assignment[i] << '\n';
}

std::vector<std::pair<std::string, int>> load_assignments_csv(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("IOError", "cannot open " + path);
  std::vector<std::pair<std::string, int>> out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto comma = line.rfind(',');
    if (comma == std::string::npos) fail("IOError", "bad assignment row: " + line);
    out.emplace_back(line.substr(0, comma), std::atoi(line.c_str() + comma + 1));
  }
  return out;
}

}  // namespace dfm
