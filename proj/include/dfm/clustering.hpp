// Spherical balanced k-means on unit-norm feature vectors, the 2-stage
// fine/coarse variant, nearest-centroid assignment, and the matrix/CSV
// file formats used by the CLI.
#pragma once

#include <cstdint>
#include <string>

#include "dfm/common.hpp"

namespace dfm {

using Vec = std::vector<double>;
using Matrix = std::vector<Vec>;

struct FeatureSet {
  Matrix vectors;                // n x dim, unit rows
  std::vector<std::string> ids;  // n item identifiers
};

struct ClusterModel {
  Matrix centroids;             // K x dim, unit rows
  std::vector<int> assignment;  // item index -> cluster id
  std::vector<int> sizes;
  std::vector<double> objective_history;  // sum of assigned cosines, per iteration
  int iterations = 0;
};

double dot(const Vec& a, const Vec& b);
Vec normalized(const Vec& v);  // throws ZeroVector

// Row-normalizes raw vectors; ids default to row indices.
FeatureSet normalize_features(const Matrix& raw,
                              std::vector<std::string> ids = {});

// Lloyd iterations with a greedy capacity-constrained assignment step:
// cluster sizes stay within +-1 of each other, the cosine objective never
// decreases across recorded iterations, and the result is a deterministic
// function of (features, K, seed).
ClusterModel balanced_kmeans(const FeatureSet& features, int num_clusters,
                             int max_iters, std::uint64_t seed);

// Stage 1: unbalanced spherical k-means into k_fine clusters. Stage 2:
// balanced-by-item-count clustering of the fine centroids into K coarse
// clusters; items inherit their fine cluster's coarse label.
ClusterModel two_stage_balanced_kmeans(const FeatureSet& features,
                                       int num_clusters, int k_fine,
                                       int max_iters, std::uint64_t seed);

// argmax-cosine assignment, ties to the lowest cluster id.
std::vector<int> assign_to_nearest(const FeatureSet& features,
                                   const Matrix& centroids);

// Matrix file: header line "n dim", then n rows of floats. Ids sidecar:
// one id per line. Assignments: CSV item_id,cluster_id.
Matrix load_matrix(const std::string& path);
void save_matrix(const Matrix& m, const std::string& path);
std::vector<std::string> load_ids(const std::string& path);
void save_assignments_csv(const FeatureSet& features,
                          const std::vector<int>& assignment,
                          const std::string& path);
std::vector<std::pair<std::string, int>> load_assignments_csv(
    const std::string& path);

}  // namespace dfm
