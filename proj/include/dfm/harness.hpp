// Experiment orchestration: config parsing, synthetic clustered corpus
// generation, the equivalence suite, the end-to-end experiment pipeline,
// and machine-readable reports.
#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"

#include "dfm/clustering.hpp"
#include "dfm/decentral.hpp"
#include "dfm/experts.hpp"

namespace dfm {

using Json = nlohmann::ordered_json;

struct RouterParams {
  double temperature = 0.0;
  int top_k = 1;
};

struct KMeansParams {
  int max_iters = 0;
  int k_fine = 0;
  bool two_stage = false;
};

struct ExpertParams {
  int order = 0;
  double alpha = 0.0;
};

struct CorpusParams {
  int num_samples = 0;
  int num_heldout = 0;
  int feature_dim = 0;
  int topics = 0;
  double noise = 0.0;
  double text_only_frac = 0.0;
};

// Every field is required in the config file; there are no silent defaults.
struct ExperimentConfig {
  int vocab_size = 0;
  int seq_len = 0;
  int prefix_len = 0;
  int num_clusters = 0;
  RouterParams router;
  KMeansParams kmeans;
  ExpertParams expert;
  CorpusParams corpus;
  std::uint64_t seed = 0;
  std::string out_dir;

  Vocab vocab() const { return Vocab{vocab_size, vocab_size - 1}; }
  void validate() const;
  Json to_json() const;
  static ExperimentConfig from_json(const Json& j);
};

ExperimentConfig load_config(const std::string& path);

struct CheckResult {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool pass = false;
  bool hard = true;  // informational checks never fail the run
  std::string note;
};

struct RunReport {
  std::string kind;  // "verify" or "experiment"
  Json config_echo;
  std::uint64_t seed = 0;
  std::vector<CheckResult> checks;
  Json tables = Json::object();
  double wall_seconds = 0.0;
  std::string generated_at;
};

bool all_hard_checks_pass(const RunReport& report);
// include_timing=false yields the deterministic portion of the report.
Json report_to_json(const RunReport& report, bool include_timing = true);
RunReport report_from_json(const Json& j);
// Writes report.json and per-table CSV files into out_dir.
void emit_report(const RunReport& report, const std::string& out_dir,
                 const std::string& format);

// Per-topic ground-truth generator: first-order Markov chain over the
// mask-free tokens plus a feature blob direction on the unit sphere.
struct TopicChain {
  Vec initial;    // PMF over [0, d), zero at the mask
  Matrix trans;   // d x d rows; mask row unused
  Vec mean_dir;   // unit vector in feature space
};

struct SynthCorpus {
  Corpus train;
  Corpus heldout;
  std::vector<TopicChain> chains;
};

// True next-token conditional of the generating chain.
std::vector<double> chain_conditional(const TopicChain& chain,
                                      const TokenSeq& prefix, int vocab);

SynthCorpus synth_corpus(const ExperimentConfig& config);

// Enumeration-backed verification of every equivalence claim: AR continuity
// and generation, 1-sparsity, the decentralization identity, the equal-prior
// simplification (plus its unequal-prior regression guard), and the
// exact-ensemble = dense identity for tabular experts.
RunReport run_equivalence_suite(const ExperimentConfig& config);

// Full pipeline: synthesize, partition, train experts + dense, evaluate the
// routed ensemble against the dense baseline on held-out data.
RunReport run_experiment(const ExperimentConfig& config);

}  // namespace dfm
