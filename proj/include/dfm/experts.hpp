// Count-based tabular autoregressive models: per-shard experts, a dense
// baseline on the union, add-alpha smoothed next-token distributions,
// evaluation metrics, and checksummed serialization.
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>

#include "dfm/common.hpp"

namespace dfm {

struct Sample {
  std::vector<double> features;  // unit vector; empty for text-only samples
  TokenSeq seq;                  // mask-free
  int topic = -1;                // latent generator label, -1 when unknown

  bool has_features() const { return !features.empty(); }
};

struct Corpus {
  int vocab = 0;  // d, mask token included
  std::vector<Sample> samples;
};

// Fixed-order n-gram model with add-alpha smoothing. Contexts at sequence
// start are left-padded with a begin marker, a reserved id equal to the
// vocabulary size (distinct from the mask token by construction).
struct ExpertModel {
  int order = 0;
  double alpha = 0.0;
  int vocab = 0;
  std::map<TokenSeq, std::map<Token, std::uint64_t>> counts;

  Token begin_id() const { return vocab; }
  // Length-`order` context for the next token after `prefix`.
  TokenSeq context_of(const TokenSeq& prefix) const;
  std::uint64_t context_total(const TokenSeq& context) const;
};

ExpertModel train_expert(const std::vector<Sample>& shard, int order,
                         double alpha, int vocab);

ExpertModel train_dense(const Corpus& corpus, int order, double alpha);

// (count + alpha) / (total + alpha * d) over [0, d). Throws UnseenContext
// when alpha == 0 and the context was never observed.
std::vector<double> next_token(const ExpertModel& model, const TokenSeq& prefix);

// Produces a next-token PMF for a sample at a given prefix length.
using Predictor =
    std::function<std::vector<double>(const Sample& sample, const TokenSeq& prefix)>;

// True next-token conditional, available for synthetic corpora.
using TrueConditional =
    std::function<std::vector<double>(const Sample& sample, const TokenSeq& prefix)>;

struct EvalMetrics {
  double log_loss = 0.0;  // mean negative log probability per token
  std::optional<double> tv_to_truth;  // mean L1/2 distance when q is known
  std::int64_t tokens = 0;
};

EvalMetrics evaluate(const Predictor& predictor, const Corpus& heldout,
                     const TrueConditional* truth = nullptr);

// Sequence file: header "n vocab", then one sample per line as
// "<len> tok tok ...". Item ids are row indices.
void save_corpus_file(const Corpus& corpus, const std::string& path);
Corpus load_corpus_file(const std::string& path);

// Versioned text dump with an FNV-1a checksum; round-trips bit-exactly.
void save_model(const ExpertModel& model, std::ostream& out);
ExpertModel load_model(std::istream& in);
void save_model_file(const ExpertModel& model, const std::string& path);
ExpertModel load_model_file(const std::string& path);

}  // namespace dfm
