#include "dfm/experts.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace dfm {

TokenSeq ExpertModel::context_of(const TokenSeq& prefix) const {
  TokenSeq ctx(std::size_t(order), begin_id());
  int have = std::min<int>(order, int(prefix.size()));
  for (int i = 0; i < have; ++i)
    ctx[std::size_t(order - have + i)] = prefix[prefix.size() - std::size_t(have) + std::size_t(i)];
  return ctx;
}

std::uint64_t ExpertModel::context_total(const TokenSeq& context) const {
  auto it = counts.find(context);
  if (it == counts.end()) return 0;
  std::uint64_t total = 0;
  for (const auto& [_, c] : it->second) total += c;
  return total;
}

ExpertModel train_expert(const std::vector<Sample>& shard, int order,
                         double alpha, int vocab) {
  if (shard.empty()) fail("EmptyShard", "cannot train on an empty shard");
  if (order < 0) fail("ConfigInvalid", "context length must be >= 0");
  if (alpha < 0.0) fail("ConfigInvalid", "smoothing alpha must be >= 0");
  ExpertModel model;
  model.order = order;
  model.alpha = alpha;
  model.vocab = vocab;
  for (const auto& sample : shard) {
    TokenSeq prefix;
    for (Token tok : sample.seq) {
      if (tok < 0 || tok >= vocab) fail("TokenOutOfRange", "token id out of [0, d)");
      model.counts[model.context_of(prefix)][tok] += 1;
      prefix.push_back(tok);
    }
  }
  return model;
}

ExpertModel train_dense(const Corpus& corpus, int order, double alpha) {
  return train_expert(corpus.samples, order, alpha, corpus.vocab);
}

std::vector<double> next_token(const ExpertModel& model, const TokenSeq& prefix) {
  TokenSeq ctx = model.context_of(prefix);
  auto it = model.counts.find(ctx);
  if (it == model.counts.end() && model.alpha == 0.0)
    fail("UnseenContext", "context unseen and alpha = 0");
  double denom = double(model.context_total(ctx)) + model.alpha * model.vocab;
  std::vector<double> pmf(std::size_t(model.vocab), 0.0);
  for (int a = 0; a < model.vocab; ++a) {
    double count = 0.0;
    if (it != model.counts.end()) {
      auto jt = it->second.find(a);
      if (jt != it->second.end()) count = double(jt->second);
    }
    pmf[std::size_t(a)] = (count + model.alpha) / denom;
  }
  return pmf;
}

EvalMetrics evaluate(const Predictor& predictor, const Corpus& heldout,
                     const TrueConditional* truth) {
  if (heldout.samples.empty()) fail("EmptyCorpus", "held-out corpus is empty");
  EvalMetrics metrics;
  double nll = 0.0;
  double tv = 0.0;
  for (const auto& sample : heldout.samples) {
    TokenSeq prefix;
    for (Token target : sample.seq) {
      std::vector<double> pmf = predictor(sample, prefix);
      double p = pmf[std::size_t(target)];
      nll += -std::log(std::max(p, 1e-300));
      if (truth) {
        std::vector<double> ref = (*truth)(sample, prefix);
        double l1 = 0.0;
        for (std::size_t a = 0; a < pmf.size(); ++a)
          l1 += std::abs(pmf[a] - ref[a]);
        tv += 0.5 * l1;
      }
      prefix.push_back(target);
      ++metrics.tokens;
    }
  }
  if (metrics.tokens == 0) fail("EmptyCorpus", "held-out corpus has no tokens");
  metrics.log_loss = nll / double(metrics.tokens);
  if (truth) metrics.tv_to_truth = tv / double(metrics.tokens);
  return metrics;
}

void save_corpus_file(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("IOError", "cannot open " + path + " for writing");
  out << corpus.samples.size() << ' ' << corpus.vocab << '\n';
  for (const auto& s : corpus.samples) {
    out << s.seq.size();
    for (Token tok : s.seq) out << ' ' << tok;
    out << '\n';
  }
}

Corpus load_corpus_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("IOError", "cannot open " + path);
  Corpus corpus;
  std::size_t n = 0;
  if (!(in >> n >> corpus.vocab)) fail("IOError", "bad corpus header in " + path);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t len = 0;
    if (!(in >> len)) fail("IOError", "truncated corpus in " + path);
    Sample s;
    s.seq.resize(len);
    for (std::size_t j = 0; j < len; ++j)
      if (!(in >> s.seq[j])) fail("IOError", "truncated corpus in " + path);
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

namespace {

std::uint64_t fnv1a(const std::string& data, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

void save_model(const ExpertModel& model, std::ostream& out) {
  std::ostringstream body;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", model.alpha);  // hexfloat round-trips
  body << "dfm-expert v1\n"
       << "order " << model.order << "\n"
       << "alpha " << buf << "\n"
       << "vocab " << model.vocab << "\n"
       << "contexts " << model.counts.size() << "\n";
  for (const auto& [ctx, row] : model.counts) {
    body << "ctx";
    for (Token tok : ctx) body << ' ' << tok;
    body << " ->";
    for (const auto& [tok, count] : row) body << ' ' << tok << ' ' << count;
    body << "\n";
  }
  std::string text = body.str();
  char sum[32];
  std::snprintf(sum, sizeof sum, "%016" PRIx64, fnv1a(text));
  out << text << "checksum " << sum << "\n";
}

ExpertModel load_model(std::istream& in) {
  std::ostringstream body;
  std::string line;
  std::string checksum_line;
  while (std::getline(in, line)) {
    if (line.rfind("checksum ", 0) == 0) {
      checksum_line = line;
      break;
    }
    body << line << "\n";
  }
  if (checksum_line.empty()) fail("ModelCorrupt", "missing checksum line");
  char expect[32];
  std::snprintf(expect, sizeof expect, "%016" PRIx64, fnv1a(body.str()));
  if (checksum_line.substr(9) != expect)
    fail("ModelCorrupt", "checksum mismatch");

  std::istringstream text(body.str());
  std::string word;
  ExpertModel model;
  std::size_t n_contexts = 0;
  text >> word;  // dfm-expert
  std::string version;
  text >> version;
  if (word != "dfm-expert" || version != "v1")
    fail("ModelCorrupt", "unknown model format or version");
  text >> word >> model.order;
  text >> word;
  text >> word;
  model.alpha = std::strtod(word.c_str(), nullptr);
  text >> word >> model.vocab;
  text >> word >> n_contexts;
  for (std::size_t i = 0; i < n_contexts; ++i) {
    text >> word;  // ctx
    TokenSeq ctx;
    while (text >> word && word != "->") ctx.push_back(std::atoi(word.c_str()));
    auto& row = model.counts[ctx];
    std::string rest;
    std::getline(text, rest);
    std::istringstream row_in(rest);
    Token tok;
    std::uint64_t count;
    while (row_in >> tok >> count) row[tok] = count;
  }
  return model;
}

void save_model_file(const ExpertModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("IOError", "cannot open " + path + " for writing");
  save_model(model, out);
}

ExpertModel load_model_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("IOError", "cannot open " + path);
  return load_model(in);
}

}  // namespace dfm
