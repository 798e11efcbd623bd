#include "dfm/harness.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>

#include "dfm/ar.hpp"

namespace dfm {

namespace {

const Json& require(const Json& j, const std::string& key) {
  if (!j.contains(key))
    fail("ConfigInvalid", "missing required config field: " + key);
  return j.at(key);
}

std::string iso_now() {
  auto now = std::chrono::system_clock::now();
  std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
  return buf;
}

}  // namespace

void ExperimentConfig::validate() const {
  vocab().validate();
  if (seq_len < 1) fail("ConfigInvalid", "seq_len must be >= 1");
  if (prefix_len < 0 || prefix_len > seq_len)
    fail("ConfigInvalid", "prefix_len out of [0, seq_len]");
  if (num_clusters < 1) fail("ConfigInvalid", "num_clusters must be >= 1");
  if (router.temperature <= 0.0) fail("ConfigInvalid", "router temperature must be positive");
  if (router.top_k < 1 || router.top_k > num_clusters)
    fail("ConfigInvalid", "top_k out of [1, num_clusters]");
  if (kmeans.max_iters < 1) fail("ConfigInvalid", "kmeans max_iters must be >= 1");
  if (kmeans.two_stage && kmeans.k_fine < num_clusters)
    fail("ConfigInvalid", "k_fine must be >= num_clusters");
  if (expert.order < 0) fail("ConfigInvalid", "expert order must be >= 0");
  if (expert.alpha < 0.0) fail("ConfigInvalid", "expert alpha must be >= 0");
  if (corpus.num_samples < num_clusters)
    fail("ConfigInvalid", "need at least one sample per cluster");
  if (corpus.num_heldout < 1) fail("ConfigInvalid", "num_heldout must be >= 1");
  if (corpus.topics < 1) fail("ConfigInvalid", "topics must be >= 1");
  if (corpus.feature_dim < corpus.topics)
    fail("ConfigInvalid", "feature_dim must be >= topics for separable blobs");
  if (corpus.noise < 0.0) fail("ConfigInvalid", "noise must be >= 0");
  if (corpus.text_only_frac < 0.0 || corpus.text_only_frac > 1.0)
    fail("ConfigInvalid", "text_only_frac out of [0, 1]");
}

Json ExperimentConfig::to_json() const {
  Json j;
  j["vocab_size"] = vocab_size;
  j["seq_len"] = seq_len;
  j["prefix_len"] = prefix_len;
  j["num_clusters"] = num_clusters;
  j["router"] = {{"temperature", router.temperature}, {"top_k", router.top_k}};
  j["kmeans"] = {{"max_iters", kmeans.max_iters},
                 {"k_fine", kmeans.k_fine},
                 {"two_stage", kmeans.two_stage}};
  j["expert"] = {{"order", expert.order}, {"alpha", expert.alpha}};
  j["corpus"] = {{"num_samples", corpus.num_samples},
                 {"num_heldout", corpus.num_heldout},
                 {"feature_dim", corpus.feature_dim},
                 {"topics", corpus.topics},
                 {"noise", corpus.noise},
                 {"text_only_frac", corpus.text_only_frac}};
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const Json& j) {
  ExperimentConfig c;
  c.vocab_size = require(j, "vocab_size").get<int>();
  c.seq_len = require(j, "seq_len").get<int>();
  c.prefix_len = require(j, "prefix_len").get<int>();
  c.num_clusters = require(j, "num_clusters").get<int>();
  const Json& r = require(j, "router");
  c.router.temperature = require(r, "temperature").get<double>();
  c.router.top_k = require(r, "top_k").get<int>();
  const Json& k = require(j, "kmeans");
  c.kmeans.max_iters = require(k, "max_iters").get<int>();
  c.kmeans.k_fine = require(k, "k_fine").get<int>();
  c.kmeans.two_stage = require(k, "two_stage").get<bool>();
  const Json& e = require(j, "expert");
  c.expert.order = require(e, "order").get<int>();
  c.expert.alpha = require(e, "alpha").get<double>();
  const Json& co = require(j, "corpus");
  c.corpus.num_samples = require(co, "num_samples").get<int>();
  c.corpus.num_heldout = require(co, "num_heldout").get<int>();
  c.corpus.feature_dim = require(co, "feature_dim").get<int>();
  c.corpus.topics = require(co, "topics").get<int>();
  c.corpus.noise = require(co, "noise").get<double>();
  c.corpus.text_only_frac = require(co, "text_only_frac").get<double>();
  c.seed = require(j, "seed").get<std::uint64_t>();
  c.out_dir = require(j, "out_dir").get<std::string>();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("IOError", "cannot open config " + path);
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail("ConfigInvalid", std::string("config is not valid JSON: ") + e.what());
  }
  return ExperimentConfig::from_json(j);
}

bool all_hard_checks_pass(const RunReport& report) {
  for (const auto& c : report.checks)
    if (c.hard && !c.pass) return false;
  return true;
}

Json report_to_json(const RunReport& report, bool include_timing) {
  Json j;
  j["kind"] = report.kind;
  j["seed"] = report.seed;
  j["config"] = report.config_echo;
  Json checks = Json::array();
  for (const auto& c : report.checks) {
    checks.push_back({{"name", c.name},
                      {"value", c.value},
                      {"threshold", c.threshold},
                      {"pass", c.pass},
                      {"hard", c.hard},
                      {"note", c.note}});
  }
  j["checks"] = checks;
  j["tables"] = report.tables;
  if (include_timing) {
    // Volatile fields live under one key so determinism checks can drop it.
    j["timestamp"] = {{"generated_at", report.generated_at},
                      {"wall_seconds", report.wall_seconds}};
  }
  return j;
}

RunReport report_from_json(const Json& j) {
  RunReport r;
  r.kind = require(j, "kind").get<std::string>();
  r.seed = require(j, "seed").get<std::uint64_t>();
  r.config_echo = require(j, "config");
  for (const auto& c : require(j, "checks")) {
    r.checks.push_back({c.at("name").get<std::string>(),
                        c.at("value").get<double>(),
                        c.at("threshold").get<double>(), c.at("pass").get<bool>(),
                        c.at("hard").get<bool>(), c.at("note").get<std::string>()});
  }
  r.tables = require(j, "tables");
  if (j.contains("timestamp")) {
    r.generated_at = j["timestamp"].at("generated_at").get<std::string>();
    r.wall_seconds = j["timestamp"].at("wall_seconds").get<double>();
  }
  return r;
}

void emit_report(const RunReport& report, const std::string& out_dir,
                 const std::string& format) {
  std::filesystem::create_directories(out_dir);
  bool json = format == "json" || format == "both";
  bool csv = format == "csv" || format == "both";
  if (!json && !csv) fail("ConfigInvalid", "format must be json, csv, or both");
  if (json) {
    std::ofstream out(out_dir + "/report.json");
    if (!out) fail("IOError", "cannot write report.json");
    out << report_to_json(report).dump(2) << '\n';
  }
  if (csv) {
    std::ofstream out(out_dir + "/checks.csv");
    if (!out) fail("IOError", "cannot write checks.csv");
    out << "name,value,threshold,pass,hard,note\n";
    for (const auto& c : report.checks)
      out << c.name << ',' << c.value << ',' << c.threshold << ','
          << (c.pass ? 1 : 0) << ',' << (c.hard ? 1 : 0) << ',' << c.note << '\n';
    // One CSV per array-of-objects table.
    for (const auto& [name, table] : report.tables.items()) {
      if (!table.is_array() || table.empty() || !table[0].is_object()) continue;
      std::ofstream tout(out_dir + "/" + name + ".csv");
      if (!tout) fail("IOError", "cannot write " + name + ".csv");
      bool first = true;
      for (const auto& [key, _] : table[0].items()) {
        tout << (first ? "" : ",") << key;
        first = false;
      }
      tout << '\n';
      for (const auto& row : table) {
        first = true;
        for (const auto& [_, value] : row.items()) {
          tout << (first ? "" : ",")
               << (value.is_string() ? value.get<std::string>() : value.dump());
          first = false;
        }
        tout << '\n';
      }
    }
  }
}

std::vector<double> chain_conditional(const TopicChain& chain,
                                      const TokenSeq& prefix, int vocab) {
  const Vec& row = prefix.empty() ? chain.initial
                                  : chain.trans[std::size_t(prefix.back())];
  std::vector<double> out(std::size_t(vocab), 0.0);
  for (int a = 0; a < vocab; ++a) out[std::size_t(a)] = row[std::size_t(a)];
  return out;
}

namespace {

// Concentrated random PMF over the mask-free tokens.
Vec random_pmf(int vocab, Token mask, Rng& rng) {
  Vec pmf(std::size_t(vocab), 0.0);
  double total = 0.0;
  for (int a = 0; a < vocab; ++a) {
    if (a == mask) continue;
    double u = rng.next_unit();
    pmf[std::size_t(a)] = u * u * u + 1e-3;  // skewed but full-support
    total += pmf[std::size_t(a)];
  }
  for (double& p : pmf) p /= total;
  return pmf;
}

// Orthonormal topic directions via Gram-Schmidt on Gaussian draws.
Matrix topic_means(int topics, int dim, Rng& rng) {
  Matrix means;
  for (int k = 0; k < topics; ++k) {
    Vec v(std::size_t(dim), 0.0);
    for (double& x : v) x = rng.next_gaussian();
    for (const auto& prev : means) {
      double proj = dot(v, prev);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= proj * prev[i];
    }
    means.push_back(normalized(v));
  }
  return means;
}

Sample draw_sample(const TopicChain& chain, int topic, int seq_len, int vocab,
                   double noise, double text_only_frac, Rng& rng) {
  Sample s;
  s.topic = topic;
  if (rng.next_unit() >= text_only_frac) {
    Vec f = chain.mean_dir;
    for (double& x : f) x += noise * rng.next_gaussian();
    s.features = normalized(f);
  }
  TokenSeq prefix;
  for (int i = 0; i < seq_len; ++i) {
    const Vec& row =
        prefix.empty() ? chain.initial : chain.trans[std::size_t(prefix.back())];
    double u = rng.next_unit();
    double acc = 0.0;
    Token tok = -1;
    for (int a = 0; a < vocab; ++a) {
      if (row[std::size_t(a)] <= 0.0) continue;
      tok = a;
      acc += row[std::size_t(a)];
      if (u < acc) break;
    }
    prefix.push_back(tok);
  }
  s.seq = std::move(prefix);
  return s;
}

}  // namespace

SynthCorpus synth_corpus(const ExperimentConfig& config) {
  config.validate();
  Vocab v = config.vocab();
  SynthCorpus out;
  out.train.vocab = config.vocab_size;
  out.heldout.vocab = config.vocab_size;

  Rng chain_rng(derive_seed(config.seed, 1));
  Rng mean_rng(derive_seed(config.seed, 2));
  Matrix means = topic_means(config.corpus.topics, config.corpus.feature_dim, mean_rng);
  for (int k = 0; k < config.corpus.topics; ++k) {
    TopicChain chain;
    chain.initial = random_pmf(v.size, v.mask_id, chain_rng);
    chain.trans.assign(std::size_t(v.size), Vec(std::size_t(v.size), 0.0));
    for (int a = 0; a < v.size; ++a) {
      if (a == v.mask_id) continue;
      chain.trans[std::size_t(a)] = random_pmf(v.size, v.mask_id, chain_rng);
    }
    chain.mean_dir = means[std::size_t(k)];
    out.chains.push_back(std::move(chain));
  }

  Rng train_rng(derive_seed(config.seed, 3));
  for (int i = 0; i < config.corpus.num_samples; ++i) {
    int topic = i % config.corpus.topics;
    out.train.samples.push_back(draw_sample(
        out.chains[std::size_t(topic)], topic, config.seq_len, v.size,
        config.corpus.noise, config.corpus.text_only_frac, train_rng));
  }
  Rng held_rng(derive_seed(config.seed, 4));
  for (int i = 0; i < config.corpus.num_heldout; ++i) {
    int topic = i % config.corpus.topics;
    out.heldout.samples.push_back(draw_sample(
        out.chains[std::size_t(topic)], topic, config.seq_len, v.size,
        config.corpus.noise, config.corpus.text_only_frac, held_rng));
  }
  return out;
}

namespace {

// Random target distribution over mask-free sequences, bounded support.
DistTable random_target(const Vocab& v, int seq_len, Rng& rng,
                        std::size_t max_support = 60) {
  std::vector<Token> alphabet;
  for (Token a = 0; a < v.size; ++a)
    if (a != v.mask_id) alphabet.push_back(a);
  std::vector<TokenSeq> states;
  TokenSeq cur(std::size_t(seq_len), alphabet[0]);
  std::vector<std::size_t> idx(std::size_t(seq_len), 0);
  std::int64_t total = 1;
  for (int i = 0; i < seq_len; ++i) total *= std::int64_t(alphabet.size());
  for (std::int64_t s = 0; s < total; ++s) {
    states.push_back(cur);
    for (int i = seq_len - 1; i >= 0; --i) {
      if (++idx[std::size_t(i)] < alphabet.size()) {
        cur[std::size_t(i)] = alphabet[idx[std::size_t(i)]];
        break;
      }
      idx[std::size_t(i)] = 0;
      cur[std::size_t(i)] = alphabet[0];
    }
  }
  // Fisher-Yates prefix shuffle, then keep max_support states.
  for (std::size_t i = 0; i < states.size() && i < max_support; ++i) {
    std::size_t j = i + std::size_t(rng.next_below(states.size() - i));
    std::swap(states[i], states[j]);
  }
  DistTable q;
  std::size_t keep = std::min(states.size(), max_support);
  for (std::size_t i = 0; i < keep; ++i) {
    double u = rng.next_unit();
    q.add(states[i], u * u + 1e-3);
  }
  q.normalize();
  return q;
}

ClusterPartition random_partition(std::size_t pairs, int clusters, Rng& rng) {
  ClusterPartition p;
  p.num_clusters = clusters;
  p.assignment.resize(pairs);
  for (std::size_t i = 0; i < pairs; ++i)
    p.assignment[i] = int(i) < clusters ? int(i)
                                        : int(rng.next_below(std::uint64_t(clusters)));
  return p;
}

struct SuiteContext {
  Vocab vocab;
  int prefix_len = 0;
  Coupling coupling;
  ConditionalPath path;
  ConditionalVelocity cond_u;
  int horizon = 0;
  int seq_len = 0;
};

SuiteContext make_ar_context(const DistTable& q, int prefix_len, const Vocab& v) {
  SuiteContext ctx;
  ctx.vocab = v;
  ctx.prefix_len = prefix_len;
  ctx.coupling = build_mask_coupling(q, prefix_len, v);
  ctx.path = ar_path(prefix_len, v);
  ctx.cond_u = [prefix_len, v](const Timestep& t, const TokenSeq& z,
                               const Coupling::Pair& pair) {
    return ar_conditional_velocity(pair, prefix_len, t.t, z, v);
  };
  ctx.seq_len = int(q.mass.begin()->first.size());
  ctx.horizon = ctx.seq_len - prefix_len;
  return ctx;
}

// Max L-inf gap between the router-combined expert flows and the
// centralized marginal velocity, over all timesteps and positive-mass
// states. Optionally also measures the equal-prior (Eq-27-style) form and
// a top-k truncated router.
struct DecentralGaps {
  double exact = 0.0;
  double equal_prior = 0.0;
  double topk = 0.0;
};

DecentralGaps decentral_gaps(const SuiteContext& ctx,
                             const ClusterPartition& partition, int top_k) {
  DecentralGaps gaps;
  int k = partition.num_clusters;
  std::vector<double> priors(std::size_t(k), 0.0);
  for (int c = 0; c < k; ++c)
    priors[std::size_t(c)] = cluster_prior(partition, ctx.coupling, c);
  for (int t = 0; t < ctx.horizon; ++t) {
    Timestep ts{t, ctx.horizon};
    DistTable p_t = marginal_path_eval(ctx.path, ctx.coupling, ts);
    for (const auto& [z, mass] : p_t.mass) {
      if (mass < kZeroMass) continue;
      VelocitySlice central =
          marginal_velocity(ctx.path, ctx.coupling, ctx.cond_u, ts, z);
      std::vector<VelocitySlice> flows;
      std::vector<double> likelihoods;
      double state_mass = 0.0;
      for (int c = 0; c < k; ++c) {
        double lik =
            cluster_state_likelihood(partition, ctx.path, ctx.coupling, c, ts, z);
        likelihoods.push_back(lik);
        state_mass += priors[std::size_t(c)] * lik;
        flows.push_back(lik < kZeroMass
                            ? VelocitySlice::zeros(ctx.seq_len, ctx.vocab.size)
                            : expert_flow(partition, c, ctx.path, ctx.coupling,
                                          ctx.cond_u, ts, z));
      }
      RouterWeights posterior =
          exact_posterior(partition, ctx.path, ctx.coupling, ts, z);
      gaps.exact = std::max(
          gaps.exact, slice_linf(combine_velocity(flows, posterior), central));
      gaps.equal_prior = std::max(
          gaps.equal_prior,
          slice_linf(combine_velocity_equal_prior(flows, likelihoods, state_mass),
                     central));
      if (top_k < k) {
        RouterWeights truncated = topk_filter(posterior, top_k);
        gaps.topk = std::max(
            gaps.topk, slice_linf(combine_velocity(flows, truncated), central));
      }
    }
  }
  return gaps;
}

void add_check(RunReport& report, const std::string& name, double value,
               double threshold, bool pass, bool hard = true,
               const std::string& note = "") {
  report.checks.push_back({name, value, threshold, pass, hard, note});
}

void add_leq_check(RunReport& report, const std::string& name, double value,
                   double threshold, const std::string& note = "") {
  add_check(report, name, value, threshold, value <= threshold, true, note);
}

}  // namespace

RunReport run_equivalence_suite(const ExperimentConfig& config) {
  config.validate();
  state_space_size(config.vocab_size, config.seq_len);
  auto start = std::chrono::steady_clock::now();

  RunReport report;
  report.kind = "verify";
  report.seed = config.seed;
  report.config_echo = config.to_json();
  Vocab v = config.vocab();

  // AR continuity, generation, and sparsity on a random target.
  Rng rng(derive_seed(config.seed, 100));
  DistTable q = random_target(v, config.seq_len, rng);
  ARVerifyReport ar = verify_ar_generation(q, config.prefix_len, v);
  add_leq_check(report, "ar_ce_residual", ar.max_ce_residual, kTightTol);
  add_leq_check(report, "ar_pushforward_gap", ar.max_pushforward_gap, kTightTol);
  add_leq_check(report, "ar_target_gap", ar.final_target_gap, kTightTol);
  bool sparsity_ok = true;
  for (std::size_t t = 0; t < ar.sparsity_position.size(); ++t)
    if (ar.sparsity_position[t] != config.prefix_len + int(t) + 1)
      sparsity_ok = false;
  add_check(report, "ar_sparsity_position", sparsity_ok ? 1.0 : 0.0, 1.0,
            sparsity_ok, true, "active position must be P+t+1");

  // A deliberately two-position-active velocity must be rejected.
  bool rejected = false;
  {
    VelocityField bad = [&v, &config](const Timestep&, const TokenSeq& z) {
      VelocitySlice s = VelocitySlice::zeros(config.seq_len, v.size);
      for (int pos = 0; pos < std::min(2, config.seq_len); ++pos) {
        Token other = z[std::size_t(pos)] == 0 ? 1 : 0;
        s.ref(pos, other) = 0.5;
        s.ref(pos, z[std::size_t(pos)]) = -0.5;
      }
      return s;
    };
    std::vector<TokenSeq> probe{TokenSeq(std::size_t(config.seq_len), 0)};
    try {
      check_one_sparse(bad, Timestep{0, 1}, probe);
    } catch (const Error& e) {
      rejected = e.code() == "NotOneSparse";
    }
  }
  add_check(report, "one_sparse_rejects_two_positions", rejected ? 1.0 : 0.0,
            1.0, rejected || config.seq_len < 2);

  // Decentralization identity on a random partition of the coupling.
  SuiteContext ctx = make_ar_context(q, config.prefix_len, v);
  int clusters = std::min<int>(config.num_clusters, int(ctx.coupling.pairs.size()));
  Rng part_rng(derive_seed(config.seed, 101));
  ClusterPartition partition =
      random_partition(ctx.coupling.pairs.size(), clusters, part_rng);
  DecentralGaps gaps = decentral_gaps(ctx, partition, config.router.top_k);
  add_leq_check(report, "decentral_identity_gap", gaps.exact, kTightTol);
  if (config.router.top_k < clusters) {
    add_check(report, "topk_truncation_gap", gaps.topk, 0.0, true, false,
              "top-k routing is an approximation; nonzero gap expected");
  }

  // Equal-prior simplification: exact match under equal cluster masses,
  // and a regression guard that unequal masses produce a visible gap.
  {
    int k = std::max(config.num_clusters, 2);
    int per_cluster = 2;
    Rng eq_rng(derive_seed(config.seed, 102));
    DistTable base = random_target(v, config.seq_len, eq_rng,
                                   std::size_t(k) * std::size_t(per_cluster));
    std::vector<TokenSeq> support;
    for (const auto& [x, _] : base.mass) support.push_back(x);
    int pairs = int(support.size());
    k = std::min(k, pairs);

    ClusterPartition even;
    even.num_clusters = k;
    for (int i = 0; i < pairs; ++i) even.assignment.push_back(i % k);

    DistTable q_even;
    for (const auto& x : support) q_even.add(x, 1.0 / double(pairs));
    SuiteContext even_ctx = make_ar_context(q_even, config.prefix_len, v);
    DecentralGaps even_gaps = decentral_gaps(even_ctx, even, k);
    add_leq_check(report, "equal_prior_simplification_gap", even_gaps.equal_prior,
                  kTightTol);

    DistTable q_skew;
    for (int i = 0; i < pairs; ++i)
      q_skew.add(support[std::size_t(i)], double(i + 1));
    q_skew.normalize();
    SuiteContext skew_ctx = make_ar_context(q_skew, config.prefix_len, v);
    DecentralGaps skew_gaps = decentral_gaps(skew_ctx, even, k);
    add_check(report, "equal_prior_unequal_mass_gap", skew_gaps.equal_prior,
              kInputTol, skew_gaps.equal_prior > kInputTol, true,
              "simplified form must visibly diverge under unequal priors");
    add_leq_check(report, "decentral_identity_gap_unequal", skew_gaps.exact,
                  kTightTol);
  }

  // Exact-ensemble = dense for tabular experts with alpha = 0 and
  // context-share weights.
  {
    double worst = 0.0;
    Rng corpus_rng(derive_seed(config.seed, 103));
    for (int rep = 0; rep < 5; ++rep) {
      ExperimentConfig small = config;
      small.corpus.num_samples = 60;
      small.corpus.text_only_frac = 0.0;
      small.seed = corpus_rng.next_u64();
      SynthCorpus sc = synth_corpus(small);
      int k = config.num_clusters;
      std::vector<std::vector<Sample>> shards{std::size_t(k)};
      for (std::size_t i = 0; i < sc.train.samples.size(); ++i)
        shards[i % std::size_t(k)].push_back(sc.train.samples[i]);
      std::vector<ExpertModel> experts;
      for (const auto& shard : shards)
        experts.push_back(train_expert(shard, config.expert.order, 0.0, v.size));
      ExpertModel dense = train_dense(sc.train, config.expert.order, 0.0);
      for (const auto& [context, _] : dense.counts) {
        RouterWeights shares;
        double total = 0.0;
        for (const auto& expert : experts) {
          double c = double(expert.context_total(context));
          shares.weights.push_back(c);
          total += c;
        }
        for (double& w : shares.weights) w /= total;
        std::vector<double> mixed = ensemble_next_token(experts, shares, context);
        std::vector<double> ref = next_token(dense, context);
        for (std::size_t a = 0; a < mixed.size(); ++a)
          worst = std::max(worst, std::abs(mixed[a] - ref[a]));
      }
    }
    add_leq_check(report, "exact_ensemble_dense_gap", worst, kTightTol);
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  report.generated_at = iso_now();
  return report;
}

RunReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  auto start = std::chrono::steady_clock::now();

  RunReport report;
  report.kind = "experiment";
  report.seed = config.seed;
  report.config_echo = config.to_json();
  Vocab v = config.vocab();
  int k = config.num_clusters;

  SynthCorpus sc = synth_corpus(config);

  // Partition: featureful samples by spherical balanced k-means, text-only
  // samples by seeded uniform assignment.
  Matrix raw;
  std::vector<std::string> ids;
  std::vector<std::size_t> featureful;
  for (std::size_t i = 0; i < sc.train.samples.size(); ++i) {
    if (!sc.train.samples[i].has_features()) continue;
    raw.push_back(sc.train.samples[i].features);
    ids.push_back(std::to_string(i));
    featureful.push_back(i);
  }
  if (int(featureful.size()) < k)
    fail("ConfigInvalid", "too few featureful samples to form clusters");
  FeatureSet fs = normalize_features(raw, ids);
  ClusterModel cm =
      config.kmeans.two_stage
          ? two_stage_balanced_kmeans(fs, k, config.kmeans.k_fine,
                                      config.kmeans.max_iters,
                                      derive_seed(config.seed, 10))
          : balanced_kmeans(fs, k, config.kmeans.max_iters,
                            derive_seed(config.seed, 10));

  std::vector<int> cluster_of(sc.train.samples.size(), -1);
  for (std::size_t r = 0; r < featureful.size(); ++r)
    cluster_of[featureful[r]] = cm.assignment[r];
  Rng text_rng(derive_seed(config.seed, 11));
  for (std::size_t i = 0; i < cluster_of.size(); ++i)
    if (cluster_of[i] == -1)
      cluster_of[i] = int(text_rng.next_below(std::uint64_t(k)));

  std::vector<std::vector<Sample>> shards{std::size_t(k)};
  for (std::size_t i = 0; i < sc.train.samples.size(); ++i)
    shards[std::size_t(cluster_of[i])].push_back(sc.train.samples[i]);

  std::vector<ExpertModel> experts;
  for (const auto& shard : shards)
    experts.push_back(
        train_expert(shard, config.expert.order, config.expert.alpha, v.size));
  ExpertModel dense =
      train_dense(sc.train, config.expert.order, config.expert.alpha);

  // Router weights per held-out sample, fixed up front.
  RouterConfig rc{config.router.temperature, config.router.top_k, cm.centroids};
  Rng infer_rng(derive_seed(config.seed, 12));
  std::vector<RouterWeights> routed(sc.heldout.samples.size());
  for (std::size_t i = 0; i < sc.heldout.samples.size(); ++i) {
    const Sample& s = sc.heldout.samples[i];
    if (s.has_features()) {
      routed[i] = topk_filter(softmax_route(s.features, rc), config.router.top_k);
    } else {
      routed[i].weights.assign(std::size_t(k), 0.0);
      routed[i].weights[std::size_t(infer_rng.next_below(std::uint64_t(k)))] = 1.0;
    }
  }

  const Sample* base = sc.heldout.samples.data();
  Predictor dense_pred = [&dense](const Sample&, const TokenSeq& prefix) {
    return next_token(dense, prefix);
  };
  Predictor ensemble_pred = [&experts, &routed, base](const Sample& s,
                                                      const TokenSeq& prefix) {
    std::size_t idx = std::size_t(&s - base);
    return ensemble_next_token(experts, routed[idx], prefix);
  };
  TrueConditional truth = [&sc, &v](const Sample& s, const TokenSeq& prefix) {
    return chain_conditional(sc.chains[std::size_t(s.topic)], prefix, v.size);
  };

  EvalMetrics dense_metrics = evaluate(dense_pred, sc.heldout, &truth);
  EvalMetrics ensemble_metrics = evaluate(ensemble_pred, sc.heldout, &truth);

  // Hard check: ensemble outputs are PMFs.
  double worst_norm = 0.0;
  for (std::size_t i = 0; i < std::min<std::size_t>(50, sc.heldout.samples.size()); ++i) {
    TokenSeq prefix;
    for (Token tok : sc.heldout.samples[i].seq) {
      std::vector<double> pmf = ensemble_next_token(experts, routed[i], prefix);
      double sum = 0.0;
      for (double p : pmf) sum += p;
      worst_norm = std::max(worst_norm, std::abs(sum - 1.0));
      prefix.push_back(tok);
    }
  }
  add_leq_check(report, "ensemble_pmf_normalization", worst_norm, kTightTol);

  // Cluster statistics and topic purity.
  Json clusters = Json::array();
  std::vector<int> items(std::size_t(k), 0), text_only(std::size_t(k), 0);
  std::vector<std::int64_t> tokens(std::size_t(k), 0);
  for (std::size_t i = 0; i < sc.train.samples.size(); ++i) {
    int c = cluster_of[i];
    ++items[std::size_t(c)];
    if (!sc.train.samples[i].has_features()) ++text_only[std::size_t(c)];
    tokens[std::size_t(c)] += std::int64_t(sc.train.samples[i].seq.size());
  }
  for (int c = 0; c < k; ++c)
    clusters.push_back({{"cluster", c},
                        {"items", items[std::size_t(c)]},
                        {"text_only", text_only[std::size_t(c)]},
                        {"tokens", tokens[std::size_t(c)]}});
  report.tables["clusters"] = clusters;

  // Purity: fraction of featureful items whose cluster's majority topic
  // matches their own.
  std::vector<std::vector<int>> topic_counts(std::size_t(k),
                                             std::vector<int>(std::size_t(config.corpus.topics), 0));
  for (std::size_t r = 0; r < featureful.size(); ++r)
    ++topic_counts[std::size_t(cm.assignment[r])]
                  [std::size_t(sc.train.samples[featureful[r]].topic)];
  int agree = 0;
  for (std::size_t r = 0; r < featureful.size(); ++r) {
    const auto& counts = topic_counts[std::size_t(cm.assignment[r])];
    int majority =
        int(std::max_element(counts.begin(), counts.end()) - counts.begin());
    if (majority == sc.train.samples[featureful[r]].topic) ++agree;
  }
  double purity =
      featureful.empty() ? 0.0 : double(agree) / double(featureful.size());

  Json metrics = Json::array();
  metrics.push_back({{"model", "dense"},
                     {"log_loss", dense_metrics.log_loss},
                     {"tv_to_truth", dense_metrics.tv_to_truth.value_or(-1.0)}});
  metrics.push_back({{"model", "ensemble"},
                     {"log_loss", ensemble_metrics.log_loss},
                     {"tv_to_truth", ensemble_metrics.tv_to_truth.value_or(-1.0)}});
  report.tables["metrics"] = metrics;
  report.tables["summary"] = {
      {"log_loss_gap", ensemble_metrics.log_loss - dense_metrics.log_loss},
      {"cluster_purity", purity},
      {"heldout_tokens", dense_metrics.tokens}};

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  report.generated_at = iso_now();
  return report;
}

}  // namespace dfm
