// Command-line front end: equivalence verification, feature clustering,
// expert training, routed inference, and the full experiment pipeline.
//
// Exit codes: 0 = all hard checks pass, 1 = check failure, 2 = config/IO
// error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "dfm/harness.hpp"

namespace {

using dfm::ExperimentConfig;

ExperimentConfig load_with_overrides(const std::string& config_path,
                                     const std::optional<std::uint64_t>& seed,
                                     const std::string& out_dir) {
  ExperimentConfig config = dfm::load_config(config_path);
  if (seed) config.seed = *seed;
  if (!out_dir.empty()) config.out_dir = out_dir;
  return config;
}

int finish_run(const dfm::RunReport& report, const ExperimentConfig& config,
               const std::string& format) {
  dfm::emit_report(report, config.out_dir, format);
  for (const auto& c : report.checks)
    std::printf("%s %s value=%.3g threshold=%.3g%s\n",
                c.pass ? "PASS" : "FAIL", c.name.c_str(), c.value, c.threshold,
                c.hard ? "" : " (informational)");
  std::printf("report written to %s\n", config.out_dir.c_str());
  return dfm::all_hard_checks_pass(report) ? 0 : 1;
}

dfm::TokenSeq parse_tokens(const std::string& text) {
  dfm::TokenSeq out;
  std::istringstream in(text);
  int tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::vector<double> parse_vector(const std::string& text) {
  std::vector<double> out;
  std::istringstream in(text);
  double v;
  while (in >> v) out.push_back(v);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discrete flow matching: decentralized expert flows at desk scale"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string format = "json";
  auto add_common = [&](CLI::App* sub, bool need_config = true) {
    auto* opt = sub->add_option("--config", config_path, "experiment config JSON");
    if (need_config) opt->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out_dir, "override the config output directory");
    sub->add_option("--format", format, "report format: json|csv|both");
  };

  auto* verify = app.add_subcommand("verify", "run the equivalence suite");
  add_common(verify);

  auto* experiment = app.add_subcommand("experiment", "full synthetic pipeline");
  add_common(experiment);

  auto* cluster = app.add_subcommand("cluster", "cluster feature vectors");
  add_common(cluster);
  std::string features_path, ids_path;
  cluster->add_option("--features", features_path, "feature matrix file")->required();
  cluster->add_option("--ids", ids_path, "item id sidecar, one per line");

  auto* train = app.add_subcommand("train", "train experts from shards");
  add_common(train);
  std::string corpus_path, assign_path;
  train->add_option("--corpus", corpus_path, "sequence corpus file")->required();
  train->add_option("--assign", assign_path, "item_id,cluster_id CSV")->required();

  auto* infer = app.add_subcommand("infer", "routed next-token distribution");
  add_common(infer);
  std::string models_dir, centroids_path, prefix_text, features_text;
  infer->add_option("--models", models_dir, "directory with expert_<k>.model")->required();
  infer->add_option("--centroids", centroids_path, "centroid matrix file")->required();
  infer->add_option("--prefix", prefix_text, "prefix token ids, space separated")->required();
  infer->add_option("--features", features_text, "feature vector, space separated");

  auto* report_cmd = app.add_subcommand("report", "re-render a JSON report");
  std::string report_path;
  report_cmd->add_option("--in", report_path, "existing report.json")->required();
  report_cmd->add_option("--out", out_dir, "output directory")->required();
  report_cmd->add_option("--format", format, "report format: json|csv|both");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*verify) {
      ExperimentConfig config = load_with_overrides(config_path, seed, out_dir);
      return finish_run(dfm::run_equivalence_suite(config), config, format);
    }
    if (*experiment) {
      ExperimentConfig config = load_with_overrides(config_path, seed, out_dir);
      return finish_run(dfm::run_experiment(config), config, format);
    }
    if (*cluster) {
      ExperimentConfig config = load_with_overrides(config_path, seed, out_dir);
      dfm::Matrix raw = dfm::load_matrix(features_path);
      std::vector<std::string> ids;
      if (!ids_path.empty()) ids = dfm::load_ids(ids_path);
      dfm::FeatureSet fs = dfm::normalize_features(raw, ids);
      dfm::ClusterModel cm =
          config.kmeans.two_stage
              ? dfm::two_stage_balanced_kmeans(fs, config.num_clusters,
                                               config.kmeans.k_fine,
                                               config.kmeans.max_iters, config.seed)
              : dfm::balanced_kmeans(fs, config.num_clusters,
                                     config.kmeans.max_iters, config.seed);
      std::filesystem::create_directories(config.out_dir);
      dfm::save_assignments_csv(fs, cm.assignment, config.out_dir + "/assignments.csv");
      dfm::save_matrix(cm.centroids, config.out_dir + "/centroids.mat");
      std::printf("clustered %zu items into %d groups; sizes:", fs.vectors.size(),
                  config.num_clusters);
      for (int s : cm.sizes) std::printf(" %d", s);
      std::printf("\n");
      return 0;
    }
    if (*train) {
      ExperimentConfig config = load_with_overrides(config_path, seed, out_dir);
      dfm::Corpus corpus = dfm::load_corpus_file(corpus_path);
      auto assignments = dfm::load_assignments_csv(assign_path);
      std::vector<std::vector<dfm::Sample>> shards(std::size_t(config.num_clusters));
      for (const auto& [id, c] : assignments) {
        std::size_t row = std::size_t(std::stoul(id));
        if (row >= corpus.samples.size())
          dfm::fail("ConfigInvalid", "assignment id out of corpus range: " + id);
        if (c < 0 || c >= config.num_clusters)
          dfm::fail("ConfigInvalid", "cluster id out of range in assignments");
        shards[std::size_t(c)].push_back(corpus.samples[row]);
      }
      std::filesystem::create_directories(config.out_dir);
      for (int c = 0; c < config.num_clusters; ++c) {
        dfm::ExpertModel expert =
            dfm::train_expert(shards[std::size_t(c)], config.expert.order,
                              config.expert.alpha, corpus.vocab);
        dfm::save_model_file(expert, config.out_dir + "/expert_" +
                                         std::to_string(c) + ".model");
      }
      dfm::save_model_file(
          dfm::train_dense(corpus, config.expert.order, config.expert.alpha),
          config.out_dir + "/dense.model");
      std::printf("trained %d experts + dense into %s\n", config.num_clusters,
                  config.out_dir.c_str());
      return 0;
    }
    if (*infer) {
      ExperimentConfig config = load_with_overrides(config_path, seed, out_dir);
      std::vector<dfm::ExpertModel> experts;
      for (int c = 0; c < config.num_clusters; ++c)
        experts.push_back(dfm::load_model_file(models_dir + "/expert_" +
                                               std::to_string(c) + ".model"));
      dfm::RouterConfig rc{config.router.temperature, config.router.top_k,
                           dfm::load_matrix(centroids_path)};
      dfm::TokenSeq prefix = parse_tokens(prefix_text);
      dfm::RouterWeights weights;
      if (!features_text.empty()) {
        weights = dfm::topk_filter(
            dfm::softmax_route(parse_vector(features_text), rc), config.router.top_k);
      } else {
        // Text-only samples route uniformly at random, seeded.
        dfm::Rng rng(dfm::derive_seed(config.seed, 12));
        weights.weights.assign(std::size_t(config.num_clusters), 0.0);
        weights.weights[std::size_t(
            rng.next_below(std::uint64_t(config.num_clusters)))] = 1.0;
      }
      std::vector<double> pmf = dfm::ensemble_next_token(experts, weights, prefix);
      dfm::Json out;
      out["weights"] = weights.weights;
      out["next_token"] = pmf;
      std::cout << out.dump(2) << '\n';
      return 0;
    }
    if (*report_cmd) {
      std::ifstream in(report_path);
      if (!in) dfm::fail("IOError", "cannot open " + report_path);
      dfm::Json j;
      in >> j;
      dfm::RunReport report = dfm::report_from_json(j);
      dfm::emit_report(report, out_dir, format);
      return dfm::all_hard_checks_pass(report) ? 0 : 1;
    }
  } catch (const dfm::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
