// popdecomp command-line driver.
//
// Exit codes: 0 success, 2 configuration error, 3 data or format error,
// 1 anything else (including training divergence).

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "popdecomp/pipeline.hpp"

namespace fs = std::filesystem;
using namespace popdecomp;
using namespace popdecomp::pipeline;

namespace {

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string data;
  std::string source;
  std::string variant;
};

// File first, then --set, then the dedicated flags.
PipelineConfig load_config(const Globals& g) {
  PipelineConfig c;
  if (!g.config_path.empty()) apply_options(c, read_config_file(g.config_path));
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_option(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!g.variant.empty()) c.variant = parse_variant(g.variant);
  if (g.seed) c.seeds = {*g.seed};
  c.validate();
  return c;
}

std::uint64_t first_seed(const PipelineConfig& c) { return c.seeds.front(); }

// Reads a corpus directory, or generates one from the config when none is given.
PreparedData load_data(const std::string& dir, const PipelineConfig& c, bool source_platform = false) {
  if (!dir.empty()) return prepare(synthgen::read_corpus(dir), c.split);
  const auto gen = source_platform ? synthgen::source_platform(c.gen) : c.gen;
  auto g = synthgen::generate_corpus(gen);
  return prepare({std::move(g.posts), std::move(g.embeddings)}, c.split);
}

std::optional<PreparedData> load_source(const Globals& g, const PipelineConfig& c) {
  if (c.variant != Variant::TransferFrozenContent) return std::nullopt;
  return load_data(g.source, c, true);
}

void write_config(const fs::path& out, const PipelineConfig& c) {
  fs::create_directories(out);
  write_text(out / "config.txt", dump_config(c));
}

int cmd_gen(const Globals& g, bool source) {
  auto c = load_config(g);
  if (g.seed) c.gen.seed = *g.seed;
  const auto gen = source ? synthgen::source_platform(c.gen) : c.gen;
  const auto corpus = synthgen::generate_corpus(gen);
  synthgen::write_corpus(g.out, corpus);
  write_config(g.out, c);
  std::cout << "wrote " << corpus.posts.size() << " posts to " << g.out << "\n";
  return 0;
}

int cmd_train_content(const Globals& g) {
  const auto c = load_config(g);
  const auto d = load_data(g.data, c);
  const auto stage = train_content_stage(d, modality_mask(c.variant), c, first_seed(c));
  fs::create_directories(g.out);
  content::write_checkpoint((fs::path(g.out) / "content.ckpt").string(),
                            {stage.result.params, stage.train, stage.scaler});
  write_with(fs::path(g.out) / "content_loss.csv",
             [&](std::ostream& os) { content::write_loss_trace_csv(os, stage.result.trace); });
  write_config(g.out, c);
  std::cout << "content model trained for " << stage.result.trace.size() << " trace rows, checkpoint in " << g.out
            << "\n";
  return 0;
}

ContentScores scores_for(const PreparedData& d, const PipelineConfig& c, const std::string& checkpoint) {
  if (c.variant == Variant::NoContent) return raw_content_scores(d);
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required unless the variant is no_content");
  const auto ck = content::read_checkpoint(checkpoint);
  return score_content(ck.params, d, modality_mask(c.variant));
}

int cmd_train_context(const Globals& g, const std::string& checkpoint) {
  const auto c = load_config(g);
  if (c.variant == Variant::NoContext) throw ConfigError("no_context has no context model to train");
  const auto d = load_data(g.data, c);
  const auto s = scores_for(d, c, checkpoint);
  const auto e = exposure_stage(d, s, c, c.variant != Variant::NoContextFeatures, c.variant != Variant::NoRetrieval);
  const fs::path out = g.out;
  fs::create_directories(out);
  exposure::write_model((out / "exposure.otgb").string(), e.model);
  write_with(out / "exposure_trace.csv", [&](std::ostream& os) { write_exposure_trace_csv(os, e.trace); });
  write_with(out / "importance.csv", [&](std::ostream& os) { exposure::write_importance_csv(os, e.model); });
  std::vector<std::int64_t> ids;
  for (const auto& p : d.posts()) ids.push_back(p.post_id);
  write_with(out / "features.csv", [&](std::ostream& os) { features::write_feature_csv(os, e.features.x, ids); });
  write_with(out / "neighbors.csv", [&](std::ostream& os) { retrieval::write_query_csv(os, d.posts(), e.features.neighbors); });
  write_config(out, c);
  std::cout << "exposure model: " << e.model.trees.size() << " trees, best iteration " << e.model.best_iteration
            << "\n";
  return 0;
}

// The context state is a deterministic function of the train split, so it
// is refit here rather than stored.
int cmd_predict(const Globals& g, const std::string& checkpoint, const std::string& model_path) {
  const auto c = load_config(g);
  const auto d = load_data(g.data, c);
  const auto s = scores_for(d, c, checkpoint);
  RunOutput run;
  run.alpha = s.alpha;
  std::vector<double> r(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) r[i] = d.y_tilde[i] - s.alpha[i];
  const double mean_r = mean_of(gather(r, d.split.train));
  if (c.variant == Variant::NoContext) {
    run.phi.assign(d.size(), mean_r);
  } else {
    if (model_path.empty()) throw ConfigError("--model is required unless the variant is no_context");
    const auto m = exposure::read_model(model_path);
    const auto st = fit_context_state(d, s, c, c.variant != Variant::NoContextFeatures, c.variant != Variant::NoRetrieval);
    run.phi = exposure::apply_calibration(m.calibration, exposure::predict_phi(m, transform_context(d, s, st).x));
  }
  run.content_only.resize(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) run.content_only[i] = run.alpha[i] + mean_r;
  fs::create_directories(g.out);
  write_with(fs::path(g.out) / "predictions.csv", [&](std::ostream& os) { write_predictions_csv(os, d, run); });
  std::cout << "wrote predictions for " << d.size() << " posts\n";
  return 0;
}

int cmd_eval(const Globals& g) {
  const auto c = load_config(g);
  const auto d = load_data(g.data, c);
  const auto src = load_source(g, c);
  std::vector<RunOutput> runs;
  const auto summary = run_seeds(d, src ? &*src : nullptr, c, &runs);
  const fs::path out = g.out;
  for (const auto& run : runs) write_run_artifacts(out / ("seed_" + std::to_string(run.seed)), d, run);
  write_text(out / "summary.json", canonical_json(summary));
  write_config(out, c);
  const auto& t = summary["summary"]["test.src"];
  std::printf("%s test SRC %.4f +- %.4f over %zu seeds\n", variant_name(c.variant), t["mean"].get<double>(),
              t["std"].get<double>(), runs.size());
  return 0;
}

int cmd_ablate(const Globals& g, bool with_transfer) {
  auto c = load_config(g);
  const auto d = load_data(g.data, c);
  std::optional<PreparedData> src;
  if (with_transfer) src = load_data(g.source, c, true);
  std::vector<Variant> variants{Variant::Full, Variant::NoContext, Variant::NoContent, Variant::NoRetrieval,
                                Variant::NoContextFeatures, Variant::ContentImageOnly, Variant::ContentTextOnly};
  if (with_transfer) variants.push_back(Variant::TransferFrozenContent);
  json all = json::object();
  fs::create_directories(g.out);
  for (Variant v : variants) {
    c.variant = v;
    const auto res = run_seeds(d, src ? &*src : nullptr, c);
    const auto& t = res["summary"]["test.src"];
    std::printf("%-24s test SRC %.4f +- %.4f\n", variant_name(v), t["mean"].get<double>(), t["std"].get<double>());
    std::fflush(stdout);
    all[variant_name(v)] = res;
  }
  write_text(fs::path(g.out) / "ablation.json", canonical_json(all));
  return 0;
}

int cmd_diag(const Globals& g, const std::string& truth_dir, int bins) {
  const auto c = load_config(g);
  const auto d = load_data(g.data, c);
  const auto src = load_source(g, c);
  const auto run = run_experiment(d, src ? &*src : nullptr, c, first_seed(c));
  const fs::path out = g.out;
  write_run_artifacts(out, d, run);
  const auto& te = d.split.test;
  const auto rr = rank_rank_diag(gather(run.alpha, te), gather(run.phi, te));
  write_with(out / "rank_rank.csv", [&](std::ostream& os) { write_rank_rank_csv(os, rr); });
  const auto dist = distribution_diag(gather(d.y_tilde, te), gather(run.content_only, te), gather(run.y_tilde_hat, te), bins);
  write_with(out / "distribution.csv", [&](std::ostream& os) { write_distribution_csv(os, dist); });
  if (run.exposure)
    write_with(out / "neighbors.csv", [&](std::ostream& os) { retrieval::write_query_csv(os, d.posts(), run.exposure->features.neighbors); });
  json diag;
  diag["test_alpha_phi_spearman"] = rr.spearman;
  diag["test_rank_grid_max_deviation"] = rr.max_deviation();
  diag["test_w1_content_only"] = dist.w1_content;
  diag["test_w1_full"] = dist.w1_full;

  // Recovery against the generator's latent factors, when available.
  std::optional<synthgen::GroundTruth> truth;
  if (!truth_dir.empty()) {
    truth = synthgen::read_truth((fs::path(truth_dir) / "truth.jsonl").string());
  } else if (g.data.empty()) {
    truth = synthgen::generate_corpus(c.gen).truth;
  }
  if (truth) {
    if (truth->alpha_star.size() != d.size()) throw DataError("truth sidecar does not match the corpus size");
    diag["test_spearman_alpha_truth"] = spearman(gather(run.alpha, te), gather(truth->alpha_star, te)).value;
    diag["test_spearman_phi_truth"] = spearman(gather(run.phi, te), gather(truth->phi_star, te)).value;
  }
  write_text(out / "diagnostics.json", canonical_json(diag));
  std::cout << canonical_json(diag);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Content/exposure popularity decomposition"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "flat key=value configuration file");
  app.add_option("--set", g.overrides, "override one configuration key (key=value), repeatable");
  app.add_option("--seed", g.seed, "seed (replaces the configured seed list; generator seed for gen)");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--variant", g.variant, "experiment variant");
  app.fallthrough();

  bool source_platform = false;
  auto* gen = app.add_subcommand("gen", "generate a synthetic corpus");
  gen->add_flag("--source-platform", source_platform, "generate the transfer source platform instead");

  std::string checkpoint, model, truth_dir;
  bool with_transfer = false;
  int bins = 20;
  auto data_opt = [&](CLI::App* s) { s->add_option("--data", g.data, "corpus directory (default: generate from config)"); };
  auto* tc = app.add_subcommand("train-content", "train the content model");
  data_opt(tc);
  auto* tx = app.add_subcommand("train-context", "fit context features, retrieval and the exposure model");
  data_opt(tx);
  tx->add_option("--checkpoint", checkpoint, "content checkpoint");
  auto* pr = app.add_subcommand("predict", "predict with saved models");
  data_opt(pr);
  pr->add_option("--checkpoint", checkpoint, "content checkpoint");
  pr->add_option("--model", model, "exposure model file");
  auto* ev = app.add_subcommand("eval", "train and evaluate one variant over the seed list");
  data_opt(ev);
  ev->add_option("--source", g.source, "source corpus for the transfer variant");
  auto* ab = app.add_subcommand("ablate", "evaluate every variant over the seed list");
  data_opt(ab);
  ab->add_flag("--transfer", with_transfer, "include the frozen-content transfer variant");
  ab->add_option("--source", g.source, "source corpus for the transfer variant");
  auto* dg = app.add_subcommand("diag", "write rank-rank, distribution and recovery diagnostics");
  data_opt(dg);
  dg->add_option("--source", g.source, "source corpus for the transfer variant");
  dg->add_option("--truth", truth_dir, "directory holding truth.jsonl");
  dg->add_option("--bins", bins, "histogram bins")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen(g, source_platform);
    if (*tc) return cmd_train_content(g);
    if (*tx) return cmd_train_context(g, checkpoint);
    if (*pr) return cmd_predict(g, checkpoint, model);
    if (*ev) return cmd_eval(g);
    if (*ab) return cmd_ablate(g, with_transfer);
    if (*dg) return cmd_diag(g, truth_dir, bins);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
