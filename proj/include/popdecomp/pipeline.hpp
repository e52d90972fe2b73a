#pragma once

// End-to-end orchestration: combining the two factors, log-scale metrics,
// rank and distribution diagnostics, flat configuration files, and the
// ablation / transfer experiment runner.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "popdecomp/common.hpp"
#include "popdecomp/content_model.hpp"
#include "popdecomp/context_features.hpp"
#include "popdecomp/corpus.hpp"
#include "popdecomp/exposure_model.hpp"
#include "popdecomp/retrieval.hpp"
#include "popdecomp/synthgen.hpp"

namespace popdecomp::pipeline {

using corpus::PostRecord;
using features::FeatureMatrix;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Prediction and metrics
// ---------------------------------------------------------------------------

struct Combined {
  double y_tilde = 0.0;
  double y = 0.0;
};

inline Combined combine_prediction(double alpha, double phi) {
  const double t = alpha + phi;
  return {t, std::max(0.0, std::expm1(t))};
}

// 1-based ranks; tied values share the mean of their rank range.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t s = 0; s < order.size();) {
    std::size_t e = s + 1;
    while (e < order.size() && v[order[e]] == v[order[s]]) ++e;
    const double avg = 0.5 * static_cast<double>(s + 1 + e);
    for (std::size_t k = s; k < e; ++k) r[order[k]] = avg;
    s = e;
  }
  return r;
}

struct Correlation {
  double value = 0.0;
  bool degenerate = false;
};

inline Correlation pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = mean_of(a), mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) return {0.0, true};
  return {std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0), false};
}

inline Correlation spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DataError("spearman: length mismatch");
  if (a.size() < 2) throw DataError("spearman: need at least 2 values");
  return pearson(average_ranks(a), average_ranks(b));
}

struct SplitMetrics {
  std::size_t n = 0;
  double mse = 0.0;
  double mae = 0.0;
  double src = 0.0;
  bool src_degenerate = false;
};

// Log-scale errors and rank correlation.
inline SplitMetrics evaluate(const std::vector<double>& pred, const std::vector<double>& label) {
  if (pred.size() != label.size()) throw DataError("evaluate: length mismatch");
  if (pred.size() < 2) throw DataError("evaluate: need at least 2 samples");
  SplitMetrics m;
  m.n = pred.size();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - label[i];
    m.mse += e * e;
    m.mae += std::abs(e);
  }
  m.mse /= static_cast<double>(m.n);
  m.mae /= static_cast<double>(m.n);
  const auto c = spearman(pred, label);
  m.src = c.value;
  m.src_degenerate = c.degenerate;
  return m;
}

inline json to_json(const SplitMetrics& m) {
  return json{{"n", m.n}, {"mse", m.mse}, {"mae", m.mae}, {"src", m.src}, {"src_degenerate", m.src_degenerate}};
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

struct RankRankDiag {
  int grid = 10;
  std::vector<double> density;  // row = alpha bucket, column = phi bucket
  double spearman = 0.0;

  double at(int a, int p) const { return density[std::size_t(a * grid + p)]; }
  double max_deviation() const {
    double d = 0.0;
    for (double x : density) d = std::max(d, std::abs(x - 1.0 / (grid * grid)));
    return d;
  }
};

inline RankRankDiag rank_rank_diag(const std::vector<double>& alpha, const std::vector<double>& phi, int grid = 10) {
  if (alpha.size() != phi.size()) throw DataError("rank_rank_diag: length mismatch");
  if (alpha.size() < 2) throw DataError("rank_rank_diag: need at least 2 values");
  if (grid < 1) throw ConfigError("rank_rank_diag: grid must be positive");
  RankRankDiag d;
  d.grid = grid;
  d.density.assign(std::size_t(grid * grid), 0.0);
  const auto ra = average_ranks(alpha), rp = average_ranks(phi);
  const double n = static_cast<double>(alpha.size());
  auto bucket = [&](double r) { return std::clamp(static_cast<int>(std::floor((r - 1.0) * grid / n)), 0, grid - 1); };
  for (std::size_t i = 0; i < alpha.size(); ++i) d.density[std::size_t(bucket(ra[i]) * grid + bucket(rp[i]))] += 1.0 / n;
  d.spearman = pearson(ra, rp).value;
  return d;
}

// 1-Wasserstein distance between two equal-size empirical distributions.
inline double wasserstein1(std::vector<double> a, std::vector<double> b) {
  if (a.size() != b.size() || a.empty()) throw DataError("wasserstein1: samples must be nonempty and equal-sized");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

struct DistributionDiag {
  std::vector<double> edges;                    // bins + 1
  std::array<std::vector<double>, 3> frequency;  // truth, content-only, full
  double w1_content = 0.0;
  double w1_full = 0.0;
};

inline DistributionDiag distribution_diag(const std::vector<double>& truth, const std::vector<double>& content_only,
                                          const std::vector<double>& full, int bins = 20) {
  if (truth.empty() || truth.size() != content_only.size() || truth.size() != full.size())
    throw DataError("distribution_diag: series must be nonempty and equal-sized");
  if (bins < 1) throw ConfigError("distribution_diag: bins must be positive");
  double lo = truth[0], hi = truth[0];
  for (const auto* s : {&truth, &content_only, &full})
    for (double x : *s) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  DistributionDiag d;
  for (int k = 0; k <= bins; ++k) d.edges.push_back(k == bins ? hi : lo + (hi - lo) * k / bins);
  const std::array<const std::vector<double>*, 3> series{&truth, &content_only, &full};
  for (std::size_t s = 0; s < 3; ++s) {
    auto& f = d.frequency[s];
    f.assign(std::size_t(bins), 0.0);
    for (double x : *series[s]) {
      int k = hi > lo ? static_cast<int>(std::floor((x - lo) / (hi - lo) * bins)) : 0;
      f[std::size_t(std::clamp(k, 0, bins - 1))] += 1.0 / static_cast<double>(truth.size());
    }
  }
  d.w1_content = wasserstein1(truth, content_only);
  d.w1_full = wasserstein1(truth, full);
  return d;
}

inline void write_rank_rank_csv(std::ostream& os, const RankRankDiag& d) {
  os << "alpha_bucket,phi_bucket,density\n";
  char buf[64];
  for (int a = 0; a < d.grid; ++a)
    for (int p = 0; p < d.grid; ++p) {
      std::snprintf(buf, sizeof buf, "%d,%d,%.17g\n", a, p, d.at(a, p));
      os << buf;
    }
}

inline void write_distribution_csv(std::ostream& os, const DistributionDiag& d) {
  os << "bin_low,bin_high,truth,content_only,full\n";
  char buf[160];
  for (std::size_t k = 0; k + 1 < d.edges.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g\n", d.edges[k], d.edges[k + 1], d.frequency[0][k],
                  d.frequency[1][k], d.frequency[2][k]);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Variant {
  Full,
  NoContext,
  NoContent,
  NoRetrieval,
  NoContextFeatures,
  ContentImageOnly,
  ContentTextOnly,
  TransferFrozenContent,
};

inline constexpr std::array<std::pair<Variant, const char*>, 8> kVariantNames{{
    {Variant::Full, "full"},
    {Variant::NoContext, "no_context"},
    {Variant::NoContent, "no_content"},
    {Variant::NoRetrieval, "no_retrieval"},
    {Variant::NoContextFeatures, "no_context_features"},
    {Variant::ContentImageOnly, "content_image_only"},
    {Variant::ContentTextOnly, "content_text_only"},
    {Variant::TransferFrozenContent, "transfer_frozen_content"},
}};

inline const char* variant_name(Variant v) {
  for (const auto& [k, n] : kVariantNames)
    if (k == v) return n;
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (const auto& [k, n] : kVariantNames)
    if (s == n) return k;
  throw ConfigError("unknown variant '" + s + "'");
}

struct PipelineConfig {
  synthgen::GeneratorConfig gen;
  content::ModelConfig model;
  content::TrainConfig train = default_train();
  features::FeatureConfig features;
  retrieval::RetrievalConfig retrieval;
  exposure::BoostConfig boost;
  std::array<unsigned, 3> split{8, 1, 1};
  Variant variant = Variant::Full;
  std::vector<std::uint64_t> seeds{1, 2, 3};

  // Content training schedule used by the pipeline at desk scale.
  static content::TrainConfig default_train() {
    content::TrainConfig t;
    t.epochs = 15;
    t.learning_rate = 3e-3;
    return t;
  }

  void validate() const {
    gen.validate();
    train.validate();
    features.validate();
    retrieval.validate();
    boost.validate();
    if (seeds.empty()) throw ConfigError("at least one seed is required");
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    T out;
    if constexpr (std::is_same_v<T, double>) {
      out = std::stod(v, &used);
    } else if constexpr (std::is_same_v<T, std::uint64_t> || std::is_same_v<T, std::size_t>) {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      out = static_cast<T>(std::stoull(v, &used, 0));
    } else {
      const long long x = std::stoll(v, &used, 0);
      if (x < std::numeric_limits<T>::min() || x > std::numeric_limits<T>::max()) throw std::out_of_range("range");
      out = static_cast<T>(x);
    }
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("invalid value '" + v + "' for key '" + key + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("invalid boolean '" + v + "' for key '" + key + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

struct Binding {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <class T>
Binding bind(const std::string& key, T& field) {
  if constexpr (std::is_same_v<T, bool>) {
    return {[&field, key](const std::string& v) { field = parse_bool(key, v); },
            [&field] { return std::string(field ? "true" : "false"); }};
  } else if constexpr (std::is_same_v<T, double>) {
    return {[&field, key](const std::string& v) { field = parse_number<double>(key, v); },
            [&field] { return fmt_double(field); }};
  } else {
    return {[&field, key](const std::string& v) { field = parse_number<T>(key, v); },
            [&field] { return std::to_string(field); }};
  }
}

inline std::map<std::string, Binding> bindings(PipelineConfig& c) {
  std::map<std::string, Binding> b;
  auto add = [&](const std::string& k, auto& field) { b.emplace(k, bind(k, field)); };

  auto& g = c.gen;
  add("gen.n_posts", g.n_posts);
  add("gen.n_authors", g.n_authors);
  add("gen.n_categories", g.n_categories);
  add("gen.n_locations", g.n_locations);
  add("gen.dim", g.dim);
  add("gen.missing_image", g.missing_rate[0]);
  add("gen.missing_text", g.missing_rate[1]);
  add("gen.missing_video", g.missing_rate[2]);
  add("gen.noise_std", g.noise_std);
  add("gen.seed", g.seed);
  add("gen.content_seed", g.content_seed);
  add("gen.time_span", g.time_span);
  add("gen.start_time", g.start_time);
  add("gen.platform_id", g.platform_id);
  add("gen.post_id_offset", g.post_id_offset);
  add("gen.alpha_std", g.alpha_std);
  add("gen.theme_share", g.theme_share);
  add("gen.alpha_theme_weight", g.alpha_theme_weight);
  add("gen.embedding_noise", g.embedding_noise);
  add("gen.exposure_base", g.exposure_base);
  add("gen.daily_amp", g.daily_amp);
  add("gen.weekly_amp", g.weekly_amp);
  add("gen.author_effect", g.author_effect);
  add("gen.category_effect", g.category_effect);
  add("gen.location_effect", g.location_effect);
  add("gen.momentum_effect", g.momentum_effect);
  add("gen.momentum_tau", g.momentum_tau);
  add("gen.posts_per_session", g.posts_per_session);
  add("gen.session_length", g.session_length);

  add("model.dim", c.model.dim);
  add("model.hidden", c.model.hidden);
  add("model.align_dim", c.model.align_dim);

  auto& t = c.train;
  add("content.epochs", t.epochs);
  add("content.lr", t.learning_rate);
  add("content.weight_decay", t.weight_decay);
  add("content.batch_size", t.batch_size);
  add("content.huber_delta", t.huber_delta);
  add("content.margin", t.margin);
  add("content.temperature", t.temperature);
  add("content.lambda_huber", t.lambda_huber);
  add("content.lambda_pair", t.lambda_pair);
  add("content.lambda_align", t.lambda_align);
  add("content.lambda_mu", t.lambda_mu);
  add("content.beta1", t.beta1);
  add("content.beta2", t.beta2);
  add("content.adam_eps", t.adam_eps);

  add("features.folds", c.features.n_folds);
  add("features.smoothing", c.features.smoothing);

  add("retrieval.k", c.retrieval.k);
  add("retrieval.tau", c.retrieval.tau);
  add("retrieval.log_payload", c.retrieval.log_payload);

  add("boost.max_depth", c.boost.max_depth);
  add("boost.shrinkage", c.boost.shrinkage);
  add("boost.max_rounds", c.boost.max_rounds);
  add("boost.patience", c.boost.patience);
  add("boost.delta", c.boost.delta);
  add("boost.l2", c.boost.l2);
  add("boost.min_child_weight", c.boost.min_child_weight);
  add("boost.min_split_gain", c.boost.min_split_gain);

  add("split.train", c.split[0]);
  add("split.val", c.split[1]);
  add("split.test", c.split[2]);

  b.emplace("variant", Binding{[&c](const std::string& v) { c.variant = parse_variant(v); },
                               [&c] { return std::string(variant_name(c.variant)); }});
  b.emplace("seeds", Binding{[&c](const std::string& v) {
                               c.seeds.clear();
                               for (const auto& s : split_list(v)) c.seeds.push_back(parse_number<std::uint64_t>("seeds", s));
                             },
                             [&c] {
                               std::string out;
                               for (std::size_t k = 0; k < c.seeds.size(); ++k)
                                 out += (k ? "," : "") + std::to_string(c.seeds[k]);
                               return out;
                             }});
  return b;
}

}  // namespace detail

inline void set_option(PipelineConfig& c, const std::string& key, const std::string& value) {
  auto b = detail::bindings(c);
  auto it = b.find(key);
  if (it == b.end()) throw ConfigError("unknown configuration key '" + key + "'");
  it->second.set(value);
}

// key=value lines; '#' starts a comment.
inline std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    const auto key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    out[key] = detail::trim(line.substr(eq + 1));
  }
  return out;
}

inline std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

inline void apply_options(PipelineConfig& c, const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) set_option(c, k, v);
}

// Canonical dump: sorted key=value lines.
inline std::string dump_config(const PipelineConfig& c) {
  PipelineConfig copy = c;
  std::string out;
  for (const auto& [k, b] : detail::bindings(copy)) out += k + "=" + b.get() + "\n";
  return out;
}

// Hash of every setting that influences training, excluding the seed list.
inline std::string config_fingerprint(const PipelineConfig& c) {
  PipelineConfig copy = c;
  copy.seeds.clear();
  return hex64(fnv1a64(dump_config(copy)));
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

struct PreparedData {
  synthgen::Dataset data;
  std::vector<double> y_tilde;
  corpus::SplitAssignment split;
  corpus::LabelScaler scaler;
  corpus::BinWeights bins;

  const std::vector<PostRecord>& posts() const { return data.posts; }
  std::size_t size() const { return data.posts.size(); }
};

inline PreparedData prepare(synthgen::Dataset data, std::array<unsigned, 3> ratios = {8, 1, 1}) {
  synthgen::check_consistent(data);
  PreparedData p;
  p.data = std::move(data);
  p.y_tilde = corpus::log_labels(p.data.posts);
  p.split = corpus::chronological_split(p.data.posts, ratios);
  p.scaler = corpus::LabelScaler::fit(p.data.posts, p.y_tilde, p.split.train);
  p.bins = corpus::BinWeights::fit(p.data.posts, p.y_tilde, p.split.train);
  return p;
}

using ModalityMask = std::array<bool, 3>;

inline ModalityMask modality_mask(Variant v) {
  if (v == Variant::ContentImageOnly) return {true, false, false};
  if (v == Variant::ContentTextOnly) return {false, true, false};
  return {true, true, true};
}

// Posts that keep at least one modality under the mask.
inline std::vector<bool> usable_posts(const PreparedData& d, const ModalityMask& keep) {
  std::vector<bool> u(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    bool any = false;
    for (int m = 0; m < 3; ++m) any = any || (keep[m] && d.data.embeddings.has(m, i));
    u[i] = any;
  }
  return u;
}

inline std::vector<std::size_t> filter(const std::vector<std::size_t>& idx, const std::vector<bool>& keep) {
  std::vector<std::size_t> out;
  for (std::size_t i : idx)
    if (keep[i]) out.push_back(i);
  return out;
}

struct ContentStage {
  content::TrainResult result;
  content::TrainConfig train;
  corpus::LabelScaler scaler;  // of the data the model was trained on
};

inline ContentStage train_content_stage(const PreparedData& d, const ModalityMask& keep, const PipelineConfig& cfg,
                                        std::uint64_t seed) {
  auto model = cfg.model;
  model.input_dim = d.data.embeddings.dim;
  auto tc = cfg.train;
  tc.seed = seed;
  const auto usable = usable_posts(d, keep);
  const auto train = content::make_samples(d.data, d.y_tilde, &d.scaler, &d.bins, filter(d.split.train, usable), keep);
  const auto val = content::make_samples(d.data, d.y_tilde, &d.scaler, &d.bins, filter(d.split.val, usable), keep);
  return {content::train_content(train, val, model, tc), tc, d.scaler};
}

// Per-post content outputs on one corpus.
struct ContentScores {
  std::vector<double> alpha_std;  // standardized scale; 0 where unusable
  std::vector<double> alpha;      // raw log scale
  int dim = 0;
  std::vector<double> z;          // row-major n x dim; zero rows where unusable
  std::vector<bool> usable;
};

inline ContentScores score_content(const content::ContentModelParams& p, const PreparedData& d, const ModalityMask& keep) {
  ContentScores s;
  s.usable = usable_posts(d, keep);
  std::vector<std::size_t> all(d.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto idx = filter(all, s.usable);
  const auto samples = content::make_samples(d.data, {}, nullptr, nullptr, idx, keep);
  const auto out = content::predict_content(p, samples);
  s.dim = p.config.dim;
  s.alpha_std.assign(d.size(), 0.0);
  s.z.assign(d.size() * std::size_t(s.dim), 0.0);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    s.alpha_std[idx[k]] = out.alpha[k];
    for (int c = 0; c < s.dim; ++c) s.z[idx[k] * std::size_t(s.dim) + std::size_t(c)] = out.z(c, Eigen::Index(k));
  }
  s.alpha.resize(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) s.alpha[i] = d.scaler.invert(d.posts()[i].platform_id, s.alpha_std[i]);
  return s;
}

// Without a content model: alpha = 0 and retrieval runs on the concatenated,
// per-modality unit-normalized raw embeddings.
inline ContentScores raw_content_scores(const PreparedData& d) {
  ContentScores s;
  const auto& e = d.data.embeddings;
  s.dim = e.dim[0] + e.dim[1] + e.dim[2];
  s.usable.assign(d.size(), true);
  s.alpha_std.resize(d.size());
  s.alpha.assign(d.size(), 0.0);
  s.z.assign(d.size() * std::size_t(s.dim), 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    s.alpha_std[i] = d.scaler.apply(d.posts()[i].platform_id, 0.0);
    std::size_t off = i * std::size_t(s.dim);
    for (int m = 0; m < 3; ++m) {
      if (e.has(m, i)) {
        const float* row = e.row(m, i);
        double nrm = 0.0;
        for (int c = 0; c < e.dim[m]; ++c) nrm += double(row[c]) * double(row[c]);
        nrm = std::sqrt(nrm);
        if (nrm > 0.0)
          for (int c = 0; c < e.dim[m]; ++c) s.z[off + std::size_t(c)] = double(row[c]) / nrm;
      }
      off += std::size_t(e.dim[m]);
    }
  }
  return s;
}

// Frozen context-side state: encoders, standardizers and the column subset.
struct ContextState {
  features::FeatureEncoderState encoder;
  retrieval::StatsStandardizer neighbor_scaling;
  retrieval::RetrievalConfig retrieval;
  bool use_context = true;
  bool use_neighbors = true;
};

struct ContextFeatures {
  FeatureMatrix x;  // all posts, selected columns
  retrieval::NeighborBlock neighbors;
  std::map<int, retrieval::EmbeddingIndex> indices;
};

inline ContextFeatures transform_context(const PreparedData& d, const ContentScores& s, const ContextState& st) {
  ContextFeatures out;
  const auto ctx = features::context_matrix(d.posts(), st.encoder);
  out.indices = retrieval::build_indices(d.posts(), s.z, s.dim, st.retrieval, &s.usable);
  out.neighbors = retrieval::query_all(d.posts(), s.z, s.dim, out.indices, st.retrieval, &s.usable);
  const auto full = retrieval::augment_matrix(ctx, d.posts(), out.neighbors, st.neighbor_scaling);
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < full.cols(); ++c) {
    const bool is_ctx = c < ctx.cols();
    if ((is_ctx && st.use_context) || (!is_ctx && st.use_neighbors)) cols.push_back(c);
  }
  out.x = full.select_columns(cols);
  return out;
}

inline ContextState fit_context_state(const PreparedData& d, const ContentScores& s, const PipelineConfig& cfg,
                                      bool use_context, bool use_neighbors) {
  ContextState st;
  st.encoder = features::fit_feature_encoder(d.posts(), d.split.train, cfg.features);
  st.retrieval = cfg.retrieval;
  st.use_context = use_context;
  st.use_neighbors = use_neighbors;
  const auto ix = retrieval::build_indices(d.posts(), s.z, s.dim, cfg.retrieval, &s.usable);
  const auto nb = retrieval::query_all(d.posts(), s.z, s.dim, ix, cfg.retrieval, &s.usable);
  st.neighbor_scaling = retrieval::fit_stats_standardizer(d.posts(), nb, d.split.train);
  return st;
}

struct ExposureStage {
  ContextState state;
  ContextFeatures features;
  exposure::BoostedEnsemble model;
  exposure::FitTrace trace;
  std::vector<double> r;    // residual targets, all posts
  std::vector<double> phi;  // calibrated, all posts
};

inline std::vector<double> gather(const std::vector<double>& v, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

inline std::vector<double> bin_weights_of(const PreparedData& d, const std::vector<std::size_t>& idx) {
  std::vector<double> w;
  w.reserve(idx.size());
  for (std::size_t i : idx) w.push_back(d.bins.weight(d.posts()[i].platform_id, d.y_tilde[i]));
  return w;
}

inline ExposureStage exposure_stage(const PreparedData& d, const ContentScores& s, const PipelineConfig& cfg,
                                    bool use_context, bool use_neighbors) {
  ExposureStage e;
  e.r.resize(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) e.r[i] = d.y_tilde[i] - s.alpha[i];
  e.state = fit_context_state(d, s, cfg, use_context, use_neighbors);
  e.features = transform_context(d, s, e.state);
  const auto& tr = d.split.train;
  const auto& va = d.split.val;
  e.model = exposure::fit_exposure(e.features.x.select_rows(tr), gather(e.r, tr), bin_weights_of(d, tr),
                                   e.features.x.select_rows(va), gather(e.r, va), bin_weights_of(d, va), cfg.boost,
                                   &e.trace);
  const auto raw = exposure::predict_phi(e.model, e.features.x);
  e.model.calibration = exposure::calibrate_phi(gather(raw, tr), gather(e.r, tr));
  e.phi = exposure::apply_calibration(e.model.calibration, raw);
  return e;
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

struct RunOutput {
  Variant variant = Variant::Full;
  std::uint64_t seed = 0;
  std::vector<double> alpha;         // raw log scale
  std::vector<double> phi;           // calibrated
  std::vector<double> y_tilde_hat;
  std::vector<double> content_only;  // alpha + mean train residual
  std::optional<ContentStage> content;
  std::optional<ExposureStage> exposure;
  json report;
};

inline json split_report(const PreparedData& d, const std::vector<double>& pred, const std::vector<std::size_t>& idx) {
  json j = to_json(evaluate(gather(pred, idx), gather(d.y_tilde, idx)));
  static constexpr std::array<const char*, 3> names{"low", "mid", "high"};
  std::array<std::vector<std::size_t>, 3> by_bin;
  for (std::size_t i : idx) by_bin[std::size_t(d.bins.bin(d.posts()[i].platform_id, d.y_tilde[i]))].push_back(i);
  json t = json::object();
  for (std::size_t b = 0; b < 3; ++b) {
    if (by_bin[b].size() < 2) {
      t[names[b]] = nullptr;
      continue;
    }
    t[names[b]] = to_json(evaluate(gather(pred, by_bin[b]), gather(d.y_tilde, by_bin[b])));
  }
  j["terciles"] = std::move(t);
  return j;
}

// Runs one variant with one seed. `source` is required for the transfer
// variant and supplies the frozen content model.
inline RunOutput run_experiment(const PreparedData& target, const PreparedData* source, const PipelineConfig& cfg,
                                std::uint64_t seed) {
  cfg.validate();
  RunOutput out;
  out.variant = cfg.variant;
  out.seed = seed;
  const Variant v = cfg.variant;
  const auto keep = modality_mask(v);

  ContentScores scores;
  if (v == Variant::NoContent) {
    scores = raw_content_scores(target);
  } else {
    const PreparedData* content_data = &target;
    if (v == Variant::TransferFrozenContent) {
      if (!source) throw ConfigError("transfer_frozen_content needs a source corpus");
      content_data = source;
    }
    out.content = train_content_stage(*content_data, keep, cfg, seed);
    scores = score_content(out.content->result.params, target, keep);
  }
  out.alpha = scores.alpha;

  const auto& tr = target.split.train;
  std::vector<double> r(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) r[i] = target.y_tilde[i] - scores.alpha[i];
  const double mean_r = mean_of(gather(r, tr));

  if (v == Variant::NoContext) {
    out.phi.assign(target.size(), mean_r);
  } else {
    const bool use_ctx = v != Variant::NoContextFeatures;
    const bool use_nbr = v != Variant::NoRetrieval;
    out.exposure = exposure_stage(target, scores, cfg, use_ctx, use_nbr);
    out.phi = out.exposure->phi;
  }
  out.y_tilde_hat.resize(target.size());
  out.content_only.resize(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    out.y_tilde_hat[i] = combine_prediction(out.alpha[i], out.phi[i]).y_tilde;
    out.content_only[i] = out.alpha[i] + mean_r;
  }

  json rep;
  rep["variant"] = variant_name(v);
  rep["seed"] = seed;
  rep["config_fingerprint"] = config_fingerprint(cfg);
  rep["n_posts"] = target.size();
  json splits;
  for (auto role : {corpus::Role::Train, corpus::Role::Val, corpus::Role::Test})
    splits[corpus::role_name(role)] = split_report(target, out.y_tilde_hat, target.split.indices(role));
  rep["splits"] = std::move(splits);
  const auto& te = target.split.test;
  const auto rr = rank_rank_diag(gather(out.alpha, te), gather(out.phi, te));
  rep["test_alpha_phi_spearman"] = rr.spearman;
  rep["test_rank_grid_max_deviation"] = rr.max_deviation();
  if (out.exposure) {
    rep["exposure"] = {{"best_iteration", out.exposure->model.best_iteration},
                       {"calibration_a", out.exposure->model.calibration.a},
                       {"calibration_b", out.exposure->model.calibration.b},
                       {"n_features", out.exposure->model.n_features()}};
  }
  out.report = std::move(rep);
  return out;
}

// Repeats the run for every configured seed and summarizes the splits.
inline json run_seeds(const PreparedData& target, const PreparedData* source, const PipelineConfig& cfg,
                      std::vector<RunOutput>* runs = nullptr) {
  json all = json::array();
  std::map<std::string, std::vector<double>> metric;
  for (std::uint64_t seed : cfg.seeds) {
    auto run = run_experiment(target, source, cfg, seed);
    for (const char* split : {"train", "val", "test"})
      for (const char* m : {"mse", "mae", "src"})
        metric[std::string(split) + "." + m].push_back(run.report["splits"][split][m].get<double>());
    all.push_back(run.report);
    if (runs) runs->push_back(std::move(run));
  }
  json summary;
  for (const auto& [k, vals] : metric) summary[k] = {{"mean", mean_of(vals)}, {"std", std::sqrt(variance_of(vals))}};
  json out;
  out["variant"] = variant_name(cfg.variant);
  out["config_fingerprint"] = config_fingerprint(cfg);
  out["seeds"] = cfg.seeds;
  out["summary"] = std::move(summary);
  out["runs"] = std::move(all);
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

inline std::string canonical_json(const json& j) { return j.dump(2) + "\n"; }

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot open " + p.string() + " for writing");
  os << s;
  if (!os) throw DataError("write failed: " + p.string());
}

template <class Fn>
void write_with(const std::filesystem::path& p, Fn&& fn) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot open " + p.string() + " for writing");
  fn(os);
  if (!os) throw DataError("write failed: " + p.string());
}

inline void write_predictions_csv(std::ostream& os, const PreparedData& d, const RunOutput& run) {
  os << "post_id,split,y_tilde,alpha,phi,y_tilde_hat,y_hat,content_only\n";
  char buf[256];
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto c = combine_prediction(run.alpha[i], run.phi[i]);
    std::snprintf(buf, sizeof buf, "%lld,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<long long>(d.posts()[i].post_id), corpus::role_name(d.split.role[i]), d.y_tilde[i],
                  run.alpha[i], run.phi[i], c.y_tilde, c.y, run.content_only[i]);
    os << buf;
  }
}

inline void write_exposure_trace_csv(std::ostream& os, const exposure::FitTrace& t) {
  os << "round,train_loss,val_loss\n";
  char buf[128];
  for (std::size_t k = 0; k < t.train_loss.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", k, t.train_loss[k], k < t.val_loss.size() ? t.val_loss[k] : NAN);
    os << buf;
  }
}

// Writes every artifact of a run into `dir`.
inline void write_run_artifacts(const std::filesystem::path& dir, const PreparedData& d, const RunOutput& run) {
  std::filesystem::create_directories(dir);
  if (run.content) {
    content::write_checkpoint((dir / "content.ckpt").string(),
                              {run.content->result.params, run.content->train, run.content->scaler});
    write_with(dir / "content_loss.csv", [&](std::ostream& os) { content::write_loss_trace_csv(os, run.content->result.trace); });
  }
  if (run.exposure) {
    exposure::write_model((dir / "exposure.otgb").string(), run.exposure->model);
    write_with(dir / "exposure_trace.csv", [&](std::ostream& os) { write_exposure_trace_csv(os, run.exposure->trace); });
    write_with(dir / "importance.csv", [&](std::ostream& os) { exposure::write_importance_csv(os, run.exposure->model); });
    std::vector<std::int64_t> ids;
    for (const auto& p : d.posts()) ids.push_back(p.post_id);
    write_with(dir / "features.csv", [&](std::ostream& os) { features::write_feature_csv(os, run.exposure->features.x, ids); });
  }
  write_with(dir / "predictions.csv", [&](std::ostream& os) { write_predictions_csv(os, d, run); });
  write_text(dir / "metrics.json", canonical_json(run.report));
}

}  // namespace popdecomp::pipeline
