#pragma once

// Deterministic synthetic platform generator. Produces posts, per-modality
// embeddings, and the latent attractiveness / exposure factors that generated
// each label, plus readers and writers for the on-disk corpus layout:
//
//   corpus.jsonl     one PostRecord per line
//   embeddings.oteb  binary embedding matrices (see write_embeddings)
//   truth.jsonl      post_id, alpha_star, phi_star (never read by training)

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "popdecomp/common.hpp"
#include "popdecomp/corpus.hpp"

namespace popdecomp::synthgen {

inline constexpr int kNumModalities = 3;
enum Modality : int { kImage = 0, kText = 1, kVideo = 2 };
inline constexpr std::array<const char*, 3> kModalityNames{"image", "text", "video"};

struct GeneratorConfig {
  std::size_t n_posts = 10000;
  std::size_t n_authors = 200;
  std::size_t n_categories = 20;
  std::size_t n_locations = 12;
  int dim = 32;
  std::array<double, 3> missing_rate{0.05, 0.1, 0.3};  // image, text, video
  double noise_std = 0.3;
  std::uint64_t seed = 1;
  // Seeds the attractiveness generator (modality maps and the alpha function).
  // Platforms that share it share the notion of appeal.
  std::uint64_t content_seed = 0x5eed0c0117e47ULL;
  std::int64_t time_span = 180LL * 86400;
  std::int64_t start_time = 1600000000;
  int platform_id = 0;
  std::int64_t post_id_offset = 0;

  // Shape of the latent factors.
  double alpha_std = 1.0;
  double theme_share = 0.9;         // fraction of the content latent shared within an author session
  double alpha_theme_weight = 0.0;  // fraction of alpha's ridge input drawn from the session theme
  double embedding_noise = 0.1;
  double exposure_base = 3.5;
  double daily_amp = 0.35;
  double weekly_amp = 0.25;
  double author_effect = 0.45;
  double category_effect = 0.45;
  double location_effect = 0.15;
  double momentum_effect = 1.5;
  double momentum_tau = 2.0 * 3600.0;
  double posts_per_session = 5.0;
  double session_length = 3.0 * 3600.0;

  void validate() const {
    if (n_posts == 0) throw ConfigError("n_posts must be positive");
    if (n_authors == 0 || n_categories == 0 || n_locations == 0)
      throw ConfigError("n_authors, n_categories and n_locations must be positive");
    if (dim < 2) throw ConfigError("embedding dim must be >= 2");
    for (double r : missing_rate)
      if (!(r >= 0.0 && r < 1.0)) throw ConfigError("modality missing rates must lie in [0, 1)");
    if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
    if (time_span <= 0 || start_time <= 0) throw ConfigError("time_span and start_time must be positive");
    if (!(theme_share >= 0.0 && theme_share < 1.0)) throw ConfigError("theme_share must lie in [0, 1)");
    if (!(alpha_theme_weight >= 0.0 && alpha_theme_weight <= 1.0))
      throw ConfigError("alpha_theme_weight must lie in [0, 1]");
    if (!(momentum_tau > 0.0) || !(session_length > 0.0) || !(posts_per_session >= 1.0))
      throw ConfigError("momentum_tau, session_length must be positive; posts_per_session >= 1");
  }
};

// Per-modality row-major float matrices plus presence bits, rows aligned with
// the post list.
struct EmbeddingSet {
  std::size_t n = 0;
  std::array<int, 3> dim{0, 0, 0};
  std::array<std::vector<float>, 3> data;
  std::array<std::vector<std::uint8_t>, 3> present;

  EmbeddingSet() = default;
  EmbeddingSet(std::size_t rows, int d) : n(rows) {
    for (int m = 0; m < kNumModalities; ++m) {
      dim[m] = d;
      data[m].assign(rows * static_cast<std::size_t>(d), 0.0f);
      present[m].assign(rows, 0);
    }
  }

  const float* row(int m, std::size_t i) const { return data[m].data() + i * static_cast<std::size_t>(dim[m]); }
  float* row(int m, std::size_t i) { return data[m].data() + i * static_cast<std::size_t>(dim[m]); }
  bool has(int m, std::size_t i) const { return present[m][i] != 0; }

  bool operator==(const EmbeddingSet&) const = default;
};

struct GroundTruth {
  std::vector<std::int64_t> post_id;
  std::vector<double> alpha_star;
  std::vector<double> phi_star;
  std::vector<double> epsilon;  // in-memory only; not part of truth.jsonl

  bool operator==(const GroundTruth&) const = default;
};

struct Dataset {
  std::vector<corpus::PostRecord> posts;
  EmbeddingSet embeddings;
};

struct GeneratedCorpus {
  std::vector<corpus::PostRecord> posts;
  EmbeddingSet embeddings;
  GroundTruth truth;
};

namespace detail {

enum Stream : std::uint64_t {
  kAuthorStream = 1,
  kCategoryStream,
  kLocationStream,
  kPostStream,
  kSessionStream,
  kPhaseStream,
  kModalityMapStream,
  kAlphaStream,
};

inline std::vector<double> random_unit(Rng& rng, int d) {
  std::vector<double> v(static_cast<std::size_t>(d));
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
  } while (norm < 1e-12);
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

// Random orthogonal d x d matrix (row-major) by Gram-Schmidt on Gaussian rows.
inline std::vector<double> random_orthogonal(Rng& rng, int d) {
  const auto n = static_cast<std::size_t>(d);
  std::vector<double> q(n * n);
  for (std::size_t r = 0; r < n; ++r) {
    for (;;) {
      for (std::size_t c = 0; c < n; ++c) q[r * n + c] = rng.normal();
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k = 0; k < r; ++k) {
          double dot = 0.0;
          for (std::size_t c = 0; c < n; ++c) dot += q[r * n + c] * q[k * n + c];
          for (std::size_t c = 0; c < n; ++c) q[r * n + c] -= dot * q[k * n + c];
        }
      }
      double norm = 0.0;
      for (std::size_t c = 0; c < n; ++c) norm += q[r * n + c] * q[r * n + c];
      if (norm > 1e-10) {
        norm = std::sqrt(norm);
        for (std::size_t c = 0; c < n; ++c) q[r * n + c] /= norm;
        break;
      }
    }
  }
  return q;
}

// The attractiveness generator: per-modality orthogonal maps from the content
// latent to embedding space and a tanh ridge function over the concatenated
// modality vectors. Depends only on content_seed and dim.
struct ContentGenerator {
  int dim = 0;
  int theme_dims = 0;
  std::array<std::vector<double>, 3> modality_map;  // d x d, row-major
  static constexpr int kUnits = 3;
  std::array<std::vector<double>, kUnits> ridge;   // 3d each
  std::array<double, kUnits> ridge_out{};
  double alpha_scale = 1.0;
  double alpha_offset = 0.0;

  ContentGenerator(std::uint64_t content_seed, int d, double theme_share, double theme_weight, double alpha_std)
      : dim(d), theme_dims(d / 2) {
    Rng map_rng(mix_seed(content_seed, kModalityMapStream));
    for (auto& m : modality_map) m = random_orthogonal(map_rng, d);

    // Ridge directions mix a theme block and a per-post block of the latent,
    // scaled so alpha_theme_weight of the pre-activation variance comes from
    // the theme, then pushed through each modality map.
    Rng alpha_rng(mix_seed(content_seed, kAlphaStream));
    const int own_dims = d - theme_dims;
    const double c_theme = theme_share > 0.0
        ? std::sqrt(theme_weight) / (kNumModalities * std::sqrt(theme_share / theme_dims))
        : 0.0;
    const double c_own = std::sqrt(1.0 - theme_weight) / (kNumModalities * std::sqrt((1.0 - theme_share) / own_dims));
    const auto ud = static_cast<std::size_t>(d);
    for (int k = 0; k < kUnits; ++k) {
      const auto vt = random_unit(alpha_rng, theme_dims);
      const auto vo = random_unit(alpha_rng, own_dims);
      std::vector<double> u(ud);
      for (int c = 0; c < theme_dims; ++c) u[static_cast<std::size_t>(c)] = c_theme * vt[static_cast<std::size_t>(c)];
      for (int c = 0; c < own_dims; ++c) u[static_cast<std::size_t>(theme_dims + c)] = c_own * vo[static_cast<std::size_t>(c)];
      ridge[k].assign(3 * ud, 0.0);
      for (int m = 0; m < kNumModalities; ++m) {
        // block_m = R_m u
        for (std::size_t r = 0; r < ud; ++r) {
          double acc = 0.0;
          for (std::size_t c = 0; c < ud; ++c) acc += modality_map[m][r * ud + c] * u[c];
          ridge[k][static_cast<std::size_t>(m) * ud + r] = acc;
        }
      }
      ridge_out[k] = (alpha_rng.uniform() < 0.5 ? -1.0 : 1.0) * alpha_rng.uniform(0.6, 1.4);
    }

    // Calibrate scale and offset on a fixed reference sample of latents so
    // alpha* has roughly zero mean and the requested spread.
    Rng ref_rng(mix_seed(content_seed, kAlphaStream, 7));
    std::vector<double> raw;
    constexpr int kRef = 4000;
    raw.reserve(kRef);
    for (int i = 0; i < kRef; ++i) {
      const auto theme = random_unit(ref_rng, theme_dims);
      const auto own = random_unit(ref_rng, own_dims);
      const auto latent = compose_latent(theme, own, theme_share);
      std::array<std::vector<double>, 3> emb;
      for (int m = 0; m < kNumModalities; ++m) emb[m] = embed(m, latent, 0.0, ref_rng);
      raw.push_back(raw_alpha(emb));
    }
    alpha_offset = mean_of(raw);
    const double sd = std::sqrt(variance_of(raw));
    alpha_scale = sd > 0.0 ? alpha_std / sd : 1.0;
  }

  std::vector<double> compose_latent(const std::vector<double>& theme, const std::vector<double>& own,
                                     double theme_share) const {
    std::vector<double> c(static_cast<std::size_t>(dim));
    const double a = std::sqrt(theme_share), b = std::sqrt(1.0 - theme_share);
    for (int i = 0; i < theme_dims; ++i) c[static_cast<std::size_t>(i)] = a * theme[static_cast<std::size_t>(i)];
    for (int i = 0; i < dim - theme_dims; ++i)
      c[static_cast<std::size_t>(theme_dims + i)] = b * own[static_cast<std::size_t>(i)];
    return c;
  }

  // normalize(R_m c + noise * xi)
  std::vector<double> embed(int m, const std::vector<double>& latent, double noise, Rng& rng) const {
    const auto ud = static_cast<std::size_t>(dim);
    std::vector<double> e(ud);
    double norm = 0.0;
    for (std::size_t r = 0; r < ud; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < ud; ++c) acc += modality_map[m][r * ud + c] * latent[c];
      const double xi = rng.normal();
      e[r] = acc + noise * xi / std::sqrt(static_cast<double>(ud));
      norm += e[r] * e[r];
    }
    norm = std::sqrt(norm);
    for (auto& x : e) x /= norm;
    return e;
  }

  double raw_alpha(const std::array<std::vector<double>, 3>& emb) const {
    const auto ud = static_cast<std::size_t>(dim);
    double out = 0.0;
    for (int k = 0; k < kUnits; ++k) {
      double pre = 0.0;
      for (int m = 0; m < kNumModalities; ++m)
        for (std::size_t r = 0; r < ud; ++r) pre += ridge[k][static_cast<std::size_t>(m) * ud + r] * emb[m][r];
      out += ridge_out[k] * std::tanh(pre);
    }
    return out;
  }

  double alpha(const std::array<std::vector<double>, 3>& emb) const {
    return alpha_scale * (raw_alpha(emb) - alpha_offset);
  }
};

// Platform-level draws: authors, categories, locations, sinusoid phases.
struct PlatformGenerator {
  std::vector<double> author_weight_cdf;
  std::vector<double> author_log_activity;  // standardized log weight
  std::vector<std::int64_t> author_sessions;
  std::vector<std::int64_t> author_category, author_location;
  std::vector<double> category_effect, location_effect;
  double daily_phase = 0.0, weekly_phase = 0.0;

  explicit PlatformGenerator(const GeneratorConfig& cfg) {
    Rng arng(mix_seed(cfg.seed, kAuthorStream));
    const std::size_t na = cfg.n_authors;
    std::vector<double> logw(na);
    for (auto& v : logw) v = arng.normal(0.0, 1.0);
    const double lm = mean_of(logw);
    const double ls = std::sqrt(variance_of(logw));
    author_log_activity.resize(na);
    double total = 0.0;
    std::vector<double> w(na);
    for (std::size_t a = 0; a < na; ++a) {
      author_log_activity[a] = ls > 0.0 ? (logw[a] - lm) / ls : 0.0;
      w[a] = std::exp(logw[a]);
      total += w[a];
    }
    author_weight_cdf.resize(na);
    double acc = 0.0;
    for (std::size_t a = 0; a < na; ++a) {
      acc += w[a] / total;
      author_weight_cdf[a] = acc;
    }
    author_weight_cdf.back() = 1.0;

    author_sessions.resize(na);
    author_category.resize(na);
    author_location.resize(na);
    for (std::size_t a = 0; a < na; ++a) {
      const double expected_posts = static_cast<double>(cfg.n_posts) * w[a] / total;
      author_sessions[a] = std::max<std::int64_t>(1, std::llround(expected_posts / cfg.posts_per_session));
      author_category[a] = static_cast<std::int64_t>(arng.below(cfg.n_categories));
      author_location[a] = static_cast<std::int64_t>(arng.below(cfg.n_locations));
    }

    Rng crng(mix_seed(cfg.seed, kCategoryStream));
    category_effect.resize(cfg.n_categories);
    for (auto& e : category_effect) e = crng.normal(0.0, cfg.category_effect);
    Rng lrng(mix_seed(cfg.seed, kLocationStream));
    location_effect.resize(cfg.n_locations);
    for (auto& e : location_effect) e = lrng.normal(0.0, cfg.location_effect);
    Rng prng(mix_seed(cfg.seed, kPhaseStream));
    daily_phase = prng.uniform(0.0, 2.0 * std::numbers::pi);
    weekly_phase = prng.uniform(0.0, 2.0 * std::numbers::pi);
  }

  std::size_t pick_author(double u) const {
    auto it = std::lower_bound(author_weight_cdf.begin(), author_weight_cdf.end(), u);
    if (it == author_weight_cdf.end()) --it;
    return static_cast<std::size_t>(it - author_weight_cdf.begin());
  }
};

// Everything about post i that can be drawn from its own stream.
struct PostDraw {
  corpus::PostRecord post;
  std::array<std::vector<double>, 3> embedding;
  std::array<bool, 3> present{};
  double alpha_star = 0.0;
  double static_phi = 0.0;  // exposure excluding author momentum
  double epsilon = 0.0;
};

inline double hour_of_day(std::int64_t ts) {
  return static_cast<double>(((ts % 86400) + 86400) % 86400) / 3600.0;
}

inline int weekday_of(std::int64_t ts) {
  const std::int64_t days = ts >= 0 ? ts / 86400 : (ts - 86399) / 86400;
  return static_cast<int>(((days + 3) % 7 + 7) % 7);  // 1970-01-01 was a Thursday; Monday = 0
}

inline PostDraw draw_post(const GeneratorConfig& cfg, const ContentGenerator& content,
                          const PlatformGenerator& platform, std::size_t i) {
  Rng rng(mix_seed(cfg.seed, kPostStream, i));
  PostDraw d;
  auto& p = d.post;
  p.post_id = cfg.post_id_offset + static_cast<std::int64_t>(i);
  p.platform_id = cfg.platform_id;

  const std::size_t a = platform.pick_author(rng.uniform());
  p.author_id = static_cast<std::int64_t>(a);
  p.category_id = rng.uniform() < 0.5 ? platform.author_category[a]
                                      : static_cast<std::int64_t>(rng.below(cfg.n_categories));
  p.location_id = rng.uniform() < 0.7 ? platform.author_location[a]
                                      : static_cast<std::int64_t>(rng.below(cfg.n_locations));

  // Posts cluster into author sessions whose start times come from a
  // (seed, author, session) stream, so no post needs another post's draws.
  const auto session = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(platform.author_sessions[a])));
  Rng srng(mix_seed(cfg.seed, kSessionStream, (static_cast<std::uint64_t>(a) << 32) ^ static_cast<std::uint64_t>(session)));
  const double session_start = srng.uniform(0.0, static_cast<double>(cfg.time_span));
  const auto theme = random_unit(srng, content.theme_dims);
  const double offset = rng.exponential(cfg.session_length / 2.0);
  const double when = std::min(session_start + offset, static_cast<double>(cfg.time_span - 1));
  p.timestamp = cfg.start_time + static_cast<std::int64_t>(when);

  // Content
  const auto own = random_unit(rng, content.dim - content.theme_dims);
  const auto latent = content.compose_latent(theme, own, cfg.theme_share);
  for (int m = 0; m < kNumModalities; ++m) d.embedding[m] = content.embed(m, latent, cfg.embedding_noise, rng);
  d.alpha_star = content.alpha(d.embedding);

  for (int m = 0; m < kNumModalities; ++m) d.present[m] = rng.uniform() >= cfg.missing_rate[m];
  if (!(d.present[0] || d.present[1] || d.present[2])) {
    const auto best = std::min_element(cfg.missing_rate.begin(), cfg.missing_rate.end()) - cfg.missing_rate.begin();
    d.present[static_cast<std::size_t>(best)] = true;
  }
  p.has_image = d.present[kImage];
  p.has_text = d.present[kText];
  p.has_video = d.present[kVideo];

  // Exposure without momentum
  const double hour = hour_of_day(p.timestamp);
  const int wd = weekday_of(p.timestamp);
  d.static_phi = cfg.exposure_base +
                 cfg.daily_amp * std::sin(2.0 * std::numbers::pi * hour / 24.0 + platform.daily_phase) +
                 cfg.weekly_amp * std::sin(2.0 * std::numbers::pi * wd / 7.0 + platform.weekly_phase) +
                 cfg.author_effect * platform.author_log_activity[a] +
                 platform.category_effect[static_cast<std::size_t>(p.category_id)] +
                 platform.location_effect[static_cast<std::size_t>(p.location_id)];
  d.epsilon = rng.normal(0.0, cfg.noise_std);
  return d;
}

// Author momentum: log1p of exponentially decayed count of the same author's
// strictly earlier posts.
inline std::vector<double> author_momentum(const std::vector<corpus::PostRecord>& posts, double tau) {
  std::unordered_map<std::int64_t, std::vector<std::size_t>> by_author;
  const auto order = corpus::chronological_order(posts);
  for (std::size_t i : order) by_author[posts[i].author_id].push_back(i);
  std::vector<double> out(posts.size(), 0.0);
  for (const auto& [author, idx] : by_author) {
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto t = posts[idx[k]].timestamp;
      double acc = 0.0;
      for (std::size_t j = k; j-- > 0;) {
        const auto dt = static_cast<double>(t - posts[idx[j]].timestamp);
        if (dt <= 0.0) continue;
        if (dt > 20.0 * tau) break;
        acc += std::exp(-dt / tau);
      }
      out[idx[k]] = std::log1p(acc);
    }
  }
  return out;
}

}  // namespace detail

// Draws for posts [begin, end). Chunks may be produced in any order.
struct Generator {
  GeneratorConfig cfg;
  detail::ContentGenerator content;
  detail::PlatformGenerator platform;

  explicit Generator(const GeneratorConfig& c)
      : cfg((c.validate(), c)),
        content(c.content_seed, c.dim, c.theme_share, c.alpha_theme_weight, c.alpha_std),
        platform(c) {}

  std::vector<detail::PostDraw> draw_range(std::size_t begin, std::size_t end) const {
    std::vector<detail::PostDraw> out;
    out.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) out.push_back(detail::draw_post(cfg, content, platform, i));
    return out;
  }

  // Combines per-post draws (indexed by post position) into a corpus.
  GeneratedCorpus assemble(const std::vector<detail::PostDraw>& draws) const {
    GeneratedCorpus g;
    const std::size_t n = draws.size();
    g.posts.reserve(n);
    for (const auto& d : draws) g.posts.push_back(d.post);
    g.embeddings = EmbeddingSet(n, cfg.dim);
    for (std::size_t i = 0; i < n; ++i) {
      for (int m = 0; m < kNumModalities; ++m) {
        if (!draws[i].present[m]) continue;
        g.embeddings.present[m][i] = 1;
        float* row = g.embeddings.row(m, i);
        for (int c = 0; c < cfg.dim; ++c) row[c] = static_cast<float>(draws[i].embedding[m][static_cast<std::size_t>(c)]);
      }
    }
    const auto momentum = detail::author_momentum(g.posts, cfg.momentum_tau);
    g.truth.post_id.resize(n);
    g.truth.alpha_star.resize(n);
    g.truth.phi_star.resize(n);
    g.truth.epsilon.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double phi = draws[i].static_phi + cfg.momentum_effect * momentum[i];
      const double y_tilde = draws[i].alpha_star + phi + draws[i].epsilon;
      g.truth.post_id[i] = g.posts[i].post_id;
      g.truth.alpha_star[i] = draws[i].alpha_star;
      g.truth.phi_star[i] = phi;
      g.truth.epsilon[i] = draws[i].epsilon;
      const double count = std::round(std::expm1(y_tilde));
      g.posts[i].y = count > 0.0 ? static_cast<std::int64_t>(count) : 0;
    }
    return g;
  }
};

inline GeneratedCorpus generate_corpus(const GeneratorConfig& cfg) {
  Generator gen(cfg);
  return gen.assemble(gen.draw_range(0, cfg.n_posts));
}

// A second platform for transfer runs: same content_seed (so the same alpha
// function), its own authors, clock phases and exposure weights.
inline GeneratorConfig source_platform(const GeneratorConfig& target) {
  GeneratorConfig s = target;
  s.seed = mix_seed(target.seed, 0x50c);
  s.platform_id = target.platform_id + 1;
  s.post_id_offset = target.post_id_offset + static_cast<std::int64_t>(target.n_posts);
  s.exposure_base = target.exposure_base - 0.5;
  s.daily_amp = target.daily_amp * 1.5;
  s.weekly_amp = target.weekly_amp * 0.5;
  s.author_effect = target.author_effect * 1.3;
  s.category_effect = target.category_effect * 0.7;
  s.momentum_effect = target.momentum_effect * 0.8;
  return s;
}

// ---------------------------------------------------------------------------
// embeddings.oteb
//
//   "OTEB" | u16 version | u16 modality count M | u32 dim[M] | u64 rows n
//   for each modality: n * dim[m] float32, row-major
//   n * M presence bytes, row-major by (post, modality)
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kEmbeddingFormatVersion = 1;

inline void write_embeddings(std::ostream& os, const EmbeddingSet& e) {
  bin::put_magic(os, "OTEB");
  bin::put<std::uint16_t>(os, kEmbeddingFormatVersion);
  bin::put<std::uint16_t>(os, kNumModalities);
  for (int m = 0; m < kNumModalities; ++m) bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.dim[m]));
  bin::put<std::uint64_t>(os, e.n);
  for (int m = 0; m < kNumModalities; ++m)
    os.write(reinterpret_cast<const char*>(e.data[m].data()),
             static_cast<std::streamsize>(e.data[m].size() * sizeof(float)));
  for (std::size_t i = 0; i < e.n; ++i)
    for (int m = 0; m < kNumModalities; ++m) bin::put<std::uint8_t>(os, e.present[m][i]);
}

inline EmbeddingSet read_embeddings(std::istream& is) {
  bin::expect_magic(is, "OTEB");
  const auto version = bin::get<std::uint16_t>(is);
  if (version != kEmbeddingFormatVersion) throw FormatError("unsupported embedding format version " + std::to_string(version));
  const auto mcount = bin::get<std::uint16_t>(is);
  if (mcount != kNumModalities) throw FormatError("embedding file must hold 3 modalities");
  EmbeddingSet e;
  for (int m = 0; m < kNumModalities; ++m) {
    const auto d = bin::get<std::uint32_t>(is);
    if (d < 1 || d > 1u << 16) throw FormatError("embedding dimension out of range");
    e.dim[m] = static_cast<int>(d);
  }
  e.n = bin::get<std::uint64_t>(is);
  if (e.n > (1ull << 32)) throw FormatError("embedding row count out of range");
  for (int m = 0; m < kNumModalities; ++m) {
    e.data[m].resize(e.n * static_cast<std::size_t>(e.dim[m]));
    if (!e.data[m].empty() &&
        !is.read(reinterpret_cast<char*>(e.data[m].data()),
                 static_cast<std::streamsize>(e.data[m].size() * sizeof(float))))
      throw FormatError("truncated embedding matrix");
  }
  for (int m = 0; m < kNumModalities; ++m) e.present[m].resize(e.n);
  for (std::size_t i = 0; i < e.n; ++i)
    for (int m = 0; m < kNumModalities; ++m) {
      const auto b = bin::get<std::uint8_t>(is);
      if (b > 1) throw FormatError("presence byte must be 0 or 1");
      e.present[m][i] = b;
    }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after embedding data");
  return e;
}

inline void write_embeddings(const std::string& path, const EmbeddingSet& e) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_embeddings(os, e);
  if (!os) throw DataError("write failed: " + path);
}

inline EmbeddingSet read_embeddings(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_embeddings(is);
}

// ---------------------------------------------------------------------------
// truth.jsonl
// ---------------------------------------------------------------------------

inline void write_truth(const std::string& path, const GroundTruth& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  for (std::size_t i = 0; i < t.post_id.size(); ++i) {
    nlohmann::json j{{"post_id", t.post_id[i]}, {"alpha_star", t.alpha_star[i]}, {"phi_star", t.phi_star[i]}};
    os << j.dump() << '\n';
  }
}

inline GroundTruth read_truth(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  GroundTruth t;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      t.post_id.push_back(j.at("post_id").get<std::int64_t>());
      t.alpha_star.push_back(j.at("alpha_star").get<double>());
      t.phi_star.push_back(j.at("phi_star").get<double>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ": " + e.what());
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Corpus directories
// ---------------------------------------------------------------------------

inline void check_consistent(const Dataset& d) {
  if (d.embeddings.n != d.posts.size())
    throw DataError("embedding row count " + std::to_string(d.embeddings.n) + " != post count " +
                    std::to_string(d.posts.size()));
  for (std::size_t i = 0; i < d.posts.size(); ++i) {
    const auto& p = d.posts[i];
    const std::array<bool, 3> flags{p.has_image, p.has_text, p.has_video};
    for (int m = 0; m < kNumModalities; ++m)
      if (flags[m] != d.embeddings.has(m, i))
        throw DataError("post " + std::to_string(p.post_id) + ": presence flag disagrees with embedding mask");
  }
}

inline void write_corpus(const std::filesystem::path& dir, const Dataset& d) {
  std::filesystem::create_directories(dir);
  check_consistent(d);
  corpus::write_corpus_jsonl((dir / "corpus.jsonl").string(), d.posts);
  write_embeddings((dir / "embeddings.oteb").string(), d.embeddings);
}

inline void write_corpus(const std::filesystem::path& dir, const GeneratedCorpus& g) {
  write_corpus(dir, Dataset{g.posts, g.embeddings});
  write_truth((dir / "truth.jsonl").string(), g.truth);
}

// Reads corpus.jsonl and embeddings.oteb. The truth sidecar is deliberately
// not touched here.
inline Dataset read_corpus(const std::filesystem::path& dir) {
  Dataset d;
  d.posts = corpus::read_corpus_jsonl((dir / "corpus.jsonl").string());
  d.embeddings = read_embeddings((dir / "embeddings.oteb").string());
  check_consistent(d);
  return d;
}

}  // namespace popdecomp::synthgen
