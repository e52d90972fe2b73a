#pragma once

// Exogenous context vector: cyclic time, author activity, out-of-fold target
// encodings of category and location, author label history, platform one-hot.
// Nothing here accepts content embeddings.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numbers>
#include <ostream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "popdecomp/common.hpp"
#include "popdecomp/corpus.hpp"

namespace popdecomp::features {

using corpus::PostRecord;

inline constexpr std::int64_t kDay = 86400;

// Row-major dense matrix with named columns.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::vector<std::string> names;
  std::vector<double> data;

  std::size_t cols() const { return names.size(); }
  const double* row(std::size_t i) const { return data.data() + i * cols(); }
  double* row(std::size_t i) { return data.data() + i * cols(); }
  double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

  void append_row(const std::vector<double>& r) {
    if (r.size() != cols()) throw DataError("feature row width mismatch");
    data.insert(data.end(), r.begin(), r.end());
    ++rows;
  }

  FeatureMatrix select_rows(const std::vector<std::size_t>& idx) const {
    FeatureMatrix out;
    out.names = names;
    out.rows = idx.size();
    out.data.reserve(idx.size() * cols());
    for (std::size_t i : idx) out.data.insert(out.data.end(), row(i), row(i) + cols());
    return out;
  }

  FeatureMatrix select_columns(const std::vector<std::size_t>& cols_idx) const {
    FeatureMatrix out;
    for (std::size_t c : cols_idx) out.names.push_back(names.at(c));
    out.rows = rows;
    out.data.reserve(rows * cols_idx.size());
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t c : cols_idx) out.data.push_back(at(i, c));
    return out;
  }

  bool operator==(const FeatureMatrix&) const = default;
};

// CSV with a post_id column followed by one column per feature.
inline void write_feature_csv(std::ostream& os, const FeatureMatrix& m, const std::vector<std::int64_t>& post_ids) {
  if (post_ids.size() != m.rows) throw DataError("feature csv: id count mismatch");
  os << "post_id";
  for (const auto& n : m.names) os << ',' << n;
  os << '\n';
  char buf[64];
  for (std::size_t i = 0; i < m.rows; ++i) {
    os << post_ids[i];
    for (std::size_t j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, ",%.17g", m.at(i, j));
      os << buf;
    }
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Time
// ---------------------------------------------------------------------------

inline std::array<double, 4> encode_time_cyclic(std::int64_t timestamp) {
  if (timestamp <= 0) throw DataError("encode_time_cyclic: timestamp must be positive");
  const double hour = static_cast<double>(timestamp % kDay) / 3600.0;
  const int weekday = static_cast<int>((timestamp / kDay + 3) % 7);  // Monday = 0
  const double h = 2.0 * std::numbers::pi * hour / 24.0;
  const double w = 2.0 * std::numbers::pi * weekday / 7.0;
  return {std::sin(h), std::cos(h), std::sin(w), std::cos(w)};
}

// ---------------------------------------------------------------------------
// Author history
// ---------------------------------------------------------------------------

// Per-author post indices in (timestamp, post_id) order.
class HistoryIndex {
 public:
  explicit HistoryIndex(const std::vector<PostRecord>& posts) : posts_(&posts) {
    for (std::size_t i : corpus::chronological_order(posts)) by_author_[posts[i].author_id].push_back(i);
  }

  // The author's posts with timestamp strictly before t, oldest first.
  std::pair<const std::size_t*, const std::size_t*> before(std::int64_t author, std::int64_t t) const {
    auto it = by_author_.find(author);
    if (it == by_author_.end()) return {nullptr, nullptr};
    const auto& v = it->second;
    auto end = std::lower_bound(v.begin(), v.end(), t,
                                [&](std::size_t i, std::int64_t ts) { return (*posts_)[i].timestamp < ts; });
    return {v.data(), v.data() + (end - v.begin())};
  }

  const std::vector<PostRecord>& posts() const { return *posts_; }

 private:
  const std::vector<PostRecord>* posts_;
  std::unordered_map<std::int64_t, std::vector<std::size_t>> by_author_;
};

inline constexpr int kRecentPosts = 10;

// Mean raw engagement of the author's last kRecentPosts posts before t (0 if none).
inline double author_recent_mean(const HistoryIndex& h, std::int64_t author, std::int64_t t) {
  auto [first, last] = h.before(author, t);
  if (first == last) return 0.0;
  const std::ptrdiff_t n = std::min<std::ptrdiff_t>(last - first, kRecentPosts);
  double s = 0.0;
  for (const std::size_t* p = last - n; p != last; ++p) s += static_cast<double>(h.posts()[*p].y);
  return s / static_cast<double>(n);
}

// log1p of (prior post count, posts in trailing 30 days, mean y of trailing
// 10 posts). The prior count stands in for follower scale.
inline std::array<double, 3> encode_user_stats(const HistoryIndex& h, std::int64_t author, std::int64_t t) {
  auto [first, last] = h.before(author, t);
  const auto prior = static_cast<double>(last - first);
  double recent = 0.0;
  for (const std::size_t* p = last; p != first;) {
    --p;
    if (h.posts()[*p].timestamp < t - 30 * kDay) break;
    recent += 1.0;
  }
  return {std::log1p(prior), std::log1p(recent), std::log1p(author_recent_mean(h, author, t))};
}

// Mean log label of the author's posts in [t - window, t); 0 when empty.
inline double author_window_mean(const HistoryIndex& h, std::int64_t author, std::int64_t t, std::int64_t window) {
  auto [first, last] = h.before(author, t);
  double s = 0.0;
  int n = 0;
  for (const std::size_t* p = last; p != first;) {
    --p;
    const auto& post = h.posts()[*p];
    if (post.timestamp < t - window) break;
    s += corpus::log_transform(post.y);
    ++n;
  }
  return n ? s / n : 0.0;
}

// ---------------------------------------------------------------------------
// Out-of-fold target encoding
// ---------------------------------------------------------------------------

struct FeatureConfig {
  int n_folds = 5;
  double smoothing = 10.0;

  void validate() const {
    if (n_folds < 2) throw ConfigError("target encoding needs at least 2 folds");
    if (!(smoothing >= 0.0)) throw ConfigError("smoothing must be >= 0");
  }
};

inline int fold_of(std::int64_t post_id, int n_folds) {
  return static_cast<int>(splitmix64(static_cast<std::uint64_t>(post_id)) % static_cast<std::uint64_t>(n_folds));
}

struct SumCount {
  double sum = 0.0;
  double count = 0.0;
};

// Label sums per (platform, key), overall and per fold.
class TargetTable {
 public:
  using Key = std::pair<int, std::int64_t>;

  TargetTable() = default;
  explicit TargetTable(int n_folds) : fold_total_(static_cast<std::size_t>(n_folds)) {}

  void add(int platform, std::int64_t key, int fold, double label) {
    auto& cell = cells_[{platform, key}];
    if (cell.empty()) cell.resize(fold_total_.size());
    cell[static_cast<std::size_t>(fold)].sum += label;
    cell[static_cast<std::size_t>(fold)].count += 1.0;
    auto& pt = platform_total_[platform];
    if (pt.empty()) pt.resize(fold_total_.size());
    pt[static_cast<std::size_t>(fold)].sum += label;
    pt[static_cast<std::size_t>(fold)].count += 1.0;
  }

  // Statistics over all folds except `excluded` (pass -1 to keep all).
  SumCount key_stats(int platform, std::int64_t key, int excluded) const {
    auto it = cells_.find({platform, key});
    return it == cells_.end() ? SumCount{} : total(it->second, excluded);
  }

  SumCount platform_stats(int platform, int excluded) const {
    auto it = platform_total_.find(platform);
    return it == platform_total_.end() ? SumCount{} : total(it->second, excluded);
  }

 private:
  static SumCount total(const std::vector<SumCount>& v, int excluded) {
    SumCount s;
    for (std::size_t f = 0; f < v.size(); ++f) {
      if (static_cast<int>(f) == excluded) continue;
      s.sum += v[f].sum;
      s.count += v[f].count;
    }
    return s;
  }

  std::map<Key, std::vector<SumCount>> cells_;
  std::map<int, std::vector<SumCount>> platform_total_;
  std::vector<SumCount> fold_total_;
};

// Fitted, immutable encoder state.
struct FeatureEncoderState {
  FeatureConfig config;
  bool fitted = false;
  std::unordered_map<std::int64_t, int> train_fold;  // post_id -> fold, train posts only
  TargetTable category{5}, location{5};
  std::vector<int> platforms;  // one-hot order
  std::vector<std::string> names;
  std::map<int, std::vector<corpus::Moments>> standardization;  // per platform, per column
};

enum class Field { Category, Location };

// Smoothed mean of train labels for the post's category (or location). Train
// posts see only statistics from the other folds.
inline double target_encode_oof(Field field, const PostRecord& post, const FeatureEncoderState& state) {
  if (!state.fitted) throw DataError("target_encode_oof: encoder state not fitted");
  const auto& table = field == Field::Category ? state.category : state.location;
  const std::int64_t key = field == Field::Category ? post.category_id : post.location_id;
  auto it = state.train_fold.find(post.post_id);
  const int excluded = it == state.train_fold.end() ? -1 : it->second;
  const SumCount prior_sc = table.platform_stats(post.platform_id, excluded);
  const double prior = prior_sc.count > 0 ? prior_sc.sum / prior_sc.count : 0.0;
  const SumCount sc = table.key_stats(post.platform_id, key, excluded);
  const double m = state.config.smoothing;
  if (sc.count + m <= 0.0) return prior;
  return (sc.sum + m * prior) / (sc.count + m);
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

inline std::vector<std::string> context_column_names(const std::vector<int>& platforms) {
  std::vector<std::string> n{"time.hour_sin",       "time.hour_cos",       "time.weekday_sin",
                             "time.weekday_cos",    "user.log_prior_posts", "user.log_posts_30d",
                             "user.log_recent_mean_y", "topic.category_te", "geo.location_te",
                             "hist.mean_log_y_7d",  "hist.mean_log_y_30d"};
  for (int p : platforms) n.push_back("plat.p" + std::to_string(p));
  return n;
}

inline constexpr std::size_t kNumericContextColumns = 11;

// Context vector before standardization.
inline std::vector<double> raw_context(const PostRecord& post, const HistoryIndex& history,
                                       const FeatureEncoderState& state) {
  std::vector<double> v;
  v.reserve(kNumericContextColumns + state.platforms.size());
  for (double x : encode_time_cyclic(post.timestamp)) v.push_back(x);
  for (double x : encode_user_stats(history, post.author_id, post.timestamp)) v.push_back(x);
  v.push_back(target_encode_oof(Field::Category, post, state));
  v.push_back(target_encode_oof(Field::Location, post, state));
  v.push_back(author_window_mean(history, post.author_id, post.timestamp, 7 * kDay));
  v.push_back(author_window_mean(history, post.author_id, post.timestamp, 30 * kDay));
  for (int p : state.platforms) v.push_back(p == post.platform_id ? 1.0 : 0.0);
  return v;
}

inline std::vector<corpus::Moments> fit_column_moments(const std::vector<std::vector<double>>& rows, std::size_t ncols) {
  std::vector<corpus::Moments> out(ncols);
  for (std::size_t c = 0; c < ncols; ++c) {
    std::vector<double> col;
    col.reserve(rows.size());
    for (const auto& r : rows) col.push_back(r[c]);
    const double sd = std::sqrt(variance_of(col));
    out[c] = {mean_of(col), sd > 1e-12 ? sd : 1.0};
  }
  return out;
}

// Fits target tables on train labels and per-platform standardization on the
// train context vectors. `folds`, when given, overrides the hash-based
// assignment (aligned with `train`).
inline FeatureEncoderState fit_feature_encoder(const std::vector<PostRecord>& posts, const std::vector<std::size_t>& train,
                                               const FeatureConfig& cfg = {},
                                               const std::vector<int>* folds = nullptr) {
  cfg.validate();
  if (train.empty()) throw DataError("fit_feature_encoder: empty train split");
  FeatureEncoderState s;
  s.config = cfg;
  s.category = TargetTable(cfg.n_folds);
  s.location = TargetTable(cfg.n_folds);
  for (std::size_t k = 0; k < train.size(); ++k) {
    const auto& p = posts[train[k]];
    const int f = folds ? (*folds)[k] : fold_of(p.post_id, cfg.n_folds);
    if (f < 0 || f >= cfg.n_folds) throw DataError("fold index out of range");
    s.train_fold[p.post_id] = f;
    const double label = corpus::log_transform(p.y);
    s.category.add(p.platform_id, p.category_id, f, label);
    s.location.add(p.platform_id, p.location_id, f, label);
    if (std::find(s.platforms.begin(), s.platforms.end(), p.platform_id) == s.platforms.end())
      s.platforms.push_back(p.platform_id);
  }
  std::sort(s.platforms.begin(), s.platforms.end());
  s.names = context_column_names(s.platforms);
  s.fitted = true;

  const HistoryIndex history(posts);
  std::map<int, std::vector<std::vector<double>>> rows;
  for (std::size_t i : train) rows[posts[i].platform_id].push_back(raw_context(posts[i], history, s));
  for (const auto& [platform, r] : rows) s.standardization[platform] = fit_column_moments(r, kNumericContextColumns);
  return s;
}

// Standardized context vector for one post.
inline std::vector<double> assemble_context(const PostRecord& post, const HistoryIndex& history,
                                            const FeatureEncoderState& state) {
  auto v = raw_context(post, history, state);
  auto it = state.standardization.find(post.platform_id);
  if (it == state.standardization.end())
    throw DataError("assemble_context: platform " + std::to_string(post.platform_id) + " not fitted");
  for (std::size_t c = 0; c < kNumericContextColumns; ++c) v[c] = (v[c] - it->second[c].mean) / it->second[c].std;
  return v;
}

inline FeatureMatrix context_matrix(const std::vector<PostRecord>& posts, const FeatureEncoderState& state) {
  const HistoryIndex history(posts);
  FeatureMatrix m;
  m.names = state.names;
  m.data.reserve(posts.size() * m.names.size());
  for (const auto& p : posts) m.append_row(assemble_context(p, history, state));
  return m;
}

}  // namespace popdecomp::features
