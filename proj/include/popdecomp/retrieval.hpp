#pragma once

// Past-only exact top-K neighbor search over fused content embeddings, with
// temporal-decay weighting and weighted neighborhood statistics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "popdecomp/common.hpp"
#include "popdecomp/context_features.hpp"
#include "popdecomp/corpus.hpp"

namespace popdecomp::retrieval {

using corpus::PostRecord;

struct RetrievalConfig {
  int k = 10;
  double tau = 86400.0;      // decay constant, seconds
  bool log_payload = false;  // feed log1p(y) instead of raw counts

  void validate() const {
    if (k < 1) throw ConfigError("retrieval k must be >= 1");
    if (!(tau > 0.0)) throw ConfigError("retrieval tau must be > 0");
  }
};

// Immutable per-platform index; rows sorted by (timestamp, post_id).
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;

  // `embeddings` is row-major n x dim, aligned with ids/timestamps/y/a.
  static EmbeddingIndex build(int platform, int dim, const std::vector<std::int64_t>& ids,
                              const std::vector<std::int64_t>& timestamps, const std::vector<double>& embeddings,
                              const std::vector<double>& y, const std::vector<double>& a) {
    const std::size_t n = ids.size();
    if (dim < 1) throw DataError("index: dim must be positive");
    if (timestamps.size() != n || y.size() != n || a.size() != n || embeddings.size() != n * std::size_t(dim))
      throw DataError("index: input size mismatch");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) {
      return timestamps[l] != timestamps[r] ? timestamps[l] < timestamps[r] : ids[l] < ids[r];
    });
    EmbeddingIndex ix;
    ix.platform_ = platform;
    ix.dim_ = dim;
    ix.emb_.resize(n * std::size_t(dim));
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = order[k];
      ix.ids_.push_back(ids[i]);
      ix.ts_.push_back(timestamps[i]);
      ix.y_.push_back(y[i]);
      ix.a_.push_back(a[i]);
      const double* src = embeddings.data() + i * std::size_t(dim);
      double* dst = ix.emb_.data() + k * std::size_t(dim);
      double nrm = 0.0;
      for (int c = 0; c < dim; ++c) nrm += src[c] * src[c];
      nrm = std::sqrt(nrm);
      if (!(nrm > 0.0) || !std::isfinite(nrm)) throw DataError("index: zero or non-finite embedding for post " + std::to_string(ids[i]));
      for (int c = 0; c < dim; ++c) dst[c] = src[c] / nrm;
    }
    for (std::size_t k = 1; k < n; ++k)
      if (ix.ids_[k] == ix.ids_[k - 1] && ix.ts_[k] == ix.ts_[k - 1]) throw DataError("index: duplicate post id");
    return ix;
  }

  int platform() const { return platform_; }
  int dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  std::int64_t id(std::size_t r) const { return ids_[r]; }
  std::int64_t timestamp(std::size_t r) const { return ts_[r]; }
  double payload_y(std::size_t r) const { return y_[r]; }
  double payload_a(std::size_t r) const { return a_[r]; }
  const double* embedding(std::size_t r) const { return emb_.data() + r * std::size_t(dim_); }

  // Number of rows with timestamp < t.
  std::size_t rows_before(std::int64_t t) const {
    return static_cast<std::size_t>(std::lower_bound(ts_.begin(), ts_.end(), t) - ts_.begin());
  }

  bool operator==(const EmbeddingIndex&) const = default;

  void write(std::ostream& os) const {
    bin::put_magic(os, "OTIX");
    bin::put<std::uint16_t>(os, 1);
    bin::put<std::int32_t>(os, platform_);
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(dim_));
    bin::put<std::uint64_t>(os, ids_.size());
    for (std::size_t r = 0; r < size(); ++r) {
      bin::put(os, ids_[r]);
      bin::put(os, ts_[r]);
      bin::put(os, y_[r]);
      bin::put(os, a_[r]);
    }
    os.write(reinterpret_cast<const char*>(emb_.data()), static_cast<std::streamsize>(emb_.size() * sizeof(double)));
  }

  static EmbeddingIndex read(std::istream& is) {
    bin::expect_magic(is, "OTIX");
    if (bin::get<std::uint16_t>(is) != 1) throw FormatError("index: unsupported version");
    EmbeddingIndex ix;
    ix.platform_ = bin::get<std::int32_t>(is);
    ix.dim_ = static_cast<int>(bin::get<std::uint32_t>(is));
    const auto n = bin::get<std::uint64_t>(is);
    if (ix.dim_ < 1 || ix.dim_ > 65536 || n > (1ull << 32)) throw FormatError("index: header out of range");
    for (std::uint64_t r = 0; r < n; ++r) {
      ix.ids_.push_back(bin::get<std::int64_t>(is));
      ix.ts_.push_back(bin::get<std::int64_t>(is));
      ix.y_.push_back(bin::get<double>(is));
      ix.a_.push_back(bin::get<double>(is));
    }
    ix.emb_.resize(n * std::size_t(ix.dim_));
    if (!ix.emb_.empty() &&
        !is.read(reinterpret_cast<char*>(ix.emb_.data()), static_cast<std::streamsize>(ix.emb_.size() * sizeof(double))))
      throw FormatError("index: truncated embedding block");
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("index: trailing bytes");
    return ix;
  }

 private:
  int platform_ = 0;
  int dim_ = 0;
  std::vector<std::int64_t> ids_, ts_;
  std::vector<double> y_, a_, emb_;
};

struct Neighbor {
  std::size_t row = 0;
  std::int64_t post_id = 0;
  double similarity = 0.0;
  double dt = 0.0;  // seconds, > 0
  double y = 0.0;
  double a = 0.0;
};

// Ranking order: higher similarity, then earlier row (earlier timestamp,
// then smaller post id).
inline bool ranks_before(double s1, std::size_t r1, double s2, std::size_t r2) {
  return s1 != s2 ? s1 > s2 : r1 < r2;
}

// Exact top-K among rows with timestamp strictly before t_query.
inline std::vector<Neighbor> query_past_topk(const EmbeddingIndex& ix, const double* query, std::int64_t t_query,
                                             int k = 10) {
  const std::size_t past = ix.rows_before(t_query);
  const std::size_t want = std::min<std::size_t>(past, static_cast<std::size_t>(std::max(k, 0)));
  std::vector<std::pair<double, std::size_t>> heap;  // worst kept candidate on top
  heap.reserve(want + 1);
  auto worse = [](const std::pair<double, std::size_t>& l, const std::pair<double, std::size_t>& r) {
    return ranks_before(l.first, l.second, r.first, r.second);
  };
  const int d = ix.dim();
  for (std::size_t r = 0; r < past && want > 0; ++r) {
    const double* e = ix.embedding(r);
    double s = 0.0;
    for (int c = 0; c < d; ++c) s += e[c] * query[c];
    if (heap.size() < want) {
      heap.emplace_back(s, r);
      std::push_heap(heap.begin(), heap.end(), worse);
    } else if (ranks_before(s, r, heap.front().first, heap.front().second)) {
      std::pop_heap(heap.begin(), heap.end(), worse);
      heap.back() = {s, r};
      std::push_heap(heap.begin(), heap.end(), worse);
    }
  }
  std::sort(heap.begin(), heap.end(), worse);
  std::vector<Neighbor> out;
  out.reserve(heap.size());
  for (const auto& [s, r] : heap)
    out.push_back({r, ix.id(r), s, static_cast<double>(t_query - ix.timestamp(r)), ix.payload_y(r), ix.payload_a(r)});
  return out;
}

inline std::vector<Neighbor> query_past_topk(const EmbeddingIndex& ix, const std::vector<double>& query,
                                             std::int64_t t_query, int k = 10) {
  if (query.size() != static_cast<std::size_t>(ix.dim())) throw DataError("query dimension mismatch");
  return query_past_topk(ix, query.data(), t_query, k);
}

inline std::vector<double> neighbor_weights(const std::vector<Neighbor>& nb, double tau = 86400.0) {
  if (nb.empty()) throw DataError("neighbor_weights: empty neighbor list");
  double smax = nb.front().similarity;
  for (const auto& n : nb) smax = std::max(smax, n.similarity);
  std::vector<double> w;
  w.reserve(nb.size());
  double total = 0.0;
  for (const auto& n : nb) {
    w.push_back(std::exp(-n.dt / tau) * std::exp(n.similarity - smax));
    total += w.back();
  }
  if (!(total > 0.0)) {
    // Every neighbor decayed to zero; fall back to the similarity factor alone.
    total = 0.0;
    for (std::size_t j = 0; j < nb.size(); ++j) total += (w[j] = std::exp(nb[j].similarity - smax));
  }
  for (double& x : w) x /= total;
  return w;
}

inline constexpr std::size_t kNumStats = 6;
using NeighborStats = std::array<double, kNumStats>;

inline const std::array<std::string, kNumStats + 1> kNeighborColumns{
    "nbr.mean_y", "nbr.var_y", "nbr.mean_a", "nbr.var_a", "nbr.mean_dt", "nbr.var_dt", "nbr.has_neighbors"};

inline std::pair<double, double> weighted_moments(const std::vector<double>& v, const std::vector<double>& w) {
  double m = 0.0;
  for (std::size_t j = 0; j < v.size(); ++j) m += w[j] * v[j];
  double var = 0.0;
  for (std::size_t j = 0; j < v.size(); ++j) var += w[j] * (v[j] - m) * (v[j] - m);
  return {m, var};
}

inline NeighborStats neighbor_stats(const std::vector<Neighbor>& nb, const std::vector<double>& w) {
  if (nb.size() != w.size()) throw DataError("neighbor_stats: weight count mismatch");
  if (nb.empty()) return NeighborStats{};
  std::vector<double> ys, as, dts;
  for (const auto& n : nb) {
    ys.push_back(n.y);
    as.push_back(n.a);
    dts.push_back(n.dt);
  }
  const auto [my, vy] = weighted_moments(ys, w);
  const auto [ma, va] = weighted_moments(as, w);
  const auto [mt, vt] = weighted_moments(dts, w);
  return {my, vy, ma, va, mt, vt};
}

// Per-platform standardization of the statistics, fit on train posts that
// have at least one neighbor.
struct StatsStandardizer {
  std::map<int, std::array<corpus::Moments, kNumStats>> moments;

  static StatsStandardizer fit(const std::map<int, std::vector<NeighborStats>>& train_stats) {
    StatsStandardizer s;
    for (const auto& [platform, rows] : train_stats) {
      std::array<corpus::Moments, kNumStats> m{};
      for (std::size_t c = 0; c < kNumStats; ++c) {
        std::vector<double> col;
        for (const auto& r : rows) col.push_back(r[c]);
        const double sd = std::sqrt(variance_of(col));
        m[c] = {mean_of(col), sd > 1e-12 ? sd : 1.0};
      }
      s.moments[platform] = m;
    }
    return s;
  }

  bool operator==(const StatsStandardizer&) const = default;
};

// x_bar = [x_ctx ; standardized stats ; has_neighbors].
inline std::vector<double> augment_context(const std::vector<double>& x_ctx, const NeighborStats& stats,
                                           bool has_neighbors, const StatsStandardizer& st, int platform) {
  std::vector<double> out(x_ctx);
  if (!has_neighbors) {
    out.insert(out.end(), kNumStats + 1, 0.0);
    return out;
  }
  auto it = st.moments.find(platform);
  for (std::size_t c = 0; c < kNumStats; ++c) {
    const corpus::Moments m = it == st.moments.end() ? corpus::Moments{} : it->second[c];
    out.push_back((stats[c] - m.mean) / m.std);
  }
  out.push_back(1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Corpus-level helpers
// ---------------------------------------------------------------------------

// Neighbor payload a_j: author's mean engagement over the trailing posts.
inline std::vector<double> author_payload(const std::vector<PostRecord>& posts) {
  const features::HistoryIndex h(posts);
  std::vector<double> a;
  a.reserve(posts.size());
  for (const auto& p : posts) a.push_back(features::author_recent_mean(h, p.author_id, p.timestamp));
  return a;
}

struct NeighborBlock {
  std::vector<NeighborStats> stats;  // aligned with posts
  std::vector<bool> has;
  std::vector<std::vector<Neighbor>> neighbors;
  std::vector<std::vector<double>> weights;
};

// Queries every post against its platform's index. `z` is row-major n x dim,
// aligned with posts; rows whose `usable` flag is false are neither indexed
// nor queried.
inline std::map<int, EmbeddingIndex> build_indices(const std::vector<PostRecord>& posts, const std::vector<double>& z,
                                                   int dim, const RetrievalConfig& cfg,
                                                   const std::vector<bool>* usable = nullptr) {
  const auto a = author_payload(posts);
  std::map<int, std::vector<std::size_t>> by_platform;
  for (std::size_t i = 0; i < posts.size(); ++i)
    if (!usable || (*usable)[i]) by_platform[posts[i].platform_id].push_back(i);
  std::map<int, EmbeddingIndex> out;
  for (const auto& [platform, idx] : by_platform) {
    std::vector<std::int64_t> ids, ts;
    std::vector<double> emb, ys, as;
    for (std::size_t i : idx) {
      ids.push_back(posts[i].post_id);
      ts.push_back(posts[i].timestamp);
      ys.push_back(cfg.log_payload ? corpus::log_transform(posts[i].y) : static_cast<double>(posts[i].y));
      as.push_back(cfg.log_payload ? std::log1p(a[i]) : a[i]);
      emb.insert(emb.end(), z.begin() + std::ptrdiff_t(i * std::size_t(dim)),
                 z.begin() + std::ptrdiff_t((i + 1) * std::size_t(dim)));
    }
    out.emplace(platform, EmbeddingIndex::build(platform, dim, ids, ts, emb, ys, as));
  }
  return out;
}

inline NeighborBlock query_all(const std::vector<PostRecord>& posts, const std::vector<double>& z, int dim,
                               const std::map<int, EmbeddingIndex>& indices, const RetrievalConfig& cfg,
                               const std::vector<bool>* usable = nullptr) {
  NeighborBlock b;
  b.stats.resize(posts.size());
  b.has.assign(posts.size(), false);
  b.neighbors.resize(posts.size());
  b.weights.resize(posts.size());
  std::vector<double> q(static_cast<std::size_t>(dim));
  for (std::size_t i = 0; i < posts.size(); ++i) {
    if (usable && !(*usable)[i]) continue;
    auto it = indices.find(posts[i].platform_id);
    if (it == indices.end()) continue;
    double nrm = 0.0;
    for (int c = 0; c < dim; ++c) nrm += z[i * std::size_t(dim) + std::size_t(c)] * z[i * std::size_t(dim) + std::size_t(c)];
    nrm = std::sqrt(nrm);
    if (!(nrm > 0.0)) continue;
    for (int c = 0; c < dim; ++c) q[std::size_t(c)] = z[i * std::size_t(dim) + std::size_t(c)] / nrm;
    auto nb = query_past_topk(it->second, q.data(), posts[i].timestamp, cfg.k);
    if (nb.empty()) continue;
    auto w = neighbor_weights(nb, cfg.tau);
    b.stats[i] = neighbor_stats(nb, w);
    b.has[i] = true;
    b.neighbors[i] = std::move(nb);
    b.weights[i] = std::move(w);
  }
  return b;
}

inline StatsStandardizer fit_stats_standardizer(const std::vector<PostRecord>& posts, const NeighborBlock& b,
                                                const std::vector<std::size_t>& train) {
  std::map<int, std::vector<NeighborStats>> rows;
  for (std::size_t i : train)
    if (b.has[i]) rows[posts[i].platform_id].push_back(b.stats[i]);
  return StatsStandardizer::fit(rows);
}

// Appends the standardized neighbor block to every row of `ctx`.
inline features::FeatureMatrix augment_matrix(const features::FeatureMatrix& ctx, const std::vector<PostRecord>& posts,
                                              const NeighborBlock& b, const StatsStandardizer& st) {
  features::FeatureMatrix out;
  out.names = ctx.names;
  out.names.insert(out.names.end(), kNeighborColumns.begin(), kNeighborColumns.end());
  for (std::size_t i = 0; i < ctx.rows; ++i) {
    std::vector<double> x(ctx.row(i), ctx.row(i) + ctx.cols());
    out.append_row(augment_context(x, b.stats[i], b.has[i], st, posts[i].platform_id));
  }
  return out;
}

// One line per (query, neighbor).
inline void write_query_csv(std::ostream& os, const std::vector<PostRecord>& posts, const NeighborBlock& b) {
  os << "query_post_id,rank,neighbor_post_id,similarity,dt,weight,y,a\n";
  char buf[256];
  for (std::size_t i = 0; i < posts.size(); ++i) {
    for (std::size_t j = 0; j < b.neighbors[i].size(); ++j) {
      const auto& n = b.neighbors[i][j];
      std::snprintf(buf, sizeof buf, "%lld,%zu,%lld,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                    static_cast<long long>(posts[i].post_id), j + 1, static_cast<long long>(n.post_id), n.similarity,
                    n.dt, b.weights[i][j], n.y, n.a);
      os << buf;
    }
  }
}

}  // namespace popdecomp::retrieval
