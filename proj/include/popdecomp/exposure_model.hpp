#pragma once

// Exposure estimator: residual targets, gradient-boosted regression trees on a
// weighted Huber objective, early stopping and affine moment calibration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "popdecomp/common.hpp"
#include "popdecomp/context_features.hpp"
#include "popdecomp/corpus.hpp"

namespace popdecomp::exposure {

using features::FeatureMatrix;

// r = y_tilde - de-standardized alpha.
inline std::vector<double> residual_targets(const std::vector<corpus::PostRecord>& posts,
                                            const std::vector<double>& y_tilde, const std::vector<double>& alpha_std,
                                            const corpus::LabelScaler& scaler) {
  if (posts.size() != y_tilde.size() || posts.size() != alpha_std.size())
    throw DataError("residual_targets: size mismatch");
  std::vector<double> r(posts.size());
  for (std::size_t i = 0; i < posts.size(); ++i) r[i] = y_tilde[i] - scaler.invert(posts[i].platform_id, alpha_std[i]);
  if (!all_finite(r)) throw DataError("residual_targets: non-finite residual");
  return r;
}

struct BoostConfig {
  int max_depth = 8;
  double shrinkage = 0.03;
  int max_rounds = 2000;
  int patience = 200;
  double delta = 1.0;  // Huber threshold
  double l2 = 1.0;     // leaf regularization
  double min_child_weight = 1.0;
  double min_split_gain = 1e-12;

  void validate() const {
    if (max_depth < 1 || max_depth > 30) throw ConfigError("boost max_depth must be in [1, 30]");
    if (!(shrinkage > 0.0 && shrinkage <= 1.0)) throw ConfigError("boost shrinkage must be in (0, 1]");
    if (max_rounds < 0) throw ConfigError("boost max_rounds must be >= 0");
    if (patience < 1) throw ConfigError("boost patience must be >= 1");
    if (!(delta > 0.0)) throw ConfigError("boost delta must be > 0");
    if (!(l2 >= 0.0) || !(min_child_weight >= 0.0) || !(min_split_gain >= 0.0))
      throw ConfigError("boost regularization must be >= 0");
  }
};

struct TreeNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0.0;     // x <= threshold goes left
  std::int32_t left = -1;
  std::int32_t right = -1;
  double value = 0.0;

  bool operator==(const TreeNode&) const = default;
};

struct Tree {
  std::vector<TreeNode> nodes;

  double predict(const double* x) const {
    std::int32_t k = 0;
    while (nodes[std::size_t(k)].feature >= 0) {
      const auto& n = nodes[std::size_t(k)];
      k = x[n.feature] <= n.threshold ? n.left : n.right;
    }
    return nodes[std::size_t(k)].value;
  }

  int depth() const {
    std::vector<int> d(nodes.size(), 0);
    int best = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      best = std::max(best, d[k]);
      if (nodes[k].feature >= 0) d[std::size_t(nodes[k].left)] = d[std::size_t(nodes[k].right)] = d[k] + 1;
    }
    return best;
  }

  bool operator==(const Tree&) const = default;
};

struct CalibrationParams {
  double a = 1.0;
  double b = 0.0;

  double apply(double phi) const { return a * phi + b; }
  bool operator==(const CalibrationParams&) const = default;
};

struct BoostedEnsemble {
  std::vector<std::string> feature_names;
  double base = 0.0;
  double shrinkage = 0.03;
  std::vector<Tree> trees;  // already truncated to the best iteration
  int best_iteration = 0;
  std::vector<double> importance;  // total split gain per feature
  CalibrationParams calibration;

  std::size_t n_features() const { return feature_names.size(); }

  double predict_raw(const double* x) const {
    double f = base;
    for (const auto& t : trees) f += shrinkage * t.predict(x);
    return f;
  }

  bool operator==(const BoostedEnsemble&) const = default;
};

struct FitTrace {
  std::vector<double> train_loss;  // index = number of rounds
  std::vector<double> val_loss;
  int rounds_run = 0;
};

inline double huber(double e, double delta) {
  const double a = std::abs(e);
  return a <= delta ? 0.5 * e * e : delta * (a - 0.5 * delta);
}

inline double weighted_huber(const std::vector<double>& r, const std::vector<double>& f, const std::vector<double>& w,
                             double delta) {
  double s = 0.0, ws = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    s += w[i] * huber(r[i] - f[i], delta);
    ws += w[i];
  }
  return ws > 0 ? s / ws : 0.0;
}

// Lower weighted median; when the cumulative weight lands exactly on half,
// the midpoint with the next value.
inline double weighted_median(const std::vector<double>& v, const std::vector<double>& w) {
  if (v.empty()) throw DataError("weighted_median: empty input");
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  double total = 0.0;
  for (double x : w) total += x;
  const double half = 0.5 * total;
  double cum = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    cum += w[order[k]];
    if (cum >= half) {
      if (cum == half && k + 1 < order.size()) return 0.5 * (v[order[k]] + v[order[k + 1]]);
      return v[order[k]];
    }
  }
  return v[order.back()];
}

namespace detail {

inline void check_inputs(const FeatureMatrix& x, const std::vector<double>& r, const std::vector<double>& w,
                         const char* what) {
  if (x.rows != r.size() || x.rows != w.size()) throw DataError(std::string(what) + ": row count mismatch");
  if (!all_finite(x.data)) throw DataError(std::string(what) + ": non-finite feature");
  if (!all_finite(r)) throw DataError(std::string(what) + ": non-finite target");
  for (double v : w)
    if (!(v >= 0.0) || !std::isfinite(v)) throw DataError(std::string(what) + ": invalid sample weight");
}

struct NodeStats {
  double g = 0.0;  // weighted sum of clipped residuals
  double w = 0.0;  // weight sum
};

struct Split {
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
};

// Grows one tree level by level with exact greedy scans over presorted columns.
class TreeGrower {
 public:
  TreeGrower(const FeatureMatrix& x, const BoostConfig& cfg) : x_(x), cfg_(cfg) {
    const std::size_t n = x.rows, nf = x.cols();
    sorted_.resize(nf);
    for (std::size_t f = 0; f < nf; ++f) {
      auto& o = sorted_[f];
      o.resize(n);
      std::iota(o.begin(), o.end(), std::uint32_t{0});
      std::stable_sort(o.begin(), o.end(), [&](std::uint32_t a, std::uint32_t b) { return x.at(a, f) < x.at(b, f); });
    }
  }

  // `grad` holds the clipped residuals; returns the tree and the leaf id per row.
  Tree grow(const std::vector<double>& grad, const std::vector<double>& w, std::vector<double>& importance,
            std::vector<std::int32_t>& leaf_of) {
    const std::size_t n = x_.rows, nf = x_.cols();
    Tree t;
    t.nodes.emplace_back();
    leaf_of.assign(n, 0);
    std::vector<NodeStats> stats(1);
    for (std::size_t i = 0; i < n; ++i) {
      stats[0].g += w[i] * grad[i];
      stats[0].w += w[i];
    }
    std::vector<std::int32_t> frontier{0};
    for (int depth = 0; depth < cfg_.max_depth && !frontier.empty(); ++depth) {
      // Dense slot per frontier node.
      std::vector<std::int32_t> slot(t.nodes.size(), -1);
      for (std::size_t s = 0; s < frontier.size(); ++s) slot[std::size_t(frontier[s])] = std::int32_t(s);
      std::vector<Split> best(frontier.size());
      std::vector<NodeStats> left(frontier.size());
      std::vector<double> last(frontier.size());
      std::vector<char> seen(frontier.size());
      for (std::size_t f = 0; f < nf; ++f) {
        std::fill(left.begin(), left.end(), NodeStats{});
        std::fill(seen.begin(), seen.end(), 0);
        for (std::uint32_t i : sorted_[f]) {
          const std::int32_t s = slot[std::size_t(leaf_of[i])];
          if (s < 0) continue;
          const double xv = x_.at(i, f);
          auto& L = left[std::size_t(s)];
          if (seen[std::size_t(s)] && xv != last[std::size_t(s)]) consider(stats[std::size_t(frontier[std::size_t(s)])], L, f, last[std::size_t(s)], xv, best[std::size_t(s)]);
          L.g += w[i] * grad[i];
          L.w += w[i];
          last[std::size_t(s)] = xv;
          seen[std::size_t(s)] = 1;
        }
      }
      std::vector<std::int32_t> next;
      for (std::size_t s = 0; s < frontier.size(); ++s) {
        const auto& b = best[s];
        if (b.feature < 0 || !(b.gain > cfg_.min_split_gain)) continue;
        const std::int32_t id = frontier[s];
        const auto l = static_cast<std::int32_t>(t.nodes.size());
        t.nodes.emplace_back();
        t.nodes.emplace_back();
        auto& node = t.nodes[std::size_t(id)];
        node.feature = b.feature;
        node.threshold = b.threshold;
        node.left = l;
        node.right = l + 1;
        importance[std::size_t(b.feature)] += b.gain;
        stats.resize(t.nodes.size());
        next.push_back(l);
        next.push_back(l + 1);
      }
      if (next.empty()) break;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& node = t.nodes[std::size_t(leaf_of[i])];
        if (node.feature < 0) continue;
        leaf_of[i] = x_.at(i, std::size_t(node.feature)) <= node.threshold ? node.left : node.right;
        stats[std::size_t(leaf_of[i])].g += w[i] * grad[i];
        stats[std::size_t(leaf_of[i])].w += w[i];
      }
      frontier = std::move(next);
    }
    for (std::size_t k = 0; k < t.nodes.size(); ++k) {
      auto& node = t.nodes[k];
      if (node.feature >= 0) continue;
      const double denom = stats[k].w + cfg_.l2;
      node.value = denom > 0.0 ? stats[k].g / denom : 0.0;
    }
    return t;
  }

 private:
  void consider(const NodeStats& parent, const NodeStats& L, std::size_t f, double lo, double hi, Split& best) const {
    const NodeStats R{parent.g - L.g, parent.w - L.w};
    if (L.w < cfg_.min_child_weight || R.w < cfg_.min_child_weight) return;
    if (L.w + cfg_.l2 <= 0.0 || R.w + cfg_.l2 <= 0.0 || parent.w + cfg_.l2 <= 0.0) return;
    const double gain = L.g * L.g / (L.w + cfg_.l2) + R.g * R.g / (R.w + cfg_.l2) - parent.g * parent.g / (parent.w + cfg_.l2);
    // Strict improvement keeps the lowest column and threshold on ties.
    if (best.feature >= 0 && !(gain > best.gain)) return;
    double thr = 0.5 * (lo + hi);
    if (!(thr < hi)) thr = lo;
    best = {gain, static_cast<int>(f), thr};
  }

  const FeatureMatrix& x_;
  const BoostConfig& cfg_;
  std::vector<std::vector<std::uint32_t>> sorted_;
};

}  // namespace detail

// Fits the ensemble. An empty validation set disables early stopping.
inline BoostedEnsemble fit_exposure(const FeatureMatrix& x_train, const std::vector<double>& r_train,
                                    const std::vector<double>& w_train, const FeatureMatrix& x_val,
                                    const std::vector<double>& r_val, const std::vector<double>& w_val,
                                    const BoostConfig& cfg, FitTrace* trace = nullptr) {
  cfg.validate();
  if (x_train.rows == 0) throw DataError("fit_exposure: empty train split");
  detail::check_inputs(x_train, r_train, w_train, "fit_exposure train");
  detail::check_inputs(x_val, r_val, w_val, "fit_exposure val");
  if (x_val.rows > 0 && x_val.cols() != x_train.cols()) throw DataError("fit_exposure: feature width mismatch");

  BoostedEnsemble m;
  m.feature_names = x_train.names;
  m.shrinkage = cfg.shrinkage;
  m.base = weighted_median(r_train, w_train);
  m.importance.assign(x_train.cols(), 0.0);

  const bool early = x_val.rows > 0;
  std::vector<double> f_train(x_train.rows, m.base), f_val(x_val.rows, m.base);
  std::vector<double> grad(x_train.rows);
  std::vector<std::int32_t> leaf_of;
  FitTrace tr;
  tr.train_loss.push_back(weighted_huber(r_train, f_train, w_train, cfg.delta));
  if (early) tr.val_loss.push_back(weighted_huber(r_val, f_val, w_val, cfg.delta));
  double best_val = early ? tr.val_loss[0] : 0.0;
  int best_round = 0;
  std::vector<std::vector<double>> importance_at;  // importance snapshot per round
  importance_at.push_back(m.importance);

  detail::TreeGrower grower(x_train, cfg);
  for (int round = 1; round <= cfg.max_rounds; ++round) {
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = std::clamp(r_train[i] - f_train[i], -cfg.delta, cfg.delta);
    Tree t = grower.grow(grad, w_train, m.importance, leaf_of);
    for (std::size_t i = 0; i < f_train.size(); ++i) f_train[i] += cfg.shrinkage * t.nodes[std::size_t(leaf_of[i])].value;
    for (std::size_t i = 0; i < f_val.size(); ++i) f_val[i] += cfg.shrinkage * t.predict(x_val.row(i));
    m.trees.push_back(std::move(t));
    importance_at.push_back(m.importance);
    tr.train_loss.push_back(weighted_huber(r_train, f_train, w_train, cfg.delta));
    tr.rounds_run = round;
    if (early) {
      tr.val_loss.push_back(weighted_huber(r_val, f_val, w_val, cfg.delta));
      if (tr.val_loss.back() < best_val) {
        best_val = tr.val_loss.back();
        best_round = round;
      } else if (round - best_round >= cfg.patience) {
        break;
      }
    } else {
      best_round = round;
    }
  }
  m.trees.resize(std::size_t(best_round));
  m.best_iteration = best_round;
  m.importance = importance_at[std::size_t(best_round)];
  if (trace) *trace = std::move(tr);
  return m;
}

inline std::vector<double> predict_phi(const BoostedEnsemble& m, const FeatureMatrix& x) {
  if (x.rows > 0 && x.cols() != m.n_features())
    throw DataError("predict_phi: expected " + std::to_string(m.n_features()) + " features, got " +
                    std::to_string(x.cols()));
  std::vector<double> out(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) out[i] = m.predict_raw(x.row(i));
  return out;
}

// Affine map matching the train mean and (population) variance of r.
inline CalibrationParams calibrate_phi(const std::vector<double>& phi, const std::vector<double>& r) {
  if (phi.size() != r.size() || phi.empty()) throw DataError("calibrate_phi: size mismatch or empty");
  const double sp = std::sqrt(variance_of(phi));
  const double sr = std::sqrt(variance_of(r));
  CalibrationParams c;
  c.a = sp > 0.0 && sr > 0.0 ? sr / sp : 1.0;
  c.b = mean_of(r) - c.a * mean_of(phi);
  return c;
}

inline std::vector<double> apply_calibration(const CalibrationParams& c, const std::vector<double>& phi) {
  std::vector<double> out(phi.size());
  for (std::size_t i = 0; i < phi.size(); ++i) out[i] = c.apply(phi[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline void write_model(std::ostream& os, const BoostedEnsemble& m) {
  bin::put_magic(os, "OTGB");
  bin::put<std::uint16_t>(os, 1);
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.feature_names.size()));
  for (const auto& n : m.feature_names) bin::put_string(os, n);
  bin::put(os, m.base);
  bin::put(os, m.shrinkage);
  bin::put<std::int32_t>(os, m.best_iteration);
  bin::put(os, m.calibration.a);
  bin::put(os, m.calibration.b);
  bin::put_doubles(os, m.importance);
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.trees.size()));
  for (const auto& t : m.trees) {
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.nodes.size()));
    for (const auto& n : t.nodes) {
      bin::put(os, n.feature);
      bin::put(os, n.threshold);
      bin::put(os, n.left);
      bin::put(os, n.right);
      bin::put(os, n.value);
    }
  }
}

inline BoostedEnsemble read_model(std::istream& is) {
  bin::expect_magic(is, "OTGB");
  if (bin::get<std::uint16_t>(is) != 1) throw FormatError("exposure model: unsupported version");
  BoostedEnsemble m;
  const auto nf = bin::get<std::uint32_t>(is);
  if (nf > 1u << 20) throw FormatError("exposure model: feature count out of range");
  for (std::uint32_t k = 0; k < nf; ++k) m.feature_names.push_back(bin::get_string(is));
  m.base = bin::get<double>(is);
  m.shrinkage = bin::get<double>(is);
  m.best_iteration = bin::get<std::int32_t>(is);
  m.calibration.a = bin::get<double>(is);
  m.calibration.b = bin::get<double>(is);
  m.importance = bin::get_doubles(is);
  if (m.importance.size() != nf) throw FormatError("exposure model: importance length mismatch");
  const auto nt = bin::get<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < nt; ++k) {
    Tree t;
    const auto nn = bin::get<std::uint32_t>(is);
    if (nn == 0 || nn > 1u << 24) throw FormatError("exposure model: node count out of range");
    for (std::uint32_t j = 0; j < nn; ++j) {
      TreeNode n;
      n.feature = bin::get<std::int32_t>(is);
      n.threshold = bin::get<double>(is);
      n.left = bin::get<std::int32_t>(is);
      n.right = bin::get<std::int32_t>(is);
      n.value = bin::get<double>(is);
      if (n.feature >= 0 && (std::uint32_t(n.feature) >= nf || n.left <= std::int32_t(j) || n.right <= std::int32_t(j) ||
                             std::uint32_t(n.left) >= nn || std::uint32_t(n.right) >= nn))
        throw FormatError("exposure model: malformed tree");
      t.nodes.push_back(n);
    }
    m.trees.push_back(std::move(t));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("exposure model: trailing bytes");
  return m;
}

inline void write_model(const std::string& path, const BoostedEnsemble& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_model(os, m);
}

inline BoostedEnsemble read_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_model(is);
}

// Features by descending total gain (ties keep column order).
inline void write_importance_csv(std::ostream& os, const BoostedEnsemble& m) {
  std::vector<std::size_t> order(m.n_features());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return m.importance[a] > m.importance[b]; });
  os << "feature,gain\n";
  char buf[64];
  for (std::size_t k : order) {
    std::snprintf(buf, sizeof buf, ",%.17g\n", m.importance[k]);
    os << m.feature_names[k] << buf;
  }
}

}  // namespace popdecomp::exposure
