#pragma once

// Canonical post data model, label transforms, chronological splitting and
// popularity-bin weighting.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "popdecomp/common.hpp"

namespace popdecomp::corpus {

struct PostRecord {
  std::int64_t post_id = 0;
  int platform_id = 0;
  std::int64_t author_id = 0;
  std::int64_t category_id = 0;
  std::int64_t location_id = 0;
  std::int64_t timestamp = 1;  // seconds since epoch, UTC
  std::int64_t y = 0;          // engagement count
  bool has_image = false;
  bool has_text = false;
  bool has_video = false;

  bool operator==(const PostRecord&) const = default;
};

inline void validate(const PostRecord& p) {
  if (p.y < 0) throw DataError("post " + std::to_string(p.post_id) + ": negative engagement");
  if (p.timestamp <= 0) throw DataError("post " + std::to_string(p.post_id) + ": timestamp must be positive");
  if (!(p.has_image || p.has_text || p.has_video))
    throw DataError("post " + std::to_string(p.post_id) + ": no modality present");
}

// ---------------------------------------------------------------------------
// Label transform
// ---------------------------------------------------------------------------

// ln(1 + y).
inline double log_transform(std::int64_t y) {
  if (y < 0) throw DataError("log_transform: negative count");
  return std::log1p(static_cast<double>(y));
}

inline double log_transform(double y) {
  if (!(y >= 0.0)) throw DataError("log_transform: negative count");
  return std::log1p(y);
}

inline double inverse_log_transform(double y_tilde) { return std::expm1(y_tilde); }

inline std::vector<double> log_labels(const std::vector<PostRecord>& posts) {
  std::vector<double> out;
  out.reserve(posts.size());
  for (const auto& p : posts) out.push_back(log_transform(p.y));
  return out;
}

// ---------------------------------------------------------------------------
// Chronological split
// ---------------------------------------------------------------------------

enum class Role : std::uint8_t { Train = 0, Val = 1, Test = 2 };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::Train: return "train";
    case Role::Val: return "val";
    case Role::Test: return "test";
  }
  return "?";
}

struct SplitAssignment {
  std::vector<Role> role;  // aligned with the input post order
  // Indices into the input, in chronological order.
  std::vector<std::size_t> train, val, test;

  const std::vector<std::size_t>& indices(Role r) const {
    switch (r) {
      case Role::Train: return train;
      case Role::Val: return val;
      default: return test;
    }
  }
};

// Order posts by (timestamp, post_id).
inline std::vector<std::size_t> chronological_order(const std::vector<PostRecord>& posts) {
  std::vector<std::size_t> order(posts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (posts[a].timestamp != posts[b].timestamp) return posts[a].timestamp < posts[b].timestamp;
    return posts[a].post_id < posts[b].post_id;
  });
  return order;
}

inline SplitAssignment chronological_split(const std::vector<PostRecord>& posts,
                                           std::array<unsigned, 3> ratios = {8, 1, 1}) {
  const std::size_t n = posts.size();
  if (n < 3) throw DataError("chronological_split: need at least 3 posts");
  if (ratios[0] == 0 || ratios[1] == 0 || ratios[2] == 0)
    throw ConfigError("chronological_split: ratios must be positive");

  const std::uint64_t total = std::uint64_t{ratios[0]} + ratios[1] + ratios[2];
  auto boundary = [&](std::uint64_t cum) {
    return static_cast<std::size_t>((n * cum + total / 2) / total);  // rounded
  };
  std::size_t b1 = boundary(ratios[0]);
  std::size_t b2 = boundary(std::uint64_t{ratios[0]} + ratios[1]);
  b1 = std::clamp<std::size_t>(b1, 1, n - 2);
  b2 = std::clamp<std::size_t>(b2, b1 + 1, n - 1);

  const auto order = chronological_order(posts);
  SplitAssignment s;
  s.role.assign(n, Role::Train);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = order[k];
    if (k < b1) {
      s.train.push_back(i);
    } else if (k < b2) {
      s.role[i] = Role::Val;
      s.val.push_back(i);
    } else {
      s.role[i] = Role::Test;
      s.test.push_back(i);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Per-platform label standardization
// ---------------------------------------------------------------------------

struct Moments {
  double mean = 0.0;
  double std = 1.0;

  bool operator==(const Moments&) const = default;
};

class LabelScaler {
 public:
  LabelScaler() = default;

  // Fits mean / population std of y_tilde per platform over the given
  // (train) indices only.
  static LabelScaler fit(const std::vector<PostRecord>& posts, const std::vector<double>& y_tilde,
                         const std::vector<std::size_t>& train) {
    if (posts.size() != y_tilde.size()) throw DataError("fit_scaler: label count mismatch");
    std::map<int, std::vector<double>> by_platform;
    for (std::size_t i : train) by_platform[posts[i].platform_id].push_back(y_tilde[i]);
    LabelScaler s;
    for (const auto& [platform, vals] : by_platform) {
      if (vals.size() < 2)
        throw DataError("fit_scaler: platform " + std::to_string(platform) + " has fewer than 2 train posts");
      const double m = mean_of(vals);
      const double sd = std::sqrt(variance_of(vals));
      if (!(sd > 1e-12))
        throw DataError("fit_scaler: platform " + std::to_string(platform) + " has zero label variance");
      s.stats_[platform] = Moments{m, sd};
    }
    return s;
  }

  double apply(int platform, double y_tilde) const {
    const auto& m = at(platform);
    return (y_tilde - m.mean) / m.std;
  }

  double invert(int platform, double standardized) const {
    const auto& m = at(platform);
    return standardized * m.std + m.mean;
  }

  const Moments& at(int platform) const {
    auto it = stats_.find(platform);
    if (it == stats_.end()) throw DataError("scaler: platform " + std::to_string(platform) + " not fitted");
    return it->second;
  }

  bool has(int platform) const { return stats_.count(platform) != 0; }
  const std::map<int, Moments>& stats() const { return stats_; }
  void set(int platform, Moments m) { stats_[platform] = m; }

  bool operator==(const LabelScaler&) const = default;

 private:
  std::map<int, Moments> stats_;
};

// ---------------------------------------------------------------------------
// Popularity-bin sample weights
// ---------------------------------------------------------------------------

struct BinEdges {
  double low = 0.0;   // upper edge of the low bin (inclusive)
  double high = 0.0;  // upper edge of the mid bin (inclusive)
};

inline constexpr std::array<double, 3> kDefaultBinWeights{1.0, 1.5, 3.0};

// Inverted-CDF quantile: the smallest sample x with F(x) >= num/den.
inline double lower_quantile(std::vector<double> sorted_or_not, std::uint64_t num, std::uint64_t den) {
  if (sorted_or_not.empty()) throw DataError("quantile of empty sample");
  std::sort(sorted_or_not.begin(), sorted_or_not.end());
  const std::uint64_t n = sorted_or_not.size();
  std::uint64_t k = (n * num + den - 1) / den;  // ceil(n * q), 1-based
  k = std::clamp<std::uint64_t>(k, 1, n);
  return sorted_or_not[k - 1];
}

class BinWeights {
 public:
  BinWeights() = default;

  // Tercile edges of train y_tilde per platform.
  static BinWeights fit(const std::vector<PostRecord>& posts, const std::vector<double>& y_tilde,
                        const std::vector<std::size_t>& train,
                        std::array<double, 3> weights = kDefaultBinWeights) {
    std::map<int, std::vector<double>> by_platform;
    for (std::size_t i : train) by_platform[posts[i].platform_id].push_back(y_tilde[i]);
    BinWeights b;
    b.weights_ = weights;
    for (const auto& [platform, vals] : by_platform) b.edges_[platform] = edges_of(vals);
    return b;
  }

  static BinEdges edges_of(const std::vector<double>& vals) {
    return BinEdges{lower_quantile(vals, 1, 3), lower_quantile(vals, 2, 3)};
  }

  // 0 = low, 1 = mid, 2 = high.
  static int bin_of(double y_tilde, const BinEdges& e) {
    if (y_tilde <= e.low) return 0;
    if (y_tilde <= e.high) return 1;
    return 2;
  }

  int bin(int platform, double y_tilde) const { return bin_of(y_tilde, edges(platform)); }

  double weight(int platform, double y_tilde) const {
    return weights_[static_cast<std::size_t>(bin(platform, y_tilde))];
  }

  const BinEdges& edges(int platform) const {
    auto it = edges_.find(platform);
    if (it == edges_.end()) throw DataError("bin weights: platform " + std::to_string(platform) + " not fitted");
    return it->second;
  }

  const std::array<double, 3>& weights() const { return weights_; }

 private:
  std::map<int, BinEdges> edges_;
  std::array<double, 3> weights_ = kDefaultBinWeights;
};

inline double bin_weight(double y_tilde, const BinEdges& edges,
                         const std::array<double, 3>& weights = kDefaultBinWeights) {
  return weights[static_cast<std::size_t>(BinWeights::bin_of(y_tilde, edges))];
}

// ---------------------------------------------------------------------------
// corpus.jsonl
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const PostRecord& p) {
  return nlohmann::json{{"post_id", p.post_id},       {"platform_id", p.platform_id},
                        {"author_id", p.author_id},   {"category_id", p.category_id},
                        {"location_id", p.location_id}, {"timestamp", p.timestamp},
                        {"y", p.y},                   {"has_image", p.has_image},
                        {"has_text", p.has_text},     {"has_video", p.has_video}};
}

inline PostRecord post_from_json(const nlohmann::json& j) {
  try {
    PostRecord p;
    p.post_id = j.at("post_id").get<std::int64_t>();
    p.platform_id = j.at("platform_id").get<int>();
    p.author_id = j.at("author_id").get<std::int64_t>();
    p.category_id = j.at("category_id").get<std::int64_t>();
    p.location_id = j.at("location_id").get<std::int64_t>();
    p.timestamp = j.at("timestamp").get<std::int64_t>();
    p.y = j.at("y").get<std::int64_t>();
    p.has_image = j.at("has_image").get<bool>();
    p.has_text = j.at("has_text").get<bool>();
    p.has_video = j.at("has_video").get<bool>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corpus record: ") + e.what());
  }
}

inline void write_corpus_jsonl(const std::string& path, const std::vector<PostRecord>& posts) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  for (const auto& p : posts) os << to_json(p).dump() << '\n';
  if (!os) throw DataError("write failed: " + path);
}

inline std::vector<PostRecord> read_corpus_jsonl(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  std::vector<PostRecord> posts;
  std::unordered_set<std::int64_t> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    PostRecord p = post_from_json(j);
    validate(p);
    if (!seen.insert(p.post_id).second)
      throw DataError(path + ": duplicate post_id " + std::to_string(p.post_id));
    posts.push_back(p);
  }
  return posts;
}

}  // namespace popdecomp::corpus
