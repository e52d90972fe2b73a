#pragma once

// Cross-platform attractiveness estimator.
//
// Per-modality embeddings are projected to a shared space, refined by a
// single-head cross-attention block applied image<-text, text<-image and
// video<-text (one token per modality, residual connection), fused by a
// sigmoid gate and mapped to a scalar by a one-hidden-layer GELU MLP.
// Training minimizes a weighted sum of a weighted Huber loss, a pairwise
// margin ranking loss, a symmetric image/text contrastive loss and a batch
// mean-centering penalty. All gradients are derived by hand; grad_check
// verifies them against central finite differences.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "popdecomp/common.hpp"
#include "popdecomp/corpus.hpp"
#include "popdecomp/synthgen.hpp"

namespace popdecomp::content {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using synthgen::kNumModalities;

struct ModelConfig {
  std::array<int, 3> input_dim{32, 32, 32};
  int dim = 32;        // shared space
  int hidden = 32;     // MLP hidden width
  int align_dim = 16;  // contrastive projection width

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  int epochs = 5;
  double learning_rate = 2e-4;
  double weight_decay = 1e-2;
  int batch_size = 256;
  double huber_delta = 1.0;
  double margin = 0.1;
  double temperature = 0.07;
  double lambda_huber = 1.0;
  double lambda_pair = 0.5;
  double lambda_align = 0.1;
  double lambda_mu = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("learning rate and weight decay must be >= 0");
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    if (!(huber_delta > 0.0)) throw ConfigError("huber delta must be > 0");
    if (!(margin >= 0.0)) throw ConfigError("margin must be >= 0");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (lambda_huber < 0 || lambda_pair < 0 || lambda_align < 0 || lambda_mu < 0)
      throw ConfigError("loss weights must be >= 0");
  }

  bool operator==(const TrainConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

enum Block : int {
  kProjImage, kProjText, kProjVideo,
  kProjBiasImage, kProjBiasText, kProjBiasVideo,
  kQuery, kKey, kValue, kOutput,
  kGateW, kGateB, kFuseW, kFuseB,
  kHiddenW, kHiddenB, kHeadW, kHeadB,
  kAlignImage, kAlignText,
  kNumBlocks
};

inline constexpr std::array<const char*, kNumBlocks> kBlockNames{
    "proj.image", "proj.text", "proj.video",
    "proj_bias.image", "proj_bias.text", "proj_bias.video",
    "attn.query", "attn.key", "attn.value", "attn.output",
    "gate.weight", "gate.bias", "fuse.weight", "fuse.bias",
    "mlp.hidden.weight", "mlp.hidden.bias", "mlp.head.weight", "mlp.head.bias",
    "align.image", "align.text"};

struct ContentModelParams {
  ModelConfig config;
  std::array<Mat, kNumBlocks> blocks;

  Mat& operator[](int b) { return blocks[static_cast<std::size_t>(b)]; }
  const Mat& operator[](int b) const { return blocks[static_cast<std::size_t>(b)]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += static_cast<std::size_t>(b.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& b : blocks)
      if (!b.allFinite()) return false;
    return true;
  }

  bool operator==(const ContentModelParams& o) const {
    if (!(config == o.config)) return false;
    for (int b = 0; b < kNumBlocks; ++b) {
      const auto& x = blocks[static_cast<std::size_t>(b)];
      const auto& y = o.blocks[static_cast<std::size_t>(b)];
      if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
      if (x.size() && std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) != 0)
        return false;
    }
    return true;
  }
};

inline std::array<std::pair<Eigen::Index, Eigen::Index>, kNumBlocks> block_shapes(const ModelConfig& c) {
  const Eigen::Index d = c.dim, h = c.hidden, a = c.align_dim;
  return {{{d, c.input_dim[0]}, {d, c.input_dim[1]}, {d, c.input_dim[2]},
           {d, 1}, {d, 1}, {d, 1},
           {d, d}, {d, d}, {d, d}, {d, d},
           {d, 3 * d}, {d, 1}, {d, 3 * d}, {d, 1},
           {h, d}, {h, 1}, {1, h}, {1, 1},
           {a, d}, {a, d}}};
}

inline ContentModelParams zero_params(const ModelConfig& c) {
  ContentModelParams p;
  p.config = c;
  const auto shapes = block_shapes(c);
  for (int b = 0; b < kNumBlocks; ++b) p[b] = Mat::Zero(shapes[static_cast<std::size_t>(b)].first, shapes[static_cast<std::size_t>(b)].second);
  return p;
}

// Xavier-normal weights, zero biases.
inline ContentModelParams init_params(const ModelConfig& c, std::uint64_t seed) {
  if (c.dim < 1 || c.hidden < 1 || c.align_dim < 1) throw ConfigError("model dimensions must be positive");
  for (int d : c.input_dim)
    if (d < 1) throw ConfigError("input dimensions must be positive");
  auto p = zero_params(c);
  Rng rng(mix_seed(seed, 0xC0DE));
  for (int b = 0; b < kNumBlocks; ++b) {
    const bool is_bias = b == kProjBiasImage || b == kProjBiasText || b == kProjBiasVideo || b == kGateB ||
                         b == kFuseB || b == kHiddenB || b == kHeadB;
    if (is_bias) continue;
    Mat& m = p[b];
    const double sd = std::sqrt(2.0 / static_cast<double>(m.rows() + m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = sd * rng.normal();
  }
  return p;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

// Column b of every matrix is sample b.
struct Batch {
  std::array<Mat, 3> x;     // input_dim[m] x B, zero columns where absent
  std::array<Vec, 3> mask;  // 1 = present
  Vec target;               // standardized y_tilde
  Vec weight;
  std::vector<int> platform;
  std::uint64_t pair_seed = 0;

  Eigen::Index size() const { return target.size(); }
};

// One post's content inputs, ready to be stacked into batches.
struct Sample {
  std::array<std::vector<double>, 3> x;
  std::array<bool, 3> present{};
  double target = 0.0;
  double weight = 1.0;
  int platform = 0;
};

inline Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx,
                        const std::array<int, 3>& input_dim, std::uint64_t pair_seed = 0) {
  const auto n = static_cast<Eigen::Index>(idx.size());
  Batch b;
  for (int m = 0; m < kNumModalities; ++m) {
    b.x[m] = Mat::Zero(input_dim[m], n);
    b.mask[m] = Vec::Zero(n);
  }
  b.target.resize(n);
  b.weight.resize(n);
  b.platform.resize(idx.size());
  for (Eigen::Index c = 0; c < n; ++c) {
    const Sample& s = samples[idx[static_cast<std::size_t>(c)]];
    for (int m = 0; m < kNumModalities; ++m) {
      if (!s.present[m]) continue;
      if (static_cast<int>(s.x[m].size()) != input_dim[m]) throw DataError("sample embedding dimension mismatch");
      b.mask[m](c) = 1.0;
      for (int r = 0; r < input_dim[m]; ++r) b.x[m](r, c) = s.x[m][static_cast<std::size_t>(r)];
    }
    b.target(c) = s.target;
    b.weight(c) = s.weight;
    b.platform[static_cast<std::size_t>(c)] = s.platform;
  }
  b.pair_seed = pair_seed;
  return b;
}

// Builds samples for the given post indices. Targets are standardized per
// platform; weights come from the popularity bins of the raw y_tilde.
inline std::vector<Sample> make_samples(const synthgen::Dataset& data, const std::vector<double>& y_tilde,
                                        const corpus::LabelScaler* scaler, const corpus::BinWeights* bins,
                                        const std::vector<std::size_t>& indices,
                                        std::array<bool, 3> keep_modality = {true, true, true}) {
  std::vector<Sample> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    Sample s;
    const auto& post = data.posts[i];
    s.platform = post.platform_id;
    for (int m = 0; m < kNumModalities; ++m) {
      s.present[m] = keep_modality[m] && data.embeddings.has(m, i);
      if (!s.present[m]) continue;
      const float* row = data.embeddings.row(m, i);
      s.x[m].assign(row, row + data.embeddings.dim[m]);
    }
    if (!(s.present[0] || s.present[1] || s.present[2]))
      throw DataError("post " + std::to_string(post.post_id) + ": every modality is masked");
    const double yt = y_tilde.empty() ? 0.0 : y_tilde[i];
    s.target = scaler ? scaler->apply(post.platform_id, yt) : yt;
    s.weight = bins ? bins->weight(post.platform_id, yt) : 1.0;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// Attention directions: (query modality, key/value modality).
inline constexpr std::array<std::pair<int, int>, 3> kAttentionPairs{{{0, 1}, {1, 0}, {2, 1}}};

struct AttentionCache {
  Mat q, k, v;  // projections of query tokens / key tokens
  Vec attn;     // softmax weight of the single key token (0 when masked)
  Mat context;  // attn-weighted values, before the output projection
};

struct ForwardCache {
  std::array<Mat, 3> projected;  // masked shared-space tokens
  std::array<AttentionCache, 3> attention;
  std::array<Mat, 3> attended;   // V~, T~, S~ (masked)
  Mat u;                         // 3d x B
  Mat gate_pre, gate, fuse;      // d x B
  Mat z;                         // fused representation
  Mat hidden_pre, hidden;
  Vec alpha;
};

struct EncodedFeatures {
  Mat image, text, video;  // d x B, zero columns for absent modalities
};

namespace detail {

inline Mat masked(Mat m, const Vec& mask) {
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    if (mask(c) == 0.0) m.col(c).setZero();
  return m;
}

inline void check_batch(const ContentModelParams& p, const Batch& b) {
  const auto n = b.size();
  if (n == 0) throw DataError("empty batch");
  for (int m = 0; m < kNumModalities; ++m) {
    if (b.x[m].rows() != p.config.input_dim[m] || b.x[m].cols() != n || b.mask[m].size() != n)
      throw DataError("batch shape does not match model configuration");
  }
  for (Eigen::Index c = 0; c < n; ++c)
    if (b.mask[0](c) == 0.0 && b.mask[1](c) == 0.0 && b.mask[2](c) == 0.0)
      throw DataError("sample with every modality absent");
}

}  // namespace detail

inline ForwardCache forward(const ContentModelParams& p, const Batch& b) {
  detail::check_batch(p, b);
  const auto n = b.size();
  const auto d = p.config.dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  ForwardCache f;
  for (int m = 0; m < kNumModalities; ++m) {
    Mat pre = p[kProjImage + m] * b.x[m];
    pre.colwise() += p[kProjBiasImage + m].col(0);
    f.projected[m] = detail::masked(std::move(pre), b.mask[m]);
  }
  for (std::size_t a = 0; a < kAttentionPairs.size(); ++a) {
    const auto [qm, km] = kAttentionPairs[a];
    auto& ac = f.attention[a];
    ac.q = p[kQuery] * f.projected[qm];
    ac.k = p[kKey] * f.projected[km];
    ac.v = p[kValue] * f.projected[km];
    ac.attn = Vec::Zero(n);
    ac.context = Mat::Zero(d, n);
    for (Eigen::Index c = 0; c < n; ++c) {
      if (b.mask[km](c) == 0.0) continue;  // no key tokens
      // Softmax over the key tokens of this sample (a single token here).
      const double score = scale * ac.q.col(c).dot(ac.k.col(c));
      const double w = std::exp(score - score);
      ac.attn(c) = w / w;
      ac.context.col(c) = ac.attn(c) * ac.v.col(c);
    }
    Mat out = f.projected[qm] + p[kOutput] * ac.context;
    f.attended[qm] = detail::masked(std::move(out), b.mask[qm]);
  }
  f.u.resize(3 * d, n);
  for (int m = 0; m < kNumModalities; ++m) f.u.middleRows(m * d, d) = f.attended[m];

  f.gate_pre = p[kGateW] * f.u;
  f.gate_pre.colwise() += p[kGateB].col(0);
  f.gate = f.gate_pre.unaryExpr([](double x) { return sigmoid(x); });
  f.fuse = p[kFuseW] * f.u;
  f.fuse.colwise() += p[kFuseB].col(0);
  f.z = f.gate.cwiseProduct(f.fuse);

  f.hidden_pre = p[kHiddenW] * f.z;
  f.hidden_pre.colwise() += p[kHiddenB].col(0);
  f.hidden = f.hidden_pre.unaryExpr([](double x) { return gelu(x); });
  Mat out = p[kHeadW] * f.hidden;
  f.alpha = out.row(0).transpose().array() + p[kHeadB](0, 0);
  return f;
}

inline EncodedFeatures cross_modal_encode(const Batch& b, const ContentModelParams& p) {
  auto f = forward(p, b);
  return {std::move(f.attended[0]), std::move(f.attended[1]), std::move(f.attended[2])};
}

// z = sigmoid(W_g u + b_g) * (W_z u + b_z), for u of length 3d.
inline Vec gated_fusion(const Vec& u, const ContentModelParams& p) {
  if (u.size() != 3 * p.config.dim) throw DataError("gated_fusion: u must have length 3d");
  Vec g = (p[kGateW] * u + p[kGateB].col(0)).unaryExpr([](double x) { return sigmoid(x); });
  Vec h = p[kFuseW] * u + p[kFuseB].col(0);
  return g.cwiseProduct(h);
}

inline Vec forward_alpha(const Batch& b, const ContentModelParams& p) { return forward(p, b).alpha; }

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double huber = 0.0;
  double pair = 0.0;
  double align = 0.0;
  double mu = 0.0;
  double total = 0.0;
};

inline double huber(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

// d huber / d r; the quadratic branch owns the boundary.
inline double huber_grad(double r, double delta) {
  return std::abs(r) <= delta ? r : (r > 0 ? delta : -delta);
}

// (high, low) index pairs from the top and bottom terciles of the batch by
// target. Exhaustive when at most B pairs exist, otherwise B pairs drawn
// without replacement from a seeded stream.
inline std::vector<std::pair<Eigen::Index, Eigen::Index>> ranking_pairs(const Vec& target, std::uint64_t seed) {
  const auto n = target.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return target(a) < target(b); });
  const auto t = static_cast<std::size_t>(n / 3);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> all;
  for (std::size_t h = order.size() - t; h < order.size(); ++h)
    for (std::size_t l = 0; l < t; ++l)
      if (target(order[h]) > target(order[l])) all.emplace_back(order[h], order[l]);
  const auto budget = static_cast<std::size_t>(n);
  if (all.size() <= budget) return all;
  // Floyd's sampling of `budget` distinct positions.
  Rng rng(mix_seed(seed, 0x9a1e));
  std::vector<std::size_t> chosen;
  chosen.reserve(budget);
  std::vector<bool> taken(all.size(), false);
  for (std::size_t j = all.size() - budget; j < all.size(); ++j) {
    const auto r = static_cast<std::size_t>(rng.below(j + 1));
    const std::size_t pick = taken[r] ? j : r;
    taken[pick] = true;
  }
  std::vector<std::pair<Eigen::Index, Eigen::Index>> out;
  out.reserve(budget);
  for (std::size_t k = 0; k < all.size(); ++k)
    if (taken[k]) out.push_back(all[k]);
  return out;
}

// Samples whose image and text are both present.
inline std::vector<Eigen::Index> aligned_samples(const Batch& b) {
  std::vector<Eigen::Index> s;
  for (Eigen::Index c = 0; c < b.size(); ++c)
    if (b.mask[0](c) != 0.0 && b.mask[1](c) != 0.0) s.push_back(c);
  return s;
}

namespace detail {

inline Mat normalize_columns(const Mat& f, Vec& norms) {
  norms.resize(f.cols());
  Mat h(f.rows(), f.cols());
  for (Eigen::Index c = 0; c < f.cols(); ++c) {
    norms(c) = std::max(f.col(c).norm(), 1e-12);
    h.col(c) = f.col(c) / norms(c);
  }
  return h;
}

inline Mat normalize_backward(const Mat& h, const Vec& norms, const Mat& dh) {
  Mat df(h.rows(), h.cols());
  for (Eigen::Index c = 0; c < h.cols(); ++c)
    df.col(c) = (dh.col(c) - h.col(c) * h.col(c).dot(dh.col(c))) / norms(c);
  return df;
}

inline Vec row_logsumexp(const Mat& x) {
  Vec out(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out(r) = m + std::log((x.row(r).array() - m).exp().sum());
  }
  return out;
}

}  // namespace detail

// Symmetric normalized-temperature cross-entropy between paired projections
// (columns of h_img and h_txt are already unit length). Returns the loss and,
// optionally, gradients with respect to both inputs.
inline double symmetric_nce(const Mat& h_img, const Mat& h_txt, double tau, Mat* d_img = nullptr,
                            Mat* d_txt = nullptr) {
  const auto n = h_img.cols();
  const Mat logits = h_img.transpose() * h_txt / tau;  // n x n
  const Vec lse_rows = detail::row_logsumexp(logits);
  const Mat lt = logits.transpose();
  const Vec lse_cols = detail::row_logsumexp(lt);
  double img_to_txt = 0.0, txt_to_img = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    img_to_txt += lse_rows(i) - logits(i, i);
    txt_to_img += lse_cols(i) - logits(i, i);
  }
  const double nn = static_cast<double>(n);
  const double loss = 0.5 * (img_to_txt / nn + txt_to_img / nn);
  if (d_img || d_txt) {
    Mat dl(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        const double p_row = std::exp(logits(i, j) - lse_rows(i));
        const double p_col = std::exp(logits(i, j) - lse_cols(j));
        const double eye = i == j ? 1.0 : 0.0;
        dl(i, j) = 0.5 / nn * ((p_row - eye) + (p_col - eye));
      }
    if (d_img) *d_img = h_txt * dl.transpose() / tau;
    if (d_txt) *d_txt = h_img * dl / tau;
  }
  return loss;
}

// Loss components for a forward pass. When d_alpha / d_attended are given,
// accumulates dL_total / d alpha and dL_total / d attended tokens, and the
// alignment-projection gradients into grads.
inline LossBreakdown content_losses(const ContentModelParams& p, const ForwardCache& f, const Batch& b,
                                    const TrainConfig& cfg, Vec* d_alpha = nullptr,
                                    std::array<Mat, 3>* d_attended = nullptr,
                                    std::array<Mat, kNumBlocks>* grads = nullptr) {
  const auto n = b.size();
  if (n == 0) throw DataError("content_losses: empty batch");
  const double nn = static_cast<double>(n);
  LossBreakdown L;
  Vec da = Vec::Zero(n);

  for (Eigen::Index i = 0; i < n; ++i) {
    const double r = f.alpha(i) - b.target(i);
    L.huber += b.weight(i) * huber(r, cfg.huber_delta);
    da(i) += cfg.lambda_huber * b.weight(i) * huber_grad(r, cfg.huber_delta) / nn;
  }
  L.huber /= nn;

  const auto pairs = ranking_pairs(b.target, b.pair_seed);
  if (!pairs.empty()) {
    const double np = static_cast<double>(pairs.size());
    for (const auto& [hi, lo] : pairs) {
      const double slack = cfg.margin - (f.alpha(hi) - f.alpha(lo));
      if (slack > 0.0) {
        L.pair += slack;
        da(hi) -= cfg.lambda_pair / np;
        da(lo) += cfg.lambda_pair / np;
      }
    }
    L.pair /= np;
  }

  const double mean_alpha = f.alpha.mean();
  L.mu = std::abs(mean_alpha);
  const double sgn = mean_alpha > 0 ? 1.0 : (mean_alpha < 0 ? -1.0 : 0.0);
  da.array() += cfg.lambda_mu * sgn / nn;

  const auto both = aligned_samples(b);
  if (both.size() >= 2) {
    const auto k = static_cast<Eigen::Index>(both.size());
    Mat vi(f.attended[0].rows(), k), ti(f.attended[1].rows(), k);
    for (Eigen::Index c = 0; c < k; ++c) {
      vi.col(c) = f.attended[0].col(both[static_cast<std::size_t>(c)]);
      ti.col(c) = f.attended[1].col(both[static_cast<std::size_t>(c)]);
    }
    const Mat fi = p[kAlignImage] * vi, ft = p[kAlignText] * ti;
    Vec ni, nt;
    const Mat hi = detail::normalize_columns(fi, ni), ht = detail::normalize_columns(ft, nt);
    const bool want_grad = d_attended || grads;
    Mat dhi, dht;
    L.align = symmetric_nce(hi, ht, cfg.temperature, want_grad ? &dhi : nullptr, want_grad ? &dht : nullptr);
    if (want_grad && cfg.lambda_align != 0.0) {
      const Mat dfi = cfg.lambda_align * detail::normalize_backward(hi, ni, dhi);
      const Mat dft = cfg.lambda_align * detail::normalize_backward(ht, nt, dht);
      if (grads) {
        (*grads)[kAlignImage] += dfi * vi.transpose();
        (*grads)[kAlignText] += dft * ti.transpose();
      }
      if (d_attended) {
        const Mat dvi = p[kAlignImage].transpose() * dfi, dti = p[kAlignText].transpose() * dft;
        for (Eigen::Index c = 0; c < k; ++c) {
          (*d_attended)[0].col(both[static_cast<std::size_t>(c)]) += dvi.col(c);
          (*d_attended)[1].col(both[static_cast<std::size_t>(c)]) += dti.col(c);
        }
      }
    }
  }

  L.total = cfg.lambda_huber * L.huber + cfg.lambda_pair * L.pair + cfg.lambda_align * L.align + cfg.lambda_mu * L.mu;
  if (d_alpha) *d_alpha = std::move(da);
  return L;
}

inline LossBreakdown evaluate_losses(const ContentModelParams& p, const Batch& b, const TrainConfig& cfg) {
  const auto f = forward(p, b);
  return content_losses(p, f, b, cfg);
}

using Gradients = std::array<Mat, kNumBlocks>;

inline Gradients zero_gradients(const ContentModelParams& p) {
  Gradients g;
  for (int b = 0; b < kNumBlocks; ++b) g[static_cast<std::size_t>(b)] = Mat::Zero(p[b].rows(), p[b].cols());
  return g;
}

// Total loss and its analytic gradient with respect to every block.
inline LossBreakdown loss_and_grad(const ContentModelParams& p, const Batch& b, const TrainConfig& cfg, Gradients& g) {
  const auto f = forward(p, b);
  const auto n = b.size();
  const auto d = p.config.dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  g = zero_gradients(p);

  Vec da;
  std::array<Mat, 3> d_att;
  for (int m = 0; m < kNumModalities; ++m) d_att[m] = Mat::Zero(d, n);
  const auto L = content_losses(p, f, b, cfg, &da, &d_att, &g);

  // Head and hidden layer.
  const Mat da_row = da.transpose();
  g[kHeadW] += da_row * f.hidden.transpose();
  g[kHeadB](0, 0) += da.sum();
  Mat dhidden = p[kHeadW].transpose() * da_row;
  Mat dhidden_pre = dhidden.cwiseProduct(f.hidden_pre.unaryExpr([](double x) { return gelu_grad(x); }));
  g[kHiddenW] += dhidden_pre * f.z.transpose();
  g[kHiddenB] += dhidden_pre.rowwise().sum();
  const Mat dz = p[kHiddenW].transpose() * dhidden_pre;

  // Gated fusion.
  const Mat dgate = dz.cwiseProduct(f.fuse);
  const Mat dfuse = dz.cwiseProduct(f.gate);
  const Mat dgate_pre = dgate.cwiseProduct(f.gate.cwiseProduct((1.0 - f.gate.array()).matrix()));
  g[kGateW] += dgate_pre * f.u.transpose();
  g[kGateB] += dgate_pre.rowwise().sum();
  g[kFuseW] += dfuse * f.u.transpose();
  g[kFuseB] += dfuse.rowwise().sum();
  const Mat du = p[kGateW].transpose() * dgate_pre + p[kFuseW].transpose() * dfuse;
  for (int m = 0; m < kNumModalities; ++m) d_att[m] += du.middleRows(m * d, d);

  // Cross-attention, in reverse order of the forward directions.
  std::array<Mat, 3> dproj;
  for (int m = 0; m < kNumModalities; ++m) dproj[m] = Mat::Zero(d, n);
  for (std::size_t a = kAttentionPairs.size(); a-- > 0;) {
    const auto [qm, km] = kAttentionPairs[a];
    const auto& ac = f.attention[a];
    const Mat dy = detail::masked(d_att[qm], b.mask[qm]);
    dproj[qm] += dy;
    g[kOutput] += dy * ac.context.transpose();
    const Mat dctx = p[kOutput].transpose() * dy;
    Mat dv = Mat::Zero(d, n), dq = Mat::Zero(d, n), dk = Mat::Zero(d, n);
    for (Eigen::Index c = 0; c < n; ++c) {
      if (b.mask[km](c) == 0.0) continue;
      const double w = ac.attn(c);
      dv.col(c) = w * dctx.col(c);
      const double dw = dctx.col(c).dot(ac.v.col(c));
      const double dscore = w * (dw - w * dw);  // softmax Jacobian over one key
      dq.col(c) = dscore * scale * ac.k.col(c);
      dk.col(c) = dscore * scale * ac.q.col(c);
    }
    g[kValue] += dv * f.projected[km].transpose();
    g[kQuery] += dq * f.projected[qm].transpose();
    g[kKey] += dk * f.projected[km].transpose();
    dproj[km] += p[kValue].transpose() * dv + p[kKey].transpose() * dk;
    dproj[qm] += p[kQuery].transpose() * dq;
  }

  for (int m = 0; m < kNumModalities; ++m) {
    const Mat dpre = detail::masked(dproj[m], b.mask[m]);
    g[kProjImage + m] += dpre * b.x[m].transpose();
    g[kProjBiasImage + m] += dpre.rowwise().sum();
  }
  return L;
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

struct BlockGradError {
  std::string block;
  double max_rel_error = 0.0;  // max |analytic - numeric| / max(max |analytic|, 1e-6)
  double max_abs_error = 0.0;
  double max_abs_grad = 0.0;
};

// Compares the analytic gradient of the total loss with central finite
// differences, block by block.
inline std::vector<BlockGradError> grad_check(const ContentModelParams& params, const Batch& b, const TrainConfig& cfg,
                                              double step = 1e-5) {
  Gradients analytic;
  loss_and_grad(params, b, cfg, analytic);
  ContentModelParams p = params;
  std::vector<BlockGradError> out;
  for (int blk = 0; blk < kNumBlocks; ++blk) {
    BlockGradError e;
    e.block = kBlockNames[static_cast<std::size_t>(blk)];
    Mat& m = p[blk];
    for (Eigen::Index k = 0; k < m.size(); ++k) {
      const double orig = m.data()[k];
      m.data()[k] = orig + step;
      const double up = evaluate_losses(p, b, cfg).total;
      m.data()[k] = orig - step;
      const double down = evaluate_losses(p, b, cfg).total;
      m.data()[k] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[static_cast<std::size_t>(blk)].data()[k];
      e.max_abs_error = std::max(e.max_abs_error, std::abs(a - numeric));
      e.max_abs_grad = std::max(e.max_abs_grad, std::abs(a));
    }
    e.max_rel_error = e.max_abs_error / std::max(e.max_abs_grad, 1e-6);  // floor covers blocks whose exact gradient is 0
    out.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Cosine decay from base to zero over total steps; step in [0, total).
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

// Adaptive moments with decoupled weight decay.
class AdamW {
 public:
  AdamW(const ContentModelParams& p, const TrainConfig& cfg) : cfg_(cfg), m_(zero_gradients(p)), v_(zero_gradients(p)) {}

  void step(ContentModelParams& p, const Gradients& g, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t b = 0; b < kNumBlocks; ++b) {
      m_[b] = cfg_.beta1 * m_[b] + (1.0 - cfg_.beta1) * g[b];
      v_[b] = cfg_.beta2 * v_[b] + (1.0 - cfg_.beta2) * g[b].cwiseProduct(g[b]);
      Mat& w = p[static_cast<int>(b)];
      const Mat update = (m_[b].array() / bc1) / ((v_[b].array() / bc2).sqrt() + cfg_.adam_eps);
      w -= lr * (update + cfg_.weight_decay * w);
    }
  }

  std::size_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  Gradients m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct LossTraceRow {
  int epoch = 0;
  std::string split;
  LossBreakdown loss;
};

struct TrainResult {
  ContentModelParams params;
  std::vector<LossTraceRow> trace;  // epoch 0 is the untrained model
};

inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order, int batch_size) {
  std::vector<std::vector<std::size_t>> out;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t s = 0; s < order.size(); s += bs)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + bs)));
  return out;
}

// Size-weighted mean of batch losses over a whole split, in fixed order.
inline LossBreakdown evaluate_split(const ContentModelParams& p, const std::vector<Sample>& samples,
                                    const TrainConfig& cfg) {
  LossBreakdown acc;
  if (samples.empty()) return acc;
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto batches = make_batches(order, cfg.batch_size);
  for (std::size_t k = 0; k < batches.size(); ++k) {
    const auto b = make_batch(samples, batches[k], p.config.input_dim, mix_seed(cfg.seed, 0xE7A1, k));
    const auto L = evaluate_losses(p, b, cfg);
    const double w = static_cast<double>(batches[k].size()) / static_cast<double>(samples.size());
    acc.huber += w * L.huber;
    acc.pair += w * L.pair;
    acc.align += w * L.align;
    acc.mu += w * L.mu;
    acc.total += w * L.total;
  }
  return acc;
}

inline TrainResult train_content(const std::vector<Sample>& train, const std::vector<Sample>& val,
                                 const ModelConfig& model, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw DataError("train_content: no training samples");
  TrainResult res;
  res.params = init_params(model, cfg.seed);
  auto& p = res.params;

  auto record = [&](int epoch) {
    res.trace.push_back({epoch, "train", evaluate_split(p, train, cfg)});
    if (!val.empty()) res.trace.push_back({epoch, "val", evaluate_split(p, val, cfg)});
  };
  record(0);

  const std::size_t per_epoch = (train.size() + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size);
  const std::size_t total_steps = per_epoch * static_cast<std::size_t>(cfg.epochs);
  AdamW opt(p, cfg);
  Gradients g;
  std::size_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(mix_seed(cfg.seed, 0x5f1e, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    const auto batches = make_batches(std::move(order), cfg.batch_size);
    for (std::size_t k = 0; k < batches.size(); ++k, ++step) {
      const auto b = make_batch(train, batches[k], model.input_dim,
                                mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), k));
      const auto L = loss_and_grad(p, b, cfg, g);
      if (!std::isfinite(L.total))
        throw DivergenceError("content training diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step) + " (loss " + std::to_string(L.total) + ")");
      opt.step(p, g, cosine_lr(cfg.learning_rate, step, total_steps));
    }
    if (!p.all_finite()) throw DivergenceError("content parameters became non-finite at epoch " + std::to_string(epoch));
    record(epoch);
  }
  return res;
}

// Scores (standardized scale) and fused embeddings for a list of samples.
struct ContentOutputs {
  std::vector<double> alpha;
  Mat z;  // dim x n
};

inline ContentOutputs predict_content(const ContentModelParams& p, const std::vector<Sample>& samples,
                                      std::size_t chunk = 512) {
  ContentOutputs out;
  out.alpha.resize(samples.size());
  out.z.resize(p.config.dim, static_cast<Eigen::Index>(samples.size()));
  std::vector<std::size_t> idx;
  for (std::size_t s = 0; s < samples.size(); s += chunk) {
    idx.clear();
    for (std::size_t i = s; i < std::min(samples.size(), s + chunk); ++i) idx.push_back(i);
    const auto f = forward(p, make_batch(samples, idx, p.config.input_dim));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out.alpha[idx[k]] = f.alpha(static_cast<Eigen::Index>(k));
      out.z.col(static_cast<Eigen::Index>(idx[k])) = f.z.col(static_cast<Eigen::Index>(k));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints and loss traces
//
//   "OTCK" | u16 version | model config | train config | scaler | blocks
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  ContentModelParams params;
  TrainConfig train;
  corpus::LabelScaler scaler;
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  const auto& c = ck.params.config;
  bin::put_magic(os, "OTCK");
  bin::put<std::uint16_t>(os, kCheckpointVersion);
  for (int d : c.input_dim) bin::put<std::int32_t>(os, d);
  bin::put<std::int32_t>(os, c.dim);
  bin::put<std::int32_t>(os, c.hidden);
  bin::put<std::int32_t>(os, c.align_dim);
  const auto& t = ck.train;
  bin::put<std::int32_t>(os, t.epochs);
  bin::put<std::int32_t>(os, t.batch_size);
  for (double v : {t.learning_rate, t.weight_decay, t.huber_delta, t.margin, t.temperature, t.lambda_huber,
                   t.lambda_pair, t.lambda_align, t.lambda_mu, t.beta1, t.beta2, t.adam_eps})
    bin::put<double>(os, v);
  bin::put<std::uint64_t>(os, t.seed);
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.scaler.stats().size()));
  for (const auto& [platform, m] : ck.scaler.stats()) {
    bin::put<std::int32_t>(os, platform);
    bin::put<double>(os, m.mean);
    bin::put<double>(os, m.std);
  }
  bin::put<std::uint32_t>(os, kNumBlocks);
  for (int b = 0; b < kNumBlocks; ++b) {
    const Mat& m = ck.params[b];
    bin::put_string(os, kBlockNames[static_cast<std::size_t>(b)]);
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  bin::expect_magic(is, "OTCK");
  const auto version = bin::get<std::uint16_t>(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ModelConfig c;
  for (int& d : c.input_dim) d = bin::get<std::int32_t>(is);
  c.dim = bin::get<std::int32_t>(is);
  c.hidden = bin::get<std::int32_t>(is);
  c.align_dim = bin::get<std::int32_t>(is);
  auto& t = ck.train;
  t.epochs = bin::get<std::int32_t>(is);
  t.batch_size = bin::get<std::int32_t>(is);
  for (double* v : {&t.learning_rate, &t.weight_decay, &t.huber_delta, &t.margin, &t.temperature, &t.lambda_huber,
                    &t.lambda_pair, &t.lambda_align, &t.lambda_mu, &t.beta1, &t.beta2, &t.adam_eps})
    *v = bin::get<double>(is);
  t.seed = bin::get<std::uint64_t>(is);
  const auto np = bin::get<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < np; ++k) {
    const int platform = bin::get<std::int32_t>(is);
    corpus::Moments m;
    m.mean = bin::get<double>(is);
    m.std = bin::get<double>(is);
    ck.scaler.set(platform, m);
  }
  if (bin::get<std::uint32_t>(is) != kNumBlocks) throw FormatError("checkpoint block count mismatch");
  ck.params = zero_params(c);
  const auto shapes = block_shapes(c);
  for (int b = 0; b < kNumBlocks; ++b) {
    if (bin::get_string(is) != kBlockNames[static_cast<std::size_t>(b)]) throw FormatError("checkpoint block name mismatch");
    const auto rows = bin::get<std::uint32_t>(is), cols = bin::get<std::uint32_t>(is);
    if (rows != shapes[static_cast<std::size_t>(b)].first || cols != shapes[static_cast<std::size_t>(b)].second)
      throw FormatError("checkpoint block shape mismatch");
    Mat& m = ck.params[b];
    if (m.size() && !is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size()))))
      throw FormatError("truncated checkpoint");
  }
  return ck;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_checkpoint(os, ck);
  if (!os) throw DataError("write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_checkpoint(is);
}

inline void write_loss_trace_csv(std::ostream& os, const std::vector<LossTraceRow>& trace) {
  os << "epoch,split,L_Huber,L_pair,L_align,L_mu,L_alpha\n";
  char buf[256];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%d,%s,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.split.c_str(), r.loss.huber,
                  r.loss.pair, r.loss.align, r.loss.mu, r.loss.total);
    os << buf;
  }
}

}  // namespace popdecomp::content
