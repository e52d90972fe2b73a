#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "popdecomp/pipeline.hpp"
#include "test_util.hpp"

using namespace popdecomp;
using namespace popdecomp::pipeline;

namespace {

// Spearman by O(n^2) rank counting.
double spearman_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0.0, equal = 0.0;
      for (double x : v) {
        less += x < v[i];
        equal += x == v[i];
      }
      r[i] = less + (equal + 1.0) / 2.0;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i] / n;
    mb += rb[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

PipelineConfig tiny_config() {
  PipelineConfig c;
  c.gen = testutil::small_generator(400, 21);
  c.model.dim = 8;
  c.model.hidden = 8;
  c.model.align_dim = 4;
  c.train.epochs = 3;
  c.train.batch_size = 64;
  c.boost.max_rounds = 60;
  c.boost.patience = 20;
  c.boost.shrinkage = 0.1;
  c.boost.max_depth = 4;
  c.seeds = {1};
  return c;
}

PreparedData tiny_data(const PipelineConfig& c) {
  const auto g = synthgen::generate_corpus(c.gen);
  return prepare({g.posts, g.embeddings}, c.split);
}

}  // namespace

TEST(Combine, LogAdditiveExample) {
  const auto c = combine_prediction(3.0, 1.60517);
  EXPECT_NEAR(c.y_tilde, 4.60517, 1e-12);
  EXPECT_NEAR(c.y, 99.0, 1e-3);
  EXPECT_NEAR(combine_prediction(2.0, std::log(100.0) - 2.0).y, 99.0, 1e-9);
}

TEST(Combine, ZeroAndClamp) {
  EXPECT_EQ(combine_prediction(0.0, 0.0).y, 0.0);
  const auto c = combine_prediction(-2.0, -3.0);
  EXPECT_EQ(c.y_tilde, -5.0);
  EXPECT_EQ(c.y, 0.0);
}

TEST(Combine, LogOfPredictionRecoversClampedSum) {
  Rng rng(13);
  for (int t = 0; t < 1000; ++t) {
    const double a = rng.uniform(-5, 8), p = rng.uniform(-5, 8);
    const auto c = combine_prediction(a, p);
    EXPECT_NEAR(corpus::log_transform(c.y), std::max(0.0, a + p), 1e-9);
  }
}

TEST(Spearman, Examples) {
  EXPECT_NEAR(spearman({1, 2, 3}, {10, 20, 30}).value, 1.0, 1e-12);
  EXPECT_NEAR(spearman({3, 2, 1}, {10, 20, 30}).value, -1.0, 1e-12);
  EXPECT_NEAR(spearman({1, 1, 2}, {1, 2, 3}).value, std::sqrt(3.0) / 2.0, 1e-12);
  EXPECT_NEAR(spearman({1, 1, 2}, {1, 2, 3}).value, 0.86603, 1e-5);
}

TEST(Spearman, LogAndRawLabelsAgree) {
  Rng rng(17);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> pred, y, yt;
    for (int i = 0; i < 40; ++i) {
      pred.push_back(rng.normal());
      y.push_back(static_cast<double>(rng.below(30)));  // ties included
      yt.push_back(corpus::log_transform(y.back()));
    }
    const auto a = spearman(pred, y), b = spearman(pred, yt);
    EXPECT_EQ(a.value, b.value);
    EXPECT_EQ(a.degenerate, b.degenerate);
  }
}

TEST(Spearman, ConstantInputDegenerate) {
  const auto c = spearman({1, 2, 3}, {5, 5, 5});
  EXPECT_TRUE(c.degenerate);
  EXPECT_EQ(c.value, 0.0);
  EXPECT_THROW(spearman({1}, {1}), DataError);
  EXPECT_THROW(spearman({1, 2}, {1}), DataError);
}

TEST(Spearman, MatchesQuadraticOracleWithTies) {
  Rng rng(14);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.below(60);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<double>(rng.below(8));
      b[i] = rng.uniform() < 0.5 ? a[i] + static_cast<double>(rng.below(3)) : static_cast<double>(rng.below(5));
    }
    const auto c = spearman(a, b);
    if (c.degenerate) continue;
    EXPECT_NEAR(c.value, spearman_oracle(a, b), 1e-12);
  }
}

TEST(Spearman, MonotoneTransformInvariant) {
  Rng rng(15);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a, b, b2;
    for (int i = 0; i < 30; ++i) {
      a.push_back(rng.normal());
      b.push_back(rng.normal());
      b2.push_back(std::exp(3.0 * b.back()) + 7.0);
    }
    EXPECT_NEAR(spearman(a, b).value, spearman(a, b2).value, 1e-12);
  }
}

TEST(Evaluate, ErrorsOnLogScale) {
  const auto m = evaluate({1.0, 2.0, 4.0}, {1.0, 3.0, 2.0});
  EXPECT_EQ(m.n, 3u);
  EXPECT_DOUBLE_EQ(m.mse, 5.0 / 3.0);
  EXPECT_DOUBLE_EQ(m.mae, 1.0);
  EXPECT_NEAR(m.src, 0.5, 1e-12);
}

TEST(RankGrid, IndependentLayoutIsUniform) {
  std::vector<double> a, p;
  for (int i = 0; i < 100; ++i) {
    a.push_back(i);
    p.push_back((i % 10) * 10 + i / 10);
  }
  const auto d = rank_rank_diag(a, p);
  EXPECT_NEAR(d.max_deviation(), 0.0, 1e-12);
  for (double x : d.density) EXPECT_NEAR(x, 0.01, 1e-12);
}

TEST(RankGrid, IdenticalRankingsOnDiagonal) {
  std::vector<double> a;
  for (int i = 0; i < 50; ++i) a.push_back(i * 0.5);
  const auto d = rank_rank_diag(a, a);
  EXPECT_NEAR(d.spearman, 1.0, 1e-12);
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 10; ++c) EXPECT_NEAR(d.at(r, c), r == c ? 0.1 : 0.0, 1e-12);
  EXPECT_NEAR(d.max_deviation(), 0.09, 1e-12);
}

TEST(RankGrid, ReversedRankingsOnAntiDiagonal) {
  std::vector<double> a, p;
  for (int i = 0; i < 200; ++i) {
    a.push_back(i);
    p.push_back(-i);
  }
  const auto d = rank_rank_diag(a, p);
  EXPECT_NEAR(d.spearman, -1.0, 1e-12);
  for (int r = 0; r < 10; ++r) EXPECT_NEAR(d.at(r, 9 - r), 0.1, 1e-12);
}

TEST(RankGrid, IndependentSamplesNearUniform) {
  Rng rng(18);
  std::vector<double> a, p;
  for (int i = 0; i < 10000; ++i) {
    a.push_back(rng.uniform());
    p.push_back(rng.uniform());
  }
  EXPECT_LT(rank_rank_diag(a, p).max_deviation(), 0.005);
}

TEST(RankGrid, DensitySumsToOneProperty) {
  Rng rng(16);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a, p;
    const std::size_t n = 2 + rng.below(300);
    for (std::size_t i = 0; i < n; ++i) {
      a.push_back(static_cast<double>(rng.below(20)));
      p.push_back(rng.normal());
    }
    double s = 0.0;
    for (double x : rank_rank_diag(a, p).density) s += x;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Distribution, WassersteinAndBins) {
  EXPECT_DOUBLE_EQ(wasserstein1({0.0, 1.0}, {2.0, 1.0}), 1.0);
  EXPECT_EQ(wasserstein1({3.0, 1.0, 2.0}, {1.0, 2.0, 3.0}), 0.0);
  const auto d = distribution_diag({0.0, 1.0, 2.0, 3.0}, {0.0, 0.0, 3.0, 3.0}, {0.0, 1.0, 2.0, 3.0}, 4);
  ASSERT_EQ(d.edges.size(), 5u);
  EXPECT_EQ(d.w1_full, 0.0);
  EXPECT_DOUBLE_EQ(d.w1_content, 0.5);
  for (const auto& f : d.frequency) {
    double s = 0.0;
    for (double x : f) s += x;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_EQ(d.frequency[1][0], 0.5);
  EXPECT_EQ(d.frequency[1][3], 0.5);
}

TEST(Distribution, ConstantPredictionIsMeanAbsoluteDeviation) {
  Rng rng(19);
  std::vector<double> truth;
  for (int i = 0; i < 300; ++i) truth.push_back(rng.uniform(0, 8));
  const std::vector<double> constant(truth.size(), 3.0);
  double mad = 0.0;
  for (double x : truth) mad += std::abs(x - 3.0) / static_cast<double>(truth.size());
  const auto d = distribution_diag(truth, constant, truth);
  EXPECT_NEAR(d.w1_content, mad, 1e-12);
  EXPECT_EQ(d.w1_full, 0.0);
  EXPECT_EQ(d.edges.size(), 21u);
}

TEST(Variants, NamesRoundTrip) {
  for (const auto& [v, name] : kVariantNames) EXPECT_EQ(parse_variant(name), v);
  EXPECT_THROW(parse_variant("no_such_variant"), ConfigError);
}

TEST(Variants, ModalityMasks) {
  EXPECT_EQ(modality_mask(Variant::Full), (ModalityMask{true, true, true}));
  EXPECT_EQ(modality_mask(Variant::ContentImageOnly), (ModalityMask{true, false, false}));
  EXPECT_EQ(modality_mask(Variant::ContentTextOnly), (ModalityMask{false, true, false}));
}

TEST(Config, ParseTextAndApply) {
  const auto kv = parse_config_text("# comment\n content.epochs = 7 \n\nretrieval.k=5 # trailing\nvariant=no_retrieval\nseeds=4,5\n");
  PipelineConfig c;
  apply_options(c, kv);
  EXPECT_EQ(c.train.epochs, 7);
  EXPECT_EQ(c.retrieval.k, 5);
  EXPECT_EQ(c.variant, Variant::NoRetrieval);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{4, 5}));
}

TEST(Config, ErrorsAreConfigErrors) {
  PipelineConfig c;
  EXPECT_THROW(parse_config_text("novalue\n"), ConfigError);
  EXPECT_THROW(parse_config_text("=3\n"), ConfigError);
  EXPECT_THROW(set_option(c, "content.nope", "1"), ConfigError);
  EXPECT_THROW(set_option(c, "content.epochs", "seven"), ConfigError);
  EXPECT_THROW(set_option(c, "retrieval.log_payload", "maybe"), ConfigError);
  EXPECT_THROW(set_option(c, "variant", "bogus"), ConfigError);
  EXPECT_THROW(read_config_file("/nonexistent/popdecomp.cfg"), ConfigError);
}

TEST(Config, DumpRoundTripsAndFingerprintIgnoresSeeds) {
  PipelineConfig a;
  set_option(a, "boost.shrinkage", "0.05");
  set_option(a, "gen.n_posts", "1234");
  PipelineConfig b;
  apply_options(b, parse_config_text(dump_config(a)));
  EXPECT_EQ(dump_config(a), dump_config(b));
  EXPECT_EQ(config_fingerprint(a), config_fingerprint(b));
  b.seeds = {9};
  EXPECT_EQ(config_fingerprint(a), config_fingerprint(b));
  b.train.epochs += 1;
  EXPECT_NE(config_fingerprint(a), config_fingerprint(b));
  EXPECT_EQ(config_fingerprint(a).size(), 16u);
}

TEST(Run, ReportIsDeterministic) {
  const auto cfg = tiny_config();
  const auto d = tiny_data(cfg);
  const auto a = run_experiment(d, nullptr, cfg, 1);
  const auto b = run_experiment(d, nullptr, cfg, 1);
  EXPECT_EQ(canonical_json(a.report), canonical_json(b.report));
  EXPECT_EQ(a.y_tilde_hat, b.y_tilde_hat);
  for (const char* split : {"train", "val", "test"}) {
    const auto& s = a.report["splits"][split];
    EXPECT_GT(s["n"].get<std::size_t>(), 0u);
    EXPECT_TRUE(std::isfinite(s["mse"].get<double>()));
    EXPECT_TRUE(s["terciles"].contains("high"));
  }
  EXPECT_EQ(a.report["config_fingerprint"], config_fingerprint(cfg));
}

TEST(Run, PredictionIsSumOfFactors) {
  const auto cfg = tiny_config();
  const auto d = tiny_data(cfg);
  const auto r = run_experiment(d, nullptr, cfg, 2);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(r.y_tilde_hat[i], r.alpha[i] + r.phi[i]);
}

TEST(Run, TestLabelsDoNotAffectEarlierPredictions) {
  const auto cfg = tiny_config();
  const auto g = synthgen::generate_corpus(cfg.gen);
  auto posts = g.posts;
  const auto base = prepare({posts, g.embeddings}, cfg.split);
  Rng rng(3);
  for (std::size_t i : base.split.test) posts[i].y = static_cast<std::int64_t>(rng.below(100000));
  const auto mutated = prepare({posts, g.embeddings}, cfg.split);
  const auto a = run_experiment(base, nullptr, cfg, 1);
  const auto b = run_experiment(mutated, nullptr, cfg, 1);
  for (std::size_t i : base.split.train) EXPECT_EQ(a.y_tilde_hat[i], b.y_tilde_hat[i]);
  for (std::size_t i : base.split.val) EXPECT_EQ(a.y_tilde_hat[i], b.y_tilde_hat[i]);
}

TEST(Run, NoContextUsesConstantPhi) {
  auto cfg = tiny_config();
  cfg.variant = Variant::NoContext;
  const auto d = tiny_data(cfg);
  const auto r = run_experiment(d, nullptr, cfg, 1);
  EXPECT_FALSE(r.exposure.has_value());
  for (double p : r.phi) EXPECT_EQ(p, r.phi.front());
}

TEST(Run, NoContentHasNoContentModel) {
  auto cfg = tiny_config();
  cfg.variant = Variant::NoContent;
  const auto r = run_experiment(tiny_data(cfg), nullptr, cfg, 1);
  EXPECT_FALSE(r.content.has_value());
  ASSERT_TRUE(r.exposure.has_value());
}

TEST(Run, TransferNeedsSource) {
  auto cfg = tiny_config();
  cfg.variant = Variant::TransferFrozenContent;
  const auto d = tiny_data(cfg);
  EXPECT_THROW(run_experiment(d, nullptr, cfg, 1), ConfigError);
  auto src_gen = synthgen::source_platform(cfg.gen);
  const auto sg = synthgen::generate_corpus(src_gen);
  const auto src = prepare({sg.posts, sg.embeddings}, cfg.split);
  const auto r = run_experiment(d, &src, cfg, 1);
  EXPECT_EQ(r.report["variant"], "transfer_frozen_content");
}

TEST(Run, SeedSummary) {
  auto cfg = tiny_config();
  cfg.seeds = {1, 2};
  const auto j = run_seeds(tiny_data(cfg), nullptr, cfg);
  EXPECT_EQ(j["runs"].size(), 2u);
  EXPECT_TRUE(j["summary"].contains("test.src"));
  EXPECT_GE(j["summary"]["test.src"]["std"].get<double>(), 0.0);
}

TEST(Artifacts, WrittenFilesAreByteIdentical) {
  const auto cfg = tiny_config();
  const auto d = tiny_data(cfg);
  const auto root = std::filesystem::temp_directory_path() / "popdecomp_artifacts_test";
  std::filesystem::remove_all(root);
  write_run_artifacts(root / "a", d, run_experiment(d, nullptr, cfg, 1));
  write_run_artifacts(root / "b", d, run_experiment(d, nullptr, cfg, 1));
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
  };
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(root / "a")) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(root / "b" / e.path().filename())) << e.path().filename();
  }
  EXPECT_EQ(files, 8u);
  std::filesystem::remove_all(root);
}
