#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "popdecomp/pipeline.hpp"
#include "test_util.hpp"

using namespace popdecomp;
using namespace popdecomp::synthgen;

namespace {

bool same(const GeneratedCorpus& a, const GeneratedCorpus& b) {
  return a.posts == b.posts && a.embeddings == b.embeddings && a.truth == b.truth;
}

}  // namespace

TEST(Generator, SameSeedBitIdentical) {
  const auto cfg = testutil::small_generator(500, 9);
  EXPECT_TRUE(same(generate_corpus(cfg), generate_corpus(cfg)));
  auto other = cfg;
  other.seed = 10;
  EXPECT_FALSE(same(generate_corpus(cfg), generate_corpus(other)));
}

TEST(Generator, NoiseFreeLabelIdentity) {
  auto cfg = testutil::small_generator(800, 4);
  cfg.noise_std = 0.0;
  const auto g = generate_corpus(cfg);
  for (std::size_t i = 0; i < g.posts.size(); ++i) {
    EXPECT_EQ(g.truth.epsilon[i], 0.0);
    const double expected = std::max(0.0, std::round(std::expm1(g.truth.alpha_star[i] + g.truth.phi_star[i])));
    EXPECT_EQ(static_cast<double>(g.posts[i].y), expected);
  }
}

TEST(Generator, LabelEqualsSumOfFactorsAndNoise) {
  const auto g = generate_corpus(testutil::small_generator(800, 5));
  for (std::size_t i = 0; i < g.posts.size(); ++i) {
    const double yt = g.truth.alpha_star[i] + g.truth.phi_star[i] + g.truth.epsilon[i];
    EXPECT_EQ(static_cast<double>(g.posts[i].y), std::max(0.0, std::round(std::expm1(yt))));
  }
}

TEST(Generator, FactorsNearlyUncorrelatedAtDefaultScale) {
  const auto g = generate_corpus(GeneratorConfig{});
  ASSERT_EQ(g.posts.size(), 10000u);
  const double s = pipeline::spearman(g.truth.alpha_star, g.truth.phi_star).value;
  EXPECT_GT(s, -0.1);
  EXPECT_LT(s, 0.1);
}

TEST(Generator, LongTailedEngagement) {
  const auto g = generate_corpus(GeneratorConfig{});
  std::vector<double> y;
  double total = 0.0;
  for (const auto& p : g.posts) {
    y.push_back(static_cast<double>(p.y));
    total += static_cast<double>(p.y);
  }
  std::sort(y.begin(), y.end());
  double top = 0.0;
  for (std::size_t i = y.size() * 2 / 3; i < y.size(); ++i) top += y[i];
  EXPECT_GT(top / total, 0.6);
}

TEST(Generator, EmbeddingRowsNormalizedOrZero) {
  const auto g = generate_corpus(testutil::small_generator(600, 6));
  for (int m = 0; m < kNumModalities; ++m) {
    for (std::size_t i = 0; i < g.posts.size(); ++i) {
      const float* row = g.embeddings.row(m, i);
      double s = 0.0;
      for (int c = 0; c < g.embeddings.dim[m]; ++c) s += double(row[c]) * double(row[c]);
      if (g.embeddings.has(m, i)) {
        if (m != kVideo) {
          EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
        }
      } else {
        EXPECT_EQ(s, 0.0);
      }
    }
  }
  for (std::size_t i = 0; i < g.posts.size(); ++i) {
    const auto& p = g.posts[i];
    EXPECT_TRUE(p.has_image || p.has_text || p.has_video);
    EXPECT_EQ(p.has_image, g.embeddings.has(kImage, i));
    EXPECT_EQ(p.has_text, g.embeddings.has(kText, i));
    EXPECT_EQ(p.has_video, g.embeddings.has(kVideo, i));
  }
}

TEST(Generator, ChunkedGenerationMatchesSerial) {
  const auto cfg = testutil::small_generator(700, 8);
  const Generator gen(cfg);
  std::vector<detail::PostDraw> draws(cfg.n_posts);
  // Chunks produced back to front.
  for (std::size_t end = cfg.n_posts; end > 0;) {
    const std::size_t begin = end >= 97 ? end - 97 : 0;
    auto part = gen.draw_range(begin, end);
    std::move(part.begin(), part.end(), draws.begin() + static_cast<std::ptrdiff_t>(begin));
    end = begin;
  }
  EXPECT_TRUE(same(gen.assemble(draws), generate_corpus(cfg)));
}

TEST(Generator, ConfigValidation) {
  GeneratorConfig c;
  c.dim = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = GeneratorConfig{};
  c.missing_rate[1] = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = GeneratorConfig{};
  c.noise_std = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = GeneratorConfig{};
  c.alpha_theme_weight = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Generator, SourcePlatformSharesAlphaFunction) {
  const auto target = testutil::small_generator(10, 3);
  const auto source = source_platform(target);
  EXPECT_EQ(source.content_seed, target.content_seed);
  EXPECT_NE(source.seed, target.seed);
  EXPECT_NE(source.platform_id, target.platform_id);
  const detail::ContentGenerator a(target.content_seed, target.dim, target.theme_share, target.alpha_theme_weight,
                                   target.alpha_std);
  const detail::ContentGenerator b(source.content_seed, source.dim, source.theme_share, source.alpha_theme_weight,
                                   source.alpha_std);
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    std::array<std::vector<double>, 3> emb;
    for (auto& e : emb) e = testutil::random_unit(rng, target.dim);
    EXPECT_EQ(a.alpha(emb), b.alpha(emb));
  }
}

class CorpusFiles : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = std::filesystem::temp_directory_path() / "popdecomp_synthgen_test";
    std::filesystem::remove_all(dir);
  }
  void TearDown() override { std::filesystem::remove_all(dir); }
  std::filesystem::path dir;
};

TEST_F(CorpusFiles, RoundTripBitIdentical) {
  const auto g = generate_corpus(testutil::small_generator(100, 2));
  write_corpus(dir, g);
  const auto d = read_corpus(dir);
  EXPECT_EQ(d.posts, g.posts);
  EXPECT_EQ(d.embeddings, g.embeddings);
  const auto t = read_truth((dir / "truth.jsonl").string());
  EXPECT_EQ(t.post_id, g.truth.post_id);
  EXPECT_EQ(t.alpha_star, g.truth.alpha_star);
  EXPECT_EQ(t.phi_star, g.truth.phi_star);
}

TEST_F(CorpusFiles, CorruptMagicIsFormatError) {
  const auto g = generate_corpus(testutil::small_generator(100, 2));
  write_corpus(dir, g);
  {
    std::fstream f(dir / "embeddings.oteb", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  EXPECT_THROW(read_corpus(dir), FormatError);
}

TEST_F(CorpusFiles, RowCountMismatchRejected) {
  auto g = generate_corpus(testutil::small_generator(100, 2));
  write_corpus(dir, g);
  g.posts.pop_back();
  corpus::write_corpus_jsonl((dir / "corpus.jsonl").string(), g.posts);
  EXPECT_THROW(read_corpus(dir), DataError);
}

TEST_F(CorpusFiles, TruncatedEmbeddingsRejected) {
  const auto g = generate_corpus(testutil::small_generator(100, 2));
  write_corpus(dir, g);
  const auto p = dir / "embeddings.oteb";
  std::filesystem::resize_file(p, std::filesystem::file_size(p) - 7);
  EXPECT_THROW(read_corpus(dir), FormatError);
}
