#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ctrlkit/model.hpp"
#include "support/finite_diff.hpp"

using namespace ctrlkit;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d = 16;
  c.f = 32;
  c.layers = 2;
  c.heads = 4;
  c.vocab = 40;
  c.context = 12;
  c.dropout = 0.1;
  return c;
}

std::vector<TokenId> random_ids(CounterRng& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = static_cast<TokenId>(rng.below(vocab));
  return ids;
}

// Moves every weight matrix away from the tiny init scale so attention
// patterns and residual paths actually matter.
template <typename T>
void scramble(Model<T>& m, std::uint64_t seed, double scale = 0.3) {
  CounterRng rng(seed);
  for (auto& p : m.parameters())
    for (auto& v : p.data()) v = static_cast<T>(scale * rng.normal()) + (p.rank() == 1 ? T(1) : T(0));
}

}  // namespace

TEST(ModelConfigTest, Validation) {
  ModelConfig c;
  c.heads = 3;
  EXPECT_THROW(c.validate(), ParameterError);
  c = ModelConfig{};
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ParameterError);
  c = ModelConfig{};
  c.vocab = 0;
  EXPECT_THROW(Model<float>{c}, ParameterError);
}

TEST(PositionalEmbeddingTest, Examples) {
  auto p0 = positional_embedding<double>(0, 8);
  for (std::size_t i = 0; i < 8; i += 2) {
    EXPECT_EQ(p0[i], 0.0);
    EXPECT_EQ(p0[i + 1], 1.0);
  }
  auto p1 = positional_embedding<double>(1, 4);
  EXPECT_NEAR(p1[0], std::sin(1.0), 1e-15);
  EXPECT_NEAR(p1[1], std::cos(1.0), 1e-15);
  EXPECT_NEAR(p1[2], std::sin(std::pow(10000.0, -0.5)), 1e-15);
  EXPECT_NEAR(p1[3], std::cos(std::pow(10000.0, -0.5)), 1e-15);
  for (std::size_t p = 0; p < 64; ++p)
    for (double v : positional_embedding<double>(p, 16)) EXPECT_LE(std::abs(v), 1.0);
}

TEST(CountParamsTest, MatchesAllocationWalk) {
  ModelConfig desk;
  desk.vocab = 512;
  Model<float> m(desk);
  std::uint64_t walked = 0;
  for (const auto& p : m.parameters()) walked += p.numel();
  EXPECT_EQ(count_params(desk), walked);
  EXPECT_EQ(count_params(desk), 131712u);
  // The tied projection is the embedding, so it adds nothing.
  EXPECT_TRUE(m.params().output_projection.same_storage(m.params().token_embedding));
}

TEST(CountParamsTest, FullScaleIsAboutOnePointSixBillion) {
  ModelConfig full;
  full.d = 1280;
  full.f = 8192;
  full.layers = 48;
  full.heads = 16;
  full.vocab = 250000;
  const double n = static_cast<double>(count_params(full));
  EXPECT_GT(n, 1.55e9);
  EXPECT_LT(n, 1.70e9);
}

TEST(MaskedAttentionTest, SingleTokenIsValueThenOutputProjection) {
  auto c = small_config();
  Model<double> m(c, 4);
  scramble(m, 5);
  CounterRng rng(6);
  auto x = ctrlkit::testing::random_tensor(rng, {1, c.d}, 1.0, false);
  Tape<double> t(false);
  const auto& layer = m.params().layers[0];
  auto out = m.masked_attention(t, x, layer, 1);
  auto expect = t.matmul(t.matmul(x, layer.wv), layer.wo);
  for (std::size_t j = 0; j < c.d; ++j) EXPECT_NEAR(out[j], expect[j], 1e-12);
}

TEST(ForwardTest, ShapeErrors) {
  auto c = small_config();
  Model<float> m(c);
  EXPECT_THROW(m.forward(std::vector<TokenId>(c.context + 1, 1)), ContextError);
  EXPECT_THROW(m.forward(std::vector<TokenId>{1, static_cast<TokenId>(c.vocab)}), IndexError);
  EXPECT_THROW(m.forward(std::vector<TokenId>{}), DimensionError);
}

TEST(ForwardTest, EvalIsDeterministic) {
  Model<float> m(small_config(), 8);
  CounterRng rng(1);
  const auto ids = random_ids(rng, 12, 40);
  auto a = m.forward(ids);
  auto b = m.forward(ids);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(ForwardTest, Causality) {
  auto c = small_config();
  Model<float> m(c, 2);
  scramble(m, 3);
  CounterRng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ids = random_ids(rng, c.context, c.vocab);
    const auto base = m.forward(ids);
    const std::size_t j = rng.below(c.context);
    auto changed = ids;
    changed[j] = (changed[j] + 1 + static_cast<TokenId>(rng.below(c.vocab - 1))) % c.vocab;
    const auto out = m.forward(changed);
    for (std::size_t p = 0; p < j; ++p)
      for (std::size_t v = 0; v < c.vocab; ++v) ASSERT_EQ(out.at(p, v), base.at(p, v)) << "pos " << p << " j " << j;
    bool differs = false;
    for (std::size_t v = 0; v < c.vocab; ++v) differs = differs || out.at(j, v) != base.at(j, v);
    EXPECT_TRUE(differs);
  }
}

TEST(ForwardTest, MatchesPrefixRecomputation) {
  auto c = small_config();
  Model<float> m(c, 12);
  scramble(m, 13);
  CounterRng rng(14);
  const auto ids = random_ids(rng, c.context, c.vocab);
  const auto full = m.forward(ids);
  for (std::size_t n = 1; n <= ids.size(); ++n) {
    const auto prefix = m.forward(std::span<const TokenId>(ids).first(n));
    for (std::size_t v = 0; v < c.vocab; ++v) EXPECT_NEAR(prefix.at(n - 1, v), full.at(n - 1, v), 1e-5);
  }
}

TEST(ForwardTest, BatchedForwardMatchesSingleSequences) {
  auto c = small_config();
  Model<double> m(c, 21);
  scramble(m, 22);
  CounterRng rng(23);
  const auto a = random_ids(rng, 7, c.vocab), b = random_ids(rng, 7, c.vocab);
  std::vector<TokenId> both(a);
  both.insert(both.end(), b.begin(), b.end());
  Tape<double> t(false);
  auto batched = m.forward(t, both, 7);
  auto sa = m.forward(a), sb = m.forward(b);
  for (std::size_t p = 0; p < 7; ++p)
    for (std::size_t v = 0; v < c.vocab; ++v) {
      EXPECT_NEAR(batched.at(p, v), sa.at(p, v), 1e-12);
      EXPECT_NEAR(batched.at(7 + p, v), sb.at(p, v), 1e-12);
    }
}

TEST(ForwardTest, NearUniformAtInitialization) {
  ModelConfig desk;
  desk.vocab = 512;
  Model<double> m(desk, 1);
  CounterRng rng(2);
  const auto scores = m.forward(random_ids(rng, desk.context, desk.vocab));
  const double ln_v = std::log(512.0);
  for (std::size_t p = 0; p < desk.context; ++p) {
    double mx = -1e300, z = 0, h = 0;
    for (std::size_t v = 0; v < desk.vocab; ++v) mx = std::max(mx, scores.at(p, v));
    for (std::size_t v = 0; v < desk.vocab; ++v) z += std::exp(scores.at(p, v) - mx);
    for (std::size_t v = 0; v < desk.vocab; ++v) {
      const double q = std::exp(scores.at(p, v) - mx) / z;
      h -= q * std::log(q);
    }
    EXPECT_NEAR(h, ln_v, 0.01 * ln_v);
  }
}

// Block residuals add the normalized input, so with every block layernorm
// gain and bias at zero each block maps its input to exactly zero and the
// scores collapse to final_bias * E^T at every position, for any input.
TEST(ForwardTest, ZeroBlockLayernormsCollapseToFinalBias) {
  auto c = small_config();
  Model<double> m(c, 30);
  scramble(m, 31);
  for (auto& l : m.params().layers)
    for (auto* t : {&l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias})
      std::fill(t->data().begin(), t->data().end(), 0.0);
  CounterRng rng(32);
  const auto scores = m.forward(random_ids(rng, 9, c.vocab));
  const auto& e = m.params().token_embedding;
  const auto& bf = m.params().final_bias;
  for (std::size_t p = 0; p < 9; ++p)
    for (std::size_t v = 0; v < c.vocab; ++v) {
      double expect = 0;
      for (std::size_t j = 0; j < c.d; ++j) expect += bf[j] * e.at(v, j);
      EXPECT_NEAR(scores.at(p, v), expect, 1e-12);
    }
}

TEST(ModelGradientTest, FullModelMatchesFiniteDifferences) {
  auto c = small_config();
  c.layers = 1;
  c.vocab = 12;
  c.context = 6;
  Model<double> m(c, 40);
  scramble(m, 41, 0.5);
  CounterRng rng(42);
  const auto ids = random_ids(rng, 12, c.vocab);
  std::vector<std::int64_t> targets(ids.begin() + 1, ids.end());
  targets.push_back(-1);
  targets[5] = -1;
  const DropoutKey key{9, 1, 0, 0};
  auto loss_value = [&] {
    Tape<double> t(false);
    return t.cross_entropy(m.forward(t, ids, 6, true, key), targets).item();
  };
  Tape<double> t;
  auto loss = t.cross_entropy(m.forward(t, ids, 6, true, key), targets);
  t.backward(loss);
  for (auto& [name, p] : m.named_parameters()) {
    ASSERT_TRUE(p.has_grad()) << name;
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto numeric = ctrlkit::testing::numeric_gradient(p, loss_value);
    EXPECT_LT(ctrlkit::testing::relative_error(analytic, numeric), 1e-4) << name;
  }
}

TEST(ModelGradientTest, GradientReachesAlmostEveryParameter) {
  ModelConfig desk;
  desk.vocab = 512;
  Model<float> m(desk, 50);
  CounterRng rng(51);
  const auto ids = random_ids(rng, 4 * desk.context, desk.vocab);
  std::vector<std::int64_t> targets(ids.begin() + 1, ids.end());
  targets.push_back(-1);
  Tape<float> t;
  auto loss = t.cross_entropy(m.forward(t, ids, desk.context, true, {1, 1, 0, 0}), targets);
  t.backward(loss);
  std::size_t live = 0, total = 0;
  for (const auto& [name, p] : m.named_parameters()) {
    ++total;
    double sq = 0;
    for (float g : p.grad()) sq += double(g) * g;
    if (sq > 0) ++live;
  }
  EXPECT_GE(static_cast<double>(live), 0.99 * static_cast<double>(total));
}

TEST(ModelTest, TiedEmbeddingSharesStorage) {
  Model<float> m(small_config(), 3);
  m.params().token_embedding[5] = 42.f;
  EXPECT_EQ(m.params().output_projection[5], 42.f);
  auto copy = m.clone();
  EXPECT_TRUE(copy.params().output_projection.same_storage(copy.params().token_embedding));
  EXPECT_FALSE(copy.params().token_embedding.same_storage(m.params().token_embedding));
  EXPECT_EQ(copy.params().token_embedding[5], 42.f);
}

TEST(ModelTest, SeededInitIsReproducible) {
  Model<float> a(small_config(), 77), b(small_config(), 77), c(small_config(), 78);
  EXPECT_TRUE(std::equal(a.params().layers[1].ff_up.data().begin(), a.params().layers[1].ff_up.data().end(),
                         b.params().layers[1].ff_up.data().begin()));
  EXPECT_NE(a.params().layers[1].ff_up[0], c.params().layers[1].ff_up[0]);
}

class CheckpointTest : public ::testing::Test {
 protected:
  std::filesystem::path path = std::filesystem::temp_directory_path() / "ctrlkit_model_test.ckpt";
  void TearDown() override { std::filesystem::remove(path); }
};

TEST_F(CheckpointTest, RoundTripIsLossless) {
  auto c = small_config();
  c.attn_scale = AttnScale::model_dim;
  Model<float> m(c, 90);
  scramble(m, 91);
  m.save(path.string(), {{"note", {2}, {1.5, -2.5}, false}});
  auto loaded = Model<float>::load(path.string());
  EXPECT_EQ(loaded.model.config(), c);
  EXPECT_EQ(loaded.model.config().hash(), c.hash());
  auto a = m.named_parameters(), b = loaded.model.named_parameters();
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_TRUE(std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin()))
        << a[i].first;
  EXPECT_TRUE(loaded.model.params().output_projection.same_storage(loaded.model.params().token_embedding));
  ASSERT_NE(loaded.extra("note"), nullptr);
  EXPECT_EQ(loaded.extra("note")->values, (std::vector<double>{1.5, -2.5}));
  // Loading twice hashes the same bytes.
  EXPECT_EQ(Model<float>::load(path.string()).file_hash, loaded.file_hash);
}

TEST_F(CheckpointTest, CorruptionRaises) {
  Model<float> m(small_config(), 1);
  m.save(path.string());
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << b;
  };
  for (std::size_t cut : {std::size_t{0}, std::size_t{7}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    write(bytes.substr(0, cut));
    EXPECT_THROW(Model<float>::load(path.string()), FormatError) << cut;
  }
  auto bad = bytes;
  bad[8] = 9;  // version
  write(bad);
  EXPECT_THROW(Model<float>::load(path.string()), FormatError);
}
