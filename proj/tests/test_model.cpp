#include <gtest/gtest.h>

#include "legrad/fixtures.hpp"
#include "oracles.hpp"

using namespace legrad;

namespace {

TinyVitSpec spec(Pooling pooling, std::uint64_t seed = 3) {
  TinyVitSpec s;
  s.seed = seed;
  s.layers = 2;
  s.heads = 2;
  s.width = 8;
  s.patches = 4;
  s.pooling = pooling;
  return s;
}

double max_diff(const oracle::Mat& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b(i, j)));
  return m;
}

double max_diff(const oracle::Vec& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Config, Validation) {
  ViTConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.patches(), 196u);
  EXPECT_EQ(c.tokens(), 197u);
  c.patch_size = 15;
  EXPECT_THROW(c.validate(), ModelError);
  c = ViTConfig{};
  c.heads = 5;
  EXPECT_THROW(c.validate(), ModelError);
  c = ViTConfig{};
  c.class_token = false;
  EXPECT_THROW(c.validate(), ModelError);
}

TEST(Preprocess, ConstantGrayNormalizesToZero) {
  Image img(5, 7, 3, 0.25f);
  Preprocessing p;
  p.mean = {0.25, 0.25, 0.25};
  p.stddev = {1, 1, 1};
  const auto out = preprocess<double>(img, p, 4);
  for (double v : out.input.values()) EXPECT_EQ(v, 0.0);
}

TEST(Preprocess, MatchingSizeIdentityNormalization) {
  const Image img = make_test_image(1, 6, 6);
  const auto out = preprocess<double>(img, Preprocessing{}, 6);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 6; ++x) EXPECT_EQ(out.input(c, y, x), static_cast<double>(img.at(x, y, c)));
}

TEST(Preprocess, WideImageSelectsCenterRegion) {
  const Image img = make_test_image(2, 448, 224);
  const auto out = preprocess<double>(img, Preprocessing{}, 224);
  EXPECT_EQ(out.geometry.crop_x, 112u);
  EXPECT_EQ(out.geometry.crop_y, 0u);
  for (std::size_t y = 0; y < 224; y += 37)
    for (std::size_t x = 0; x < 224; x += 41)
      for (std::size_t c = 0; c < 3; ++c)
        ASSERT_EQ(out.input(c, y, x), static_cast<double>(img.at(x + 112, y, c)));
}

TEST(Preprocess, ShorterSideResizedWithTruncation) {
  const auto g = crop_geometry(640, 480, 224);
  EXPECT_EQ(g.resized_h, 224u);
  EXPECT_EQ(g.resized_w, 298u);  // floor(640 * 224 / 480)
  EXPECT_EQ(g.crop_x, 37u);
  const auto p = g.map_point(0, 0);
  EXPECT_FALSE(p.has_value());
  const auto center = g.map_point(320, 240);
  ASSERT_TRUE(center.has_value());
  EXPECT_EQ(center->first, 112u);
  EXPECT_EQ(center->second, 112u);
}

TEST(Embed, ZeroImageZeroKernelGivesPositionalEmbeddings) {
  auto b = make_tiny_vit<double>(spec(Pooling::cls_token));
  for (auto& v : b.weights.patch_embed.weight.values()) v = 0;
  for (auto& v : b.weights.patch_embed.bias->values()) v = 0;
  const auto z = embed(Tensor<double>({3, 4, 4}), b.weights, b.config);
  for (std::size_t i = 0; i < z.dim(0); ++i)
    for (std::size_t j = 0; j < z.dim(1); ++j)
      EXPECT_EQ(z(i, j), b.weights.pos_embed(i, j) + (i == 0 ? (*b.weights.cls_token)[j] : 0.0));
}

TEST(Embed, SingleNonzeroPatchIsLocal) {
  const auto b = make_tiny_vit<double>(spec(Pooling::cls_token));
  const Tensor<double> zero({3, 4, 4});
  Tensor<double> one = zero;
  one(1, 0, 3) = 2.0;  // patch (row 0, col 1) -> index 1
  const auto z0 = embed(zero, b.weights, b.config), z1 = embed(one, b.weights, b.config);
  for (std::size_t i = 0; i < z0.dim(0); ++i) {
    bool differs = false;
    for (std::size_t j = 0; j < z0.dim(1); ++j) differs |= z0(i, j) != z1(i, j);
    EXPECT_EQ(differs, i == 2) << "row " << i;
  }
}

TEST(Embed, MatchesPerPatchOracle) {
  for (Pooling p : {Pooling::cls_token, Pooling::attn_pooler}) {
    const auto b = make_tiny_vit<double>(spec(p, 8));
    const auto input = random_input(b, 5);
    EXPECT_LE(max_diff(oracle::embed(b, input), embed(input, b.weights, b.config)), 1e-12);
  }
}

TEST(Forward, ZeroLayersIsDegenerate) {
  auto s = spec(Pooling::cls_token);
  s.layers = 0;
  const auto b = make_tiny_vit<double>(s);
  const auto z0 = embed(random_input(b, 1), b.weights, b.config);
  const auto tr = forward_trace(z0, b.weights, b.config);
  ASSERT_EQ(tr.tokens.size(), 1u);
  EXPECT_EQ(tr.tokens[0], z0);
  EXPECT_TRUE(tr.attention.empty());
}

TEST(Forward, AttentionRowsAreStochastic) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto s = spec(seed % 2 ? Pooling::attn_pooler : Pooling::cls_token, seed);
    s.layers = 3;
    s.patches = 9;
    const auto b = make_tiny_vit<double>(s);
    const auto tr = forward_trace(embed(random_input(b, seed), b.weights, b.config), b.weights, b.config);
    for (const auto& a : tr.attention)
      for (std::size_t h = 0; h < a.dim(0); ++h)
        for (std::size_t i = 0; i < a.dim(1); ++i) {
          double sum = 0;
          for (std::size_t j = 0; j < a.dim(2); ++j) sum += a(h, i, j);
          ASSERT_NEAR(sum, 1.0, 1e-5);
        }
  }
}

TEST(Forward, MatchesStraightLineReference) {
  for (Pooling p : {Pooling::cls_token, Pooling::attn_pooler}) {
    const auto b = make_tiny_vit<double>(spec(p, 11));
    const auto input = random_input(b, 12);
    const auto tr = forward_trace(embed(input, b.weights, b.config), b.weights, b.config);
    const auto ref = oracle::forward(b, input, b.classifier());
    for (std::size_t l = 0; l <= b.config.layers; ++l) EXPECT_LE(max_diff(ref.z[l], tr.tokens[l]), 1e-6);
    EXPECT_LE(max_diff(ref.logits, predict(input, b, b.classifier())), 1e-6);
  }
}

TEST(Forward, ErfGeluMatchesReference) {
  auto b = make_tiny_vit<double>(spec(Pooling::cls_token, 13));
  b.config.gelu = GeluKind::erf;
  const auto input = random_input(b, 14);
  const auto tr = forward_trace(embed(input, b.weights, b.config), b.weights, b.config);
  EXPECT_LE(max_diff(oracle::forward(b, input, b.classifier()).z.back(), tr.tokens.back()), 1e-6);
}

TEST(Forward, TraceCompletenessBitwise) {
  const auto b = make_tiny_vit<double>(spec(Pooling::cls_token, 15));
  const auto tr = forward_trace(embed(random_input(b, 1), b.weights, b.config), b.weights, b.config);
  for (std::size_t l = 1; l <= b.config.layers; ++l) {
    const auto r = block_forward(b.weights.blocks[l - 1], b.config, tr.tokens[l - 1]);
    EXPECT_EQ(r.output, tr.tokens[l]);
    EXPECT_EQ(r.attention, tr.attention_at(l));
    const auto again = block_forward(b.weights.blocks[l - 1], b.config, tr.tokens[l - 1], &tr.attention_at(l));
    EXPECT_EQ(again.output, tr.tokens[l]);
  }
}

TEST(Forward, NonFiniteNamesTheLayer) {
  auto b = make_tiny_vit<double>(spec(Pooling::cls_token, 16));
  b.weights.blocks[1].fc2.weight[0] = std::numeric_limits<double>::infinity();
  try {
    forward_trace(embed(random_input(b, 1), b.weights, b.config), b.weights, b.config);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 2"), std::string::npos) << e.what();
  }
}

TEST(Forward, Float32AgreesWithFloat64) {
  for (Pooling p : {Pooling::cls_token, Pooling::attn_pooler}) {
    const auto s = spec(p, 17);
    const auto b64 = make_tiny_vit<double>(s);
    const auto b32 = make_tiny_vit<float>(s);
    const auto in64 = random_input(b64, 2);
    const auto t64 = forward_trace(embed(in64, b64.weights, b64.config), b64.weights, b64.config);
    const auto t32 = forward_trace(embed(in64.cast<float>(), b32.weights, b32.config), b32.weights, b32.config);
    EXPECT_LE(max_abs_diff(t64.tokens.back(), t32.tokens.back().cast<double>()), 1e-3);
  }
}

TEST(PoolCls, NormalizedTokenWithoutProjectionIsVerbatim) {
  auto s = spec(Pooling::cls_token);
  s.projection = false;
  s.width = 2;
  s.heads = 1;
  auto b = make_tiny_vit<double>(s);
  b.weights.final_norm = {Tensor<double>({2}, 1.0), Tensor<double>({2}, 0.0)};
  const std::vector<double> token{1.0, -1.0};
  const auto e = cls_embedding<double>(token, b.weights, b.config);
  EXPECT_NEAR(e[0], 1.0, 1e-5);
  EXPECT_NEAR(e[1], -1.0, 1e-5);
}

TEST(PoolCls, ZeroProjectionGivesZero) {
  auto b = make_tiny_vit<double>(spec(Pooling::cls_token));
  for (auto& v : b.weights.proj->values()) v = 0;
  const auto tr = forward_trace(embed(random_input(b, 1), b.weights, b.config), b.weights, b.config);
  const auto e = pool_cls(tr, b);
  for (double v : e.values()) EXPECT_EQ(v, 0.0);
}

TEST(PoolCls, MatchesCompositionOracleAndRejectsPooler) {
  const auto b = make_tiny_vit<double>(spec(Pooling::cls_token, 19));
  const auto tr = forward_trace(embed(random_input(b, 3), b.weights, b.config), b.weights, b.config);
  EXPECT_LE(max_diff(oracle::head(b, oracle::rows_of(tr.tokens.back())).embedding, pool_cls(tr, b)), 1e-12);
  const auto bp = make_tiny_vit<double>(spec(Pooling::attn_pooler));
  const auto tp = forward_trace(embed(random_input(bp, 3), bp.weights, bp.config), bp.weights, bp.config);
  EXPECT_THROW(pool_cls(tp, bp), ModelError);
}

TEST(PoolAttn, ZeroKeysGiveUniformAttention) {
  auto b = make_tiny_vit<double>(spec(Pooling::attn_pooler));
  auto p = *b.weights.pooler;
  for (auto& v : p.key.values()) v = 0;
  const auto tokens = Tensor<double>::arange({4, 8});
  const auto [z, a] = pool_attn(tokens, p, 2);
  for (double v : a.values()) EXPECT_DOUBLE_EQ(v, 0.25);
  const auto V = matmul(tokens, p.value);
  for (std::size_t k = 0; k < 8; ++k) {
    double m = 0;
    for (std::size_t j = 0; j < 4; ++j) m += V(j, k);
    EXPECT_NEAR(z[k], m / 4, 1e-12);
  }
}

TEST(PoolAttn, SingleToken) {
  const auto b = make_tiny_vit<double>(spec(Pooling::attn_pooler));
  const auto tokens = random_tensor<double>(1, "tok", {1, 8});
  const auto [z, a] = pool_attn(tokens, *b.weights.pooler, 2);
  EXPECT_EQ(a.shape(), (Shape{2, 1, 1}));
  EXPECT_EQ(a[0], 1.0);
  EXPECT_LE(max_abs_diff(z, matmul(tokens, b.weights.pooler->value).reshaped({8})), 1e-15);
}

TEST(PoolAttn, MatchesTermByTermOracle) {
  auto s = spec(Pooling::attn_pooler, 21);
  s.pooler_out = true;
  const auto b = make_tiny_vit<double>(s);
  const auto tr = forward_trace(embed(random_input(b, 4), b.weights, b.config), b.weights, b.config);
  const auto ref = oracle::head(b, oracle::rows_of(tr.tokens.back()));
  EXPECT_LE(max_diff(ref.embedding, image_embedding(tr.tokens.back(), b)), 1e-6);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(ref.attention[h][j], tr.pooler.back().attention(h, 0, j), 1e-12);
}

TEST(PoolAttn, MissingWeightsThrow) {
  auto b = make_tiny_vit<double>(spec(Pooling::attn_pooler));
  b.weights.pooler.reset();
  EXPECT_THROW(pool_tokens(Tensor<double>({4, 8}), b.weights, b.config), ModelError);
}

TEST(Classify, IdentityHeadOrthogonalAndScale) {
  Classifier<double> c;
  c.kind = ClassifierKind::learned_head;
  c.matrix = Tensor<double>::identity(3);
  const auto z = Tensor<double>::vector({0.5, -2, 3});
  EXPECT_EQ(classify(z, c), z);
  c.matrix = Tensor<double>::matrix({{0, 1}, {0, 0}, {0, 0}});
  EXPECT_EQ(classify(Tensor<double>::vector({0, 4, 1}), c)[1], 0.0);

  Classifier<double> t;
  t.kind = ClassifierKind::text_embeddings;
  t.matrix = Tensor<double>::matrix({{0.6, 0}, {0.8, 1}});
  const auto a = classify(Tensor<double>::vector({1, 2}), t);
  const auto b = classify(Tensor<double>::vector({10, 20}), t);
  EXPECT_NEAR(a[0], b[0], 1e-15);
  EXPECT_NEAR(a[1], b[1], 1e-15);
  EXPECT_THROW(classify(Tensor<double>::vector({1, 2, 3}), t), ShapeError);
}

TEST(Classify, PermutingColumnsPermutesScores) {
  const auto b = make_tiny_vit<double>(spec(Pooling::cls_token, 23));
  const auto input = random_input(b, 5);
  const auto y = predict(input, b, b.classifier());
  Classifier<double> perm = b.classifier();
  const std::vector<std::size_t> order{2, 0, 1};
  for (std::size_t i = 0; i < perm.matrix.dim(0); ++i)
    for (std::size_t c = 0; c < 3; ++c) perm.matrix(i, c) = b.classifier().matrix(i, order[c]);
  const auto yp = predict(input, b, perm);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(yp[c], y[order[c]]);
  EXPECT_EQ(order[argmax(yp)], argmax(y));
}

TEST(Bundle, ContainerRoundTrip) {
  for (Pooling p : {Pooling::cls_token, Pooling::attn_pooler}) {
    auto s = spec(p, 25);
    s.pooler_out = p == Pooling::attn_pooler;
    const auto b = make_tiny_vit<double>(s);
    const auto back = bundle_from_file<double>(container_read(container_write(bundle_to_file(b))));
    const auto input = random_input(b, 1);
    EXPECT_EQ(predict(input, back, back.classifier()), predict(input, b, b.classifier()));
    EXPECT_EQ(back.classifier().labels, b.classifier().labels);
    EXPECT_EQ(back.provenance, b.provenance);
    ASSERT_NE(back.embedding("empty"), nullptr);
    EXPECT_EQ(back.embedding("empty")->prompt, "a photo of");
  }
}

TEST(Bundle, RejectsNonUnitTextColumns) {
  auto b = make_tiny_vit<double>(spec(Pooling::cls_token));
  b.classifiers.front().matrix(0, 0) += 0.01;
  EXPECT_THROW(bundle_from_file<double>(bundle_to_file(b)), ModelError);
}

TEST(Bundle, MissingTensorIsReported) {
  const auto b = make_tiny_vit<double>(spec(Pooling::cls_token));
  TensorFile f = bundle_to_file(b);
  f.tensors.erase(std::remove_if(f.tensors.begin(), f.tensors.end(),
                                 [](const NamedTensor& t) { return t.name == "blocks.1.mlp.fc1.weight"; }),
                  f.tensors.end());
  try {
    bundle_from_file<double>(f);
    FAIL();
  } catch (const ContainerError& e) {
    EXPECT_EQ(e.code(), ContainerErrc::missing_tensor);
  }
}

TEST(Bundle, ShapeMismatchIsReported) {
  const auto b = make_tiny_vit<double>(spec(Pooling::cls_token));
  TensorFile f = bundle_to_file(b);
  for (auto& t : f.tensors)
    if (t.name == "pos_embed") t.tensor = Tensor<double>({4, 8});
  EXPECT_THROW(bundle_from_file<double>(f), Error);
}
