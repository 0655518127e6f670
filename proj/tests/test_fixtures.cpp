#include <gtest/gtest.h>

#include <chrono>

#include "support.hpp"

using namespace legrad;

TEST(Prng, ReferenceSplitMixSequence) {
  SplitMix64 g(0);
  EXPECT_EQ(g.next(), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(g.next(), 0x6e789e6aa1b965f4ULL);
  EXPECT_EQ(g.next(), 0x06c45d188009454fULL);
  EXPECT_EQ(g.next(), 0xf88bb8a8724c81ecULL);
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Prng, GoldenFirstSixteenOfNamedStream) {
  static constexpr std::uint64_t golden[16] = {
      0x309f57f0b7ec7d25ULL, 0x13cf7331f309c67aULL, 0x4762a59e75d154daULL, 0x9245d4a1b2c193daULL,
      0x03503f4f59b451d6ULL, 0xa6c59c534cac357dULL, 0x37b4f1f9287c1b94ULL, 0x75cdecf9d3a7c82cULL,
      0xdf53721c0d5924dbULL, 0xffb50def2ae4ab31ULL, 0xaf9f83d5a68208bfULL, 0x3a5c1cd40f4667f0ULL,
      0xd04579c2cb575e6dULL, 0xf75ef64cd85d4e82ULL, 0x494405922db45854ULL, 0x658945363be65111ULL};
  auto s = SplitMix64::stream(0, "golden");
  for (std::uint64_t v : golden) EXPECT_EQ(s.next(), v);
  const auto t = random_tensor<double>(0, "w", {4});
  EXPECT_EQ(t[0], -0.94000175423901622);
  EXPECT_EQ(t[3], 0.92740203660216114);
}

TEST(Prng, StreamsAreIndependentOfOtherNames) {
  const auto a = random_tensor<double>(7, "blocks.0.mlp.fc1.weight", {3, 3});
  const auto b = random_tensor<double>(7, "blocks.0.mlp.fc1.weight", {3, 3});
  const auto c = random_tensor<double>(7, "blocks.0.mlp.fc2.weight", {3, 3});
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (double v : a.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(TinyVit, SameSeedGivesIdenticalBundles) {
  TinyVitSpec s;
  const auto a = make_tiny_vit<double>(s), b = make_tiny_vit<double>(s);
  EXPECT_EQ(container_write(bundle_to_file(a)), container_write(bundle_to_file(b)));
  s.seed = 1;
  EXPECT_NE(container_write(bundle_to_file(a)), container_write(bundle_to_file(make_tiny_vit<double>(s))));
}

TEST(TinyVit, MinimalAndPoolerVariants) {
  TinyVitSpec s;
  s.layers = 1;
  s.heads = 1;
  s.width = 4;
  s.patches = 1;
  const auto one = make_tiny_vit<double>(s);
  EXPECT_NO_THROW(one.config.validate());
  EXPECT_EQ(one.config.tokens(), 2u);
  s.pooling = Pooling::attn_pooler;
  s.pooler_out = true;
  const auto pool = make_tiny_vit<double>(s);
  ASSERT_TRUE(pool.weights.pooler.has_value());
  EXPECT_TRUE(pool.weights.pooler->out.has_value());
  EXPECT_FALSE(pool.weights.cls_token.has_value());
  EXPECT_EQ(pool.config.tokens(), 1u);
}

TEST(FdBattery, DefaultBatteryCoversSpecAndPasses) {
  const auto specs = default_fd_battery();
  ASSERT_EQ(specs.size(), 20u);
  bool cls = false, pool = false;
  for (const auto& s : specs) {
    EXPECT_LE(s.layers, 3u);
    EXPECT_LE(s.heads, 2u);
    EXPECT_LE(s.width, 16u);
    EXPECT_LE(s.patches, 16u);
    cls |= s.pooling == Pooling::cls_token;
    pool |= s.pooling == Pooling::attn_pooler;
  }
  EXPECT_TRUE(cls && pool);
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = run_fd_battery(specs);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_TRUE(report.passed) << "max rel error " << report.max_rel_error;
  EXPECT_LT(secs, 60.0);
  for (const auto& c : report.configs) EXPECT_EQ(c.layers.size(), c.spec.layers);
}

TEST(FdBattery, SignFlippedGradientFails) {
  const auto report = run_fd_battery(default_fd_battery(), 1e-4,
                                     [](const ForwardTrace<double>& t, std::size_t l, const Query<double>& q,
                                        const ModelBundle<double>& b) { return scale(analytic_attention_gradient(t, l, q, b), -1.0); });
  EXPECT_FALSE(report.passed);
  std::size_t failing = 0;
  for (const auto& c : report.configs) failing += !c.passed;
  EXPECT_GE(failing, 15u);
}

TEST(FdBattery, HalvingTheStepBarelyMovesTheEstimate) {
  auto specs = default_fd_battery();
  specs.resize(6);
  const auto report = run_fd_battery(specs, 1e-4, analytic_attention_gradient, true);
  for (const auto& c : report.configs)
    for (const auto& l : c.layers) EXPECT_LT(l.step_stability, 1e-6) << to_string(c.spec) << " layer " << l.layer;
}

TEST(Fixtures, ChecksumsMatch) {
  EXPECT_TRUE(support::verify_checksums(LEGRAD_FIXTURE_DIR).empty());
}

TEST(Fixtures, ParityWithReferenceForward) {
  for (const char* name : {"parity_cls_f64.lgtc", "parity_pool_f64.lgtc"}) {
    const auto r = support::check_parity<double>(std::filesystem::path(LEGRAD_FIXTURE_DIR) / name);
    EXPECT_LE(r.tokens, 1e-4) << name;
    EXPECT_LE(r.logits, 1e-4) << name;
  }
  for (const char* name : {"parity_cls_f32.lgtc", "parity_pool_f32.lgtc"}) {
    const auto r = support::check_parity<float>(std::filesystem::path(LEGRAD_FIXTURE_DIR) / name);
    EXPECT_LE(r.tokens, 1e-4) << name;
    EXPECT_LE(r.logits, 1e-4) << name;
  }
}
