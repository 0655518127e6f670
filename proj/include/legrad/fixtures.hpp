#pragma once

// Deterministic tiny-model generator and the finite-difference battery.
//
// Weights come from SplitMix64 streams keyed by (seed, tensor name): the
// stream for a tensor is seeded with splitmix64(seed ^ fnv1a64(name)), and
// each draw u = (next() >> 11) * 2^-53 is mapped to 2u - 1. Adding a tensor
// therefore never changes the values of any other tensor.

#include <cstdint>
#include <functional>
#include <string_view>

#include "legrad/explain.hpp"

namespace legrad {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = kFnvOffset;
  for (unsigned char c : s) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform in [-1, 1).
  double symmetric() { return 2.0 * uniform() - 1.0; }

  static SplitMix64 stream(std::uint64_t seed, std::string_view name) {
    SplitMix64 mix(seed ^ fnv1a64(name));
    return SplitMix64(mix.next());
  }

 private:
  std::uint64_t state_;
};

template <typename T>
Tensor<T> random_tensor(std::uint64_t seed, std::string_view name, Shape shape, double scale = 1.0,
                        double offset = 0.0) {
  SplitMix64 rng = SplitMix64::stream(seed, name);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(offset + scale * rng.symmetric());
  return t;
}

struct TinyVitSpec {
  std::uint64_t seed = 0;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t width = 8;
  std::size_t patches = 4;  // perfect square
  Pooling pooling = Pooling::cls_token;
  std::size_t patch_size = 2;
  std::size_t classes = 3;
  ClassifierKind classifier = ClassifierKind::text_embeddings;
  bool pooler_out = false;
  bool projection = true;
};

inline std::string to_string(const TinyVitSpec& s) {
  return "seed=" + std::to_string(s.seed) + " L=" + std::to_string(s.layers) + " h=" + std::to_string(s.heads) +
         " d=" + std::to_string(s.width) + " n=" + std::to_string(s.patches) + " pooling=" + to_string(s.pooling);
}

/// Seeded random ViT; weights scaled by 1/sqrt(d), LayerNorm gains near 1.
template <typename T>
ModelBundle<T> make_tiny_vit(const TinyVitSpec& s) {
  ModelBundle<T> b;
  auto& c = b.config;
  c.layers = s.layers;
  c.heads = s.heads;
  c.width = s.width;
  c.patch_size = s.patch_size;
  c.image_size = s.patch_size * exact_sqrt(s.patches);
  c.mlp_ratio = 2.0;
  c.pooling = s.pooling;
  c.class_token = s.pooling == Pooling::cls_token;
  c.validate();
  const std::size_t d = c.width, m = c.mlp_width();
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));
  const auto seed = s.seed;
  auto rnd = [&](const std::string& name, Shape shape, double scale = -1, double offset = 0) {
    return random_tensor<T>(seed, name, std::move(shape), scale < 0 ? sc : scale, offset);
  };
  auto& w = b.weights;
  w.patch_embed = {rnd("patch_embed.weight", {3 * c.patch_size * c.patch_size, d}), rnd("patch_embed.bias", {d})};
  if (c.class_token) w.cls_token = rnd("cls_token", {d}, 1.0);
  w.pos_embed = rnd("pos_embed", {c.tokens(), d}, 1.0);
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = block_prefix(i);
    BlockWeights<T> bw;
    bw.ln1 = {rnd(p + ".ln1.weight", {d}, 0.1, 1.0), rnd(p + ".ln1.bias", {d}, 0.1)};
    bw.qkv = {rnd(p + ".attn.qkv.weight", {d, 3 * d}, 2 * sc), rnd(p + ".attn.qkv.bias", {3 * d})};
    bw.proj = {rnd(p + ".attn.proj.weight", {d, d}), rnd(p + ".attn.proj.bias", {d})};
    bw.ln2 = {rnd(p + ".ln2.weight", {d}, 0.1, 1.0), rnd(p + ".ln2.bias", {d}, 0.1)};
    bw.fc1 = {rnd(p + ".mlp.fc1.weight", {d, m}), rnd(p + ".mlp.fc1.bias", {m})};
    bw.fc2 = {rnd(p + ".mlp.fc2.weight", {m, d}), rnd(p + ".mlp.fc2.bias", {d})};
    w.blocks.push_back(std::move(bw));
  }
  w.final_norm = {rnd("ln_final.weight", {d}, 0.1, 1.0), rnd("ln_final.bias", {d}, 0.1)};
  if (s.pooling == Pooling::attn_pooler) {
    AttnPoolerWeights<T> pw{rnd("pool.query", {d}, 1.0), rnd("pool.key.weight", {d, d}, 2 * sc),
                            rnd("pool.value.weight", {d, d}), std::nullopt};
    if (s.pooler_out) pw.out = Linear<T>{rnd("pool.out.weight", {d, d}), rnd("pool.out.bias", {d})};
    w.pooler = std::move(pw);
  }
  if (s.projection) w.proj = rnd("proj", {b.pooled_width(), d});
  const std::size_t e = b.embed_dim();

  auto unit_columns = [](Tensor<T> m) {
    for (std::size_t j = 0; j < m.dim(1); ++j) {
      T sq = 0;
      for (std::size_t i = 0; i < m.dim(0); ++i) sq += m(i, j) * m(i, j);
      const T inv = T{1} / std::sqrt(sq);
      for (std::size_t i = 0; i < m.dim(0); ++i) m(i, j) *= inv;
    }
    return m;
  };
  Classifier<T> cl;
  cl.name = s.classifier == ClassifierKind::text_embeddings ? "text" : "head";
  cl.kind = s.classifier;
  cl.matrix = rnd("classifier." + cl.name + ".weight", {e, s.classes}, 1.0);
  if (cl.kind == ClassifierKind::text_embeddings) cl.matrix = unit_columns(std::move(cl.matrix));
  for (std::size_t k = 0; k < s.classes; ++k) cl.labels.push_back("class" + std::to_string(k));
  b.classifiers.push_back(std::move(cl));
  NamedEmbedding<T> empty{"empty", "a photo of", unit_columns(rnd("embedding.empty", {e, 1}, 1.0)).reshaped({e})};
  b.embeddings.push_back(std::move(empty));

  b.preprocessing.mean = {0.5, 0.5, 0.5};
  b.preprocessing.stddev = {0.25, 0.25, 0.25};
  b.provenance = "tiny-vit " + to_string(s);
  return b;
}

/// Deterministic RGB test image.
inline Image make_test_image(std::uint64_t seed, std::size_t width, std::size_t height) {
  SplitMix64 rng = SplitMix64::stream(seed, "image");
  Image img(width, height, 3);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

template <typename T>
Tensor<T> random_input(const ModelBundle<T>& b, std::uint64_t seed) {
  const std::size_t s = b.config.image_size;
  return random_tensor<T>(seed, "input", {3, s, s}, 1.0);
}

// ---------------------------------------------------------------------------
// FD battery

/// |a - b| / max(|a|, |b|, floor)
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor = 1e-8) {
  if (a.shape() != b.shape()) throw ShapeError("max_relative_error: shape mismatch");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, relative_error(a[i], b[i], floor));
  return m;
}

using AttentionGradientFn = std::function<Tensor<double>(const ForwardTrace<double>&, std::size_t,
                                                         const Query<double>&, const ModelBundle<double>&)>;

inline Tensor<double> analytic_attention_gradient(const ForwardTrace<double>& t, std::size_t l,
                                                  const Query<double>& q, const ModelBundle<double>& b) {
  return grad_attention(t, l, q, b).grad;
}

struct FdLayerResult {
  std::size_t layer = 0;
  double max_rel_error = 0;
  double step_stability = 0;  // max |fd(eps) - fd(eps/2)|
};

struct FdConfigResult {
  TinyVitSpec spec;
  std::vector<FdLayerResult> layers;
  double max_rel_error = 0;
  bool passed = false;
};

struct FdBatteryReport {
  std::vector<FdConfigResult> configs;
  double tolerance = 1e-4;
  bool passed = false;
  double max_rel_error = 0;
};

/// The default 20-model battery: both pooling modes, L <= 3, h <= 2,
/// d <= 16, n <= 16.
inline std::vector<TinyVitSpec> default_fd_battery() {
  static constexpr std::size_t widths[] = {4, 8, 12, 16};
  static constexpr std::size_t patches[] = {1, 4, 9, 16};
  std::vector<TinyVitSpec> out;
  for (std::size_t i = 0; i < 20; ++i) {
    TinyVitSpec s;
    s.seed = 1000 + i;
    s.pooling = i % 2 ? Pooling::attn_pooler : Pooling::cls_token;
    s.layers = 1 + i % 3;
    s.heads = 1 + (i / 3) % 2;
    s.width = widths[(i / 2) % 4];
    s.patches = patches[(i / 5) % 4];
    s.classifier = i % 4 == 3 ? ClassifierKind::learned_head : ClassifierKind::text_embeddings;
    s.pooler_out = i % 6 == 5;
    out.push_back(s);
  }
  return out;
}

/// Compares `gradient` against central differences at every layer of every
/// configuration. Configurations are independent; report order follows input.
inline FdBatteryReport run_fd_battery(const std::vector<TinyVitSpec>& specs, double tolerance = 1e-4,
                                      const AttentionGradientFn& gradient = analytic_attention_gradient,
                                      bool check_step_stability = false) {
  FdBatteryReport report;
  report.tolerance = tolerance;
  report.passed = true;
  for (const auto& spec : specs) {
    const auto bundle = make_tiny_vit<double>(spec);
    const auto z0 = embed(random_input(bundle, spec.seed), bundle.weights, bundle.config);
    const auto trace = forward_trace(z0, bundle.weights, bundle.config);
    const auto q = query_for_class(bundle.classifier(), 0);
    FdConfigResult r;
    r.spec = spec;
    for (std::size_t l = 1; l <= bundle.config.layers; ++l) {
      FdLayerResult lr;
      lr.layer = l;
      const Tensor<double> fd = fd_grad_attention(bundle, z0, l, q);
      lr.max_rel_error = max_relative_error(gradient(trace, l, q, bundle), fd);
      if (check_step_stability) lr.step_stability = max_abs_diff(fd, fd_grad_attention(bundle, z0, l, q, 0.5e-4));
      r.max_rel_error = std::max(r.max_rel_error, lr.max_rel_error);
      r.layers.push_back(lr);
    }
    r.passed = r.max_rel_error < tolerance;
    report.passed = report.passed && r.passed;
    report.max_rel_error = std::max(report.max_rel_error, r.max_rel_error);
    report.configs.push_back(std::move(r));
  }
  return report;
}

}  // namespace legrad
