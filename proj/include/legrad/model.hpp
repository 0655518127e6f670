#pragma once

// Vision Transformer inference with per-layer trace capture.
//
// Blocks are pre-LN:  Zh = Z + MSA(LN1(Z)),  Z' = Zh + MLP(LN2(Zh)).
// Linear weights are stored [in, out] so every projection is `x * W + b`
// over row-vector tokens. Patches are flattened channel-major (c, y, x) and
// enumerated row-major over the patch grid.

#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "legrad/container.hpp"
#include "legrad/image.hpp"
#include "legrad/tensor.hpp"

namespace legrad {

enum class Pooling : std::uint8_t { cls_token, attn_pooler };

inline const char* to_string(Pooling p) { return p == Pooling::cls_token ? "cls_token" : "attn_pooler"; }

class ModelError : public Error {
 public:
  using Error::Error;
};

struct ViTConfig {
  std::size_t layers = 12;
  std::size_t heads = 12;
  std::size_t width = 768;
  std::size_t patch_size = 16;
  std::size_t image_size = 224;
  double mlp_ratio = 4.0;
  Pooling pooling = Pooling::cls_token;
  bool class_token = true;
  GeluKind gelu = GeluKind::tanh;
  double ln_eps = kLayerNormEps;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patches() const { return grid() * grid(); }
  std::size_t tokens() const { return patches() + (class_token ? 1 : 0); }
  std::size_t first_patch() const { return class_token ? 1 : 0; }
  std::size_t head_dim() const { return width / heads; }
  std::size_t mlp_width() const {
    return static_cast<std::size_t>(std::lround(static_cast<double>(width) * mlp_ratio));
  }

  void validate() const {
    if (heads == 0 || width == 0 || patch_size == 0 || image_size == 0)
      throw ModelError("config: heads, width, patch_size and image_size must be positive");
    if (image_size % patch_size != 0)
      throw ModelError("config: image_size " + std::to_string(image_size) +
                       " not divisible by patch_size " + std::to_string(patch_size));
    if (width % heads != 0)
      throw ModelError("config: width " + std::to_string(width) + " not divisible by heads " +
                       std::to_string(heads));
    if (pooling == Pooling::cls_token && !class_token)
      throw ModelError("config: cls_token pooling requires a class token");
    if (mlp_width() == 0) throw ModelError("config: mlp width must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ViTConfig& c) {
  j = {{"layers", c.layers},         {"heads", c.heads},
       {"width", c.width},           {"patch_size", c.patch_size},
       {"image_size", c.image_size}, {"mlp_ratio", c.mlp_ratio},
       {"pooling", to_string(c.pooling)},
       {"class_token", c.class_token},
       {"gelu", c.gelu == GeluKind::tanh ? "tanh" : "erf"},
       {"ln_eps", c.ln_eps}};
}

inline void from_json(const nlohmann::json& j, ViTConfig& c) {
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.image_size = j.at("image_size").get<std::size_t>();
  c.mlp_ratio = j.value("mlp_ratio", 4.0);
  const auto pooling = j.value("pooling", std::string("cls_token"));
  if (pooling == "cls_token")
    c.pooling = Pooling::cls_token;
  else if (pooling == "attn_pooler")
    c.pooling = Pooling::attn_pooler;
  else
    throw ModelError("config: unknown pooling " + pooling);
  c.class_token = j.value("class_token", c.pooling == Pooling::cls_token);
  const auto gelu = j.value("gelu", std::string("tanh"));
  if (gelu != "tanh" && gelu != "erf") throw ModelError("config: unknown gelu " + gelu);
  c.gelu = gelu == "tanh" ? GeluKind::tanh : GeluKind::erf;
  c.ln_eps = j.value("ln_eps", kLayerNormEps);
}

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  std::optional<Tensor<T>> bias;

  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }

  Tensor<T> apply(const Tensor<T>& x) const {
    Tensor<T> y = matmul(x, weight);
    return bias ? add_row_vector(y, *bias) : y;
  }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
struct BlockWeights {
  LayerNormParams<T> ln1;
  Linear<T> qkv;   // [d, 3d], columns ordered Q | K | V, heads contiguous in each
  Linear<T> proj;  // [d, d]
  LayerNormParams<T> ln2;
  Linear<T> fc1;  // [d, m]
  Linear<T> fc2;  // [m, d]
};

/// Attentional pooler. The minimal form is a learned query attending over
/// patch tokens through key/value projections; `out` is the optional output
/// projection of richer poolers.
template <typename T>
struct AttnPoolerWeights {
  Tensor<T> query;  // [d]
  Tensor<T> key;    // [d, d]
  Tensor<T> value;  // [d, d]
  std::optional<Linear<T>> out;
};

template <typename T>
struct ViTWeights {
  Linear<T> patch_embed;  // [3 p p, d]
  std::optional<Tensor<T>> cls_token;
  Tensor<T> pos_embed;  // [tokens, d]
  std::vector<BlockWeights<T>> blocks;
  LayerNormParams<T> final_norm;
  std::optional<Tensor<T>> proj;  // [d', e]
  std::optional<AttnPoolerWeights<T>> pooler;
};

enum class ClassifierKind : std::uint8_t { learned_head, text_embeddings };

inline const char* to_string(ClassifierKind k) {
  return k == ClassifierKind::learned_head ? "learned_head" : "text_embeddings";
}

template <typename T>
struct Classifier {
  std::string name;
  ClassifierKind kind = ClassifierKind::learned_head;
  Tensor<T> matrix;  // [e, C]
  std::vector<std::string> labels;

  std::size_t classes() const { return matrix.dim(1); }
  std::size_t embed_dim() const { return matrix.dim(0); }

  Tensor<T> column(std::size_t c) const {
    Tensor<T> col({matrix.dim(0)});
    for (std::size_t i = 0; i < matrix.dim(0); ++i) col[i] = matrix(i, c);
    return col;
  }

  std::optional<std::size_t> find_label(std::string_view label) const {
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) return i;
    return std::nullopt;
  }
};

/// A single named embedding (e.g. the empty prompt used for background
/// suppression) scored like a one-column text classifier.
template <typename T>
struct NamedEmbedding {
  std::string name;
  std::string prompt;
  Tensor<T> vector;  // [e]
};

struct Preprocessing {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
  std::string resize = "bilinear";
  std::string crop = "center";
};

inline void to_json(nlohmann::json& j, const Preprocessing& p) {
  j = {{"mean", p.mean}, {"std", p.stddev}, {"resize", p.resize}, {"crop", p.crop}};
}

inline void from_json(const nlohmann::json& j, Preprocessing& p) {
  p.mean = j.at("mean").get<std::array<double, 3>>();
  p.stddev = j.at("std").get<std::array<double, 3>>();
  p.resize = j.value("resize", std::string("bilinear"));
  p.crop = j.value("crop", std::string("center"));
  if (p.resize != "bilinear") throw ModelError("preprocess: unsupported resize " + p.resize);
  if (p.crop != "center") throw ModelError("preprocess: unsupported crop " + p.crop);
  for (double s : p.stddev)
    if (!(s > 0)) throw ModelError("preprocess: std must be positive");
}

template <typename T>
struct ModelBundle {
  ViTConfig config;
  ViTWeights<T> weights;
  std::vector<Classifier<T>> classifiers;
  std::vector<NamedEmbedding<T>> embeddings;
  Preprocessing preprocessing;
  std::string provenance;

  const Classifier<T>& classifier(std::string_view name = {}) const {
    if (classifiers.empty()) throw ModelError("bundle has no classifier");
    if (name.empty()) return classifiers.front();
    for (const auto& c : classifiers)
      if (c.name == name) return c;
    throw ModelError("unknown classifier " + std::string(name));
  }

  const NamedEmbedding<T>* embedding(std::string_view name) const {
    for (const auto& e : embeddings)
      if (e.name == name) return &e;
    return nullptr;
  }

  /// Width of the pooled vector before the optional output projection.
  std::size_t pooled_width() const {
    if (config.pooling == Pooling::attn_pooler && weights.pooler && weights.pooler->out)
      return weights.pooler->out->out();
    return config.width;
  }

  std::size_t embed_dim() const { return weights.proj ? weights.proj->dim(1) : pooled_width(); }
};

// ---------------------------------------------------------------------------
// Forward pass

template <typename T>
struct Preprocessed {
  Tensor<T> input;  // [3, S, S], normalized
  Image view;       // resized and cropped RGB in [0, 1]
  CropGeometry geometry;
};

template <typename T>
Preprocessed<T> preprocess(const Image& image, const Preprocessing& prep, std::size_t size) {
  if (image.width == 0 || image.height == 0 || image.channels != 3)
    throw ImageError("preprocess: expected a non-empty RGB raster");
  Preprocessed<T> out;
  out.geometry = crop_geometry(image.width, image.height, size);
  out.view = resize_and_crop(image, out.geometry);
  out.input = Tensor<T>({3, size, size});
  for (std::size_t c = 0; c < 3; ++c) {
    const T mean = static_cast<T>(prep.mean[c]);
    const T stdv = static_cast<T>(prep.stddev[c]);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        out.input(c, y, x) = (static_cast<T>(out.view.at(x, y, c)) - mean) / stdv;
  }
  return out;
}

template <typename T>
Preprocessed<T> preprocess(const Image& image, const ModelBundle<T>& bundle) {
  return preprocess<T>(image, bundle.preprocessing, bundle.config.image_size);
}

/// Flattened pixels of patch `p` (row-major patch index), channel-major.
template <typename T>
Tensor<T> patch_vector(const Tensor<T>& input, const ViTConfig& cfg, std::size_t p) {
  const std::size_t ps = cfg.patch_size, g = cfg.grid();
  const std::size_t py = p / g, px = p % g;
  Tensor<T> v({1, 3 * ps * ps});
  std::size_t k = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < ps; ++y)
      for (std::size_t x = 0; x < ps; ++x) v[k++] = input(c, py * ps + y, px * ps + x);
  return v;
}

template <typename T>
Tensor<T> embed(const Tensor<T>& input, const ViTWeights<T>& w, const ViTConfig& cfg) {
  if (input.shape() != Shape{3, cfg.image_size, cfg.image_size})
    throw ShapeError("embed: input must be " + shape_str({3, cfg.image_size, cfg.image_size}));
  const std::size_t n = cfg.patches(), ps = cfg.patch_size, g = cfg.grid(), off = cfg.first_patch();
  Tensor<T> flat({n, 3 * ps * ps});
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t py = p / g, px = p % g;
    std::size_t k = 0;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < ps; ++y)
        for (std::size_t x = 0; x < ps; ++x) flat(p, k++) = input(c, py * ps + y, px * ps + x);
  }
  const Tensor<T> patches = w.patch_embed.apply(flat);
  Tensor<T> z({cfg.tokens(), cfg.width});
  if (cfg.class_token)
    for (std::size_t j = 0; j < cfg.width; ++j) z(0, j) = (*w.cls_token)[j] + w.pos_embed(0, j);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t j = 0; j < cfg.width; ++j) z(p + off, j) = patches(p, j) + w.pos_embed(p + off, j);
  return z;
}

/// Intermediates of one block kept for the backward pass.
template <typename T>
struct LayerCache {
  Tensor<T> ln1_out;       // LN1(Z^{l-1})        [N, d]
  Tensor<T> qkv;           // LN1 * Wqkv + b      [N, 3d]
  Tensor<T> attn_mix;      // concat_h A_h V_h     [N, d]
  Tensor<T> residual_mid;  // Zh                  [N, d]
  Tensor<T> ln2_out;       // LN2(Zh)             [N, d]
  Tensor<T> mlp_pre;       // pre-activation      [N, m]
};

template <typename T>
struct BlockResult {
  LayerCache<T> cache;
  Tensor<T> attention;  // [h, N, N]
  Tensor<T> output;     // Z^l
};

/// Scaled dot-product attention maps from a packed QKV matrix.
template <typename T>
Tensor<T> attention_maps(const Tensor<T>& qkv, std::size_t heads) {
  const std::size_t N = qkv.dim(0), d = qkv.dim(1) / 3, dh = d / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor<T> logits({heads, N, N});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        T s = 0;
        for (std::size_t k = 0; k < dh; ++k) s += qkv(i, h * dh + k) * qkv(j, d + h * dh + k);
        logits(h, i, j) = s * scale;
      }
  return softmax(logits, -1);
}

/// concat_h (A_h V_h) with V read from the packed QKV matrix.
template <typename T>
Tensor<T> mix_values(const Tensor<T>& attention, const Tensor<T>& qkv, std::size_t heads) {
  const std::size_t N = qkv.dim(0), d = qkv.dim(1) / 3, dh = d / heads;
  Tensor<T> out({N, d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        const T a = attention(h, i, j);
        for (std::size_t k = 0; k < dh; ++k) out(i, h * dh + k) += a * qkv(j, 2 * d + h * dh + k);
      }
  return out;
}

/// Runs one block. When `attention_override` is given the post-softmax map is
/// replaced by it (Q and K are still computed but unused).
template <typename T>
BlockResult<T> block_forward(const BlockWeights<T>& b, const ViTConfig& cfg, const Tensor<T>& x,
                             const Tensor<T>* attention_override = nullptr) {
  BlockResult<T> r;
  r.cache.ln1_out = layer_norm(x, b.ln1.gain, b.ln1.bias, cfg.ln_eps);
  r.cache.qkv = b.qkv.apply(r.cache.ln1_out);
  if (attention_override) {
    if (attention_override->shape() != Shape{cfg.heads, x.dim(0), x.dim(0)})
      throw ShapeError("block_forward: attention override has wrong shape");
    r.attention = *attention_override;
  } else {
    r.attention = attention_maps(r.cache.qkv, cfg.heads);
  }
  r.cache.attn_mix = mix_values(r.attention, r.cache.qkv, cfg.heads);
  r.cache.residual_mid = add(x, b.proj.apply(r.cache.attn_mix));
  r.cache.ln2_out = layer_norm(r.cache.residual_mid, b.ln2.gain, b.ln2.bias, cfg.ln_eps);
  r.cache.mlp_pre = b.fc1.apply(r.cache.ln2_out);
  r.output = add(r.cache.residual_mid, b.fc2.apply(gelu(r.cache.mlp_pre, cfg.gelu)));
  require_finite(r.output, "block output");
  return r;
}

/// Pooler state for one token matrix.
template <typename T>
struct PoolerTrace {
  Tensor<T> tokens_norm;  // final LN over patch tokens [n, d]
  Tensor<T> keys;         // [n, d]
  Tensor<T> values;       // [n, d]
  Tensor<T> attention;    // [h, 1, n]
  Tensor<T> mixed;        // concat_h A_h V_h  [d]
  Tensor<T> embedding;    // after optional out/proj [e]
};

/// Attentional pooling of an already-normalized token matrix:
/// softmax(q (Z Wk)^T / sqrt(dh)) (Z Wv), per head, heads concatenated.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> pool_attn(const Tensor<T>& tokens, const AttnPoolerWeights<T>& p,
                                          std::size_t heads, Tensor<T>* keys_out = nullptr,
                                          Tensor<T>* values_out = nullptr) {
  const std::size_t n = tokens.dim(0), d = tokens.dim(1);
  if (p.query.size() != d || p.key.shape() != Shape{d, d} || p.value.shape() != Shape{d, d})
    throw ShapeError("pool_attn: pooler weights do not match token width");
  if (d % heads != 0) throw ShapeError("pool_attn: width not divisible by heads");
  const std::size_t dh = d / heads;
  const Tensor<T> K = matmul(tokens, p.key);
  const Tensor<T> V = matmul(tokens, p.value);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor<T> logits({heads, 1, n});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t k = 0; k < dh; ++k) s += p.query[h * dh + k] * K(j, h * dh + k);
      logits(h, 0, j) = s * scale;
    }
  Tensor<T> attn = softmax(logits, -1);
  Tensor<T> mixed({d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < dh; ++k) mixed[h * dh + k] += attn(h, 0, j) * V(j, h * dh + k);
  if (keys_out) *keys_out = K;
  if (values_out) *values_out = V;
  return {std::move(mixed), std::move(attn)};
}

template <typename T>
Tensor<T> apply_vector(const Linear<T>& lin, const Tensor<T>& v) {
  return lin.apply(v.reshaped({1, v.size()})).reshaped({lin.out()});
}

template <typename T>
Tensor<T> project(const Tensor<T>& m, const Tensor<T>& v) {
  return matmul(v.reshaped({1, v.size()}), m).reshaped({m.dim(1)});
}

/// Pooler applied to the patch rows of a token matrix Z^l.
template <typename T>
PoolerTrace<T> pool_tokens(const Tensor<T>& tokens, const ViTWeights<T>& w, const ViTConfig& cfg) {
  if (!w.pooler) throw ModelError("pool_tokens: model has no attentional pooler weights");
  PoolerTrace<T> t;
  const Tensor<T> patches = slice(tokens, 0, cfg.first_patch(), tokens.dim(0));
  t.tokens_norm = layer_norm(patches, w.final_norm.gain, w.final_norm.bias, cfg.ln_eps);
  auto [mixed, attn] = pool_attn(t.tokens_norm, *w.pooler, cfg.heads, &t.keys, &t.values);
  t.mixed = std::move(mixed);
  t.attention = std::move(attn);
  Tensor<T> e = t.mixed;
  if (w.pooler->out) e = apply_vector(*w.pooler->out, e);
  if (w.proj) e = project(*w.proj, e);
  t.embedding = std::move(e);
  return t;
}

/// Final LN and optional projection applied to a single token.
template <typename T>
Tensor<T> cls_embedding(std::span<const T> token, const ViTWeights<T>& w, const ViTConfig& cfg) {
  Tensor<T> z({1, token.size()}, std::vector<T>(token.begin(), token.end()));
  Tensor<T> e = layer_norm(z, w.final_norm.gain, w.final_norm.bias, cfg.ln_eps).reshaped({token.size()});
  if (w.proj) e = project(*w.proj, e);
  return e;
}

template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> tokens;      // Z^0 .. Z^L
  std::vector<Tensor<T>> attention;   // A^1 .. A^L, each [h, N, N]
  std::vector<LayerCache<T>> cache;   // per block, index l-1
  std::vector<PoolerTrace<T>> pooler; // index l = 0..L when pooling is attn_pooler

  std::size_t layers() const { return attention.size(); }
  const Tensor<T>& tokens_at(std::size_t l) const { return tokens.at(l); }
  const Tensor<T>& attention_at(std::size_t l) const {
    if (l == 0 || l > attention.size()) throw ShapeError("attention layer out of range");
    return attention[l - 1];
  }
  const LayerCache<T>& cache_at(std::size_t l) const {
    if (l == 0 || l > cache.size()) throw ShapeError("cache layer out of range");
    return cache[l - 1];
  }
};

template <typename T>
ForwardTrace<T> forward_trace(const Tensor<T>& z0, const ViTWeights<T>& w, const ViTConfig& cfg) {
  if (z0.shape() != Shape{cfg.tokens(), cfg.width})
    throw ShapeError("forward_trace: Z0 must be " + shape_str({cfg.tokens(), cfg.width}) + ", got " +
                     shape_str(z0.shape()));
  if (w.blocks.size() != cfg.layers) throw ModelError("forward_trace: block count differs from config");
  ForwardTrace<T> tr;
  tr.tokens.reserve(cfg.layers + 1);
  tr.tokens.push_back(z0);
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    try {
      BlockResult<T> r = block_forward(w.blocks[l - 1], cfg, tr.tokens.back());
      tr.attention.push_back(std::move(r.attention));
      tr.cache.push_back(std::move(r.cache));
      tr.tokens.push_back(std::move(r.output));
    } catch (const NumericError& e) {
      throw NumericError("layer " + std::to_string(l) + ": " + e.what());
    }
  }
  if (cfg.pooling == Pooling::attn_pooler) {
    tr.pooler.reserve(cfg.layers + 1);
    for (std::size_t l = 0; l <= cfg.layers; ++l) {
      try {
        tr.pooler.push_back(pool_tokens(tr.tokens[l], w, cfg));
      } catch (const NumericError& e) {
        throw NumericError("pooler at layer " + std::to_string(l) + ": " + e.what());
      }
    }
  }
  return tr;
}

/// Runs blocks first..last (1-based, inclusive) on `tokens`.
template <typename T>
Tensor<T> run_blocks(Tensor<T> tokens, std::size_t first, std::size_t last, const ViTWeights<T>& w,
                     const ViTConfig& cfg) {
  for (std::size_t l = first; l <= last; ++l) tokens = block_forward(w.blocks[l - 1], cfg, tokens).output;
  return tokens;
}

template <typename T>
Tensor<T> pool_cls(const ForwardTrace<T>& trace, const ModelBundle<T>& bundle) {
  if (bundle.config.pooling != Pooling::cls_token) throw ModelError("pool_cls: model does not use cls pooling");
  return cls_embedding<T>(trace.tokens.back().row(0), bundle.weights, bundle.config);
}

/// Image embedding z for the token matrix of any layer.
template <typename T>
Tensor<T> image_embedding(const Tensor<T>& tokens, const ModelBundle<T>& bundle) {
  if (bundle.config.pooling == Pooling::cls_token)
    return cls_embedding<T>(tokens.row(0), bundle.weights, bundle.config);
  return pool_tokens(tokens, bundle.weights, bundle.config).embedding;
}

template <typename T>
Tensor<T> unit_normalized(const Tensor<T>& v) {
  T sq = 0;
  for (T x : v.values()) sq += x * x;
  if (!(sq > T{0})) throw NumericError("cannot unit-normalize a zero embedding");
  return scale(v, T{1} / std::sqrt(sq));
}

/// Raw class scores z . C (z unit-normalized first for text classifiers).
template <typename T>
Tensor<T> classify(const Tensor<T>& embedding, const Classifier<T>& classifier) {
  if (embedding.size() != classifier.embed_dim())
    throw ShapeError("classify: embedding width " + std::to_string(embedding.size()) +
                     " does not match classifier rows " + std::to_string(classifier.embed_dim()));
  const Tensor<T> z =
      classifier.kind == ClassifierKind::text_embeddings ? unit_normalized(embedding) : embedding;
  return project(classifier.matrix, z);
}

template <typename T>
std::size_t argmax(const Tensor<T>& v) {
  return static_cast<std::size_t>(std::max_element(v.values().begin(), v.values().end()) - v.values().begin());
}

/// Preprocess -> embed -> blocks -> pool -> classify.
template <typename T>
Tensor<T> predict(const Tensor<T>& input, const ModelBundle<T>& bundle, const Classifier<T>& classifier) {
  const auto& cfg = bundle.config;
  Tensor<T> z = run_blocks(embed(input, bundle.weights, cfg), 1, cfg.layers, bundle.weights, cfg);
  return classify(image_embedding(z, bundle), classifier);
}

// ---------------------------------------------------------------------------
// Container mapping (see docs/weights.md)

namespace detail {

template <typename T>
void expect_shape(const Tensor<T>& t, const Shape& s, const std::string& name) {
  if (t.shape() != s)
    throw ModelError("weights: " + name + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(s));
  if (!all_finite(t)) throw ModelError("weights: " + name + " contains non-finite values");
}

template <typename T>
Linear<T> read_linear(const TensorFile& f, const std::string& prefix, std::size_t in, std::size_t out,
                      bool bias_required) {
  Linear<T> lin;
  lin.weight = f.get<T>(prefix + ".weight");
  expect_shape(lin.weight, {in, out}, prefix + ".weight");
  if (f.contains(prefix + ".bias")) {
    lin.bias = f.get<T>(prefix + ".bias");
    expect_shape(*lin.bias, {out}, prefix + ".bias");
  } else if (bias_required) {
    throw ModelError("weights: missing " + prefix + ".bias");
  }
  return lin;
}

template <typename T>
LayerNormParams<T> read_ln(const TensorFile& f, const std::string& prefix, std::size_t d) {
  LayerNormParams<T> ln{f.get<T>(prefix + ".weight"), f.get<T>(prefix + ".bias")};
  expect_shape(ln.gain, {d}, prefix + ".weight");
  expect_shape(ln.bias, {d}, prefix + ".bias");
  return ln;
}

template <typename T>
void write_linear(TensorFile& f, const std::string& prefix, const Linear<T>& lin) {
  f.add(prefix + ".weight", lin.weight);
  if (lin.bias) f.add(prefix + ".bias", *lin.bias);
}

template <typename T>
void write_ln(TensorFile& f, const std::string& prefix, const LayerNormParams<T>& ln) {
  f.add(prefix + ".weight", ln.gain);
  f.add(prefix + ".bias", ln.bias);
}

}  // namespace detail

inline std::string block_prefix(std::size_t index) { return "blocks." + std::to_string(index); }

/// Builds a validated bundle from a container, converting to precision T.
template <typename T>
ModelBundle<T> bundle_from_file(const TensorFile& f) {
  using detail::expect_shape;
  ModelBundle<T> b;
  try {
    const auto& meta = f.metadata;
    b.config = meta.at("config").get<ViTConfig>();
    b.preprocessing = meta.at("preprocess").get<Preprocessing>();
    b.provenance = meta.value("provenance", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw ModelError(std::string("metadata: ") + e.what());
  }
  const ViTConfig& c = b.config;
  c.validate();
  const std::size_t d = c.width, ps = c.patch_size;
  auto& w = b.weights;
  w.patch_embed = detail::read_linear<T>(f, "patch_embed", 3 * ps * ps, d, false);
  if (c.class_token) {
    w.cls_token = f.get<T>("cls_token");
    expect_shape(*w.cls_token, {d}, "cls_token");
  }
  w.pos_embed = f.get<T>("pos_embed");
  expect_shape(w.pos_embed, {c.tokens(), d}, "pos_embed");
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = block_prefix(i);
    BlockWeights<T> bw;
    bw.ln1 = detail::read_ln<T>(f, p + ".ln1", d);
    bw.qkv = detail::read_linear<T>(f, p + ".attn.qkv", d, 3 * d, false);
    bw.proj = detail::read_linear<T>(f, p + ".attn.proj", d, d, false);
    bw.ln2 = detail::read_ln<T>(f, p + ".ln2", d);
    bw.fc1 = detail::read_linear<T>(f, p + ".mlp.fc1", d, c.mlp_width(), false);
    bw.fc2 = detail::read_linear<T>(f, p + ".mlp.fc2", c.mlp_width(), d, false);
    w.blocks.push_back(std::move(bw));
  }
  w.final_norm = detail::read_ln<T>(f, "ln_final", d);
  if (c.pooling == Pooling::attn_pooler) {
    AttnPoolerWeights<T> pw;
    pw.query = f.get<T>("pool.query");
    expect_shape(pw.query, {d}, "pool.query");
    pw.key = f.get<T>("pool.key.weight");
    expect_shape(pw.key, {d, d}, "pool.key.weight");
    pw.value = f.get<T>("pool.value.weight");
    expect_shape(pw.value, {d, d}, "pool.value.weight");
    if (f.contains("pool.out.weight")) {
      const auto ow = f.get<T>("pool.out.weight");
      pw.out = detail::read_linear<T>(f, "pool.out", d, ow.dim(1), false);
    }
    w.pooler = std::move(pw);
  }
  if (f.contains("proj")) {
    w.proj = f.get<T>("proj");
    if (w.proj->rank() != 2 || w.proj->dim(0) != b.pooled_width())
      throw ModelError("weights: proj must be [" + std::to_string(b.pooled_width()) + ", e]");
    expect_shape(*w.proj, w.proj->shape(), "proj");
  }
  const std::size_t e = b.embed_dim();
  for (const auto& cj : f.metadata.value("classifiers", nlohmann::json::array())) {
    Classifier<T> cl;
    cl.name = cj.at("name").get<std::string>();
    const auto kind = cj.value("kind", std::string("learned_head"));
    if (kind == "learned_head")
      cl.kind = ClassifierKind::learned_head;
    else if (kind == "text_embeddings")
      cl.kind = ClassifierKind::text_embeddings;
    else
      throw ModelError("classifier " + cl.name + ": unknown kind " + kind);
    cl.matrix = f.get<T>("classifier." + cl.name + ".weight");
    if (cl.matrix.rank() != 2 || cl.matrix.dim(0) != e)
      throw ModelError("classifier " + cl.name + ": expected [" + std::to_string(e) + ", C]");
    expect_shape(cl.matrix, cl.matrix.shape(), "classifier." + cl.name + ".weight");
    cl.labels = cj.value("labels", std::vector<std::string>{});
    if (!cl.labels.empty() && cl.labels.size() != cl.classes())
      throw ModelError("classifier " + cl.name + ": label count does not match columns");
    if (cl.kind == ClassifierKind::text_embeddings) {
      for (std::size_t j = 0; j < cl.classes(); ++j) {
        double sq = 0;
        for (std::size_t i = 0; i < e; ++i) sq += static_cast<double>(cl.matrix(i, j)) * cl.matrix(i, j);
        if (std::abs(std::sqrt(sq) - 1.0) > 1e-4)
          throw ModelError("classifier " + cl.name + ": text column " + std::to_string(j) + " is not unit norm");
      }
    }
    b.classifiers.push_back(std::move(cl));
  }
  for (const auto& ej : f.metadata.value("embeddings", nlohmann::json::array())) {
    NamedEmbedding<T> ne;
    ne.name = ej.at("name").get<std::string>();
    ne.prompt = ej.value("prompt", std::string());
    ne.vector = f.get<T>("embedding." + ne.name);
    expect_shape(ne.vector, {e}, "embedding." + ne.name);
    b.embeddings.push_back(std::move(ne));
  }
  return b;
}

template <typename T>
ModelBundle<T> load_bundle(const std::filesystem::path& path) {
  return bundle_from_file<T>(load_container(path));
}

template <typename T>
TensorFile bundle_to_file(const ModelBundle<T>& b) {
  TensorFile f;
  const auto& w = b.weights;
  nlohmann::json classifiers = nlohmann::json::array();
  for (const auto& c : b.classifiers)
    classifiers.push_back({{"name", c.name}, {"kind", to_string(c.kind)}, {"labels", c.labels}});
  nlohmann::json embeddings = nlohmann::json::array();
  for (const auto& e : b.embeddings) embeddings.push_back({{"name", e.name}, {"prompt", e.prompt}});
  f.metadata = {{"config", b.config},
                {"preprocess", b.preprocessing},
                {"provenance", b.provenance},
                {"classifiers", classifiers},
                {"embeddings", embeddings},
                {"patch_order", "row-major"},
                {"weight_layout", "in_out"}};
  detail::write_linear(f, "patch_embed", w.patch_embed);
  if (w.cls_token) f.add("cls_token", *w.cls_token);
  f.add("pos_embed", w.pos_embed);
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    const std::string p = block_prefix(i);
    const auto& bw = w.blocks[i];
    detail::write_ln(f, p + ".ln1", bw.ln1);
    detail::write_linear(f, p + ".attn.qkv", bw.qkv);
    detail::write_linear(f, p + ".attn.proj", bw.proj);
    detail::write_ln(f, p + ".ln2", bw.ln2);
    detail::write_linear(f, p + ".mlp.fc1", bw.fc1);
    detail::write_linear(f, p + ".mlp.fc2", bw.fc2);
  }
  detail::write_ln(f, "ln_final", w.final_norm);
  if (w.pooler) {
    f.add("pool.query", w.pooler->query);
    f.add("pool.key.weight", w.pooler->key);
    f.add("pool.value.weight", w.pooler->value);
    if (w.pooler->out) detail::write_linear(f, "pool.out", *w.pooler->out);
  }
  if (w.proj) f.add("proj", *w.proj);
  for (const auto& c : b.classifiers) f.add("classifier." + c.name + ".weight", c.matrix);
  for (const auto& e : b.embeddings) f.add("embedding." + e.name, e.vector);
  return f;
}

template <typename T>
void save_bundle(const std::filesystem::path& path, const ModelBundle<T>& b) {
  save_container(path, bundle_to_file(b));
}

}  // namespace legrad
