#pragma once

// LeGrad and the baseline explanation methods.
//
// For every selected layer l the query score s^l is read off Z^l with the
// model's own pooling head, differentiated with respect to the layer's
// post-softmax attention map (treated as a leaf), ReLU-clipped, and averaged
// over heads and query rows. The per-layer maps are averaged over the
// selected layers, reshaped to the patch grid, upsampled, and normalized.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "legrad/backward.hpp"
#include "legrad/heatmap.hpp"
#include "legrad/model.hpp"

namespace legrad {

class QueryError : public Error {
 public:
  QueryError(const std::string& what, std::vector<std::string> suggestions = {})
      : Error(what), suggestions_(std::move(suggestions)) {}
  const std::vector<std::string>& suggestions() const { return suggestions_; }

 private:
  std::vector<std::string> suggestions_;
};

/// Target of an explanation: the score is s = u . column, with u the image
/// embedding (unit-normalized when `normalize`).
template <typename T>
struct Query {
  Tensor<T> column;
  bool normalize = false;
  std::string label;
  std::optional<std::size_t> class_index;
};

template <typename T>
Query<T> query_for_class(const Classifier<T>& c, std::size_t index) {
  if (index >= c.classes())
    throw QueryError("class index " + std::to_string(index) + " out of range [0, " + std::to_string(c.classes()) + ")");
  Query<T> q;
  q.column = c.column(index);
  q.normalize = c.kind == ClassifierKind::text_embeddings;
  q.label = index < c.labels.size() ? c.labels[index] : std::to_string(index);
  q.class_index = index;
  return q;
}

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Up to `k` labels closest to `label` by edit distance (ties: label order).
inline std::vector<std::string> closest_labels(const std::vector<std::string>& labels, std::string_view label,
                                               std::size_t k = 3) {
  std::vector<std::pair<std::size_t, std::size_t>> scored;
  for (std::size_t i = 0; i < labels.size(); ++i) scored.emplace_back(edit_distance(labels[i], label), i);
  std::stable_sort(scored.begin(), scored.end(), [](auto a, auto b) { return a.first < b.first; });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(k, scored.size()); ++i) out.push_back(labels[scored[i].second]);
  return out;
}

template <typename T>
Query<T> query_for_label(const Classifier<T>& c, std::string_view label) {
  if (auto idx = c.find_label(label)) return query_for_class(c, *idx);
  throw QueryError("unknown label '" + std::string(label) + "'", closest_labels(c.labels, label));
}

template <typename T>
Query<T> query_for_embedding(const ModelBundle<T>& bundle, std::string_view name) {
  const NamedEmbedding<T>* e = bundle.embedding(name);
  if (!e) {
    std::vector<std::string> names;
    for (const auto& x : bundle.embeddings) names.push_back(x.name);
    throw QueryError("unknown embedding '" + std::string(name) + "'", closest_labels(names, name));
  }
  Query<T> q;
  q.column = e->vector;
  q.normalize = true;
  q.label = e->prompt.empty() ? e->name : e->prompt;
  return q;
}

template <typename T>
T embedding_score(const Tensor<T>& embedding, const Query<T>& q) {
  const Tensor<T> u = q.normalize ? unit_normalized(embedding) : embedding;
  return dot<T>(u.values(), q.column.values());
}

// ---------------------------------------------------------------------------
// Layer ranges

/// Number of trailing layers in the default range: ceil(0.4 L).
inline std::size_t default_layer_count(std::size_t layers) {
  return std::max<std::size_t>(1, (4 * layers + 9) / 10);
}

inline std::vector<std::size_t> last_layers(std::size_t layers, std::size_t count) {
  std::vector<std::size_t> r;
  for (std::size_t l = layers - std::min(count, layers) + 1; l <= layers; ++l) r.push_back(l);
  return r;
}

inline std::vector<std::size_t> default_layer_range(std::size_t layers) {
  return last_layers(layers, default_layer_count(layers));
}

/// Parses "all", "lastP%" (ceil(P/100 L) trailing layers), or a comma list
/// of 1-based layers and inclusive ranges ("3,5-7"). Result is sorted, unique,
/// non-empty, within [1, L].
inline std::vector<std::size_t> parse_layer_spec(std::string_view spec, std::size_t layers) {
  auto fail = [&](const std::string& why) -> Error {
    return Error("layer spec '" + std::string(spec) + "': " + why);
  };
  if (layers == 0) throw fail("model has no layers");
  if (spec == "all") return last_layers(layers, layers);
  if (spec.starts_with("last") && spec.ends_with("%")) {
    const auto digits = spec.substr(4, spec.size() - 5);
    unsigned pct = 0;
    auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), pct);
    if (ec != std::errc() || p != digits.data() + digits.size() || digits.empty() || pct == 0 || pct > 100)
      throw fail("percentage must be in 1..100");
    const std::size_t count = std::max<std::size_t>(1, (pct * layers + 99) / 100);
    return last_layers(layers, count);
  }
  std::vector<std::size_t> out;
  auto parse_uint = [&](std::string_view s) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty()) throw fail("expected a layer number, got '" + std::string(s) + "'");
    return v;
  };
  std::size_t start = 0;
  while (start <= spec.size()) {
    const std::size_t comma = std::min(spec.find(',', start), spec.size());
    const std::string_view item = spec.substr(start, comma - start);
    const std::size_t dash = item.find('-');
    std::size_t lo, hi;
    if (dash == std::string_view::npos) {
      lo = hi = parse_uint(item);
    } else {
      lo = parse_uint(item.substr(0, dash));
      hi = parse_uint(item.substr(dash + 1));
    }
    if (lo < 1 || hi > layers || lo > hi)
      throw fail("layers must lie in [1, " + std::to_string(layers) + "]");
    for (std::size_t l = lo; l <= hi; ++l) out.push_back(l);
    start = comma + 1;
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline void validate_layer_range(const std::vector<std::size_t>& range, std::size_t layers) {
  if (range.empty()) throw Error("layer range is empty");
  for (auto l : range)
    if (l < 1 || l > layers)
      throw Error("layer " + std::to_string(l) + " outside [1, " + std::to_string(layers) + "]");
}

// ---------------------------------------------------------------------------
// LeGrad

struct LayerScore {
  std::size_t layer = 0;
  double score = 0;
};

template <typename T>
struct AttnGradient {
  std::size_t layer = 0;
  Tensor<T> grad;  // [h, N, N], or [h, 1, n] for the pooler
  bool pooler = false;
  bool has_cls = false;  // column 0 belongs to the class token
};

template <typename T>
struct LayerExplanation {
  std::size_t layer = 0;
  Tensor<T> values;  // per key token, >= 0
  bool has_cls = false;
};

inline void check_layer(std::size_t l, std::size_t layers, std::size_t lowest = 1) {
  if (l < lowest || l > layers)
    throw Error("layer " + std::to_string(l) + " outside [" + std::to_string(lowest) + ", " + std::to_string(layers) + "]");
}

/// Embedding of layer l's tokens using the model's own pooling head.
template <typename T>
Tensor<T> layer_embedding(const ModelBundle<T>& bundle, const ForwardTrace<T>& trace, std::size_t l) {
  if (bundle.config.pooling == Pooling::cls_token)
    return cls_embedding<T>(trace.tokens_at(l).row(0), bundle.weights, bundle.config);
  if (trace.pooler.size() <= l) throw Error("trace lacks pooler state for layer " + std::to_string(l));
  return trace.pooler[l].embedding;
}

template <typename T>
LayerScore layer_score(const ForwardTrace<T>& trace, std::size_t l, const Query<T>& q, const ModelBundle<T>& bundle) {
  check_layer(l, trace.layers(), 0);
  return {l, static_cast<double>(embedding_score(layer_embedding(bundle, trace, l), q))};
}

/// Analytic d s^l / d A^l (or d s^l / d A_pool^l for pooler models).
template <typename T>
AttnGradient<T> grad_attention(const ForwardTrace<T>& trace, std::size_t l, const Query<T>& q,
                               const ModelBundle<T>& bundle) {
  const auto& cfg = bundle.config;
  const auto& w = bundle.weights;
  check_layer(l, trace.layers());
  if (trace.cache.size() < l) throw Error("trace is missing the layer cache for layer " + std::to_string(l));
  AttnGradient<T> g;
  g.layer = l;
  const Tensor<T> e = layer_embedding(bundle, trace, l);
  const Tensor<T> de = score_backward(e, q.column, q.normalize);
  if (cfg.pooling == Pooling::cls_token) {
    const Tensor<T>& z = trace.tokens_at(l);
    Tensor<T> dZ(z.shape());
    const Tensor<T> d0 = cls_head_backward<T>(z.row(0), w, cfg, de);
    std::copy(d0.values().begin(), d0.values().end(), dZ.row(0).begin());
    g.grad = attention_backward(w.blocks[l - 1], cfg, trace.cache_at(l), dZ);
    g.has_cls = true;
  } else {
    g.grad = pooler_attention_backward(trace.pooler[l], pooler_mixed_backward(w, de), cfg.heads);
    g.pooler = true;
  }
  require_finite(g.grad, "attention gradient");
  return g;
}

/// Central differences of f at every entry of `point`; the step for entry x
/// is eps_scale * max(1, |x|).
template <typename F>
Tensor<double> central_difference(const Tensor<double>& point, F&& f, double eps_scale = 1e-4) {
  Tensor<double> grad(point.shape());
  Tensor<double> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double x = point[i];
    const double eps = eps_scale * std::max(1.0, std::abs(x));
    probe[i] = x + eps;
    const double fp = f(static_cast<const Tensor<double>&>(probe));
    probe[i] = x - eps;
    const double fm = f(static_cast<const Tensor<double>&>(probe));
    probe[i] = x;
    grad[i] = (fp - fm) / (2 * eps);
  }
  return grad;
}

/// Finite-difference d s^l / d A^l: the captured post-softmax map is
/// overridden entry by entry and the layer-local forward re-run.
template <typename T>
Tensor<T> fd_grad_attention(const ModelBundle<T>& bundle, const Tensor<T>& z0, std::size_t l, const Query<T>& q,
                            double eps_scale = 1e-4) {
  static_assert(std::is_same_v<T, double>, "finite-difference checks run in float64");
  const auto& cfg = bundle.config;
  const auto& w = bundle.weights;
  const ForwardTrace<T> trace = forward_trace(z0, w, cfg);
  check_layer(l, trace.layers());
  if (cfg.pooling == Pooling::cls_token) {
    const Tensor<T>& x = trace.tokens_at(l - 1);
    return central_difference(trace.attention_at(l), [&](const Tensor<T>& a) {
      const Tensor<T> z = block_forward(w.blocks[l - 1], cfg, x, &a).output;
      return embedding_score(cls_embedding<T>(z.row(0), w, cfg), q);
    }, eps_scale);
  }
  const PoolerTrace<T>& p = trace.pooler[l];
  const std::size_t n = p.values.dim(0), d = cfg.width, dh = d / cfg.heads;
  return central_difference(p.attention, [&](const Tensor<T>& a) {
    Tensor<T> mixed({d});
    for (std::size_t h = 0; h < cfg.heads; ++h)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < dh; ++k) mixed[h * dh + k] += a(h, 0, j) * p.values(j, h * dh + k);
    Tensor<T> e = mixed;
    if (w.pooler->out) e = apply_vector(*w.pooler->out, e);
    if (w.proj) e = project(*w.proj, e);
    return embedding_score(e, q);
  }, eps_scale);
}

/// Mean over heads and query rows of the ReLU-clipped gradient.
template <typename T>
LayerExplanation<T> layer_explanation(const AttnGradient<T>& g) {
  if (g.grad.rank() != 3) throw ShapeError("layer_explanation: gradient must be [h, rows, cols]");
  require_finite(g.grad, "attention gradient");
  const std::size_t heads = g.grad.dim(0), rows = g.grad.dim(1), cols = g.grad.dim(2);
  LayerExplanation<T> e;
  e.layer = g.layer;
  e.has_cls = g.has_cls;
  e.values = Tensor<T>({cols});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        const T v = g.grad(h, i, j);
        if (v > T{0}) e.values[j] += v;
      }
  const T denom = static_cast<T>(heads * rows);
  for (auto& v : e.values.values()) v /= denom;
  return e;
}

/// Averages patch entries over the given explanations, then reshapes,
/// upsamples and normalizes. The divisor is the number of explanations.
template <typename T>
Heatmap merge_layers(const std::vector<LayerExplanation<T>>& explanations, std::size_t image_size,
                     std::string method = "legrad") {
  if (explanations.empty()) throw Error("merge_layers: no layer explanations");
  const std::size_t len = explanations.front().values.size();
  const bool has_cls = explanations.front().has_cls;
  for (const auto& e : explanations)
    if (e.values.size() != len || e.has_cls != has_cls) throw ShapeError("merge_layers: explanations differ in length");
  const std::size_t off = has_cls ? 1 : 0;
  if (len <= off) throw ShapeError("merge_layers: no patch entries");
  std::vector<double> mean(len - off, 0.0);
  std::vector<std::size_t> layers;
  for (const auto& e : explanations) {
    for (std::size_t j = off; j < len; ++j) mean[j - off] += static_cast<double>(e.values[j]);
    layers.push_back(e.layer);
  }
  const double count = static_cast<double>(explanations.size());
  for (double& v : mean) v /= count;
  return make_heatmap(mean, image_size, std::move(method), std::move(layers));
}

template <typename T>
Heatmap finalize_single_layer(const LayerExplanation<T>& e, std::size_t image_size) {
  return merge_layers<T>({e}, image_size);
}

template <typename T>
struct LegradResult {
  Heatmap heatmap;
  std::vector<LayerScore> scores;
  std::vector<LayerExplanation<T>> layers;
};

template <typename T>
LegradResult<T> legrad_detailed(const ModelBundle<T>& bundle, const ForwardTrace<T>& trace, const Query<T>& q,
                                const std::vector<std::size_t>& layer_range) {
  validate_layer_range(layer_range, bundle.config.layers);
  LegradResult<T> r;
  for (std::size_t l : layer_range) {
    r.scores.push_back(layer_score(trace, l, q, bundle));
    r.layers.push_back(layer_explanation(grad_attention(trace, l, q, bundle)));
  }
  r.heatmap = merge_layers(r.layers, bundle.config.image_size);
  return r;
}

template <typename T>
Heatmap legrad(const ModelBundle<T>& bundle, const ForwardTrace<T>& trace, const Query<T>& q,
               const std::vector<std::size_t>& layer_range) {
  return legrad_detailed(bundle, trace, q, layer_range).heatmap;
}

template <typename T>
ForwardTrace<T> trace_image(const ModelBundle<T>& bundle, const Image& image) {
  const auto pre = preprocess(image, bundle);
  return forward_trace(embed(pre.input, bundle.weights, bundle.config), bundle.weights, bundle.config);
}

/// preprocess -> forward_trace -> per-layer gradients -> merge. An empty
/// range selects the default trailing 40% of layers.
template <typename T>
Heatmap legrad(const ModelBundle<T>& bundle, const Image& image, const Query<T>& q,
               std::vector<std::size_t> layer_range = {}) {
  if (layer_range.empty()) layer_range = default_layer_range(bundle.config.layers);
  return legrad(bundle, trace_image(bundle, image), q, layer_range);
}

// ---------------------------------------------------------------------------
// Baselines

namespace detail {

template <typename T>
std::vector<double> head_mean_row(const Tensor<T>& attn, std::size_t row, std::size_t first_col) {
  const std::size_t heads = attn.dim(0), cols = attn.dim(2);
  std::vector<double> out(cols - first_col, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t j = first_col; j < cols; ++j) out[j - first_col] += static_cast<double>(attn(h, row, j));
  for (double& v : out) v /= static_cast<double>(heads);
  return out;
}

}  // namespace detail

/// Head-averaged final attention of the class token (or of the pooler query)
/// over patch tokens.
template <typename T>
Heatmap baseline_raw_attention(const ForwardTrace<T>& trace, const ModelBundle<T>& bundle) {
  const auto& cfg = bundle.config;
  if (cfg.layers == 0) throw Error("raw_attention: model has no layers");
  std::vector<double> v = cfg.pooling == Pooling::cls_token
                              ? detail::head_mean_row(trace.attention_at(cfg.layers), 0, 1)
                              : detail::head_mean_row(trace.pooler[cfg.layers].attention, 0, 0);
  return make_heatmap(v, cfg.image_size, "raw_attention", {cfg.layers});
}

/// Head-mean first, then (A + I)/2 with row renormalization, multiplied
/// from the last layer down to the first.
template <typename T>
Tensor<double> rollout_matrix(const ForwardTrace<T>& trace) {
  const std::size_t L = trace.layers();
  if (L == 0) throw Error("rollout: model has no layers");
  const std::size_t N = trace.attention_at(1).dim(1);
  Tensor<double> rollout = Tensor<double>::identity(N);
  for (std::size_t l = 1; l <= L; ++l) {
    const Tensor<T>& a = trace.attention_at(l);
    const std::size_t heads = a.dim(0);
    Tensor<double> aug({N, N});
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) aug(i, j) += static_cast<double>(a(h, i, j));
    for (std::size_t i = 0; i < N; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < N; ++j) {
        aug(i, j) = (aug(i, j) / static_cast<double>(heads) + (i == j ? 1.0 : 0.0)) / 2.0;
        row += aug(i, j);
      }
      for (std::size_t j = 0; j < N; ++j) aug(i, j) /= row;
    }
    rollout = matmul(aug, rollout);
  }
  return rollout;
}

template <typename T>
Heatmap baseline_rollout(const ForwardTrace<T>& trace, const ModelBundle<T>& bundle) {
  const auto& cfg = bundle.config;
  const Tensor<double> r = rollout_matrix(trace);
  const std::size_t N = r.dim(0), off = cfg.first_patch();
  std::vector<double> v(N - off, 0.0);
  if (cfg.pooling == Pooling::cls_token) {
    for (std::size_t j = off; j < N; ++j) v[j - off] = r(0, j);
  } else {
    // Pooler query row (head-mean over patch tokens) pushed through the rollout.
    const std::vector<double> q = detail::head_mean_row(trace.pooler[cfg.layers].attention, 0, 0);
    for (std::size_t i = 0; i < q.size(); ++i)
      for (std::size_t j = off; j < N; ++j) v[j - off] += q[i] * r(i + off, j);
  }
  return make_heatmap(v, cfg.image_size, "rollout", last_layers(cfg.layers, cfg.layers));
}

/// GradCAM default layer: 8 of 12, scaled to the model depth.
inline std::size_t default_gradcam_layer(std::size_t layers) {
  return std::clamp<std::size_t>((2 * layers + 1) / 3, 1, std::max<std::size_t>(layers, 1));
}

/// d s / d Z^l for the final score s, through every block above l.
template <typename T>
Tensor<T> token_gradient(const ForwardTrace<T>& trace, std::size_t l, const Query<T>& q, const ModelBundle<T>& bundle) {
  const auto& cfg = bundle.config;
  const auto& w = bundle.weights;
  check_layer(l, trace.layers(), 0);
  const std::size_t L = trace.layers();
  const Tensor<T>& zL = trace.tokens_at(L);
  const Tensor<T> e = layer_embedding(bundle, trace, L);
  const Tensor<T> de = score_backward(e, q.column, q.normalize);
  Tensor<T> dZ(zL.shape());
  if (cfg.pooling == Pooling::cls_token) {
    const Tensor<T> d0 = cls_head_backward<T>(zL.row(0), w, cfg, de);
    std::copy(d0.values().begin(), d0.values().end(), dZ.row(0).begin());
  } else {
    dZ = pooler_tokens_backward(trace.pooler[L], zL, w, cfg, pooler_mixed_backward(w, de));
  }
  for (std::size_t k = L; k > l; --k)
    dZ = block_backward(w.blocks[k - 1], cfg, trace.tokens_at(k - 1), trace.cache_at(k), trace.attention_at(k), dZ);
  return dZ;
}

template <typename T>
Heatmap baseline_gradcam(const ForwardTrace<T>& trace, std::size_t l, const Query<T>& q, const ModelBundle<T>& bundle) {
  const auto& cfg = bundle.config;
  check_layer(l, trace.layers());
  const Tensor<T> dZ = token_gradient(trace, l, q, bundle);
  const Tensor<T>& z = trace.tokens_at(l);
  const std::size_t N = z.dim(0), d = z.dim(1), n = cfg.patches(), off = cfg.first_patch();
  std::vector<double> w(d, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < d; ++k) w[k] += static_cast<double>(dZ(i, k));
  for (double& v : w) v /= static_cast<double>(n);
  std::vector<double> v(n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += w[k] * static_cast<double>(z(p + off, k));
    s /= static_cast<double>(d);
    v[p] = s > 0 ? s : 0.0;
  }
  return make_heatmap(v, cfg.image_size, "gradcam", {l});
}

/// Per-head weights = mean of the final attention gradient; weighted head
/// sum of the attention map, class-token (or pooler) row over patches.
template <typename T>
Heatmap baseline_attentioncam(const ForwardTrace<T>& trace, const Query<T>& q, const ModelBundle<T>& bundle) {
  const auto& cfg = bundle.config;
  const std::size_t L = cfg.layers;
  const AttnGradient<T> g = grad_attention(trace, L, q, bundle);
  const Tensor<T>& attn = cfg.pooling == Pooling::cls_token ? trace.attention_at(L) : trace.pooler[L].attention;
  const std::size_t heads = g.grad.dim(0), rows = g.grad.dim(1), cols = g.grad.dim(2);
  const std::size_t off = cfg.pooling == Pooling::cls_token ? 1 : 0;
  std::vector<double> v(cols - off, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    double wh = 0;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) wh += static_cast<double>(g.grad(h, i, j));
    wh /= static_cast<double>(rows * cols);
    for (std::size_t j = off; j < cols; ++j) v[j - off] += wh * static_cast<double>(attn(h, 0, j));
  }
  return make_heatmap(v, cfg.image_size, "attentioncam", {L});
}

enum class Method : std::uint8_t { legrad, raw_attention, rollout, gradcam, attentioncam };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::legrad: return "legrad";
    case Method::raw_attention: return "raw_attention";
    case Method::rollout: return "rollout";
    case Method::gradcam: return "gradcam";
    case Method::attentioncam: return "attentioncam";
  }
  return "?";
}

inline std::optional<Method> parse_method(std::string_view s) {
  for (Method m : {Method::legrad, Method::raw_attention, Method::rollout, Method::gradcam, Method::attentioncam})
    if (s == to_string(m)) return m;
  return std::nullopt;
}

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"legrad", "raw_attention", "rollout", "gradcam", "attentioncam"};
  return names;
}

struct ExplainOptions {
  Method method = Method::legrad;
  std::vector<std::size_t> layers;  // legrad range; empty = default
  std::optional<std::size_t> gradcam_layer;
};

/// Dispatches to the requested method on an existing trace.
template <typename T>
Heatmap explain(const ModelBundle<T>& bundle, const ForwardTrace<T>& trace, const Query<T>& q, const ExplainOptions& opt) {
  switch (opt.method) {
    case Method::legrad:
      return legrad(bundle, trace, q, opt.layers.empty() ? default_layer_range(bundle.config.layers) : opt.layers);
    case Method::raw_attention: return baseline_raw_attention(trace, bundle);
    case Method::rollout: return baseline_rollout(trace, bundle);
    case Method::gradcam:
      return baseline_gradcam(trace, opt.gradcam_layer.value_or(default_gradcam_layer(bundle.config.layers)), q, bundle);
    case Method::attentioncam: return baseline_attentioncam(trace, q, bundle);
  }
  throw Error("unknown method");
}

}  // namespace legrad
