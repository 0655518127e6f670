#pragma once

// Hand-written reverse-mode derivatives for the pieces of the ViT that the
// explanation methods differentiate through. Each function takes the
// upstream gradient and the forward intermediates cached in a ForwardTrace.

#include "legrad/model.hpp"

namespace legrad {

/// d(layer_norm(x))^T dy, row-wise over the trailing axis.
template <typename T>
Tensor<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& dy, double eps) {
  if (x.shape() != dy.shape()) throw ShapeError("layer_norm_backward: shape mismatch");
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  Tensor<T> dx(x.shape());
  std::vector<T> xhat(d), g(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * d;
    const T* up = dy.data() + r * d;
    T* out = dx.data() + r * d;
    T mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += in[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= static_cast<T>(d);
    const T rstd = T{1} / std::sqrt(var + static_cast<T>(eps));
    T mean_g = 0, mean_gx = 0;
    for (std::size_t i = 0; i < d; ++i) {
      xhat[i] = (in[i] - mean) * rstd;
      g[i] = up[i] * gain[i];
      mean_g += g[i];
      mean_gx += g[i] * xhat[i];
    }
    mean_g /= static_cast<T>(d);
    mean_gx /= static_cast<T>(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = rstd * (g[i] - mean_g - xhat[i] * mean_gx);
  }
  return dx;
}

/// Gradient of y = x W + b with respect to x.
template <typename T>
Tensor<T> linear_backward_input(const Linear<T>& lin, const Tensor<T>& dy) {
  return matmul(dy, transpose(lin.weight));
}

/// Gradient of a score s = u . c with respect to the embedding e, where
/// u = e / |e| when `normalize` is set and u = e otherwise.
template <typename T>
Tensor<T> score_backward(const Tensor<T>& embedding, const Tensor<T>& column, bool normalize) {
  if (embedding.size() != column.size()) throw ShapeError("score_backward: width mismatch");
  if (!normalize) return column;
  T sq = 0;
  for (T v : embedding.values()) sq += v * v;
  const T norm = std::sqrt(sq);
  if (!(norm > T{0})) throw NumericError("score_backward: zero embedding");
  T uc = 0;
  for (std::size_t i = 0; i < embedding.size(); ++i) uc += embedding[i] / norm * column[i];
  Tensor<T> g(embedding.shape());
  for (std::size_t i = 0; i < embedding.size(); ++i) g[i] = (column[i] - uc * embedding[i] / norm) / norm;
  return g;
}

/// Gradient with respect to the class token row through final LN and the
/// optional projection.
template <typename T>
Tensor<T> cls_head_backward(std::span<const T> token, const ViTWeights<T>& w, const ViTConfig& cfg,
                            const Tensor<T>& d_embedding) {
  Tensor<T> g = d_embedding;
  if (w.proj) g = matmul(*w.proj, g.reshaped({g.size(), 1})).reshaped({w.proj->dim(0)});
  const Tensor<T> x({1, token.size()}, std::vector<T>(token.begin(), token.end()));
  return layer_norm_backward(x, w.final_norm.gain, g.reshaped({1, g.size()}), cfg.ln_eps)
      .reshaped({token.size()});
}

/// Gradient with respect to the pooler's mixed (pre-output) vector.
template <typename T>
Tensor<T> pooler_mixed_backward(const ViTWeights<T>& w, const Tensor<T>& d_embedding) {
  Tensor<T> g = d_embedding;
  if (w.proj) g = matmul(*w.proj, g.reshaped({g.size(), 1})).reshaped({w.proj->dim(0)});
  if (w.pooler->out) g = matmul(w.pooler->out->weight, g.reshaped({g.size(), 1})).reshaped({w.pooler->out->in()});
  return g;
}

/// d s / d A_pool for mixed = concat_h sum_j A[h,0,j] V[j, h].
template <typename T>
Tensor<T> pooler_attention_backward(const PoolerTrace<T>& p, const Tensor<T>& d_mixed, std::size_t heads) {
  const std::size_t n = p.values.dim(0), d = p.values.dim(1), dh = d / heads;
  Tensor<T> dA({heads, 1, n});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t k = 0; k < dh; ++k) s += d_mixed[h * dh + k] * p.values(j, h * dh + k);
      dA(h, 0, j) = s;
    }
  return dA;
}

/// Full gradient of the pooled mixed vector with respect to the token matrix
/// the pooler was applied to (through softmax, keys, values and final LN).
template <typename T>
Tensor<T> pooler_tokens_backward(const PoolerTrace<T>& p, const Tensor<T>& tokens, const ViTWeights<T>& w,
                                 const ViTConfig& cfg, const Tensor<T>& d_mixed) {
  const std::size_t n = p.values.dim(0), d = p.values.dim(1), h = cfg.heads, dh = d / h;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const Tensor<T> dA = pooler_attention_backward(p, d_mixed, h);
  Tensor<T> dK({n, d}), dV({n, d});
  for (std::size_t hh = 0; hh < h; ++hh) {
    T dot_ad = 0;
    for (std::size_t j = 0; j < n; ++j) dot_ad += p.attention(hh, 0, j) * dA(hh, 0, j);
    for (std::size_t j = 0; j < n; ++j) {
      const T a = p.attention(hh, 0, j);
      const T dlogit = a * (dA(hh, 0, j) - dot_ad);
      for (std::size_t k = 0; k < dh; ++k) {
        dV(j, hh * dh + k) = a * d_mixed[hh * dh + k];
        dK(j, hh * dh + k) = dlogit * scale * w.pooler->query[hh * dh + k];
      }
    }
  }
  const Tensor<T> d_norm = add(matmul(dK, transpose(w.pooler->key)), matmul(dV, transpose(w.pooler->value)));
  const Tensor<T> patches = slice(tokens, 0, cfg.first_patch(), tokens.dim(0));
  const Tensor<T> d_patches = layer_norm_backward(patches, w.final_norm.gain, d_norm, cfg.ln_eps);
  Tensor<T> dZ(tokens.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) dZ(i + cfg.first_patch(), k) = d_patches(i, k);
  return dZ;
}

/// Back-propagates dZ^l through the MLP half of block l (LN2, fc1, GELU,
/// fc2, residual) to the mid-block residual Zh.
template <typename T>
Tensor<T> mlp_backward(const BlockWeights<T>& b, const ViTConfig& cfg, const LayerCache<T>& c, const Tensor<T>& dZ) {
  Tensor<T> dG = linear_backward_input(b.fc2, dZ);
  for (std::size_t i = 0; i < dG.size(); ++i) dG[i] *= gelu_grad_scalar(c.mlp_pre[i], cfg.gelu);
  const Tensor<T> dLn2 = linear_backward_input(b.fc1, dG);
  return add(dZ, layer_norm_backward(c.residual_mid, b.ln2.gain, dLn2, cfg.ln_eps));
}

/// d s / d A^l with A^l treated as a leaf: dZ^l flows back through the MLP,
/// the attention output projection, and the head-wise A V product only.
template <typename T>
Tensor<T> attention_backward(const BlockWeights<T>& b, const ViTConfig& cfg, const LayerCache<T>& c,
                             const Tensor<T>& dZ) {
  const Tensor<T> dMid = mlp_backward(b, cfg, c, dZ);
  const Tensor<T> dMix = linear_backward_input(b.proj, dMid);
  const std::size_t N = dZ.dim(0), d = cfg.width, h = cfg.heads, dh = d / h;
  Tensor<T> dA({h, N, N});
  for (std::size_t hh = 0; hh < h; ++hh)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        T s = 0;
        for (std::size_t k = 0; k < dh; ++k) s += dMix(i, hh * dh + k) * c.qkv(j, 2 * d + hh * dh + k);
        dA(hh, i, j) = s;
      }
  return dA;
}

/// Full gradient of a block's output with respect to its input Z^{l-1}.
template <typename T>
Tensor<T> block_backward(const BlockWeights<T>& b, const ViTConfig& cfg, const Tensor<T>& x, const LayerCache<T>& c,
                         const Tensor<T>& attention, const Tensor<T>& dZ) {
  const Tensor<T> dMid = mlp_backward(b, cfg, c, dZ);
  const Tensor<T> dMix = linear_backward_input(b.proj, dMid);
  const std::size_t N = x.dim(0), d = cfg.width, h = cfg.heads, dh = d / h;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor<T> dQKV({N, 3 * d});
  std::vector<T> dA(N * N), dL(N * N);
  for (std::size_t hh = 0; hh < h; ++hh) {
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        T s = 0;
        for (std::size_t k = 0; k < dh; ++k) s += dMix(i, hh * dh + k) * c.qkv(j, 2 * d + hh * dh + k);
        dA[i * N + j] = s;
      }
    // dV[j] = sum_i A[i,j] dMix[i]
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t k = 0; k < dh; ++k) {
        T s = 0;
        for (std::size_t i = 0; i < N; ++i) s += attention(hh, i, j) * dMix(i, hh * dh + k);
        dQKV(j, 2 * d + hh * dh + k) = s;
      }
    // softmax backward, row-wise
    for (std::size_t i = 0; i < N; ++i) {
      T dot_ad = 0;
      for (std::size_t j = 0; j < N; ++j) dot_ad += attention(hh, i, j) * dA[i * N + j];
      for (std::size_t j = 0; j < N; ++j) dL[i * N + j] = attention(hh, i, j) * (dA[i * N + j] - dot_ad) * scale;
    }
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t k = 0; k < dh; ++k) {
        T s = 0;
        for (std::size_t j = 0; j < N; ++j) s += dL[i * N + j] * c.qkv(j, d + hh * dh + k);
        dQKV(i, hh * dh + k) = s;
      }
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t k = 0; k < dh; ++k) {
        T s = 0;
        for (std::size_t i = 0; i < N; ++i) s += dL[i * N + j] * c.qkv(i, hh * dh + k);
        dQKV(j, d + hh * dh + k) = s;
      }
  }
  const Tensor<T> dLn1 = linear_backward_input(b.qkv, dQKV);
  return add(dMid, layer_norm_backward(x, b.ln1.gain, dLn1, cfg.ln_eps));
}

}  // namespace legrad
