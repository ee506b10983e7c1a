#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "attex/encoder.hpp"
#include "attex/image.hpp"
#include "attex/rng.hpp"
#include "attex/tensor.hpp"

namespace attex {

// Whether context vectors keep the 1/K factor in front of the attention
// weighted sum. per_paper keeps it; sat drops it (classic soft-attention
// convention). The factor rescales every context by K, so the switch must be
// stored with trained weights.
enum class ContextScale { per_paper, sat };

inline std::string to_string(ContextScale s) {
  return s == ContextScale::per_paper ? "per_paper" : "sat";
}

inline ContextScale context_scale_from_string(const std::string& s) {
  if (s == "per_paper") return ContextScale::per_paper;
  if (s == "sat") return ContextScale::sat;
  throw ConfigError("context_scale must be per_paper or sat, got '" + s + "'");
}

// Additive attention: e_j = w_s . tanh(W_h h + W_v v_j), one hidden layer of
// width attn_dim shared across locations.
template <typename S>
struct AttentionParams {
  Tensor<S> w_h;  // {hidden_dim, attn_dim}
  Tensor<S> w_v;  // {feature_dim, attn_dim}
  Tensor<S> w_s;  // {attn_dim}

  static AttentionParams init(int hidden_dim, int feature_dim, int attn_dim, Rng& rng) {
    AttentionParams p;
    const S rh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hidden_dim)));
    const S rv = static_cast<S>(1.0 / std::sqrt(static_cast<double>(feature_dim)));
    const S rs = static_cast<S>(1.0 / std::sqrt(static_cast<double>(attn_dim)));
    p.w_h = Tensor<S>::uniform({hidden_dim, attn_dim}, -rh, rh, rng, true);
    p.w_v = Tensor<S>::uniform({feature_dim, attn_dim}, -rv, rv, rng, true);
    p.w_s = Tensor<S>::uniform({attn_dim}, -rs, rs, rng, true);
    return p;
  }

  static AttentionParams zeros(int hidden_dim, int feature_dim, int attn_dim) {
    AttentionParams p;
    p.w_h = Tensor<S>::zeros({hidden_dim, attn_dim}, true);
    p.w_v = Tensor<S>::zeros({feature_dim, attn_dim}, true);
    p.w_s = Tensor<S>::zeros({attn_dim}, true);
    return p;
  }

  std::vector<std::pair<std::string, Tensor<S>>> named(const std::string& prefix) const {
    return {{prefix + ".w_h", w_h}, {prefix + ".w_v", w_v}, {prefix + ".w_s", w_s}};
  }
};

// Pre-softmax scores over the K locations, shape {K}.
template <typename S>
Tensor<S> attention_scores(const Tensor<S>& h, const Tensor<S>& locations,
                           const AttentionParams<S>& p) {
  Tensor<S> hidden = bias_add(matmul(locations, p.w_v), matmul(h, p.w_h));
  return matmul(tanh_t(hidden), p.w_s);
}

// Softmaxed attention map over locations.
template <typename S>
Tensor<S> attend(const Tensor<S>& h, const FeatureGrid<S>& features,
                 const AttentionParams<S>& p) {
  return softmax(attention_scores(h, features.locations, p));
}

// Single weighted-sum kernel behind both the intrinsic and the enforced
// context path, so the two agree bit-for-bit when fed the same weights.
template <typename S>
Tensor<S> weighted_context(const Tensor<S>& alpha, const Tensor<S>& locations,
                           ContextScale mode) {
  if (alpha.rank() != 1 || alpha.extent(0) != locations.extent(0))
    throw ShapeError("weighted_context: alpha " + shape_str(alpha.shape()) +
                     " does not match locations " + shape_str(locations.shape()));
  Tensor<S> ctx = matmul(alpha, locations);
  if (mode == ContextScale::per_paper)
    ctx = scale(ctx, S(1) / static_cast<S>(locations.extent(0)));
  return ctx;
}

template <typename S>
Tensor<S> focus_features(const Tensor<S>& alpha, const FeatureGrid<S>& features,
                         ContextScale mode) {
  return weighted_context(alpha, features.locations, mode);
}

// Softmax of an externally supplied map over the K locations. The map is
// resampled to the feature grid first; NaN entries are rejected before the
// softmax sees them.
template <typename S>
Tensor<S> enforced_attention(const SaliencyMap& eps, const FeatureGrid<S>& features) {
  SaliencyMap grid = resample_bilinear(eps, features.grid_h, features.grid_w);
  std::vector<S> flat(grid.values.size());
  for (size_t i = 0; i < grid.values.size(); ++i) {
    if (std::isnan(grid.values[i]))
      throw NumericError("enforcement map contains NaN at cell " + std::to_string(i));
    flat[i] = static_cast<S>(grid.values[i]);
  }
  return softmax(Tensor<S>::from({features.num_locations()}, std::move(flat)));
}

template <typename S>
Tensor<S> enforce_context(const SaliencyMap& eps, const FeatureGrid<S>& features,
                          ContextScale mode) {
  return weighted_context(enforced_attention(eps, features), features.locations, mode);
}

}  // namespace attex
