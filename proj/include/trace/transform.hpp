#pragma once

#include <string>
#include <vector>

#include "trace/encoders.hpp"
#include "trace/nn_util.hpp"
#include "trace/params.hpp"
#include "trace/tensor.hpp"

namespace trace {

// Per-level feature transformation: positional self-attention over the
// spatial sites of a feature volume, followed by text-conditioned pooling.
// The query path pools the attended volume with GeM and adds a mask-weighted
// text-conditioned pooling; the target path is GeM pooling alone.

template <typename T>
struct LevelTransformParamsT {
  ParameterT<T>* theta_q = nullptr;  // [C x C], 1x1 conv as a channel map
  ParameterT<T>* theta_k = nullptr;
  ParameterT<T>* theta_v = nullptr;
  ParameterT<T>* gamma = nullptr;    // [1], residual attention weight, init 0
  ParameterT<T>* beta = nullptr;     // [1], text-pool weight, init 0.1
  // Learnable GeM exponent, stored as log(p - 1) so p stays above 1.
  // Null when the exponent is fixed at gem_p.
  ParameterT<T>* gem_log_pm1 = nullptr;
  double temperature = 8.0;
  double gem_p = 3.0;

  void validate() const {
    if (temperature <= 0.0) throw ParamError("transform: temperature must be positive");
    if (gem_p < 1.0) throw ParamError("transform: GeM exponent must be >= 1");
  }
};

template <typename T>
struct TransformParamsT {
  std::vector<LevelTransformParamsT<T>> levels;
};

template <typename T>
TransformParamsT<T> make_transform_params(ParamStoreT<T>& store, const PyramidConfig& cfg,
                                          double temperature, double gem_p,
                                          bool gem_learnable = false,
                                          const std::string& prefix = "transform") {
  TransformParamsT<T> out;
  for (int l = 0; l < cfg.levels; ++l) {
    const int c = cfg.channels[l];
    const std::string base = prefix + ".l" + std::to_string(l + 1);
    LevelTransformParamsT<T> p;
    p.theta_q = &store.create(base + ".theta_q", {c, c});
    p.theta_k = &store.create(base + ".theta_k", {c, c});
    p.theta_v = &store.create(base + ".theta_v", {c, c});
    p.gamma = &store.create(base + ".gamma", {1});
    p.beta = &store.create(base + ".beta", {1});
    if (gem_learnable) p.gem_log_pm1 = &store.create(base + ".gem_log_pm1", {1});
    p.temperature = temperature;
    p.gem_p = gem_p;
    p.validate();
    out.levels.push_back(p);
  }
  return out;
}

template <typename T>
void init_transform_params(TransformParamsT<T>& params, Rng& rng) {
  for (auto& p : params.levels) {
    const int c = p.theta_q->value.dim(0);
    init_uniform_fan_in(*p.theta_q, c, rng);
    init_uniform_fan_in(*p.theta_k, c, rng);
    init_uniform_fan_in(*p.theta_v, c, rng);
    init_constant(*p.gamma, 0.0);   // identity start for the residual attention
    init_constant(*p.beta, 0.1);
    if (p.gem_log_pm1) init_constant(*p.gem_log_pm1, std::log(p.gem_p - 1.0));
  }
}

// Positional self-attention: each output site takes a convex combination of
// the value-projected sites, added back through the learnable scalar gamma.
// The attention matrix is column-normalized: column i holds the source
// distribution for output site i and sums to 1.
template <typename T>
typename GraphT<T>::Var self_attend(GraphT<T>& g, typename GraphT<T>::Var v,
                                    const LevelTransformParamsT<T>& p) {
  const auto& shape = g.value(v).shape();
  if (shape.size() != 3) {
    throw ShapeError("self_attend: expected [CxHxW], got " + shape_string(shape));
  }
  const int c = shape[0], h = shape[1], w = shape[2];
  if (p.theta_q->value.dim(0) != c) {
    throw ShapeError("self_attend: volume channels " + std::to_string(c) +
                     " do not match parameter shape " + shape_string(p.theta_q->value.shape()));
  }
  const int n = h * w;
  auto flat = g.reshape(v, {c, n});
  auto q = g.matmul(g.param(*p.theta_q), flat);
  auto k = g.matmul(g.param(*p.theta_k), flat);
  auto vals = g.matmul(g.param(*p.theta_v), flat);
  auto scores = g.matmul(g.transpose(k), q);       // [N x N]: (source j, output i)
  auto attn = g.softmax(scores, 0);                // columns sum to 1
  auto mixed = g.matmul(vals, attn);               // [C x N]
  auto e = g.reshape(mixed, {c, h, w});
  return g.add(g.mul_scalar_var(e, g.param(*p.gamma)), v);
}

// Spatial relevance mask from the channelwise dot product of the volume with
// the level's text vector, softmax-normalized over all sites with the given
// temperature. Sums to 1.
template <typename T>
typename GraphT<T>::Var cross_modal_mask(GraphT<T>& g, typename GraphT<T>::Var v,
                                         typename GraphT<T>::Var text, double temperature) {
  if (temperature <= 0.0) {
    throw ParamError("cross_modal_mask: temperature must be positive, got " +
                     std::to_string(temperature));
  }
  const auto& shape = g.value(v).shape();
  const int h = shape[1], w = shape[2];
  auto scores = g.cross_correlate(v, text);  // [H x W]
  auto flat = g.reshape(scores, {h * w});
  return g.reshape(g.softmax(flat, 0, temperature), {h, w});
}

// S(c) = sum_{h,w} M(h,w) * V(c,h,w)
template <typename T>
typename GraphT<T>::Var vl_pool(GraphT<T>& g, typename GraphT<T>::Var v,
                                typename GraphT<T>::Var mask) {
  const auto& vs = g.value(v).shape();
  const auto& ms = g.value(mask).shape();
  if (vs.size() != 3 || ms.size() != 2 || vs[1] != ms[0] || vs[2] != ms[1]) {
    throw ShapeError("vl_pool: volume " + shape_string(vs) + " and mask " + shape_string(ms) +
                     " do not align");
  }
  return g.matvec(g.reshape(v, {vs[0], vs[1] * vs[2]}), g.reshape(mask, {ms[0] * ms[1]}));
}

// Generalized-mean pooling per channel. Activations pass through ReLU first
// (the exponent is only defined for nonnegative features); p = 1 reduces to
// the exact arithmetic mean of the rectified values.
template <typename T>
typename GraphT<T>::Var gem_pool(GraphT<T>& g, typename GraphT<T>::Var v, double p) {
  if (p < 1.0) throw ParamError("gem_pool: exponent must be >= 1, got " + std::to_string(p));
  const auto& vs = g.value(v).shape();
  if (vs.size() != 3) throw ShapeError("gem_pool: expected [CxHxW], got " + shape_string(vs));
  const int c = vs[0], n = vs[1] * vs[2];
  auto rect = g.relu(v);
  auto powed = g.pow_scalar(rect, p);
  auto means = g.matvec(g.reshape(powed, {c, n}),
                        g.input(TensorT<T>::full({n}, static_cast<T>(1.0 / n))));
  if (p == 1.0) return means;
  return g.pow_scalar(means, 1.0 / p);
}

// GeM with a learnable exponent p = 1 + exp(q), computed through logs. The
// rectified activations are shifted by 1e-6 to keep the log finite, so this
// path trades the exact p = 1 mean identity for trainability.
template <typename T>
typename GraphT<T>::Var gem_pool_learnable(GraphT<T>& g, typename GraphT<T>::Var v,
                                           ParameterT<T>& log_pm1) {
  const auto& vs = g.value(v).shape();
  if (vs.size() != 3) throw ShapeError("gem_pool: expected [CxHxW], got " + shape_string(vs));
  const int c = vs[0], n = vs[1] * vs[2];
  auto p = g.offset(g.exp(g.param(log_pm1)), 1.0);  // [1], > 1
  auto lx = g.log(g.offset(g.relu(v), 1e-6));
  auto powed = g.exp(g.mul_scalar_var(lx, p));
  auto means = g.matvec(g.reshape(powed, {c, n}),
                        g.input(TensorT<T>::full({n}, static_cast<T>(1.0 / n))));
  auto inv_p = g.pow_scalar(p, -1.0);
  return g.exp(g.mul_scalar_var(g.log(means), inv_p));
}

template <typename T>
typename GraphT<T>::Var pooled_level(GraphT<T>& g, typename GraphT<T>::Var v,
                                     const LevelTransformParamsT<T>& p) {
  return p.gem_log_pm1 ? gem_pool_learnable(g, v, *p.gem_log_pm1) : gem_pool(g, v, p.gem_p);
}

// O_q = GeM(attended) + beta * text-conditioned pooling(attended)
template <typename T>
typename GraphT<T>::Var transform_query_level(GraphT<T>& g, typename GraphT<T>::Var v,
                                              typename GraphT<T>::Var text,
                                              const LevelTransformParamsT<T>& p) {
  p.validate();
  auto attended = self_attend(g, v, p);
  auto mask = cross_modal_mask(g, attended, text, p.temperature);
  auto pooled_text = vl_pool(g, attended, mask);
  auto pooled = pooled_level(g, attended, p);
  return g.add(pooled, g.mul_scalar_var(pooled_text, g.param(*p.beta)));
}

// O_t = GeM(raw volume); no attention, no text.
template <typename T>
typename GraphT<T>::Var transform_target_level(GraphT<T>& g, typename GraphT<T>::Var v,
                                               const LevelTransformParamsT<T>& p) {
  p.validate();
  return pooled_level(g, v, p);
}

// One pooled vector per level.
template <typename T>
std::vector<typename GraphT<T>::Var> transform_query_pyramid(GraphT<T>& g,
                                                             const FeaturePyramidT<T>& pyramid,
                                                             const SentenceEmbeddingT<T>& text,
                                                             const TransformParamsT<T>& params) {
  if (pyramid.levels.size() != params.levels.size() ||
      text.level_text.size() != params.levels.size()) {
    throw UsageError("transform_query_pyramid: level count mismatch");
  }
  std::vector<typename GraphT<T>::Var> out;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    out.push_back(transform_query_level(g, pyramid.levels[l], text.level_text[l], params.levels[l]));
  }
  return out;
}

template <typename T>
std::vector<typename GraphT<T>::Var> transform_target_pyramid(GraphT<T>& g,
                                                              const FeaturePyramidT<T>& pyramid,
                                                              const TransformParamsT<T>& params) {
  if (pyramid.levels.size() != params.levels.size()) {
    throw UsageError("transform_target_pyramid: level count mismatch");
  }
  std::vector<typename GraphT<T>::Var> out;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    out.push_back(transform_target_level(g, pyramid.levels[l], params.levels[l]));
  }
  return out;
}

}  // namespace trace
