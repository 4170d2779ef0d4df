#pragma once

#include <string>
#include <vector>

#include "trace/nn_util.hpp"
#include "trace/params.hpp"
#include "trace/tensor.hpp"

namespace trace {

struct LossWeights {
  double lambda1 = 1.0;   // triplet
  double lambda2 = 0.6;   // adversarial (generator view)
  double lambda3 = 0.1;   // consistency
  double alpha_t = 1.0;
  double alpha_i = 0.1;

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || alpha_t < 0 || alpha_i < 0) {
      throw ParamError("loss weights must be nonnegative");
    }
  }
};

// Soft-plus triplet: log(1 + e^{d+ - d-}) with L2 distances. Zero in the
// limit of a well-separated negative, ln 2 when the gap closes.
template <typename T>
typename GraphT<T>::Var triplet_loss(GraphT<T>& g, typename GraphT<T>::Var f_com,
                                     typename GraphT<T>::Var f_tgt_pos,
                                     typename GraphT<T>::Var f_tgt_neg) {
  if (!g.value(f_com).same_shape(g.value(f_tgt_pos)) ||
      !g.value(f_com).same_shape(g.value(f_tgt_neg))) {
    throw ShapeError("triplet_loss: embedding shapes differ: " +
                     shape_string(g.value(f_com).shape()) + ", " +
                     shape_string(g.value(f_tgt_pos).shape()) + ", " +
                     shape_string(g.value(f_tgt_neg).shape()));
  }
  auto d_pos = g.l2_norm(g.sub(f_com, f_tgt_pos));
  auto d_neg = g.l2_norm(g.sub(f_com, f_tgt_neg));
  return g.softplus(g.sub(d_pos, d_neg));
}

// Two-layer critic with sigmoid output in (0, 1).
template <typename T>
struct DiscriminatorT {
  ParameterT<T>* w1 = nullptr;
  ParameterT<T>* b1 = nullptr;
  ParameterT<T>* w2 = nullptr;
  ParameterT<T>* b2 = nullptr;

  typename GraphT<T>::Var apply(GraphT<T>& g, typename GraphT<T>::Var x,
                                bool params_constant = false) const {
    auto hidden = params_constant ? affine_const(g, *w1, *b1, x) : affine(g, *w1, *b1, x);
    hidden = g.relu(hidden);
    auto logit = params_constant ? affine_const(g, *w2, *b2, hidden) : affine(g, *w2, *b2, hidden);
    return g.sigmoid(logit);  // [1]
  }
};

template <typename T>
DiscriminatorT<T> make_discriminator(ParamStoreT<T>& store, int dim,
                                     const std::string& prefix = "disc") {
  DiscriminatorT<T> d;
  const int hidden = std::max(1, dim / 2);
  d.w1 = &store.create(prefix + ".w1", {hidden, dim});
  d.b1 = &store.create(prefix + ".b1", {hidden});
  d.w2 = &store.create(prefix + ".w2", {1, hidden});
  d.b2 = &store.create(prefix + ".b2", {1});
  return d;
}

template <typename T>
void init_discriminator(DiscriminatorT<T>& d, Rng& rng) {
  const int dim = d.w1->value.dim(1);
  const int hidden = d.w1->value.dim(0);
  init_uniform_fan_in(*d.w1, dim, rng);
  init_uniform_fan_in(*d.b1, dim, rng);
  init_uniform_fan_in(*d.w2, hidden, rng);
  init_uniform_fan_in(*d.b2, hidden, rng);
}

constexpr double kDiscClamp = 1e-7;

// Critic objective: -E[log D(target)] - E[log(1 - D(composed))]. The caller
// passes detached embeddings; composed inputs are constants here by
// construction.
template <typename T>
typename GraphT<T>::Var discriminator_loss(GraphT<T>& g, const DiscriminatorT<T>& d,
                                           const std::vector<typename GraphT<T>::Var>& f_tgt_batch,
                                           const std::vector<typename GraphT<T>::Var>& f_com_batch) {
  if (f_tgt_batch.empty() || f_tgt_batch.size() != f_com_batch.size()) {
    throw UsageError("discriminator_loss: batches must be non-empty and equally sized");
  }
  std::vector<typename GraphT<T>::Var> terms;
  terms.reserve(f_tgt_batch.size());
  for (std::size_t i = 0; i < f_tgt_batch.size(); ++i) {
    auto d_real = g.clamp(d.apply(g, f_tgt_batch[i]), kDiscClamp, 1.0 - kDiscClamp);
    auto d_fake = g.clamp(d.apply(g, f_com_batch[i]), kDiscClamp, 1.0 - kDiscClamp);
    auto one_minus_fake = g.offset(g.scale(d_fake, -1.0), 1.0);
    terms.push_back(g.scale(g.add(g.log(d_real), g.log(one_minus_fake)), -1.0));
  }
  return g.mean(g.concat_vec(terms));
}

// Non-saturating generator view, -E[log D(composed)], with the critic's
// weights held constant so the signal reaches only the composition path.
template <typename T>
typename GraphT<T>::Var generator_loss(GraphT<T>& g, const DiscriminatorT<T>& d,
                                       const std::vector<typename GraphT<T>::Var>& f_com_batch) {
  if (f_com_batch.empty()) throw UsageError("generator_loss: empty batch");
  std::vector<typename GraphT<T>::Var> terms;
  terms.reserve(f_com_batch.size());
  for (auto f_com : f_com_batch) {
    auto d_fake = g.clamp(d.apply(g, f_com, /*params_constant=*/true), kDiscClamp, 1.0 - kDiscClamp);
    terms.push_back(g.scale(g.log(d_fake), -1.0));
  }
  return g.mean(g.concat_vec(terms));
}

template <typename T>
struct ConsistencyHeadsT {
  ParameterT<T>* img_w = nullptr;   // C_L -> C_L
  ParameterT<T>* img_b = nullptr;
  ParameterT<T>* text_w = nullptr;  // C_L -> C_L
  ParameterT<T>* text_b = nullptr;
};

template <typename T>
ConsistencyHeadsT<T> make_consistency_heads(ParamStoreT<T>& store, int dim,
                                            const std::string& prefix = "cons") {
  ConsistencyHeadsT<T> h;
  h.img_w = &store.create(prefix + ".img.w", {dim, dim});
  h.img_b = &store.create(prefix + ".img.b", {dim});
  h.text_w = &store.create(prefix + ".text.w", {dim, dim});
  h.text_b = &store.create(prefix + ".text.b", {dim});
  return h;
}

template <typename T>
void init_consistency_heads(ConsistencyHeadsT<T>& h, Rng& rng) {
  const int dim = h.img_w->value.dim(1);
  init_uniform_fan_in(*h.img_w, dim, rng);
  init_uniform_fan_in(*h.img_b, dim, rng);
  init_uniform_fan_in(*h.text_w, dim, rng);
  init_uniform_fan_in(*h.text_b, dim, rng);
}

// alpha_t * |proj_text(f_com) - f_text| + alpha_i * |proj_img(f_com) - f_tgt|
// (plain L2 norms, not squared).
template <typename T>
typename GraphT<T>::Var consistency_loss(GraphT<T>& g, const ConsistencyHeadsT<T>& heads,
                                         typename GraphT<T>::Var f_com,
                                         typename GraphT<T>::Var f_text,
                                         typename GraphT<T>::Var f_tgt, double alpha_t,
                                         double alpha_i) {
  auto gen_text = affine(g, *heads.text_w, *heads.text_b, f_com);
  auto gen_img = affine(g, *heads.img_w, *heads.img_b, f_com);
  auto text_term = g.l2_norm(g.sub(gen_text, f_text));
  auto img_term = g.l2_norm(g.sub(gen_img, f_tgt));
  return g.add(g.scale(text_term, alpha_t), g.scale(img_term, alpha_i));
}

// lambda1 * triplet + lambda2 * adversarial(generator view) + lambda3 * consistency
template <typename T>
typename GraphT<T>::Var total_loss(GraphT<T>& g, typename GraphT<T>::Var triplet,
                                   typename GraphT<T>::Var adversarial,
                                   typename GraphT<T>::Var consistency, const LossWeights& w) {
  w.validate();
  return g.add(g.scale(triplet, w.lambda1),
               g.add(g.scale(adversarial, w.lambda2), g.scale(consistency, w.lambda3)));
}

}  // namespace trace
