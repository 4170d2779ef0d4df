#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "trace/nn_util.hpp"
#include "trace/params.hpp"
#include "trace/tensor.hpp"

namespace trace {

// Fuses the aggregated visio-linguistic vector with the projected global
// text vector into the retrieval embedding. The default residual offsetting
// adds the two and rescales to length delta (optimized as log delta so it
// stays positive); concat/gating/Hadamard are the ablation alternatives.

enum class CompositionKind { ResidualOffset, Concat, ResidualGating, Hadamard };

inline CompositionKind parse_composition(const std::string& s) {
  if (s == "residual_offset") return CompositionKind::ResidualOffset;
  if (s == "concat") return CompositionKind::Concat;
  if (s == "residual_gating") return CompositionKind::ResidualGating;
  if (s == "hadamard") return CompositionKind::Hadamard;
  throw ParamError("vlc.kind: expected one of residual_offset/concat/residual_gating/hadamard, got '" +
                   s + "'");
}

inline std::string composition_name(CompositionKind k) {
  switch (k) {
    case CompositionKind::ResidualOffset: return "residual_offset";
    case CompositionKind::Concat: return "concat";
    case CompositionKind::ResidualGating: return "residual_gating";
    case CompositionKind::Hadamard: return "hadamard";
  }
  return "?";
}

template <typename T>
struct CompositionParamsT {
  CompositionKind kind = CompositionKind::ResidualOffset;
  bool normalize_target = false;
  int dim = 0;

  ParameterT<T>* text_w = nullptr;   // d_sent -> C_L
  ParameterT<T>* text_b = nullptr;
  ParameterT<T>* log_delta = nullptr;
  ParameterT<T>* concat_w = nullptr;  // 2*C_L -> C_L
  ParameterT<T>* concat_b = nullptr;
  ParameterT<T>* gate_w = nullptr;    // 2*C_L -> C_L
  ParameterT<T>* gate_b = nullptr;
  ParameterT<T>* res_w = nullptr;     // 2*C_L -> C_L
  ParameterT<T>* res_b = nullptr;
};

template <typename T>
CompositionParamsT<T> make_composition_params(ParamStoreT<T>& store, int sentence_dim, int dim,
                                              CompositionKind kind, bool normalize_target = false,
                                              const std::string& prefix = "compose") {
  CompositionParamsT<T> p;
  p.kind = kind;
  p.normalize_target = normalize_target;
  p.dim = dim;
  p.text_w = &store.create(prefix + ".text.w", {dim, sentence_dim});
  p.text_b = &store.create(prefix + ".text.b", {dim});
  p.log_delta = &store.create(prefix + ".log_delta", {1});
  if (kind == CompositionKind::Concat) {
    p.concat_w = &store.create(prefix + ".concat.w", {dim, 2 * dim});
    p.concat_b = &store.create(prefix + ".concat.b", {dim});
  }
  if (kind == CompositionKind::ResidualGating) {
    p.gate_w = &store.create(prefix + ".gate.w", {dim, 2 * dim});
    p.gate_b = &store.create(prefix + ".gate.b", {dim});
    p.res_w = &store.create(prefix + ".res.w", {dim, 2 * dim});
    p.res_b = &store.create(prefix + ".res.b", {dim});
  }
  return p;
}

template <typename T>
void init_composition_params(CompositionParamsT<T>& p, Rng& rng, double delta_init = 4.0) {
  const int sent = p.text_w->value.dim(1);
  init_uniform_fan_in(*p.text_w, sent, rng);
  init_uniform_fan_in(*p.text_b, sent, rng);
  p.log_delta->value[0] = static_cast<T>(std::log(delta_init));
  if (p.concat_w) {
    init_uniform_fan_in(*p.concat_w, 2 * p.dim, rng);
    init_uniform_fan_in(*p.concat_b, 2 * p.dim, rng);
  }
  if (p.gate_w) {
    init_uniform_fan_in(*p.gate_w, 2 * p.dim, rng);
    init_uniform_fan_in(*p.gate_b, 2 * p.dim, rng);
    init_uniform_fan_in(*p.res_w, 2 * p.dim, rng);
    init_uniform_fan_in(*p.res_b, 2 * p.dim, rng);
  }
}

// f_text = Omega_g(F_sent)
template <typename T>
typename GraphT<T>::Var project_text(GraphT<T>& g, const CompositionParamsT<T>& p,
                                     typename GraphT<T>::Var sentence) {
  return affine(g, *p.text_w, *p.text_b, sentence);
}

template <typename T>
typename GraphT<T>::Var compose(GraphT<T>& g, CompositionParamsT<T>& p,
                                typename GraphT<T>::Var f_agg, typename GraphT<T>::Var f_text) {
  if (!g.value(f_agg).same_shape(g.value(f_text))) {
    throw ShapeError("compose: operand shapes differ: " + shape_string(g.value(f_agg).shape()) +
                     " vs " + shape_string(g.value(f_text).shape()));
  }
  switch (p.kind) {
    case CompositionKind::ResidualOffset: {
      auto summed = g.add(f_agg, f_text);
      auto delta = g.exp(g.param(*p.log_delta));
      return g.mul_scalar_var(g.normalize(summed), delta);
    }
    case CompositionKind::Concat:
      return affine(g, *p.concat_w, *p.concat_b, g.concat_vec({f_agg, f_text}));
    case CompositionKind::Hadamard:
      return g.mul(f_agg, f_text);
    case CompositionKind::ResidualGating: {
      auto cat = g.concat_vec({f_agg, f_text});
      auto gate = g.sigmoid(affine(g, *p.gate_w, *p.gate_b, cat));
      auto res = affine(g, *p.res_w, *p.res_b, cat);
      return g.add(g.mul(gate, f_agg), res);
    }
  }
  throw UsageError("compose: unknown kind");
}

// Index-side hook: identity by default, optional unit normalization.
template <typename T>
typename GraphT<T>::Var compose_target(GraphT<T>& g, const CompositionParamsT<T>& p,
                                       typename GraphT<T>::Var f_tgt) {
  return p.normalize_target ? g.normalize(f_tgt) : f_tgt;
}

}  // namespace trace
