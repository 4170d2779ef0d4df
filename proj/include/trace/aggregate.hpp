#pragma once

#include <string>
#include <vector>

#include "trace/encoders.hpp"
#include "trace/nn_util.hpp"
#include "trace/params.hpp"
#include "trace/tensor.hpp"

namespace trace {

// Fuses the L per-level vectors into one embedding. The default operator is
// an LSTM unrolled over the levels (shallow to deep) whose final hidden state
// passes through BatchNorm and an affine head; addition, Hadamard product and
// projected concatenation are the ablation alternatives and replace the whole
// aggregation, head included (concat keeps a projection because the
// dimensions force one).

enum class AggregatorKind { Lstm, Addition, Concat, Hadamard };

// The LSTM hidden states being normalized are gated into (-1,1) and can have
// small batch variance; a tight epsilon keeps the normalized variance at 1
// to much better than 1e-4.
constexpr double kAggBnEps = 1e-8;

inline AggregatorKind parse_aggregator(const std::string& s) {
  if (s == "lstm") return AggregatorKind::Lstm;
  if (s == "add") return AggregatorKind::Addition;
  if (s == "concat") return AggregatorKind::Concat;
  if (s == "hadamard") return AggregatorKind::Hadamard;
  throw ParamError("hfa.kind: expected one of lstm/add/concat/hadamard, got '" + s + "'");
}

inline std::string aggregator_name(AggregatorKind k) {
  switch (k) {
    case AggregatorKind::Lstm: return "lstm";
    case AggregatorKind::Addition: return "add";
    case AggregatorKind::Concat: return "concat";
    case AggregatorKind::Hadamard: return "hadamard";
  }
  return "?";
}

template <typename T>
struct AggregatorParamsT {
  using Var = typename GraphT<T>::Var;

  AggregatorKind kind = AggregatorKind::Lstm;
  // When set, the target path shares the BatchNorm+affine head with the
  // query path instead of emitting the raw LSTM hidden state.
  bool symmetric_heads = false;
  int levels = 0;
  int dim = 0;  // C_L

  std::vector<ParameterT<T>*> proj_w, proj_b;  // per level, C_l -> C_L
  // LSTM gates: input, forget, cell candidate, output.
  ParameterT<T>* wx[4] = {};
  ParameterT<T>* wh[4] = {};
  ParameterT<T>* b[4] = {};
  ParameterT<T>* bn_gamma = nullptr;
  ParameterT<T>* bn_beta = nullptr;
  ParameterT<T>* head_w = nullptr;  // affine after BatchNorm
  ParameterT<T>* head_b = nullptr;
  ParameterT<T>* concat_w = nullptr;  // L*C_L -> C_L, Concat kind only
  ParameterT<T>* concat_b = nullptr;
  BnStatsT<T> bn_stats;
};

template <typename T>
AggregatorParamsT<T> make_aggregator_params(ParamStoreT<T>& store, const PyramidConfig& cfg,
                                            AggregatorKind kind, bool symmetric_heads = false,
                                            const std::string& prefix = "aggregate") {
  AggregatorParamsT<T> p;
  p.kind = kind;
  p.symmetric_heads = symmetric_heads;
  p.levels = cfg.levels;
  p.dim = cfg.embedding_dim();
  const int d = p.dim;
  for (int l = 0; l < cfg.levels; ++l) {
    const std::string base = prefix + ".proj" + std::to_string(l + 1);
    p.proj_w.push_back(&store.create(base + ".w", {d, cfg.channels[l]}));
    p.proj_b.push_back(&store.create(base + ".b", {d}));
  }
  static const char* gate_names[4] = {"i", "f", "g", "o"};
  for (int gate = 0; gate < 4; ++gate) {
    const std::string base = prefix + ".lstm." + gate_names[gate];
    p.wx[gate] = &store.create(base + ".wx", {d, d});
    p.wh[gate] = &store.create(base + ".wh", {d, d});
    p.b[gate] = &store.create(base + ".b", {d});
  }
  p.bn_gamma = &store.create(prefix + ".bn.gamma", {d});
  p.bn_beta = &store.create(prefix + ".bn.beta", {d});
  p.head_w = &store.create(prefix + ".head.w", {d, d});
  p.head_b = &store.create(prefix + ".head.b", {d});
  if (kind == AggregatorKind::Concat) {
    p.concat_w = &store.create(prefix + ".concat.w", {d, d * cfg.levels});
    p.concat_b = &store.create(prefix + ".concat.b", {d});
  }
  p.bn_stats = BnStatsT<T>(d);
  return p;
}

template <typename T>
void init_aggregator_params(AggregatorParamsT<T>& p, Rng& rng) {
  for (std::size_t l = 0; l < p.proj_w.size(); ++l) {
    const int fan_in = p.proj_w[l]->value.dim(1);
    init_uniform_fan_in(*p.proj_w[l], fan_in, rng);
    init_uniform_fan_in(*p.proj_b[l], fan_in, rng);
  }
  for (int gate = 0; gate < 4; ++gate) {
    init_uniform_fan_in(*p.wx[gate], p.dim, rng);
    init_uniform_fan_in(*p.wh[gate], p.dim, rng);
    init_uniform_fan_in(*p.b[gate], p.dim, rng);
  }
  // Forget-gate bias starts at +1, the usual recurrent-training stabilizer.
  for (std::size_t i = 0; i < p.b[1]->value.size(); ++i) p.b[1]->value[i] += T(1);
  init_constant(*p.bn_gamma, 1.0);
  init_constant(*p.bn_beta, 0.0);
  init_uniform_fan_in(*p.head_w, p.dim, rng);
  init_uniform_fan_in(*p.head_b, p.dim, rng);
  if (p.concat_w) {
    const int fan_in = p.concat_w->value.dim(1);
    init_uniform_fan_in(*p.concat_w, fan_in, rng);
    init_uniform_fan_in(*p.concat_b, fan_in, rng);
  }
}

// G^l = proj_l(O^l)
template <typename T>
typename GraphT<T>::Var project_level(GraphT<T>& g, const AggregatorParamsT<T>& p,
                                      typename GraphT<T>::Var pooled, int level) {
  if (level < 0 || level >= p.levels) throw UsageError("project_level: level index out of range");
  return affine(g, *p.proj_w[static_cast<std::size_t>(level)],
                *p.proj_b[static_cast<std::size_t>(level)], pooled);
}

template <typename T>
void check_level_vectors(const GraphT<T>& g, const AggregatorParamsT<T>& p,
                         const std::vector<typename GraphT<T>::Var>& gs, const char* who) {
  if (static_cast<int>(gs.size()) != p.levels) {
    throw UsageError(std::string(who) + ": expected " + std::to_string(p.levels) +
                     " level vectors, got " + std::to_string(gs.size()));
  }
  for (auto v : gs) {
    if (g.value(v).rank() != 1 || g.value(v).dim(0) != p.dim) {
      throw UsageError(std::string(who) + ": level vectors must have dimension " +
                       std::to_string(p.dim) + ", got " + shape_string(g.value(v).shape()));
    }
  }
}

// Final hidden state of the LSTM unrolled over [G^1 .. G^L].
template <typename T>
typename GraphT<T>::Var lstm_over_levels(GraphT<T>& g, const AggregatorParamsT<T>& p,
                                         const std::vector<typename GraphT<T>::Var>& gs) {
  using Var = typename GraphT<T>::Var;
  Var h = g.input(TensorT<T>({p.dim}));
  Var c = g.input(TensorT<T>({p.dim}));
  for (Var x : gs) {
    auto pre = [&](int gate) {
      return g.add(g.add(g.matvec(g.param(*p.wx[gate]), x), g.matvec(g.param(*p.wh[gate]), h)),
                   g.param(*p.b[gate]));
    };
    Var in_gate = g.sigmoid(pre(0));
    Var forget_gate = g.sigmoid(pre(1));
    Var cand = g.tanh(pre(2));
    Var out_gate = g.sigmoid(pre(3));
    c = g.add(g.mul(forget_gate, c), g.mul(in_gate, cand));
    h = g.mul(out_gate, g.tanh(c));
  }
  return h;
}

template <typename T>
typename GraphT<T>::Var aggregate_nonlstm(GraphT<T>& g, const AggregatorParamsT<T>& p,
                                          const std::vector<typename GraphT<T>::Var>& gs) {
  switch (p.kind) {
    case AggregatorKind::Addition:
      return g.add_n(gs);
    case AggregatorKind::Hadamard: {
      auto out = gs[0];
      for (std::size_t l = 1; l < gs.size(); ++l) out = g.mul(out, gs[l]);
      return out;
    }
    case AggregatorKind::Concat:
      return affine(g, *p.concat_w, *p.concat_b, g.concat_vec(gs));
    case AggregatorKind::Lstm:
      break;
  }
  throw UsageError("aggregate_nonlstm: called with LSTM kind");
}

// Query-side aggregation for a whole batch; BatchNorm sees the batch jointly
// in training mode. Returns one f_agg per example.
template <typename T>
std::vector<typename GraphT<T>::Var> aggregate_query_batch(
    GraphT<T>& g, AggregatorParamsT<T>& p,
    const std::vector<std::vector<typename GraphT<T>::Var>>& batch_gs, bool training) {
  using Var = typename GraphT<T>::Var;
  std::vector<Var> out;
  out.reserve(batch_gs.size());
  if (p.kind != AggregatorKind::Lstm) {
    for (const auto& gs : batch_gs) {
      check_level_vectors(g, p, gs, "aggregate_query");
      out.push_back(aggregate_nonlstm(g, p, gs));
    }
    return out;
  }
  std::vector<Var> hidden;
  hidden.reserve(batch_gs.size());
  for (const auto& gs : batch_gs) {
    check_level_vectors(g, p, gs, "aggregate_query");
    hidden.push_back(lstm_over_levels(g, p, gs));
  }
  Var stacked = g.stack_rows(hidden);
  Var normed = g.batch_norm(stacked, g.param(*p.bn_gamma), g.param(*p.bn_beta), p.bn_stats, training,
                            0.1, kAggBnEps);
  for (std::size_t i = 0; i < batch_gs.size(); ++i) {
    out.push_back(affine(g, *p.head_w, *p.head_b, g.slice_row(normed, static_cast<int>(i))));
  }
  return out;
}

// Single-example query aggregation (eval-mode statistics).
template <typename T>
typename GraphT<T>::Var aggregate_query(GraphT<T>& g, AggregatorParamsT<T>& p,
                                        const std::vector<typename GraphT<T>::Var>& gs) {
  return aggregate_query_batch(g, p, {gs}, false)[0];
}

// Target-side aggregation. The LSTM cell is shared with the query path; by
// default the target embedding is the raw final hidden state, without the
// BatchNorm+affine head (`symmetric_heads` restores symmetry).
template <typename T>
typename GraphT<T>::Var aggregate_target(GraphT<T>& g, AggregatorParamsT<T>& p,
                                         const std::vector<typename GraphT<T>::Var>& gs,
                                         bool training = false) {
  check_level_vectors(g, p, gs, "aggregate_target");
  if (p.kind != AggregatorKind::Lstm) return aggregate_nonlstm(g, p, gs);
  auto h = lstm_over_levels(g, p, gs);
  if (!p.symmetric_heads) return h;
  auto stacked = g.stack_rows(std::vector<typename GraphT<T>::Var>{h});
  auto normed = g.batch_norm(stacked, g.param(*p.bn_gamma), g.param(*p.bn_beta), p.bn_stats, training,
                             0.1, kAggBnEps);
  return affine(g, *p.head_w, *p.head_b, g.slice_row(normed, 0));
}

}  // namespace trace
