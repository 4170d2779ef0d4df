#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "trace/rng.hpp"
#include "trace/tensor.hpp"

namespace trace {

// Negative selection for the triplet objective: a per-draw Bernoulli mixture
// of uniform sampling and distance-weighted sampling with weights
// exp(-d / tau), so nearer candidates are picked more often.
struct NegativePolicy {
  double hard_fraction = 0.5;  // probability of a distance-weighted draw
  double tau = 1.0;

  void validate() const {
    if (hard_fraction < 0.0 || hard_fraction > 1.0) {
      throw ParamError("neg.hard_fraction must lie in [0,1]");
    }
    if (tau <= 0.0) throw ParamError("neg.tau must be positive");
  }
};

template <typename T>
struct NegativeCandidateT {
  std::int64_t id = 0;
  const TensorT<T>* embedding = nullptr;
};

// Picks one candidate, never returning an excluded id. Distances are plain
// L2 between the anchor and each candidate embedding, accumulated in double.
template <typename T>
std::size_t sample_negative_index(const TensorT<T>& anchor,
                                  const std::vector<NegativeCandidateT<T>>& candidates,
                                  std::int64_t exclude_query, std::int64_t exclude_target,
                                  const NegativePolicy& policy, Rng& rng) {
  policy.validate();
  std::vector<std::size_t> pool;
  pool.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto id = candidates[i].id;
    if (id == exclude_query || id == exclude_target) continue;
    pool.push_back(i);
  }
  if (pool.empty()) throw UsageError("sample_negative: no non-excluded candidates in pool");
  if (pool.size() == 1) return pool[0];

  if (!rng.bernoulli(policy.hard_fraction)) {
    return pool[static_cast<std::size_t>(rng.below(pool.size()))];
  }

  std::vector<double> weights(pool.size());
  double min_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < pool.size(); ++k) {
    const TensorT<T>& emb = *candidates[pool[k]].embedding;
    double acc = 0.0;
    for (std::size_t i = 0; i < emb.size(); ++i) {
      const double d = static_cast<double>(anchor[i]) - static_cast<double>(emb[i]);
      acc += d * d;
    }
    weights[k] = std::sqrt(acc);
    min_d = std::min(min_d, weights[k]);
  }
  double total = 0.0;
  for (double& w : weights) {
    // Shift by the minimum distance so the exponentials stay in range; the
    // normalized weights are unchanged.
    w = std::exp(-(w - min_d) / policy.tau);
    total += w;
  }
  const double r = rng.uniform() * total;
  double cum = 0.0;
  for (std::size_t k = 0; k < pool.size(); ++k) {
    cum += weights[k];
    if (r < cum) return pool[k];
  }
  return pool.back();
}

}  // namespace trace
