#include "trace/eval.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace trace {

RetrievalIndex RetrievalIndex::build(
    const std::vector<std::pair<std::int64_t, std::vector<float>>>& rows) {
  RetrievalIndex index;
  if (rows.empty()) return index;
  index.dim_ = static_cast<int>(rows.front().second.size());
  if (index.dim_ == 0) throw UsageError("build_index: zero-dimensional embeddings");
  std::unordered_set<std::int64_t> seen;
  index.embeddings_.reserve(rows.size() * static_cast<std::size_t>(index.dim_));
  for (const auto& [id, emb] : rows) {
    if (static_cast<int>(emb.size()) != index.dim_) {
      throw ShapeError("build_index: embedding for id " + std::to_string(id) + " has dimension " +
                       std::to_string(emb.size()) + ", expected " + std::to_string(index.dim_));
    }
    if (!seen.insert(id).second) {
      throw UsageError("build_index: duplicate id " + std::to_string(id));
    }
    index.ids_.push_back(id);
    index.embeddings_.insert(index.embeddings_.end(), emb.begin(), emb.end());
  }
  return index;
}

std::vector<std::int64_t> RetrievalIndex::rank(const std::vector<float>& query) const {
  if (ids_.empty()) throw UsageError("rank: index is empty");
  if (static_cast<int>(query.size()) != dim_) {
    throw ShapeError("rank: query dimension " + std::to_string(query.size()) + " does not match index " +
                     std::to_string(dim_));
  }
  std::vector<std::pair<double, std::int64_t>> scored(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    const float* row = embeddings_.data() + i * static_cast<std::size_t>(dim_);
    double acc = 0.0;
    for (int j = 0; j < dim_; ++j) {
      const double d = static_cast<double>(query[static_cast<std::size_t>(j)]) - row[j];
      acc += d * d;
    }
    scored[i] = {acc, ids_[i]};
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::int64_t> out(scored.size());
  for (std::size_t i = 0; i < scored.size(); ++i) out[i] = scored[i].second;
  return out;
}

double recall_at_k(const std::vector<std::vector<std::int64_t>>& rankings,
                   const std::vector<std::int64_t>& targets, int k) {
  if (rankings.size() != targets.size() || rankings.empty()) {
    throw UsageError("recall_at_k: need matching non-empty rankings and targets");
  }
  if (k < 1) throw ParamError("recall_at_k: K must be positive");
  std::size_t hits = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto& ranked = rankings[q];
    const std::size_t limit = std::min(ranked.size(), static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < limit; ++i) {
      if (ranked[i] == targets[q]) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(rankings.size());
}

}  // namespace trace
