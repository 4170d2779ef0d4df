#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trace/tensor.hpp"

namespace trace {

// Which gallery the recall computation indexes: the full evaluation catalog
// (targets plus distractors) or only the candidate/target pool.
enum class SplitMode { Original, ValSplit };

inline SplitMode parse_split(const std::string& s) {
  if (s == "original") return SplitMode::Original;
  if (s == "val") return SplitMode::ValSplit;
  throw UsageError("split: expected 'original' or 'val', got '" + s + "'");
}

inline std::string split_name(SplitMode m) {
  return m == SplitMode::Original ? "original" : "val";
}

// Immutable brute-force L2 retrieval index. Distances accumulate in double;
// ties break toward the smaller id so rankings are a stable total order.
class RetrievalIndex {
 public:
  static RetrievalIndex build(const std::vector<std::pair<std::int64_t, std::vector<float>>>& rows);

  std::size_t size() const { return ids_.size(); }
  int dim() const { return dim_; }
  const std::vector<std::int64_t>& ids() const { return ids_; }

  // All ids ordered by ascending distance to the query.
  std::vector<std::int64_t> rank(const std::vector<float>& query) const;

 private:
  std::vector<std::int64_t> ids_;
  std::vector<float> embeddings_;  // row-major size() x dim_
  int dim_ = 0;
};

// 100 * fraction of queries whose target appears in the first K ranked ids.
double recall_at_k(const std::vector<std::vector<std::int64_t>>& rankings,
                   const std::vector<std::int64_t>& targets, int k);

}  // namespace trace
