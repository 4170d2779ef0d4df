#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "test_support.hpp"
#include "trace/eval.hpp"

using namespace trace;

namespace {

std::vector<float> vec(std::initializer_list<float> v) { return std::vector<float>(v); }

std::vector<std::pair<std::int64_t, std::vector<float>>> random_rows(int n, int dim, Rng& rng) {
  std::vector<std::pair<std::int64_t, std::vector<float>>> rows;
  for (int i = 0; i < n; ++i) {
    std::vector<float> e(static_cast<std::size_t>(dim));
    for (auto& x : e) x = static_cast<float>(rng.uniform(-1, 1));
    rows.emplace_back(i, std::move(e));
  }
  return rows;
}

}  // namespace

TEST_CASE("index construction") {
  SUBCASE("duplicate ids are rejected") {
    CHECK_THROWS_AS(RetrievalIndex::build({{1, vec({0, 0})}, {1, vec({1, 1})}}), UsageError);
  }
  SUBCASE("empty index is usable but queries error") {
    auto index = RetrievalIndex::build({});
    CHECK(index.size() == 0);
    CHECK_THROWS_AS(index.rank(vec({1, 2})), UsageError);
  }
  SUBCASE("rows are retrievable") {
    auto index = RetrievalIndex::build({{7, vec({0, 0})}, {8, vec({1, 0})}, {9, vec({0, 1})}});
    CHECK(index.size() == 3);
    auto ranked = index.rank(vec({0.9f, 0.1f}));
    CHECK(ranked[0] == 8);
  }
  SUBCASE("dimension mismatches are rejected") {
    CHECK_THROWS_AS(RetrievalIndex::build({{1, vec({0, 0})}, {2, vec({1})}}), ShapeError);
    auto index = RetrievalIndex::build({{1, vec({0, 0})}});
    CHECK_THROWS_AS(index.rank(vec({1})), ShapeError);
  }
}

TEST_CASE("ranking") {
  SUBCASE("exact match ranks first") {
    Rng rng(3);
    auto rows = random_rows(10, 4, rng);
    auto index = RetrievalIndex::build(rows);
    for (int q = 0; q < 10; ++q) {
      CHECK(index.rank(rows[static_cast<std::size_t>(q)].second)[0] == q);
    }
  }
  SUBCASE("ties break toward the smaller id") {
    auto index = RetrievalIndex::build({{5, vec({1, 0})}, {2, vec({-1, 0})}, {9, vec({0, 1})}});
    auto ranked = index.rank(vec({0, 0}));
    // All three rows are equidistant from the origin.
    CHECK(ranked[0] == 2);
    CHECK(ranked[1] == 5);
    CHECK(ranked[2] == 9);
  }
  SUBCASE("twenty random rows match a brute force oracle exactly") {
    Rng rng(7);
    for (int trial = 0; trial < 5; ++trial) {
      auto rows = random_rows(20, 6, rng);
      auto index = RetrievalIndex::build(rows);
      std::vector<float> q(6);
      for (auto& x : q) x = static_cast<float>(rng.uniform(-1, 1));
      auto ranked = index.rank(q);

      std::vector<std::pair<double, std::int64_t>> oracle;
      for (const auto& [id, emb] : rows) {
        double acc = 0;
        for (std::size_t j = 0; j < emb.size(); ++j) {
          const double d = static_cast<double>(q[j]) - emb[j];
          acc += d * d;
        }
        oracle.emplace_back(acc, id);
      }
      std::sort(oracle.begin(), oracle.end());
      REQUIRE(ranked.size() == oracle.size());
      for (std::size_t i = 0; i < ranked.size(); ++i) CHECK(ranked[i] == oracle[i].second);
    }
  }
}

TEST_CASE("recall at K") {
  SUBCASE("perfect ranking gives 100 at K=1") {
    std::vector<std::vector<std::int64_t>> rankings = {{1, 2}, {2, 1}, {3, 1}};
    std::vector<std::int64_t> targets = {1, 2, 3};
    CHECK(recall_at_k(rankings, targets, 1) == doctest::Approx(100.0));
  }
  SUBCASE("target at rank 11 does not count for K=10") {
    std::vector<std::int64_t> ranking(20);
    for (int i = 0; i < 20; ++i) ranking[static_cast<std::size_t>(i)] = i;
    // target id 10 sits at position 11 (0-based index 10)
    CHECK(recall_at_k({ranking}, {10}, 10) == doctest::Approx(0.0));
    CHECK(recall_at_k({ranking}, {10}, 11) == doctest::Approx(100.0));
    CHECK(recall_at_k({ranking}, {9}, 10) == doctest::Approx(100.0));
  }
  SUBCASE("monotone non-decreasing in K and 100 at full gallery") {
    Rng rng(11);
    auto rows = random_rows(30, 5, rng);
    auto index = RetrievalIndex::build(rows);
    std::vector<std::vector<std::int64_t>> rankings;
    std::vector<std::int64_t> targets;
    for (int q = 0; q < 15; ++q) {
      std::vector<float> probe(5);
      for (auto& x : probe) x = static_cast<float>(rng.uniform(-1, 1));
      rankings.push_back(index.rank(probe));
      targets.push_back(static_cast<std::int64_t>(rng.below(30)));
    }
    double prev = 0;
    for (int k = 1; k <= 30; ++k) {
      const double r = recall_at_k(rankings, targets, k);
      CHECK(r >= prev);
      prev = r;
    }
    CHECK(prev == doctest::Approx(100.0));
  }
  SUBCASE("random embeddings at catalog 256 give about 100*K/n percent") {
    Rng rng(13);
    auto rows = random_rows(256, 8, rng);
    auto index = RetrievalIndex::build(rows);
    std::vector<std::vector<std::int64_t>> rankings;
    std::vector<std::int64_t> targets;
    for (int q = 0; q < 2000; ++q) {
      std::vector<float> probe(8);
      for (auto& x : probe) x = static_cast<float>(rng.uniform(-1, 1));
      rankings.push_back(index.rank(probe));
      targets.push_back(static_cast<std::int64_t>(rng.below(256)));
    }
    const double r10 = recall_at_k(rankings, targets, 10);
    CHECK(std::abs(r10 - 100.0 * 10 / 256) < 1.0);
  }
}

TEST_CASE("val split recall dominates original split on shared embeddings") {
  Rng rng(17);
  // Targets plus distractors form the original gallery; the val split drops
  // the distractors. Same query set, same embeddings.
  auto target_rows = random_rows(64, 6, rng);
  std::vector<std::pair<std::int64_t, std::vector<float>>> all_rows = target_rows;
  for (int i = 0; i < 64; ++i) {
    std::vector<float> e(6);
    for (auto& x : e) x = static_cast<float>(rng.uniform(-1, 1));
    all_rows.emplace_back(1000 + i, std::move(e));
  }
  auto val_index = RetrievalIndex::build(target_rows);
  auto orig_index = RetrievalIndex::build(all_rows);
  std::vector<std::vector<std::int64_t>> val_rankings, orig_rankings;
  std::vector<std::int64_t> targets;
  for (int q = 0; q < 50; ++q) {
    std::vector<float> probe(6);
    for (auto& x : probe) x = static_cast<float>(rng.uniform(-1, 1));
    val_rankings.push_back(val_index.rank(probe));
    orig_rankings.push_back(orig_index.rank(probe));
    targets.push_back(static_cast<std::int64_t>(rng.below(64)));
  }
  for (int k : {1, 5, 10, 20}) {
    CHECK(recall_at_k(val_rankings, targets, k) >= recall_at_k(orig_rankings, targets, k));
  }
}

TEST_CASE("split mode parsing") {
  CHECK(parse_split("original") == SplitMode::Original);
  CHECK(parse_split("val") == SplitMode::ValSplit);
  CHECK_THROWS_AS(parse_split("test"), UsageError);
}
