#include <cmath>
#include <map>
#include <vector>

#include "doctest.h"
#include "test_support.hpp"
#include "trace/sampling.hpp"

using namespace trace;
using trace::testing::random_tensor;

namespace {

struct Pool {
  std::vector<Tensor> embeddings;
  std::vector<NegativeCandidateT<float>> candidates;

  void add(std::int64_t id, Tensor emb) {
    embeddings.push_back(std::move(emb));
    candidates.push_back({id, nullptr});
    // Rebind pointers; the vector may have reallocated.
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      candidates[i].embedding = &embeddings[i];
    }
  }
};

Tensor point(float x) { return Tensor({2}, {x, 0.0f}); }

}  // namespace

TEST_CASE("policy validation") {
  NegativePolicy p;
  p.hard_fraction = 1.2;
  CHECK_THROWS_AS(p.validate(), ParamError);
  p.hard_fraction = 0.5;
  p.tau = 0.0;
  CHECK_THROWS_AS(p.validate(), ParamError);
}

TEST_CASE("single candidate is always chosen") {
  Pool pool;
  pool.add(5, point(3.0f));
  Rng rng(3);
  NegativePolicy policy;
  for (int i = 0; i < 10; ++i) {
    CHECK(sample_negative_index(point(0.0f), pool.candidates, 1, 2, policy, rng) == 0);
  }
}

TEST_CASE("empty pool after exclusion is a usage error") {
  Pool pool;
  pool.add(1, point(1.0f));
  pool.add(2, point(2.0f));
  Rng rng(5);
  NegativePolicy policy;
  CHECK_THROWS_AS(sample_negative_index(point(0.0f), pool.candidates, 1, 2, policy, rng),
                  UsageError);
}

TEST_CASE("excluded ids are never returned") {
  Pool pool;
  for (int i = 0; i < 6; ++i) pool.add(i, point(static_cast<float>(i)));
  Rng rng(7);
  NegativePolicy policy;
  for (int draw = 0; draw < 2000; ++draw) {
    const auto idx = sample_negative_index(point(0.0f), pool.candidates, 2, 4, policy, rng);
    const auto id = pool.candidates[idx].id;
    CHECK(id != 2);
    CHECK(id != 4);
  }
}

TEST_CASE("hard sampling matches the closed-form two-candidate weights") {
  Pool pool;
  pool.add(10, point(0.1f));
  pool.add(11, point(10.0f));
  NegativePolicy policy;
  policy.hard_fraction = 1.0;
  policy.tau = 1.0;
  Rng rng(11);
  int near = 0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    if (sample_negative_index(point(0.0f), pool.candidates, -1, -2, policy, rng) == 0) ++near;
  }
  const double expect = std::exp(-0.1) / (std::exp(-0.1) + std::exp(-10.0));
  CHECK(expect == doctest::Approx(0.99995).epsilon(1e-4));
  CHECK(std::abs(static_cast<double>(near) / draws - expect) < 0.005);
}

TEST_CASE("hard_fraction zero is uniform under a chi-square test") {
  Pool pool;
  const int k = 8;
  for (int i = 0; i < k; ++i) pool.add(i, point(static_cast<float>(i) * 0.5f));
  NegativePolicy policy;
  policy.hard_fraction = 0.0;
  Rng rng(13);
  std::vector<int> counts(k, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    counts[sample_negative_index(point(0.0f), pool.candidates, -1, -2, policy, rng)]++;
  }
  const double expect = static_cast<double>(draws) / k;
  double chi2 = 0;
  for (int c : counts) {
    const double d = c - expect;
    chi2 += d * d / expect;
  }
  // 99th percentile of chi-square with 7 degrees of freedom.
  CHECK(chi2 < 18.475);
}

TEST_CASE("seeded determinism") {
  Pool pool;
  for (int i = 0; i < 5; ++i) pool.add(i, point(static_cast<float>(i)));
  NegativePolicy policy;
  std::vector<std::size_t> a, b;
  {
    Rng rng(17);
    for (int i = 0; i < 200; ++i) {
      a.push_back(sample_negative_index(point(0.2f), pool.candidates, 0, -1, policy, rng));
    }
  }
  {
    Rng rng(17);
    for (int i = 0; i < 200; ++i) {
      b.push_back(sample_negative_index(point(0.2f), pool.candidates, 0, -1, policy, rng));
    }
  }
  CHECK(a == b);
}

TEST_CASE("selection probability is non-increasing in distance for pure hard sampling") {
  Pool pool;
  for (int i = 0; i < 5; ++i) pool.add(i, point(0.5f + 0.5f * static_cast<float>(i)));
  NegativePolicy policy;
  policy.hard_fraction = 1.0;
  Rng rng(19);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 100000; ++i) {
    counts[sample_negative_index(point(0.0f), pool.candidates, -1, -2, policy, rng)]++;
  }
  for (int i = 1; i < 5; ++i) CHECK(counts[static_cast<std::size_t>(i)] <= counts[static_cast<std::size_t>(i - 1)]);
}
