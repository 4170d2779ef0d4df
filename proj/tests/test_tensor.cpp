#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "test_support.hpp"
#include "trace/tensor.hpp"
#include "trace/tnsr_io.hpp"

using namespace trace;
using trace::testing::op_grad_check;
using trace::testing::random_tensor;
using DGraph = GraphT<double>;
using DVar = DGraph::Var;

namespace {

TensorT<double> signed_random(std::vector<int> shape, Rng& rng, double lo = 0.2, double hi = 1.0) {
  // Magnitudes bounded away from zero keep finite differences off the relu
  // and clamp kinks.
  TensorT<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double mag = rng.uniform(lo, hi);
    t[i] = rng.bernoulli(0.5) ? mag : -mag;
  }
  return t;
}

}  // namespace

TEST_CASE("matmul value examples") {
  Graph g;
  auto eye = g.input(Tensor({2, 2}, {1, 0, 0, 1}));
  auto m = g.input(Tensor({2, 2}, {1, 2, 3, 4}));
  auto prod = g.matmul(eye, m);
  for (int i = 0; i < 4; ++i) CHECK(g.value(prod)[i] == doctest::Approx(g.value(m)[i]));

  auto row = g.input(Tensor({1, 2}, {1, 2}));
  auto col = g.input(Tensor({2, 1}, {3, 4}));
  auto dot = g.matmul(row, col);
  CHECK(g.value(dot).scalar_value() == doctest::Approx(11.0));

  auto bad = g.input(Tensor({3, 2}));
  CHECK_THROWS_WITH_AS(g.matmul(m, bad), doctest::Contains("[2x2]"), ShapeError);
  CHECK_THROWS_WITH_AS(g.matmul(m, bad), doctest::Contains("[3x2]"), ShapeError);
}

TEST_CASE("matmul gradient equals column sums of b") {
  ParamStoreT<double> store;
  Rng rng(3);
  auto& a = store.create("a", {2, 3});
  auto& b = store.create("b", {3, 4});
  a.value = random_tensor<double>({2, 3}, rng);
  b.value = random_tensor<double>({3, 4}, rng);

  auto forward = [&](DGraph& g) { return g.sum(g.matmul(g.param(a), g.param(b))); };
  auto report = check_gradients(store, forward);
  CHECK(report.pass(1e-4));

  // d/da sum(a.b) = row vector of b's row sums, broadcast down a's rows.
  store.zero_grads();
  {
    DGraph g;
    g.backward(forward(g));
  }
  for (int i = 0; i < 2; ++i) {
    for (int k = 0; k < 3; ++k) {
      double row_sum = 0;
      for (int j = 0; j < 4; ++j) row_sum += b.value.at(k, j);
      CHECK(a.grad.at(i, k) == doctest::Approx(row_sum).epsilon(1e-9));
    }
  }
}

TEST_CASE("softmax examples and properties") {
  Graph g;
  auto uniform = g.input(Tensor::full({5}, 2.5f));
  auto su = g.softmax(uniform, 0);
  for (int i = 0; i < 5; ++i) CHECK(g.value(su)[i] == doctest::Approx(0.2).epsilon(1e-6));

  auto single = g.input(Tensor({1}, {42.f}));
  CHECK(g.value(g.softmax(single, 0)).scalar_value() == doctest::Approx(1.0));

  // Direct exp-normalization oracle.
  auto x = g.input(Tensor({3}, {1, 2, 3}));
  auto sm = g.softmax(x, 0, 1.0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(g.value(sm)[i] - std::exp(1.0 + i) / z) < 1e-6);
  }

  CHECK_THROWS_AS(g.softmax(x, 0, 0.0), ParamError);
  CHECK_THROWS_AS(g.softmax(x, 0, -2.0), ParamError);

  SUBCASE("sums to one for huge magnitudes") {
    Rng rng(11);
    Graph h;
    auto big = h.input(random_tensor<float>({7}, rng, -1e4, 1e4));
    auto sb = h.softmax(big, 0);
    double total = 0;
    for (int i = 0; i < 7; ++i) {
      CHECK(h.value(sb)[i] >= 0.f);
      total += h.value(sb)[i];
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }

  SUBCASE("rank-2 axes") {
    Graph h;
    auto m = h.input(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    auto rows = h.softmax(m, 1);
    for (int i = 0; i < 2; ++i) {
      double s = 0;
      for (int j = 0; j < 3; ++j) s += h.value(rows).at(i, j);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    auto cols = h.softmax(m, 0);
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int i = 0; i < 2; ++i) s += h.value(cols).at(i, j);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("l2 norm and normalize") {
  Graph g;
  auto v = g.input(Tensor({2}, {3, 4}));
  CHECK(g.value(g.l2_norm(v)).scalar_value() == doctest::Approx(5.0));
  auto n = g.normalize(v);
  CHECK(g.value(n)[0] == doctest::Approx(0.6));
  CHECK(g.value(n)[1] == doctest::Approx(0.8));

  auto e1 = g.input(Tensor({3}, {0, 1, 0}));
  auto ne = g.normalize(e1);
  CHECK(g.value(ne)[0] == doctest::Approx(0.0));
  CHECK(g.value(ne)[1] == doctest::Approx(1.0));

  auto zero = g.input(Tensor({4}));
  CHECK_THROWS_AS(g.normalize(zero), DegenerateInputError);

  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Graph h;
    auto r = h.input(random_tensor<float>({6}, rng, -2.0, 2.0));
    double norm = h.value(h.l2_norm(h.normalize(r))).scalar_value();
    CHECK(std::abs(norm - 1.0) < 1e-6);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives ones") {
    ParamStoreT<double> store;
    auto& x = store.create("x", {4});
    Rng rng(2);
    x.value = random_tensor<double>({4}, rng);
    DGraph g;
    g.backward(g.sum(g.param(x)));
    for (int i = 0; i < 4; ++i) CHECK(x.grad[i] == doctest::Approx(1.0));
  }
  SUBCASE("squared norm gives 2x") {
    ParamStoreT<double> store;
    auto& x = store.create("x", {5});
    Rng rng(4);
    x.value = random_tensor<double>({5}, rng);
    DGraph g;
    auto xv = g.param(x);
    g.backward(g.sum(g.mul(xv, xv)));
    for (int i = 0; i < 5; ++i) CHECK(x.grad[i] == doctest::Approx(2.0 * x.value[i]).epsilon(1e-9));
  }
  SUBCASE("non-scalar loss is a usage error") {
    DGraph g;
    auto x = g.input(TensorT<double>({3}, {1, 2, 3}));
    CHECK_THROWS_AS(g.backward(x), UsageError);
  }
  SUBCASE("backward twice is rejected") {
    ParamStoreT<double> store;
    auto& x = store.create("x", {2});
    x.value = TensorT<double>({2}, {1, 2});
    DGraph g;
    auto loss = g.sum(g.param(x));
    g.backward(loss);
    CHECK_THROWS_AS(g.backward(loss), UsageError);
  }
}

TEST_CASE("randomized gradient checks for every differentiable op") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(mix_seed(1000, seed));
    auto vec = [&](int n) { return random_tensor<double>({n}, rng, -1.0, 1.0); };

    CHECK(op_grad_check({vec(6), vec(6)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.add(in[0], in[1]); }, seed)
              .pass());
    CHECK(op_grad_check({vec(6), vec(6)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.sub(in[0], in[1]); }, seed)
              .pass());
    CHECK(op_grad_check({vec(6), vec(6)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.mul(in[0], in[1]); }, seed)
              .pass());
    CHECK(op_grad_check({vec(4), vec(4), vec(4)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.add_n(in); }, seed)
              .pass());
    CHECK(op_grad_check({vec(5)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.scale(in[0], -1.7); }, seed)
              .pass());
    CHECK(op_grad_check({vec(5)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.offset(in[0], 0.37); }, seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({3, 4}, rng), random_tensor<double>({4, 2}, rng)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.matmul(in[0], in[1]); }, seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({4, 3}, rng), vec(3)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.matvec(in[0], in[1]); }, seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({2, 5}, rng)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.transpose(in[0]); }, seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({2, 6}, rng)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.reshape(in[0], {3, 4}); },
                        seed)
              .pass());
    CHECK(op_grad_check({vec(3), vec(5)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.concat_vec(in); }, seed)
              .pass());
    CHECK(op_grad_check({vec(4), vec(4), vec(4)},
                        [](DGraph& g, const std::vector<DVar>& in) {
                          return g.slice_row(g.stack_rows(in), 1);
                        },
                        seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({5, 3}, rng)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.select_row(in[0], 2); }, seed)
              .pass());
    CHECK(op_grad_check({vec(7)}, [](DGraph& g, const std::vector<DVar>& in) { return g.sum(in[0]); },
                        seed)
              .pass());
    CHECK(op_grad_check({vec(7)}, [](DGraph& g, const std::vector<DVar>& in) { return g.mean(in[0]); },
                        seed)
              .pass());
    CHECK(op_grad_check({vec(5)}, [](DGraph& g, const std::vector<DVar>& in) { return g.exp(in[0]); },
                        seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({5}, rng, 0.3, 2.0)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.log(in[0]); }, seed)
              .pass());
    CHECK(op_grad_check({vec(6)}, [](DGraph& g, const std::vector<DVar>& in) { return g.sigmoid(in[0]); },
                        seed)
              .pass());
    CHECK(op_grad_check({vec(6)}, [](DGraph& g, const std::vector<DVar>& in) { return g.tanh(in[0]); },
                        seed)
              .pass());
    CHECK(op_grad_check({signed_random({6}, rng)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.relu(in[0]); }, seed)
              .pass());
    CHECK(op_grad_check({vec(6)}, [](DGraph& g, const std::vector<DVar>& in) { return g.softplus(in[0]); },
                        seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({5}, rng, 0.2, 1.5)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.pow_scalar(in[0], 3.0); },
                        seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({5}, rng, 0.2, 1.5)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.pow_scalar(in[0], 2.5); },
                        seed)
              .pass());
    CHECK(op_grad_check({signed_random({6}, rng, 0.2, 0.7)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.clamp(in[0], -0.9, 0.9); },
                        seed)
              .pass());
    CHECK(op_grad_check({vec(6)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.softmax(in[0], 0, 2.0); },
                        seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({3, 4}, rng)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.softmax(in[0], 0, 1.0); },
                        seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({3, 4}, rng)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.softmax(in[0], 1, 0.5); },
                        seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({6}, rng, 0.3, 1.0)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.l2_norm(in[0]); }, seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({6}, rng, 0.3, 1.0)},
                        [](DGraph& g, const std::vector<DVar>& in) { return g.normalize(in[0]); }, seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({2, 5, 5}, rng), random_tensor<double>({3, 2, 3, 3}, rng),
                         vec(3)},
                        [](DGraph& g, const std::vector<DVar>& in) {
                          return g.conv2d(in[0], in[1], in[2], 2, 1);
                        },
                        seed)
              .pass());
    CHECK(op_grad_check({random_tensor<double>({4, 3, 3}, rng), vec(4)},
                        [](DGraph& g, const std::vector<DVar>& in) {
                          return g.cross_correlate(in[0], in[1]);
                        },
                        seed)
              .pass());
  }
}

TEST_CASE("batch norm") {
  SUBCASE("training mode normalizes the batch") {
    Rng rng(21);
    GraphT<double> g;
    BnStatsT<double> stats(3);
    auto x = g.input(random_tensor<double>({8, 3}, rng, -3.0, 3.0));
    auto gamma = g.input(TensorT<double>::full({3}, 1.0));
    auto beta = g.input(TensorT<double>({3}));
    auto y = g.batch_norm(x, gamma, beta, stats, true);
    for (int j = 0; j < 3; ++j) {
      double m = 0, v = 0;
      for (int i = 0; i < 8; ++i) m += g.value(y).at(i, j);
      m /= 8;
      for (int i = 0; i < 8; ++i) {
        const double d = g.value(y).at(i, j) - m;
        v += d * d;
      }
      v /= 8;
      CHECK(std::abs(m) < 1e-4);
      CHECK(std::abs(v - 1.0) < 1e-3);  // eps=1e-5 shifts variance slightly below 1
    }
  }
  SUBCASE("eval mode uses running stats and is deterministic") {
    Rng rng(22);
    BnStatsT<double> stats(2);
    stats.running_mean = TensorT<double>({2}, {0.5, -0.25});
    stats.running_var = TensorT<double>({2}, {4.0, 0.25});
    auto xin = random_tensor<double>({1, 2}, rng);
    for (int rep = 0; rep < 2; ++rep) {
      GraphT<double> g;
      auto x = g.input(xin);
      auto gamma = g.input(TensorT<double>::full({2}, 1.0));
      auto beta = g.input(TensorT<double>({2}));
      auto y = g.batch_norm(x, gamma, beta, stats, false);
      CHECK(g.value(y).at(0, 0) ==
            doctest::Approx((xin.at(0, 0) - 0.5) / std::sqrt(4.0 + 1e-5)).epsilon(1e-9));
      CHECK(g.value(y).at(0, 1) ==
            doctest::Approx((xin.at(0, 1) + 0.25) / std::sqrt(0.25 + 1e-5)).epsilon(1e-9));
    }
  }
  SUBCASE("gradient through batch statistics") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(mix_seed(500, seed));
      ParamStoreT<double> store;
      auto& x = store.create("x", {6, 3});
      auto& gamma = store.create("gamma", {3});
      auto& beta = store.create("beta", {3});
      x.value = random_tensor<double>({6, 3}, rng, -2.0, 2.0);
      gamma.value = random_tensor<double>({3}, rng, 0.5, 1.5);
      beta.value = random_tensor<double>({3}, rng);
      Rng wrng(mix_seed(501, seed));
      auto weights = random_tensor<double>({6, 3}, wrng, 0.25, 1.0);
      auto forward = [&](DGraph& g) {
        BnStatsT<double> stats(3);
        auto y = g.batch_norm(g.param(x), g.param(gamma), g.param(beta), stats, true);
        return g.sum(g.mul(y, g.input(weights)));
      };
      auto report = check_gradients(store, forward);
      CHECK(report.pass(1e-4));
    }
  }
}

TEST_CASE("conv2d matches an explicit loop oracle") {
  Rng rng(31);
  auto x = random_tensor<float>({2, 6, 6}, rng);
  auto w = random_tensor<float>({3, 2, 3, 3}, rng);
  auto b = random_tensor<float>({3}, rng);
  Graph g;
  auto out = g.conv2d(g.input(x), g.input(w), g.input(b), 2, 1);
  REQUIRE(g.value(out).shape() == std::vector<int>{3, 3, 3});
  for (int oc = 0; oc < 3; ++oc) {
    for (int oy = 0; oy < 3; ++oy) {
      for (int ox = 0; ox < 3; ++ox) {
        double acc = b[oc];
        for (int ic = 0; ic < 2; ++ic)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 + ky - 1;
              const int ix = ox * 2 + kx - 1;
              if (iy < 0 || iy >= 6 || ix < 0 || ix >= 6) continue;
              acc += static_cast<double>(w.at4(oc, ic, ky, kx)) * x.at(ic, iy, ix);
            }
        CHECK(g.value(out).at(oc, oy, ox) == doctest::Approx(acc).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("cross correlate matches channel dot oracle") {
  Rng rng(33);
  auto vol = random_tensor<float>({3, 2, 2}, rng);
  auto k = random_tensor<float>({3}, rng);
  Graph g;
  auto out = g.cross_correlate(g.input(vol), g.input(k));
  for (int h = 0; h < 2; ++h)
    for (int w2 = 0; w2 < 2; ++w2) {
      double acc = 0;
      for (int c = 0; c < 3; ++c) acc += static_cast<double>(vol.at(c, h, w2)) * k[c];
      CHECK(g.value(out).at(h, w2) == doctest::Approx(acc).epsilon(1e-5));
    }
}

TEST_CASE("reshape and transpose round trips are exact") {
  Rng rng(41);
  auto t = random_tensor<float>({3, 4}, rng);
  Graph g;
  auto a = g.input(t);
  auto rt = g.reshape(g.reshape(a, {2, 6}), {3, 4});
  auto tt = g.transpose(g.transpose(a));
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK(g.value(rt)[i] == t[i]);
    CHECK(g.value(tt)[i] == t[i]);
  }
}

TEST_CASE("pow with exponent one is an exact pass-through") {
  Rng rng(43);
  auto t = random_tensor<float>({9}, rng, -5.0, 5.0);
  Graph g;
  auto y = g.pow_scalar(g.input(t), 1.0);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(g.value(y)[i] == t[i]);
}

TEST_CASE("finite outputs on finite inputs") {
  Rng rng(47);
  Graph g;
  auto a = g.input(random_tensor<float>({8}, rng, -50.0, 50.0));
  CHECK(g.value(g.softmax(a, 0, 8.0)).all_finite());
  CHECK(g.value(g.softplus(a)).all_finite());
  CHECK(g.value(g.sigmoid(a)).all_finite());
  CHECK(g.value(g.tanh(a)).all_finite());
  CHECK(g.value(g.normalize(a)).all_finite());
}

TEST_CASE("tnsr round trip is bit exact") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "trace_tnsr_test";
  fs::create_directories(dir);
  Rng rng(51);
  auto t = random_tensor<float>({2, 3, 4}, rng, -100.0, 100.0);
  const fs::path file = dir / "t.tnsr";
  write_tnsr(file, t);
  Tensor back = read_tnsr(file);
  REQUIRE(back.shape() == t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK(std::memcmp(&back[i], &t[i], sizeof(float)) == 0);
  }

  SUBCASE("corrupted magic is a format error") {
    const fs::path badfile = dir / "bad.tnsr";
    fs::copy_file(file, badfile, fs::copy_options::overwrite_existing);
    std::fstream f(badfile, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_AS(read_tnsr(badfile), FormatError);
  }
  SUBCASE("truncated payload is a format error") {
    const fs::path shortfile = dir / "short.tnsr";
    fs::copy_file(file, shortfile, fs::copy_options::overwrite_existing);
    fs::resize_file(shortfile, fs::file_size(shortfile) - 7);
    CHECK_THROWS_AS(read_tnsr(shortfile), FormatError);
  }
  fs::remove_all(dir);
}

TEST_CASE("grad check self test catches an injected wrong gradient") {
  ParamStoreT<double> store;
  Rng rng(61);
  auto& a = store.create("a", {3, 3});
  auto& x = store.create("x", {3});
  a.value = random_tensor<double>({3, 3}, rng);
  x.value = random_tensor<double>({3}, rng);
  auto forward = [&](DGraph& g) { return g.sum(g.matvec(g.param(a), g.param(x))); };
  CHECK(check_gradients(store, forward).pass(1e-4));
  GradCheckOptions opt;
  opt.fault_scale = 1.01;
  CHECK_FALSE(check_gradients(store, forward, opt).pass(1e-4));
}
