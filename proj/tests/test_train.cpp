#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "test_support.hpp"
#include "trace/data.hpp"
#include "trace/model.hpp"
#include "trace/train.hpp"

using namespace trace;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Config tiny_train_config() {
  Config cfg;
  cfg.pyramid.levels = 2;
  cfg.pyramid.channels = {4, 8};
  cfg.pyramid.heights = {8, 4};
  cfg.pyramid.widths = {8, 4};
  cfg.text.vocab = 12;
  cfg.text.embed_dim = 6;
  cfg.text.hidden_dim = 10;
  cfg.epochs = 2;
  cfg.batch = 8;
  cfg.eval_every = 2;
  cfg.unfreeze_epoch = 1;
  cfg.seed = 0;
  return cfg;
}

const fs::path& shared_dataset_dir() {
  static TempDir dir("trace_train_data");
  static bool generated = false;
  if (!generated) {
    SynthSpec spec;
    spec.n_train = 24;
    spec.n_eval = 40;
    spec.n_distractors = 10;
    spec.image_h = 16;
    spec.image_w = 16;
    spec.seed = 3;
    generate_dataset(spec, dir.path);
    generated = true;
  }
  return dir.path;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("adam step examples") {
  SUBCASE("zero gradient leaves the value unchanged while moments decay") {
    Tensor v({2}, {1.0f, -2.0f});
    Tensor g({2});
    AdamState st;
    st.m = Tensor({2}, {0.5f, 0.5f});
    st.v = Tensor({2}, {0.25f, 0.25f});
    adam_step(v, g, st, 0.1);
    // m,v shrink toward zero; the update direction m_hat is nonzero though,
    // so "unchanged" holds only for zero moments. Verify the documented
    // zero-state case:
    Tensor v2({2}, {1.0f, -2.0f});
    AdamState st2;
    st2.m = Tensor({2});
    st2.v = Tensor({2});
    adam_step(v2, g, st2, 0.1);
    CHECK(v2[0] == 1.0f);
    CHECK(v2[1] == -2.0f);
    CHECK(st.m[0] == doctest::Approx(0.45));
    CHECK(st.v[0] == doctest::Approx(0.24975));
  }
  SUBCASE("one step on f(x)=x^2 from x=1 matches hand-computed Adam") {
    Tensor x({1}, {1.0f});
    Tensor g({1}, {2.0f});  // f'(1)
    AdamState st;
    st.m = Tensor({1});
    st.v = Tensor({1});
    adam_step(x, g, st, 0.1);
    // m=0.2, v=0.004, mhat=2, vhat=4 -> step = 0.1*2/(2+1e-8)
    CHECK(x[0] == doctest::Approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8)).epsilon(1e-7));
    CHECK(x[0] == doctest::Approx(0.9).epsilon(1e-6));
  }
  SUBCASE("with |grad|>1 the bias-corrected step is smaller than lr*|g|") {
    Tensor x({1}, {1.0f});
    AdamState st;
    st.m = Tensor({1});
    st.v = Tensor({1});
    const double lr = 0.1;
    float prev = x[0];
    for (int i = 0; i < 2; ++i) {
      Tensor g({1}, {2.0f});
      adam_step(x, g, st, lr);
      CHECK(std::abs(x[0] - prev) < lr * 2.0);
      prev = x[0];
    }
  }
}

TEST_CASE("sgd step") {
  Tensor v({3}, {1, 2, 3});
  Tensor g({3}, {0.5f, -1.0f, 0.0f});
  SUBCASE("zero rate is a no-op") {
    sgd_step(v, g, 0.0);
    CHECK(v[0] == 1.0f);
    CHECK(v[1] == 2.0f);
  }
  SUBCASE("matches the elementwise oracle") {
    sgd_step(v, g, 0.2);
    CHECK(v[0] == doctest::Approx(1 - 0.2 * 0.5));
    CHECK(v[1] == doctest::Approx(2 + 0.2));
    CHECK(v[2] == doctest::Approx(3.0));
  }
}

TEST_CASE("plateau scheduler") {
  PlateauScheduler sched(1e-3, 2e-4, 3, 1e-4, 1e-6);
  sched.observe(1.0);  // establishes the best
  CHECK(sched.lr_main() == doctest::Approx(1e-3));
  // Three non-improving evals trigger one decay by the exact factors.
  sched.observe(1.0);
  sched.observe(0.99997);
  CHECK(sched.lr_main() == doctest::Approx(1e-3));
  sched.observe(1.00002);
  CHECK(sched.lr_main() == doctest::Approx(5e-4));
  CHECK(sched.lr_disc() == doctest::Approx(2e-5));
  // An improvement resets the counter.
  sched.observe(0.5);
  sched.observe(0.5);
  sched.observe(0.5);
  CHECK(sched.lr_main() == doctest::Approx(5e-4));
  sched.observe(0.5);
  CHECK(sched.lr_main() == doctest::Approx(2.5e-4));
  // Repeated decays respect the floor.
  for (int i = 0; i < 60; ++i) sched.observe(0.5);
  CHECK(sched.lr_main() >= 1e-6);
  CHECK(sched.lr_disc() >= 1e-6);
  CHECK(sched.lr_disc() == doctest::Approx(1e-6));
}

TEST_CASE("zero epochs leave the model at initialization") {
  auto cfg = tiny_train_config();
  cfg.epochs = 0;
  Dataset data = load_dataset(shared_dataset_dir());
  TraceModel model(cfg);
  model.init(cfg.seed);
  std::vector<float> before;
  model.params().for_each([&](ParameterT<float>& p) {
    before.insert(before.end(), p.value.data(), p.value.data() + p.value.size());
  });
  auto result = train_model(model, data, train_options_from(cfg), std::nullopt);
  CHECK(result.steps == 0);
  CHECK(result.records.empty());
  std::vector<float> after;
  model.params().for_each([&](ParameterT<float>& p) {
    after.insert(after.end(), p.value.data(), p.value.data() + p.value.size());
  });
  CHECK(before == after);
}

TEST_CASE("image encoder stays bit-identical through the frozen phase") {
  auto cfg = tiny_train_config();
  cfg.epochs = 1;
  cfg.unfreeze_epoch = 1;  // the whole run is frozen
  Dataset data = load_dataset(shared_dataset_dir());
  TraceModel model(cfg);
  model.init(cfg.seed);
  std::vector<float> before;
  model.params().for_each([&](ParameterT<float>& p) {
    if (TraceModel::is_image_encoder_param(p.name)) {
      before.insert(before.end(), p.value.data(), p.value.data() + p.value.size());
    }
  });
  train_model(model, data, train_options_from(cfg), std::nullopt);
  std::vector<float> after;
  bool others_changed = false;
  model.params().for_each([&](ParameterT<float>& p) {
    if (TraceModel::is_image_encoder_param(p.name)) {
      after.insert(after.end(), p.value.data(), p.value.data() + p.value.size());
    } else {
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        // Non-encoder parameters should have moved.
        others_changed = others_changed || p.grad[i] != 0.0f || p.value[i] != 0.0f;
      }
    }
  });
  CHECK(before == after);

  // With unfreezing at epoch 0 the encoder moves.
  TraceModel model2(cfg);
  model2.init(cfg.seed);
  auto cfg2 = cfg;
  cfg2.unfreeze_epoch = 0;
  train_model(model2, data, train_options_from(cfg2), std::nullopt);
  std::vector<float> after2;
  model2.params().for_each([&](ParameterT<float>& p) {
    if (TraceModel::is_image_encoder_param(p.name)) {
      after2.insert(after2.end(), p.value.data(), p.value.data() + p.value.size());
    }
  });
  CHECK(before != after2);
}

TEST_CASE("identical seeds reproduce the metrics CSV byte for byte") {
  auto cfg = tiny_train_config();
  Dataset data = load_dataset(shared_dataset_dir());
  TempDir out("trace_train_csv");
  const fs::path csv_a = out.path / "a.csv";
  const fs::path csv_b = out.path / "b.csv";
  {
    TraceModel model(cfg);
    model.init(cfg.seed);
    train_model(model, data, train_options_from(cfg), csv_a);
  }
  {
    TraceModel model(cfg);
    model.init(cfg.seed);
    train_model(model, data, train_options_from(cfg), csv_b);
  }
  const std::string a = slurp(csv_a);
  CHECK(a == slurp(csv_b));
  CHECK(a.rfind("step,L_triplet,L_disc,L_cons,L_total,R@1,R@10,R@50,lr_main,lr_disc\n", 0) == 0);
  // A different seed changes the log.
  auto cfg2 = cfg;
  cfg2.seed = 1;
  const fs::path csv_c = out.path / "c.csv";
  {
    TraceModel model(cfg2);
    model.init(cfg2.seed);
    train_model(model, data, train_options_from(cfg2), csv_c);
  }
  CHECK(a != slurp(csv_c));
}

TEST_CASE("training losses are logged and finite") {
  auto cfg = tiny_train_config();
  Dataset data = load_dataset(shared_dataset_dir());
  TraceModel model(cfg);
  model.init(cfg.seed);
  auto result = train_model(model, data, train_options_from(cfg), std::nullopt);
  CHECK(result.steps == 6);  // 24 examples, batch 8, 2 epochs
  CHECK(result.step_losses.size() == 6);
  for (double l : result.step_losses) CHECK(std::isfinite(l));
  REQUIRE(!result.records.empty());
  CHECK(result.records.back().step == 6);
  for (const auto& rec : result.records) {
    CHECK(rec.recalls.size() == 3);
    CHECK(std::isfinite(rec.l_total));
  }
}

TEST_CASE("a poisoned parameter aborts with a diagnostic naming the term") {
  auto cfg = tiny_train_config();
  Dataset data = load_dataset(shared_dataset_dir());
  TraceModel model(cfg);
  model.init(cfg.seed);
  auto* w = model.params().find("compose.text.w");
  REQUIRE(w != nullptr);
  w->value[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train_model(model, data, train_options_from(cfg), std::nullopt);
    FAIL("expected a NumericalError");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("loss") != std::string::npos);
    CHECK(msg.find("step") != std::string::npos);
  }
}

TEST_CASE("full-set negative mining runs and trains") {
  auto cfg = tiny_train_config();
  cfg.neg_full_set = true;
  cfg.epochs = 1;
  Dataset data = load_dataset(shared_dataset_dir());
  TraceModel model(cfg);
  model.init(cfg.seed);
  auto result = train_model(model, data, train_options_from(cfg), std::nullopt);
  CHECK(result.steps == 3);
  for (double l : result.step_losses) CHECK(std::isfinite(l));
}

TEST_CASE("validation losses and recall evaluation are deterministic") {
  auto cfg = tiny_train_config();
  Dataset data = load_dataset(shared_dataset_dir());
  TraceModel model(cfg);
  model.init(cfg.seed);
  auto v1 = validation_losses(model, data, cfg.loss, cfg.negatives, 99);
  auto v2 = validation_losses(model, data, cfg.loss, cfg.negatives, 99);
  CHECK(v1.total == v2.total);
  CHECK(v1.triplet == v2.triplet);
  auto r1 = evaluate_recall(model, data, SplitMode::Original, {1, 10, 50});
  auto r2 = evaluate_recall(model, data, SplitMode::Original, {1, 10, 50});
  CHECK(r1.recalls == r2.recalls);
  CHECK(r1.gallery_size == 50);
  auto rv = evaluate_recall(model, data, SplitMode::ValSplit, {1, 10, 50});
  CHECK(rv.gallery_size == 40);
  for (std::size_t i = 0; i < 3; ++i) CHECK(rv.recalls[i] >= r1.recalls[i]);
}
