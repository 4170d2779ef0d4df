#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <unordered_map>
#include <vector>

#include "trace/config.hpp"
#include "trace/data.hpp"
#include "trace/eval.hpp"
#include "trace/model.hpp"

namespace trace {

// --- optimizers -------------------------------------------------------------

struct AdamState {
  Tensor m;
  Tensor v;
  std::int64_t step = 0;
};

// One Adam update with bias correction.
void adam_step(Tensor& value, const Tensor& grad, AdamState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

void sgd_step(Tensor& value, const Tensor& grad, double lr);

class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr) : lr_(lr) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  template <typename Select>
  void step(ParamStore& params, Select&& select) {
    params.for_each([&](ParameterT<float>& p) {
      if (p.frozen || !select(p)) return;
      AdamState& st = states_[&p];
      if (st.m.empty()) {
        st.m = Tensor(p.value.shape());
        st.v = Tensor(p.value.shape());
      }
      adam_step(p.value, p.grad, st, lr_);
    });
  }

 private:
  double lr_;
  std::unordered_map<const ParameterT<float>*, AdamState> states_;
};

// --- plateau schedule ---------------------------------------------------------

// Halves the main rate and divides the critic rate by 10 when the observed
// validation loss fails to improve by more than `min_improve` for `patience`
// consecutive observations; both rates floor at `lr_floor`.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr_main, double lr_disc, int patience, double min_improve = 1e-4,
                   double lr_floor = 1e-6)
      : lr_main_(lr_main),
        lr_disc_(lr_disc),
        patience_(patience),
        min_improve_(min_improve),
        lr_floor_(lr_floor) {}

  void observe(double validation_loss);

  double lr_main() const { return lr_main_; }
  double lr_disc() const { return lr_disc_; }

 private:
  double lr_main_;
  double lr_disc_;
  int patience_;
  double min_improve_;
  double lr_floor_;
  double best_ = std::numeric_limits<double>::infinity();
  int stale_ = 0;
};

// --- harness -----------------------------------------------------------------

struct TrainOptions {
  int epochs = 10;
  int batch = 32;
  double lr_main = 1e-3;
  double lr_disc = 2e-4;
  int patience = 3;
  double min_improve = 1e-4;
  double lr_floor = 1e-6;
  int unfreeze_epoch = 2;
  int eval_every = 50;
  std::uint64_t seed = 0;
  SplitMode split = SplitMode::Original;
  LossWeights loss;
  NegativePolicy negatives;
  bool neg_full_set = false;
  std::vector<int> recall_ks = {1, 10, 50};
};

TrainOptions train_options_from(const Config& cfg);

struct EvalRecord {
  std::int64_t step = 0;
  double l_triplet = 0, l_disc = 0, l_cons = 0, l_total = 0;
  std::vector<double> recalls;
  double lr_main = 0, lr_disc = 0;
};

struct TrainResult {
  std::vector<EvalRecord> records;
  std::vector<double> step_losses;  // training L_total per optimizer step
  std::int64_t steps = 0;

  double final_recall(std::size_t k_index) const {
    if (records.empty()) throw UsageError("no evaluation records");
    return records.back().recalls.at(k_index);
  }
};

struct RecallReport {
  std::vector<int> ks;
  std::vector<double> recalls;
  std::size_t n_queries = 0;
  std::size_t gallery_size = 0;
};

// Embeds the evaluation split and computes Recall@K against the configured
// gallery (Original: targets + distractors; ValSplit: targets only).
RecallReport evaluate_recall(TraceModel& model, const Dataset& data, SplitMode split,
                             const std::vector<int>& ks);

struct ValidationLosses {
  double triplet = 0, disc = 0, cons = 0, total = 0;
};

ValidationLosses validation_losses(TraceModel& model, const Dataset& data, const LossWeights& weights,
                                   const NegativePolicy& negatives, std::uint64_t seed);

// Full optimization loop: alternating critic/model steps, encoder freezing,
// plateau decay, periodic validation, metrics CSV. Deterministic given the
// seed; aborts with a NumericalError naming the offending term if any loss
// goes non-finite.
TrainResult train_model(TraceModel& model, const Dataset& data, const TrainOptions& opt,
                        const std::optional<std::filesystem::path>& metrics_csv);

}  // namespace trace
