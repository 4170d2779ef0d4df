#include "trace/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "trace/sampling.hpp"

namespace trace {

void adam_step(Tensor& value, const Tensor& grad, AdamState& state, double lr, double beta1,
               double beta2, double eps) {
  if (!value.same_shape(grad) || !value.same_shape(state.m)) {
    throw ShapeError("adam_step: value/grad/state shapes disagree");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < value.size(); ++i) {
    const double g = grad[i];
    const double m = beta1 * state.m[i] + (1.0 - beta1) * g;
    const double v = beta2 * state.v[i] + (1.0 - beta2) * g * g;
    state.m[i] = static_cast<float>(m);
    state.v[i] = static_cast<float>(v);
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    value[i] = static_cast<float>(value[i] - lr * mhat / (std::sqrt(vhat) + eps));
  }
}

void sgd_step(Tensor& value, const Tensor& grad, double lr) {
  if (!value.same_shape(grad)) throw ShapeError("sgd_step: value/grad shapes disagree");
  for (std::size_t i = 0; i < value.size(); ++i) {
    value[i] = static_cast<float>(value[i] - lr * grad[i]);
  }
}

void PlateauScheduler::observe(double validation_loss) {
  if (best_ - validation_loss > min_improve_) {
    best_ = validation_loss;
    stale_ = 0;
    return;
  }
  if (++stale_ >= patience_) {
    lr_main_ = std::max(lr_main_ / 2.0, lr_floor_);
    lr_disc_ = std::max(lr_disc_ / 10.0, lr_floor_);
    stale_ = 0;
  }
}

TrainOptions train_options_from(const Config& cfg) {
  TrainOptions opt;
  opt.epochs = cfg.epochs;
  opt.batch = cfg.batch;
  opt.lr_main = cfg.lr_main;
  opt.lr_disc = cfg.lr_disc;
  opt.patience = cfg.patience;
  opt.unfreeze_epoch = cfg.unfreeze_epoch;
  opt.eval_every = cfg.eval_every;
  opt.seed = cfg.seed;
  opt.split = parse_split(cfg.split);
  opt.loss = cfg.loss;
  opt.negatives = cfg.negatives;
  opt.neg_full_set = cfg.neg_full_set;
  return opt;
}

namespace {

std::vector<float> to_vec(const Tensor& t) { return std::vector<float>(t.data(), t.data() + t.size()); }

RetrievalIndex build_gallery(TraceModel& model, const Dataset& data, SplitMode split,
                             std::unordered_map<std::int64_t, Tensor>* target_cache = nullptr) {
  std::vector<std::pair<std::int64_t, std::vector<float>>> rows;
  for (const auto& rec : data.eval) {
    Tensor emb = model.embed_target(data.image(rec.target_id));
    if (target_cache) (*target_cache)[rec.target_id] = emb;
    rows.emplace_back(rec.target_id, to_vec(emb));
  }
  if (split == SplitMode::Original) {
    for (const auto& rec : data.distractors) {
      rows.emplace_back(rec.id, to_vec(model.embed_target(data.image(rec.id))));
    }
  }
  return RetrievalIndex::build(rows);
}

void check_finite(double v, const char* term, std::int64_t step) {
  if (!std::isfinite(v)) {
    throw NumericalError(std::string("training aborted: ") + term + " is not finite at step " +
                         std::to_string(step));
  }
}

}  // namespace

RecallReport evaluate_recall(TraceModel& model, const Dataset& data, SplitMode split,
                             const std::vector<int>& ks) {
  if (data.eval.empty()) throw UsageError("evaluate_recall: dataset has no evaluation split");
  RecallReport report;
  report.ks = ks;
  RetrievalIndex index = build_gallery(model, data, split);
  report.gallery_size = index.size();
  std::vector<std::vector<std::int64_t>> rankings;
  std::vector<std::int64_t> targets;
  for (const auto& rec : data.eval) {
    Tensor q = model.embed_query(data.image(rec.query_id), TokenSequence(rec.tokens));
    rankings.push_back(index.rank(to_vec(q)));
    targets.push_back(rec.target_id);
  }
  report.n_queries = rankings.size();
  for (int k : ks) report.recalls.push_back(recall_at_k(rankings, targets, k));
  return report;
}

ValidationLosses validation_losses(TraceModel& model, const Dataset& data, const LossWeights& weights,
                                   const NegativePolicy& negatives, std::uint64_t seed) {
  if (data.eval.empty()) throw UsageError("validation_losses: dataset has no evaluation split");
  // Embed everything once in eval mode.
  std::vector<Tensor> f_com, f_tgt, f_text;
  for (const auto& rec : data.eval) {
    f_com.push_back(model.embed_query(data.image(rec.query_id), TokenSequence(rec.tokens)));
    f_tgt.push_back(model.embed_target(data.image(rec.target_id)));
    // Text projection alone, for the consistency term.
    Graph g(false);
    auto emb = model.text_encoder().encode(g, TokenSequence(rec.tokens));
    f_text.push_back(g.value(project_text(g, model.composition(), emb.sentence)));
  }

  Rng rng(mix_seed(seed, 0x77a1));
  std::vector<NegativeCandidateT<float>> candidates(data.eval.size());
  for (std::size_t i = 0; i < data.eval.size(); ++i) {
    candidates[i] = {data.eval[i].target_id, &f_tgt[i]};
  }

  Graph g(false);
  std::vector<Graph::Var> tri_terms, cons_terms, tgt_vars, com_vars;
  for (std::size_t i = 0; i < data.eval.size(); ++i) {
    const auto& rec = data.eval[i];
    const std::size_t neg =
        sample_negative_index(f_com[i], candidates, rec.query_id, rec.target_id, negatives, rng);
    auto com = g.input(f_com[i]);
    auto tgt = g.input(f_tgt[i]);
    auto txt = g.input(f_text[i]);
    tri_terms.push_back(triplet_loss(g, com, tgt, g.input(f_tgt[neg])));
    cons_terms.push_back(consistency_loss(g, model.consistency_heads(), com, txt, tgt,
                                          weights.alpha_t, weights.alpha_i));
    tgt_vars.push_back(tgt);
    com_vars.push_back(com);
  }
  auto tri = g.mean(g.concat_vec(tri_terms));
  auto cons = g.mean(g.concat_vec(cons_terms));
  auto disc = discriminator_loss(g, model.discriminator(), tgt_vars, com_vars);
  auto gen = generator_loss(g, model.discriminator(), com_vars);
  ValidationLosses out;
  out.triplet = g.value(tri).scalar_value();
  out.cons = g.value(cons).scalar_value();
  out.disc = g.value(disc).scalar_value();
  out.total = weights.lambda1 * out.triplet + weights.lambda2 * g.value(gen).scalar_value() +
              weights.lambda3 * out.cons;
  return out;
}

namespace {

void write_csv_header(std::ofstream& out) {
  out << "step,L_triplet,L_disc,L_cons,L_total,R@1,R@10,R@50,lr_main,lr_disc\n";
}

void write_csv_row(std::ofstream& out, const EvalRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%.6f,%.6f,%.6f,%.6f,%.4f,%.4f,%.4f,%.8f,%.8f\n",
                static_cast<long long>(r.step), r.l_triplet, r.l_disc, r.l_cons, r.l_total,
                r.recalls[0], r.recalls[1], r.recalls[2], r.lr_main, r.lr_disc);
  out << buf;
}

}  // namespace

TrainResult train_model(TraceModel& model, const Dataset& data, const TrainOptions& opt,
                        const std::optional<std::filesystem::path>& metrics_csv) {
  if (data.train.empty()) throw UsageError("train_model: dataset has no training split");
  if (model.config().text.vocab != data.spec.vocab) {
    throw UsageError("train_model: model vocabulary (" + std::to_string(model.config().text.vocab) +
                     ") does not match the dataset (" + std::to_string(data.spec.vocab) + ")");
  }
  opt.loss.validate();
  opt.negatives.validate();

  std::ofstream csv;
  if (metrics_csv) {
    csv.open(*metrics_csv, std::ios::trunc);
    if (!csv) throw UsageError("cannot write metrics CSV at " + metrics_csv->string());
    write_csv_header(csv);
  }

  AdamOptimizer adam(opt.lr_main);
  double lr_disc = opt.lr_disc;
  PlateauScheduler sched(opt.lr_main, opt.lr_disc, opt.patience, opt.min_improve, opt.lr_floor);
  Rng neg_rng(mix_seed(opt.seed, 0x5e6));

  TrainResult result;
  model.params().zero_grads();

  auto run_eval = [&](std::int64_t step) {
    auto vl = validation_losses(model, data, opt.loss, opt.negatives,
                                mix_seed(opt.seed, 0xe7a1 + static_cast<std::uint64_t>(step)));
    auto rr = evaluate_recall(model, data, opt.split, opt.recall_ks);
    sched.observe(vl.total);
    adam.set_lr(sched.lr_main());
    lr_disc = sched.lr_disc();
    EvalRecord rec;
    rec.step = step;
    rec.l_triplet = vl.triplet;
    rec.l_disc = vl.disc;
    rec.l_cons = vl.cons;
    rec.l_total = vl.total;
    rec.recalls = rr.recalls;
    rec.lr_main = adam.lr();
    rec.lr_disc = lr_disc;
    result.records.push_back(rec);
    if (csv.is_open()) write_csv_row(csv, rec);
  };

  std::int64_t step = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    model.set_image_encoder_frozen(epoch < opt.unfreeze_epoch);
    for (const auto& batch_idx : epoch_batches(data.train.size(), opt.batch, opt.seed,
                                               static_cast<std::uint64_t>(epoch))) {
      std::vector<TripletItemT<float>> items;
      items.reserve(batch_idx.size());
      for (std::size_t idx : batch_idx) {
        const auto& rec = data.train[idx];
        TripletItemT<float> item;
        item.query_image = data.image(rec.query_id);
        item.target_image = data.image(rec.target_id);
        item.tokens = TokenSequence(rec.tokens);
        item.query_id = rec.query_id;
        item.target_id = rec.target_id;
        items.push_back(std::move(item));
      }

      Graph g(true);
      auto fwd = model.forward_batch(g, items, true);

      std::vector<Tensor> com_vals, tgt_vals;
      com_vals.reserve(items.size());
      tgt_vals.reserve(items.size());
      for (std::size_t i = 0; i < items.size(); ++i) {
        com_vals.push_back(g.value(fwd.f_com[i]));
        tgt_vals.push_back(g.value(fwd.f_tgt[i]));
      }

      // (a) critic step on its own loss, embeddings held constant.
      double l_disc_val = 0;
      {
        Graph dg(true);
        std::vector<Graph::Var> dt, dc;
        for (std::size_t i = 0; i < items.size(); ++i) {
          dt.push_back(dg.input(tgt_vals[i]));
          dc.push_back(dg.input(com_vals[i]));
        }
        auto dloss = discriminator_loss(dg, model.discriminator(), dt, dc);
        l_disc_val = dg.value(dloss).scalar_value();
        check_finite(l_disc_val, "discriminator loss", step);
        dg.backward(dloss);
        model.params().for_each([&](ParameterT<float>& p) {
          if (!TraceModel::is_discriminator_param(p.name)) return;
          sgd_step(p.value, p.grad, lr_disc);
          p.zero_grad();
        });
      }

      // (b) model step on the composite objective, with the updated critic
      // held constant inside the adversarial term.
      std::vector<Graph::Var> tri_terms, cons_terms;
      for (std::size_t i = 0; i < items.size(); ++i) {
        Graph::Var neg_var;
        if (opt.neg_full_set) {
          // Candidate pool over every training target (eval-mode embeddings),
          // then the chosen image re-enters the graph for gradient flow.
          std::vector<Tensor> pool_embs;
          std::vector<NegativeCandidateT<float>> pool;
          pool_embs.reserve(data.train.size());
          pool.reserve(data.train.size());
          for (const auto& rec : data.train) {
            pool_embs.push_back(model.embed_target(data.image(rec.target_id)));
            pool.push_back({rec.target_id, &pool_embs.back()});
          }
          const std::size_t pick = sample_negative_index(com_vals[i], pool, items[i].query_id,
                                                         items[i].target_id, opt.negatives, neg_rng);
          neg_var = model.target_var(g, data.image(pool[pick].id), true);
        } else {
          std::vector<NegativeCandidateT<float>> pool;
          for (std::size_t jj = 0; jj < items.size(); ++jj) {
            pool.push_back({items[jj].target_id, &tgt_vals[jj]});
          }
          bool have_pool = false;
          for (const auto& cand : pool) {
            if (cand.id != items[i].query_id && cand.id != items[i].target_id) have_pool = true;
          }
          if (have_pool) {
            const std::size_t pick = sample_negative_index(com_vals[i], pool, items[i].query_id,
                                                           items[i].target_id, opt.negatives, neg_rng);
            neg_var = fwd.f_tgt[pick];
          } else {
            // Single-example batch: fall back to a random other training target.
            std::size_t alt = static_cast<std::size_t>(neg_rng.below(data.train.size()));
            while (data.train[alt].target_id == items[i].target_id ||
                   data.train[alt].target_id == items[i].query_id) {
              alt = static_cast<std::size_t>(neg_rng.below(data.train.size()));
            }
            neg_var = model.target_var(g, data.image(data.train[alt].target_id), true);
          }
        }
        tri_terms.push_back(triplet_loss(g, fwd.f_com[i], fwd.f_tgt[i], neg_var));
        cons_terms.push_back(consistency_loss(g, model.consistency_heads(), fwd.f_com[i],
                                              fwd.f_text[i], fwd.f_tgt[i], opt.loss.alpha_t,
                                              opt.loss.alpha_i));
      }
      auto tri = g.mean(g.concat_vec(tri_terms));
      auto gen = generator_loss(g, model.discriminator(), fwd.f_com);
      auto cons = g.mean(g.concat_vec(cons_terms));
      auto total = total_loss(g, tri, gen, cons, opt.loss);

      check_finite(g.value(tri).scalar_value(), "triplet loss", step);
      check_finite(g.value(gen).scalar_value(), "adversarial loss", step);
      check_finite(g.value(cons).scalar_value(), "consistency loss", step);
      const double total_val = g.value(total).scalar_value();
      check_finite(total_val, "total loss", step);

      g.backward(total);
      adam.step(model.params(),
                [](const ParameterT<float>& p) { return !TraceModel::is_discriminator_param(p.name); });
      model.params().zero_grads();

      result.step_losses.push_back(total_val);
      ++step;
      if (opt.eval_every > 0 && step % opt.eval_every == 0) run_eval(step);
    }
  }
  result.steps = step;
  if (step > 0 && (result.records.empty() || result.records.back().step != step)) run_eval(step);
  return result;
}

}  // namespace trace
