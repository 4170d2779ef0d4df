#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "trace/aggregate.hpp"
#include "trace/compose.hpp"
#include "trace/config.hpp"
#include "trace/encoders.hpp"
#include "trace/losses.hpp"
#include "trace/tnsr_io.hpp"
#include "trace/transform.hpp"

namespace trace {

enum class BaselineKind { Trace, Concat, ImageOnly, TextOnly };

inline BaselineKind parse_baseline(const std::string& s) {
  if (s == "trace") return BaselineKind::Trace;
  if (s == "concat") return BaselineKind::Concat;
  if (s == "image_only") return BaselineKind::ImageOnly;
  if (s == "text_only") return BaselineKind::TextOnly;
  throw ParamError("model.baseline: unknown value '" + s + "'");
}

template <typename T>
struct TripletItemT {
  TensorT<T> query_image;
  TensorT<T> target_image;
  TokenSequence tokens;
  std::int64_t query_id = -1;
  std::int64_t target_id = -1;
};

// The full retrieval model: shared image encoder, text encoder, per-level
// transformation, aggregation, composition, plus the consistency heads and
// the critic used by the training objectives. Baseline variants reroute the
// query side only; the target side is identical across all of them so the
// comparison indexes the same gallery space.
template <typename T>
class TraceModelT {
 public:
  using Var = typename GraphT<T>::Var;

  explicit TraceModelT(const Config& cfg)
      : cfg_(cfg),
        baseline_(parse_baseline(cfg.baseline)),
        image_(store_, cfg.pyramid),
        text_(store_, cfg.text, cfg.pyramid) {
    cfg_.validate();
    transform_ = make_transform_params<T>(store_, cfg.pyramid, cfg.temperature, cfg.gem_p,
                                          cfg.gem_learnable);
    aggregate_ = make_aggregator_params<T>(store_, cfg.pyramid, parse_aggregator(cfg.hfa_kind),
                                           cfg.symmetric_heads);
    compose_ = make_composition_params<T>(store_, cfg.text.hidden_dim, cfg.pyramid.embedding_dim(),
                                          parse_composition(cfg.vlc_kind), cfg.normalize_target);
    heads_ = make_consistency_heads<T>(store_, cfg.pyramid.embedding_dim());
    disc_ = make_discriminator<T>(store_, cfg.pyramid.embedding_dim());
    if (baseline_ == BaselineKind::Concat) {
      const int d = cfg.pyramid.embedding_dim();
      concat_baseline_w_ = &store_.create("baseline.concat.w", {d, 2 * d});
      concat_baseline_b_ = &store_.create("baseline.concat.b", {d});
    }
  }

  void init(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x1417));
    image_.init(rng);
    text_.init(rng);
    init_transform_params(transform_, rng);
    init_aggregator_params(aggregate_, rng);
    init_composition_params(compose_, rng, cfg_.delta_init);
    init_consistency_heads(heads_, rng);
    init_discriminator(disc_, rng);
    if (concat_baseline_w_) {
      init_uniform_fan_in(*concat_baseline_w_, 2 * cfg_.pyramid.embedding_dim(), rng);
      init_uniform_fan_in(*concat_baseline_b_, 2 * cfg_.pyramid.embedding_dim(), rng);
    }
    aggregate_.bn_stats = BnStatsT<T>(cfg_.pyramid.embedding_dim());
  }

  struct BatchOutput {
    std::vector<Var> f_com;
    std::vector<Var> f_tgt;
    std::vector<Var> f_text;
  };

  BatchOutput forward_batch(GraphT<T>& g, const std::vector<TripletItemT<T>>& batch, bool training) {
    if (batch.empty()) throw UsageError("forward_batch: empty batch");
    BatchOutput out;
    std::vector<std::vector<Var>> trace_query_gs;
    for (const auto& item : batch) {
      auto text = text_.encode(g, item.tokens);
      auto f_text = project_text(g, compose_, text.sentence);
      out.f_text.push_back(f_text);
      out.f_tgt.push_back(target_path(g, item.target_image, training));
      switch (baseline_) {
        case BaselineKind::Trace: {
          auto pyramid = image_.encode(g, item.query_image);
          auto pooled = transform_query_pyramid(g, pyramid, text, transform_);
          trace_query_gs.push_back(project_all(g, pooled));
          break;
        }
        case BaselineKind::ImageOnly:
          out.f_com.push_back(query_image_arm(g, item.query_image, training));
          break;
        case BaselineKind::Concat: {
          auto f_img = query_image_arm(g, item.query_image, training);
          out.f_com.push_back(
              affine(g, *concat_baseline_w_, *concat_baseline_b_, g.concat_vec({f_img, f_text})));
          break;
        }
        case BaselineKind::TextOnly:
          out.f_com.push_back(f_text);
          break;
      }
    }
    if (baseline_ == BaselineKind::Trace) {
      auto f_aggs = aggregate_query_batch(g, aggregate_, trace_query_gs, training);
      for (std::size_t i = 0; i < batch.size(); ++i) {
        out.f_com.push_back(compose(g, compose_, f_aggs[i], out.f_text[i]));
      }
    }
    return out;
  }

  // Eval-mode retrieval embedding for a (query image, caption) pair.
  TensorT<T> embed_query(const TensorT<T>& image, const TokenSequence& tokens) {
    GraphT<T> g(false);
    auto text = text_.encode(g, tokens);
    auto f_text = project_text(g, compose_, text.sentence);
    Var f_com;
    switch (baseline_) {
      case BaselineKind::Trace: {
        auto pyramid = image_.encode(g, image);
        auto pooled = transform_query_pyramid(g, pyramid, text, transform_);
        auto f_agg = aggregate_query(g, aggregate_, project_all(g, pooled));
        f_com = compose(g, compose_, f_agg, f_text);
        break;
      }
      case BaselineKind::ImageOnly:
        f_com = query_image_arm(g, image, false);
        break;
      case BaselineKind::Concat: {
        auto f_img = query_image_arm(g, image, false);
        f_com = affine(g, *concat_baseline_w_, *concat_baseline_b_, g.concat_vec({f_img, f_text}));
        break;
      }
      case BaselineKind::TextOnly:
        f_com = f_text;
        break;
    }
    return g.value(f_com);
  }

  // Eval-mode gallery embedding for a catalog image.
  TensorT<T> embed_target(const TensorT<T>& image) {
    GraphT<T> g(false);
    return g.value(target_path(g, image, false));
  }

  // Target embedding inside an existing graph (gradients flow when recording).
  Var target_var(GraphT<T>& g, const TensorT<T>& image, bool training) {
    return target_path(g, image, training);
  }

  const Config& config() const { return cfg_; }
  BaselineKind baseline() const { return baseline_; }
  ParamStoreT<T>& params() { return store_; }
  const DiscriminatorT<T>& discriminator() const { return disc_; }
  const ConsistencyHeadsT<T>& consistency_heads() const { return heads_; }
  AggregatorParamsT<T>& aggregator() { return aggregate_; }
  TransformParamsT<T>& transform_params() { return transform_; }
  CompositionParamsT<T>& composition() { return compose_; }
  const ImageEncoderT<T>& image_encoder() const { return image_; }
  const TextEncoderT<T>& text_encoder() const { return text_; }

  // Image-encoder parameters are the ones held frozen early in training.
  static bool is_image_encoder_param(const std::string& name) {
    return name.rfind("encoder.image.", 0) == 0;
  }
  static bool is_discriminator_param(const std::string& name) {
    return name.rfind("disc.", 0) == 0;
  }

  void set_image_encoder_frozen(bool frozen) {
    store_.for_each([&](ParameterT<T>& p) {
      if (is_image_encoder_param(p.name)) p.frozen = frozen;
    });
  }

  // --- checkpointing ------------------------------------------------------

  void save_checkpoint(const std::filesystem::path& dir, std::int64_t step) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "params");
    nlohmann::json manifest;
    manifest["format"] = "trace-checkpoint-v1";
    manifest["step"] = step;
    manifest["config"] = cfg_.to_json();
    nlohmann::json params = nlohmann::json::object();
    store_.for_each([&](const ParameterT<T>& p) {
      const std::string rel = "params/" + p.name + ".tnsr";
      write_tnsr(dir / rel, p.value.template cast<float>());
      params[p.name] = rel;
    });
    manifest["params"] = std::move(params);
    write_tnsr(dir / "params/aggregate.bn.running_mean.tnsr",
               aggregate_.bn_stats.running_mean.template cast<float>());
    write_tnsr(dir / "params/aggregate.bn.running_var.tnsr",
               aggregate_.bn_stats.running_var.template cast<float>());
    manifest["stats"] = {{"aggregate.bn.running_mean", "params/aggregate.bn.running_mean.tnsr"},
                         {"aggregate.bn.running_var", "params/aggregate.bn.running_var.tnsr"}};
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint manifest in " + dir.string());
    out << manifest.dump(2) << '\n';
  }

  struct Loaded {
    std::unique_ptr<TraceModelT> model;
    std::int64_t step = 0;
  };

  static Loaded load_checkpoint(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(dir / "manifest.json");
    if (!in) throw FormatError("cannot open checkpoint manifest in " + dir.string());
    nlohmann::json manifest;
    try {
      in >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(dir.string() + ": invalid checkpoint manifest: " + e.what());
    }
    Loaded result;
    try {
      if (manifest.at("format").get<std::string>() != "trace-checkpoint-v1") {
        throw FormatError(dir.string() + ": unknown checkpoint format");
      }
      Config cfg = Config::from_json(manifest.at("config"));
      result.model = std::make_unique<TraceModelT>(cfg);
      result.step = manifest.at("step").get<std::int64_t>();
      const auto& params = manifest.at("params");
      result.model->store_.for_each([&](ParameterT<T>& p) {
        if (!params.contains(p.name)) {
          throw FormatError(dir.string() + ": checkpoint is missing parameter '" + p.name + "'");
        }
        Tensor t = read_tnsr(dir / params.at(p.name).template get<std::string>());
        if (t.shape() != p.value.shape()) {
          throw FormatError(dir.string() + ": parameter '" + p.name + "' has shape " +
                            shape_string(t.shape()) + ", expected " + shape_string(p.value.shape()));
        }
        p.value = t.template cast<T>();
      });
      const auto& stats = manifest.at("stats");
      result.model->aggregate_.bn_stats.running_mean =
          read_tnsr(dir / stats.at("aggregate.bn.running_mean").get<std::string>()).template cast<T>();
      result.model->aggregate_.bn_stats.running_var =
          read_tnsr(dir / stats.at("aggregate.bn.running_var").get<std::string>()).template cast<T>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(dir.string() + ": checkpoint manifest schema violation: " + e.what());
    }
    return result;
  }

 private:
  std::vector<Var> project_all(GraphT<T>& g, const std::vector<Var>& pooled) {
    std::vector<Var> gs;
    gs.reserve(pooled.size());
    for (std::size_t l = 0; l < pooled.size(); ++l) {
      gs.push_back(project_level(g, aggregate_, pooled[l], static_cast<int>(l)));
    }
    return gs;
  }

  // Target pipeline: GeM-pooled pyramid, projected, aggregated.
  Var target_path(GraphT<T>& g, const TensorT<T>& image, bool training) {
    auto pyramid = image_.encode(g, image);
    auto pooled = transform_target_pyramid(g, pyramid, transform_);
    auto raw = aggregate_target(g, aggregate_, project_all(g, pooled), training);
    return compose_target(g, compose_, raw);
  }

  // Image arm used by the image_only and concat baselines: the target
  // pipeline applied to the query image, so embeddings live in the gallery
  // space.
  Var query_image_arm(GraphT<T>& g, const TensorT<T>& image, bool training) {
    auto pyramid = image_.encode(g, image);
    auto pooled = transform_target_pyramid(g, pyramid, transform_);
    return aggregate_target(g, aggregate_, project_all(g, pooled), training);
  }

  Config cfg_;
  BaselineKind baseline_;
  ParamStoreT<T> store_;
  ImageEncoderT<T> image_;
  TextEncoderT<T> text_;
  TransformParamsT<T> transform_;
  AggregatorParamsT<T> aggregate_;
  CompositionParamsT<T> compose_;
  ConsistencyHeadsT<T> heads_;
  DiscriminatorT<T> disc_;
  ParameterT<T>* concat_baseline_w_ = nullptr;
  ParameterT<T>* concat_baseline_b_ = nullptr;
};

using TraceModel = TraceModelT<float>;

}  // namespace trace
