#include "trace/config.hpp"

#include <fstream>
#include <functional>
#include <map>

#include "trace/aggregate.hpp"
#include "trace/compose.hpp"

namespace trace {

namespace {

using nlohmann::json;

template <typename T>
T get_typed(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw UsageError("config key '" + key + "' has the wrong type");
  }
}

}  // namespace

Config Config::from_json(const json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object of flat keys");
  Config c;
  std::map<std::string, std::function<void(const json&, const std::string&)>> setters;

  auto bind_int = [&](const std::string& key, int& slot) {
    setters[key] = [&slot](const json& v, const std::string& k) { slot = get_typed<int>(v, k); };
  };
  auto bind_double = [&](const std::string& key, double& slot) {
    setters[key] = [&slot](const json& v, const std::string& k) { slot = get_typed<double>(v, k); };
  };
  auto bind_bool = [&](const std::string& key, bool& slot) {
    setters[key] = [&slot](const json& v, const std::string& k) { slot = get_typed<bool>(v, k); };
  };
  auto bind_string = [&](const std::string& key, std::string& slot) {
    setters[key] = [&slot](const json& v, const std::string& k) {
      slot = get_typed<std::string>(v, k);
    };
  };
  auto bind_ints = [&](const std::string& key, std::vector<int>& slot) {
    setters[key] = [&slot](const json& v, const std::string& k) {
      slot = get_typed<std::vector<int>>(v, k);
    };
  };

  bind_int("pyramid.levels", c.pyramid.levels);
  bind_ints("pyramid.channels", c.pyramid.channels);
  bind_ints("pyramid.heights", c.pyramid.heights);
  bind_ints("pyramid.widths", c.pyramid.widths);
  bind_int("pyramid.image_channels", c.pyramid.image_channels);
  bind_int("text.vocab", c.text.vocab);
  bind_int("text.embed_dim", c.text.embed_dim);
  bind_int("text.hidden_dim", c.text.hidden_dim);
  bind_string("model.baseline", c.baseline);
  bind_string("hfa.kind", c.hfa_kind);
  bind_string("vlc.kind", c.vlc_kind);
  bind_bool("model.symmetric_heads", c.symmetric_heads);
  bind_bool("model.normalize_target", c.normalize_target);
  bind_bool("model.gem_learnable", c.gem_learnable);
  bind_double("model.temperature", c.temperature);
  bind_double("model.gem_p", c.gem_p);
  bind_double("model.delta_init", c.delta_init);
  bind_double("loss.lambda1", c.loss.lambda1);
  bind_double("loss.lambda2", c.loss.lambda2);
  bind_double("loss.lambda3", c.loss.lambda3);
  bind_double("loss.alpha_t", c.loss.alpha_t);
  bind_double("loss.alpha_i", c.loss.alpha_i);
  bind_double("neg.hard_fraction", c.negatives.hard_fraction);
  bind_double("neg.tau", c.negatives.tau);
  bind_bool("neg.full_set", c.neg_full_set);
  bind_int("train.epochs", c.epochs);
  bind_int("train.batch", c.batch);
  bind_double("train.lr_main", c.lr_main);
  bind_double("train.lr_disc", c.lr_disc);
  bind_int("train.patience", c.patience);
  bind_int("train.unfreeze_epoch", c.unfreeze_epoch);
  bind_int("train.eval_every", c.eval_every);
  bind_string("train.split", c.split);
  setters["train.seed"] = [&c](const json& v, const std::string& k) {
    c.seed = get_typed<std::uint64_t>(v, k);
  };

  for (const auto& [key, value] : j.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw UsageError("unknown config key '" + key + "'");
    it->second(value, key);
  }
  c.validate();
  return c;
}

Config Config::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw UsageError(path.string() + ": invalid JSON: " + e.what());
  }
  return from_json(j);
}

json Config::to_json() const {
  json j;
  j["pyramid.levels"] = pyramid.levels;
  j["pyramid.channels"] = pyramid.channels;
  j["pyramid.heights"] = pyramid.heights;
  j["pyramid.widths"] = pyramid.widths;
  j["pyramid.image_channels"] = pyramid.image_channels;
  j["text.vocab"] = text.vocab;
  j["text.embed_dim"] = text.embed_dim;
  j["text.hidden_dim"] = text.hidden_dim;
  j["model.baseline"] = baseline;
  j["hfa.kind"] = hfa_kind;
  j["vlc.kind"] = vlc_kind;
  j["model.symmetric_heads"] = symmetric_heads;
  j["model.normalize_target"] = normalize_target;
  j["model.gem_learnable"] = gem_learnable;
  j["model.temperature"] = temperature;
  j["model.gem_p"] = gem_p;
  j["model.delta_init"] = delta_init;
  j["loss.lambda1"] = loss.lambda1;
  j["loss.lambda2"] = loss.lambda2;
  j["loss.lambda3"] = loss.lambda3;
  j["loss.alpha_t"] = loss.alpha_t;
  j["loss.alpha_i"] = loss.alpha_i;
  j["neg.hard_fraction"] = negatives.hard_fraction;
  j["neg.tau"] = negatives.tau;
  j["neg.full_set"] = neg_full_set;
  j["train.epochs"] = epochs;
  j["train.batch"] = batch;
  j["train.lr_main"] = lr_main;
  j["train.lr_disc"] = lr_disc;
  j["train.patience"] = patience;
  j["train.unfreeze_epoch"] = unfreeze_epoch;
  j["train.eval_every"] = eval_every;
  j["train.seed"] = seed;
  j["train.split"] = split;
  return j;
}

void Config::validate() const {
  pyramid.validate();
  loss.validate();
  negatives.validate();
  if (baseline != "trace" && baseline != "concat" && baseline != "image_only" &&
      baseline != "text_only") {
    throw UsageError("model.baseline: expected trace/concat/image_only/text_only, got '" + baseline +
                     "'");
  }
  parse_aggregator(hfa_kind);
  parse_composition(vlc_kind);
  if (temperature <= 0) throw UsageError("model.temperature must be positive");
  if (gem_p < 1) throw UsageError("model.gem_p must be >= 1");
  if (delta_init <= 0) throw UsageError("model.delta_init must be positive");
  if (epochs < 0 || batch < 1 || patience < 1 || unfreeze_epoch < 0 || eval_every < 1) {
    throw UsageError("train.*: counts must be positive (epochs may be zero)");
  }
  if (lr_main <= 0 || lr_disc <= 0) throw UsageError("train.lr_*: learning rates must be positive");
  if (split != "original" && split != "val") {
    throw UsageError("train.split: expected 'original' or 'val', got '" + split + "'");
  }
}

}  // namespace trace
