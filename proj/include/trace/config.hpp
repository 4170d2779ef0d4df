#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "trace/encoders.hpp"
#include "trace/losses.hpp"
#include "trace/sampling.hpp"

namespace trace {

// Experiment configuration with a flat JSON key namespace ("hfa.kind",
// "loss.lambda2", ...). Unknown keys are rejected so experiment records
// cannot silently drift. `to_json` emits the full key set; a round trip is
// lossless.
struct Config {
  PyramidConfig pyramid;
  TextConfig text;

  std::string baseline = "trace";  // trace | concat | image_only | text_only
  std::string hfa_kind = "lstm";
  std::string vlc_kind = "residual_offset";
  bool symmetric_heads = false;
  bool normalize_target = false;
  bool gem_learnable = false;
  double temperature = 8.0;
  double gem_p = 3.0;
  double delta_init = 4.0;

  LossWeights loss;
  NegativePolicy negatives;
  bool neg_full_set = false;

  int epochs = 10;
  int batch = 32;
  double lr_main = 1e-3;
  double lr_disc = 2e-4;
  int patience = 3;
  int unfreeze_epoch = 2;
  int eval_every = 50;
  std::uint64_t seed = 0;
  std::string split = "original";  // original | val

  static Config from_json(const nlohmann::json& j);
  static Config from_file(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  void validate() const;
};

}  // namespace trace
