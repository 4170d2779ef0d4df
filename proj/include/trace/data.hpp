#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "trace/rng.hpp"
#include "trace/tensor.hpp"

namespace trace {

// Procedurally generated text-conditioned retrieval benchmark. Every example
// is a (query image, caption, target image) triplet: the query is a random
// smooth pattern, each vocabulary token names a fixed seed-derived visual
// transform, and the target is the query with the caption's transforms
// applied in token order. Solving the task requires composing image and
// text: the text alone misses the base pattern, the image alone misses the
// requested edits.

struct SynthSpec {
  int n_train = 2000;
  int n_eval = 200;
  int n_distractors = 56;
  int image_channels = 3;
  int image_h = 32;
  int image_w = 32;
  int vocab = 12;
  int min_tokens = 1;
  int max_tokens = 3;
  std::uint64_t seed = 0;

  int catalog_size() const { return n_eval + n_distractors; }

  void validate() const {
    if (n_train < 1 || n_eval < 1 || n_distractors < 0) {
      throw ParamError("synth spec: example counts must be positive");
    }
    if (image_channels != 3) throw ParamError("synth spec: transforms assume 3 image channels");
    if (image_h < 8 || image_w < 8) throw ParamError("synth spec: images must be at least 8x8");
    if (min_tokens < 1 || max_tokens < min_tokens) {
      throw ParamError("synth spec: need 1 <= min_tokens <= max_tokens");
    }
    if (vocab < max_tokens) throw ParamError("synth spec: vocabulary smaller than caption length");
    if (catalog_size() < 50) throw ParamError("synth spec: evaluation catalog must hold at least 50 images");
  }
};

// One token's visual edit. All parameters derive deterministically from
// (dataset seed, token id) and are echoed in the manifest so the mapping can
// be re-verified from the files alone.
struct TokenTransform {
  enum class Kind { Tint, Stripes, InvertQuadrant };

  int token = 0;
  Kind kind = Kind::Tint;
  int channel = 0;   // Tint, Stripes
  double level = 0;  // Tint target intensity / stripe high value
  double strength = 0;  // Tint blend factor
  int region = 0;    // Stripes, InvertQuadrant: quadrant index 0..3
  int period = 2;    // Stripes
};

TokenTransform derive_transform(int token, std::uint64_t seed);
Tensor apply_transform(const Tensor& image, const TokenTransform& t);
Tensor random_base_image(int channels, int h, int w, Rng& rng);

struct TripletRecord {
  std::int64_t query_id = 0;
  std::int64_t target_id = 0;
  std::vector<int> tokens;
  std::string query_file;
  std::string target_file;
};

struct DistractorRecord {
  std::int64_t id = 0;
  std::string file;
};

class Dataset {
 public:
  SynthSpec spec;
  std::vector<TokenTransform> transforms;
  std::vector<TripletRecord> train;
  std::vector<TripletRecord> eval;
  std::vector<DistractorRecord> distractors;
  std::filesystem::path root;

  const Tensor& image(std::int64_t id) const;
  Tensor regenerate_target(const TripletRecord& rec) const;

  std::unordered_map<std::int64_t, Tensor> images;
};

// Writes manifest.json plus one TNSR file per image under out_dir.
void generate_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir);

// Parses manifest.json, loads every referenced tensor, validates invariants.
Dataset load_dataset(const std::filesystem::path& dir);

// Shuffled index batches for one epoch; the final short batch is kept.
// Identical (seed, epoch) pairs give identical order.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch);

}  // namespace trace
