#pragma once

#include <string>
#include <vector>

#include "trace/nn_util.hpp"
#include "trace/params.hpp"
#include "trace/rng.hpp"
#include "trace/tensor.hpp"

namespace trace {

// Shape contract for the visual feature pyramid: L levels with strictly
// increasing channel counts and spatial dimensions that halve per level.
// The encoder stem halves once more, so it expects input at 2x the level-1
// resolution.
struct PyramidConfig {
  int levels = 3;
  std::vector<int> channels = {8, 16, 32};
  std::vector<int> heights = {16, 8, 4};
  std::vector<int> widths = {16, 8, 4};
  int image_channels = 3;

  void validate() const {
    if (levels < 2) throw ParamError("pyramid: need at least 2 levels");
    if (static_cast<int>(channels.size()) != levels || static_cast<int>(heights.size()) != levels ||
        static_cast<int>(widths.size()) != levels) {
      throw ParamError("pyramid: channels/heights/widths must list one entry per level");
    }
    for (int l = 0; l < levels; ++l) {
      if (channels[l] <= 0 || heights[l] <= 0 || widths[l] <= 0) {
        throw ParamError("pyramid: dimensions must be positive");
      }
      if (l > 0) {
        if (channels[l] <= channels[l - 1]) {
          throw ParamError("pyramid: channel counts must be strictly increasing");
        }
        if (heights[l] * 2 != heights[l - 1] || widths[l] * 2 != widths[l - 1]) {
          throw ParamError("pyramid: spatial dimensions must halve per level");
        }
      }
    }
  }

  int embedding_dim() const { return channels.back(); }
  int input_height() const { return heights[0] * 2; }
  int input_width() const { return widths[0] * 2; }

  bool operator==(const PyramidConfig&) const = default;
};

// One feature volume per level, inside a graph.
template <typename T>
struct FeaturePyramidT {
  std::vector<typename GraphT<T>::Var> levels;
};

struct TokenSequence {
  std::vector<int> ids;

  TokenSequence() = default;
  explicit TokenSequence(std::vector<int> token_ids) : ids(std::move(token_ids)) {}

  void validate(int vocab) const {
    if (ids.empty()) throw UsageError("token sequence must be non-empty");
    for (int id : ids) {
      if (id < 0 || id >= vocab) {
        throw UsageError("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(vocab));
      }
    }
  }
};

// Pooled sentence vector plus its per-level projections.
template <typename T>
struct SentenceEmbeddingT {
  typename GraphT<T>::Var sentence;                    // [d_sent]
  std::vector<typename GraphT<T>::Var> level_text;     // T^l, [C_l] each
};

struct TextConfig {
  int vocab = 12;
  int embed_dim = 32;
  int hidden_dim = 64;  // d_sent
};

// Small convolutional pyramid encoder: a stride-2 stem followed by one
// stride-2 block per additional level, ReLU after every conv. Query and
// target images share this one parameter set.
template <typename T>
class ImageEncoderT {
 public:
  using Var = typename GraphT<T>::Var;

  ImageEncoderT(ParamStoreT<T>& store, PyramidConfig cfg, const std::string& prefix = "encoder.image")
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    conv_w_.push_back(&store.create(prefix + ".stem.w", {cfg_.channels[0], cfg_.image_channels, 3, 3}));
    conv_b_.push_back(&store.create(prefix + ".stem.b", {cfg_.channels[0]}));
    for (int l = 1; l < cfg_.levels; ++l) {
      conv_w_.push_back(&store.create(prefix + ".block" + std::to_string(l) + ".w",
                                      {cfg_.channels[l], cfg_.channels[l - 1], 3, 3}));
      conv_b_.push_back(&store.create(prefix + ".block" + std::to_string(l) + ".b", {cfg_.channels[l]}));
    }
  }

  void init(Rng& rng) {
    for (std::size_t i = 0; i < conv_w_.size(); ++i) {
      const auto& shape = conv_w_[i]->value.shape();
      const int fan_in = shape[1] * shape[2] * shape[3];
      init_uniform_fan_in(*conv_w_[i], fan_in, rng);
      init_uniform_fan_in(*conv_b_[i], fan_in, rng);
    }
  }

  // Builds the pyramid for one image; used for both query and target.
  FeaturePyramidT<T> encode(GraphT<T>& g, const TensorT<T>& image) const {
    if (image.rank() != 3 || image.dim(0) != cfg_.image_channels ||
        image.dim(1) != cfg_.input_height() || image.dim(2) != cfg_.input_width()) {
      throw ShapeError("encode: expected image [" + std::to_string(cfg_.image_channels) + "x" +
                       std::to_string(cfg_.input_height()) + "x" + std::to_string(cfg_.input_width()) +
                       "], got " + shape_string(image.shape()));
    }
    FeaturePyramidT<T> pyr;
    Var v = g.input(image);
    for (int l = 0; l < cfg_.levels; ++l) {
      v = g.relu(g.conv2d(v, g.param(*conv_w_[static_cast<std::size_t>(l)]),
                          g.param(*conv_b_[static_cast<std::size_t>(l)]), 2, 1));
      pyr.levels.push_back(v);
    }
    return pyr;
  }

  const PyramidConfig& config() const { return cfg_; }

 private:
  PyramidConfig cfg_;
  std::vector<ParameterT<T>*> conv_w_;
  std::vector<ParameterT<T>*> conv_b_;
};

// Token embeddings -> single-layer GRU -> per-level linear projections.
// Every level gets a learned projection of the final hidden state, including
// level 1, so the projection dimensions always match the pyramid channels.
template <typename T>
class TextEncoderT {
 public:
  using Var = typename GraphT<T>::Var;

  TextEncoderT(ParamStoreT<T>& store, TextConfig cfg, const PyramidConfig& pyramid,
               const std::string& prefix = "encoder.text")
      : cfg_(cfg) {
    if (cfg_.vocab < 1 || cfg_.embed_dim < 1 || cfg_.hidden_dim < 1) {
      throw ParamError("text encoder: vocab/embed/hidden dims must be positive");
    }
    embed_ = &store.create(prefix + ".embed", {cfg_.vocab, cfg_.embed_dim});
    const int h = cfg_.hidden_dim, e = cfg_.embed_dim;
    for (int gate = 0; gate < 3; ++gate) {
      const std::string name = prefix + ".gru." + std::string(1, "zrc"[gate]);
      wx_[gate] = &store.create(name + ".wx", {h, e});
      wh_[gate] = &store.create(name + ".wh", {h, h});
      b_[gate] = &store.create(name + ".b", {h});
    }
    for (int l = 0; l < pyramid.levels; ++l) {
      proj_w_.push_back(&store.create(prefix + ".proj" + std::to_string(l + 1) + ".w",
                                      {pyramid.channels[l], h}));
      proj_b_.push_back(&store.create(prefix + ".proj" + std::to_string(l + 1) + ".b",
                                      {pyramid.channels[l]}));
    }
  }

  void init(Rng& rng) {
    init_uniform_fan_in(*embed_, cfg_.embed_dim, rng);
    for (int gate = 0; gate < 3; ++gate) {
      init_uniform_fan_in(*wx_[gate], cfg_.embed_dim, rng);
      init_uniform_fan_in(*wh_[gate], cfg_.hidden_dim, rng);
      init_uniform_fan_in(*b_[gate], cfg_.hidden_dim, rng);
    }
    for (std::size_t l = 0; l < proj_w_.size(); ++l) {
      init_uniform_fan_in(*proj_w_[l], cfg_.hidden_dim, rng);
      init_uniform_fan_in(*proj_b_[l], cfg_.hidden_dim, rng);
    }
  }

  SentenceEmbeddingT<T> encode(GraphT<T>& g, const TokenSequence& tokens) const {
    tokens.validate(cfg_.vocab);
    Var table = g.param(*embed_);
    Var h = g.input(TensorT<T>({cfg_.hidden_dim}));
    for (int id : tokens.ids) {
      Var x = g.select_row(table, id);
      Var z = g.sigmoid(gate_pre(g, 0, x, h));
      Var r = g.sigmoid(gate_pre(g, 1, x, h));
      Var cand = g.tanh(g.add(g.add(g.matvec(g.param(*wx_[2]), x), g.matvec(g.param(*wh_[2]), g.mul(r, h))),
                              g.param(*b_[2])));
      // h <- (1 - z) * h + z * cand
      h = g.add(g.sub(h, g.mul(z, h)), g.mul(z, cand));
    }
    SentenceEmbeddingT<T> out;
    out.sentence = h;
    for (std::size_t l = 0; l < proj_w_.size(); ++l) {
      out.level_text.push_back(affine(g, *proj_w_[l], *proj_b_[l], h));
    }
    return out;
  }

  const TextConfig& config() const { return cfg_; }

 private:
  Var gate_pre(GraphT<T>& g, int gate, Var x, Var h) const {
    return g.add(g.add(g.matvec(g.param(*wx_[gate]), x), g.matvec(g.param(*wh_[gate]), h)),
                 g.param(*b_[gate]));
  }

  TextConfig cfg_;
  ParameterT<T>* embed_ = nullptr;
  ParameterT<T>* wx_[3] = {};
  ParameterT<T>* wh_[3] = {};
  ParameterT<T>* b_[3] = {};
  std::vector<ParameterT<T>*> proj_w_;
  std::vector<ParameterT<T>*> proj_b_;
};

}  // namespace trace
