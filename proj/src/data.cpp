#include "trace/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "trace/tnsr_io.hpp"

namespace trace {

namespace {

using nlohmann::json;

constexpr const char* kDatasetName = "synthetic-tcir-v1";

const char* kind_name(TokenTransform::Kind k) {
  switch (k) {
    case TokenTransform::Kind::Tint: return "tint";
    case TokenTransform::Kind::Stripes: return "stripes";
    case TokenTransform::Kind::InvertQuadrant: return "invert_quadrant";
  }
  return "?";
}

TokenTransform::Kind parse_kind(const std::string& s) {
  if (s == "tint") return TokenTransform::Kind::Tint;
  if (s == "stripes") return TokenTransform::Kind::Stripes;
  if (s == "invert_quadrant") return TokenTransform::Kind::InvertQuadrant;
  throw FormatError("manifest: unknown transform kind '" + s + "'");
}

// Quadrant bounds: 0 = top-left, 1 = top-right, 2 = bottom-left, 3 = bottom-right.
struct Region {
  int y0, y1, x0, x1;
};

Region quadrant(int region, int h, int w) {
  const int my = h / 2, mx = w / 2;
  switch (region & 3) {
    case 0: return {0, my, 0, mx};
    case 1: return {0, my, mx, w};
    case 2: return {my, h, 0, mx};
    default: return {my, h, mx, w};
  }
}

// Images hold 12-bit intensity levels (multiples of 1/4096). On that grid
// 1 - v is exact in float, so quadrant inversion is exactly involutive.
float quant01(float v) {
  v = std::min(1.0f, std::max(0.0f, v));
  return std::round(v * 4096.0f) / 4096.0f;
}

}  // namespace

TokenTransform derive_transform(int token, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x7f00 + static_cast<std::uint64_t>(token)));
  TokenTransform t;
  t.token = token;
  switch (token % 3) {
    case 0: {
      t.kind = TokenTransform::Kind::Tint;
      t.channel = static_cast<int>(rng.below(3));
      // Push toward one end of the range so tints are visually decisive.
      t.level = rng.bernoulli(0.5) ? rng.uniform(0.75, 0.95) : rng.uniform(0.05, 0.25);
      t.strength = 0.65;
      break;
    }
    case 1: {
      t.kind = TokenTransform::Kind::Stripes;
      t.channel = static_cast<int>(rng.below(3));
      t.level = rng.uniform(0.7, 0.95);
      t.region = static_cast<int>(rng.below(4));
      t.period = 2 + static_cast<int>(rng.below(3));
      break;
    }
    default: {
      t.kind = TokenTransform::Kind::InvertQuadrant;
      t.region = static_cast<int>(rng.below(4));
      break;
    }
  }
  return t;
}

Tensor apply_transform(const Tensor& image, const TokenTransform& t) {
  Tensor out = image;
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  switch (t.kind) {
    case TokenTransform::Kind::Tint: {
      const float s = static_cast<float>(t.strength);
      const float lvl = static_cast<float>(t.level);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          out.at(t.channel, y, x) = quant01((1.0f - s) * out.at(t.channel, y, x) + s * lvl);
        }
      break;
    }
    case TokenTransform::Kind::Stripes: {
      const Region r = quadrant(t.region, h, w);
      const float hi = static_cast<float>(t.level);
      const float lo = 1.0f - hi;
      for (int y = r.y0; y < r.y1; ++y)
        for (int x = r.x0; x < r.x1; ++x) {
          const bool on = ((y / t.period) + (x / t.period)) % 2 == 0;
          out.at(t.channel, y, x) = on ? hi : lo;
        }
      break;
    }
    case TokenTransform::Kind::InvertQuadrant: {
      const Region r = quadrant(t.region, h, w);
      for (int ch = 0; ch < c; ++ch)
        for (int y = r.y0; y < r.y1; ++y)
          for (int x = r.x0; x < r.x1; ++x) out.at(ch, y, x) = 1.0f - out.at(ch, y, x);
      break;
    }
  }
  return out;
}

Tensor random_base_image(int channels, int h, int w, Rng& rng) {
  Tensor img({channels, h, w});
  for (int c = 0; c < channels; ++c) {
    struct Wave {
      double fx, fy, phase, amp;
    };
    Wave waves[3];
    for (int k = 0; k < 3; ++k) {
      waves[k].fx = rng.uniform(0.5, 3.0);
      waves[k].fy = rng.uniform(0.5, 3.0);
      waves[k].phase = rng.uniform(0.0, 6.283185307179586);
      waves[k].amp = rng.uniform(0.08, 0.22) / (k + 1);
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = 0.5;
        for (const auto& wv : waves) {
          v += wv.amp * std::sin(6.283185307179586 * (wv.fx * x / w + wv.fy * y / h) + wv.phase);
        }
        img.at(c, y, x) = quant01(static_cast<float>(v));
      }
  }
  return img;
}

const Tensor& Dataset::image(std::int64_t id) const {
  auto it = images.find(id);
  if (it == images.end()) {
    throw UsageError("dataset: unknown image id " + std::to_string(id));
  }
  return it->second;
}

Tensor Dataset::regenerate_target(const TripletRecord& rec) const {
  Tensor img = image(rec.query_id);
  for (int tok : rec.tokens) {
    img = apply_transform(img, transforms.at(static_cast<std::size_t>(tok)));
  }
  return img;
}

namespace {

std::vector<int> sample_caption(const SynthSpec& spec, Rng& rng) {
  const int n = spec.min_tokens +
                static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_tokens - spec.min_tokens + 1)));
  std::vector<int> all(static_cast<std::size_t>(spec.vocab));
  std::iota(all.begin(), all.end(), 0);
  rng.shuffle(all);
  return std::vector<int>(all.begin(), all.begin() + n);
}

json transform_to_json(const TokenTransform& t) {
  json j;
  j["token"] = t.token;
  j["kind"] = kind_name(t.kind);
  j["channel"] = t.channel;
  j["level"] = t.level;
  j["strength"] = t.strength;
  j["region"] = t.region;
  j["period"] = t.period;
  return j;
}

TokenTransform transform_from_json(const json& j) {
  TokenTransform t;
  t.token = j.at("token").get<int>();
  t.kind = parse_kind(j.at("kind").get<std::string>());
  t.channel = j.at("channel").get<int>();
  t.level = j.at("level").get<double>();
  t.strength = j.at("strength").get<double>();
  t.region = j.at("region").get<int>();
  t.period = j.at("period").get<int>();
  return t;
}

}  // namespace

void generate_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "images");

  std::vector<TokenTransform> transforms;
  for (int k = 0; k < spec.vocab; ++k) transforms.push_back(derive_transform(k, spec.seed));

  std::int64_t next_id = 0;
  auto write_image = [&](const Tensor& img) {
    const std::int64_t id = next_id++;
    const std::string rel = "images/img_" + std::to_string(id) + ".tnsr";
    write_tnsr(out_dir / rel, img);
    return std::pair<std::int64_t, std::string>(id, rel);
  };

  Rng rng(mix_seed(spec.seed, 1));
  json j;
  j["name"] = kDatasetName;
  j["spec"] = {{"n_train", spec.n_train},
               {"n_eval", spec.n_eval},
               {"n_distractors", spec.n_distractors},
               {"image_channels", spec.image_channels},
               {"image_h", spec.image_h},
               {"image_w", spec.image_w},
               {"vocab", spec.vocab},
               {"min_tokens", spec.min_tokens},
               {"max_tokens", spec.max_tokens},
               {"seed", spec.seed}};
  j["transforms"] = json::array();
  for (const auto& t : transforms) j["transforms"].push_back(transform_to_json(t));

  auto emit_split = [&](int count) {
    json arr = json::array();
    for (int i = 0; i < count; ++i) {
      Tensor query = random_base_image(spec.image_channels, spec.image_h, spec.image_w, rng);
      const std::vector<int> caption = sample_caption(spec, rng);
      Tensor target = query;
      for (int tok : caption) target = apply_transform(target, transforms[static_cast<std::size_t>(tok)]);
      const auto [qid, qfile] = write_image(query);
      const auto [tid, tfile] = write_image(target);
      json rec;
      rec["query_id"] = qid;
      rec["query"] = qfile;
      rec["tokens"] = caption;
      rec["target_id"] = tid;
      rec["target"] = tfile;
      arr.push_back(std::move(rec));
    }
    return arr;
  };

  j["train"] = emit_split(spec.n_train);
  j["eval"] = emit_split(spec.n_eval);

  json distractors = json::array();
  for (int i = 0; i < spec.n_distractors; ++i) {
    Tensor img = random_base_image(spec.image_channels, spec.image_h, spec.image_w, rng);
    const std::vector<int> caption = sample_caption(spec, rng);
    for (int tok : caption) img = apply_transform(img, transforms[static_cast<std::size_t>(tok)]);
    const auto [id, file] = write_image(img);
    json rec;
    rec["id"] = id;
    rec["file"] = file;
    distractors.push_back(std::move(rec));
  }
  j["distractors"] = std::move(distractors);

  std::ofstream out(out_dir / "manifest.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write " + (out_dir / "manifest.json").string());
  out << j.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw FormatError("cannot open " + manifest_path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": invalid JSON: " + e.what());
  }

  Dataset ds;
  ds.root = dir;
  try {
    if (j.at("name").get<std::string>() != kDatasetName) {
      throw FormatError(manifest_path.string() + ": unknown dataset name");
    }
    const json& s = j.at("spec");
    ds.spec.n_train = s.at("n_train").get<int>();
    ds.spec.n_eval = s.at("n_eval").get<int>();
    ds.spec.n_distractors = s.at("n_distractors").get<int>();
    ds.spec.image_channels = s.at("image_channels").get<int>();
    ds.spec.image_h = s.at("image_h").get<int>();
    ds.spec.image_w = s.at("image_w").get<int>();
    ds.spec.vocab = s.at("vocab").get<int>();
    ds.spec.min_tokens = s.at("min_tokens").get<int>();
    ds.spec.max_tokens = s.at("max_tokens").get<int>();
    ds.spec.seed = s.at("seed").get<std::uint64_t>();

    for (const auto& t : j.at("transforms")) ds.transforms.push_back(transform_from_json(t));
    if (static_cast<int>(ds.transforms.size()) != ds.spec.vocab) {
      throw FormatError(manifest_path.string() + ": transform table does not cover the vocabulary");
    }

    auto load_split = [&](const json& arr, std::vector<TripletRecord>& out) {
      for (const auto& r : arr) {
        TripletRecord rec;
        rec.query_id = r.at("query_id").get<std::int64_t>();
        rec.target_id = r.at("target_id").get<std::int64_t>();
        rec.tokens = r.at("tokens").get<std::vector<int>>();
        rec.query_file = r.at("query").get<std::string>();
        rec.target_file = r.at("target").get<std::string>();
        if (rec.query_id == rec.target_id) {
          throw FormatError(manifest_path.string() + ": triplet with query_id == target_id");
        }
        if (rec.tokens.empty()) {
          throw FormatError(manifest_path.string() + ": triplet with empty caption");
        }
        for (int tok : rec.tokens) {
          if (tok < 0 || tok >= ds.spec.vocab) {
            throw FormatError(manifest_path.string() + ": caption token outside the vocabulary");
          }
        }
        out.push_back(std::move(rec));
      }
    };
    load_split(j.at("train"), ds.train);
    load_split(j.at("eval"), ds.eval);
    for (const auto& r : j.at("distractors")) {
      DistractorRecord rec;
      rec.id = r.at("id").get<std::int64_t>();
      rec.file = r.at("file").get<std::string>();
      ds.distractors.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": schema violation: " + e.what());
  }

  auto load_image = [&](std::int64_t id, const std::string& rel) {
    if (ds.images.count(id)) return;
    Tensor t = read_tnsr(dir / rel);
    if (t.rank() != 3 || t.dim(0) != ds.spec.image_channels || t.dim(1) != ds.spec.image_h ||
        t.dim(2) != ds.spec.image_w) {
      throw FormatError(rel + ": image shape " + shape_string(t.shape()) +
                        " does not match the dataset spec");
    }
    ds.images.emplace(id, std::move(t));
  };
  for (const auto& split : {&ds.train, &ds.eval}) {
    for (const auto& rec : *split) {
      load_image(rec.query_id, rec.query_file);
      load_image(rec.target_id, rec.target_file);
    }
  }
  for (const auto& rec : ds.distractors) load_image(rec.id, rec.file);
  return ds;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size < 1) throw ParamError("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0xb47c4 + epoch));
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace trace
