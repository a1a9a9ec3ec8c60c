#include <charconv>
#include <cmath>
#include <sstream>

#include "cappa/errors.hpp"
#include "cappa/model.hpp"

namespace cappa::model {
namespace {

std::size_t parse_size(std::string_view key, std::string_view v) {
  std::size_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || v.empty()) {
    throw ConfigError(std::string(key) + ": expected a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  std::string s(v);
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size() || !std::isfinite(out)) {
    throw ConfigError(std::string(key) + ": expected a number, got '" + s + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(std::string(key) + ": expected true/false, got '" + std::string(v) + "'");
}

std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace

std::string_view objective_name(Objective o) {
  switch (o) {
    case Objective::kCap: return "cap";
    case Objective::kCapPa: return "cappa";
    case Objective::kClip: return "clip";
  }
  return "?";
}

std::optional<Objective> parse_objective(std::string_view name) {
  if (name == "cap") return Objective::kCap;
  if (name == "cappa") return Objective::kCapPa;
  if (name == "clip") return Objective::kClip;
  return std::nullopt;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (patch_size == 0) fail("patch_size must be positive");
  if (image_res == 0 || image_res % patch_size != 0) {
    fail("image_res " + std::to_string(image_res) + " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (heads == 0 || width == 0 || width % heads != 0) {
    fail("width " + std::to_string(width) + " is not divisible by heads " + std::to_string(heads));
  }
  if (enc_layers == 0) fail("enc_layers must be positive");
  if (is_captioner() && dec_layers == 0) fail("dec_layers must be positive");
  if (mlp_dim == 0) fail("mlp_dim must be positive");
  if (vocab <= static_cast<std::size_t>(tok::kNumSpecial)) fail("vocab must exceed the special tokens");
  if (max_len < 2) fail("max_len must be at least 2");
  if (!(parallel_fraction >= 0.0 && parallel_fraction <= 1.0)) fail("parallel_fraction must lie in [0,1]");
  if (!(reverse_prob >= 0.0 && reverse_prob <= 1.0)) fail("reverse_prob must lie in [0,1]");
  if (objective == Objective::kCap && parallel_fraction != 0.0) fail("parallel_fraction requires objective cappa");
}

std::vector<std::pair<std::string, std::string>> ModelConfig::to_kv() const {
  auto b = [](bool f) { return std::string(f ? "true" : "false"); };
  return {
      {"objective", std::string(objective_name(objective))},
      {"patch_size", std::to_string(patch_size)},
      {"image_res", std::to_string(image_res)},
      {"width", std::to_string(width)},
      {"enc_layers", std::to_string(enc_layers)},
      {"dec_layers", std::to_string(dec_layers)},
      {"heads", std::to_string(heads)},
      {"mlp_dim", std::to_string(mlp_dim)},
      {"vocab", std::to_string(vocab)},
      {"max_len", std::to_string(max_len)},
      {"parallel_fraction", fmt_double(parallel_fraction)},
      {"share_dec_embeddings", b(share_dec_embeddings)},
      {"dec_biases", b(dec_biases)},
      {"reverse_prob", fmt_double(reverse_prob)},
      {"batch_level_mixing", b(batch_level_mixing)},
  };
}

bool ModelConfig::set(std::string_view key, std::string_view value) {
  if (key == "objective") {
    auto o = parse_objective(value);
    if (!o) throw ConfigError("objective: expected cap, cappa or clip, got '" + std::string(value) + "'");
    objective = *o;
  } else if (key == "patch_size") {
    patch_size = parse_size(key, value);
  } else if (key == "image_res") {
    image_res = parse_size(key, value);
  } else if (key == "width") {
    width = parse_size(key, value);
  } else if (key == "enc_layers") {
    enc_layers = parse_size(key, value);
  } else if (key == "dec_layers") {
    dec_layers = parse_size(key, value);
  } else if (key == "heads") {
    heads = parse_size(key, value);
  } else if (key == "mlp_dim") {
    mlp_dim = parse_size(key, value);
  } else if (key == "vocab") {
    vocab = parse_size(key, value);
  } else if (key == "max_len") {
    max_len = parse_size(key, value);
  } else if (key == "parallel_fraction") {
    parallel_fraction = parse_double(key, value);
  } else if (key == "share_dec_embeddings") {
    share_dec_embeddings = parse_bool(key, value);
  } else if (key == "dec_biases") {
    dec_biases = parse_bool(key, value);
  } else if (key == "reverse_prob") {
    reverse_prob = parse_double(key, value);
  } else if (key == "batch_level_mixing") {
    batch_level_mixing = parse_bool(key, value);
  } else {
    return false;
  }
  return true;
}

ModelConfig desk_config(Objective objective, std::size_t vocab) {
  ModelConfig cfg;
  cfg.objective = objective;
  cfg.vocab = vocab;
  cfg.dec_layers = cfg.enc_layers / 2;
  cfg.parallel_fraction = objective == Objective::kCapPa ? kDefaultParallelFraction : 0.0;
  return cfg;
}

ModelConfig b16_cap_config() {
  ModelConfig cfg;
  cfg.objective = Objective::kCap;
  cfg.image_res = 224;
  cfg.patch_size = 16;
  cfg.width = 768;
  cfg.enc_layers = 12;
  cfg.dec_layers = 6;
  cfg.heads = 12;
  cfg.mlp_dim = 3072;
  cfg.vocab = 32000;
  cfg.max_len = 64;
  return cfg;
}

}  // namespace cappa::model
