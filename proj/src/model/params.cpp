#include <cmath>
#include <random>

#include "cappa/errors.hpp"
#include "cappa/model.hpp"
#include "cappa/rng.hpp"

namespace cappa::model {
namespace {

constexpr double kInitStd = 0.02;
constexpr double kInitTemperature = 0.07;

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

bool decays(std::string_view name) {
  return !(ends_with(name, ".b") || ends_with(name, ".bias") || ends_with(name, ".scale") ||
           ends_with(name, "log_temp"));
}

Tensor truncated_normal(const Shape& shape, std::uint64_t seed, std::string_view name) {
  std::mt19937_64 rng(derive_seed(seed, {stream::kInit, fnv1a(name)}));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) {
    double z = 0;
    do {
      z = normal(rng);
    } while (std::abs(z) > 2.0);
    x = static_cast<float>(z * kInitStd);
  }
  return Tensor(shape, std::move(v));
}

class Builder {
 public:
  Builder(ParamStore& store, std::uint64_t seed) : store_(store), seed_(seed) {}

  void normal(const std::string& name, Shape shape) { put(name, truncated_normal(shape, seed_, name)); }
  void zeros(const std::string& name, Shape shape) { put(name, Tensor::zeros(std::move(shape))); }
  void ones(const std::string& name, Shape shape) { put(name, Tensor::full(std::move(shape), 1.0f)); }
  void constant(const std::string& name, Shape shape, float v) { put(name, Tensor::full(std::move(shape), v)); }

  void norm(const std::string& prefix, std::size_t d, bool bias) {
    ones(prefix + ".scale", {d});
    if (bias) zeros(prefix + ".bias", {d});
  }

  void linear(const std::string& prefix, std::size_t in, std::size_t out, bool bias) {
    normal(prefix + ".w", {in, out});
    if (bias) zeros(prefix + ".b", {out});
  }

  void attention(const std::string& prefix, std::size_t d, bool bias) {
    for (const char* p : {"q", "k", "v", "o"}) linear(prefix + "." + p, d, d, bias);
  }

 private:
  void put(const std::string& name, Tensor t) {
    if (store_.contains(name)) throw ConfigError("duplicate parameter name " + name);
    t.set_requires_grad(true);
    store_.add(name, std::move(t), decays(name));
  }

  ParamStore& store_;
  std::uint64_t seed_;
};

void encoder_stack(Builder& b, const std::string& prefix, const ModelConfig& cfg) {
  const auto D = cfg.width;
  for (std::size_t i = 0; i < cfg.enc_layers; ++i) {
    const auto blk = prefix + "block" + std::to_string(i);
    b.norm(blk + ".ln1", D, false);
    b.attention(blk + ".attn", D, false);
    b.norm(blk + ".ln2", D, false);
    b.linear(blk + ".mlp.fc1", D, cfg.mlp_dim, false);
    b.linear(blk + ".mlp.fc2", cfg.mlp_dim, D, false);
  }
  b.norm(prefix + "ln", D, false);
}

}  // namespace

Tensor& ParamStore::add(std::string name, Tensor value, bool decay) {
  entries_.push_back(Param{std::move(name), std::move(value), decay});
  return entries_.back().value;
}

bool ParamStore::contains(std::string_view name) const {
  for (const auto& p : entries_)
    if (p.name == name) return true;
  return false;
}

const Tensor& ParamStore::get(std::string_view name) const {
  for (const auto& p : entries_)
    if (p.name == name) return p.value;
  throw ConfigError("missing parameter " + std::string(name));
}

Tensor& ParamStore::get(std::string_view name) {
  for (auto& p : entries_)
    if (p.name == name) return p.value;
  throw ConfigError("missing parameter " + std::string(name));
}

Tensor ParamStore::find(std::string_view name) const {
  for (const auto& p : entries_)
    if (p.name == name) return p.value;
  return {};
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& p : entries_) n += p.value.numel();
  return n;
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& p : entries_) {
    auto t = p.value.clone();
    t.set_requires_grad(p.value.requires_grad());
    out.add(p.name, std::move(t), p.decay);
  }
  return out;
}

void ParamStore::zero_grad() {
  for (auto& p : entries_) p.value.zero_grad();
}

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore store;
  Builder b(store, seed);
  const auto D = cfg.width;

  b.linear("enc.patch", cfg.patch_dim(), D, true);
  b.normal("enc.pos", {cfg.num_patches(), D});
  encoder_stack(b, "enc.", cfg);

  if (cfg.is_captioner()) {
    const bool bias = cfg.dec_biases;
    b.normal("dec.embed", {cfg.vocab, D});
    b.normal("dec.pos", {cfg.max_len, D});
    for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
      const auto blk = "dec.block" + std::to_string(i);
      b.norm(blk + ".ln1", D, bias);
      b.attention(blk + ".self", D, bias);
      b.norm(blk + ".ln2", D, bias);
      b.attention(blk + ".xattn", D, bias);
      b.norm(blk + ".ln3", D, bias);
      b.linear(blk + ".mlp.fc1", D, cfg.mlp_dim, bias);
      b.linear(blk + ".mlp.fc2", cfg.mlp_dim, D, bias);
    }
    b.norm("dec.ln", D, bias);
    if (!cfg.share_dec_embeddings) b.normal("dec.head.w", {D, cfg.vocab});
    if (bias) b.zeros("dec.head.b", {cfg.vocab});
  } else {
    b.linear("img.proj", D, D, false);
    b.normal("txt.embed", {cfg.vocab, D});
    b.normal("txt.pos", {cfg.max_len, D});
    encoder_stack(b, "txt.", cfg);
    b.linear("txt.proj", D, D, false);
    b.constant("clip.log_temp", {1}, static_cast<float>(std::log(kInitTemperature)));
  }
  return store;
}

void init_map_head(ParamStore& store, const std::string& prefix, std::size_t width, std::uint64_t seed) {
  Builder b(store, seed);
  b.normal(prefix + "query", {1, width});
  b.attention(prefix + "attn", width, false);
  b.linear(prefix + "proj", width, width, false);
}

void reinit_cross_attention(ParamStore& store, const ModelConfig& cfg, std::uint64_t seed) {
  for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
    for (const char* p : {"q", "k", "v", "o"}) {
      const auto base = "dec.block" + std::to_string(i) + ".xattn." + p;
      auto& w = store.get(base + ".w");
      const auto fresh = truncated_normal(w.shape(), seed, base + ".w");
      std::copy(fresh.data().begin(), fresh.data().end(), w.mutable_data().begin());
      if (auto bias = store.find(base + ".b"); bias.defined()) {
        std::fill(bias.mutable_data().begin(), bias.mutable_data().end(), 0.0f);
      }
    }
  }
}

std::size_t count_params(const ModelConfig& cfg) {
  const std::size_t D = cfg.width, F = cfg.mlp_dim, V = cfg.vocab, N = cfg.max_len;
  const std::size_t P = cfg.patch_dim(), M = cfg.num_patches();

  // Pre-norm block without biases: two norm scales, four DxD projections, two
  // MLP matrices.
  const std::size_t enc_block = 2 * D + 4 * D * D + 2 * D * F;
  const std::size_t encoder = P * D + D + M * D + cfg.enc_layers * enc_block + D;

  if (!cfg.is_captioner()) {
    const std::size_t text = V * D + N * D + cfg.enc_layers * enc_block + D + D * D;
    return encoder + D * D + text + 1;
  }

  std::size_t dec_block = 3 * D + 8 * D * D + 2 * D * F;
  if (cfg.dec_biases) dec_block += 3 * D + 8 * D + F + D;
  std::size_t decoder = V * D + N * D + cfg.dec_layers * dec_block + D;
  if (cfg.dec_biases) decoder += D + V;
  if (!cfg.share_dec_embeddings) decoder += D * V;
  return encoder + decoder;
}

}  // namespace cappa::model
