#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cappa/errors.hpp"
#include "cappa/train.hpp"

namespace cappa::train {
namespace {

constexpr char kMagic[4] = {'C', 'A', 'P', 'C'};
constexpr std::uint32_t kMaxRank = 8;

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void bytes(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void floats(std::span<const float> v) {
    for (float f : v) u32(std::bit_cast<std::uint32_t>(f));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}

  std::string_view take(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) throw FormatError(std::string("checkpoint: truncated while reading ") + what);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t uint(int width, const char* what) {
    const auto s = take(static_cast<std::size_t>(width), what);
    std::uint64_t v = 0;
    for (int i = width - 1; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(uint(1, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(uint(4, what)); }
  std::uint64_t u64(const char* what) { return uint(8, what); }
  std::string bytes(const char* what) {
    const auto n = u32(what);
    return std::string(take(n, what));
  }
  std::vector<float> floats(std::size_t n, const char* what) {
    if (n > (b_.size() - pos_) / 4) throw FormatError(std::string("checkpoint: truncated while reading ") + what);
    std::vector<float> v(n);
    for (auto& f : v) f = std::bit_cast<float>(u32(what));
    return v;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

std::string config_block(const model::ModelConfig& m, const TrainConfig& t) {
  std::string s;
  for (const auto& [k, v] : m.to_kv()) s += "model." + k + "=" + v + "\n";
  for (const auto& [k, v] : t.to_kv()) s += "train." + k + "=" + v + "\n";
  return s;
}

void parse_config_block(std::string_view text, model::ModelConfig& m, TrainConfig& t) {
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) throw FormatError("checkpoint: config block missing final newline");
    const auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw FormatError("checkpoint: malformed config line '" + std::string(line) + "'");
    const auto key = line.substr(0, eq), value = line.substr(eq + 1);
    bool known = false;
    try {
      if (key.substr(0, 6) == "model.") known = m.set(key.substr(6), value);
      if (key.substr(0, 6) == "train.") known = t.set(key.substr(6), value);
    } catch (const ConfigError& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
    if (!known) throw FormatError("checkpoint: unknown config key '" + std::string(key) + "'");
  }
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  w.bytes(config_block(ckpt.model, ckpt.train));
  w.bytes(ckpt.vocab.serialize());

  const auto& entries = ckpt.params.entries();
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& p : entries) {
    w.bytes(p.name);
    w.u8(p.decay ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(p.value.dim()));
    for (auto d : p.value.shape()) w.u64(d);
    w.floats(p.value.data());
  }

  const bool has_moments = !ckpt.opt.m.empty();
  if (has_moments && (ckpt.opt.m.size() != entries.size() || ckpt.opt.v.size() != entries.size())) {
    throw ShapeError("checkpoint: optimizer state does not match the parameter table");
  }
  w.u64(ckpt.opt.t);
  w.u8(has_moments ? 1 : 0);
  if (has_moments) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (ckpt.opt.m[i].size() != entries[i].value.numel() || ckpt.opt.v[i].size() != entries[i].value.numel()) {
        throw ShapeError("checkpoint: optimizer moment size mismatch for " + entries[i].name);
      }
      w.floats(ckpt.opt.m[i]);
      w.floats(ckpt.opt.v[i]);
    }
  }
  w.u64(ckpt.rng_seed);
  w.u64(ckpt.step);
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4, "magic").data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic bytes");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  parse_config_block(r.bytes("config"), ck.model, ck.train);
  try {
    ck.vocab = tok::Vocab::parse(r.bytes("vocabulary"));
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }

  const auto count = r.u32("tensor count");
  std::vector<std::size_t> sizes;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.bytes("tensor name");
    if (ck.params.contains(name)) throw FormatError("checkpoint: duplicate tensor name " + name);
    const bool decay = r.u8("decay flag") != 0;
    const auto rank = r.u32("rank");
    if (rank > kMaxRank) throw FormatError("checkpoint: tensor rank " + std::to_string(rank) + " too large");
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto extent = r.u64("shape");
      if (extent != 0 && numel > (bytes.size() / extent)) throw FormatError("checkpoint: tensor larger than file");
      shape.push_back(static_cast<std::size_t>(extent));
      numel *= static_cast<std::size_t>(extent);
    }
    Tensor t(shape, r.floats(numel, "tensor data"), true);
    ck.params.add(std::move(name), std::move(t), decay);
    sizes.push_back(numel);
  }

  ck.opt.t = r.u64("optimizer step");
  if (r.u8("optimizer flag") != 0) {
    for (auto n : sizes) {
      ck.opt.m.push_back(r.floats(n, "optimizer moments"));
      ck.opt.v.push_back(r.floats(n, "optimizer moments"));
    }
  }
  ck.rng_seed = r.u64("rng seed");
  ck.step = r.u64("step");
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

Checkpoint make_checkpoint(const model::ModelConfig& mcfg, const TrainConfig& tcfg, const tok::Vocab& vocab,
                           const TrainState& state) {
  Checkpoint ck;
  ck.model = mcfg;
  ck.train = tcfg;
  ck.vocab = vocab;
  ck.params = state.params.clone();
  ck.opt = state.opt;
  ck.rng_seed = tcfg.seed;
  ck.step = state.step;
  return ck;
}

TrainState state_from_checkpoint(const Checkpoint& ckpt) {
  TrainState st;
  st.params = ckpt.params.clone();
  for (auto& p : st.params.entries()) p.value.set_requires_grad(true);
  st.opt = ckpt.opt;
  st.step = ckpt.step;
  return st;
}

}  // namespace cappa::train
