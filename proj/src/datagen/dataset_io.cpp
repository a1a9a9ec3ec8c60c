#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cappa/datagen.hpp"
#include "cappa/errors.hpp"

namespace cappa::data {
namespace {

constexpr char kMagic[4] = {'C', 'A', 'P', 'D'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("dataset: truncated while reading ") + what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint32_t u32(const char* what) {
    const auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_dataset(std::span<const Example> examples) {
  std::string out(kMagic, 4);
  put_u32(out, kDatasetVersion);
  put_u32(out, static_cast<std::uint32_t>(examples.size()));
  for (const auto& ex : examples) {
    if (ex.image.dim() != 3 || ex.image.size(0) != 3 || ex.image.size(1) != ex.image.size(2)) {
      throw ShapeError("dataset: image must be [3,R,R], got " + shape_string(ex.image.shape()));
    }
    put_u32(out, static_cast<std::uint32_t>(ex.image.size(1)));
    for (float v : ex.image.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    put_u32(out, static_cast<std::uint32_t>(ex.caption.size()));
    out += ex.caption;
  }
  return out;
}

std::vector<Example> decode_dataset(std::string_view bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4, "magic").data(), kMagic, 4) != 0) throw FormatError("dataset: bad magic bytes");
  const auto version = r.u32("version");
  if (version != kDatasetVersion) throw VersionError("dataset: unsupported version " + std::to_string(version));
  const auto count = r.u32("count");
  std::vector<Example> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t R = r.u32("resolution");
    if (R == 0 || R % 2 != 0 || R > 4096) throw FormatError("dataset: invalid resolution " + std::to_string(R));
    std::vector<float> px(3 * R * R);
    const auto raw = r.take(px.size() * 4, "image");
    for (std::size_t j = 0; j < px.size(); ++j) {
      std::uint32_t v = 0;
      for (int b = 3; b >= 0; --b) v = (v << 8) | static_cast<unsigned char>(raw[j * 4 + static_cast<std::size_t>(b)]);
      px[j] = std::bit_cast<float>(v);
    }
    const auto len = r.u32("caption length");
    std::string caption(r.take(len, "caption"));
    Tensor image({3, R, R}, std::move(px));
    Scene scene = infer_scene(image);
    out.push_back(Example{std::move(image), std::move(caption), std::move(scene)});
  }
  if (!r.done()) throw FormatError("dataset: trailing bytes after last example");
  return out;
}

void write_dataset(const std::filesystem::path& path, std::span<const Example> examples) {
  const auto bytes = encode_dataset(examples);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("dataset: cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("dataset: write failed for " + path.string());
}

std::vector<Example> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("dataset: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_dataset(ss.str());
}

}  // namespace cappa::data
