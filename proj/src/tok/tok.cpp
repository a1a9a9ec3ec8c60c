#include "cappa/tok.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "cappa/errors.hpp"

namespace cappa::tok {

std::size_t TokenSeq::valid_count() const noexcept {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> specials{"<bos>", "<eos>", "<pad>", "<mask>"};
  return specials;
}

Vocab::Vocab() : Vocab(special_tokens()) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const auto& specials = special_tokens();
  if (tokens_.size() < specials.size() || !std::equal(specials.begin(), specials.end(), tokens_.begin())) {
    throw VocabError("vocab: ids 0-3 must hold <bos> <eos> <pad> <mask>");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto& t = tokens_[i];
    if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos) {
      throw VocabError("vocab: token " + std::to_string(i) + " is empty or contains whitespace");
    }
    if (!index_.emplace(t, static_cast<std::int32_t>(i)).second) throw VocabError("vocab: duplicate token '" + t + "'");
  }
}

std::optional<std::int32_t> Vocab::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabError("vocab: id " + std::to_string(id) + " outside [0," + std::to_string(tokens_.size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocab::serialize() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocab Vocab::parse(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) throw FormatError("vocab: missing trailing newline");
    tokens.emplace_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  try {
    return Vocab(std::move(tokens));
  } catch (const VocabError& e) {
    throw FormatError(e.what());
  }
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("vocab: cannot open " + path.string() + " for writing");
  const auto text = serialize();
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("vocab: write failed for " + path.string());
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("vocab: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

Vocab build_vocab(std::span<const std::string> corpus) {
  std::set<std::string> words;
  for (const auto& caption : corpus) {
    for (auto& w : split_words(caption)) words.insert(std::move(w));
  }
  std::vector<std::string> tokens = special_tokens();
  for (const auto& w : words) {
    if (std::find(tokens.begin(), tokens.begin() + kNumSpecial, w) == tokens.begin() + kNumSpecial) tokens.push_back(w);
  }
  return Vocab(std::move(tokens));
}

TokenSeq encode(std::string_view caption, const Vocab& vocab, std::size_t max_len, Overflow overflow) {
  if (max_len < 2) throw LengthError("encode: max_len must be at least 2");
  auto words = split_words(caption);
  if (words.size() > max_len - 2) {
    if (overflow == Overflow::kError) {
      throw LengthError("encode: " + std::to_string(words.size()) + " words exceed max_len " + std::to_string(max_len));
    }
    words.resize(max_len - 2);
  }
  TokenSeq seq;
  seq.ids.assign(max_len, kPad);
  seq.valid.assign(max_len, 0);
  seq.ids[0] = kBos;
  for (std::size_t i = 0; i < words.size(); ++i) {
    const auto id = vocab.find(words[i]);
    if (!id || *id < kNumSpecial) throw OOVError(words[i]);
    seq.ids[i + 1] = *id;
  }
  seq.ids[words.size() + 1] = kEos;
  std::fill_n(seq.valid.begin(), words.size() + 2, std::uint8_t{1});
  return seq;
}

std::string decode(const TokenSeq& seq, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const auto id = seq.ids[i];
    const auto& t = vocab.token(id);
    if (i < seq.valid.size() && !seq.valid[i]) continue;
    if (id < kNumSpecial) continue;
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

TokenSeq reverse_caption(const TokenSeq& seq) {
  TokenSeq out = seq;
  const std::size_t n = seq.valid_count();
  if (n < 2) return out;
  std::size_t begin = seq.ids[0] == kBos ? 1 : 0;
  std::size_t end = seq.ids[n - 1] == kEos ? n - 1 : n;
  if (end > begin) std::reverse(out.ids.begin() + static_cast<std::ptrdiff_t>(begin),
                                out.ids.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

TokenSeq mask_sequence(std::size_t length) {
  return TokenSeq{std::vector<std::int32_t>(length, kMask), std::vector<std::uint8_t>(length, 1)};
}

}  // namespace cappa::tok
