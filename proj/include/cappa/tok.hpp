#pragma once

// Word-level tokenizer over the closed caption grammar.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cappa::tok {

inline constexpr std::int32_t kBos = 0;
inline constexpr std::int32_t kEos = 1;
inline constexpr std::int32_t kPad = 2;
inline constexpr std::int32_t kMask = 3;
inline constexpr std::int32_t kNumSpecial = 4;

inline constexpr std::size_t kDefaultMaxLen = 64;

/// Fixed-length id sequence: [BOS, w1..wn, EOS, PAD...]. valid[i] is 1 exactly
/// on the non-PAD prefix.
struct TokenSeq {
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> valid;

  std::size_t size() const noexcept { return ids.size(); }
  std::size_t valid_count() const noexcept;
  bool operator==(const TokenSeq&) const = default;
};

class Vocab {
 public:
  Vocab();
  /// Tokens in id order; the first four must be the special tokens.
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  std::optional<std::int32_t> find(std::string_view word) const;
  /// Throws VocabError for ids outside [0, size).
  const std::string& token(std::int32_t id) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  /// One token per line, line number = id, LF newlines.
  std::string serialize() const;
  static Vocab parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

const std::vector<std::string>& special_tokens();

std::vector<std::string> split_words(std::string_view text);

/// Specials followed by the distinct whitespace-separated words of the corpus
/// in lexicographic (byte) order.
Vocab build_vocab(std::span<const std::string> corpus);

enum class Overflow { kError, kTruncate };

/// Throws OOVError for unknown words; LengthError when the caption needs more
/// than max_len - 2 words and `overflow` is kError. kTruncate keeps the first
/// max_len - 2 words and still terminates with EOS.
TokenSeq encode(std::string_view caption, const Vocab& vocab, std::size_t max_len,
                Overflow overflow = Overflow::kError);

/// Joins the non-special valid tokens with single spaces.
std::string decode(const TokenSeq& seq, const Vocab& vocab);

/// Reverses the content tokens between BOS and EOS.
TokenSeq reverse_caption(const TokenSeq& seq);

/// A sequence of `length` MASK tokens, all valid (parallel-prediction input).
TokenSeq mask_sequence(std::size_t length);

}  // namespace cappa::tok
