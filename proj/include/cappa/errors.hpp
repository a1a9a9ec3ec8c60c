#pragma once

#include <stdexcept>
#include <string>

namespace cappa {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Loss requested over a weight mask with no active position.
class EmptyLossError : public Error {
 public:
  using Error::Error;
};

class BatchTooSmall : public Error {
 public:
  using Error::Error;
};

/// A caption word that is not part of the vocabulary.
class OOVError : public Error {
 public:
  explicit OOVError(std::string word)
      : Error("unknown word '" + word + "'"), word_(std::move(word)) {}
  const std::string& word() const noexcept { return word_; }

 private:
  std::string word_;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

class VocabError : public Error {
 public:
  using Error::Error;
};

class PerturbError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file, wrong magic bytes.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InsufficientShots : public Error {
 public:
  using Error::Error;
};

}  // namespace cappa
