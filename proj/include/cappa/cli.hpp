#pragma once

// Command-line surface: gen-data, train, eval, probe, score.
//
// Exit codes: 0 success, 1 internal error, 2 missing artifact, 3 bad input.

#include <iosfwd>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cappa/model.hpp"
#include "cappa/train.hpp"

namespace cappa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitMissing = 2;
inline constexpr int kExitBadInput = 3;

/// Raised for malformed command lines; maps to exit code 3.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Raised when an input artifact does not exist; maps to exit code 2.
class MissingArtifact : public Error {
 public:
  using Error::Error;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// "key = value" lines; '#' starts a comment; blank lines are ignored.
KeyValues parse_config_text(std::string_view text);

struct ParsedArgs {
  KeyValues options;  // in command-line order, dashes in keys turned into underscores
  std::vector<std::string> positional;
};

/// --key value, --key=value; keys in `flags` may omit the value (true).
/// --caption may repeat.
ParsedArgs parse_args(std::span<const std::string> args, const std::set<std::string>& flags);

/// Model and training settings plus command-specific keys, merged from an
/// optional config file (key `config`) and command-line overrides, which win.
struct RunConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  std::map<std::string, std::string> extra;
  /// Keys given explicitly in the config file or on the command line.
  std::set<std::string> explicit_keys;

  /// Applies one key; unknown keys throw ConfigError.
  void set(const std::string& key, const std::string& value, const std::set<std::string>& extra_keys);
  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const { return extra.count(key) != 0; }

  /// "key=value" lines for every setting, defaults materialized.
  std::string header(bool include_model, bool include_train) const;
};

/// Builds a RunConfig: defaults for `extra_defaults`, then the config file
/// named by the `config` option, then every other option.
RunConfig build_run_config(const ParsedArgs& args, const std::map<std::string, std::string>& extra_defaults);

int cmd_gen_data(std::span<const std::string> args, std::ostream& out);
int cmd_train(std::span<const std::string> args, std::ostream& out);
int cmd_eval(std::span<const std::string> args, std::ostream& out);
int cmd_probe(std::span<const std::string> args, std::ostream& out);
int cmd_score(std::span<const std::string> args, std::ostream& out);

/// Dispatches args[0] as the subcommand and converts errors to exit codes.
int run(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace cappa::cli
