#include <fstream>
#include <sstream>

#include "cappa/cli.hpp"
#include "cappa/errors.hpp"

namespace cappa::cli {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string underscored(std::string key) {
  for (auto& c : key)
    if (c == '-') c = '_';
  return key;
}

// Short flag names accepted on the command line.
std::string canonical(const std::string& key) {
  if (key == "share_embeddings") return "share_dec_embeddings";
  if (key == "lr") return "base_lr";
  if (key == "warmup") return "warmup_steps";
  return key;
}

}  // namespace

KeyValues parse_config_text(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value, got '" + t + "'");
    }
    auto key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(canonical(underscored(key)), trim(std::string_view(t).substr(eq + 1)));
    if (nl == text.size()) break;
  }
  return out;
}

ParsedArgs parse_args(std::span<const std::string> args, const std::set<std::string>& flags) {
  ParsedArgs p;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const auto& a = args[i];
    if (a.rfind("--", 0) != 0 || a.size() == 2) {
      p.positional.push_back(a);
      continue;
    }
    auto body = a.substr(2);
    std::string key, value;
    if (const auto eq = body.find('='); eq != std::string::npos) {
      key = canonical(underscored(body.substr(0, eq)));
      value = body.substr(eq + 1);
    } else {
      key = canonical(underscored(body));
      const bool next_is_value = i + 1 < args.size() && args[i + 1].rfind("--", 0) != 0;
      if (flags.count(key) && !(next_is_value && (args[i + 1] == "true" || args[i + 1] == "false"))) {
        value = "true";
      } else if (next_is_value) {
        value = args[++i];
      } else {
        throw UsageError("option --" + body + " needs a value");
      }
    }
    p.options.emplace_back(key, value);
  }
  return p;
}

void RunConfig::set(const std::string& key, const std::string& value, const std::set<std::string>& extra_keys) {
  if (model.set(key, value) || train.set(key, value)) {
    explicit_keys.insert(key);
    return;
  }
  if (extra_keys.count(key)) {
    extra[key] = value;
    explicit_keys.insert(key);
    return;
  }
  throw ConfigError("unknown key '" + key + "'");
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = extra.find(key);
  if (it == extra.end()) throw ConfigError("missing required setting '" + key + "'");
  return it->second;
}

std::string RunConfig::header(bool include_model, bool include_train) const {
  std::ostringstream ss;
  ss << "# effective config\n";
  if (include_model)
    for (const auto& [k, v] : model.to_kv()) ss << k << '=' << v << '\n';
  if (include_train)
    for (const auto& [k, v] : train.to_kv()) ss << k << '=' << v << '\n';
  for (const auto& [k, v] : extra) ss << k << '=' << v << '\n';
  return ss.str();
}

RunConfig build_run_config(const ParsedArgs& args, const std::map<std::string, std::string>& extra_defaults) {
  RunConfig rc;
  std::set<std::string> keys;
  for (const auto& [k, v] : extra_defaults) {
    keys.insert(k);
    if (!v.empty()) rc.extra[k] = v;
  }
  for (const auto& [k, v] : args.options) {
    if (k != "config") continue;
    std::ifstream in(v);
    if (!in) throw MissingArtifact("config file not found: " + v);
    std::ostringstream ss;
    ss << in.rdbuf();
    for (const auto& [ck, cv] : parse_config_text(ss.str())) rc.set(ck, cv, keys);
  }
  for (const auto& [k, v] : args.options) {
    if (k == "config") continue;
    rc.set(k, v, keys);
  }
  return rc;
}

}  // namespace cappa::cli
