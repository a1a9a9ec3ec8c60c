#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "cappa/cli.hpp"
#include "cappa/datagen.hpp"
#include "cappa/errors.hpp"
#include "cappa/evalsuite.hpp"
#include "cappa/objective.hpp"
#include "cappa/tok.hpp"

namespace cappa::cli {
namespace fs = std::filesystem;
namespace {

std::size_t parse_count(const RunConfig& rc, const std::string& key) {
  const auto& s = rc.get(key);
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw UsageError("--" + key + " expects a non-negative integer, got '" + s + "'");
  }
  return v;
}

double parse_real(const RunConfig& rc, const std::string& key) {
  const auto& s = rc.get(key);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw UsageError("--" + key + " expects a number, got '" + s + "'");
}

const std::string& required_path(const RunConfig& rc, const std::string& key) {
  if (!rc.has(key) || rc.get(key).empty()) throw UsageError("--" + key + " is required");
  return rc.get(key);
}

void require_input(const std::string& path, std::string_view what) {
  if (!fs::is_regular_file(path)) throw MissingArtifact(std::string(what) + " not found: " + path);
}

void require_output(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) {
    throw UsageError("output directory does not exist: " + parent.string());
  }
}

std::ofstream open_output(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  return f;
}

// Header lines for the settings a command actually uses.
void print_header(std::ostream& out, const RunConfig& rc, const std::vector<std::string>& train_keys,
                  bool include_model) {
  out << "# effective config\n";
  if (include_model)
    for (const auto& [k, v] : rc.model.to_kv()) out << k << '=' << v << '\n';
  for (const auto& [k, v] : rc.train.to_kv())
    for (const auto& want : train_keys)
      if (k == want) out << k << '=' << v << '\n';
  for (const auto& [k, v] : rc.extra) out << k << '=' << v << '\n';
}

std::vector<data::PerturbKind> parse_kinds(const std::string& spec) {
  if (spec == "all") return data::all_kinds();
  std::vector<data::PerturbKind> kinds;
  std::stringstream ss(spec);
  std::string name;
  while (std::getline(ss, name, ',')) {
    const auto k = data::parse_kind(name);
    if (!k) throw UsageError("unknown perturbation kind '" + name + "'");
    kinds.push_back(*k);
  }
  if (kinds.empty()) throw UsageError("--kinds is empty");
  return kinds;
}

model::DecodeMode parse_mode(const std::string& s) {
  if (s == "causal") return model::DecodeMode::kCausal;
  if (s == "parallel") return model::DecodeMode::kParallel;
  throw UsageError("--mode must be causal, parallel, blind or contrastive, got '" + s + "'");
}

const std::set<std::string> kFlags = {"share_dec_embeddings", "dec_biases", "batch_level_mixing", "reinit_xattn",
                                      "blind"};

ParsedArgs parse(std::span<const std::string> args) { return parse_args(args, kFlags); }

void no_positional(const ParsedArgs& p) {
  if (!p.positional.empty()) throw UsageError("unexpected argument '" + p.positional.front() + "'");
}

}  // namespace

int cmd_gen_data(std::span<const std::string> args, std::ostream& out) {
  const auto p = parse(args);
  no_positional(p);
  auto rc = build_run_config(p, {{"n", ""}, {"out", ""}, {"min_objects", "1"}, {"max_objects", "3"}, {"noise", "0"}});
  if (!rc.has("n")) throw UsageError("--n is required");
  const auto n = parse_count(rc, "n");
  if (n == 0) throw UsageError("--n must be positive");
  const auto& path = required_path(rc, "out");
  require_output(path);
  data::GenOptions opts;
  opts.min_objects = static_cast<int>(parse_count(rc, "min_objects"));
  opts.max_objects = static_cast<int>(parse_count(rc, "max_objects"));
  opts.noise = parse_real(rc, "noise");

  out << "# effective config\n"
      << "seed=" << rc.train.seed << "\nimage_res=" << rc.model.image_res << '\n';
  for (const auto& [k, v] : rc.extra) out << k << '=' << v << '\n';

  const auto examples = data::gen_dataset(n, rc.train.seed, rc.model.image_res, opts);
  data::write_dataset(path, examples);
  const auto vocab = tok::build_vocab(data::grammar_corpus());
  std::set<int> present;
  for (const auto& ex : examples) present.insert(data::class_label(ex.scene.objects.front()));
  out << "examples=" << examples.size() << " vocab_size=" << vocab.size() << " classes=" << data::kNumClasses
      << " classes_present=" << present.size() << '\n';
  return kExitOk;
}

int cmd_train(std::span<const std::string> args, std::ostream& out) {
  const auto p = parse(args);
  no_positional(p);
  auto rc = build_run_config(p, {{"data", ""}, {"out", ""}, {"metrics", ""}, {"init", ""}, {"log_every", "100"}});
  const auto& data_path = required_path(rc, "data");
  const auto& out_path = required_path(rc, "out");
  const auto metrics_path = rc.has("metrics") && !rc.get("metrics").empty() ? rc.get("metrics")
                                                                             : out_path + ".metrics.csv";
  const auto init_path = rc.has("init") ? rc.get("init") : std::string();
  const auto log_every = parse_count(rc, "log_every");

  // Objective-dependent defaults, unless given explicitly.
  if (rc.model.objective == model::Objective::kCapPa && !rc.explicit_keys.count("parallel_fraction")) {
    rc.model.parallel_fraction = model::kDefaultParallelFraction;
  }
  if (rc.explicit_keys.count("enc_layers") && !rc.explicit_keys.count("dec_layers")) {
    rc.model.dec_layers = std::max<std::size_t>(1, rc.model.enc_layers / 2);
  }
  const auto vocab = tok::build_vocab(data::grammar_corpus());
  if (rc.model.vocab != vocab.size()) {
    throw ConfigError("vocab=" + std::to_string(rc.model.vocab) + " but the caption grammar has " +
                      std::to_string(vocab.size()) + " tokens");
  }
  rc.model.validate();
  rc.train.validate();
  require_input(data_path, "dataset");
  if (!init_path.empty()) require_input(init_path, "init checkpoint");
  require_output(out_path);
  require_output(metrics_path);

  rc.extra["metrics"] = metrics_path;
  print_header(out, rc, {"steps", "batch", "base_lr", "weight_decay", "warmup_steps", "seed", "freeze",
                         "reinit_xattn", "clip_norm", "blind"}, true);

  train::TrainData td{data::read_dataset(data_path), vocab};
  if (td.examples.empty()) throw ConfigError("dataset " + data_path + " is empty");
  for (const auto& ex : td.examples) {
    if (ex.image.size(1) != rc.model.image_res) {
      throw ConfigError("dataset images are " + std::to_string(ex.image.size(1)) + "px but image_res=" +
                        std::to_string(rc.model.image_res));
    }
  }
  std::optional<model::ParamStore> initial;
  if (!init_path.empty()) {
    auto ck = train::load_checkpoint(init_path);
    initial = std::move(ck.params);
  }

  auto metrics = open_output(metrics_path);
  train::write_metrics_csv(metrics, {}, true);
  metrics.flush();
  const auto result = train::train(rc.model, rc.train, td, std::move(initial), [&](const train::MetricsRow& row) {
    const train::MetricsRow one[] = {row};
    train::write_metrics_csv(metrics, one, false);
    metrics.flush();
    if (log_every && ((row.step + 1) % log_every == 0 || row.step + 1 == rc.train.steps)) {
      out << "step " << row.step + 1 << " lr " << row.lr << " loss " << row.loss << '\n';
    }
  });
  train::save_checkpoint(out_path, train::make_checkpoint(rc.model, rc.train, vocab, result.state));
  out << "checkpoint=" << out_path << " metrics=" << metrics_path << '\n';
  return kExitOk;
}

int cmd_eval(std::span<const std::string> args, std::ostream& out) {
  const auto p = parse(args);
  no_positional(p);
  auto rc = build_run_config(p, {{"checkpoint", ""},
                                 {"data", ""},
                                 {"task", "perturb"},
                                 {"kinds", "all"},
                                 {"max_pairs", "0"},
                                 {"report", ""},
                                 {"lit_steps", "300"}});
  const auto& ckpt_path = required_path(rc, "checkpoint");
  const auto& data_path = required_path(rc, "data");
  const auto task = rc.get("task");
  if (task != "perturb" && task != "retrieval") throw UsageError("--task must be perturb or retrieval");
  const auto kinds = parse_kinds(rc.get("kinds"));
  const auto max_pairs = parse_count(rc, "max_pairs");
  const auto lit_steps = parse_count(rc, "lit_steps");
  const auto report_path = rc.has("report") ? rc.get("report") : std::string();
  require_input(ckpt_path, "checkpoint");
  require_input(data_path, "dataset");
  if (!report_path.empty()) require_output(report_path);
  print_header(out, rc, {"seed"}, false);

  const auto ck = train::load_checkpoint(ckpt_path);
  const auto dataset = data::read_dataset(data_path);
  const auto& cfg = ck.model;

  if (task == "retrieval") {
    std::vector<std::string> captions;
    for (const auto& ex : dataset) captions.push_back(ex.caption);
    const auto images = eval::images_of(dataset);
    Tensor img_emb, txt_emb;
    if (cfg.objective == model::Objective::kClip) {
      img_emb = eval::extract_features(cfg, ck.params, images, eval::FeatureMode::kPrelogits);
      std::vector<std::int32_t> ids;
      std::vector<std::uint8_t> valid;
      for (const auto& c : captions) {
        const auto seq = tok::encode(c, ck.vocab, cfg.max_len);
        ids.insert(ids.end(), seq.ids.begin(), seq.ids.end());
        valid.insert(valid.end(), seq.valid.begin(), seq.valid.end());
      }
      NoGradScope<float> no_grad;
      txt_emb = model::encode_text_tower(cfg, ck.params, ids, valid, cfg.max_len);
    } else {
      eval::LitOptions lo;
      lo.steps = lit_steps;
      lo.seed = rc.train.seed;
      const auto lit = eval::lit_align(cfg, ck.params, dataset, ck.vocab, lo);
      img_emb = eval::lit_image_embeddings(cfg, ck.params, lit, images);
      txt_emb = eval::lit_text_embeddings(lit, captions, ck.vocab);
    }
    const auto r = eval::retrieval_eval(img_emb, txt_emb);
    out << "image_to_text recall@1 " << r.image_to_text << "\ntext_to_image recall@1 " << r.text_to_image << '\n';
    if (!report_path.empty()) {
      auto f = open_output(report_path);
      eval::write_retrieval_csv(f, r);
    }
    return kExitOk;
  }

  std::vector<eval::NamedScorer> scorers;
  if (cfg.is_captioner()) {
    scorers.push_back(eval::caption_scorer(cfg, ck.params, ck.vocab, model::DecodeMode::kCausal));
    scorers.push_back(eval::caption_scorer(cfg, ck.params, ck.vocab, model::DecodeMode::kParallel));
    scorers.push_back(eval::blind_scorer(cfg, ck.params, ck.vocab));
  } else {
    scorers.push_back(eval::contrastive_scorer(cfg, ck.params, ck.vocab));
  }
  const auto report = eval::perturbation_benchmark(scorers, dataset, kinds, rc.train.seed, max_pairs);
  for (std::size_t s = 0; s < report.scorers.size(); ++s) {
    for (const auto& r : report.table[s]) {
      out << std::left << std::setw(14) << report.scorers[s] << std::setw(18) << data::kind_name(r.kind) << r.wins
          << '/' << r.pairs << "  " << std::fixed << std::setprecision(4) << r.accuracy << '\n';
      out.unsetf(std::ios::floatfield);
    }
  }
  if (!report_path.empty()) {
    auto f = open_output(report_path);
    eval::write_perturb_csv(f, report);
  }
  return kExitOk;
}

int cmd_probe(std::span<const std::string> args, std::ostream& out) {
  const auto p = parse(args);
  no_positional(p);
  auto rc = build_run_config(p, {{"checkpoint", ""},
                                 {"data", ""},
                                 {"k", "10"},
                                 {"probe", "linear"},
                                 {"features", "gap"},
                                 {"probe_steps", "200"},
                                 {"report", ""}});
  const auto& ckpt_path = required_path(rc, "checkpoint");
  const auto& data_path = required_path(rc, "data");
  const auto k = parse_count(rc, "k");
  if (k == 0) throw UsageError("--k must be positive");
  const auto kind = eval::parse_probe_kind(rc.get("probe"));
  if (!kind) throw UsageError("--probe must be linear, mlp or map");
  const auto feat = eval::parse_feature_mode(rc.get("features"));
  if (!feat) throw UsageError("--features must be gap or prelogits");
  const auto steps = parse_count(rc, "probe_steps");
  const auto report_path = rc.has("report") ? rc.get("report") : std::string();
  require_input(ckpt_path, "checkpoint");
  require_input(data_path, "dataset");
  if (!report_path.empty()) require_output(report_path);
  print_header(out, rc, {"seed"}, false);

  const auto ck = train::load_checkpoint(ckpt_path);
  const auto dataset = data::read_dataset(data_path);
  const auto images = eval::images_of(dataset);
  const auto labels = eval::first_object_labels(dataset);
  const auto features = *kind == eval::ProbeKind::kMap ? eval::extract_sequences(ck.model, ck.params, images)
                                                       : eval::extract_features(ck.model, ck.params, images, *feat);
  eval::ProbeOptions po;
  po.steps = steps;
  const auto r = eval::kshot_probe(features, labels, k, *kind, rc.train.seed, po);
  out << eval::probe_kind_name(r.kind) << ' ' << k << "-shot accuracy " << r.accuracy << " (chance "
      << 1.0 / static_cast<double>(po.num_classes) << ")\n";
  if (!report_path.empty()) {
    auto f = open_output(report_path);
    eval::write_probe_csv(f, r);
  }
  return kExitOk;
}

int cmd_score(std::span<const std::string> args, std::ostream& out) {
  // --caption may repeat, so it is collected before the merged config.
  auto p = parse(args);
  std::vector<std::string> captions;
  KeyValues rest;
  for (auto& [key, value] : p.options) {
    if (key == "caption") {
      captions.push_back(value);
    } else {
      rest.emplace_back(key, value);
    }
  }
  p.options = std::move(rest);
  for (const auto& c : p.positional) captions.push_back(c);

  auto rc = build_run_config(p, {{"checkpoint", ""}, {"data", ""}, {"index", "0"}, {"image", ""}, {"mode", ""}});
  const auto& ckpt_path = required_path(rc, "checkpoint");
  const auto data_path = rc.has("data") ? rc.get("data") : std::string();
  const auto image_path = rc.has("image") ? rc.get("image") : std::string();
  if (data_path.empty() == image_path.empty()) throw UsageError("give exactly one of --data or --image");
  const auto index = parse_count(rc, "index");
  if (captions.empty()) throw UsageError("no candidate captions given");
  require_input(ckpt_path, "checkpoint");
  require_input(data_path.empty() ? image_path : data_path, data_path.empty() ? "image file" : "dataset");

  const auto ck = train::load_checkpoint(ckpt_path);
  const auto& cfg = ck.model;
  std::string mode = rc.has("mode") ? rc.get("mode") : std::string();
  if (mode.empty()) mode = cfg.is_captioner() ? "causal" : "contrastive";
  if ((mode == "contrastive") == cfg.is_captioner()) {
    throw UsageError("--mode " + mode + " does not apply to a " + std::string(model::objective_name(cfg.objective)) +
                     " checkpoint");
  }
  if (mode != "blind" && mode != "contrastive") parse_mode(mode);
  // Tokenize up front so OOV words fail before any model work.
  for (const auto& c : captions) tok::encode(c, ck.vocab, cfg.max_len);

  // An image file is a dataset file; its first example is used.
  const auto dataset = data::read_dataset(data_path.empty() ? image_path : data_path);
  const std::size_t at = data_path.empty() ? 0 : index;
  if (at >= dataset.size()) {
    throw UsageError("--index " + std::to_string(at) + " out of range (" + std::to_string(dataset.size()) +
                     " examples)");
  }
  const auto& image = dataset[at].image;

  out << "# effective config\ncheckpoint=" << ckpt_path << '\n'
      << (data_path.empty() ? "image=" + image_path : "data=" + data_path + "\nindex=" + std::to_string(at))
      << "\nmode=" << mode << '\n';

  std::vector<double> scores;
  if (mode == "contrastive") {
    scores = objective::contrastive_scores(cfg, ck.params, ck.vocab, image, captions);
  } else if (mode == "blind") {
    scores = objective::blind_scores(cfg, ck.params, ck.vocab, captions);
  } else {
    scores = objective::score_captions(cfg, ck.params, ck.vocab, image, captions, parse_mode(mode));
  }
  const auto best = objective::argmax_first(scores);
  for (std::size_t i = 0; i < captions.size(); ++i) {
    out << std::setprecision(9) << scores[i] << '\t' << captions[i] << '\n';
  }
  out << "best " << best << '\t' << captions[best] << '\n';
  return kExitOk;
}

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  static const char* kUsage =
      "usage: cappa <command> [--key value ...]\n"
      "commands: gen-data, train, eval, probe, score\n"
      "every command accepts --config FILE with key=value lines; flags override it\n";
  if (args.empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help") {
    (args.empty() ? err : out) << kUsage;
    return args.empty() ? kExitBadInput : kExitOk;
  }
  const auto& cmd = args[0];
  const auto rest = args.subspan(1);
  try {
    if (cmd == "gen-data") return cmd_gen_data(rest, out);
    if (cmd == "train") return cmd_train(rest, out);
    if (cmd == "eval") return cmd_eval(rest, out);
    if (cmd == "probe") return cmd_probe(rest, out);
    if (cmd == "score") return cmd_score(rest, out);
    err << "unknown command '" << cmd << "'\n" << kUsage;
    return kExitBadInput;
  } catch (const MissingArtifact& e) {
    err << "error: " << e.what() << '\n';
    return kExitMissing;
  } catch (const OOVError& e) {
    err << "error: out-of-vocabulary word '" << e.word() << "'\n";
    return kExitBadInput;
  } catch (const InsufficientShots& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadInput;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n' << kUsage;
    return kExitBadInput;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadInput;
  } catch (const LengthError& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadInput;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadInput;
  } catch (const VersionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadInput;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace cappa::cli
