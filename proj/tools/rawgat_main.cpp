// Command-line front end: train, score, eval, audit.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rawgat/cli_config.hpp"
#include "rawgat/data.hpp"
#include "rawgat/metrics.hpp"
#include "rawgat/model.hpp"
#include "rawgat/train.hpp"

namespace fs = std::filesystem;
using namespace rawgat;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Flag values shared by all subcommands; applied on top of the config file.
struct Flags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::string fusion;
  std::vector<std::string> ablate;
};

void add_common_flags(CLI::App* cmd, Flags& flags) {
  cmd->add_option("--config", flags.config_path,
                  "key=value configuration file");
  cmd->add_option("--seed", flags.seed, "override model.seed");
  cmd->add_option("--out", flags.out, "override paths.out");
  cmd->add_option("--checkpoint", flags.checkpoint,
                  "override paths.checkpoint");
  cmd->add_option("--fusion", flags.fusion, "override model.fusion")
      ->check(CLI::IsMember({"add", "mul", "concat"}));
  cmd->add_option("--ablate", flags.ablate,
                  "disable a branch or pooling (repeatable)")
      ->check(CLI::IsMember({"spectral", "temporal", "pooling"}));
}

CliConfig build_config(const Flags& flags) {
  CliConfig cfg;
  if (!flags.config_path.empty()) cfg.load_file(flags.config_path);
  if (flags.seed) cfg.apply("model.seed", std::to_string(*flags.seed));
  if (!flags.fusion.empty()) cfg.apply("model.fusion", flags.fusion);
  for (const auto& a : flags.ablate) cfg.apply("model.use_" + a, "false");
  if (!flags.checkpoint.empty()) cfg.apply("paths.checkpoint", flags.checkpoint);
  if (!flags.out.empty()) cfg.apply("paths.out", flags.out);
  return cfg;
}

std::string key_help() {
  std::ostringstream os;
  os << "Configuration keys (for --config files; flags override):\n";
  for (const auto& doc : CliConfig::key_docs()) {
    char line[200];
    std::snprintf(line, sizeof(line), "  %-22s %-15s %s", doc.key, doc.type,
                  doc.doc);
    os << line << "\n";
  }
  return os.str();
}

void require_key(const std::string& value, const char* key) {
  require(!value.empty(), ErrorKind::config,
          concat_msg("required config key '", key, "' is not set"));
}

std::vector<Utterance> load_manifest_utterances(const std::string& path,
                                                bool labels_required) {
  const auto entries = parse_manifest(path);
  require(!entries.empty(), ErrorKind::io,
          concat_msg("manifest '", path, "' lists no files"));
  std::vector<Utterance> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    auto utt = load_wav(e.path);
    utt.label = e.label;
    require(!labels_required || utt.label.has_value(), ErrorKind::io,
            concat_msg("manifest '", path, "': no label for '", e.path, "'"));
    out.push_back(std::move(utt));
  }
  return out;
}

// Writes one synthetic split to <dir>/<split>_<id>.wav and returns manifest
// text; appends protocol rows ("synth <id> <system> <key> <label>").
std::string materialize_split(const std::vector<Utterance>& utts,
                              const fs::path& dir, const std::string& split,
                              int sample_rate, std::string& protocol_text) {
  std::string manifest_text;
  for (const auto& u : utts) {
    const std::string stem = split + "_" + u.id;
    const fs::path wav = dir / (stem + ".wav");
    save_wav(wav.string(), u.samples, sample_rate);
    const bool bona = u.label == Label::bona;
    manifest_text += wav.string();
    manifest_text += '\t';
    manifest_text += bona ? "bonafide" : "spoof";
    manifest_text += '\n';
    protocol_text += "synth " + stem + (bona ? " - bonafide bonafide\n"
                                             : " S01 spoof spoof\n");
  }
  return manifest_text;
}

// Streams every character to two sinks; flushes both on newline so epoch
// lines appear live on the console.
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (c == traits_type::eof()) return c;
    if (a_->sputc(static_cast<char>(c)) == traits_type::eof() ||
        b_->sputc(static_cast<char>(c)) == traits_type::eof())
      return traits_type::eof();
    if (c == '\n') sync();
    return c;
  }
  int sync() override {
    const int ra = a_->pubsync();
    const int rb = b_->pubsync();
    return ra == 0 && rb == 0 ? 0 : -1;
  }

 private:
  std::streambuf* a_;
  std::streambuf* b_;
};

int cmd_train(const CliConfig& cfg_in) {
  CliConfig cfg = cfg_in;
  cfg.model.validate();
  cfg.train.validate();
  require_key(cfg.out, "paths.out");
  fs::create_directories(cfg.out);

  std::vector<Utterance> train_set, dev_set;
  if (cfg.synthetic) {
    require(cfg.synthetic_train >= 1 && cfg.synthetic_dev >= 1,
            ErrorKind::config,
            "data.synthetic_train and data.synthetic_dev must be >= 1");
    SyntheticParams params;
    params.length = cfg.model.input_length;
    params.sample_rate = static_cast<double>(cfg.model.sample_rate);
    const auto synth_dir = fs::absolute(fs::path(cfg.out) / "synth");
    fs::create_directories(synth_dir);
    const auto train_raw =
        make_synthetic_dataset(cfg.synthetic_train, cfg.synthetic_seed, params);
    const auto dev_raw = make_synthetic_dataset(cfg.synthetic_dev,
                                                cfg.synthetic_seed + 1, params);
    std::string protocol_text;
    const auto train_manifest = materialize_split(
        train_raw, synth_dir, "train", cfg.model.sample_rate, protocol_text);
    const auto dev_manifest = materialize_split(
        dev_raw, synth_dir, "dev", cfg.model.sample_rate, protocol_text);
    write_file_atomic((synth_dir / "train_manifest.txt").string(),
                      train_manifest);
    write_file_atomic((synth_dir / "dev_manifest.txt").string(), dev_manifest);
    write_file_atomic((synth_dir / "protocol.txt").string(), protocol_text);
    cfg.train_manifest = (synth_dir / "train_manifest.txt").string();
    cfg.dev_manifest = (synth_dir / "dev_manifest.txt").string();
    std::cout << "synthetic dataset written to " << synth_dir.string() << "\n";
  }
  require_key(cfg.train_manifest, "data.train_manifest");
  require_key(cfg.dev_manifest, "data.dev_manifest");
  train_set = load_manifest_utterances(cfg.train_manifest, true);
  dev_set = load_manifest_utterances(cfg.dev_manifest, true);

  std::string ckpt = cfg.checkpoint;
  if (ckpt.empty()) ckpt = (fs::path(cfg.out) / "checkpoint.bin").string();

  RawGatModelT<float> model(cfg.model);
  std::ostringstream captured;
  TeeBuf tee(std::cout.rdbuf(), captured.rdbuf());
  std::ostream log(&tee);
  const auto result =
      train_model(model, train_set, dev_set, cfg.train, ckpt, &log);
  write_file_atomic((fs::path(cfg.out) / "train.log").string(),
                    captured.str());

  if (result.aborted) {
    std::cerr << "error: training aborted on non-finite loss after "
              << result.history.size() << " epochs; last good checkpoint kept"
              << (result.best_epoch ? "" : " (none was saved)") << "\n";
    return kExitRuntime;
  }
  std::cout << "best dev loss " << result.best_dev_loss << " at epoch "
            << result.best_epoch << "; checkpoint " << ckpt << "\n";
  return kExitOk;
}

int cmd_score(const CliConfig& cfg) {
  require_key(cfg.checkpoint, "paths.checkpoint");
  require_key(cfg.manifest, "data.manifest");
  require_key(cfg.out, "paths.out");

  auto model = RawGatModelT<float>::load_checkpoint(cfg.checkpoint);

  // A checkpoint carries its own architecture; any explicitly requested
  // model key must agree with it.
  const auto stored = model.config;
  auto check = [&](const char* key, auto requested, auto in_checkpoint) {
    if (!cfg.was_assigned(key)) return;
    require(requested == in_checkpoint, ErrorKind::config,
            concat_msg("checkpoint/config mismatch on '", key, "': checkpoint '",
                       cfg.checkpoint, "' was trained with a different value"));
  };
  check("model.num_filters", cfg.model.num_filters, stored.num_filters);
  check("model.kernel_length", cfg.model.kernel_length, stored.kernel_length);
  check("model.input_length", cfg.model.input_length, stored.input_length);
  check("model.sample_rate", cfg.model.sample_rate, stored.sample_rate);
  check("model.fusion", to_string(cfg.model.fusion), to_string(stored.fusion));
  check("model.k_spec", cfg.model.k_spec, stored.k_spec);
  check("model.k_temp", cfg.model.k_temp, stored.k_temp);
  check("model.k_st", cfg.model.k_st, stored.k_st);
  check("model.use_spectral", cfg.model.use_spectral, stored.use_spectral);
  check("model.use_temporal", cfg.model.use_temporal, stored.use_temporal);
  check("model.use_pooling", cfg.model.use_pooling, stored.use_pooling);

  const auto entries = parse_manifest(cfg.manifest);
  require(!entries.empty(), ErrorKind::io,
          concat_msg("manifest '", cfg.manifest, "' lists no files"));
  std::string score_text;
  for (const auto& e : entries) {
    const auto utt = load_wav(e.path);
    const float s = score_utterance(model, utt.samples);
    char line[320];
    std::snprintf(line, sizeof(line), "%s %.6f\n", utt.id.c_str(),
                  static_cast<double>(s));
    score_text += line;
  }
  write_file_atomic(cfg.out, score_text);
  std::cout << "wrote " << entries.size() << " scores to " << cfg.out << "\n";
  return kExitOk;
}

int cmd_eval(const CliConfig& cfg, const std::string& score_path,
             std::string protocol_path) {
  if (protocol_path.empty()) protocol_path = cfg.protocol;
  require_key(protocol_path, "data.protocol");

  std::ifstream f(score_path, std::ios::binary);
  require(f.good(), ErrorKind::io,
          concat_msg("cannot open score file '", score_path, "'"));

  const auto protocol = parse_protocol(protocol_path);
  std::map<std::string, const ProtocolEntry*> by_id;
  for (const auto& e : protocol) by_id[e.utterance] = &e;

  std::vector<ScoreRecord> records;
  std::string line;
  for (int lineno = 1; std::getline(f, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string id, score_str, extra;
    is >> id >> score_str;
    require(!score_str.empty() && !(is >> extra), ErrorKind::io,
            concat_msg(score_path, ":", lineno,
                       ": expected 'id score', got '", line, "'"));
    double score = 0.0;
    try {
      size_t pos = 0;
      score = std::stod(score_str, &pos);
      require(pos == score_str.size(), ErrorKind::io, "");
    } catch (const std::exception&) {
      throw Error(ErrorKind::io,
                  concat_msg(score_path, ":", lineno, ": bad score '",
                             score_str, "'"));
    }
    const auto it = by_id.find(id);
    require(it != by_id.end(), ErrorKind::io,
            concat_msg("score id '", id, "' not found in protocol '",
                       protocol_path, "'"));
    records.push_back(
        {id, score, it->second->label(), it->second->system});
  }

  const auto rows = per_attack_report(records);
  const auto text = format_attack_report(rows);
  std::cout << text;
  if (!cfg.out.empty()) {
    write_file_atomic(cfg.out, text);
    std::cout << "report written to " << cfg.out << "\n";
  }
  return kExitOk;
}

int cmd_audit(const CliConfig& cfg) {
  cfg.model.validate();
  const auto expected = expected_trace(cfg.model);
  RawGatModelT<float> model(cfg.model);
  auto wave = TensorT<float>::zeros({1, cfg.model.input_length});
  std::vector<TraceRow> trace;
  {
    NoGradGuard ng;
    model.forward(wave, /*training=*/false, nullptr, &trace);
  }

  size_t divergent = 0;
  const size_t n = std::max(expected.size(), trace.size());
  std::printf("%-22s %-20s %-20s %s\n", "stage", "shape", "expected", "status");
  for (size_t i = 0; i < n; ++i) {
    const std::string name =
        i < expected.size() ? expected[i].name
                            : (i < trace.size() ? trace[i].name : "?");
    const std::string got =
        i < trace.size() ? shape_str(trace[i].shape) : "(missing)";
    const std::string want =
        i < expected.size() ? shape_str(expected[i].shape) : "(unexpected)";
    const bool ok = i < expected.size() && i < trace.size() &&
                    expected[i] == trace[i];
    divergent += ok ? 0 : 1;
    std::printf("%-22s %-20s %-20s %s\n", name.c_str(), got.c_str(),
                want.c_str(), ok ? "OK" : "DIVERGES");
  }
  std::printf("trainable parameters: %lld\n",
              static_cast<long long>(model.count_parameters()));
  if (divergent) {
    std::printf("%zu of %zu stages diverge\n", divergent, n);
    return kExitRuntime;
  }
  std::printf("all %zu stages match\n", n);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RawGAT-ST anti-spoofing toolkit"};
  app.require_subcommand(1);
  app.footer(key_help());

  Flags train_flags, score_flags, eval_flags, audit_flags;
  auto* train_cmd =
      app.add_subcommand("train", "train a model and write checkpoint + log");
  add_common_flags(train_cmd, train_flags);
  auto* score_cmd = app.add_subcommand(
      "score", "score a manifest of wav files with a checkpoint");
  add_common_flags(score_cmd, score_flags);
  auto* eval_cmd = app.add_subcommand(
      "eval", "pooled and per-attack EER from a score file and protocol");
  add_common_flags(eval_cmd, eval_flags);
  std::string eval_scores, eval_protocol;
  eval_cmd->add_option("scores", eval_scores, "score file ('id score' lines)")
      ->required();
  eval_cmd->add_option("protocol", eval_protocol,
                       "trial protocol (falls back to data.protocol)");
  auto* audit_cmd = app.add_subcommand(
      "audit", "print the shape trace and parameter count against "
               "the reference geometry");
  add_common_flags(audit_cmd, audit_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the message
    return kExitUsage;
  }

  auto guarded = [](auto&& fn) {
    try {
      return fn();
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return e.kind() == ErrorKind::config ? kExitUsage : kExitRuntime;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitRuntime;
    }
  };

  if (train_cmd->parsed())
    return guarded([&] { return cmd_train(build_config(train_flags)); });
  if (score_cmd->parsed())
    return guarded([&] { return cmd_score(build_config(score_flags)); });
  if (eval_cmd->parsed())
    return guarded([&] {
      return cmd_eval(build_config(eval_flags), eval_scores, eval_protocol);
    });
  return guarded([&] { return cmd_audit(build_config(audit_flags)); });
}
