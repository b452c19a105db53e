#include "rawgat/cli_config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "rawgat/graph.hpp"

namespace rawgat {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::int64_t parse_i64(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    require(pos == value.size(), ErrorKind::config, "");
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::config,
                concat_msg("config key '", key, "': expected an integer, got '",
                           value, "'"));
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    require(value.empty() || value[0] != '-', ErrorKind::config, "");
    size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    require(pos == value.size(), ErrorKind::config, "");
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::config,
                concat_msg("config key '", key,
                           "': expected a non-negative integer, got '", value,
                           "'"));
  }
}

double parse_f64(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const double v = std::stod(value, &pos);
    require(pos == value.size() && std::isfinite(v), ErrorKind::config, "");
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::config,
                concat_msg("config key '", key,
                           "': expected a finite number, got '", value, "'"));
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw Error(ErrorKind::config,
              concat_msg("config key '", key,
                         "': expected true/false/1/0, got '", value, "'"));
}

FusionMode parse_fusion_value(const std::string& key,
                              const std::string& value) {
  try {
    return parse_fusion(value);
  } catch (const Error&) {
    throw Error(ErrorKind::config,
                concat_msg("config key '", key,
                           "': expected add, mul or concat, got '", value,
                           "'"));
  }
}

}  // namespace

std::vector<ConfigLine> parse_config_text(const std::string& text) {
  std::vector<ConfigLine> lines;
  std::istringstream is(text);
  std::string raw;
  for (int lineno = 1; std::getline(is, raw); ++lineno) {
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::config,
            concat_msg("config line ", lineno, ": expected key = value, got '",
                       line, "'"));
    ConfigLine kv{trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
    require(!kv.key.empty(), ErrorKind::config,
            concat_msg("config line ", lineno, ": empty key"));
    lines.push_back(std::move(kv));
  }
  return lines;
}

bool CliConfig::was_assigned(const std::string& key) const {
  return std::find(assigned.begin(), assigned.end(), key) != assigned.end();
}

void CliConfig::apply(const std::string& key, const std::string& value) {
  if (key == "model.num_filters")
    model.num_filters = parse_i64(key, value);
  else if (key == "model.kernel_length")
    model.kernel_length = parse_i64(key, value);
  else if (key == "model.input_length")
    model.input_length = parse_i64(key, value);
  else if (key == "model.sample_rate")
    model.sample_rate = parse_i64(key, value);
  else if (key == "model.fusion")
    model.fusion = parse_fusion_value(key, value);
  else if (key == "model.k_spec")
    model.k_spec = parse_f64(key, value);
  else if (key == "model.k_temp")
    model.k_temp = parse_f64(key, value);
  else if (key == "model.k_st")
    model.k_st = parse_f64(key, value);
  else if (key == "model.use_spectral")
    model.use_spectral = parse_bool(key, value);
  else if (key == "model.use_temporal")
    model.use_temporal = parse_bool(key, value);
  else if (key == "model.use_pooling")
    model.use_pooling = parse_bool(key, value);
  else if (key == "model.f_mask")
    model.f_mask = parse_i64(key, value);
  else if (key == "model.seed")
    model.seed = parse_u64(key, value);
  else if (key == "train.lr")
    train.lr = parse_f64(key, value);
  else if (key == "train.batch_size")
    train.batch_size = parse_i64(key, value);
  else if (key == "train.epochs")
    train.epochs = parse_i64(key, value);
  else if (key == "train.w_bona")
    train.w_bona = parse_f64(key, value);
  else if (key == "train.w_spoof")
    train.w_spoof = parse_f64(key, value);
  else if (key == "data.synthetic")
    synthetic = parse_bool(key, value);
  else if (key == "data.synthetic_train")
    synthetic_train = parse_i64(key, value);
  else if (key == "data.synthetic_dev")
    synthetic_dev = parse_i64(key, value);
  else if (key == "data.synthetic_seed")
    synthetic_seed = parse_u64(key, value);
  else if (key == "data.train_manifest")
    train_manifest = value;
  else if (key == "data.dev_manifest")
    dev_manifest = value;
  else if (key == "data.manifest")
    manifest = value;
  else if (key == "data.protocol")
    protocol = value;
  else if (key == "paths.checkpoint")
    checkpoint = value;
  else if (key == "paths.out")
    out = value;
  else
    throw Error(ErrorKind::config,
                concat_msg("unknown config key '", key, "'"));
  if (!was_assigned(key)) assigned.push_back(key);
}

void CliConfig::load_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorKind::config,
          concat_msg("cannot open config file '", path, "'"));
  std::ostringstream buf;
  buf << f.rdbuf();
  for (const auto& kv : parse_config_text(buf.str())) apply(kv.key, kv.value);
}

const std::vector<ConfigKeyDoc>& CliConfig::key_docs() {
  static const std::vector<ConfigKeyDoc> docs = {
      {"model.num_filters", "int", "sinc filterbank size (default 70)"},
      {"model.kernel_length", "int", "sinc filter taps (default 129)"},
      {"model.input_length", "int",
       "fixed segment length in samples (default 64600)"},
      {"model.sample_rate", "int", "expected wav sample rate (default 16000)"},
      {"model.fusion", "add|mul|concat",
       "branch fusion mode (default mul)"},
      {"model.k_spec", "float",
       "spectral pooling keep ratio in (0, 1] (default 0.64)"},
      {"model.k_temp", "float",
       "temporal pooling keep ratio in (0, 1] (default 0.81)"},
      {"model.k_st", "float",
       "spectro-temporal pooling keep ratio in (0, 1] (default 0.64)"},
      {"model.use_spectral", "bool", "enable the spectral branch"},
      {"model.use_temporal", "bool", "enable the temporal branch"},
      {"model.use_pooling", "bool", "enable graph pooling"},
      {"model.f_mask", "int",
       "max masked sinc channels during training (default 14)"},
      {"model.seed", "uint", "init and training seed (default 1)"},
      {"train.lr", "float", "Adam learning rate (default 0.0001)"},
      {"train.batch_size", "int", "mini-batch size (default 10)"},
      {"train.epochs", "int", "training epochs (default 50)"},
      {"train.w_bona", "float", "bona fide class weight (default 9)"},
      {"train.w_spoof", "float", "spoof class weight (default 1)"},
      {"data.synthetic", "bool",
       "generate the synthetic dataset under paths.out instead of reading "
       "manifests"},
      {"data.synthetic_train", "int",
       "synthetic training utterances per class (default 100)"},
      {"data.synthetic_dev", "int",
       "synthetic dev utterances per class (default 40)"},
      {"data.synthetic_seed", "uint", "synthetic data seed"},
      {"data.train_manifest", "path",
       "training list: wav path and label per line"},
      {"data.dev_manifest", "path", "validation list, same format"},
      {"data.manifest", "path", "scoring list: wav path per line"},
      {"data.protocol", "path",
       "trial protocol for eval (speaker utterance system key label)"},
      {"paths.checkpoint", "path", "model checkpoint to read or write"},
      {"paths.out", "path", "output file or directory for the subcommand"},
  };
  return docs;
}

}  // namespace rawgat
