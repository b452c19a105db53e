#pragma once

#include <string>
#include <vector>

#include "rawgat/model.hpp"
#include "rawgat/train.hpp"

namespace rawgat {

// One accepted configuration key: name, value-type label, one-line doc.
// The help text is generated from this table, so it always enumerates every
// key the parser accepts.
struct ConfigKeyDoc {
  const char* key;
  const char* type;
  const char* doc;
};

// A "key = value" pair read from a config file, in file order.
struct ConfigLine {
  std::string key;
  std::string value;
};

// Parses flat key=value text with dotted key names. '#' starts a comment,
// blank lines are skipped, and malformed lines raise errors carrying 1-based
// line numbers.
std::vector<ConfigLine> parse_config_text(const std::string& text);

// Aggregated tool configuration: model and optimizer hyperparameters plus
// dataset and output paths. Values are applied key by key — file first, then
// flag overrides — with every value validated on entry and unknown keys
// rejected by name.
struct CliConfig {
  ModelConfig model;
  TrainConfig train;

  bool synthetic = false;              // data.synthetic
  std::int64_t synthetic_train = 100;  // utterances per class
  std::int64_t synthetic_dev = 40;
  std::uint64_t synthetic_seed = 20260825;
  std::string train_manifest;  // data.train_manifest
  std::string dev_manifest;    // data.dev_manifest
  std::string manifest;        // data.manifest (scoring input list)
  std::string protocol;        // data.protocol (label join for eval)
  std::string checkpoint;      // paths.checkpoint
  std::string out;             // paths.out

  // Keys explicitly assigned so far (file or flag), used to distinguish "left
  // at default" from "requested" when cross-checking against a checkpoint.
  std::vector<std::string> assigned;

  bool was_assigned(const std::string& key) const;

  // Sets one key. Throws a config error naming the key for unknown names or
  // unparsable values.
  void apply(const std::string& key, const std::string& value);

  // Reads a config file and applies every line in order.
  void load_file(const std::string& path);

  static const std::vector<ConfigKeyDoc>& key_docs();
};

}  // namespace rawgat
