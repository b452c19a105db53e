#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rawgat/common.hpp"
#include "rawgat/metrics.hpp"  // Label

namespace rawgat {

struct Utterance {
  std::string id;
  std::vector<float> samples;  // mono 16 kHz, values in [-1, 1]
  std::optional<Label> label;
};

// RIFF/WAVE reader restricted to PCM 16-bit mono 16 kHz; anything else is
// rejected with a descriptive error (never silently resampled). Samples are
// scaled by 1/32768 so the full int16 range maps into [-1, 1]. The id is the
// filename stem.
Utterance load_wav(const std::string& path);

// Writes PCM16 mono; samples are clamped to [-1, 1] and quantized with
// round-to-nearest.
void save_wav(const std::string& path, const std::vector<float>& samples,
              int sample_rate = 16000);

// Writes `bytes` to `path` via a same-directory temporary plus rename, so
// readers never observe a partial file and failures leave nothing behind.
void write_file_atomic(const std::string& path, const std::string& bytes);

// Normalizes to exactly `target` samples: longer inputs keep the head,
// shorter ones are tiled end-to-end and cut. Idempotent; empty input is an
// error.
std::vector<float> fix_length(const std::vector<float>& samples,
                              std::int64_t target = 64600);

// One line of a trial protocol: speaker, utterance, system id, key field,
// label token ("bonafide" | "spoof").
struct ProtocolEntry {
  std::string speaker;
  std::string utterance;
  std::string system;
  std::string key;
  std::string label_token;

  Label label() const {
    return label_token == "bonafide" ? Label::bona : Label::spoof;
  }
};

ProtocolEntry parse_protocol_line(const std::string& line);
std::string format_protocol_line(const ProtocolEntry& entry);
std::vector<ProtocolEntry> parse_protocol(const std::string& path);

// Dataset manifest: one wav path per line, optionally followed by a label
// token. Blank lines and lines starting with '#' are skipped.
struct ManifestEntry {
  std::string path;
  std::optional<Label> label;
};

std::vector<ManifestEntry> parse_manifest(const std::string& path);

// Knobs for the synthetic desk-scale dataset. Both classes are harmonic
// tones over pink-ish noise; the spoof class additionally carries a tone
// burst confined to a fixed frequency band and a fixed fraction of the
// utterance, which a spectro-temporal detector (or a plain band-energy
// threshold) can pick up.
struct SyntheticParams {
  std::int64_t length = 64600;     // samples per utterance
  double sample_rate = 16000.0;
  double artefact_low_hz = 2800.0;   // band start
  double artefact_high_hz = 3600.0;  // band end
  double artefact_start = 0.45;      // burst interval as utterance fractions
  double artefact_end = 0.75;
  double artefact_amplitude = 0.25;
};

// n_per_class utterances per class (bona first), deterministic per seed and
// independent of generation order.
std::vector<Utterance> make_synthetic_dataset(
    std::int64_t n_per_class, std::uint64_t seed,
    const SyntheticParams& params = {});

}  // namespace rawgat
