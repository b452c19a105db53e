#include "rawgat/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rawgat/rng.hpp"

namespace rawgat {

namespace {

constexpr double kTau = 2.0 * 3.14159265358979323846;

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(static_cast<std::uint32_t>(p[0]) |
                                    (static_cast<std::uint32_t>(p[1]) << 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

Label parse_label_token(const std::string& token, const std::string& where) {
  require(token == "bonafide" || token == "spoof", ErrorKind::io,
          concat_msg(where, ": label token must be 'bonafide' or 'spoof', got '",
                     token, "'"));
  return token == "bonafide" ? Label::bona : Label::spoof;
}

}  // namespace

Utterance load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::io, concat_msg("load_wav: cannot open '", path, "'"));
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();

  require(n >= 12 && std::memcmp(p, "RIFF", 4) == 0 &&
              std::memcmp(p + 8, "WAVE", 4) == 0,
          ErrorKind::io, concat_msg("load_wav: '", path, "' is not a RIFF/WAVE file"));

  bool have_fmt = false;
  std::uint16_t audio_format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::uint32_t data_len = 0;

  std::size_t off = 12;
  while (off + 8 <= n) {
    const char* cc = bytes.data() + off;
    const std::uint32_t len = read_u32(p + off + 4);
    const std::size_t body = off + 8;
    require(body + len <= n, ErrorKind::io,
            concat_msg("load_wav: '", path, "' has a truncated chunk"));
    if (std::memcmp(cc, "fmt ", 4) == 0) {
      require(len >= 16, ErrorKind::io,
              concat_msg("load_wav: '", path, "' fmt chunk too short"));
      audio_format = read_u16(p + body + 0);
      channels = read_u16(p + body + 2);
      rate = read_u32(p + body + 4);
      bits = read_u16(p + body + 14);
      have_fmt = true;
    } else if (std::memcmp(cc, "data", 4) == 0) {
      data = p + body;
      data_len = len;
    }
    off = body + len + (len & 1);  // chunks are word-aligned
  }

  require(have_fmt, ErrorKind::io,
          concat_msg("load_wav: '", path, "' has no fmt chunk"));
  require(data != nullptr, ErrorKind::io,
          concat_msg("load_wav: '", path, "' has no data chunk"));
  require(audio_format == 1, ErrorKind::io,
          concat_msg("load_wav: '", path, "' is not linear PCM (format tag ",
                     audio_format, ")"));
  require(channels == 1, ErrorKind::io,
          concat_msg("load_wav: '", path, "' has ", channels,
                     " channels, expected mono"));
  require(rate == 16000, ErrorKind::io,
          concat_msg("load_wav: '", path, "' sample rate is ", rate,
                     " Hz, expected 16000 (resampling is not supported)"));
  require(bits == 16, ErrorKind::io,
          concat_msg("load_wav: '", path, "' has ", bits,
                     " bits per sample, expected 16"));
  require(data_len % 2 == 0, ErrorKind::io,
          concat_msg("load_wav: '", path, "' data chunk has odd byte count"));

  Utterance utt;
  utt.id = std::filesystem::path(path).stem().string();
  utt.samples.resize(data_len / 2);
  for (std::size_t i = 0; i < utt.samples.size(); ++i) {
    const auto u = read_u16(data + 2 * i);
    const auto s = static_cast<std::int16_t>(u);
    utt.samples[i] = static_cast<float>(s) / 32768.0f;
  }
  return utt;
}

void save_wav(const std::string& path, const std::vector<float>& samples,
              int sample_rate) {
  require(!samples.empty(), ErrorKind::contract, "save_wav: empty sample buffer");
  std::string out;
  out.reserve(44 + 2 * samples.size());
  const auto data_len = static_cast<std::uint32_t>(2 * samples.size());
  out += "RIFF";
  put_u32(out, 36 + data_len);
  out += "WAVE";
  out += "fmt ";
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, static_cast<std::uint32_t>(sample_rate));
  put_u32(out, static_cast<std::uint32_t>(sample_rate * 2));  // byte rate
  put_u16(out, 2);   // block align
  put_u16(out, 16);  // bits per sample
  out += "data";
  put_u32(out, data_len);
  for (float s : samples) {
    double v = std::lround(static_cast<double>(s) * 32768.0);
    v = std::min(32767.0, std::max(-32768.0, v));
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
  }

  write_file_atomic(path, out);
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(f.good(), ErrorKind::io,
            concat_msg("cannot open '", tmp, "' for writing"));
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f.good()) {
      f.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      require(false, ErrorKind::io, concat_msg("write to '", tmp, "' failed"));
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::error_code ec2;
    std::filesystem::remove(tmp, ec2);
    require(false, ErrorKind::io,
            concat_msg("cannot rename '", tmp, "' to '", path,
                       "': ", ec.message()));
  }
}

std::vector<float> fix_length(const std::vector<float>& samples,
                              std::int64_t target) {
  require(target > 0, ErrorKind::contract, "fix_length: target must be positive");
  require(!samples.empty(), ErrorKind::contract,
          "fix_length: empty sample buffer");
  const auto n = static_cast<std::int64_t>(samples.size());
  std::vector<float> out(static_cast<std::size_t>(target));
  for (std::int64_t i = 0; i < target; ++i)
    out[static_cast<std::size_t>(i)] =
        samples[static_cast<std::size_t>(i % n)];
  return out;
}

ProtocolEntry parse_protocol_line(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> fields;
  std::string tok;
  while (is >> tok) fields.push_back(tok);
  require(fields.size() == 5, ErrorKind::io,
          concat_msg("protocol line must have 5 whitespace-separated fields, got ",
                     fields.size(), ": '", line, "'"));
  ProtocolEntry entry{fields[0], fields[1], fields[2], fields[3], fields[4]};
  parse_label_token(entry.label_token, "protocol");
  return entry;
}

std::string format_protocol_line(const ProtocolEntry& entry) {
  return entry.speaker + " " + entry.utterance + " " + entry.system + " " +
         entry.key + " " + entry.label_token;
}

std::vector<ProtocolEntry> parse_protocol(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io,
          concat_msg("parse_protocol: cannot open '", path, "'"));
  std::vector<ProtocolEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      entries.push_back(parse_protocol_line(line));
    } catch (const Error& e) {
      throw Error(e.kind(),
                  concat_msg(path, ":", lineno, ": ", e.what()));
    }
  }
  return entries;
}

std::vector<ManifestEntry> parse_manifest(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io,
          concat_msg("parse_manifest: cannot open '", path, "'"));
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream is(line);
    std::vector<std::string> fields;
    std::string tok;
    while (is >> tok) fields.push_back(tok);
    if (fields.empty() || fields[0][0] == '#') continue;
    require(fields.size() <= 2, ErrorKind::io,
            concat_msg(path, ":", lineno,
                       ": manifest line must be 'path [label]', got ",
                       fields.size(), " fields"));
    ManifestEntry entry;
    entry.path = fields[0];
    if (fields.size() == 2)
      entry.label = parse_label_token(
          fields[1], concat_msg(path, ":", lineno));
    entries.push_back(entry);
  }
  return entries;
}

namespace {

// Harmonic voice-like bed shared by both classes: a handful of decaying
// harmonics on a randomized fundamental, plus one-pole low-passed noise.
std::vector<float> synth_bed(std::int64_t length, double sample_rate,
                             Rng& rng) {
  const double f0 = rng.uniform(90.0, 255.0);
  const double tone_gain = rng.uniform(0.35, 0.55);
  double phases[5];
  for (auto& ph : phases) ph = rng.uniform(0.0, kTau);

  std::vector<float> x(static_cast<std::size_t>(length), 0.0f);
  for (int h = 1; h <= 5; ++h) {
    const double w = kTau * f0 * h / sample_rate;
    if (f0 * h >= sample_rate / 2.0) break;
    const double g = tone_gain / h;
    for (std::int64_t t = 0; t < length; ++t)
      x[static_cast<std::size_t>(t)] += static_cast<float>(
          g * std::sin(w * static_cast<double>(t) + phases[h - 1]));
  }

  const double noise_gain = rng.uniform(0.015, 0.04);
  double lp = 0.0;
  for (std::int64_t t = 0; t < length; ++t) {
    lp = 0.92 * lp + rng.normal();
    x[static_cast<std::size_t>(t)] += static_cast<float>(noise_gain * lp);
  }

  float peak = 0.0f;
  for (float v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0.9f)
    for (auto& v : x) v *= 0.9f / peak;
  return x;
}

void add_artefact(std::vector<float>& x, const SyntheticParams& p, Rng& rng) {
  const auto length = static_cast<std::int64_t>(x.size());
  const auto t0 = static_cast<std::int64_t>(p.artefact_start *
                                            static_cast<double>(length));
  const auto t1 = static_cast<std::int64_t>(p.artefact_end *
                                            static_cast<double>(length));
  // Keep the burst tone comfortably inside the advertised band so a
  // band-energy detector sees all of it.
  const double margin = 0.125 * (p.artefact_high_hz - p.artefact_low_hz);
  const double fa =
      rng.uniform(p.artefact_low_hz + margin, p.artefact_high_hz - margin);
  const double w = kTau * fa / p.sample_rate;
  const double phase = rng.uniform(0.0, kTau);
  const auto ramp = std::min<std::int64_t>(64, (t1 - t0) / 4);
  for (std::int64_t t = t0; t < t1 && t < length; ++t) {
    double env = 1.0;
    if (t - t0 < ramp)
      env = static_cast<double>(t - t0 + 1) / static_cast<double>(ramp + 1);
    if (t1 - t <= ramp)
      env = std::min(env, static_cast<double>(t1 - t) /
                              static_cast<double>(ramp + 1));
    x[static_cast<std::size_t>(t)] += static_cast<float>(
        p.artefact_amplitude * env *
        std::sin(w * static_cast<double>(t) + phase));
  }
  float peak = 0.0f;
  for (float v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0.95f)
    for (auto& v : x) v *= 0.95f / peak;
}

std::string zero_pad(std::int64_t i) {
  std::string s = std::to_string(i);
  while (s.size() < 4) s.insert(s.begin(), '0');
  return s;
}

}  // namespace

std::vector<Utterance> make_synthetic_dataset(std::int64_t n_per_class,
                                              std::uint64_t seed,
                                              const SyntheticParams& params) {
  require(n_per_class >= 1, ErrorKind::contract,
          "make_synthetic_dataset: need at least one utterance per class");
  require(params.length >= 16, ErrorKind::contract,
          "make_synthetic_dataset: length too short");
  require(params.artefact_start >= 0.0 && params.artefact_end <= 1.0 &&
              params.artefact_start < params.artefact_end,
          ErrorKind::config,
          "make_synthetic_dataset: artefact interval must satisfy 0 <= start < end <= 1");
  require(params.artefact_low_hz > 0.0 &&
              params.artefact_high_hz < params.sample_rate / 2.0 &&
              params.artefact_low_hz < params.artefact_high_hz,
          ErrorKind::config,
          "make_synthetic_dataset: artefact band must sit inside (0, Nyquist)");

  const Rng root(seed);
  std::vector<Utterance> out;
  out.reserve(static_cast<std::size_t>(2 * n_per_class));
  for (std::int64_t i = 0; i < n_per_class; ++i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    Utterance utt;
    utt.id = "bona_" + zero_pad(i);
    utt.label = Label::bona;
    utt.samples = synth_bed(params.length, params.sample_rate, rng);
    out.push_back(std::move(utt));
  }
  for (std::int64_t i = 0; i < n_per_class; ++i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(1'000'000 + i));
    Utterance utt;
    utt.id = "spoof_" + zero_pad(i);
    utt.label = Label::spoof;
    utt.samples = synth_bed(params.length, params.sample_rate, rng);
    add_artefact(utt.samples, params, rng);
    out.push_back(std::move(utt));
  }
  return out;
}

}  // namespace rawgat
