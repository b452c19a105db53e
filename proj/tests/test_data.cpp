#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "rawgat/data.hpp"
#include "rawgat/metrics.hpp"
#include "rawgat/rng.hpp"

using rawgat::fix_length;
using rawgat::Label;
using rawgat::load_wav;
using rawgat::make_synthetic_dataset;
using rawgat::ManifestEntry;
using rawgat::parse_manifest;
using rawgat::parse_protocol;
using rawgat::parse_protocol_line;
using rawgat::ProtocolEntry;
using rawgat::Rng;
using rawgat::save_wav;
using rawgat::SyntheticParams;
using rawgat::Utterance;

namespace {

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "rawgat_data_tests";
  std::filesystem::create_directories(dir);
  return dir;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  f << text;
}

// Minimal WAV writer with controllable header fields, for rejection tests.
void write_wav_raw(const std::filesystem::path& path, std::uint16_t format,
                   std::uint16_t channels, std::uint32_t rate,
                   std::uint16_t bits, const std::vector<std::int16_t>& pcm) {
  std::string out;
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  auto u16 = [&](std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  const auto data_len = static_cast<std::uint32_t>(2 * pcm.size());
  out += "RIFF";
  u32(36 + data_len);
  out += "WAVE";
  out += "fmt ";
  u32(16);
  u16(format);
  u16(channels);
  u32(rate);
  u32(rate * 2 * channels);
  u16(static_cast<std::uint16_t>(2 * channels));
  u16(bits);
  out += "data";
  u32(data_len);
  for (std::int16_t s : pcm) u16(static_cast<std::uint16_t>(s));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

}  // namespace

TEST_CASE("fix_length: truncation, identity, tiling, idempotence") {
  Rng rng(5);
  std::vector<float> x30k(30000);
  for (auto& v : x30k) v = static_cast<float>(rng.uniform(-1.0, 1.0));

  SUBCASE("longer input keeps the head") {
    std::vector<float> x(100000);
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] = static_cast<float>(i % 997);
    const auto y = fix_length(x);
    REQUIRE(y.size() == 64600);
    for (std::size_t i : {std::size_t{0}, std::size_t{1}, std::size_t{64599}})
      CHECK(y[i] == x[i]);
  }
  SUBCASE("exact length is untouched") {
    std::vector<float> x(64600, 0.25f);
    x[123] = -0.5f;
    CHECK(fix_length(x) == x);
  }
  SUBCASE("short input tiles end-to-end") {
    const auto y = fix_length(x30k);
    REQUIRE(y.size() == 64600);
    for (std::size_t i = 0; i < 30000; ++i) {
      CHECK(y[i] == x30k[i]);
      if (i + 30000 < 64600) CHECK(y[i + 30000] == x30k[i]);
    }
    for (std::size_t i = 0; i < 4600; ++i) CHECK(y[60000 + i] == x30k[i]);
  }
  SUBCASE("idempotent") {
    const auto once = fix_length(x30k);
    CHECK(fix_length(once) == once);
  }
  SUBCASE("small target") {
    const std::vector<float> x{1.0f, 2.0f, 3.0f};
    const std::vector<float> want{1.0f, 2.0f, 3.0f, 1.0f, 2.0f, 3.0f, 1.0f};
    CHECK(fix_length(x, 7) == want);
  }
  SUBCASE("empty input rejected") {
    CHECK_THROWS_AS(fix_length({}), rawgat::Error);
  }
}

TEST_CASE("wav: write-then-read round trip within quantization") {
  const auto dir = temp_dir();
  const auto path = (dir / "roundtrip_utt.wav").string();
  Rng rng(99);
  std::vector<float> x(4321);
  for (auto& v : x) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  save_wav(path, x);
  const Utterance utt = load_wav(path);
  CHECK(utt.id == "roundtrip_utt");
  CHECK_FALSE(utt.label.has_value());
  REQUIRE(utt.samples.size() == x.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(utt.samples[i]) -
                                     static_cast<double>(x[i])));
  CHECK(worst <= 0.5 / 32768.0 + 1e-9);
}

TEST_CASE("wav: full-scale and zero samples decode to the documented values") {
  const auto dir = temp_dir();
  const auto path = (dir / "scale.wav").string();
  write_wav_raw(path, 1, 1, 16000, 16, {32767, 0, -32768, -1});
  const auto utt = load_wav(path);
  REQUIRE(utt.samples.size() == 4);
  CHECK(utt.samples[0] == doctest::Approx(1.0).epsilon(1e-4));  // 32767/32768
  CHECK(utt.samples[1] == 0.0f);
  CHECK(utt.samples[2] == -1.0f);
  CHECK(utt.samples[3] == doctest::Approx(-1.0 / 32768.0));
}

TEST_CASE("wav: unsupported files are rejected with a reason") {
  const auto dir = temp_dir();
  const std::vector<std::int16_t> pcm{0, 100, -100};

  auto expect_error = [&](const std::string& name, std::uint16_t fmt,
                          std::uint16_t ch, std::uint32_t rate,
                          std::uint16_t bits, const char* needle) {
    const auto path = (dir / name).string();
    write_wav_raw(path, fmt, ch, rate, bits, pcm);
    CHECK_THROWS_WITH_AS(load_wav(path), doctest::Contains(needle),
                         rawgat::Error);
  };

  expect_error("stereo.wav", 1, 2, 16000, 16, "channels");
  expect_error("rate.wav", 1, 1, 8000, 16, "16000");
  expect_error("float.wav", 3, 1, 16000, 16, "PCM");
  expect_error("bits.wav", 1, 1, 16000, 8, "bits");

  const auto garbage = (dir / "garbage.wav").string();
  write_text(garbage, "this is not audio");
  CHECK_THROWS_WITH_AS(load_wav(garbage), doctest::Contains("RIFF"),
                       rawgat::Error);
  CHECK_THROWS_AS(load_wav((dir / "missing.wav").string()), rawgat::Error);
}

TEST_CASE("protocol: parse, format, and round trip") {
  const std::string line = "LA_0079 LA_T_1138215 - - bonafide";
  const ProtocolEntry e = parse_protocol_line(line);
  CHECK(e.speaker == "LA_0079");
  CHECK(e.utterance == "LA_T_1138215");
  CHECK(e.system == "-");
  CHECK(e.key == "-");
  CHECK(e.label() == Label::bona);
  CHECK(rawgat::format_protocol_line(e) == line);

  const ProtocolEntry spoofed =
      parse_protocol_line("LA_0080\tLA_E_001\tA07\t-\tspoof");
  CHECK(spoofed.system == "A07");
  CHECK(spoofed.label() == Label::spoof);

  CHECK_THROWS_WITH_AS(parse_protocol_line("a b c d"), doctest::Contains("5"),
                       rawgat::Error);
  CHECK_THROWS_WITH_AS(parse_protocol_line("a b c d bonafid"),
                       doctest::Contains("bonafid"), rawgat::Error);
}

TEST_CASE("protocol: file parsing skips blanks and reports line numbers") {
  const auto dir = temp_dir();
  const auto good = dir / "protocol_good.txt";
  write_text(good,
             "LA_0001 utt_a - - bonafide\n"
             "\n"
             "LA_0002 utt_b A01 - spoof\n");
  const auto entries = parse_protocol(good.string());
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].utterance == "utt_a");
  CHECK(entries[1].system == "A01");

  const auto bad = dir / "protocol_bad.txt";
  write_text(bad,
             "LA_0001 utt_a - - bonafide\n"
             "LA_0002 utt_b A01 spoof\n");
  CHECK_THROWS_WITH_AS(parse_protocol(bad.string()), doctest::Contains(":2:"),
                       rawgat::Error);
}

TEST_CASE("manifest: paths with optional labels, comments skipped") {
  const auto dir = temp_dir();
  const auto path = dir / "manifest.txt";
  write_text(path,
             "# dataset listing\n"
             "clips/a.wav bonafide\n"
             "clips/b.wav spoof\n"
             "\n"
             "clips/c.wav\n");
  const auto entries = parse_manifest(path.string());
  REQUIRE(entries.size() == 3);
  CHECK(entries[0].path == "clips/a.wav");
  REQUIRE(entries[0].label.has_value());
  CHECK(*entries[0].label == Label::bona);
  CHECK(*entries[1].label == Label::spoof);
  CHECK_FALSE(entries[2].label.has_value());

  const auto bad = dir / "manifest_bad.txt";
  write_text(bad, "clips/a.wav bonafide extra\n");
  CHECK_THROWS_WITH_AS(parse_manifest(bad.string()),
                       doctest::Contains("manifest line"), rawgat::Error);
  const auto bad_label = dir / "manifest_badlabel.txt";
  write_text(bad_label, "clips/a.wav real\n");
  CHECK_THROWS_WITH_AS(parse_manifest(bad_label.string()),
                       doctest::Contains("real"), rawgat::Error);
}

TEST_CASE("synthetic dataset: determinism, priors, and shape") {
  SyntheticParams params;
  params.length = 2315;
  const auto a = make_synthetic_dataset(7, 7, params);
  const auto b = make_synthetic_dataset(7, 7, params);
  REQUIRE(a.size() == 14);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    REQUIRE(a[i].samples.size() == 2315);
    CHECK(std::memcmp(a[i].samples.data(), b[i].samples.data(),
                      a[i].samples.size() * sizeof(float)) == 0);
  }
  int bona = 0, spoof = 0;
  for (const auto& u : a) {
    REQUIRE(u.label.has_value());
    (*u.label == Label::bona ? bona : spoof) += 1;
    for (float v : u.samples) {
      CHECK(std::isfinite(v));
      CHECK(std::abs(v) <= 1.0f);
    }
  }
  CHECK(bona == 7);
  CHECK(spoof == 7);
  CHECK(a[0].id == "bona_0000");
  CHECK(a[7].id == "spoof_0000");

  const auto c = make_synthetic_dataset(7, 8, params);
  CHECK(std::memcmp(a[0].samples.data(), c[0].samples.data(),
                    a[0].samples.size() * sizeof(float)) != 0);
  CHECK_THROWS_AS(make_synthetic_dataset(0, 1, params), rawgat::Error);
}

TEST_CASE("synthetic dataset: band-energy threshold separates the classes") {
  SyntheticParams params;
  params.length = 2315;
  const auto data = make_synthetic_dataset(40, 20260825, params);

  // Direct DFT probes across the artefact band; the detector scores the
  // fraction of signal energy that falls there. This sanity oracle must
  // separate the classes before any training result can be trusted.
  auto band_fraction = [&](const std::vector<float>& x) {
    double total = 1e-12;
    for (float v : x) total += static_cast<double>(v) * v;
    double band = 0.0;
    // Probe pitch must be finer than the DFT main-lobe width (sr/N ~ 7 Hz
    // at this length) scaled to the burst duration, or a narrowband tone
    // can fall between probes.
    for (double f = 2800.0; f <= 3600.0; f += 15.0) {
      const double w = 2.0 * 3.14159265358979323846 * f / params.sample_rate;
      double re = 0.0, im = 0.0;
      for (std::size_t t = 0; t < x.size(); ++t) {
        re += x[t] * std::cos(w * static_cast<double>(t));
        im += x[t] * std::sin(w * static_cast<double>(t));
      }
      band += (re * re + im * im) / static_cast<double>(x.size());
    }
    return band / total;
  };

  std::vector<rawgat::ScoreRecord> records;
  for (const auto& u : data)
    records.push_back({u.id, -band_fraction(u.samples), *u.label,
                       *u.label == Label::spoof ? "S01" : "-"});
  const auto res = rawgat::compute_eer(records);
  CHECK(res.eer < 0.05);
}
