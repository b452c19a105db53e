#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "rawgat/cli_config.hpp"

using namespace rawgat;
using doctest::Contains;

TEST_CASE("config text parses dotted keys with comments and blanks") {
  const std::string text =
      "# experiment settings\n"
      "\n"
      "model.input_length = 2315\n"
      "train.lr=0.001   # inline comment\n"
      "  data.manifest =  lists/score.txt  \n";
  auto lines = parse_config_text(text);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0].key == "model.input_length");
  CHECK(lines[0].value == "2315");
  CHECK(lines[1].key == "train.lr");
  CHECK(lines[1].value == "0.001");
  CHECK(lines[2].key == "data.manifest");
  CHECK(lines[2].value == "lists/score.txt");
}

TEST_CASE("config text rejects malformed lines with their line number") {
  CHECK_THROWS_WITH_AS(parse_config_text("a=1\nnonsense\n"),
                       Contains("line 2"), Error);
  CHECK_THROWS_WITH_AS(parse_config_text("\n\n = 5\n"), Contains("line 3"),
                       Error);
}

TEST_CASE("typed keys parse and update the right fields") {
  CliConfig c;
  c.apply("model.input_length", "2315");
  c.apply("model.fusion", "concat");
  c.apply("model.use_pooling", "false");
  c.apply("model.seed", "42");
  c.apply("train.lr", "0.0005");
  c.apply("train.epochs", "3");
  c.apply("data.synthetic", "1");
  c.apply("paths.out", "/tmp/run");

  CHECK(c.model.input_length == 2315);
  CHECK(c.model.fusion == FusionMode::concat);
  CHECK_FALSE(c.model.use_pooling);
  CHECK(c.model.seed == 42);
  CHECK(c.train.lr == doctest::Approx(0.0005));
  CHECK(c.train.epochs == 3);
  CHECK(c.synthetic);
  CHECK(c.out == "/tmp/run");

  CHECK(c.was_assigned("model.fusion"));
  CHECK_FALSE(c.was_assigned("model.k_spec"));
}

TEST_CASE("unknown keys and bad values are rejected by name") {
  CliConfig c;
  CHECK_THROWS_WITH_AS(c.apply("model.frobnicate", "1"),
                       Contains("model.frobnicate"), Error);
  CHECK_THROWS_WITH_AS(c.apply("model.input_length", "abc"),
                       Contains("model.input_length"), Error);
  CHECK_THROWS_WITH_AS(c.apply("model.input_length", "12x"),
                       Contains("integer"), Error);
  CHECK_THROWS_WITH_AS(c.apply("model.seed", "-3"), Contains("model.seed"),
                       Error);
  CHECK_THROWS_WITH_AS(c.apply("train.lr", "fast"), Contains("train.lr"),
                       Error);
  CHECK_THROWS_WITH_AS(c.apply("model.use_spectral", "maybe"),
                       Contains("true/false"), Error);
  CHECK_THROWS_WITH_AS(c.apply("model.fusion", "average"),
                       Contains("add, mul or concat"), Error);
  for (const auto& err : {"config", "unknown"}) (void)err;
  try {
    c.apply("nonsense.key", "1");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
  }
}

TEST_CASE("every documented key is accepted by the parser") {
  CliConfig c;
  for (const auto& doc : CliConfig::key_docs()) {
    const std::string type = doc.type;
    std::string sample;
    if (type == "int")
      sample = "3";
    else if (type == "uint")
      sample = "7";
    else if (type == "float")
      sample = "0.5";
    else if (type == "bool")
      sample = "true";
    else if (type == "add|mul|concat")
      sample = "mul";
    else if (type == "path")
      sample = "some/where";
    else
      FAIL("unhandled doc type ", type, " for key ", doc.key);
    CAPTURE(doc.key);
    CHECK_NOTHROW(c.apply(doc.key, sample));
    CHECK(c.was_assigned(doc.key));
  }
}

TEST_CASE("config files apply in order so later lines win") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "rawgat_config_tests";
  fs::create_directories(dir);
  const auto path = (dir / "a.cfg").string();
  {
    std::ofstream f(path, std::ios::trunc);
    f << "train.epochs = 5\n"
      << "train.epochs = 9\n";
  }
  CliConfig c;
  c.load_file(path);
  CHECK(c.train.epochs == 9);
  // assignment is recorded once per key
  CHECK(std::count(c.assigned.begin(), c.assigned.end(),
                   std::string("train.epochs")) == 1);

  CliConfig d;
  CHECK_THROWS_WITH_AS(d.load_file((dir / "missing.cfg").string()),
                       Contains("missing.cfg"), Error);
  fs::remove_all(dir);
}
