#include "doctest.h"

#include "deform/config.hpp"
#include "support.hpp"

#include <algorithm>

using namespace deform;

namespace {

bool has_problem(const ConfigError& e, const std::string& text) {
  return std::any_of(e.problems().begin(), e.problems().end(),
                     [&](const std::string& p) { return p.find(text) != std::string::npos; });
}

ConfigError config_error(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const ConfigError& e) {
    return e;
  }
  FAIL("expected a ConfigError");
  return ConfigError({});
}

ConfigError validate_error(const RunConfig& c, const std::string& command) {
  try {
    c.validate(command);
  } catch (const ConfigError& e) {
    return e;
  }
  FAIL("expected a ConfigError");
  return ConfigError({});
}

}  // namespace

TEST_CASE("defaults and overrides") {
  const RunConfig d = parse_run_config("");
  CHECK(d.kind == ModelKind::transformer);
  CHECK(d.multimodal);
  CHECK(d.history == 16);
  CHECK(d.synth.kind == Regime::mixed);

  const RunConfig c = parse_run_config(R"(
[run]
name = "x"
seed = 9
out = "somewhere"
[data]
height = 32
width = 16
history = 8
train_fraction = 0.75
[synth]
regime = "coseismic"
event_epoch = 90
velocity_mean = -1
[model]
kind = "stgcn"
modality = "unimodal"
hidden = [8, 4]
kernel = 2
[loss]
preset = "mae_only"
[optim]
lr = 0.002
batch_size = 2
)");
  CHECK(c.name == "x");
  CHECK(c.seed == 9);
  CHECK(c.train.seed == 9);
  CHECK(c.out == "somewhere");
  CHECK(c.synth.kind == Regime::coseismic);
  CHECK(c.synth.event_epoch == 90);
  CHECK(c.synth.velocity.mean == -1.0);
  CHECK(c.synth.step.mean == RegimeSpec::preset(Regime::coseismic).step.mean);
  CHECK(c.synth.height == 32);
  CHECK(c.synth.width == 16);
  CHECK(c.kind == ModelKind::stgcn);
  CHECK_FALSE(c.multimodal);
  CHECK(c.stgcn.hidden == std::vector<Index>{8, 4});
  CHECK(c.train.loss.rel == 0.0);
  CHECK(c.train.optim.lr == 0.002);
  CHECK(c.split().train_fraction == 0.75);

  const auto j = c.model_json();
  CHECK(j.at("kind") == "stgcn");
  CHECK(j.at("input_channels") == 1);
  CHECK(j.at("history_length") == 8);
  CHECK(j.at("height") == 32);
}

TEST_CASE("unknown keys, unknown sections and type errors are reported together") {
  const ConfigError e = config_error(R"(
[data]
height = "tall"
colour = 3
[model]
kind = "lstm"
modality = "both"
hidden = [1, "x"]
[extras]
a = 1
[optim]
lr = "fast"
)");
  CHECK(has_problem(e, "data.height: expected an integer"));
  CHECK(has_problem(e, "data.colour: unknown key"));
  CHECK(has_problem(e, "model.kind: expected transformer"));
  CHECK(has_problem(e, "model.modality: expected unimodal or multimodal"));
  CHECK(has_problem(e, "model.hidden: expected a list of integers"));
  CHECK(has_problem(e, "extras: unknown section"));
  CHECK(has_problem(e, "optim.lr: expected a number"));
  CHECK(e.problems().size() == 7);
  CHECK(std::string(e.what()).rfind("invalid config: ", 0) == 0);
}

TEST_CASE("value errors in individual keys") {
  CHECK(has_problem(config_error("[synth]\nregime = \"flood\"\n"), "synth.regime"));
  CHECK(has_problem(config_error("[synth]\nstart = \"2020-13-01\"\n"), "synth.start"));
  CHECK(has_problem(config_error("[synth]\ntile = \"Q1\"\n"), "synth.tile"));
  CHECK(has_problem(config_error("[run]\nseed = -1\n"), "run.seed: expected a non-negative integer"));
  CHECK(has_problem(config_error("[loss]\npreset = \"l2\"\n"), "loss.preset"));
  CHECK(has_problem(config_error("data = 3\n"), "data: expected a table"));
}

TEST_CASE("toml syntax errors carry the line") {
  try {
    parse_run_config("[run]\nname = \"a\"\nseed = = 3\n", "cfg.toml");
    FAIL("expected a ParseError");
  } catch (const ParseError& e) {
    CHECK(e.position() == 3);
    CHECK(std::string(e.what()).rfind("cfg.toml:3:", 0) == 0);
  }
}

TEST_CASE("command validation lists every violation") {
  RunConfig c;
  c.train_fraction = 1.5;
  c.history = 0;
  c.train.optim.lr = 0.0;
  c.train.batch_size = 0;
  c.train.loss.corr = -1.0;
  c.transformer.heads = 3;  // 64 is not divisible by 3
  const ConfigError e = validate_error(c, "train");
  CHECK(has_problem(e, "data.train_fraction"));
  CHECK(has_problem(e, "data.history"));
  CHECK(has_problem(e, "data.cube: required by train"));
  CHECK(has_problem(e, "optim.lr"));
  CHECK(has_problem(e, "optim.batch_size"));
  CHECK(has_problem(e, "loss: "));
  CHECK(has_problem(e, "model: "));

  RunConfig s;
  s.synth.epochs = 2;
  s.synth.dropout = 1.0;
  s.synth.velocity.spread = -1.0;
  const ConfigError se = validate_error(s, "synth");
  CHECK(has_problem(se, "synth.epochs"));
  CHECK(has_problem(se, "synth.dropout"));
  CHECK(has_problem(se, "field orders and spreads"));
  CHECK_NOTHROW(RunConfig{}.validate("synth"));

  RunConfig i;
  i.input = "/nonexistent/file.csv";
  CHECK(has_problem(validate_error(i, "ingest"), "does not exist"));
}

TEST_CASE("config files") {
  testing::TempDir dir("cfg");
  testing::write_text(dir / "a.toml", "[run]\nname = \"from-file\"\n");
  CHECK(load_run_config(dir / "a.toml").name == "from-file");
  CHECK_THROWS_AS(load_run_config(dir / "missing.toml"), Error);
}
