#include "deform/config.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include "toml.hpp"

namespace deform {

namespace {

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : "; ") + p;
  return out;
}

// Typed access to a parsed table that records every problem instead of stopping at the first.
class Reader {
 public:
  Reader(const toml::table& root, std::vector<std::string>& problems) : root_(root), problems_(problems) {}

  template <typename Fn>
  void read(const std::string& section, const std::string& key, Fn&& apply) {
    known_[section].insert(key);
    const toml::node* node = find(section, key);
    if (node) apply(*node, section + "." + key);
  }

  void integer(const std::string& section, const std::string& key, Index& dst) {
    read(section, key, [&](const toml::node& n, const std::string& where) {
      if (auto v = n.as_integer()) dst = static_cast<Index>(v->get());
      else problems_.push_back(where + ": expected an integer");
    });
  }
  void unsigned_integer(const std::string& section, const std::string& key, std::uint64_t& dst) {
    read(section, key, [&](const toml::node& n, const std::string& where) {
      auto v = n.as_integer();
      if (v && v->get() >= 0) dst = static_cast<std::uint64_t>(v->get());
      else problems_.push_back(where + ": expected a non-negative integer");
    });
  }
  void real(const std::string& section, const std::string& key, double& dst) {
    read(section, key, [&](const toml::node& n, const std::string& where) {
      if (auto v = n.as_floating_point()) dst = v->get();
      else if (auto i = n.as_integer()) dst = static_cast<double>(i->get());
      else problems_.push_back(where + ": expected a number");
    });
  }
  void boolean(const std::string& section, const std::string& key, bool& dst) {
    read(section, key, [&](const toml::node& n, const std::string& where) {
      if (auto v = n.as_boolean()) dst = v->get();
      else problems_.push_back(where + ": expected true or false");
    });
  }
  void string(const std::string& section, const std::string& key, std::string& dst) {
    read(section, key, [&](const toml::node& n, const std::string& where) {
      if (auto v = n.as_string()) dst = v->get();
      else problems_.push_back(where + ": expected a string");
    });
  }
  void integer_list(const std::string& section, const std::string& key, std::vector<Index>& dst) {
    read(section, key, [&](const toml::node& n, const std::string& where) {
      const auto* arr = n.as_array();
      std::vector<Index> values;
      bool ok = arr != nullptr;
      if (arr)
        for (const auto& e : *arr) {
          if (auto v = e.as_integer()) values.push_back(static_cast<Index>(v->get()));
          else ok = false;
        }
      if (ok) dst = std::move(values);
      else problems_.push_back(where + ": expected a list of integers");
    });
  }

  void report_unknown() {
    for (auto&& [name, node] : root_) {
      const std::string section(name.str());
      if (!known_.count(section)) {
        problems_.push_back(section + ": unknown section");
        continue;
      }
      const auto* table = node.as_table();
      if (!table) continue;
      for (auto&& [key, value] : *table)
        if (!known_[section].count(std::string(key.str()))) problems_.push_back(section + "." + std::string(key.str()) + ": unknown key");
    }
  }

 private:
  const toml::node* find(const std::string& section, const std::string& key) {
    const toml::node* s = root_.get(section);
    if (!s) return nullptr;
    const auto* table = s->as_table();
    if (!table) {
      if (!reported_.count(section)) problems_.push_back(section + ": expected a table");
      reported_.insert(section);
      return nullptr;
    }
    return table->get(key);
  }

  const toml::table& root_;
  std::vector<std::string>& problems_;
  std::map<std::string, std::set<std::string>> known_;
  std::set<std::string> reported_;
};

void read_field(Reader& r, const std::string& name, FieldSpec& f) {
  r.real("synth", name + "_mean", f.mean);
  r.real("synth", name + "_spread", f.spread);
  Index order = f.order;
  r.integer("synth", name + "_order", order);
  f.order = static_cast<int>(order);
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : Error("invalid config: " + join(problems)), problems_(std::move(problems)) {}

std::string_view model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::transformer: return "transformer";
    case ModelKind::stgcn: return "stgcn";
    case ModelKind::linear: return "linear";
    case ModelKind::seasonal: return "seasonal";
    case ModelKind::persistence: return "persistence";
  }
  return "?";
}

bool is_learned(ModelKind k) { return k == ModelKind::transformer || k == ModelKind::stgcn; }

nlohmann::json RunConfig::model_json() const {
  const Index channels = multimodal ? kMultimodalChannels : 1;
  if (kind == ModelKind::stgcn) {
    StgcnConfig c = stgcn;
    c.input_channels = channels, c.history_length = history, c.height = height, c.width = width;
    return c.to_json();
  }
  TransformerConfig c = transformer;
  c.input_channels = channels, c.history_length = history, c.height = height, c.width = width;
  return c.to_json();
}

void RunConfig::validate(std::string_view command) const {
  std::vector<std::string> problems;
  auto check = [&](bool ok, const std::string& message) {
    if (!ok) problems.push_back(message);
  };
  check(!out.empty(), "run.out: output directory must be set");
  check(height >= 2 && width >= 2, "data.height/data.width: grid must be at least 2 x 2");
  check(train_fraction > 0.0 && train_fraction < 1.0, "data.train_fraction: must lie in (0, 1)");
  check(history >= 1, "data.history: must be positive");
  check(max_missing_fraction >= 0.0 && max_missing_fraction <= 1.0, "data.max_missing_fraction: must lie in [0, 1]");

  if (command == "synth") {
    check(synth.epochs >= 3, "synth.epochs: need at least 3 epochs");
    check(synth.cadence_days >= 1, "synth.cadence_days: must be positive");
    check(synth.noise_sigma >= 0.0, "synth.noise_sigma: must be non-negative");
    check(synth.point_count >= 3, "synth.point_count: need at least 3 points");
    check(synth.dropout >= 0.0 && synth.dropout < 1.0, "synth.dropout: must lie in [0, 1)");
    check(!synth.has_step() || (synth.event_epoch >= 0 && synth.event_epoch < synth.epochs), "synth.event_epoch: must lie inside the series");
    for (const auto* f : {&synth.velocity, &synth.amplitude, &synth.phase, &synth.step})
      if (f->order < 0 || f->spread < 0.0) {
        problems.push_back("synth: field orders and spreads must be non-negative");
        break;
      }
  }
  if (command == "ingest") {
    check(!input.empty(), "data.input: required by ingest");
    check(input.empty() || std::filesystem::exists(input), "data.input: file '" + input.string() + "' does not exist");
  }
  if (command == "train" || command == "eval") {
    check(!cube.empty(), "data.cube: required by " + std::string(command));
    check(cube.empty() || std::filesystem::exists(cube), "data.cube: file '" + cube.string() + "' does not exist");
  }
  if (command == "train" || command == "eval" || command == "transfer") {
    try {
      LossWeights::preset(loss_preset);
    } catch (const Error&) {
      problems.push_back("loss.preset: expected composite, mae_only or smoothl1_only");
    }
    try {
      train.loss.validate();
    } catch (const Error& e) {
      problems.push_back(std::string("loss: ") + e.what());
    }
    const auto& o = train.optim;
    check(o.lr > 0.0, "optim.lr: must be positive");
    check(o.beta1 >= 0.0 && o.beta1 < 1.0 && o.beta2 >= 0.0 && o.beta2 < 1.0, "optim.beta1/beta2: must lie in [0, 1)");
    check(o.eps > 0.0, "optim.eps: must be positive");
    check(o.weight_decay >= 0.0, "optim.weight_decay: must be non-negative");
    check(o.clip_norm > 0.0, "optim.clip_norm: must be positive");
    check(train.batch_size >= 1, "optim.batch_size: must be positive");
    check(train.max_steps >= 1, "optim.max_steps: must be positive");
    check(train.max_epochs >= 1, "optim.max_epochs: must be positive");
    check(train.patience >= 1, "optim.patience: must be positive");
    check(train.ema_decay >= 0.0 && train.ema_decay < 1.0, "optim.ema_decay: must lie in [0, 1)");
    check(train.holdout_fraction > 0.0 && train.holdout_fraction < 1.0, "optim.holdout_fraction: must lie in (0, 1)");
    if (is_learned(kind)) {
      try {
        if (kind == ModelKind::stgcn) StgcnConfig::from_json(model_json()).validate();
        else TransformerConfig::from_json(model_json()).validate();
      } catch (const Error& e) {
        problems.push_back(std::string("model: ") + e.what());
      }
    }
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

RunConfig parse_run_config(std::string_view text, const std::string& source) {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    throw ParseError(source + ":" + std::to_string(e.source().begin.line) + ": " + std::string(e.description()),
                     static_cast<std::size_t>(e.source().begin.line));
  }

  RunConfig c;
  std::vector<std::string> problems;
  Reader r(root, problems);

  r.string("run", "name", c.name);
  r.unsigned_integer("run", "seed", c.seed);
  r.read("run", "out", [&](const toml::node& n, const std::string& where) {
    if (auto v = n.as_string()) c.out = v->get();
    else problems.push_back(where + ": expected a string");
  });
  r.read("data", "input", [&](const toml::node& n, const std::string& where) {
    if (auto v = n.as_string()) c.input = v->get();
    else problems.push_back(where + ": expected a string");
  });
  r.read("data", "cube", [&](const toml::node& n, const std::string& where) {
    if (auto v = n.as_string()) c.cube = v->get();
    else problems.push_back(where + ": expected a string");
  });
  r.integer("data", "height", c.height);
  r.integer("data", "width", c.width);
  r.real("data", "train_fraction", c.train_fraction);
  r.integer("data", "history", c.history);
  r.real("data", "max_missing_fraction", c.max_missing_fraction);

  // The regime selects the preset that the remaining synth keys override.
  std::string regime(regime_name(c.synth.kind));
  r.string("synth", "regime", regime);
  try {
    c.synth = RegimeSpec::preset(parse_regime(regime));
  } catch (const Error& e) {
    problems.push_back(std::string("synth.regime: ") + e.what());
  }
  read_field(r, "velocity", c.synth.velocity);
  read_field(r, "amplitude", c.synth.amplitude);
  read_field(r, "phase", c.synth.phase);
  read_field(r, "step", c.synth.step);
  r.integer("synth", "event_epoch", c.synth.event_epoch);
  r.real("synth", "noise_sigma", c.synth.noise_sigma);
  r.unsigned_integer("synth", "seed", c.synth.seed);
  r.integer("synth", "epochs", c.synth.epochs);
  Index cadence = c.synth.cadence_days;
  r.integer("synth", "cadence_days", cadence);
  c.synth.cadence_days = static_cast<int>(cadence);
  r.integer("synth", "point_count", c.synth.point_count);
  r.real("synth", "dropout", c.synth.dropout);
  r.read("synth", "tile", [&](const toml::node& n, const std::string& where) {
    const auto* v = n.as_string();
    if (!v) return problems.push_back(where + ": expected a string");
    try {
      c.synth.tile = parse_tile_id(v->get());
    } catch (const Error& e) {
      problems.push_back(where + ": " + e.what());
    }
  });
  r.read("synth", "start", [&](const toml::node& n, const std::string& where) {
    const auto* v = n.as_string();
    const auto d = v ? parse_date(v->get()) : std::nullopt;
    if (d) c.synth.start = *d;
    else problems.push_back(where + ": expected a date string YYYY-MM-DD");
  });

  std::string kind(model_kind_name(c.kind));
  r.string("model", "kind", kind);
  bool kind_ok = false;
  for (ModelKind k : {ModelKind::transformer, ModelKind::stgcn, ModelKind::linear, ModelKind::seasonal, ModelKind::persistence})
    if (model_kind_name(k) == kind) c.kind = k, kind_ok = true;
  if (!kind_ok) problems.push_back("model.kind: expected transformer, stgcn, linear, seasonal or persistence");
  std::string modality = "multimodal";
  r.string("model", "modality", modality);
  if (modality == "unimodal" || modality == "multimodal") c.multimodal = modality == "multimodal";
  else problems.push_back("model.modality: expected unimodal or multimodal");
  r.integer("model", "patch_size", c.transformer.patch_size);
  r.integer("model", "embed_dim", c.transformer.embed_dim);
  r.integer("model", "layers", c.transformer.layers);
  r.integer("model", "heads", c.transformer.heads);
  r.integer("model", "ffn_multiplier", c.transformer.ffn_multiplier);
  r.real("model", "dropout", c.transformer.dropout);
  r.integer_list("model", "hidden", c.stgcn.hidden);
  r.integer("model", "kernel", c.stgcn.kernel);

  r.string("loss", "preset", c.loss_preset);
  try {
    c.train.loss = LossWeights::preset(c.loss_preset);
  } catch (const Error&) {
    problems.push_back("loss.preset: expected composite, mae_only or smoothl1_only");
  }
  r.real("loss", "lambda_rel", c.train.loss.rel);
  r.real("loss", "lambda_corr", c.train.loss.corr);
  r.real("loss", "lambda_grad", c.train.loss.grad);
  r.real("loss", "smooth_l1_beta", c.train.loss.smooth_l1_beta);

  auto& o = c.train.optim;
  r.real("optim", "lr", o.lr);
  r.real("optim", "beta1", o.beta1);
  r.real("optim", "beta2", o.beta2);
  r.real("optim", "eps", o.eps);
  r.real("optim", "weight_decay", o.weight_decay);
  r.real("optim", "clip_norm", o.clip_norm);
  r.integer("optim", "batch_size", c.train.batch_size);
  r.integer("optim", "max_steps", c.train.max_steps);
  r.integer("optim", "max_epochs", c.train.max_epochs);
  r.integer("optim", "patience", c.train.patience);
  r.real("optim", "ema_decay", c.train.ema_decay);
  r.real("optim", "holdout_fraction", c.train.holdout_fraction);

  r.report_unknown();
  if (!problems.empty()) throw ConfigError(std::move(problems));
  c.synth.height = c.height;
  c.synth.width = c.width;
  c.train.seed = c.seed;
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

}  // namespace deform
