#include "deform/cli.hpp"

#include "deform/baselines.hpp"
#include "deform/checkpoint.hpp"
#include "deform/eval.hpp"
#include "deform/ingest.hpp"
#include "deform/raster.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>

namespace deform {

namespace fs = std::filesystem;

namespace {

void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string tile_label(const GridSpec& grid) {
  return TileId{static_cast<int>(std::floor(grid.origin_m.x() / 100000.0)),
                static_cast<int>(std::floor(grid.origin_m.y() / 100000.0))}
      .label();
}

// Target epochs of the test windows (or of every window) for a cube and history length.
std::vector<Index> forecast_epochs(const DisplacementCube& cube, const RunConfig& config, bool all_windows) {
  const Index total = cube.epochs() - config.history;
  if (total < 5)
    throw ShapeError("cube of " + std::to_string(cube.epochs()) + " epochs is too short for a history of " +
                     std::to_string(config.history));
  const Index first = all_windows ? 0 : config.split().train_windows(total);
  std::vector<Index> epochs;
  for (Index w = first; w < total; ++w) epochs.push_back(w + config.history);
  return epochs;
}

std::vector<Frame> baseline_forecast(ModelKind kind, const DisplacementCube& cube, const RunConfig& config,
                                     const std::vector<Index>& epochs) {
  switch (kind) {
    case ModelKind::linear: return fit_predict_linear(cube, config.split(), epochs);
    case ModelKind::seasonal: return fit_predict_seasonal(cube, config.split(), epochs);
    case ModelKind::persistence: return predict_persistence(cube, epochs);
    default: throw Error("not a baseline model: " + std::string(model_kind_name(kind)));
  }
}

void write_evaluation(const std::string& label, const Evaluation& e, const fs::path& dir, const std::string& stem) {
  write_metrics_json(e.metrics, dir / (stem + ".json"));
  write_metrics_csv(label, e.metrics, dir / (stem + ".csv"));
}

void record_manifest(const fs::path& out, const std::string& command, const std::vector<std::string>& args,
                     std::chrono::system_clock::time_point started) {
  const fs::path path = out / "run_manifest.json";
  nlohmann::json manifest = nlohmann::json::object();
  if (std::ifstream in(path); in) {
    try {
      manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception&) {
      manifest = nlohmann::json::object();
    }
  }
  auto stamp = [](std::chrono::system_clock::time_point t) {
    const std::time_t tt = std::chrono::system_clock::to_time_t(t);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
    return std::string(buf);
  };
  manifest[command] = {{"arguments", args}, {"started", stamp(started)}, {"finished", stamp(std::chrono::system_clock::now())}};
  write_json(manifest, path);
}

}  // namespace

void cmd_synth(const RunConfig& config) {
  config.validate("synth");
  fs::create_directories(config.out);
  const SynthTile tile = generate_tile(config.synth);
  write_l3_csv(tile.points, config.out / l3_filename(config.synth.tile));
  write_cube(tile.truth, config.out / "truth.defcube");
  const auto& s = config.synth;
  auto field = [](const FieldSpec& f) { return nlohmann::json{{"mean", f.mean}, {"spread", f.spread}, {"order", f.order}}; };
  write_json({{"regime", regime_name(s.kind)},
              {"tile", s.tile.label()},
              {"seed", s.seed},
              {"epochs", s.epochs},
              {"start", format_date_iso(s.start)},
              {"cadence_days", s.cadence_days},
              {"height", s.height},
              {"width", s.width},
              {"noise_sigma", s.noise_sigma},
              {"event_epoch", s.event_epoch},
              {"point_count", s.point_count},
              {"dropout", s.dropout},
              {"velocity", field(s.velocity)},
              {"amplitude", field(s.amplitude)},
              {"phase", field(s.phase)},
              {"step", field(s.step)}},
             config.out / "synth.json");
}

void cmd_ingest(const RunConfig& config) {
  config.validate("ingest");
  fs::create_directories(config.out);
  LoadReport load;
  PointCloudSeries series = load_l3_csv(config.input, &load);
  const FillReport fill = fill_missing(series, config.max_missing_fraction);
  const GridSpec grid = GridSpec::for_tile(series.tile, config.height, config.width);
  const TileId tile = series.tile;
  const Index points = static_cast<Index>(series.points.size());
  const DisplacementCube cube = rasterize_cube(std::move(series), grid);
  write_cube(cube, config.out / "cube.defcube");
  nlohmann::json skipped = nlohmann::json::array();
  for (const auto& issue : load.skipped) skipped.push_back({{"row", issue.row}, {"message", issue.message}});
  write_json({{"tile", tile.label()},
              {"rows_read", load.rows_read},
              {"rows_skipped", skipped},
              {"points_dropped", fill.dropped_points},
              {"cells_filled", fill.filled_cells},
              {"points_used", points},
              {"epochs", cube.epochs()}},
             config.out / "ingest_report.json");
}

void cmd_train(const RunConfig& config) {
  config.validate("train");
  fs::create_directories(config.out);
  const DisplacementCube cube = read_cube(config.cube);
  if (!is_learned(config.kind)) {
    // Closed-form baselines: record the per-pixel coefficients.
    if (config.kind == ModelKind::persistence) {
      write_json({{"kind", "persistence"}, {"parameters", 0}}, config.out / "baseline.json");
      return;
    }
    const BaselineKind kind = config.kind == ModelKind::linear ? BaselineKind::linear : BaselineKind::seasonal;
    const PixelRegression fit = fit_baseline(kind, cube, config.split());
    std::ofstream out(config.out / "baseline_coefficients.csv");
    if (!out) throw Error("cannot write baseline coefficients");
    out << "row,col";
    for (Index k = 0; k < fit.coefficients.rows(); ++k) out << ",c" << k;
    out << '\n';
    char buf[32];
    for (Index p = 0; p < fit.coefficients.cols(); ++p) {
      out << p / fit.width << ',' << p % fit.width;
      for (Index k = 0; k < fit.coefficients.rows(); ++k) {
        std::snprintf(buf, sizeof buf, "%.17g", fit.coefficients(k, p));
        out << ',' << buf;
      }
      out << '\n';
    }
    write_json({{"kind", model_kind_name(config.kind)}, {"parameters", fit.coefficients.size()}}, config.out / "baseline.json");
    return;
  }

  const FeatureBundle fb = build_features(cube, config.split(), config.history);
  auto model = make_model(config.model_json(), config.seed);
  TrainConfig tc = config.train;
  tc.seed = config.seed;
  const TrainResult result = fit(*model, fb.samples, tc);
  write_training_log(result.log, config.out / "training_log.csv");
  ModelCheckpoint ckpt = make_checkpoint(*model, fb.stats, tile_label(cube.grid), &result.best_parameters, &result.best_ema);
  ckpt.training = {{"status", train_status_name(result.status)},
                   {"steps", result.steps},
                   {"best_epoch", result.best_epoch},
                   {"best_holdout_loss", result.best_holdout_loss},
                   {"seed", config.seed},
                   {"loss_preset", config.loss_preset}};
  save_checkpoint(ckpt, config.out / "model.ckpt");
  write_json(ckpt.training, config.out / "train_summary.json");
  if (result.status == TrainStatus::diverged) throw Error("training diverged; best weights were saved");
}

void cmd_eval(const RunConfig& config, const fs::path& checkpoint) {
  config.validate("eval");
  fs::create_directories(config.out);
  const DisplacementCube cube = read_cube(config.cube);

  Evaluation test, all;
  std::string label(model_kind_name(config.kind));
  if (is_learned(config.kind)) {
    if (checkpoint.empty()) throw Error("--checkpoint is required for " + label);
    const ModelCheckpoint ckpt = load_checkpoint(checkpoint);
    label = ckpt.config.value("kind", label);
    test = evaluate_checkpoint(ckpt, cube, config.split());
    all = evaluate_checkpoint(ckpt, cube, config.split(), true);
  } else {
    const auto epochs = forecast_epochs(cube, config, false);
    test = evaluate_frames(baseline_forecast(config.kind, cube, config, epochs), cube, epochs);
    const auto every = forecast_epochs(cube, config, true);
    all = evaluate_frames(baseline_forecast(config.kind, cube, config, every), cube, every);
  }
  write_evaluation(label, test, config.out, "metrics");
  write_heatmaps(test, config.out / "heatmaps");
  if (all.epochs.size() > 21) {
    const auto diag = event_centred_diagnostics(all.pred_mm, all.truth_mm, all.epochs);
    write_diagnostics_csv(diag, config.out / "event_diagnostics.csv");
  }

  // Reference baselines on the same test epochs.
  for (ModelKind k : {ModelKind::persistence, ModelKind::linear, ModelKind::seasonal}) {
    const std::string name(model_kind_name(k));
    const auto epochs = forecast_epochs(cube, config, false);
    write_evaluation(name, evaluate_frames(baseline_forecast(k, cube, config, epochs), cube, epochs), config.out,
                     "baseline_" + name);
  }
}

void cmd_transfer(const RunConfig& config, const fs::path& checkpoint, const fs::path& target) {
  config.validate("transfer");
  if (checkpoint.empty() || !fs::exists(checkpoint)) throw Error("checkpoint '" + checkpoint.string() + "' not found");
  if (target.empty() || !fs::exists(target)) throw Error("target cube '" + target.string() + "' not found");
  fs::create_directories(config.out);
  const std::string before = file_digest(checkpoint);
  const ModelCheckpoint ckpt = load_checkpoint(checkpoint);
  const DisplacementCube cube = read_cube(target);
  const Evaluation e = cross_site_evaluate(ckpt, cube, config.split());
  const std::string label = ckpt.config.value("kind", std::string("model"));
  write_evaluation(label, e, config.out, "transfer_metrics");
  const Evaluation persistence = evaluate_frames(predict_persistence(cube, e.epochs), cube, e.epochs);
  write_evaluation("persistence", persistence, config.out, "transfer_persistence");
  const std::string after = file_digest(checkpoint);
  write_json({{"source_tile", ckpt.source_tile},
              {"target_tile", tile_label(cube.grid)},
              {"checkpoint_digest_before", before},
              {"checkpoint_digest_after", after},
              {"checkpoint_unchanged", before == after},
              {"rmse_mm", e.metrics.rmse_mm},
              {"persistence_rmse_mm", persistence.metrics.rmse_mm}},
             config.out / "transfer_summary.json");
  if (before != after) throw Error("checkpoint changed during evaluation");
}

void cmd_report(const fs::path& out, const std::vector<std::string>& metrics) {
  if (metrics.empty()) throw Error("no metrics files given");
  std::string table = metrics_csv_header() + "\n";
  for (const auto& item : metrics) {
    const auto eq = item.find('=');
    const fs::path path = eq == std::string::npos ? fs::path(item) : fs::path(item.substr(eq + 1));
    const std::string label = eq == std::string::npos ? path.stem().string() : item.substr(0, eq);
    table += metrics_csv_row(label, read_metrics_json(path)) + "\n";
  }
  fs::create_directories(out);
  std::ofstream csv(out / "comparison.csv");
  if (!csv) throw Error("cannot write " + (out / "comparison.csv").string());
  csv << table;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Ground-deformation forecasting pipeline"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  fs::path config_path, checkpoint, target, out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> metrics;

  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "TOML run configuration")->required();
    sub->add_option("--out", out, "output directory (overrides run.out)");
    sub->add_option("--seed", seed, "seed (overrides run.seed)");
    return sub;
  };
  with_config(app.add_subcommand("synth", "generate a synthetic tile"));
  with_config(app.add_subcommand("ingest", "rasterize an L3 CSV"));
  with_config(app.add_subcommand("train", "train a forecaster"));
  auto* eval = with_config(app.add_subcommand("eval", "evaluate on the test epochs"));
  eval->add_option("--checkpoint", checkpoint, "model checkpoint");
  auto* transfer = with_config(app.add_subcommand("transfer", "zero-shot evaluation on another tile"));
  transfer->add_option("--checkpoint", checkpoint, "source checkpoint")->required();
  transfer->add_option("--target", target, "target cube")->required();
  auto* report = app.add_subcommand("report", "combine metrics files into one table");
  report->add_option("--out", out, "output directory")->required();
  report->add_option("metrics", metrics, "metrics JSON files, optionally label=path")->required();

  const auto started = std::chrono::system_clock::now();
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  }

  std::vector<std::string> args(argv + 1, argv + argc);
  std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "report") {
      cmd_report(out, metrics);
      record_manifest(out, command, args, started);
      return 0;
    }
    RunConfig config = load_run_config(config_path);
    if (!out.empty()) config.out = out;
    if (seed) config.seed = *seed, config.train.seed = *seed;
    if (command == "synth") cmd_synth(config);
    else if (command == "ingest") cmd_ingest(config);
    else if (command == "train") cmd_train(config);
    else if (command == "eval") cmd_eval(config, checkpoint);
    else if (command == "transfer") cmd_transfer(config, checkpoint, target);
    record_manifest(config.out, command, args, started);
    return 0;
  } catch (const ConfigError& e) {
    std::string line = "error: config: ";
    for (std::size_t i = 0; i < e.problems().size(); ++i) line += (i ? "; " : "") + e.problems()[i];
    std::cerr << line << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::string message = e.what();
    for (char& ch : message)
      if (ch == '\n' || ch == '\r') ch = ' ';
    std::cerr << "error: " << command << ": " << message << '\n';
    return 1;
  }
}

}  // namespace deform
