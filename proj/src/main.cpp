// Command-line front end: dataset synthesis, the individual pipeline stages,
// the full teacher/student loop, evaluation, and plot-data emission.
//
// Exit codes are a stable scripting contract:
//   0  success
//   1  usage error (bad flags, missing required option, unknown subcommand)
//   2  data or configuration problem (bad files, bad config values)
//   3  internal invariant violation (always a bug worth reporting)

#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "iterseg/dataset.hpp"
#include "iterseg/errors.hpp"
#include "iterseg/image.hpp"
#include "iterseg/metrics.hpp"
#include "iterseg/model.hpp"
#include "iterseg/orchestrator.hpp"
#include "iterseg/panoptic.hpp"
#include "iterseg/parallel.hpp"
#include "iterseg/rng.hpp"
#include "iterseg/textcfg.hpp"
#include "iterseg/tta.hpp"

namespace fs = std::filesystem;

namespace iterseg::cli {

using orchestrator::ExperimentConfig;

// ---------------------------------------------------------------------------
// Shared plumbing

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return text.str();
}

std::pair<std::string, std::string> split_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like key=value: " + kv);
  return {textcfg::trim(kv.substr(0, eq)), textcfg::trim(kv.substr(eq + 1))};
}

// Experiment config assembled from an optional file plus --set overrides.
ExperimentConfig resolve_config(const std::string& config_path,
                                const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  if (!config_path.empty()) cfg = ExperimentConfig::load(config_path);
  for (const std::string& kv : overrides) {
    const auto [key, value] = split_override(kv);
    cfg.set(key, value);
  }
  cfg.validate();
  return cfg;
}

tta::AugSpec aug_from(const ExperimentConfig& cfg) {
  tta::AugSpec aug;
  if (cfg.use_tta) {
    aug.scales = cfg.tta_scales;
    aug.flip = cfg.tta_flip;
  } else {
    aug.scales = {1.0};
    aug.flip = false;
  }
  return aug;
}

// ---------------------------------------------------------------------------
// synth

void synth_set(dataset::SynthConfig& cfg, const std::string& key,
               const std::string& value) {
  using textcfg::parse_double;
  using textcfg::parse_ll;
  using textcfg::parse_u64;
  if (key == "sequences")
    cfg.sequences = static_cast<int>(parse_ll(value, key));
  else if (key == "val_sequences")
    cfg.val_sequences = static_cast<int>(parse_ll(value, key));
  else if (key == "frames_per_sequence")
    cfg.frames_per_sequence = static_cast<int>(parse_ll(value, key));
  else if (key == "labeled_frame")
    cfg.labeled_frame = static_cast<int>(parse_ll(value, key));
  else if (key == "rows")
    cfg.rows = static_cast<int>(parse_ll(value, key));
  else if (key == "cols")
    cfg.cols = static_cast<int>(parse_ll(value, key));
  else if (key == "min_things")
    cfg.min_things = static_cast<int>(parse_ll(value, key));
  else if (key == "max_things")
    cfg.max_things = static_cast<int>(parse_ll(value, key));
  else if (key == "min_radius")
    cfg.min_radius = parse_double(value, key);
  else if (key == "max_radius")
    cfg.max_radius = parse_double(value, key);
  else if (key == "motion_speed")
    cfg.motion_speed = parse_double(value, key);
  else if (key == "ego_car_fraction")
    cfg.ego_car_fraction = parse_double(value, key);
  else if (key == "pixel_noise")
    cfg.pixel_noise = parse_double(value, key);
  else if (key == "seed")
    cfg.seed = parse_u64(value, key);
  else
    throw ConfigError("unknown synth config key: " + key);
}

std::string synth_serialize(const dataset::SynthConfig& cfg) {
  using textcfg::fmt_double;
  std::ostringstream out;
  out << "sequences=" << cfg.sequences << '\n'
      << "val_sequences=" << cfg.val_sequences << '\n'
      << "frames_per_sequence=" << cfg.frames_per_sequence << '\n'
      << "labeled_frame=" << cfg.labeled_frame << '\n'
      << "rows=" << cfg.rows << '\n'
      << "cols=" << cfg.cols << '\n'
      << "min_things=" << cfg.min_things << '\n'
      << "max_things=" << cfg.max_things << '\n'
      << "min_radius=" << fmt_double(cfg.min_radius) << '\n'
      << "max_radius=" << fmt_double(cfg.max_radius) << '\n'
      << "motion_speed=" << fmt_double(cfg.motion_speed) << '\n'
      << "ego_car_fraction=" << fmt_double(cfg.ego_car_fraction) << '\n'
      << "pixel_noise=" << fmt_double(cfg.pixel_noise) << '\n'
      << "seed=" << cfg.seed << '\n';
  return out.str();
}

dataset::SynthConfig parse_synth_config(const std::string& text) {
  dataset::SynthConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::string stripped = textcfg::trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError("bad synth config line: " + line);
    synth_set(cfg, textcfg::trim(stripped.substr(0, eq)),
              textcfg::trim(stripped.substr(eq + 1)));
  }
  return cfg;
}

int cmd_synth(const std::string& config_path, const std::string& out_dir,
              const std::vector<std::string>& overrides,
              std::optional<std::uint64_t> seed) {
  dataset::SynthConfig cfg;
  if (!config_path.empty()) cfg = parse_synth_config(read_text(config_path));
  for (const std::string& kv : overrides) {
    const auto [key, value] = split_override(kv);
    synth_set(cfg, key, value);
  }
  if (seed) cfg.seed = *seed;
  cfg.validate();
  const dataset::Manifest m = dataset::synth_generate(cfg, out_dir);
  write_text(fs::path(out_dir) / "config.txt", synth_serialize(cfg));
  std::cout << "dataset: " << m.frames.size() << " frames in "
            << (cfg.sequences + cfg.val_sequences) << " sequences -> "
            << out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

std::vector<model::TrainSample> labeled_samples(
    const dataset::Manifest& manifest, const std::string& split) {
  std::vector<model::TrainSample> out;
  for (std::size_t i : manifest.frames_in_split(split)) {
    const dataset::FrameRecord& f = manifest.frames[i];
    if (!f.has_label()) continue;
    model::TrainSample s;
    s.image = load_ppm(manifest.resolve(f.image_path));
    s.labels = load_lmap(manifest.resolve(f.label_path));
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<model::TrainSample> stored_label_samples(
    const dataset::Manifest& manifest, const std::string& split,
    const fs::path& labels_dir) {
  std::vector<model::TrainSample> out;
  for (std::size_t i : manifest.frames_in_split(split)) {
    const dataset::FrameRecord& f = manifest.frames[i];
    model::TrainSample s;
    s.image = load_ppm(manifest.resolve(f.image_path));
    s.labels = load_lmap(labels_dir / (f.frame_key() + ".lmap"));
    out.push_back(std::move(s));
  }
  return out;
}

int cmd_train(const std::string& manifest_path, const std::string& out_dir,
              const std::string& config_path,
              const std::vector<std::string>& overrides, std::uint64_t seed,
              const std::string& split, double fraction,
              const std::string& init_from, bool finetune,
              const std::string& labels_dir, double enlarge, int jobs) {
  ExperimentConfig cfg = resolve_config(config_path, overrides);
  dataset::Manifest manifest = dataset::load_manifest(manifest_path);
  if (fraction < 1.0)
    manifest = dataset::sample_fraction(
        manifest, split, dataset::SampleKind::kLabeledImages, fraction,
        Rng(seed).derive("labeled-fraction").seed());

  std::vector<model::TrainSample> data;
  std::string data_tag;
  if (!labels_dir.empty()) {
    data = stored_label_samples(manifest, split, labels_dir);
    data_tag = fs::path(labels_dir).filename().string();
    if (data_tag.empty()) data_tag = labels_dir;
  } else {
    data = labeled_samples(manifest, split);
    data_tag = split;
  }
  if (data.empty()) throw ConfigError("no training data in split " + split);

  model::Checkpoint out_ckpt;
  if (!init_from.empty()) {
    const model::Checkpoint init = model::load_checkpoint(init_from);
    if (enlarge != 1.0)
      throw ConfigError("--enlarge cannot be combined with --init-from");
    if (finetune) {
      out_ckpt = model::finetune(init, data, manifest.classes, cfg.finetune,
                                 "finetune-cli data=" + data_tag, jobs);
    } else {
      model::LearnerConfig lc = init.config;
      lc.seed = Rng(seed).derive("train").seed();
      out_ckpt = model::train(data, lc, manifest.classes, &init,
                              "train-cli data=" + data_tag, jobs);
    }
  } else {
    if (finetune) throw ConfigError("--finetune needs --init-from");
    model::LearnerConfig lc = cfg.learner;
    lc.class_count = manifest.classes.count();
    if (enlarge != 1.0) lc = model::enlarge(lc, enlarge);
    // The plain profile reproduces the experiment loop's supervised teacher
    // byte for byte at the same seed.
    lc.seed = Rng(seed).derive("teacher").seed();
    out_ckpt = model::train(data, lc, manifest.classes, nullptr,
                            "teacher-it0 data=" + data_tag, jobs);
  }

  fs::create_directories(out_dir);
  model::save_checkpoint(fs::path(out_dir) / "model.nsck", out_ckpt);
  write_text(fs::path(out_dir) / "config.txt", cfg.serialize());
  std::cout << "model: " << out_ckpt.params.size() << " parameters, "
            << data.size() << " samples -> " << out_dir << "/model.nsck\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pseudo-label

int cmd_pseudo_label(const std::string& manifest_path,
                     const std::string& checkpoint_path,
                     const std::string& out_dir,
                     const std::string& config_path,
                     const std::vector<std::string>& overrides,
                     const std::string& split, double fraction,
                     std::uint64_t seed, bool no_tta, bool no_ego, int jobs) {
  ExperimentConfig cfg = resolve_config(config_path, overrides);
  if (no_tta) cfg.use_tta = false;
  if (no_ego) cfg.use_ego_void = false;

  dataset::Manifest manifest = dataset::load_manifest(manifest_path);
  if (fraction < 1.0)
    manifest = dataset::sample_fraction(
        manifest, split, dataset::SampleKind::kSequences, fraction,
        Rng(seed).derive("pseudo-scope").seed());
  const model::Checkpoint ckpt = model::load_checkpoint(checkpoint_path);

  std::vector<std::size_t> scope;
  for (std::size_t i : manifest.frames_in_split(split))
    if (!manifest.frames[i].has_label()) scope.push_back(i);
  if (scope.empty())
    throw ConfigError("split " + split + " has no unlabeled frames");

  const tta::AugSpec aug = aug_from(cfg);
  const fs::path out_root(out_dir);
  for (std::size_t i : scope)
    fs::create_directories(
        (out_root / (manifest.frames[i].frame_key() + ".lmap")).parent_path());

  std::vector<PanopticMap> maps(scope.size());
  parallel_for(jobs, scope.size(), [&](std::size_t s) {
    const dataset::FrameRecord& f = manifest.frames[scope[s]];
    const Image image = load_ppm(manifest.resolve(f.image_path));
    GridU8 ego;
    const GridU8* ego_ptr = nullptr;
    if (cfg.use_ego_void && f.has_ego_void()) {
      ego = load_evmk(manifest.resolve(f.ego_void_path));
      ego_ptr = &ego;
    }
    maps[s] = tta::pseudo_label(image, ckpt, manifest.classes, aug,
                                cfg.postproc, ego_ptr)
                  .map;
  });
  for (std::size_t s = 0; s < scope.size(); ++s)
    save_lmap(out_root / (manifest.frames[scope[s]].frame_key() + ".lmap"),
              maps[s]);
  write_text(out_root / "config.txt", cfg.serialize());
  std::cout << "pseudo-labels: " << scope.size() << " frames ("
            << aug.pass_count() << (aug.pass_count() == 1 ? " pass" : " passes")
            << " each) -> " << out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const std::string& manifest_path,
             const std::string& checkpoint_path, const std::string& pred_dir,
             const std::string& config_path,
             const std::vector<std::string>& overrides,
             const std::string& split, bool use_tta,
             const std::string& out_dir) {
  ExperimentConfig cfg = resolve_config(config_path, overrides);
  const dataset::Manifest manifest = dataset::load_manifest(manifest_path);
  if (checkpoint_path.empty() == pred_dir.empty())
    throw ConfigError("eval needs exactly one of --checkpoint or --pred-dir");

  metrics::MetricReport report;
  if (!pred_dir.empty()) {
    report = metrics::evaluate_stored(manifest, split, pred_dir);
  } else {
    const model::Checkpoint ckpt = model::load_checkpoint(checkpoint_path);
    tta::AugSpec aug;
    aug.scales = cfg.tta_scales;
    aug.flip = cfg.tta_flip;
    report = metrics::evaluate_split(manifest, split, ckpt, cfg.postproc,
                                     use_tta ? &aug : nullptr);
  }
  std::cout << report.text();
  if (!out_dir.empty()) {
    write_text(fs::path(out_dir) / "report.txt", report.text());
    write_text(fs::path(out_dir) / "config.txt", cfg.serialize());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// iterate

int cmd_iterate(const std::string& manifest_path, const std::string& out_dir,
                const std::string& config_path,
                const std::vector<std::string>& overrides, std::uint64_t seed,
                bool no_tta, bool no_ego, const std::string& enlarge,
                std::optional<double> fraction, int jobs) {
  ExperimentConfig cfg = resolve_config(config_path, overrides);
  cfg.seed = seed;
  if (no_tta) cfg.use_tta = false;
  if (no_ego) cfg.use_ego_void = false;
  if (!enlarge.empty())
    cfg.enlarge_factors = textcfg::parse_double_list(enlarge, "--enlarge");
  if (fraction) cfg.labeled_fraction = *fraction;
  cfg.validate();

  const dataset::Manifest manifest = dataset::load_manifest(manifest_path);
  const orchestrator::IterationState state =
      orchestrator::run_experiment(cfg, manifest, out_dir, jobs);
  for (const auto& [iteration, report] : state.history)
    std::cout << "iteration " << iteration << ": pq="
              << textcfg::fmt_double(report.pq)
              << " ap=" << textcfg::fmt_double(report.ap)
              << " miou=" << textcfg::fmt_double(report.miou) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report

struct HistoryRow {
  std::string iteration;
  std::string split;
  std::string pq;
  std::string ap;
  std::string miou;
};

std::vector<HistoryRow> parse_history(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line))
    throw FormatError("history file is empty");
  if (textcfg::trim(line) != metrics::MetricReport::csv_header())
    throw FormatError("history header must be " +
                      metrics::MetricReport::csv_header());
  std::vector<HistoryRow> rows;
  while (std::getline(in, line)) {
    const std::string stripped = textcfg::trim(line);
    if (stripped.empty()) continue;
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = stripped.find(',', pos);
      fields.push_back(stripped.substr(pos, comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (fields.size() != 5)
      throw FormatError("history row needs 5 fields: " + line);
    rows.push_back({fields[0], fields[1], fields[2], fields[3], fields[4]});
  }
  if (rows.empty()) throw FormatError("history file has no rows");
  return rows;
}

int cmd_report(const std::string& history_path, const std::string& out_dir) {
  const std::vector<HistoryRow> rows = parse_history(read_text(history_path));

  const auto plot_csv = [&](const std::string& metric,
                            std::string HistoryRow::*field) {
    std::string csv = "iteration," + metric + "\n";
    for (const HistoryRow& r : rows) csv += r.iteration + "," + r.*field + "\n";
    write_text(fs::path(out_dir) / (metric + ".csv"), csv);
  };
  plot_csv("pq", &HistoryRow::pq);
  plot_csv("ap", &HistoryRow::ap);
  plot_csv("miou", &HistoryRow::miou);

  std::ostringstream summary;
  summary << "iteration  split      pq        ap        miou\n";
  for (const HistoryRow& r : rows) {
    summary << r.iteration;
    for (std::size_t i = r.iteration.size(); i < 11; ++i) summary << ' ';
    summary << r.split;
    for (std::size_t i = r.split.size(); i < 11; ++i) summary << ' ';
    summary << r.pq;
    for (std::size_t i = r.pq.size(); i < 10; ++i) summary << ' ';
    summary << r.ap;
    for (std::size_t i = r.ap.size(); i < 10; ++i) summary << ' ';
    summary << r.miou << '\n';
  }
  write_text(fs::path(out_dir) / "summary.txt", summary.str());
  std::cout << summary.str();
  return 0;
}

// ---------------------------------------------------------------------------
// argument wiring

int run(int argc, char** argv) {
  CLI::App app{"Iterative semi-supervised panoptic segmentation pipeline"};
  app.require_subcommand(1);

  std::string config_path, manifest_path, out_dir, checkpoint_path;
  std::string pred_dir, init_from, labels_dir, enlarge_list, history_path;
  // Subcommands must not share one variable through default_val: CLI11
  // assigns defaults at registration, so the last one would win globally.
  std::string train_split = "train-fine";
  std::string pseudo_split = "train-sequence";
  std::string eval_split = "val-fine";
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  double fraction = 1.0;
  double enlarge_factor = 1.0;
  int jobs = 1;
  bool no_tta = false, no_ego = false, finetune = false, use_tta = false;
  bool seed_given = false, fraction_given = false;

  const auto add_common = [&](CLI::App* sub, bool needs_seed) {
    sub->add_option("--config", config_path, "key=value config file");
    sub->add_option("--set", overrides,
                    "override one config key (key=value, repeatable)");
    auto* s = sub->add_option("--seed", seed, "random seed");
    if (needs_seed) s->required();
    return s;
  };

  CLI::App* synth = app.add_subcommand("synth", "render the video benchmark");
  add_common(synth, false)->each([&](const std::string&) { seed_given = true; });
  synth->add_option("--out", out_dir, "dataset directory")->required();

  CLI::App* train = app.add_subcommand("train", "train one model on a split");
  add_common(train, true);
  train->add_option("--manifest", manifest_path, "dataset manifest")
      ->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--split", train_split, "training split");
  train->add_option("--fraction", fraction,
                    "labeled fraction of the split to keep");
  train->add_option("--init-from", init_from, "checkpoint to start from");
  train->add_flag("--finetune", finetune,
                  "reduced schedule continuing --init-from");
  train->add_option("--enlarge", enlarge_factor,
                    "capacity growth factor (fresh models only)");
  train->add_option("--labels-dir", labels_dir,
                    "train on stored label maps instead of manifest labels");
  train->add_option("--jobs", jobs, "worker threads");

  CLI::App* pseudo =
      app.add_subcommand("pseudo-label", "label a split with a checkpoint");
  add_common(pseudo, false);
  pseudo->add_option("--manifest", manifest_path, "dataset manifest")
      ->required();
  pseudo->add_option("--checkpoint", checkpoint_path, "teacher checkpoint")
      ->required();
  pseudo->add_option("--out", out_dir, "label map output directory")
      ->required();
  pseudo->add_option("--split", pseudo_split, "split to label");
  pseudo->add_option("--fraction", fraction, "fraction of sequences to keep");
  pseudo->add_flag("--no-tta", no_tta, "single forward pass per frame");
  pseudo->add_flag("--no-ego-void", no_ego, "ignore ego masks");
  pseudo->add_option("--jobs", jobs, "worker threads");

  CLI::App* eval_cmd =
      app.add_subcommand("eval", "score a checkpoint or stored predictions");
  add_common(eval_cmd, false);
  eval_cmd->add_option("--manifest", manifest_path, "dataset manifest")
      ->required();
  eval_cmd->add_option("--checkpoint", checkpoint_path,
                       "checkpoint to evaluate");
  eval_cmd->add_option("--pred-dir", pred_dir, "stored prediction directory");
  eval_cmd->add_option("--split", eval_split, "evaluation split");
  eval_cmd->add_flag("--tta", use_tta, "fuse augmented passes");
  eval_cmd->add_option("--out", out_dir, "where to write the report");

  CLI::App* iterate =
      app.add_subcommand("iterate", "run the full teacher/student loop");
  add_common(iterate, true);
  iterate->add_option("--manifest", manifest_path, "dataset manifest")
      ->required();
  iterate->add_option("--out", out_dir, "experiment directory")->required();
  iterate->add_flag("--no-tta", no_tta, "single-pass pseudo-labels");
  iterate->add_flag("--no-ego-void", no_ego, "skip ego mask propagation");
  iterate->add_option("--enlarge", enlarge_list,
                      "per-round capacity factors, comma separated");
  iterate->add_option("--fraction", fraction, "labeled fraction")
      ->each([&](const std::string&) { fraction_given = true; });
  iterate->add_option("--jobs", jobs, "worker threads");

  CLI::App* report =
      app.add_subcommand("report", "turn history.csv into plot data");
  report->add_option("--history", history_path, "history.csv path")
      ->required();
  report->add_option("--out", out_dir, "report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed())
      return cmd_synth(config_path, out_dir, overrides,
                       seed_given ? std::optional<std::uint64_t>(seed)
                                  : std::nullopt);
    if (train->parsed())
      return cmd_train(manifest_path, out_dir, config_path, overrides, seed,
                       train_split, fraction, init_from, finetune, labels_dir,
                       enlarge_factor, jobs);
    if (pseudo->parsed())
      return cmd_pseudo_label(manifest_path, checkpoint_path, out_dir,
                              config_path, overrides, pseudo_split, fraction,
                              seed, no_tta, no_ego, jobs);
    if (eval_cmd->parsed())
      return cmd_eval(manifest_path, checkpoint_path, pred_dir, config_path,
                      overrides, eval_split, use_tta, out_dir);
    if (iterate->parsed())
      return cmd_iterate(manifest_path, out_dir, config_path, overrides, seed,
                         no_tta, no_ego, enlarge_list,
                         fraction_given ? std::optional<double>(fraction)
                                        : std::nullopt,
                         jobs);
    if (report->parsed()) return cmd_report(history_path, out_dir);
    std::cerr << "no subcommand\n";
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  } catch (const ShapeError& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace iterseg::cli

int main(int argc, char** argv) { return iterseg::cli::run(argc, argv); }
