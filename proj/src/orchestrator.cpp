#include "iterseg/orchestrator.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "iterseg/errors.hpp"
#include "iterseg/image.hpp"
#include "iterseg/parallel.hpp"
#include "iterseg/rng.hpp"
#include "iterseg/textcfg.hpp"
#include "iterseg/tta.hpp"

namespace iterseg::orchestrator {

namespace fs = std::filesystem;

using textcfg::fmt_double;
using textcfg::fmt_double_list;
using textcfg::parse_bool;
using textcfg::parse_double;
using textcfg::parse_double_list;
using textcfg::parse_ll;
using textcfg::parse_u64;
using textcfg::trim;

std::string_view to_string(SplitPolicy policy) {
  switch (policy) {
    case SplitPolicy::kPseudoOnly: return "pseudo-only";
    case SplitPolicy::kLabeledOnly: return "labeled-only";
    case SplitPolicy::kMixed: return "mixed";
  }
  throw ContractError("unhandled split policy");
}

SplitPolicy split_policy_from(std::string_view name) {
  if (name == "pseudo-only") return SplitPolicy::kPseudoOnly;
  if (name == "labeled-only") return SplitPolicy::kLabeledOnly;
  if (name == "mixed") return SplitPolicy::kMixed;
  throw ConfigError("unknown split_policy: " + std::string(name));
}

double ExperimentConfig::enlarge_factor_for(int iteration) const {
  const std::size_t i = static_cast<std::size_t>(iteration - 1);
  return i < enlarge_factors.size() ? enlarge_factors[i] : 1.0;
}

void ExperimentConfig::validate() const {
  if (iterations < 1) throw ConfigError("iterations must be at least 1");
  if (!(labeled_fraction >= 0.0) || labeled_fraction > 1.0)
    throw ConfigError("labeled_fraction must be in [0, 1]");
  if (!(pseudo_fraction >= 0.0) || pseudo_fraction > 1.0)
    throw ConfigError("pseudo_fraction must be in [0, 1]");
  for (double f : enlarge_factors)
    if (!(f >= 1.0)) throw ConfigError("enlarge factors must be at least 1");
  if (train_split.empty() || unlabeled_split.empty() || eval_split.empty())
    throw ConfigError("split names must be nonempty");
  if (train_split == eval_split)
    throw ConfigError("train_split and eval_split must differ");
  tta::AugSpec aug;
  aug.scales = tta_scales;
  aug.flip = tta_flip;
  aug.validate();
  if (!(finetune.steps_fraction >= 0.0) || !(finetune.lr_fraction > 0.0))
    throw ConfigError("finetune fractions must be positive");
  // class_count is filled in from the manifest at run time; stand in a
  // placeholder so the remaining learner fields still get checked.
  model::LearnerConfig lc = learner;
  if (lc.class_count == 0) lc.class_count = 1;
  lc.validate();
  postproc.validate();
}

std::string ExperimentConfig::serialize() const {
  std::ostringstream out;
  out << "iterations=" << iterations << '\n'
      << "seed=" << seed << '\n'
      << "split_policy=" << to_string(split_policy) << '\n'
      << "enlarge_factors=" << fmt_double_list(enlarge_factors) << '\n'
      << "init_student_from_previous="
      << (init_student_from_previous ? "true" : "false") << '\n'
      << "use_tta=" << (use_tta ? "true" : "false") << '\n'
      << "use_ego_void=" << (use_ego_void ? "true" : "false") << '\n'
      << "labeled_fraction=" << fmt_double(labeled_fraction) << '\n'
      << "pseudo_fraction=" << fmt_double(pseudo_fraction) << '\n'
      << "train_split=" << train_split << '\n'
      << "unlabeled_split=" << unlabeled_split << '\n'
      << "eval_split=" << eval_split << '\n'
      << "teacher_uses_val=" << (teacher_uses_val ? "true" : "false") << '\n'
      << "tta_scales=" << fmt_double_list(tta_scales) << '\n'
      << "tta_flip=" << (tta_flip ? "true" : "false") << '\n'
      << "finetune_steps_fraction=" << fmt_double(finetune.steps_fraction)
      << '\n'
      << "finetune_lr_fraction=" << fmt_double(finetune.lr_fraction) << '\n'
      << "learner.capacity=" << learner.capacity << '\n'
      << "learner.depth=" << learner.depth << '\n'
      << "learner.survival_prob=" << fmt_double(learner.survival_prob) << '\n'
      << "learner.lambda_semantic=" << fmt_double(learner.lambda_semantic)
      << '\n'
      << "learner.lambda_center=" << fmt_double(learner.lambda_center) << '\n'
      << "learner.lambda_offset=" << fmt_double(learner.lambda_offset) << '\n'
      << "learner.optimizer=" << learner.optimizer << '\n'
      << "learner.base_lr=" << fmt_double(learner.base_lr) << '\n'
      << "learner.poly_power=" << fmt_double(learner.poly_power) << '\n'
      << "learner.steps=" << learner.steps << '\n'
      << "learner.batch_size=" << learner.batch_size << '\n'
      << "learner.flip_augment=" << (learner.flip_augment ? "true" : "false")
      << '\n'
      << "learner.scale_augment_min=" << fmt_double(learner.scale_augment_min)
      << '\n'
      << "learner.scale_augment_max=" << fmt_double(learner.scale_augment_max)
      << '\n'
      << "postproc.center_threshold=" << fmt_double(postproc.center_threshold)
      << '\n'
      << "postproc.nms_window=" << postproc.nms_window << '\n'
      << "postproc.max_centers=" << postproc.max_centers << '\n'
      << "postproc.stuff_area_threshold=" << postproc.stuff_area_threshold
      << '\n'
      << "postproc.reference_rows=" << postproc.reference_rows << '\n'
      << "postproc.reference_cols=" << postproc.reference_cols << '\n';
  return out.str();
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  if (key == "iterations") {
    iterations = static_cast<int>(parse_ll(value, key));
  } else if (key == "seed") {
    seed = parse_u64(value, key);
  } else if (key == "split_policy") {
    split_policy = split_policy_from(value);
  } else if (key == "enlarge_factors") {
    enlarge_factors = parse_double_list(value, key);
  } else if (key == "init_student_from_previous") {
    init_student_from_previous = parse_bool(value, key);
  } else if (key == "use_tta") {
    use_tta = parse_bool(value, key);
  } else if (key == "use_ego_void") {
    use_ego_void = parse_bool(value, key);
  } else if (key == "labeled_fraction") {
    labeled_fraction = parse_double(value, key);
  } else if (key == "pseudo_fraction") {
    pseudo_fraction = parse_double(value, key);
  } else if (key == "train_split") {
    train_split = value;
  } else if (key == "unlabeled_split") {
    unlabeled_split = value;
  } else if (key == "eval_split") {
    eval_split = value;
  } else if (key == "teacher_uses_val") {
    teacher_uses_val = parse_bool(value, key);
  } else if (key == "tta_scales") {
    tta_scales = parse_double_list(value, key);
  } else if (key == "tta_flip") {
    tta_flip = parse_bool(value, key);
  } else if (key == "finetune_steps_fraction") {
    finetune.steps_fraction = parse_double(value, key);
  } else if (key == "finetune_lr_fraction") {
    finetune.lr_fraction = parse_double(value, key);
  } else if (key == "learner.capacity") {
    learner.capacity = static_cast<int>(parse_ll(value, key));
  } else if (key == "learner.depth") {
    learner.depth = static_cast<int>(parse_ll(value, key));
  } else if (key == "learner.survival_prob") {
    learner.survival_prob = parse_double(value, key);
  } else if (key == "learner.lambda_semantic") {
    learner.lambda_semantic = parse_double(value, key);
  } else if (key == "learner.lambda_center") {
    learner.lambda_center = parse_double(value, key);
  } else if (key == "learner.lambda_offset") {
    learner.lambda_offset = parse_double(value, key);
  } else if (key == "learner.optimizer") {
    learner.optimizer = value;
  } else if (key == "learner.base_lr") {
    learner.base_lr = parse_double(value, key);
  } else if (key == "learner.poly_power") {
    learner.poly_power = parse_double(value, key);
  } else if (key == "learner.steps") {
    learner.steps = static_cast<int>(parse_ll(value, key));
  } else if (key == "learner.batch_size") {
    learner.batch_size = static_cast<int>(parse_ll(value, key));
  } else if (key == "learner.flip_augment") {
    learner.flip_augment = parse_bool(value, key);
  } else if (key == "learner.scale_augment_min") {
    learner.scale_augment_min = parse_double(value, key);
  } else if (key == "learner.scale_augment_max") {
    learner.scale_augment_max = parse_double(value, key);
  } else if (key == "postproc.center_threshold") {
    postproc.center_threshold = parse_double(value, key);
  } else if (key == "postproc.nms_window") {
    postproc.nms_window = static_cast<int>(parse_ll(value, key));
  } else if (key == "postproc.max_centers") {
    postproc.max_centers = static_cast<int>(parse_ll(value, key));
  } else if (key == "postproc.stuff_area_threshold") {
    postproc.stuff_area_threshold =
        static_cast<std::int64_t>(parse_ll(value, key));
  } else if (key == "postproc.reference_rows") {
    postproc.reference_rows = static_cast<int>(parse_ll(value, key));
  } else if (key == "postproc.reference_cols") {
    postproc.reference_cols = static_cast<int>(parse_ll(value, key));
  } else {
    throw ConfigError("unknown experiment config key: " + key);
  }
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError("bad experiment config line: " + line);
    cfg.set(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open experiment config: " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse(text.str());
}

fs::path ExperimentPaths::teacher_checkpoint() const {
  return checkpoint_dir() / "teacher-it0.nsck";
}

fs::path ExperimentPaths::student_checkpoint(int iteration) const {
  return checkpoint_dir() / ("student-it" + std::to_string(iteration) + ".nsck");
}

fs::path ExperimentPaths::pseudo_dir(int iteration) const {
  return root / "pseudo" / ("v" + std::to_string(iteration));
}

std::string history_to_csv(
    const std::vector<std::pair<int, metrics::MetricReport>>& history) {
  std::string out = metrics::MetricReport::csv_header() + "\n";
  for (const auto& [iteration, report] : history)
    out += report.csv_row(iteration) + "\n";
  return out;
}

namespace {

// Indices of the split's frames that carry a label.
std::vector<std::size_t> labeled_frames(const dataset::Manifest& manifest,
                                        std::string_view split) {
  std::vector<std::size_t> out;
  for (std::size_t i : manifest.frames_in_split(split))
    if (manifest.frames[i].has_label()) out.push_back(i);
  return out;
}

std::vector<model::TrainSample> load_samples(
    const dataset::Manifest& manifest, const std::vector<std::size_t>& idx) {
  std::vector<model::TrainSample> out(idx.size());
  for (std::size_t s = 0; s < idx.size(); ++s) {
    const dataset::FrameRecord& f = manifest.frames[idx[s]];
    out[s].image = load_ppm(manifest.resolve(f.image_path));
    out[s].labels = load_lmap(manifest.resolve(f.label_path));
  }
  return out;
}

// The Step 2 settings that shape pseudo-label generation, recorded into the
// student's provenance so ablation runs are distinguishable from their
// artifacts alone.
std::string describe_step2(const ExperimentConfig& config) {
  std::string out = "tta=";
  out += config.use_tta
             ? fmt_double_list(config.tta_scales) +
                   (config.tta_flip ? "+flip" : "")
             : "off";
  out += config.use_ego_void ? " ego=on" : " ego=off";
  return out;
}

}  // namespace

IterationState run_iteration(IterationState state,
                             const ExperimentConfig& config,
                             const dataset::Manifest& manifest,
                             const ExperimentPaths& paths, int jobs) {
  config.validate();
  const int k = state.iteration + 1;
  const ClassTable& classes = manifest.classes;
  const Rng root(config.seed);

  const std::vector<std::size_t> labeled =
      labeled_frames(manifest, config.train_split);
  if (labeled.empty())
    throw ConfigError("split " + config.train_split + " has no labeled frames");
  const std::vector<model::TrainSample> labeled_samples =
      load_samples(manifest, labeled);

  // Step 2: pseudo-label every unlabeled frame in scope with the teacher.
  std::vector<model::TrainSample> pseudo_samples;
  std::string step2 = "step2=skipped";
  if (config.split_policy != SplitPolicy::kLabeledOnly) {
    dataset::Manifest scoped = manifest;
    if (config.pseudo_fraction < 1.0)
      scoped = dataset::sample_fraction(
          manifest, config.unlabeled_split, dataset::SampleKind::kSequences,
          config.pseudo_fraction, root.derive("pseudo-scope").seed());
    std::vector<std::size_t> scope;
    for (std::size_t i : scoped.frames_in_split(config.unlabeled_split))
      if (!scoped.frames[i].has_label()) scope.push_back(i);
    if (scope.empty() && config.split_policy == SplitPolicy::kPseudoOnly)
      throw ConfigError("pseudo-only policy but split " +
                        config.unlabeled_split + " has no unlabeled frames");

    tta::AugSpec aug;
    if (config.use_tta) {
      aug.scales = config.tta_scales;
      aug.flip = config.tta_flip;
    } else {
      aug.scales = {1.0};
      aug.flip = false;
    }

    const fs::path vdir = paths.pseudo_dir(k);
    for (std::size_t i : scope)
      fs::create_directories(
          (vdir / (scoped.frames[i].frame_key() + ".lmap")).parent_path());

    pseudo_samples.resize(scope.size());
    parallel_for(jobs, scope.size(), [&](std::size_t s) {
      const dataset::FrameRecord& f = scoped.frames[scope[s]];
      model::TrainSample& out = pseudo_samples[s];
      out.image = load_ppm(scoped.resolve(f.image_path));
      GridU8 ego;
      const GridU8* ego_ptr = nullptr;
      if (config.use_ego_void && f.has_ego_void()) {
        ego = load_evmk(scoped.resolve(f.ego_void_path));
        ego_ptr = &ego;
      }
      out.labels = tta::pseudo_label(out.image, state.teacher, classes, aug,
                                     config.postproc, ego_ptr)
                       .map;
    });
    for (std::size_t s = 0; s < scope.size(); ++s)
      save_lmap(vdir / (scoped.frames[scope[s]].frame_key() + ".lmap"),
                pseudo_samples[s].labels);
    step2 = "step2=" + describe_step2(config);
  }

  // Step 3: train the student.
  model::LearnerConfig student_cfg =
      state.student ? state.student->config : state.teacher.config;
  student_cfg = model::enlarge(student_cfg, config.enlarge_factor_for(k));
  student_cfg.seed =
      root.derive("student", static_cast<std::uint64_t>(k)).seed();

  const model::Checkpoint* init = nullptr;
  if (config.init_student_from_previous) {
    const model::Checkpoint& prev =
        state.student ? *state.student : state.teacher;
    if (prev.params.size() != model::parameter_count(student_cfg))
      throw ConfigError(
          "init_student_from_previous needs matching architectures; set this "
          "iteration's enlarge factor to 1");
    init = &prev;
  }

  std::vector<model::TrainSample> data;
  std::string data_tag;
  switch (config.split_policy) {
    case SplitPolicy::kPseudoOnly:
      data = std::move(pseudo_samples);
      data_tag = "pseudo/v" + std::to_string(k);
      break;
    case SplitPolicy::kLabeledOnly:
      data = labeled_samples;
      data_tag = config.train_split;
      break;
    case SplitPolicy::kMixed:
      data = labeled_samples;
      data.insert(data.end(), std::make_move_iterator(pseudo_samples.begin()),
                  std::make_move_iterator(pseudo_samples.end()));
      data_tag = config.train_split + "+pseudo/v" + std::to_string(k);
      break;
  }
  const std::string it_tag = std::to_string(k);
  model::Checkpoint student = model::train(
      data, student_cfg, classes, init,
      "student-it" + it_tag + " data=" + data_tag + " " + step2, jobs);

  // Step 4: fine-tune on the human-labeled frames.
  model::Checkpoint fine = model::finetune(
      student, labeled_samples, classes, config.finetune,
      "finetune-it" + it_tag + " data=" + config.train_split, jobs);

  fs::create_directories(paths.checkpoint_dir());
  model::save_checkpoint(paths.student_checkpoint(k), fine);

  // Evaluate on the held-out split, then promote (Step 5).
  metrics::MetricReport report = metrics::evaluate_split(
      manifest, config.eval_split, fine, config.postproc);

  state.iteration = k;
  state.teacher = fine;
  state.student = std::move(fine);
  state.pseudo_version = "v" + it_tag;
  state.history.emplace_back(k, std::move(report));
  return state;
}

IterationState run_experiment(const ExperimentConfig& config,
                              const dataset::Manifest& manifest,
                              const fs::path& out_dir, int jobs) {
  config.validate();
  ExperimentPaths paths{out_dir};
  fs::create_directories(paths.root);
  fs::create_directories(paths.checkpoint_dir());

  {
    std::ofstream out(paths.config_snapshot(), std::ios::binary);
    if (!out)
      throw IoError("cannot write " + paths.config_snapshot().string());
    out << config.serialize();
  }
  {
    // Snapshot the input manifest with resolved paths so the experiment
    // directory stands on its own.
    dataset::Manifest copy = manifest;
    for (dataset::FrameRecord& f : copy.frames) {
      if (!f.image_path.empty()) f.image_path = manifest.resolve(f.image_path);
      if (!f.label_path.empty()) f.label_path = manifest.resolve(f.label_path);
      if (!f.ego_void_path.empty())
        f.ego_void_path = manifest.resolve(f.ego_void_path);
    }
    copy.base_dir = paths.root;
    dataset::save_manifest(paths.manifest_copy(), copy);
  }

  // Data scope: ego masks are derived from every sequence's labeled frame
  // first, then the labeled fraction decides which labels the run may keep.
  dataset::Manifest scoped = manifest;
  if (config.use_ego_void)
    scoped = dataset::propagate_ego_car(scoped, paths.ego_dir());
  if (config.labeled_fraction < 1.0)
    scoped = dataset::sample_fraction(
        scoped, config.train_split, dataset::SampleKind::kLabeledImages,
        config.labeled_fraction,
        Rng(config.seed).derive("labeled-fraction").seed());

  // Step 1: supervised teacher.
  std::vector<std::size_t> teacher_idx =
      labeled_frames(scoped, config.train_split);
  if (teacher_idx.empty())
    throw ConfigError("split " + config.train_split + " has no labeled frames");
  std::string teacher_data = config.train_split;
  if (config.teacher_uses_val) {
    for (std::size_t i : labeled_frames(scoped, config.eval_split))
      if (std::find(teacher_idx.begin(), teacher_idx.end(), i) ==
          teacher_idx.end())
        teacher_idx.push_back(i);
    teacher_data += "+" + config.eval_split;
  }
  model::LearnerConfig teacher_cfg = config.learner;
  teacher_cfg.class_count = scoped.classes.count();
  teacher_cfg.seed = Rng(config.seed).derive("teacher").seed();
  model::Checkpoint teacher =
      model::train(load_samples(scoped, teacher_idx), teacher_cfg,
                   scoped.classes, nullptr,
                   "teacher-it0 data=" + teacher_data, jobs);
  model::save_checkpoint(paths.teacher_checkpoint(), teacher);

  metrics::MetricReport baseline = metrics::evaluate_split(
      scoped, config.eval_split, teacher, config.postproc);

  IterationState state;
  state.iteration = 0;
  state.teacher = std::move(teacher);
  state.history.emplace_back(0, std::move(baseline));

  for (int k = 1; k <= config.iterations; ++k)
    state = run_iteration(std::move(state), config, scoped, paths, jobs);

  std::ofstream out(paths.history_csv(), std::ios::binary);
  if (!out) throw IoError("cannot write " + paths.history_csv().string());
  out << history_to_csv(state.history);
  return state;
}

}  // namespace iterseg::orchestrator
