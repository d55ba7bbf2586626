#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "iterseg/dataset.hpp"
#include "iterseg/metrics.hpp"
#include "iterseg/model.hpp"
#include "iterseg/postproc.hpp"

namespace iterseg::orchestrator {

// What the student trains on in each iteration.
enum class SplitPolicy {
  kPseudoOnly,   // pseudo-labeled frames only
  kLabeledOnly,  // human-labeled frames only (plain supervised loop)
  kMixed,        // both, labeled first then pseudo
};

std::string_view to_string(SplitPolicy policy);
SplitPolicy split_policy_from(std::string_view name);  // ConfigError

// Full experiment description. Serializes to key=value text with one fixed
// key order, so a snapshot written by one run parses back identically.
// learner.class_count and learner.seed are assigned at run time (from the
// manifest and from `seed`) and are rejected as config keys.
struct ExperimentConfig {
  int iterations = 2;
  std::uint64_t seed = 0;
  SplitPolicy split_policy = SplitPolicy::kPseudoOnly;
  // Capacity growth per iteration, compounding; entries past the end of the
  // list mean 1.0 (keep the previous architecture).
  std::vector<double> enlarge_factors;
  bool init_student_from_previous = false;
  bool use_tta = true;
  bool use_ego_void = true;
  double labeled_fraction = 1.0;
  double pseudo_fraction = 1.0;
  std::string train_split = "train-fine";
  std::string unlabeled_split = "train-sequence";
  std::string eval_split = "val-fine";
  // Lets the teacher (never the student) also train on the eval split's
  // labeled frames.
  bool teacher_uses_val = false;
  std::vector<double> tta_scales = {0.75, 1.0, 1.25};
  bool tta_flip = true;
  model::FinetuneProfile finetune;
  model::LearnerConfig learner;
  postproc::PostprocConfig postproc;

  double enlarge_factor_for(int iteration) const;  // 1-based
  void validate() const;                           // throws ConfigError
  std::string serialize() const;
  // Applies one key=value override; unknown keys are a ConfigError.
  void set(const std::string& key, const std::string& value);
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);

  friend bool operator==(const ExperimentConfig&,
                         const ExperimentConfig&) = default;
};

// Fixed layout of one experiment directory.
struct ExperimentPaths {
  std::filesystem::path root;

  std::filesystem::path config_snapshot() const { return root / "config.txt"; }
  std::filesystem::path manifest_copy() const { return root / "manifest.tsv"; }
  std::filesystem::path ego_dir() const { return root / "ego"; }
  std::filesystem::path checkpoint_dir() const { return root / "checkpoints"; }
  std::filesystem::path teacher_checkpoint() const;
  std::filesystem::path student_checkpoint(int iteration) const;
  std::filesystem::path pseudo_dir(int iteration) const;  // pseudo/v{k}
  std::filesystem::path history_csv() const { return root / "history.csv"; }
};

// Loop state carried across iterations. `history` is append-only: one row
// per evaluation, starting with the iteration-0 teacher baseline.
struct IterationState {
  int iteration = 0;
  model::Checkpoint teacher;
  std::optional<model::Checkpoint> student;
  std::string pseudo_version;  // "v{k}" once iteration k >= 1 ran
  std::vector<std::pair<int, metrics::MetricReport>> history;
};

std::string history_to_csv(
    const std::vector<std::pair<int, metrics::MetricReport>>& history);

// One teacher->student round: pseudo-labels every unlabeled frame in scope
// into pseudo/v{k} (skipped under the labeled-only policy), trains the
// student (capacity per enlarge factor, warm-started from the previous
// checkpoint when configured), fine-tunes it on the labeled frames,
// evaluates on the eval split, appends the history row, writes
// checkpoints/student-it{k}.nsck, and promotes the result to teacher.
// An empty unlabeled scope under the pseudo-only policy is a ConfigError.
IterationState run_iteration(IterationState state,
                             const ExperimentConfig& config,
                             const dataset::Manifest& manifest,
                             const ExperimentPaths& paths, int jobs = 1);

// The whole loop: snapshots config and manifest, propagates ego masks and
// applies the labeled fraction, trains the iteration-0 teacher on the
// labeled frames, records its baseline row, runs `config.iterations`
// rounds, and writes history.csv. Byte-identical outputs for identical
// (manifest, config, seed).
IterationState run_experiment(const ExperimentConfig& config,
                              const dataset::Manifest& manifest,
                              const std::filesystem::path& out_dir,
                              int jobs = 1);

}  // namespace iterseg::orchestrator
