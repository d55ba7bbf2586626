#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "iterseg/dataset.hpp"
#include "iterseg/errors.hpp"
#include "iterseg/model.hpp"
#include "iterseg/orchestrator.hpp"
#include "iterseg/panoptic.hpp"
#include "testutil.hpp"

using namespace iterseg;
using orchestrator::ExperimentConfig;
using orchestrator::ExperimentPaths;
using orchestrator::IterationState;
using orchestrator::SplitPolicy;

namespace fs = std::filesystem;

namespace {

fs::path unique_dir(const std::string& tag) {
  static int counter = 0;
  const fs::path p =
      fs::temp_directory_path() / ("iterseg-orch-" + tag + "-" +
                                   std::to_string(++counter));
  fs::remove_all(p);
  return p;
}

// One tiny dataset shared by every case: 3 training sequences of 4 frames
// (labels on frame 2) plus 2 validation sequences, 16x24 pixels.
const dataset::Manifest& tiny_data() {
  static const dataset::Manifest manifest = [] {
    dataset::SynthConfig cfg;
    cfg.sequences = 3;
    cfg.val_sequences = 2;
    cfg.frames_per_sequence = 4;
    cfg.labeled_frame = 2;
    cfg.rows = 16;
    cfg.cols = 24;
    cfg.min_things = 1;
    cfg.max_things = 2;
    cfg.min_radius = 2.5;
    cfg.max_radius = 4.0;
    cfg.motion_speed = 1.0;
    cfg.seed = 11;
    const fs::path dir = unique_dir("data");
    return dataset::synth_generate(cfg, dir);
  }();
  return manifest;
}

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.iterations = 1;
  cfg.seed = 7;
  cfg.tta_scales = {1.0};
  cfg.tta_flip = false;
  cfg.learner.capacity = 2;
  cfg.learner.depth = 1;
  cfg.learner.steps = 4;
  cfg.learner.batch_size = 2;
  cfg.learner.survival_prob = 1.0;
  return cfg;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::string out((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  return out;
}

std::string final_provenance(const fs::path& ckpt) {
  return model::load_checkpoint(ckpt).provenance;
}

}  // namespace

TEST_CASE("split policy names round trip") {
  for (SplitPolicy p : {SplitPolicy::kPseudoOnly, SplitPolicy::kLabeledOnly,
                        SplitPolicy::kMixed})
    CHECK(orchestrator::split_policy_from(orchestrator::to_string(p)) == p);
  CHECK_THROWS_AS(orchestrator::split_policy_from("both"), ConfigError);
}

TEST_CASE("experiment config serializes and parses back") {
  ExperimentConfig cfg = tiny_config();
  cfg.iterations = 3;
  cfg.enlarge_factors = {1.5, 1.0};
  cfg.split_policy = SplitPolicy::kMixed;
  cfg.labeled_fraction = 0.4;
  cfg.teacher_uses_val = true;
  cfg.tta_scales = {0.75, 1.0, 1.25};
  cfg.tta_flip = true;
  cfg.postproc.stuff_area_threshold = 9;
  const ExperimentConfig back = ExperimentConfig::parse(cfg.serialize());
  CHECK(back == cfg);
}

TEST_CASE("experiment config parse accepts comments and spacing") {
  const ExperimentConfig cfg = ExperimentConfig::parse(
      "# comment\n"
      "\n"
      "iterations = 4\n"
      "  split_policy =  mixed \n");
  CHECK(cfg.iterations == 4);
  CHECK(cfg.split_policy == SplitPolicy::kMixed);
}

TEST_CASE("experiment config rejects bad input") {
  CHECK_THROWS_AS(ExperimentConfig::parse("no_such_key=1"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("iterations"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("iterations=two"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("use_tta=yes"), ConfigError);
  // class_count and seed of the learner are runtime-assigned.
  CHECK_THROWS_AS(ExperimentConfig::parse("learner.class_count=4"),
                  ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("learner.seed=1"), ConfigError);
}

TEST_CASE("experiment config validation") {
  ExperimentConfig cfg = tiny_config();
  cfg.iterations = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.labeled_fraction = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.pseudo_fraction = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.enlarge_factors = {0.5};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.eval_split = cfg.train_split;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.tta_scales = {};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.finetune.lr_fraction = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("enlarge factor schedule defaults to 1 past the list") {
  ExperimentConfig cfg = tiny_config();
  CHECK(cfg.enlarge_factor_for(1) == 1.0);
  cfg.enlarge_factors = {1.5};
  CHECK(cfg.enlarge_factor_for(1) == 1.5);
  CHECK(cfg.enlarge_factor_for(2) == 1.0);
}

TEST_CASE("experiment writes the full directory layout") {
  ExperimentConfig cfg = tiny_config();
  cfg.iterations = 2;
  const fs::path out = unique_dir("layout");
  const IterationState state =
      orchestrator::run_experiment(cfg, tiny_data(), out);
  const ExperimentPaths paths{out};

  // Snapshots parse back to the exact configuration.
  CHECK(ExperimentConfig::parse(read_bytes(paths.config_snapshot())) == cfg);
  const dataset::Manifest copy = dataset::load_manifest(paths.manifest_copy());
  CHECK(copy.frames.size() == tiny_data().frames.size());
  CHECK(fs::exists(copy.resolve(copy.frames[0].image_path)));

  CHECK(fs::exists(paths.teacher_checkpoint()));
  CHECK(fs::exists(paths.student_checkpoint(1)));
  CHECK(fs::exists(paths.student_checkpoint(2)));

  // 3 training sequences x 3 unlabeled frames in each round.
  for (int k = 1; k <= 2; ++k) {
    int files = 0;
    for (const auto& e : fs::recursive_directory_iterator(paths.pseudo_dir(k)))
      if (e.is_regular_file()) {
        ++files;
        const PanopticMap map = load_lmap(e.path());
        CHECK(map.rows == 16);
        CHECK(map.cols == 24);
        validate_map(map, tiny_data().classes);
      }
    CHECK(files == 9);
  }

  REQUIRE(state.history.size() == 3);
  CHECK(state.history[0].first == 0);
  CHECK(state.history[1].first == 1);
  CHECK(state.history[2].first == 2);
  CHECK(state.iteration == 2);
  CHECK(state.pseudo_version == "v2");
  CHECK(state.student.has_value());

  const std::string csv = read_bytes(paths.history_csv());
  CHECK(csv == orchestrator::history_to_csv(state.history));
  CHECK(csv.substr(0, csv.find('\n')) == "iteration,split,pq,ap,miou");
  CHECK(state.history[1].second.split == "val-fine");

  // Cold-started students begin a fresh chain each round: the final model's
  // provenance names round 2's training data and its fine-tune, nothing
  // older.
  const std::string prov = state.teacher.provenance;
  CHECK(prov.find("student-it2 data=pseudo/v2") != std::string::npos);
  CHECK(prov.find("finetune-it2 data=train-fine") != std::string::npos);
  CHECK(prov.find("student-it1") == std::string::npos);
  CHECK(prov == final_provenance(paths.student_checkpoint(2)));
}

TEST_CASE("labeled-only policy skips pseudo labeling") {
  ExperimentConfig cfg = tiny_config();
  cfg.split_policy = SplitPolicy::kLabeledOnly;
  const fs::path out = unique_dir("labonly");
  const IterationState state =
      orchestrator::run_experiment(cfg, tiny_data(), out);
  const ExperimentPaths paths{out};
  CHECK_FALSE(fs::exists(paths.root / "pseudo"));
  const std::string prov = state.teacher.provenance;
  CHECK(prov.find("data=train-fine step2=skipped") != std::string::npos);
  CHECK(state.history.size() == 2);
}

TEST_CASE("pseudo-only policy without unlabeled frames errors") {
  dataset::SynthConfig scfg;
  scfg.sequences = 2;
  scfg.val_sequences = 1;
  scfg.frames_per_sequence = 1;  // the labeled frame is the only frame
  scfg.labeled_frame = 0;
  scfg.rows = 16;
  scfg.cols = 24;
  scfg.min_things = 1;
  scfg.max_things = 1;
  scfg.min_radius = 2.5;
  scfg.max_radius = 4.0;
  scfg.seed = 3;
  const dataset::Manifest m =
      dataset::synth_generate(scfg, unique_dir("allfine"));
  const ExperimentConfig cfg = tiny_config();
  CHECK_THROWS_AS(
      orchestrator::run_experiment(cfg, m, unique_dir("allfine-out")),
      ConfigError);
}

TEST_CASE("experiment reruns are byte identical") {
  ExperimentConfig cfg = tiny_config();
  cfg.tta_scales = {1.0, 1.25};
  cfg.tta_flip = true;
  const fs::path a = unique_dir("det-a");
  const fs::path b = unique_dir("det-b");
  orchestrator::run_experiment(cfg, tiny_data(), a);
  orchestrator::run_experiment(cfg, tiny_data(), b);

  std::vector<fs::path> rel;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), a));
  CHECK(rel.size() > 4);
  int compared = 0;
  for (const fs::path& r : rel) {
    if (r.filename() == "manifest.tsv") continue;  // absolute input paths
    CAPTURE(r.string());
    REQUIRE(fs::exists(b / r));
    CHECK(read_bytes(a / r) == read_bytes(b / r));
    ++compared;
  }
  CHECK(compared >= 4);  // config, history, checkpoints, pseudo labels
}

TEST_CASE("ego masks void out pseudo-label pixels") {
  ExperimentConfig cfg = tiny_config();
  const fs::path out = unique_dir("ego-on");
  const IterationState state =
      orchestrator::run_experiment(cfg, tiny_data(), out);
  const ExperimentPaths paths{out};

  const GridU8 mask = load_evmk(paths.ego_dir() / "seq000.evmk");
  REQUIRE(mask.rows == 16);
  int masked = 0;
  for (int r = 0; r < mask.rows; ++r)
    for (int c = 0; c < mask.cols; ++c)
      if (mask.at(r, c)) ++masked;
  REQUIRE(masked > 0);  // the synthetic hood occupies the bottom rows

  const PanopticMap pseudo =
      load_lmap(paths.pseudo_dir(1) / "seq000" / "0.lmap");
  for (int r = 0; r < mask.rows; ++r)
    for (int c = 0; c < mask.cols; ++c)
      if (mask.at(r, c)) CHECK(pseudo.at(r, c) == kVoidId);
  CHECK(state.teacher.provenance.find("ego=on") != std::string::npos);
}

TEST_CASE("disabling ego propagation leaves model output in place") {
  ExperimentConfig cfg = tiny_config();
  cfg.use_ego_void = false;
  const fs::path out = unique_dir("ego-off");
  const IterationState state =
      orchestrator::run_experiment(cfg, tiny_data(), out);
  CHECK_FALSE(fs::exists(ExperimentPaths{out}.ego_dir()));
  CHECK(state.teacher.provenance.find("ego=off") != std::string::npos);
}

TEST_CASE("warm-started students chain provenance across rounds") {
  ExperimentConfig cfg = tiny_config();
  cfg.iterations = 2;
  cfg.init_student_from_previous = true;
  const fs::path out = unique_dir("warm");
  const IterationState state =
      orchestrator::run_experiment(cfg, tiny_data(), out);
  const std::string prov = state.teacher.provenance;
  // Round 1 starts from the teacher, round 2 from round 1's result.
  CHECK(prov.find("teacher-it0") != std::string::npos);
  CHECK(prov.find("student-it1 data=pseudo/v1") != std::string::npos);
  CHECK(prov.find("finetune-it1") != std::string::npos);
  CHECK(prov.find("student-it2 data=pseudo/v2") != std::string::npos);
  CHECK(prov.find("finetune-it2") != std::string::npos);
  CHECK(prov.find("teacher-it0") < prov.find("student-it1"));
  CHECK(prov.find("student-it1") < prov.find("finetune-it1"));
  CHECK(prov.find("finetune-it1") < prov.find("student-it2"));
}

TEST_CASE("init from previous requires matching architectures") {
  ExperimentConfig cfg = tiny_config();
  cfg.iterations = 2;
  cfg.init_student_from_previous = true;
  cfg.enlarge_factors = {1.0, 2.0};  // round 2 changes capacity
  CHECK_THROWS_AS(
      orchestrator::run_experiment(cfg, tiny_data(), unique_dir("init-bad")),
      ConfigError);
}

TEST_CASE("enlarge factor grows the student") {
  ExperimentConfig cfg = tiny_config();
  cfg.enlarge_factors = {2.0};
  const fs::path out = unique_dir("grow");
  orchestrator::run_experiment(cfg, tiny_data(), out);
  const ExperimentPaths paths{out};
  const model::Checkpoint teacher =
      model::load_checkpoint(paths.teacher_checkpoint());
  const model::Checkpoint student =
      model::load_checkpoint(paths.student_checkpoint(1));
  CHECK(teacher.config.capacity == 2);
  CHECK(student.config.capacity == 4);
  CHECK(student.params.size() > teacher.params.size());
}

TEST_CASE("mixed policy concatenates labeled and pseudo data") {
  ExperimentConfig cfg = tiny_config();
  cfg.split_policy = SplitPolicy::kMixed;
  const fs::path out = unique_dir("mixed");
  const IterationState state =
      orchestrator::run_experiment(cfg, tiny_data(), out);
  const std::string prov = state.teacher.provenance;
  CHECK(prov.find("data=train-fine+pseudo/v1") != std::string::npos);
  // 3 labeled + 9 pseudo frames feed the student.
  CHECK(prov.find("samples=12") != std::string::npos);
}

TEST_CASE("labeled fraction moves frames into the unlabeled pool") {
  ExperimentConfig cfg = tiny_config();
  cfg.labeled_fraction = 0.5;  // keep ceil(0.5 * 3) = 2 of 3 labels
  const fs::path out = unique_dir("fraction");
  const IterationState state =
      orchestrator::run_experiment(cfg, tiny_data(), out);
  const ExperimentPaths paths{out};
  const std::string teacher_prov =
      final_provenance(paths.teacher_checkpoint());
  CHECK(teacher_prov.find("samples=2") != std::string::npos);

  int files = 0;
  for (const auto& e : fs::recursive_directory_iterator(paths.pseudo_dir(1)))
    if (e.is_regular_file()) ++files;
  CHECK(files == 10);  // 9 always-unlabeled frames + 1 dropped label
  CHECK(state.history.size() == 2);
}

TEST_CASE("tta toggle shows up only in the generation path") {
  ExperimentConfig with = tiny_config();
  with.tta_scales = {1.0, 1.25};
  with.tta_flip = true;
  ExperimentConfig without = with;
  without.use_tta = false;
  const IterationState sa =
      orchestrator::run_experiment(with, tiny_data(), unique_dir("tta-on"));
  const IterationState sb =
      orchestrator::run_experiment(without, tiny_data(), unique_dir("tta-off"));
  std::string pa = sa.teacher.provenance;
  std::string pb = sb.teacher.provenance;
  const std::string ta = "tta=1,1.25+flip";
  const std::string tb = "tta=off";
  REQUIRE(pa.find(ta) != std::string::npos);
  REQUIRE(pb.find(tb) != std::string::npos);
  pa.replace(pa.find(ta), ta.size(), "");
  pb.replace(pb.find(tb), tb.size(), "");
  CHECK(pa == pb);
}

TEST_CASE("teacher can opt into validation labels") {
  ExperimentConfig cfg = tiny_config();
  cfg.teacher_uses_val = true;
  const fs::path out = unique_dir("tuv");
  orchestrator::run_experiment(cfg, tiny_data(), out);
  const ExperimentPaths paths{out};
  const std::string teacher_prov =
      final_provenance(paths.teacher_checkpoint());
  CHECK(teacher_prov.find("data=train-fine+val-fine") != std::string::npos);
  CHECK(teacher_prov.find("samples=5") != std::string::npos);
  // The student side never touches the eval split.
  const std::string student_prov =
      final_provenance(paths.student_checkpoint(1));
  CHECK(student_prov.find("finetune-it1 data=train-fine") !=
        std::string::npos);
  CHECK(student_prov.find("student-it1 data=pseudo/v1") != std::string::npos);
}

TEST_CASE("history csv lines follow the report rows") {
  std::vector<std::pair<int, metrics::MetricReport>> history;
  metrics::MetricReport r;
  r.split = "val-fine";
  r.pq = 0.5;
  r.ap = 0.25;
  r.miou = 0.75;
  history.emplace_back(0, r);
  r.pq = 0.625;
  history.emplace_back(1, r);
  CHECK(orchestrator::history_to_csv(history) ==
        "iteration,split,pq,ap,miou\n"
        "0,val-fine,0.5,0.25,0.75\n"
        "1,val-fine,0.625,0.25,0.75\n");
}
