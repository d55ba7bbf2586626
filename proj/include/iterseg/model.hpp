#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "iterseg/grid.hpp"
#include "iterseg/image.hpp"
#include "iterseg/panoptic.hpp"

namespace iterseg::model {

// Raw network output for one image. Semantic plane 0 is void (never
// supervised); planes 1..C follow class-table order. Offsets point from a
// pixel toward its instance center, plane 0 rows, plane 1 columns.
struct PredictionVolume {
  Planes semantic_logits;
  GridD center_heatmap;
  Planes offsets;

  int rows() const { return center_heatmap.rows; }
  int cols() const { return center_heatmap.cols; }
  void validate() const;  // shape agreement + finite values
  friend bool operator==(const PredictionVolume&, const PredictionVolume&) = default;
};

// Dense supervision derived from a panoptic map. semantic holds class-table
// indices (0 = void). The heatmap composes one unit-height Gaussian per
// instance center by pixelwise max; offsets are exact displacements to the
// pixel's own instance center, zero outside thing_mask.
struct TrainingTargets {
  GridU16 semantic;
  GridD heatmap;
  Planes offsets;
  GridU8 thing_mask;
};

// Gaussian width for center targets: 8px at 1024 rows, scaled by image
// height, floored at 2px so tiny images keep usable support.
double sigma_for_rows(int rows);

TrainingTargets encode_targets(const PanopticMap& map, const ClassTable& classes,
                               double sigma);
TrainingTargets encode_targets(const PanopticMap& map, const ClassTable& classes);

struct LearnerConfig {
  int class_count = 0;  // semantic classes; logit planes = class_count + 1
  int capacity = 8;     // base channel width
  int depth = 2;        // residual blocks at the bottleneck
  double survival_prob = 0.8;
  double lambda_semantic = 1.0;
  double lambda_center = 200.0;
  double lambda_offset = 0.01;
  std::string optimizer = "sgd";  // "sgd" or "adam"
  double base_lr = 0.001;
  double poly_power = 0.9;
  int steps = 800;
  int batch_size = 4;
  bool flip_augment = true;
  double scale_augment_min = 0.75;
  double scale_augment_max = 1.25;
  std::uint64_t seed = 1;

  void validate() const;
  std::string serialize() const;  // canonical key=value text, fixed key order
  static LearnerConfig deserialize(const std::string& text);
  friend bool operator==(const LearnerConfig&, const LearnerConfig&) = default;
};

// Total parameter count; a pure function of the config.
std::size_t parameter_count(const LearnerConfig& cfg);

// Residual blocks subject to stochastic depth (one at half resolution plus
// `depth` at quarter resolution).
int residual_block_count(const LearnerConfig& cfg);

struct Checkpoint {
  LearnerConfig config;
  std::uint64_t step = 0;
  std::vector<double> params;
  std::string provenance;
};

// Seeded He-normal initialization (final head projections scaled down).
Checkpoint init_checkpoint(const LearnerConfig& cfg);

// NSCK container: "NSCK" | u8 version=1 | u32le config_len | config text |
// u64le step | u64le param_count | f64le params | u32le prov_len | provenance.
Checkpoint load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// Inference forward pass: residual branches scaled by survival_prob.
PredictionVolume forward(const Checkpoint& ckpt, const Image& image);

struct LossBreakdown {
  double semantic = 0;
  double center = 0;
  double offset = 0;
  double total = 0;
};

// Combined loss: lambda_semantic * mean softmax cross-entropy over non-void
// pixels (zero when all pixels are void) + lambda_center * mean squared error
// over all pixels + lambda_offset * mean L1 error over thing_mask pixels
// (zero when the mask is empty). Non-finite inputs raise NumericError.
LossBreakdown loss(const PredictionVolume& pred, const TrainingTargets& tgt,
                   const LearnerConfig& cfg);

// Forward + loss (+ analytic parameter gradient when grad != null) with the
// residual gate of each block fixed to gates[i]: training draws these as 0/1
// Bernoulli(survival_prob), inference uses survival_prob itself.
LossBreakdown loss_and_param_gradient(const LearnerConfig& cfg,
                                      const std::vector<double>& params,
                                      const Image& image,
                                      const TrainingTargets& tgt,
                                      const std::vector<double>& gates,
                                      std::vector<double>* grad);

struct TrainSample {
  Image image;
  PanopticMap labels;
};

// SGD (or Adam) with a polynomial learning-rate schedule
// lr = base_lr * (1 - step/steps)^poly_power, seeded shuffling, random
// horizontal flips and scale jitter re-encoded from the label map, and
// per-sample stochastic depth. Gradients reduce over the batch in sample
// order regardless of job count. init, when given, must match the config's
// parameter layout.
Checkpoint train(const std::vector<TrainSample>& data, const LearnerConfig& cfg,
                 const ClassTable& classes, const Checkpoint* init = nullptr,
                 std::string_view note = "", int jobs = 1);

struct FinetuneProfile {
  double steps_fraction = 0.25;  // of the base config's steps
  double lr_fraction = 0.10;     // of the base config's base_lr

  friend bool operator==(const FinetuneProfile&,
                         const FinetuneProfile&) = default;
};

// Continues training a checkpoint on (typically labeled) data with a reduced
// schedule. The returned provenance chains onto the base checkpoint's.
Checkpoint finetune(const Checkpoint& base, const std::vector<TrainSample>& data,
                    const ClassTable& classes, const FinetuneProfile& profile,
                    std::string_view note = "", int jobs = 1);

// Scales capacity by ceil(capacity * factor); factor >= 1. The parameter
// count never decreases and input/output shapes are unchanged.
LearnerConfig enlarge(const LearnerConfig& cfg, double factor);

}  // namespace iterseg::model
