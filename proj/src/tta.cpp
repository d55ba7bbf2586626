#include "iterseg/tta.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "iterseg/errors.hpp"

namespace iterseg::tta {

void AugSpec::validate() const {
  if (scales.empty()) throw ConfigError("augmentation needs at least one scale");
  for (const double s : scales)
    if (!std::isfinite(s) || s <= 0.0)
      throw ConfigError("scales must be positive and finite, got " +
                        std::to_string(s));
}

int AugSpec::pass_count() const {
  return static_cast<int>(scales.size()) * (flip ? 2 : 1);
}

std::vector<std::pair<double, bool>> AugSpec::passes() const {
  validate();
  std::vector<double> sorted = scales;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::pair<double, bool>> out;
  out.reserve(static_cast<std::size_t>(pass_count()));
  for (const double s : sorted) {
    out.emplace_back(s, false);
    if (flip) out.emplace_back(s, true);
  }
  return out;
}

Image apply_aug(const Image& image, double scale, bool flipped) {
  if (!std::isfinite(scale) || scale <= 0.0)
    throw ConfigError("scale must be positive and finite");
  const int rows = static_cast<int>(std::lround(image.rows() * scale));
  const int cols = static_cast<int>(std::lround(image.cols() * scale));
  if (rows < 1 || cols < 1)
    throw ConfigError("scale " + std::to_string(scale) +
                      " collapses the image");
  Image out = (rows == image.rows() && cols == image.cols())
                  ? image
                  : resize_bilinear(image, rows, cols);
  if (flipped) out = mirrored(out);
  return out;
}

Planes softmax_planes(const Planes& logits) {
  Planes probs(logits.ch, logits.rows, logits.cols);
  for (int r = 0; r < logits.rows; ++r) {
    for (int c = 0; c < logits.cols; ++c) {
      double m = logits.at(0, r, c);
      for (int k = 1; k < logits.ch; ++k) m = std::max(m, logits.at(k, r, c));
      double sum = 0.0;
      for (int k = 0; k < logits.ch; ++k) {
        const double e = std::exp(logits.at(k, r, c) - m);
        probs.at(k, r, c) = e;
        sum += e;
      }
      for (int k = 0; k < logits.ch; ++k) probs.at(k, r, c) /= sum;
    }
  }
  return probs;
}

PredictionVolume flip_prediction(const PredictionVolume& pred) {
  PredictionVolume out;
  out.semantic_logits = mirrored(pred.semantic_logits);
  out.center_heatmap = mirrored(pred.center_heatmap);
  out.offsets = mirrored(pred.offsets);
  for (int r = 0; r < out.offsets.rows; ++r)
    for (int c = 0; c < out.offsets.cols; ++c)
      out.offsets.at(1, r, c) = -out.offsets.at(1, r, c);
  return out;
}

FusedPrediction invert_prediction(const PredictionVolume& pred, double scale,
                                  bool flipped, int rows, int cols) {
  if (!std::isfinite(scale) || scale <= 0.0)
    throw ConfigError("scale must be positive and finite");
  if (rows < 1 || cols < 1) throw ConfigError("target size must be positive");

  PredictionVolume src = pred;
  src.semantic_logits = softmax_planes(pred.semantic_logits);
  if (flipped) src = flip_prediction(src);

  FusedPrediction out;
  out.semantic_probs = resize_bilinear(src.semantic_logits, rows, cols);
  out.center_heatmap = resize_bilinear(src.center_heatmap, rows, cols);
  out.offsets = resize_bilinear(src.offsets, rows, cols);
  const double inv = 1.0 / scale;
  for (double& v : out.offsets.data) v *= inv;
  return out;
}

FusedPrediction fuse(const std::vector<FusedPrediction>& preds) {
  if (preds.empty()) throw ContractError("cannot fuse an empty prediction list");
  const FusedPrediction& first = preds.front();
  for (const FusedPrediction& p : preds) {
    if (p.semantic_probs.ch != first.semantic_probs.ch ||
        p.rows() != first.rows() || p.cols() != first.cols() ||
        p.offsets.ch != 2)
      throw ShapeError("fused predictions must share one shape");
  }
  if (preds.size() == 1) return first;

  const std::size_t n = preds.size();
  std::vector<double> vals(n);
  // Mean with ascending-order summation: the result does not depend on the
  // order of `preds`, and two identical inputs average to themselves.
  const auto mean_at = [&](auto&& get) {
    for (std::size_t i = 0; i < n; ++i) vals[i] = get(preds[i]);
    std::sort(vals.begin(), vals.end());
    double sum = 0.0;
    for (const double v : vals) sum += v;
    return sum / static_cast<double>(n);
  };

  FusedPrediction out;
  out.semantic_probs = Planes(first.semantic_probs.ch, first.rows(), first.cols());
  out.center_heatmap = GridD(first.rows(), first.cols());
  out.offsets = Planes(2, first.rows(), first.cols());
  for (std::size_t i = 0; i < out.semantic_probs.data.size(); ++i)
    out.semantic_probs.data[i] =
        mean_at([&](const FusedPrediction& p) { return p.semantic_probs.data[i]; });
  for (std::size_t i = 0; i < out.center_heatmap.data.size(); ++i)
    out.center_heatmap.data[i] =
        mean_at([&](const FusedPrediction& p) { return p.center_heatmap.data[i]; });
  for (std::size_t i = 0; i < out.offsets.data.size(); ++i)
    out.offsets.data[i] =
        mean_at([&](const FusedPrediction& p) { return p.offsets.data[i]; });
  return out;
}

PseudoLabelResult pseudo_label(const Image& image, const Checkpoint& ckpt,
                               const ClassTable& classes, const AugSpec& aug,
                               const postproc::PostprocConfig& postproc_config,
                               const GridU8* ego_void) {
  aug.validate();
  postproc_config.validate();
  if (classes.count() != ckpt.config.class_count)
    throw ShapeError("class table has " + std::to_string(classes.count()) +
                     " classes, checkpoint expects " +
                     std::to_string(ckpt.config.class_count));
  if (ego_void &&
      (ego_void->rows != image.rows() || ego_void->cols != image.cols()))
    throw ShapeError("ego-void mask and image disagree in shape");

  std::vector<FusedPrediction> inverted;
  const auto plan = aug.passes();
  inverted.reserve(plan.size());
  for (const auto& [scale, flipped] : plan) {
    const Image augmented = apply_aug(image, scale, flipped);
    const PredictionVolume pred = model::forward(ckpt, augmented);
    inverted.push_back(
        invert_prediction(pred, scale, flipped, image.rows(), image.cols()));
  }
  const FusedPrediction fused = fuse(inverted);

  // Decode treats the probabilities as scores; argmax is unchanged.
  PredictionVolume volume;
  volume.semantic_logits = fused.semantic_probs;
  volume.center_heatmap = fused.center_heatmap;
  volume.offsets = fused.offsets;
  postproc::DecodeResult decoded =
      postproc::decode(volume, classes, postproc_config);

  PseudoLabelResult result;
  result.map = std::move(decoded.map);
  result.scores = std::move(decoded.scores);
  result.passes = static_cast<int>(plan.size());
  if (ego_void) {
    for (int r = 0; r < result.map.rows; ++r)
      for (int c = 0; c < result.map.cols; ++c)
        if (ego_void->at(r, c)) result.map.at(r, c) = kVoidId;
  }
  return result;
}

}  // namespace iterseg::tta
