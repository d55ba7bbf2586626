// Training loop: seeded shuffling, flip/scale augmentation re-encoded from
// the label maps, per-sample stochastic depth, and a batch-order gradient
// reduction that is byte-stable across job counts.

#include <cmath>
#include <sstream>

#include "iterseg/errors.hpp"
#include "iterseg/image.hpp"
#include "iterseg/kernels.hpp"
#include "iterseg/model.hpp"
#include "iterseg/parallel.hpp"
#include "iterseg/rng.hpp"

namespace iterseg::model {

namespace {

PanopticMap resize_labels(const PanopticMap& map, int rows, int cols) {
  GridU32 g(map.rows, map.cols);
  g.data = map.ids;
  GridU32 r = resize_nearest(g, rows, cols);
  PanopticMap out(rows, cols);
  out.ids = std::move(r.data);
  return out;
}

std::string fmt_short(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

}  // namespace

Checkpoint train(const std::vector<TrainSample>& data, const LearnerConfig& cfg,
                 const ClassTable& classes, const Checkpoint* init,
                 std::string_view note, int jobs) {
  cfg.validate();
  if (classes.count() != cfg.class_count)
    throw ConfigError("class table size does not match config class_count");
  if (cfg.steps > 0 && data.empty())
    throw ConfigError("training with steps > 0 needs at least one sample");
  for (const TrainSample& s : data)
    if (s.labels.rows != s.image.rows() || s.labels.cols != s.image.cols())
      throw ShapeError("sample image and label sizes differ");
  if (jobs < 1) throw ConfigError("jobs must be at least 1");

  Checkpoint ckpt;
  ckpt.config = cfg;
  if (init) {
    if (init->params.size() != parameter_count(cfg))
      throw ShapeError("initial checkpoint does not match config layout");
    ckpt.params = init->params;
    ckpt.step = init->step;
  } else {
    ckpt = init_checkpoint(cfg);
  }

  const std::size_t n_params = parameter_count(cfg);
  const int blocks = residual_block_count(cfg);
  const std::size_t n = data.size();

  // Per-sample targets at native resolution, reused whenever a draw leaves
  // the sample unaugmented.
  std::vector<TrainingTargets> native(n);
  for (std::size_t i = 0; i < n; ++i)
    native[i] = encode_targets(data[i].labels, classes);

  Rng root(cfg.seed);
  Rng order_rng = root.derive("order");
  Rng aug_rng = root.derive("aug");
  Rng gate_rng = root.derive("gates");

  std::vector<std::size_t> pool;
  auto next_index = [&]() {
    if (pool.empty()) {
      pool.resize(n);
      for (std::size_t i = 0; i < n; ++i) pool[i] = i;
      order_rng.shuffle(pool);
    }
    const std::size_t idx = pool.back();
    pool.pop_back();
    return idx;
  };

  const bool scale_jitter = cfg.scale_augment_min < cfg.scale_augment_max;
  const int batch = cfg.batch_size;

  std::vector<double> adam_m, adam_v;
  if (cfg.optimizer == "adam") {
    adam_m.assign(n_params, 0.0);
    adam_v.assign(n_params, 0.0);
  }

  struct Slot {
    Image image;
    const TrainingTargets* targets = nullptr;
    TrainingTargets scratch;
    std::vector<double> gates;
    std::vector<double> grad;
  };
  std::vector<Slot> slots(static_cast<std::size_t>(batch));

  const auto& kern = kern::active_kernels();
  std::vector<double> gmean(n_params);

  for (int step = 0; step < cfg.steps; ++step) {
    // All random draws happen here, in slot order, before any parallelism.
    for (int j = 0; j < batch; ++j) {
      Slot& slot = slots[static_cast<std::size_t>(j)];
      const std::size_t idx = next_index();
      const bool flip = cfg.flip_augment && aug_rng.bernoulli(0.5);
      const double scale = scale_jitter
          ? aug_rng.uniform(cfg.scale_augment_min, cfg.scale_augment_max)
          : cfg.scale_augment_min;
      slot.gates.resize(static_cast<std::size_t>(blocks));
      for (int b = 0; b < blocks; ++b)
        slot.gates[static_cast<std::size_t>(b)] =
            gate_rng.bernoulli(cfg.survival_prob) ? 1.0 : 0.0;

      const TrainSample& src = data[idx];
      const int nr = std::max(4, static_cast<int>(std::lround(src.image.rows() * scale)));
      const int nc = std::max(4, static_cast<int>(std::lround(src.image.cols() * scale)));
      const bool resized = nr != src.image.rows() || nc != src.image.cols();
      if (!flip && !resized) {
        slot.image = src.image;
        slot.targets = &native[idx];
        continue;
      }
      Image img = flip ? mirrored(src.image) : src.image;
      PanopticMap lbl = flip ? mirrored(src.labels) : src.labels;
      if (resized) {
        img = resize_bilinear(img, nr, nc);
        lbl = resize_labels(lbl, nr, nc);
      }
      slot.image = std::move(img);
      slot.scratch = encode_targets(lbl, classes);
      slot.targets = &slot.scratch;
    }

    parallel_for(jobs, static_cast<std::size_t>(batch), [&](std::size_t j) {
      Slot& slot = slots[j];
      loss_and_param_gradient(cfg, ckpt.params, slot.image, *slot.targets,
                              slot.gates, &slot.grad);
    });

    // Batch mean in slot order, independent of how jobs interleaved.
    gmean = slots[0].grad;
    for (int j = 1; j < batch; ++j)
      kern.vadd(gmean.data(), slots[static_cast<std::size_t>(j)].grad.data(),
                gmean.data(), n_params);
    kern.vscale(1.0 / batch, gmean.data(), n_params);

    const double lr = cfg.base_lr *
        std::pow(1.0 - static_cast<double>(step) / cfg.steps, cfg.poly_power);
    if (cfg.optimizer == "sgd") {
      kern.axpy(-lr, gmean.data(), ckpt.params.data(), n_params);
    } else {
      const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      const double c1 = 1.0 - std::pow(b1, step + 1);
      const double c2 = 1.0 - std::pow(b2, step + 1);
      for (std::size_t i = 0; i < n_params; ++i) {
        const double gi = gmean[i];
        adam_m[i] = b1 * adam_m[i] + (1.0 - b1) * gi;
        adam_v[i] = b2 * adam_v[i] + (1.0 - b2) * gi * gi;
        ckpt.params[i] -= lr * (adam_m[i] / c1) / (std::sqrt(adam_v[i] / c2) + eps);
      }
    }
  }

  ckpt.step += static_cast<std::uint64_t>(cfg.steps);
  std::string tag = "train(steps=" + std::to_string(cfg.steps) +
                    ", lr=" + fmt_short(cfg.base_lr) +
                    ", samples=" + std::to_string(n);
  if (!note.empty()) tag += ", " + std::string(note);
  tag += ")";
  ckpt.provenance = init && !init->provenance.empty()
                        ? init->provenance + " -> " + tag
                        : tag;
  return ckpt;
}

Checkpoint finetune(const Checkpoint& base, const std::vector<TrainSample>& data,
                    const ClassTable& classes, const FinetuneProfile& profile,
                    std::string_view note, int jobs) {
  if (!(profile.steps_fraction >= 0.0) || !(profile.lr_fraction > 0.0))
    throw ConfigError("finetune fractions must be positive");
  LearnerConfig cfg = base.config;
  cfg.steps = static_cast<int>(
      std::ceil(base.config.steps * profile.steps_fraction - 1e-9));
  cfg.base_lr = base.config.base_lr * profile.lr_fraction;
  Checkpoint out = train(data, cfg, classes, &base, note, jobs);
  out.config = base.config;  // the schedule tweak is not a config change
  std::string tag = "finetune(steps=" + std::to_string(cfg.steps) +
                    ", lr=" + fmt_short(cfg.base_lr) +
                    ", samples=" + std::to_string(data.size());
  if (!note.empty()) tag += ", " + std::string(note);
  tag += ")";
  out.provenance = base.provenance.empty() ? tag : base.provenance + " -> " + tag;
  return out;
}

}  // namespace iterseg::model
