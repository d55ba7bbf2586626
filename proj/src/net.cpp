// Fully convolutional hourglass with three prediction heads. Channel-planar
// doubles throughout; every hot loop goes through the dispatched kernels.
//
// stem  conv3 3->C                 @ full
// enc1  pool2, conv3 C->2C, res    @ 1/2
// enc2  pool2, conv3 2C->4C, res^D @ 1/4
// dec1  up2, conv3 4C->2C, +skip   @ 1/2
// dec0  up2, conv3 2C->C, +skip    @ full
// heads conv3 C->C + conv1 to K+1 / 1 / 2
//
// Residual blocks are y = x + gate * conv_b(relu(conv_a(x))); the gate
// implements stochastic depth. Inputs are zero-padded to multiples of four
// and outputs cropped back.

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "iterseg/errors.hpp"
#include "iterseg/kernels.hpp"
#include "iterseg/model.hpp"
#include "iterseg/rng.hpp"
#include "iterseg/textcfg.hpp"

namespace iterseg::model {

namespace {

using kern::active_kernels;

struct ConvSpec {
  int cout = 0, cin = 0, k = 0;
  std::size_t w_off = 0, b_off = 0;
  std::size_t wsize() const {
    return static_cast<std::size_t>(cout) * cin * k * k;
  }
};

struct Layout {
  std::vector<ConvSpec> convs;
  std::size_t total = 0;
  int stem = 0, enc1 = 0, res1a = 0, res1b = 0, enc2 = 0, res2 = 0;
  int dec1 = 0, dec0 = 0, semh = 0, semo = 0, ctrh = 0, ctro = 0, offh = 0,
      offo = 0;
};

Layout make_layout(const LearnerConfig& cfg) {
  const int c = cfg.capacity;
  const int k = cfg.class_count + 1;
  Layout lay;
  std::size_t off = 0;
  auto add = [&](int cout, int cin, int ksz) {
    ConvSpec s;
    s.cout = cout;
    s.cin = cin;
    s.k = ksz;
    s.w_off = off;
    s.b_off = off + s.wsize();
    off = s.b_off + cout;
    lay.convs.push_back(s);
    return static_cast<int>(lay.convs.size()) - 1;
  };
  lay.stem = add(c, 3, 3);
  lay.enc1 = add(2 * c, c, 3);
  lay.res1a = add(2 * c, 2 * c, 3);
  lay.res1b = add(2 * c, 2 * c, 3);
  lay.enc2 = add(4 * c, 2 * c, 3);
  lay.res2 = static_cast<int>(lay.convs.size());
  for (int d = 0; d < cfg.depth; ++d) {
    add(4 * c, 4 * c, 3);
    add(4 * c, 4 * c, 3);
  }
  lay.dec1 = add(2 * c, 4 * c, 3);
  lay.dec0 = add(c, 2 * c, 3);
  lay.semh = add(c, c, 3);
  lay.semo = add(k, c, 1);
  lay.ctrh = add(c, c, 3);
  lay.ctro = add(1, c, 1);
  lay.offh = add(c, c, 3);
  lay.offo = add(2, c, 1);
  lay.total = off;
  return lay;
}

Planes pad1(const Planes& src) {
  Planes out(src.ch, src.rows + 2, src.cols + 2, 0.0);
  for (int c = 0; c < src.ch; ++c)
    for (int r = 0; r < src.rows; ++r)
      std::memcpy(out.plane(c) + static_cast<std::size_t>(r + 1) * out.cols + 1,
                  src.plane(c) + static_cast<std::size_t>(r) * src.cols,
                  sizeof(double) * src.cols);
  return out;
}

Planes conv3(const Planes& src, const double* params, const ConvSpec& s) {
  const Planes padded = pad1(src);
  Planes out(s.cout, src.rows, src.cols);
  active_kernels().conv3x3_fwd(padded.data.data(), s.cin, params + s.w_off,
                               params + s.b_off, out.data.data(), s.cout,
                               src.rows, src.cols);
  return out;
}

Planes conv1(const Planes& src, const double* params, const ConvSpec& s) {
  Planes out(s.cout, src.rows, src.cols);
  active_kernels().conv1x1_fwd(src.data.data(), s.cin, params + s.w_off,
                               params + s.b_off, out.data.data(), s.cout,
                               src.plane_size());
  return out;
}

// Gradient wrt a 3x3 conv's input: correlate the padded output gradient with
// the flipped, transposed weights.
Planes conv3_bwd_input(const Planes& gout, const double* params,
                       const ConvSpec& s) {
  std::vector<double> wt(s.wsize());
  for (int co = 0; co < s.cout; ++co)
    for (int ci = 0; ci < s.cin; ++ci)
      for (int t = 0; t < 9; ++t)
        wt[(static_cast<std::size_t>(ci) * s.cout + co) * 9 + (8 - t)] =
            params[s.w_off + (static_cast<std::size_t>(co) * s.cin + ci) * 9 + t];
  const Planes padded = pad1(gout);
  Planes gin(s.cin, gout.rows, gout.cols);
  active_kernels().conv3x3_fwd(padded.data.data(), s.cout, wt.data(), nullptr,
                               gin.data.data(), s.cin, gout.rows, gout.cols);
  return gin;
}

Planes conv1_bwd_input(const Planes& gout, const double* params,
                       const ConvSpec& s) {
  std::vector<double> wt(static_cast<std::size_t>(s.cin) * s.cout);
  for (int co = 0; co < s.cout; ++co)
    for (int ci = 0; ci < s.cin; ++ci)
      wt[static_cast<std::size_t>(ci) * s.cout + co] =
          params[s.w_off + static_cast<std::size_t>(co) * s.cin + ci];
  Planes gin(s.cin, gout.rows, gout.cols);
  active_kernels().conv1x1_fwd(gout.data.data(), s.cout, wt.data(), nullptr,
                               gin.data.data(), s.cin, gout.plane_size());
  return gin;
}

void conv3_grad_wb(const Planes& src, const Planes& gout, const ConvSpec& s,
                   double* grad) {
  const Planes padded = pad1(src);
  active_kernels().conv3x3_grad_wb(padded.data.data(), s.cin,
                                   gout.data.data(), s.cout, src.rows,
                                   src.cols, grad + s.w_off, grad + s.b_off);
}

void conv1_grad_wb(const Planes& src, const Planes& gout, const ConvSpec& s,
                   double* grad) {
  active_kernels().conv1x1_grad_wb(src.data.data(), s.cin, gout.data.data(),
                                   s.cout, src.plane_size(), grad + s.w_off,
                                   grad + s.b_off);
}

void relu_inplace(Planes& p) {
  active_kernels().relu_fwd(p.data.data(), p.data.data(), p.data.size());
}

// gy masked in place by the forward output y.
void relu_backward_inplace(const Planes& y, Planes& gy) {
  active_kernels().relu_bwd(y.data.data(), gy.data.data(), gy.data.data(),
                            gy.data.size());
}

Planes avgpool2(const Planes& in) {
  Planes out(in.ch, in.rows / 2, in.cols / 2);
  for (int c = 0; c < in.ch; ++c)
    for (int y = 0; y < out.rows; ++y) {
      const double* r0 = in.plane(c) + static_cast<std::size_t>(2 * y) * in.cols;
      const double* r1 = r0 + in.cols;
      double* orow = out.plane(c) + static_cast<std::size_t>(y) * out.cols;
      for (int x = 0; x < out.cols; ++x)
        orow[x] = ((r0[2 * x] + r0[2 * x + 1]) + (r1[2 * x] + r1[2 * x + 1])) * 0.25;
    }
  return out;
}

Planes avgpool2_adjoint(const Planes& gout, int rows, int cols) {
  Planes gin(gout.ch, rows, cols);
  for (int c = 0; c < gout.ch; ++c)
    for (int y = 0; y < gout.rows; ++y) {
      const double* grow = gout.plane(c) + static_cast<std::size_t>(y) * gout.cols;
      double* r0 = gin.plane(c) + static_cast<std::size_t>(2 * y) * cols;
      double* r1 = r0 + cols;
      for (int x = 0; x < gout.cols; ++x) {
        const double g = grow[x] * 0.25;
        r0[2 * x] = g;
        r0[2 * x + 1] = g;
        r1[2 * x] = g;
        r1[2 * x + 1] = g;
      }
    }
  return gin;
}

Planes upsample2(const Planes& in) {
  Planes out(in.ch, in.rows * 2, in.cols * 2);
  for (int c = 0; c < in.ch; ++c)
    active_kernels().bilinear_resize(in.plane(c), in.rows, in.cols,
                                     out.plane(c), out.rows, out.cols);
  return out;
}

Planes upsample2_adjoint(const Planes& gout, int rows, int cols) {
  Planes gin(gout.ch, rows, cols, 0.0);
  const double ry = static_cast<double>(rows) / gout.rows;
  const double rx = static_cast<double>(cols) / gout.cols;
  for (int c = 0; c < gout.ch; ++c) {
    const double* gp = gout.plane(c);
    double* ip = gin.plane(c);
    for (int y = 0; y < gout.rows; ++y) {
      const double sy = (y + 0.5) * ry - 0.5;
      const double fy0 = std::floor(sy);
      const double wy = sy - fy0;
      const int y0 = std::clamp(static_cast<int>(fy0), 0, rows - 1);
      const int y1 = std::clamp(static_cast<int>(fy0) + 1, 0, rows - 1);
      for (int x = 0; x < gout.cols; ++x) {
        const double sx = (x + 0.5) * rx - 0.5;
        const double fx0 = std::floor(sx);
        const double wx = sx - fx0;
        const int x0 = std::clamp(static_cast<int>(fx0), 0, cols - 1);
        const int x1 = std::clamp(static_cast<int>(fx0) + 1, 0, cols - 1);
        const double g = gp[static_cast<std::size_t>(y) * gout.cols + x];
        ip[static_cast<std::size_t>(y0) * cols + x0] += g * ((1.0 - wx) * (1.0 - wy));
        ip[static_cast<std::size_t>(y0) * cols + x1] += g * (wx * (1.0 - wy));
        ip[static_cast<std::size_t>(y1) * cols + x0] += g * ((1.0 - wx) * wy);
        ip[static_cast<std::size_t>(y1) * cols + x1] += g * (wx * wy);
      }
    }
  }
  return gin;
}

Planes vsum(const Planes& a, const Planes& b) {
  Planes out(a.ch, a.rows, a.cols);
  active_kernels().vadd(a.data.data(), b.data.data(), out.data.data(),
                        a.data.size());
  return out;
}

Planes scaled(const Planes& a, double s) {
  Planes out = a;
  active_kernels().vscale(s, out.data.data(), out.data.size());
  return out;
}

void add_into(Planes& dst, const Planes& src) {
  active_kernels().axpy(1.0, src.data.data(), dst.data.data(),
                        dst.data.size());
}

struct Acts {
  int rows = 0, cols = 0;    // original image size
  int prows = 0, pcols = 0;  // padded
  Planes x;                  // padded input
  Planes a0, p1, a1, r1t, r1, p2, a2;
  std::vector<Planes> rt;    // res2 inner activations
  std::vector<Planes> rout;  // res2 block outputs
  Planes up1, d1, s1, up0, d0, s0;
  Planes hs, hc, ho;
  Planes sem, ctr, off;      // head outputs at padded size
};

void check_gates(const LearnerConfig& cfg, const std::vector<double>& gates) {
  if (static_cast<int>(gates.size()) != residual_block_count(cfg))
    throw ShapeError("expected " + std::to_string(residual_block_count(cfg)) +
                     " residual gates, got " + std::to_string(gates.size()));
}

void run_forward(const LearnerConfig& cfg, const Layout& lay,
                 const std::vector<double>& params, const Image& image,
                 const std::vector<double>& gates, Acts& a) {
  if (params.size() != lay.total)
    throw ShapeError("parameter vector has " + std::to_string(params.size()) +
                     " values, config needs " + std::to_string(lay.total));
  check_gates(cfg, gates);
  if (image.rows() <= 0 || image.cols() <= 0) throw SizeError("empty image");
  for (const double v : image.px.data)
    if (!std::isfinite(v)) throw NumericError("non-finite image value");

  const double* p = params.data();
  a.rows = image.rows();
  a.cols = image.cols();
  a.prows = (a.rows + 3) & ~3;
  a.pcols = (a.cols + 3) & ~3;
  a.x = Planes(3, a.prows, a.pcols, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < a.rows; ++r)
      std::memcpy(a.x.plane(c) + static_cast<std::size_t>(r) * a.pcols,
                  image.px.plane(c) + static_cast<std::size_t>(r) * a.cols,
                  sizeof(double) * a.cols);

  a.a0 = conv3(a.x, p, lay.convs[lay.stem]);
  relu_inplace(a.a0);
  a.p1 = avgpool2(a.a0);
  a.a1 = conv3(a.p1, p, lay.convs[lay.enc1]);
  relu_inplace(a.a1);

  a.r1t = conv3(a.a1, p, lay.convs[lay.res1a]);
  relu_inplace(a.r1t);
  a.r1 = vsum(a.a1, scaled(conv3(a.r1t, p, lay.convs[lay.res1b]), gates[0]));

  a.p2 = avgpool2(a.r1);
  a.a2 = conv3(a.p2, p, lay.convs[lay.enc2]);
  relu_inplace(a.a2);

  a.rt.clear();
  a.rout.clear();
  a.rt.reserve(static_cast<std::size_t>(cfg.depth));
  a.rout.reserve(static_cast<std::size_t>(cfg.depth));
  const Planes* cur = &a.a2;
  for (int d = 0; d < cfg.depth; ++d) {
    Planes t = conv3(*cur, p, lay.convs[lay.res2 + 2 * d]);
    relu_inplace(t);
    Planes out = vsum(
        *cur, scaled(conv3(t, p, lay.convs[lay.res2 + 2 * d + 1]), gates[1 + d]));
    a.rt.push_back(std::move(t));
    a.rout.push_back(std::move(out));
    cur = &a.rout.back();
  }

  a.up1 = upsample2(*cur);
  a.d1 = conv3(a.up1, p, lay.convs[lay.dec1]);
  relu_inplace(a.d1);
  a.s1 = vsum(a.d1, a.r1);

  a.up0 = upsample2(a.s1);
  a.d0 = conv3(a.up0, p, lay.convs[lay.dec0]);
  relu_inplace(a.d0);
  a.s0 = vsum(a.d0, a.a0);

  a.hs = conv3(a.s0, p, lay.convs[lay.semh]);
  relu_inplace(a.hs);
  a.sem = conv1(a.hs, p, lay.convs[lay.semo]);
  a.hc = conv3(a.s0, p, lay.convs[lay.ctrh]);
  relu_inplace(a.hc);
  a.ctr = conv1(a.hc, p, lay.convs[lay.ctro]);
  a.ho = conv3(a.s0, p, lay.convs[lay.offh]);
  relu_inplace(a.ho);
  a.off = conv1(a.ho, p, lay.convs[lay.offo]);
}

// Loss over the cropped region of padded head outputs; gradients (padded
// size, zero outside the crop) are written when the out-params are non-null.
LossBreakdown output_loss(const Planes& sem, const Planes& ctr,
                          const Planes& off, const TrainingTargets& tgt,
                          const LearnerConfig& cfg, Planes* gsem, Planes* gctr,
                          Planes* goff) {
  const int rows = tgt.semantic.rows;
  const int cols = tgt.semantic.cols;
  const int k = sem.ch;
  if (tgt.heatmap.rows != rows || tgt.heatmap.cols != cols ||
      tgt.offsets.rows != rows || tgt.offsets.cols != cols ||
      tgt.offsets.ch != 2 || tgt.thing_mask.rows != rows ||
      tgt.thing_mask.cols != cols)
    throw ShapeError("inconsistent target shapes");
  if (sem.rows < rows || sem.cols < cols)
    throw ShapeError("prediction smaller than targets");
  if (k != cfg.class_count + 1)
    throw ShapeError("semantic plane count does not match config");

  std::size_t valid = 0;
  std::size_t masked = 0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      if (tgt.semantic.at(r, c) != 0) ++valid;
      if (tgt.thing_mask.at(r, c)) ++masked;
      if (tgt.semantic.at(r, c) > cfg.class_count)
        throw ShapeError("semantic target index out of range");
    }

  LossBreakdown lb;
  const double sem_scale = valid ? 1.0 / static_cast<double>(valid) : 0.0;
  const double ctr_scale = 1.0 / (static_cast<double>(rows) * cols);
  const double off_scale = masked ? 1.0 / static_cast<double>(masked) : 0.0;

  std::vector<double> logits(k), probs(k);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      // Center head: every pixel.
      const double pc = ctr.at(0, r, c);
      const double tc = tgt.heatmap.at(r, c);
      if (!std::isfinite(pc) || !std::isfinite(tc))
        throw NumericError("non-finite center value");
      lb.center += (pc - tc) * (pc - tc) * ctr_scale;
      if (gctr)
        gctr->at(0, r, c) = cfg.lambda_center * 2.0 * (pc - tc) * ctr_scale;

      // Offset head: thing pixels.
      if (tgt.thing_mask.at(r, c)) {
        for (int d = 0; d < 2; ++d) {
          const double po = off.at(d, r, c);
          const double to = tgt.offsets.at(d, r, c);
          if (!std::isfinite(po) || !std::isfinite(to))
            throw NumericError("non-finite offset value");
          const double diff = po - to;
          lb.offset += std::abs(diff) * off_scale;
          if (goff)
            goff->at(d, r, c) = cfg.lambda_offset * off_scale *
                                (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0));
        }
      }

      // Semantic head: non-void pixels.
      const int t = tgt.semantic.at(r, c);
      if (t == 0) {
        for (int ch = 0; ch < k; ++ch)
          if (!std::isfinite(sem.at(ch, r, c)))
            throw NumericError("non-finite semantic logit");
        continue;
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (int ch = 0; ch < k; ++ch) {
        logits[ch] = sem.at(ch, r, c);
        if (!std::isfinite(logits[ch]))
          throw NumericError("non-finite semantic logit");
        mx = std::max(mx, logits[ch]);
      }
      double z = 0.0;
      for (int ch = 0; ch < k; ++ch) {
        probs[ch] = std::exp(logits[ch] - mx);
        z += probs[ch];
      }
      lb.semantic += (std::log(z) - (logits[t] - mx)) * sem_scale;
      if (gsem)
        for (int ch = 0; ch < k; ++ch)
          gsem->at(ch, r, c) = cfg.lambda_semantic * sem_scale *
                               (probs[ch] / z - (ch == t ? 1.0 : 0.0));
    }

  lb.total = cfg.lambda_semantic * lb.semantic + cfg.lambda_center * lb.center +
             cfg.lambda_offset * lb.offset;
  if (!std::isfinite(lb.total)) throw NumericError("non-finite loss");
  return lb;
}

}  // namespace

void PredictionVolume::validate() const {
  if (semantic_logits.rows != center_heatmap.rows ||
      semantic_logits.cols != center_heatmap.cols ||
      offsets.rows != center_heatmap.rows ||
      offsets.cols != center_heatmap.cols || offsets.ch != 2 ||
      semantic_logits.ch < 2)
    throw ShapeError("inconsistent prediction volume shapes");
  for (const double v : semantic_logits.data)
    if (!std::isfinite(v)) throw NumericError("non-finite semantic logit");
  for (const double v : center_heatmap.data)
    if (!std::isfinite(v)) throw NumericError("non-finite heatmap value");
  for (const double v : offsets.data)
    if (!std::isfinite(v)) throw NumericError("non-finite offset value");
}

void LearnerConfig::validate() const {
  if (class_count < 1) throw ConfigError("class_count must be at least 1");
  if (capacity < 1) throw ConfigError("capacity must be at least 1");
  if (depth < 0) throw ConfigError("depth must be nonnegative");
  if (!(survival_prob > 0.0) || survival_prob > 1.0)
    throw ConfigError("survival_prob must be in (0, 1]");
  if (lambda_semantic < 0 || lambda_center < 0 || lambda_offset < 0)
    throw ConfigError("loss weights must be nonnegative");
  if (optimizer != "sgd" && optimizer != "adam")
    throw ConfigError("optimizer must be sgd or adam: " + optimizer);
  if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
  if (poly_power < 0) throw ConfigError("poly_power must be nonnegative");
  if (steps < 0) throw ConfigError("steps must be nonnegative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(scale_augment_min > 0) || scale_augment_max < scale_augment_min)
    throw ConfigError("bad scale augment range");
}

using textcfg::fmt_double;
using textcfg::parse_bool;
using textcfg::parse_double;
using textcfg::parse_ll;
using textcfg::parse_u64;

std::string LearnerConfig::serialize() const {
  std::ostringstream out;
  out << "class_count=" << class_count << '\n'
      << "capacity=" << capacity << '\n'
      << "depth=" << depth << '\n'
      << "survival_prob=" << fmt_double(survival_prob) << '\n'
      << "lambda_semantic=" << fmt_double(lambda_semantic) << '\n'
      << "lambda_center=" << fmt_double(lambda_center) << '\n'
      << "lambda_offset=" << fmt_double(lambda_offset) << '\n'
      << "optimizer=" << optimizer << '\n'
      << "base_lr=" << fmt_double(base_lr) << '\n'
      << "poly_power=" << fmt_double(poly_power) << '\n'
      << "steps=" << steps << '\n'
      << "batch_size=" << batch_size << '\n'
      << "flip_augment=" << (flip_augment ? "true" : "false") << '\n'
      << "scale_augment_min=" << fmt_double(scale_augment_min) << '\n'
      << "scale_augment_max=" << fmt_double(scale_augment_max) << '\n'
      << "seed=" << seed << '\n';
  return out.str();
}

LearnerConfig LearnerConfig::deserialize(const std::string& text) {
  LearnerConfig cfg;
  std::istringstream in(text);
  std::string line;
  int seen = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("bad learner config line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    ++seen;
    if (key == "class_count") cfg.class_count = static_cast<int>(parse_ll(val, key));
    else if (key == "capacity") cfg.capacity = static_cast<int>(parse_ll(val, key));
    else if (key == "depth") cfg.depth = static_cast<int>(parse_ll(val, key));
    else if (key == "survival_prob") cfg.survival_prob = parse_double(val, key);
    else if (key == "lambda_semantic") cfg.lambda_semantic = parse_double(val, key);
    else if (key == "lambda_center") cfg.lambda_center = parse_double(val, key);
    else if (key == "lambda_offset") cfg.lambda_offset = parse_double(val, key);
    else if (key == "optimizer") cfg.optimizer = val;
    else if (key == "base_lr") cfg.base_lr = parse_double(val, key);
    else if (key == "poly_power") cfg.poly_power = parse_double(val, key);
    else if (key == "steps") cfg.steps = static_cast<int>(parse_ll(val, key));
    else if (key == "batch_size") cfg.batch_size = static_cast<int>(parse_ll(val, key));
    else if (key == "flip_augment") cfg.flip_augment = parse_bool(val, key);
    else if (key == "scale_augment_min") cfg.scale_augment_min = parse_double(val, key);
    else if (key == "scale_augment_max") cfg.scale_augment_max = parse_double(val, key);
    else if (key == "seed") cfg.seed = parse_u64(val, key);
    else throw ConfigError("unknown learner config key: " + key);
  }
  if (seen != 16) throw ConfigError("learner config must list all 16 keys");
  cfg.validate();
  return cfg;
}

std::size_t parameter_count(const LearnerConfig& cfg) {
  cfg.validate();
  return make_layout(cfg).total;
}

int residual_block_count(const LearnerConfig& cfg) { return 1 + cfg.depth; }

Checkpoint init_checkpoint(const LearnerConfig& cfg) {
  cfg.validate();
  const Layout lay = make_layout(cfg);
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.params.assign(lay.total, 0.0);
  Rng rng = Rng(cfg.seed).derive("init");
  for (std::size_t ci = 0; ci < lay.convs.size(); ++ci) {
    const ConvSpec& s = lay.convs[ci];
    double std = std::sqrt(2.0 / (static_cast<double>(s.cin) * s.k * s.k));
    if (s.k == 1) std *= 0.1;  // head projections start near zero
    for (std::size_t i = 0; i < s.wsize(); ++i)
      ckpt.params[s.w_off + i] = rng.normal() * std;
  }
  ckpt.provenance = "init(seed=" + std::to_string(cfg.seed) + ")";
  return ckpt;
}

PredictionVolume forward(const Checkpoint& ckpt, const Image& image) {
  ckpt.config.validate();
  const Layout lay = make_layout(ckpt.config);
  const std::vector<double> gates(
      static_cast<std::size_t>(residual_block_count(ckpt.config)),
      ckpt.config.survival_prob);
  Acts a;
  run_forward(ckpt.config, lay, ckpt.params, image, gates, a);

  PredictionVolume pred;
  pred.semantic_logits = Planes(ckpt.config.class_count + 1, a.rows, a.cols);
  pred.center_heatmap = GridD(a.rows, a.cols);
  pred.offsets = Planes(2, a.rows, a.cols);
  for (int ch = 0; ch < pred.semantic_logits.ch; ++ch)
    for (int r = 0; r < a.rows; ++r)
      std::memcpy(pred.semantic_logits.plane(ch) + static_cast<std::size_t>(r) * a.cols,
                  a.sem.plane(ch) + static_cast<std::size_t>(r) * a.pcols,
                  sizeof(double) * a.cols);
  for (int r = 0; r < a.rows; ++r)
    std::memcpy(pred.center_heatmap.row(r),
                a.ctr.plane(0) + static_cast<std::size_t>(r) * a.pcols,
                sizeof(double) * a.cols);
  for (int ch = 0; ch < 2; ++ch)
    for (int r = 0; r < a.rows; ++r)
      std::memcpy(pred.offsets.plane(ch) + static_cast<std::size_t>(r) * a.cols,
                  a.off.plane(ch) + static_cast<std::size_t>(r) * a.pcols,
                  sizeof(double) * a.cols);
  return pred;
}

LossBreakdown loss(const PredictionVolume& pred, const TrainingTargets& tgt,
                   const LearnerConfig& cfg) {
  if (pred.rows() != tgt.semantic.rows || pred.cols() != tgt.semantic.cols)
    throw ShapeError("prediction and target sizes differ");
  Planes ctr(1, pred.rows(), pred.cols());
  ctr.data = pred.center_heatmap.data;
  return output_loss(pred.semantic_logits, ctr, pred.offsets, tgt, cfg,
                     nullptr, nullptr, nullptr);
}

LossBreakdown loss_and_param_gradient(const LearnerConfig& cfg,
                                      const std::vector<double>& params,
                                      const Image& image,
                                      const TrainingTargets& tgt,
                                      const std::vector<double>& gates,
                                      std::vector<double>* grad) {
  cfg.validate();
  if (image.rows() != tgt.semantic.rows || image.cols() != tgt.semantic.cols)
    throw ShapeError("image and target sizes differ");
  const Layout lay = make_layout(cfg);
  Acts a;
  run_forward(cfg, lay, params, image, gates, a);

  if (!grad) {
    return output_loss(a.sem, a.ctr, a.off, tgt, cfg, nullptr, nullptr,
                       nullptr);
  }
  grad->assign(lay.total, 0.0);
  double* g = grad->data();

  Planes gsem(a.sem.ch, a.prows, a.pcols, 0.0);
  Planes gctr(1, a.prows, a.pcols, 0.0);
  Planes goff(2, a.prows, a.pcols, 0.0);
  const LossBreakdown lb =
      output_loss(a.sem, a.ctr, a.off, tgt, cfg, &gsem, &gctr, &goff);

  // Heads.
  conv1_grad_wb(a.hs, gsem, lay.convs[lay.semo], g);
  Planes ghs = conv1_bwd_input(gsem, params.data(), lay.convs[lay.semo]);
  relu_backward_inplace(a.hs, ghs);
  conv3_grad_wb(a.s0, ghs, lay.convs[lay.semh], g);
  Planes gs0 = conv3_bwd_input(ghs, params.data(), lay.convs[lay.semh]);

  conv1_grad_wb(a.hc, gctr, lay.convs[lay.ctro], g);
  Planes ghc = conv1_bwd_input(gctr, params.data(), lay.convs[lay.ctro]);
  relu_backward_inplace(a.hc, ghc);
  conv3_grad_wb(a.s0, ghc, lay.convs[lay.ctrh], g);
  add_into(gs0, conv3_bwd_input(ghc, params.data(), lay.convs[lay.ctrh]));

  conv1_grad_wb(a.ho, goff, lay.convs[lay.offo], g);
  Planes gho = conv1_bwd_input(goff, params.data(), lay.convs[lay.offo]);
  relu_backward_inplace(a.ho, gho);
  conv3_grad_wb(a.s0, gho, lay.convs[lay.offh], g);
  add_into(gs0, conv3_bwd_input(gho, params.data(), lay.convs[lay.offh]));

  // s0 = d0 + a0.
  Planes ga0_skip = gs0;
  Planes gd0 = std::move(gs0);
  relu_backward_inplace(a.d0, gd0);
  conv3_grad_wb(a.up0, gd0, lay.convs[lay.dec0], g);
  Planes gup0 = conv3_bwd_input(gd0, params.data(), lay.convs[lay.dec0]);
  Planes gs1 = upsample2_adjoint(gup0, a.s1.rows, a.s1.cols);

  // s1 = d1 + r1.
  Planes gr1_skip = gs1;
  Planes gd1 = std::move(gs1);
  relu_backward_inplace(a.d1, gd1);
  conv3_grad_wb(a.up1, gd1, lay.convs[lay.dec1], g);
  Planes gup1 = conv3_bwd_input(gd1, params.data(), lay.convs[lay.dec1]);
  Planes gcur = upsample2_adjoint(gup1, a.a2.rows, a.a2.cols);

  // Bottleneck residual chain, in reverse.
  for (int d = cfg.depth - 1; d >= 0; --d) {
    const Planes& in = d == 0 ? a.a2 : a.rout[d - 1];
    Planes gf = scaled(gcur, gates[1 + d]);
    conv3_grad_wb(a.rt[d], gf, lay.convs[lay.res2 + 2 * d + 1], g);
    Planes gt = conv3_bwd_input(gf, params.data(), lay.convs[lay.res2 + 2 * d + 1]);
    relu_backward_inplace(a.rt[d], gt);
    conv3_grad_wb(in, gt, lay.convs[lay.res2 + 2 * d], g);
    add_into(gcur, conv3_bwd_input(gt, params.data(), lay.convs[lay.res2 + 2 * d]));
  }

  Planes ga2 = std::move(gcur);
  relu_backward_inplace(a.a2, ga2);
  conv3_grad_wb(a.p2, ga2, lay.convs[lay.enc2], g);
  Planes gp2 = conv3_bwd_input(ga2, params.data(), lay.convs[lay.enc2]);
  Planes gr1 = avgpool2_adjoint(gp2, a.r1.rows, a.r1.cols);
  add_into(gr1, gr1_skip);

  // Half-resolution residual block.
  {
    Planes gf = scaled(gr1, gates[0]);
    conv3_grad_wb(a.r1t, gf, lay.convs[lay.res1b], g);
    Planes gt = conv3_bwd_input(gf, params.data(), lay.convs[lay.res1b]);
    relu_backward_inplace(a.r1t, gt);
    conv3_grad_wb(a.a1, gt, lay.convs[lay.res1a], g);
    add_into(gr1, conv3_bwd_input(gt, params.data(), lay.convs[lay.res1a]));
  }

  Planes ga1 = std::move(gr1);
  relu_backward_inplace(a.a1, ga1);
  conv3_grad_wb(a.p1, ga1, lay.convs[lay.enc1], g);
  Planes gp1 = conv3_bwd_input(ga1, params.data(), lay.convs[lay.enc1]);
  Planes ga0 = avgpool2_adjoint(gp1, a.a0.rows, a.a0.cols);
  add_into(ga0, ga0_skip);
  relu_backward_inplace(a.a0, ga0);
  conv3_grad_wb(a.x, ga0, lay.convs[lay.stem], g);

  return lb;
}

namespace {

void write_u32le(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {
      static_cast<unsigned char>(v & 0xff),
      static_cast<unsigned char>((v >> 8) & 0xff),
      static_cast<unsigned char>((v >> 16) & 0xff),
      static_cast<unsigned char>((v >> 24) & 0xff),
  };
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32le(std::istream& in, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw FormatError(std::string("truncated ") + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t read_u64le(std::istream& in, const char* what) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (in.gcount() != 8) throw FormatError(std::string("truncated ") + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::string_view(magic, 4) != "NSCK")
    throw FormatError("bad checkpoint magic in " + path.string());
  const int version = in.get();
  if (version != 1)
    throw FormatError("unsupported checkpoint version in " + path.string());

  const std::uint32_t cfg_len = read_u32le(in, "checkpoint config");
  if (cfg_len > (1u << 20)) throw SizeError("implausible config block");
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), cfg_len);
  if (static_cast<std::uint32_t>(in.gcount()) != cfg_len)
    throw FormatError("truncated checkpoint config");

  Checkpoint ckpt;
  ckpt.config = LearnerConfig::deserialize(cfg_text);
  ckpt.step = read_u64le(in, "checkpoint step");
  const std::uint64_t n = read_u64le(in, "checkpoint size");
  if (n != parameter_count(ckpt.config))
    throw ShapeError("checkpoint parameter count does not match its config");
  ckpt.params.resize(n);
  for (std::uint64_t i = 0; i < n; ++i)
    ckpt.params[i] = std::bit_cast<double>(read_u64le(in, "checkpoint params"));
  const std::uint32_t prov_len = read_u32le(in, "checkpoint provenance");
  if (prov_len > (1u << 24)) throw SizeError("implausible provenance block");
  ckpt.provenance.resize(prov_len);
  in.read(ckpt.provenance.data(), prov_len);
  if (static_cast<std::uint32_t>(in.gcount()) != prov_len)
    throw FormatError("truncated checkpoint provenance");
  if (in.get() != EOF) throw FormatError("trailing bytes in " + path.string());
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (ckpt.params.size() != parameter_count(ckpt.config))
    throw ShapeError("checkpoint parameter count does not match its config");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("NSCK", 4);
  out.put(1);
  const std::string cfg_text = ckpt.config.serialize();
  write_u32le(out, static_cast<std::uint32_t>(cfg_text.size()));
  out.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
  write_u64le(out, ckpt.step);
  write_u64le(out, ckpt.params.size());
  for (const double p : ckpt.params) write_u64le(out, std::bit_cast<std::uint64_t>(p));
  write_u32le(out, static_cast<std::uint32_t>(ckpt.provenance.size()));
  out.write(ckpt.provenance.data(),
            static_cast<std::streamsize>(ckpt.provenance.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

LearnerConfig enlarge(const LearnerConfig& cfg, double factor) {
  if (!(factor >= 1.0)) throw ConfigError("enlarge factor must be at least 1");
  LearnerConfig out = cfg;
  out.capacity = static_cast<int>(std::ceil(cfg.capacity * factor - 1e-9));
  return out;
}

}  // namespace iterseg::model
