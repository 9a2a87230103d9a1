#pragma once

// Frame transform codec: convolutional analysis/synthesis transforms, the
// rounding quantizer and its additive-noise training relaxation, and the
// rate-distortion training loop for the transform and its hyperprior.

#include <chrono>
#include <cmath>
#include <functional>
#include <vector>

#include "kfd/core.hpp"
#include "kfd/hyperprior.hpp"

namespace kfd {

struct IntTensor {
  nn::Shape shape;
  std::vector<int> data;
  size_t numel() const { return data.size(); }
};

struct CodecConfig {
  int latent_channels = 16;
  int hidden = 48;
  int hyper_channels = 8;
  int hyper_hidden = 32;
  int downsample = 4;  // power of two; one stride-2 stage per factor of two

  int stages() const {
    int s = 0, f = downsample;
    while (f > 1) {
      if (f % 2) throw ConfigError("downsample factor must be a power of two");
      f /= 2;
      ++s;
    }
    return s;
  }

  static CodecConfig paper() {
    CodecConfig c;
    c.latent_channels = 64;
    c.hidden = 128;
    c.hyper_channels = 32;
    c.hyper_hidden = 96;
    c.downsample = 8;
    return c;
  }

  nlohmann::json to_json() const {
    return {{"latent_channels", latent_channels}, {"hidden", hidden}, {"hyper_channels", hyper_channels},
            {"hyper_hidden", hyper_hidden}, {"downsample", downsample}};
  }
  static CodecConfig from_json(const nlohmann::json& j) {
    CodecConfig c;
    c.latent_channels = j.at("latent_channels");
    c.hidden = j.at("hidden");
    c.hyper_channels = j.at("hyper_channels");
    c.hyper_hidden = j.at("hyper_hidden");
    c.downsample = j.at("downsample");
    return c;
  }
};

/// Analysis maps [B, H, W, 1] to [B, H/f, W/f, C]; synthesis inverts the
/// shape map. Synthesis halves its width at each upsampling stage.
struct TransformParams {
  CodecConfig cfg;
  std::vector<nn::Conv2d> analysis;   // strided stages, then projection to C
  std::vector<nn::Conv2d> synthesis;  // projection from C, upsampling stages, output

  TransformParams() = default;
  TransformParams(const CodecConfig& c, Rng& rng) : cfg(c) {
    const int s = c.stages();
    int in = 1;
    for (int i = 0; i < s; ++i) {
      analysis.emplace_back(in, c.hidden, 5, 2, rng);
      in = c.hidden;
    }
    analysis.emplace_back(in, c.latent_channels, 3, 1, rng);
    int w = c.hidden;
    synthesis.emplace_back(c.latent_channels, w, 3, 1, rng);
    for (int i = 0; i < s; ++i) {
      const int out = std::max(8, w / (i + 1 == s ? 2 : 1));
      synthesis.emplace_back(w, out * 4, 3, 1, rng);
      w = out;
    }
    synthesis.emplace_back(w, 1, 3, 1, rng);
  }

  int factor() const { return cfg.downsample; }

  void collect(const std::string& prefix, nn::ParamList& out) {
    for (size_t i = 0; i < analysis.size(); ++i) analysis[i].collect(prefix + ".ga" + std::to_string(i), out);
    for (size_t i = 0; i < synthesis.size(); ++i) synthesis[i].collect(prefix + ".gs" + std::to_string(i), out);
  }
};

inline nn::Var analyze(const nn::Var& x, const TransformParams& p) {
  if (x.value().rank() != 4 || x.shape()[3] != 1) throw ConfigError("analyze: expected [B, H, W, 1]");
  if (x.shape()[1] % p.factor() || x.shape()[2] % p.factor())
    throw ConfigError("analyze: spatial dims must be divisible by the downsample factor");
  for (float v : x.value().data)
    if (!std::isfinite(v)) throw DataError("analyze: non-finite input");
  nn::Var h = x;
  for (size_t i = 0; i + 1 < p.analysis.size(); ++i) h = nn::silu(p.analysis[i](h));
  return p.analysis.back()(h);
}

inline nn::Var synthesize(const nn::Var& y, const TransformParams& p) {
  if (y.value().rank() != 4 || y.shape()[3] != p.cfg.latent_channels)
    throw ConfigError("synthesize: expected [B, h, w, " + std::to_string(p.cfg.latent_channels) + "], got " +
                      nn::shape_str(y.shape()));
  nn::Var h = nn::silu(p.synthesis.front()(y));
  for (size_t i = 1; i + 1 < p.synthesis.size(); ++i) h = nn::silu(nn::pixel_shuffle(p.synthesis[i](h), 2));
  return p.synthesis.back()(h);
}

/// Nearest integer, ties away from zero.
inline IntTensor quantize(const nn::Tensor& latent) {
  IntTensor q{latent.shape, std::vector<int>(latent.numel())};
  for (size_t i = 0; i < latent.numel(); ++i) {
    if (!std::isfinite(latent[i])) throw DataError("quantize: non-finite latent");
    q.data[i] = static_cast<int>(std::round(latent[i]));
  }
  return q;
}

inline nn::Tensor to_float(const IntTensor& q) {
  nn::Tensor t(q.shape);
  for (size_t i = 0; i < q.numel(); ++i) t[i] = static_cast<float>(q.data[i]);
  return t;
}

/// Training-time stand-in for quantize: adds iid Uniform(-0.5, 0.5) noise.
inline nn::Var relax_quantize(const nn::Var& latent, Rng& rng) {
  nn::Tensor noise(latent.shape());
  for (auto& v : noise.data) v = static_cast<float>(rng.uniform(-0.5, 0.5));
  return nn::add(latent, nn::constant(std::move(noise)));
}

struct CodecModel {
  TransformParams transform;
  HyperpriorParams hyper;

  CodecModel() = default;
  CodecModel(const CodecConfig& c, Rng& rng)
      : transform(c, rng), hyper(c.latent_channels, c.hyper_channels, c.hyper_hidden, rng) {}

  const CodecConfig& config() const { return transform.cfg; }

  nn::ParamList params() {
    nn::ParamList p;
    transform.collect("transform", p);
    hyper.collect("hyper", p);
    return p;
  }

  std::vector<uint8_t> save() {
    nlohmann::json cfg = {{"kind", "transform-codec"}, {"codec", config().to_json()}};
    return nn::encode_checkpoint(cfg, params());
  }

  static CodecModel load(std::span<const uint8_t> bytes) {
    const auto cfg = nn::decode_checkpoint(bytes, nullptr);
    if (cfg.value("kind", "") != "transform-codec") throw FormatError("not a transform-codec checkpoint");
    Rng rng(0);
    CodecModel m(CodecConfig::from_json(cfg.at("codec")), rng);
    auto p = m.params();
    nn::decode_checkpoint(bytes, &p);
    return m;
  }
};

// ---------------------------------------------------------------------------
// Stage-1 training

struct RDTrainConfig {
  double lambda_init = 2e-4;  // weight of bits per pixel against MSE
  int lambda_double_at = 1500;
  double lr_init = 1e-3;
  double lr_decay_factor = 0.5;
  int lr_decay_every = 1000;
  int total_iters = 3000;
  int patch_h = 32, patch_w = 32;
  int batch = 8;
  uint64_t seed = 1;
  int log_every = 100;
  int val_patches = 64;

  void validate() const {
    require(lambda_init > 0 && lambda_double_at > 0 && lr_init > 0 && lr_decay_factor > 0 && lr_decay_every > 0 &&
                total_iters > 0 && patch_h > 0 && patch_w > 0 && batch > 0,
            "RDTrainConfig: all values must be positive");
  }

  double lambda_at(int iter) const { return iter >= lambda_double_at ? 2.0 * lambda_init : lambda_init; }
  double lr_at(int iter) const { return lr_init * std::pow(lr_decay_factor, iter / lr_decay_every); }
};

struct TrainTracePoint {
  int iter;
  double lambda;
  double train_loss;
  double val_loss, val_mse, val_bpp;
};

/// Normalized frames used as the stage-1 corpus.
struct FrameCorpus {
  size_t height = 0, width = 0;
  std::vector<std::vector<double>> frames;

  static FrameCorpus from_field(const ScalarField& f) {
    FrameCorpus c;
    c.height = f.height;
    c.width = f.width;
    for (size_t v = 0; v < f.vars; ++v)
      for (size_t t = 0; t < f.times; ++t) {
        FrameNormalization n;
        c.frames.push_back(normalize_frame(f.frame(v, t), n));
      }
    return c;
  }
};

/// Mirror index into [0, n) without repeating the edge sample.
inline size_t reflect_index(long i, size_t n) {
  if (n == 1) return 0;
  const long period = 2 * static_cast<long>(n) - 2;
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<size_t>(m < static_cast<long>(n) ? m : period - m);
}

/// Crop a patch at (y0, x0) using reflection for samples outside the frame.
inline void crop_reflect(std::span<const double> frame, size_t h, size_t w, long y0, long x0, int ph, int pw,
                         float* out) {
  for (int y = 0; y < ph; ++y)
    for (int x = 0; x < pw; ++x)
      out[y * pw + x] = static_cast<float>(frame[reflect_index(y0 + y, h) * w + reflect_index(x0 + x, w)]);
}

inline void sample_patches(const FrameCorpus& corpus, size_t frame_lo, size_t frame_hi, int count, int ph, int pw,
                           Rng& rng, nn::Tensor& out) {
  out = nn::Tensor(nn::Shape{count, ph, pw, 1});
  for (int b = 0; b < count; ++b) {
    const size_t fi = static_cast<size_t>(rng.uniform_int(frame_lo, frame_hi - 1));
    // Frames smaller than the patch are reflection padded; offsets start at 0.
    const long y0 = corpus.height > static_cast<size_t>(ph) ? rng.uniform_int(0, corpus.height - ph) : 0;
    const long x0 = corpus.width > static_cast<size_t>(pw) ? rng.uniform_int(0, corpus.width - pw) : 0;
    crop_reflect(corpus.frames[fi], corpus.height, corpus.width, y0, x0, ph, pw, out.ptr() + (size_t)b * ph * pw);
  }
}

struct RDLoss {
  nn::Var loss;
  double mse = 0, bpp = 0;
};

/// MSE + lambda * (R_y + R_z) / pixels with the noise relaxation on y and z.
inline RDLoss rd_loss(CodecModel& m, const nn::Tensor& x, double lambda, Rng& rng) {
  nn::Var xv = nn::constant(x);
  nn::Var y = analyze(xv, m.transform);
  nn::Var z = hyper_analyze(y, m.hyper);
  nn::Var z_tilde = relax_quantize(z, rng);
  nn::Var y_tilde = relax_quantize(y, rng);
  MeanScale ms = hyper_synthesize(z_tilde, m.hyper);
  nn::Var x_hat = synthesize(y_tilde, m.transform);
  nn::Var d = nn::mse(x_hat, x);
  nn::Var bits = nn::add(gaussian_rate_bits(y_tilde, ms.mu, ms.sigma), m.hyper.density.rate_bits(z_tilde));
  const float pixels = static_cast<float>(x.numel());
  nn::Var loss = nn::add(d, nn::scale(bits, static_cast<float>(lambda) / pixels));
  return {loss, d.value()[0], bits.value()[0] / pixels};
}

struct Stage1Result {
  CodecModel model;
  std::vector<TrainTracePoint> trace;
  double init_val_loss = 0, final_val_loss = 0;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Rate-distortion training of transform and hyperprior on normalized frames.
/// The last tenth of the frames is held out for validation.
inline Stage1Result train_stage1(const FrameCorpus& corpus, const CodecConfig& codec_cfg, const RDTrainConfig& cfg,
                                 const ProgressFn& progress = {}) {
  cfg.validate();
  if (corpus.frames.size() < 2) throw DataError("train_stage1: corpus needs at least two frames");
  Rng rng(cfg.seed);
  Stage1Result res{CodecModel(codec_cfg, rng), {}, 0, 0};
  CodecModel& m = res.model;
  const size_t n_val = std::max<size_t>(1, corpus.frames.size() / 10);
  const size_t n_train = corpus.frames.size() - n_val;

  Rng vrng(derive_seed(cfg.seed, 7));
  nn::Tensor val;
  sample_patches(corpus, n_train, corpus.frames.size(), cfg.val_patches, cfg.patch_h, cfg.patch_w, vrng, val);
  auto evaluate = [&](double lambda) {
    nn::NoGradGuard ng;
    Rng erng(derive_seed(cfg.seed, 11));
    RDLoss l = rd_loss(m, val, lambda, erng);
    return l;
  };
  {
    const RDLoss l0 = evaluate(cfg.lambda_at(0));
    res.init_val_loss = l0.loss.value()[0];
  }

  nn::Adam opt(m.params());
  double running = 0;
  for (int it = 0; it < cfg.total_iters; ++it) {
    const double lambda = cfg.lambda_at(it);
    nn::Tensor x;
    sample_patches(corpus, 0, n_train, cfg.batch, cfg.patch_h, cfg.patch_w, rng, x);
    opt.zero_grad();
    RDLoss l = rd_loss(m, x, lambda, rng);
    const double lv = l.loss.value()[0];
    if (!std::isfinite(lv)) throw TrainingError("train_stage1: loss diverged at iteration " + std::to_string(it));
    nn::backward(l.loss);
    opt.step(static_cast<float>(cfg.lr_at(it)), 1.0f);
    running = it == 0 ? lv : 0.95 * running + 0.05 * lv;
    if ((it + 1) % cfg.log_every == 0 || it + 1 == cfg.total_iters) {
      const RDLoss v = evaluate(lambda);
      res.trace.push_back({it + 1, lambda, running, v.loss.value()[0], v.mse, v.bpp});
      if (progress)
        progress("stage1 iter " + std::to_string(it + 1) + " loss " + std::to_string(running) + " val_mse " +
                 std::to_string(v.mse) + " val_bpp " + std::to_string(v.bpp));
    }
  }
  res.final_val_loss = evaluate(cfg.lambda_at(0)).loss.value()[0];
  return res;
}

}  // namespace kfd
