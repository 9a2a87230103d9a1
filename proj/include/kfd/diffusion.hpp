#pragma once

// Conditional latent diffusion over frame sequences: noise schedule, forward
// process, a denoiser with factorized space-time attention, the masked
// training objective, and conditioned DDPM sampling over arbitrary step sets.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "kfd/keyframes.hpp"
#include "kfd/nn/layers.hpp"

namespace kfd {

// ---------------------------------------------------------------------------
// Schedule

struct NoiseSchedule {
  std::vector<double> betas;       // betas[t-1] for t = 1..T
  std::vector<double> alpha_bars;  // alpha_bars[t] for t = 0..T, alpha_bars[0] = 1

  int T() const { return static_cast<int>(betas.size()); }
  double alpha_bar(int t) const {
    if (t < 0 || t > T()) throw ConfigError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T()) + "]");
    return alpha_bars[t];
  }
};

inline NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("schedule: T must be positive");
  NoiseSchedule s;
  s.alpha_bars.push_back(1.0);
  for (double b : betas) {
    if (!(b >= 0.0 && b < 1.0)) throw ConfigError("schedule: beta outside [0, 1)");
    s.alpha_bars.push_back(s.alpha_bars.back() * (1.0 - b));
  }
  s.betas = std::move(betas);
  return s;
}

/// Linear betas from beta_start (t = 1) to beta_end (t = T).
inline NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule: T must be positive");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  std::vector<double> b(T);
  for (int t = 0; t < T; ++t) b[t] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (T - 1);
  return schedule_from_betas(std::move(b));
}

struct ScheduleConfig {
  int T = 200;
  double beta_start = 5e-4;
  double beta_end = 0.1;

  /// Linear range of the 1000-step reference schedule rescaled to T steps,
  /// which keeps the terminal signal level comparable.
  static ScheduleConfig scaled(int T) { return {T, 1e-4 * 1000.0 / T, 0.02 * 1000.0 / T}; }
  NoiseSchedule build() const { return build_schedule(T, beta_start, beta_end); }
};

/// sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps, elementwise.
inline std::vector<float> forward_sample(std::span<const float> y0, int t, std::span<const float> eps,
                                         const NoiseSchedule& s) {
  if (t < 1 || t > s.T()) throw ConfigError("forward_sample: t outside [1, T]");
  if (y0.size() != eps.size()) throw ConfigError("forward_sample: shape mismatch");
  const double a = std::sqrt(s.alpha_bars[t]), b = std::sqrt(1.0 - s.alpha_bars[t]);
  std::vector<float> out(y0.size());
  for (size_t i = 0; i < y0.size(); ++i) out[i] = static_cast<float>(a * y0[i] + b * eps[i]);
  return out;
}

/// S evenly spaced steps in {1..T} ending at T, ascending:
/// round(i * T / S) for i = 1..S.
inline std::vector<int> subsample_steps(int T, int S) {
  if (S < 1 || S > T) throw ConfigError("subsample_steps: need 1 <= S <= T");
  std::vector<int> r(S);
  for (int i = 1; i <= S; ++i) r[i - 1] = static_cast<int>((static_cast<int64_t>(2 * i) * T + S) / (2 * S));
  return r;
}

// ---------------------------------------------------------------------------
// Latent min-max normalization

struct LatentMinMax {
  int lo = 0, hi = 1;

  static LatentMinMax of(std::span<const int> v) {
    if (v.empty()) throw ConfigError("min-max of empty block");
    const auto [a, b] = std::minmax_element(v.begin(), v.end());
    LatentMinMax m{*a, *b};
    if (m.hi == m.lo) m.hi = m.lo + 1;
    return m;
  }

  float to_unit(int v) const { return static_cast<float>(2.0 * (v - lo) / (hi - lo) - 1.0); }
  double from_unit(double u) const { return (u + 1.0) * 0.5 * (hi - lo) + lo; }
  /// Inverse followed by rounding and clamping to [lo, hi].
  int to_int(double u) const {
    const long r = std::lround(from_unit(std::clamp(u, -1.0, 1.0)));
    return static_cast<int>(std::clamp<long>(r, lo, hi));
  }
};

// ---------------------------------------------------------------------------
// Denoiser

struct DenoiserConfig {
  int latent_channels = 16;
  int width = 48;
  int heads = 4;
  int blocks = 2;
  int temb_dim = 32;
  int pos_features = 4;  // sinusoidal frame-position features
  bool keyframe_prior = true;  // generated frames diffuse as offsets from keyframe_prior()
  ScheduleConfig schedule;

  static DenoiserConfig paper(int latent_channels) {
    DenoiserConfig c;
    c.latent_channels = latent_channels;
    c.width = 128;
    c.heads = 8;
    c.blocks = 4;
    c.temb_dim = 128;
    c.schedule = {1000, 1e-4, 0.02};
    return c;
  }

  nlohmann::json to_json() const {
    return {{"latent_channels", latent_channels}, {"width", width}, {"heads", heads}, {"blocks", blocks},
            {"temb_dim", temb_dim}, {"pos_features", pos_features}, {"keyframe_prior", keyframe_prior}, {"T", schedule.T},
            {"beta_start", schedule.beta_start}, {"beta_end", schedule.beta_end}};
  }
  static DenoiserConfig from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    c.latent_channels = j.at("latent_channels");
    c.width = j.at("width");
    c.heads = j.at("heads");
    c.blocks = j.at("blocks");
    c.temb_dim = j.at("temb_dim");
    c.pos_features = j.at("pos_features");
    c.keyframe_prior = j.value("keyframe_prior", false);
    c.schedule = {j.at("T"), j.at("beta_start"), j.at("beta_end")};
    return c;
  }
};

/// Sinusoidal embedding of a scalar; dim/2 sine and dim/2 cosine features.
inline void sinusoid(double x, int dim, double max_period, float* out) {
  const int half = dim / 2;
  for (int j = 0; j < half; ++j) {
    const double f = std::exp(-std::log(max_period) * j / half);
    out[j] = static_cast<float>(std::sin(x * f));
    out[half + j] = static_cast<float>(std::cos(x * f));
  }
}

struct ResBlock {
  nn::LayerNorm n1, n2;
  nn::Conv2d c1, c2;
  nn::Linear temb;
  ResBlock() = default;
  ResBlock(int w, Rng& rng) : n1(w), n2(w), c1(w, w, 3, 1, rng), c2(w, w, 3, 1, rng, 0.f), temb(w, w, rng) {}
  void collect(const std::string& p, nn::ParamList& out) {
    n1.collect(p + ".n1", out);
    n2.collect(p + ".n2", out);
    c1.collect(p + ".c1", out);
    c2.collect(p + ".c2", out);
    temb.collect(p + ".temb", out);
  }
};

/// Noise predictor over a batch of frame sequences laid out [B*N, h, w, C].
/// Each block is a residual conv pair conditioned on the timestep, spatial
/// self attention within each frame and temporal self attention across the
/// N frames at each latent position. Keyframe mask and frame position enter
/// as per-frame features.
class Denoiser {
 public:
  DenoiserConfig cfg;

  Denoiser() = default;
  Denoiser(const DenoiserConfig& c, Rng& rng) : cfg(c) {
    if (c.width % c.heads) throw ConfigError("denoiser: width must be divisible by heads");
    in_proj_ = nn::Linear(c.latent_channels, c.width, rng);
    frame_proj_ = nn::Linear(1 + c.pos_features, c.width, rng);
    t1_ = nn::Linear(c.temb_dim, c.width, rng);
    t2_ = nn::Linear(c.width, c.width, rng);
    for (int i = 0; i < c.blocks; ++i) {
      res_.emplace_back(c.width, rng);
      spatial_.emplace_back(c.width, c.heads, rng);
      temporal_.emplace_back(c.width, c.heads, rng);
    }
    out_norm_ = nn::LayerNorm(c.width);
    out_ = nn::Linear(c.width, c.latent_channels, rng, 0.f);
  }

  nn::ParamList params() {
    nn::ParamList p;
    in_proj_.collect("in", p);
    frame_proj_.collect("frame", p);
    t1_.collect("t1", p);
    t2_.collect("t2", p);
    for (size_t i = 0; i < res_.size(); ++i) {
      const std::string s = "block" + std::to_string(i);
      res_[i].collect(s + ".res", p);
      spatial_[i].collect(s + ".spatial", p);
      temporal_[i].collect(s + ".temporal", p);
    }
    out_norm_.collect("out_norm", p);
    out_.collect("out", p);
    return p;
  }

  /// x is [B*N, h, w, C]; t holds one timestep per sequence; mask marks
  /// keyframes per frame (size B*N).
  nn::Var operator()(const nn::Var& x, const std::vector<int>& t, const std::vector<uint8_t>& mask, int N) const {
    const auto& sh = x.shape();
    if (sh.size() != 4 || sh[3] != cfg.latent_channels)
      throw ConfigError("denoiser: expected [B*N, h, w, " + std::to_string(cfg.latent_channels) + "]");
    const int BN = sh[0], h = sh[1], w = sh[2], W = cfg.width;
    if (N < 1 || BN % N) throw ConfigError("denoiser: frame count not a multiple of N");
    const int B = BN / N, HW = h * w;
    if (static_cast<int>(t.size()) != B || static_cast<int>(mask.size()) != BN)
      throw ConfigError("denoiser: timestep or mask size mismatch");

    nn::Tensor tf(nn::Shape{B, cfg.temb_dim});
    for (int b = 0; b < B; ++b) sinusoid(t[b], cfg.temb_dim, 10000.0, tf.ptr() + (size_t)b * cfg.temb_dim);
    nn::Var temb = nn::silu(t2_(nn::silu(t1_(nn::constant(std::move(tf))))));

    nn::Tensor ff(nn::Shape{BN, 1 + cfg.pos_features});
    for (int i = 0; i < BN; ++i) {
      float* f = ff.ptr() + (size_t)i * (1 + cfg.pos_features);
      f[0] = mask[i] ? 1.f : -1.f;
      const double u = N > 1 ? static_cast<double>(i % N) / (N - 1) : 0.0;
      for (int j = 0; j < cfg.pos_features / 2; ++j) {
        f[1 + 2 * j] = static_cast<float>(std::sin(M_PI * (j + 1) * u));
        f[2 + 2 * j] = static_cast<float>(std::cos(M_PI * (j + 1) * u));
      }
    }
    nn::Var hcur = nn::add_broadcast(in_proj_(x), frame_proj_(nn::constant(std::move(ff))));
    hcur = nn::add_broadcast(hcur, temb);

    for (size_t bi = 0; bi < res_.size(); ++bi) {
      const ResBlock& rb = res_[bi];
      nn::Var r = rb.c1(nn::silu(rb.n1(hcur)));
      r = nn::add_broadcast(r, rb.temb(temb));
      r = rb.c2(nn::silu(rb.n2(r)));
      hcur = nn::add(hcur, r);

      hcur = nn::reshape(spatial_[bi](nn::reshape(hcur, {BN, HW, W})), {B, N, HW, W});
      nn::Var tv = nn::reshape(nn::transpose12(hcur), {B * HW, N, W});
      tv = temporal_[bi](tv);
      hcur = nn::reshape(nn::transpose12(nn::reshape(tv, {B, HW, N, W})), {BN, h, w, W});
    }
    return out_(nn::silu(out_norm_(hcur)));
  }

  /// Copies share parameter storage; clone() does not.
  Denoiser clone() const {
    Rng rng(0);
    Denoiser d(cfg, rng);
    auto dst = d.params();
    auto src = const_cast<Denoiser*>(this)->params();
    for (size_t i = 0; i < src.size(); ++i) dst[i].var->mutable_value() = src[i].var->value();
    return d;
  }

  std::vector<uint8_t> save(const nlohmann::json& extra = {}) {
    nlohmann::json j = {{"kind", "denoiser"}, {"denoiser", cfg.to_json()}, {"extra", extra}};
    return nn::encode_checkpoint(j, params());
  }

  static Denoiser load(std::span<const uint8_t> bytes, nlohmann::json* extra = nullptr) {
    const auto j = nn::decode_checkpoint(bytes, nullptr);
    if (j.value("kind", "") != "denoiser") throw FormatError("not a denoiser checkpoint");
    Rng rng(0);
    Denoiser d(DenoiserConfig::from_json(j.at("denoiser")), rng);
    auto p = d.params();
    nn::decode_checkpoint(bytes, &p);
    if (extra) *extra = j.value("extra", nlohmann::json::object());
    return d;
  }

 private:
  nn::Linear in_proj_, frame_proj_, t1_, t2_, out_;
  std::vector<ResBlock> res_;
  std::vector<nn::SelfAttention> spatial_, temporal_;
  nn::LayerNorm out_norm_;
};

// ---------------------------------------------------------------------------
// Training

/// One min-max normalized latent sequence [N, h, w, C] with its partition.
struct LatentSequence {
  nn::Tensor y0;
  IndexPartition part;
};

/// Loss on generated frames only: masked mean of (eps - eps_hat)^2 where the
/// mask selects generated frames. Keyframe outputs receive no gradient.
inline nn::Var diffusion_loss(const nn::Var& eps_hat, const nn::Tensor& eps, const std::vector<uint8_t>& gen_mask) {
  return nn::masked_mse(eps_hat, eps, gen_mask);
}

/// Keyframe-only estimate of every frame of a normalized sequence [N, fs]:
/// linear in time between the enclosing keyframes, the nearest keyframe where
/// only one side exists. Keyframe positions hold the keyframes themselves.
inline std::vector<float> keyframe_prior(std::span<const float> frames, const IndexPartition& part) {
  const size_t N = part.n_frames, fs = frames.size() / N;
  std::vector<float> p(frames.begin(), frames.end());
  for (size_t g : part.gen) {
    std::optional<size_t> lo, hi;
    for (size_t c : part.cond) {
      if (c < g && (!lo || c > *lo)) lo = c;
      if (c > g && (!hi || c < *hi)) hi = c;
    }
    const size_t a = lo ? *lo : *hi, b = hi ? *hi : *lo;
    const float w = a == b ? 0.f : static_cast<float>(g - a) / static_cast<float>(b - a);
    for (size_t i = 0; i < fs; ++i) p[g * fs + i] = (1 - w) * frames[a * fs + i] + w * frames[b * fs + i];
  }
  return p;
}

/// Builds the noised input of one training step. t is drawn uniformly from
/// step_set (all of 1..T when empty). Keyframes are left clean. With
/// `offset_prior` the generated frames are noised as y0 - keyframe_prior.
struct NoisedBatch {
  nn::Tensor x, eps;
  std::vector<int> t;
  std::vector<uint8_t> key_mask, gen_mask;
  int N = 0;
};

inline NoisedBatch make_noised_batch(const std::vector<LatentSequence>& batch, const NoiseSchedule& sched, Rng& rng,
                                     const std::vector<int>& step_set = {}, bool offset_prior = false) {
  if (batch.empty()) throw ConfigError("training batch is empty");
  const auto& s0 = batch.front().y0.shape;
  NoisedBatch nb;
  nb.N = s0[0];
  const size_t fsz = batch.front().y0.numel() / nb.N;
  nb.x = nn::Tensor(nn::Shape{static_cast<int>(batch.size()) * nb.N, s0[1], s0[2], s0[3]});
  nb.eps = nn::Tensor(nb.x.shape);
  for (size_t b = 0; b < batch.size(); ++b) {
    const auto& seq = batch[b];
    if (seq.y0.shape != s0) throw ConfigError("training batch: sequences must share a shape");
    if (seq.part.n_frames != static_cast<size_t>(nb.N)) throw ConfigError("training batch: partition length mismatch");
    const int t = step_set.empty() ? static_cast<int>(rng.uniform_int(1, sched.T()))
                                   : step_set[rng.uniform_int(0, step_set.size() - 1)];
    nb.t.push_back(t);
    const double a = std::sqrt(sched.alpha_bar(t)), s = std::sqrt(1.0 - sched.alpha_bar(t));
    std::vector<float> prior;
    if (offset_prior) prior = keyframe_prior(seq.y0.data, seq.part);
    for (int f = 0; f < nb.N; ++f) {
      const bool key = seq.part.is_keyframe(f);
      nb.key_mask.push_back(key);
      nb.gen_mask.push_back(!key);
      const size_t off = (b * nb.N + f) * fsz;
      for (size_t i = 0; i < fsz; ++i) {
        const float y = seq.y0[f * fsz + i] - (offset_prior && !key ? prior[f * fsz + i] : 0.f);
        if (key) {
          nb.x[off + i] = y;
        } else {
          const float e = static_cast<float>(rng.normal());
          nb.eps[off + i] = e;
          nb.x[off + i] = static_cast<float>(a * y + s * e);
        }
      }
    }
  }
  return nb;
}

/// Noise the generated frames, predict, and return the masked loss.
inline nn::Var training_step(const std::vector<LatentSequence>& batch, const Denoiser& model,
                             const NoiseSchedule& sched, Rng& rng, const std::vector<int>& step_set = {}) {
  NoisedBatch nb = make_noised_batch(batch, sched, rng, step_set, model.cfg.keyframe_prior);
  nn::Var eps_hat = model(nn::constant(std::move(nb.x)), nb.t, nb.key_mask, nb.N);
  nn::Var loss = diffusion_loss(eps_hat, nb.eps, nb.gen_mask);
  if (!std::isfinite(loss.value()[0])) throw TrainingError("diffusion loss is not finite");
  return loss;
}

/// Integer latent tracks of a spatial tile over time, [frames, h, w, C].
struct LatentTrack {
  int frames = 0, h = 0, w = 0, c = 0;
  std::vector<int> data;
  size_t frame_size() const { return static_cast<size_t>(h) * w * c; }
};

/// Uniformly chosen track window of length N, min-max normalized over the
/// window, with the given partition.
inline LatentSequence sample_sequence(const std::vector<LatentTrack>& tracks, const IndexPartition& part, Rng& rng) {
  const int N = static_cast<int>(part.n_frames);
  std::vector<size_t> ok;
  for (size_t i = 0; i < tracks.size(); ++i)
    if (tracks[i].frames >= N) ok.push_back(i);
  if (ok.empty()) throw DataError("no latent track is long enough for a window of " + std::to_string(N));
  const auto& tr = tracks[ok[rng.uniform_int(0, ok.size() - 1)]];
  const int start = static_cast<int>(rng.uniform_int(0, tr.frames - N));
  const size_t fs = tr.frame_size();
  std::span<const int> win(tr.data.data() + start * fs, N * fs);
  const auto mm = LatentMinMax::of(win);
  LatentSequence s{nn::Tensor(nn::Shape{N, tr.h, tr.w, tr.c}), part};
  for (size_t i = 0; i < win.size(); ++i) s.y0[i] = mm.to_unit(win[i]);
  return s;
}

struct DiffusionTrainConfig {
  int iters = 2000;
  int batch = 4;
  double lr = 1e-3;
  double lr_final_fraction = 0.1;  // cosine decay to lr * fraction
  int warmup = 100;
  uint64_t seed = 2;
  int log_every = 100;
  std::vector<Strategy> strategies = {Strategy{}};
  std::vector<int> step_set;  // empty: all of 1..T

  double lr_at(int it) const {
    if (it < warmup) return lr * (it + 1) / warmup;
    const double p = static_cast<double>(it - warmup) / std::max(1, iters - warmup);
    return lr * (lr_final_fraction + (1 - lr_final_fraction) * 0.5 * (1 + std::cos(M_PI * p)));
  }
};

struct DiffusionTracePoint {
  int iter;
  double loss;
};

using ProgressCallback = std::function<void(const std::string&)>;

/// Continues training `model` in place; returns the smoothed loss trace.
inline std::vector<DiffusionTracePoint> train_denoiser(Denoiser& model, const std::vector<LatentTrack>& tracks,
                                                       const DiffusionTrainConfig& cfg,
                                                       const ProgressCallback& progress = {}) {
  if (cfg.iters < 1 || cfg.batch < 1 || !(cfg.lr > 0)) throw ConfigError("diffusion training: bad configuration");
  if (cfg.strategies.empty()) throw ConfigError("diffusion training: no strategies");
  const NoiseSchedule sched = model.cfg.schedule.build();
  for (int t : cfg.step_set)
    if (t < 1 || t > sched.T()) throw ConfigError("diffusion training: step outside [1, T]");
  Rng rng(cfg.seed);
  nn::Adam opt(model.params());
  std::vector<DiffusionTracePoint> trace;
  double running = 0, acc = 0;
  int acc_n = 0;
  for (int it = 0; it < cfg.iters; ++it) {
    const Strategy& st = cfg.strategies[rng.uniform_int(0, cfg.strategies.size() - 1)];
    const IndexPartition part = make_partition(window_length(st), st);
    std::vector<LatentSequence> batch;
    for (int b = 0; b < cfg.batch; ++b) batch.push_back(sample_sequence(tracks, part, rng));
    opt.zero_grad();
    nn::Var loss = training_step(batch, model, sched, rng, cfg.step_set);
    nn::backward(loss);
    opt.step(static_cast<float>(cfg.lr_at(it)), 1.0f);
    const double lv = loss.value()[0];
    running = it == 0 ? lv : 0.98 * running + 0.02 * lv;
    acc += lv;
    ++acc_n;
    if ((it + 1) % cfg.log_every == 0 || it + 1 == cfg.iters) {
      trace.push_back({it + 1, acc / acc_n});
      if (progress)
        progress("diffusion iter " + std::to_string(it + 1) + " loss " + std::to_string(acc / acc_n) + " ema " +
                 std::to_string(running));
      acc = 0;
      acc_n = 0;
    }
  }
  return trace;
}

/// Fine-tune on the S-step subsampled timestep set.
inline std::vector<DiffusionTracePoint> finetune_reduced_steps(Denoiser& model, int S,
                                                               const std::vector<LatentTrack>& tracks,
                                                               DiffusionTrainConfig cfg,
                                                               const ProgressCallback& progress = {}) {
  cfg.step_set = subsample_steps(model.cfg.schedule.T, S);
  return train_denoiser(model, tracks, cfg, progress);
}

/// Mean masked loss over fixed evaluation batches drawn with `seed`.
inline double evaluate_denoiser(const Denoiser& model, const std::vector<LatentTrack>& tracks,
                                const std::vector<Strategy>& strategies, const std::vector<int>& step_set, int batches,
                                int batch_size, uint64_t seed) {
  nn::NoGradGuard ng;
  const NoiseSchedule sched = model.cfg.schedule.build();
  Rng rng(seed);
  double s = 0;
  for (int i = 0; i < batches; ++i) {
    const Strategy& st = strategies[i % strategies.size()];
    const IndexPartition part = make_partition(window_length(st), st);
    std::vector<LatentSequence> batch;
    for (int b = 0; b < batch_size; ++b) batch.push_back(sample_sequence(tracks, part, rng));
    s += training_step(batch, model, sched, rng, step_set).value()[0];
  }
  return s / batches;
}

// ---------------------------------------------------------------------------
// Sampling

/// Conditioned ancestral sampling. frames holds the normalized sequence
/// [N, frame_size]; only generated frames are overwritten, keyframes are
/// never touched. predict(x, t) returns eps_hat for the full sequence.
/// `steps` is any set of timesteps in [1, T]; it is visited in descending
/// order, each transition using the respaced posterior. With `offset_prior`
/// the chain runs on offsets from keyframe_prior(), which are added back at
/// the end; x0 estimates are clipped so the result stays in [-1, 1].
template <class Predictor>
void sample_conditioned(std::vector<float>& frames, const IndexPartition& part, Predictor&& predict,
                        const NoiseSchedule& sched, std::vector<int> steps, Rng& rng, bool offset_prior = false) {
  if (steps.empty()) throw ConfigError("sample_conditioned: empty step set");
  std::sort(steps.begin(), steps.end(), std::greater<>());
  if (std::adjacent_find(steps.begin(), steps.end()) != steps.end())
    throw ConfigError("sample_conditioned: duplicate steps");
  if (steps.front() > sched.T() || steps.back() < 1) throw ConfigError("sample_conditioned: step outside [1, T]");
  const size_t N = part.n_frames;
  if (frames.size() % N) throw ConfigError("sample_conditioned: frame buffer does not match partition");
  const size_t fs = frames.size() / N;
  std::vector<float> prior(frames.size(), 0.f);
  if (offset_prior) prior = keyframe_prior(frames, part);

  for (size_t g : part.gen)
    for (size_t i = 0; i < fs; ++i) frames[g * fs + i] = static_cast<float>(rng.normal());

  for (size_t k = 0; k < steps.size(); ++k) {
    const int t = steps[k];
    const int tp = k + 1 < steps.size() ? steps[k + 1] : 0;
    const double ab = sched.alpha_bars[t], abp = sched.alpha_bars[tp];
    const double beta = 1.0 - ab / abp;
    const double c0 = std::sqrt(abp) * beta / (1.0 - ab);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - abp) / (1.0 - ab);
    const double sd = tp > 0 ? std::sqrt(std::max(0.0, (1.0 - abp) / (1.0 - ab) * beta)) : 0.0;
    const auto eps = predict(static_cast<const std::vector<float>&>(frames), t);
    if (eps.size() != frames.size()) throw ConfigError("sample_conditioned: predictor output has wrong size");
    for (size_t g : part.gen)
      for (size_t i = 0; i < fs; ++i) {
        const size_t j = g * fs + i;
        const double xt = frames[j];
        const double x0 = std::clamp((xt - std::sqrt(1.0 - ab) * eps[j]) / std::sqrt(ab), -1.0 - prior[j], 1.0 - prior[j]);
        double v = c0 * x0 + ct * xt;
        if (tp > 0) v += sd * rng.normal();
        frames[j] = static_cast<float>(v);
      }
  }
  if (offset_prior)
    for (size_t g : part.gen)
      for (size_t i = 0; i < fs; ++i) frames[g * fs + i] += prior[g * fs + i];
}

/// Predictor adapter for a trained denoiser on one sequence of shape [N, h, w, C].
inline auto denoiser_predictor(const Denoiser& model, const IndexPartition& part, int h, int w) {
  return [&model, &part, h, w](const std::vector<float>& x, int t) {
    nn::NoGradGuard ng;
    const int N = static_cast<int>(part.n_frames);
    nn::Tensor xt(nn::Shape{N, h, w, model.cfg.latent_channels}, x);
    return model(nn::constant(std::move(xt)), {t}, part.keyframe_mask(), N).value().data;
  };
}

}  // namespace kfd
