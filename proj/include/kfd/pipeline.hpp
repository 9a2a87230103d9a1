#pragma once

// End-to-end pipeline: model bundles, spatial tiling, window planning,
// keyframe latent coding, the shared reconstruction path used by both the
// encoder (closed loop) and the decoder, error-bound corrections, the
// keyframe-hold baseline and evaluation reports.

#include <atomic>
#include <chrono>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <thread>

#include "kfd/container.hpp"
#include "kfd/diffusion.hpp"
#include "kfd/error_bound.hpp"
#include "kfd/raw_tensor.hpp"
#include "kfd/transform_codec.hpp"

namespace kfd {

// ---------------------------------------------------------------------------
// Worker pool

inline int default_threads() {
  const unsigned n = std::thread::hardware_concurrency();
  return n ? static_cast<int>(n) : 1;
}

/// Runs f(i) for i in [0, n) on a pool of threads. Each worker disables
/// gradient recording for itself. The first exception is rethrown.
template <class F>
void parallel_for(size_t n, F&& f, int threads = 0) {
  if (threads <= 0) threads = default_threads();
  const size_t nt = std::min<size_t>(static_cast<size_t>(threads), n);
  if (nt <= 1) {
    nn::NoGradGuard ng;
    for (size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr err;
  std::mutex mu;
  auto worker = [&] {
    nn::NoGradGuard ng;
    for (;;) {
      const size_t i = next++;
      if (i >= n) return;
      try {
        f(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(mu);
        if (!err) err = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (size_t t = 0; t < nt; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// Models

/// Transform codec, denoiser and (optionally) residual basis, each
/// identified by the SHA-256 of its checkpoint bytes.
struct ModelBundle {
  CodecModel codec;
  Denoiser denoiser;
  std::optional<ResidualBasis> basis;
  Digest codec_fp{}, denoiser_fp{}, basis_fp{};

  static ModelBundle from_bytes(std::span<const uint8_t> codec_bytes, std::span<const uint8_t> denoiser_bytes,
                                std::span<const uint8_t> basis_bytes = {}) {
    ModelBundle b;
    b.codec = CodecModel::load(codec_bytes);
    b.codec_fp = sha256(codec_bytes);
    b.denoiser = Denoiser::load(denoiser_bytes);
    b.denoiser_fp = sha256(denoiser_bytes);
    if (!basis_bytes.empty()) {
      b.basis = ResidualBasis::load(basis_bytes);
      b.basis_fp = sha256(basis_bytes);
    }
    if (b.denoiser.cfg.latent_channels != b.codec.config().latent_channels)
      throw ConfigError("denoiser and transform codec disagree on latent channels");
    return b;
  }

  static ModelBundle from_files(const std::string& codec, const std::string& denoiser, const std::string& basis = "") {
    const auto c = nn::read_file(codec), d = nn::read_file(denoiser);
    const auto u = basis.empty() ? std::vector<uint8_t>{} : nn::read_file(basis);
    return from_bytes(c, d, u);
  }
};

// ---------------------------------------------------------------------------
// Geometry

/// Square tiles of side P covering an H x W frame; edge tiles are
/// reflection padded.
struct TileGrid {
  size_t H = 0, W = 0, P = 32, ny = 0, nx = 0;

  TileGrid() = default;
  TileGrid(size_t h, size_t w, size_t p) : H(h), W(w), P(p), ny((h + p - 1) / p), nx((w + p - 1) / p) {}

  size_t count() const { return ny * nx; }
  size_t y0(size_t i) const { return (i / nx) * P; }
  size_t x0(size_t i) const { return (i % nx) * P; }
  size_t real_h(size_t i) const { return std::min(P, H - y0(i)); }
  size_t real_w(size_t i) const { return std::min(P, W - x0(i)); }
  size_t real_count(size_t i) const { return real_h(i) * real_w(i); }
};

/// Windows of N frames over a sequence of T frames. Consecutive windows
/// share their boundary frame when both window ends are keyframes. Window
/// positions past the end repeat the last frame.
struct WindowPlan {
  int T = 0, N = 0;
  Strategy strategy;
  IndexPartition part;
  std::vector<int> starts;
  std::vector<int> stored;  // ascending global frames whose latents are kept

  size_t windows() const { return starts.size(); }
  int frame_at(size_t w, int i) const { return std::min(starts[w] + i, T - 1); }
  bool padded(size_t w, int i) const { return starts[w] + i >= T; }
  bool is_stored(int g) const { return std::binary_search(stored.begin(), stored.end(), g); }
  int stored_index(int g) const {
    const auto it = std::lower_bound(stored.begin(), stored.end(), g);
    return it != stored.end() && *it == g ? static_cast<int>(it - stored.begin()) : -1;
  }
};

inline WindowPlan plan_windows(int T, const Strategy& s) {
  if (T < 1) throw DataError("sequence has no frames");
  WindowPlan p;
  p.T = T;
  p.N = window_length(s);
  p.strategy = s;
  p.part = make_partition(p.N, s);
  const int step = p.part.is_keyframe(0) && p.part.is_keyframe(p.N - 1) ? p.N - 1 : p.N;
  for (int start = 0;; start += step) {
    p.starts.push_back(start);
    if (start + p.N >= T) break;
  }
  for (size_t w = 0; w < p.windows(); ++w)
    for (size_t c : p.part.cond) p.stored.push_back(p.frame_at(w, static_cast<int>(c)));
  std::sort(p.stored.begin(), p.stored.end());
  p.stored.erase(std::unique(p.stored.begin(), p.stored.end()), p.stored.end());
  return p;
}

// ---------------------------------------------------------------------------
// Normalization with the container's float32 constants

inline void frame_norm_constants(std::span<const double> frame, float& mean, float& range) {
  FrameNormalization n;
  normalize_frame(frame, n);
  mean = static_cast<float>(n.mean);
  range = static_cast<float>(n.range);
}

inline double apply_norm(double x, float mean, float range) {
  return range > 0 ? (x - static_cast<double>(mean)) / static_cast<double>(range) : 0.0;
}
inline double invert_norm(double u, float mean, float range) {
  return u * static_cast<double>(range) + static_cast<double>(mean);
}

/// Normalized, reflection padded P x P patch of frame (v, t) at tile i.
inline void normalized_patch(const ScalarField& f, size_t v, size_t t, const TileGrid& g, size_t i, float mean,
                             float range, float* out) {
  const auto fr = f.frame(v, t);
  const long P = static_cast<long>(g.P);
  for (long y = 0; y < P; ++y)
    for (long x = 0; x < P; ++x) {
      const size_t yy = reflect_index(static_cast<long>(g.y0(i)) + y, g.H);
      const size_t xx = reflect_index(static_cast<long>(g.x0(i)) + x, g.W);
      out[y * P + x] = static_cast<float>(apply_norm(fr[yy * g.W + xx], mean, range));
    }
}

// ---------------------------------------------------------------------------
// Batched transforms

inline constexpr int kTransformChunk = 32;

/// Quantized latents of `count` patches [count, P, P, 1].
inline std::vector<int> analyze_patches(const CodecModel& m, std::span<const float> patches, int count, int P) {
  std::vector<int> out;
  const size_t psz = static_cast<size_t>(P) * P;
  for (int b0 = 0; b0 < count; b0 += kTransformChunk) {
    const int n = std::min(kTransformChunk, count - b0);
    nn::Tensor x(nn::Shape{n, P, P, 1}, std::vector<float>(patches.begin() + b0 * psz, patches.begin() + (b0 + n) * psz));
    const IntTensor q = quantize(analyze(nn::constant(std::move(x)), m.transform).value());
    out.insert(out.end(), q.data.begin(), q.data.end());
  }
  return out;
}

/// Normalized patches from integer latents [count, h, w, C].
inline std::vector<float> synthesize_latents(const CodecModel& m, std::span<const int> y, int count, int h, int w) {
  const int C = m.config().latent_channels;
  const size_t fs = static_cast<size_t>(h) * w * C;
  std::vector<float> out;
  for (int b0 = 0; b0 < count; b0 += kTransformChunk) {
    const int n = std::min(kTransformChunk, count - b0);
    nn::Tensor t(nn::Shape{n, h, w, C});
    for (size_t i = 0; i < n * fs; ++i) t[i] = static_cast<float>(y[b0 * fs + i]);
    const nn::Tensor r = synthesize(nn::constant(std::move(t)), m.transform).value();
    out.insert(out.end(), r.data.begin(), r.data.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Keyframe latent coding: one y stream and one z stream per track

inline constexpr uint32_t kMaxSupport = 1u << 20;

namespace detail {

/// Lazily builds one Gaussian table per symbol; range_encode/decode ask for
/// each index exactly once, in order.
struct GaussianTableSource {
  std::span<const float> mu, sigma;
  std::span<const uint32_t> support;
  int channels;
  DiscretePMFTable current;
  const DiscretePMFTable& operator()(size_t i) {
    const int m = static_cast<int>(support[i % channels]);
    current = discretized_gaussian_pmf(mu[i], std::max<double>(sigma[i], kSigmaMin), -m, m);
    return current;
  }
};

inline MeanScale hyper_params_of(const CodecModel& m, std::span<const int> z, int K, int hz, int wz) {
  const int Cz = m.config().hyper_channels;
  nn::Tensor t(nn::Shape{K, hz, wz, Cz});
  for (size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(z[i]);
  return hyper_synthesize(nn::constant(std::move(t)), m.hyper);
}

inline std::vector<uint32_t> support_of(std::span<const int> v, int channels) {
  const auto s = channel_support(v, channels);
  return std::vector<uint32_t>(s.begin(), s.end());
}

}  // namespace detail

/// Entropy-code K keyframe latents [K, h, w, C] of one track.
inline TrackCode code_track(const CodecModel& m, std::span<const int> y, int K, int h, int w) {
  nn::NoGradGuard ng;
  const int C = m.config().latent_channels, Cz = m.config().hyper_channels;
  nn::Tensor yt(nn::Shape{K, h, w, C});
  for (size_t i = 0; i < yt.numel(); ++i) yt[i] = static_cast<float>(y[i]);
  const IntTensor z = quantize(hyper_analyze(nn::constant(std::move(yt)), m.hyper).value());
  TrackCode tc;
  tc.y_support = detail::support_of(y, C);
  tc.z_support = detail::support_of(z.data, Cz);
  for (uint32_t s : tc.y_support)
    if (s > kMaxSupport) throw DataError("latent magnitude exceeds the coder support limit");
  const auto ztab = factorized_tables(m.hyper.density, std::vector<int>(tc.z_support.begin(), tc.z_support.end()));
  tc.z_bytes = range_encode(z.data, [&](size_t i) -> const DiscretePMFTable& { return ztab[i % Cz]; });
  const MeanScale ms = detail::hyper_params_of(m, z.data, K, z.shape[1], z.shape[2]);
  detail::GaussianTableSource src{ms.mu.value().data, ms.sigma.value().data, tc.y_support, C, {}};
  tc.y_bytes = range_encode(y, std::ref(src));
  return tc;
}

inline std::vector<int> decode_track(const CodecModel& m, const TrackCode& tc, int K, int h, int w) {
  nn::NoGradGuard ng;
  const int C = m.config().latent_channels, Cz = m.config().hyper_channels;
  if (static_cast<int>(tc.y_support.size()) != C || static_cast<int>(tc.z_support.size()) != Cz)
    throw FormatError("track record: support table size does not match the codec");
  for (uint32_t s : tc.y_support)
    if (s > kMaxSupport) throw FormatError("track record: implausible latent support");
  for (uint32_t s : tc.z_support)
    if (s > kMaxSupport) throw FormatError("track record: implausible hyperlatent support");
  const int hz = h / 2, wz = w / 2;
  const auto ztab = factorized_tables(m.hyper.density, std::vector<int>(tc.z_support.begin(), tc.z_support.end()));
  const auto z = range_decode(tc.z_bytes, [&](size_t i) -> const DiscretePMFTable& { return ztab[i % Cz]; },
                              static_cast<size_t>(K) * hz * wz * Cz);
  const MeanScale ms = detail::hyper_params_of(m, z, K, hz, wz);
  detail::GaussianTableSource src{ms.mu.value().data, ms.sigma.value().data, tc.y_support, C, {}};
  return range_decode(tc.y_bytes, std::ref(src), static_cast<size_t>(K) * h * w * C);
}

// ---------------------------------------------------------------------------
// Shared reconstruction path

struct Layout {
  TileGrid grid;
  WindowPlan plan;
  int h = 0, w = 0, C = 0;  // latent tile shape
  size_t fs() const { return static_cast<size_t>(h) * w * C; }
  size_t track(size_t v, size_t tile) const { return v * grid.count() + tile; }
  size_t window_tile(size_t v, size_t win, size_t tile) const {
    return (v * plan.windows() + win) * grid.count() + tile;
  }
  size_t block(size_t v, size_t t, size_t tile) const { return (v * plan.T + t) * grid.count() + tile; }
};

inline Layout make_layout(const ContainerHeader& h, const CodecModel& m) {
  Layout L;
  const int f = m.config().downsample;
  if (h.tile == 0 || h.tile % (2 * f)) throw ConfigError("tile size must be a multiple of twice the downsample factor");
  L.grid = TileGrid(h.height, h.width, h.tile);
  L.plan = plan_windows(static_cast<int>(h.times), Strategy{static_cast<StrategyKind>(h.strategy), h.interval, h.k});
  L.h = L.w = h.tile / f;
  L.C = m.config().latent_channels;
  return L;
}

/// Decoder-side base reconstruction x^R from the stored keyframe latents
/// (per track, in stored-frame order). Optionally also the keyframe-hold
/// baseline, which copies the nearest keyframe of each generated frame.
inline ScalarField reconstruct_base(const Container& c, const Layout& L, const std::vector<std::vector<int>>& stored,
                                    const ModelBundle& mb, int threads, ScalarField* hold = nullptr) {
  const auto& h = c.header;
  const WindowPlan& plan = L.plan;
  const size_t tiles = L.grid.count(), fs = L.fs(), T = h.times;
  const NoiseSchedule sched = mb.denoiser.cfg.schedule.build();
  const std::vector<int> steps(h.steps.begin(), h.steps.end());

  std::vector<std::vector<int>> latents(h.vars * tiles, std::vector<int>(T * fs, 0));
  for (size_t tr = 0; tr < latents.size(); ++tr)
    for (size_t k = 0; k < plan.stored.size(); ++k)
      std::copy_n(stored[tr].begin() + k * fs, fs, latents[tr].begin() + plan.stored[k] * fs);

  // Generated frames, one conditioned sampling run per (variable, window, tile).
  const size_t nwin = plan.windows();
  parallel_for(
      h.vars * nwin * tiles,
      [&](size_t job) {
        const size_t v = job / (nwin * tiles), win = (job / tiles) % nwin, tile = job % tiles;
        const size_t tr = L.track(v, tile);
        const MinMaxRecord& mmr = c.minmax[L.window_tile(v, win, tile)];
        const LatentMinMax mm{mmr.lo, mmr.hi};
        std::vector<float> frames(plan.N * fs, 0.f);
        for (size_t k : plan.part.cond) {
          const int g = plan.frame_at(win, static_cast<int>(k));
          for (size_t i = 0; i < fs; ++i) frames[k * fs + i] = mm.to_unit(latents[tr][g * fs + i]);
        }
        Rng rng(derive_seed(h.seed, job));
        sample_conditioned(frames, plan.part, denoiser_predictor(mb.denoiser, plan.part, L.h, L.w), sched, steps, rng,
                           mb.denoiser.cfg.keyframe_prior);
        for (size_t k : plan.part.gen) {
          if (plan.padded(win, static_cast<int>(k))) continue;
          const int g = plan.frame_at(win, static_cast<int>(k));
          if (plan.is_stored(g)) continue;
          for (size_t i = 0; i < fs; ++i) latents[tr][g * fs + i] = mm.to_int(frames[k * fs + i]);
        }
      },
      threads);

  ScalarField xr(h.vars, T, h.height, h.width, h.dtype_bits);
  xr.var_names = h.var_names;
  const size_t P = L.grid.P;
  parallel_for(
      h.vars * tiles,
      [&](size_t tr) {
        const size_t v = tr / tiles, tile = tr % tiles;
        const auto px = synthesize_latents(mb.codec, latents[tr], static_cast<int>(T), L.h, L.w);
        const size_t y0 = L.grid.y0(tile), x0 = L.grid.x0(tile);
        for (size_t t = 0; t < T; ++t) {
          const float mean = c.norm_mean[v * T + t], range = c.norm_range[v * T + t];
          for (size_t y = 0; y < L.grid.real_h(tile); ++y)
            for (size_t x = 0; x < L.grid.real_w(tile); ++x)
              xr.at(v, t, y0 + y, x0 + x) = to_dtype(invert_norm(px[(t * P + y) * P + x], mean, range), h.dtype_bits);
        }
      },
      threads);

  if (hold) {
    *hold = xr;
    for (size_t win = 0; win < nwin; ++win)
      for (size_t k : plan.part.gen) {
        if (plan.padded(win, static_cast<int>(k))) continue;
        const int g = plan.frame_at(win, static_cast<int>(k));
        if (plan.is_stored(g)) continue;
        const int src = plan.frame_at(win, static_cast<int>(plan.part.nearest_keyframe(k)));
        for (size_t v = 0; v < h.vars; ++v) {
          auto from = xr.frame(v, src);
          std::copy(from.begin(), from.end(), hold->frame(v, g).begin());
        }
      }
  }
  return xr;
}

// ---------------------------------------------------------------------------
// Error-bound corrections

struct BoundStats {
  size_t blocks = 0, corrected = 0, fallback = 0;
  double max_ratio = 0;        // max over blocks of ||x - x_G||_2 / tau_block
  double implied_global = 0;   // sqrt(sum tau_block^2)
  bool holds() const { return max_ratio <= 1.0; }
};

inline double block_tau(const ContainerHeader& h, size_t n_real) {
  return h.tau_nrmse * h.data_range * std::sqrt(static_cast<double>(n_real));
}

namespace detail {

/// Block of tile i of frame (v, t) as a P*P vector; padding entries are 0.
inline std::vector<double> gather_block(const ScalarField& f, size_t v, size_t t, const TileGrid& g, size_t i) {
  std::vector<double> b(g.P * g.P, 0.0);
  for (size_t y = 0; y < g.real_h(i); ++y)
    for (size_t x = 0; x < g.real_w(i); ++x) b[y * g.P + x] = f.at(v, t, g.y0(i) + y, g.x0(i) + x);
  return b;
}

inline void scatter_block(ScalarField& f, size_t v, size_t t, const TileGrid& g, size_t i, std::span<const double> b) {
  for (size_t y = 0; y < g.real_h(i); ++y)
    for (size_t x = 0; x < g.real_w(i); ++x) f.at(v, t, g.y0(i) + y, g.x0(i) + x) = b[y * g.P + x];
}

inline double block_distance(const ScalarField& a, const ScalarField& b, size_t v, size_t t, const TileGrid& g,
                             size_t i) {
  double s = 0;
  for (size_t y = 0; y < g.real_h(i); ++y)
    for (size_t x = 0; x < g.real_w(i); ++x) {
      const double d = a.at(v, t, g.y0(i) + y, g.x0(i) + x) - b.at(v, t, g.y0(i) + y, g.x0(i) + x);
      s += d * d;
    }
  return std::sqrt(s);
}

}  // namespace detail

/// x_G = x_R corrected by the container's payloads.
inline ScalarField apply_corrections(const Container& c, const Layout& L, const ScalarField& xr,
                                     const ResidualBasis* basis, int threads = 0) {
  if (c.corrections.empty()) return xr;
  const auto& h = c.header;
  const size_t tiles = L.grid.count();
  if (c.corrections.size() != h.vars * h.times * tiles) throw FormatError("container: correction count mismatch");
  if (basis && static_cast<size_t>(basis->D) != L.grid.P * L.grid.P)
    throw ConfigError("residual basis block size does not match the tile size");
  ScalarField xg = xr;
  parallel_for(
      c.corrections.size(),
      [&](size_t blk) {
        if (c.corrections[blk].empty()) return;
        const size_t tile = blk % tiles, t = (blk / tiles) % h.times, v = blk / (tiles * h.times);
        const CorrectionPayload p = decode_payload(c.corrections[blk], h.dtype_bits);
        if (!p.fallback && !basis) throw ConfigError("container needs the residual basis to decode");
        const auto xb = detail::gather_block(xr, v, t, L.grid, tile);
        static const ResidualBasis kNone;
        const auto out = apply_correction(xb, p, basis ? *basis : kNone);
        detail::scatter_block(xg, v, t, L.grid, tile, out);
      },
      threads);
  return xg;
}

/// Closed loop: fill c.corrections so that x_G built by the decoder from
/// x_R satisfies the per-block bound. Returns the decoder-identical x_G.
inline ScalarField compute_corrections(Container& c, const Layout& L, const ScalarField& x, const ScalarField& xr,
                                       const ResidualBasis& basis, int threads, BoundStats* stats = nullptr) {
  const auto& h = c.header;
  const size_t tiles = L.grid.count();
  c.corrections.clear();
  if (!(h.tau_nrmse > 0)) {
    if (stats) *stats = {};
    return xr;
  }
  if (!(h.data_range > 0)) throw DataError("error bound relative to the data range needs a non-constant field");
  if (static_cast<size_t>(basis.D) != L.grid.P * L.grid.P)
    throw ConfigError("residual basis block size does not match the tile size");
  c.corrections.assign(h.vars * h.times * tiles, {});
  std::vector<uint8_t> kind(c.corrections.size(), 0);
  parallel_for(
      c.corrections.size(),
      [&](size_t blk) {
        const size_t tile = blk % tiles, t = (blk / tiles) % h.times, v = blk / (tiles * h.times);
        const auto xb = detail::gather_block(x, v, t, L.grid, tile);
        auto rb = detail::gather_block(xr, v, t, L.grid, tile);
        const CorrectionPayload p = enforce_bound(xb, rb, basis, block_tau(h, L.grid.real_count(tile)), h.dtype_bits);
        if (!p.empty()) c.corrections[blk] = code_payload(p);
        kind[blk] = p.fallback ? 2 : p.empty() ? 0 : 1;
      },
      threads);
  ScalarField xg = apply_corrections(c, L, xr, &basis, threads);
  if (stats) {
    *stats = {};
    double s2 = 0;
    for (size_t blk = 0; blk < c.corrections.size(); ++blk) {
      const size_t tile = blk % tiles, t = (blk / tiles) % h.times, v = blk / (tiles * h.times);
      const double tau = block_tau(h, L.grid.real_count(tile));
      s2 += tau * tau;
      stats->blocks++;
      stats->corrected += kind[blk] != 0;
      stats->fallback += kind[blk] == 2;
      stats->max_ratio = std::max(stats->max_ratio, detail::block_distance(x, xg, v, t, L.grid, tile) / tau);
    }
    stats->implied_global = std::sqrt(s2);
  }
  return xg;
}

/// Per-block bound check of a reconstruction against the original.
inline BoundStats check_bound(const ContainerHeader& h, const Layout& L, const ScalarField& x, const ScalarField& xg) {
  BoundStats s;
  double s2 = 0;
  for (size_t v = 0; v < h.vars; ++v)
    for (size_t t = 0; t < h.times; ++t)
      for (size_t tile = 0; tile < L.grid.count(); ++tile) {
        const double tau = block_tau(h, L.grid.real_count(tile));
        s2 += tau * tau;
        s.blocks++;
        s.max_ratio = std::max(s.max_ratio, detail::block_distance(x, xg, v, t, L.grid, tile) / tau);
      }
  s.implied_global = std::sqrt(s2);
  return s;
}

// ---------------------------------------------------------------------------
// Compress / decompress

struct CompressOptions {
  Strategy strategy;
  int steps = 32;          // S; sampling uses S evenly spaced timesteps
  double tau_nrmse = 0.0;  // 0 disables correction
  uint64_t seed = 0;
  int tile = 32;
  int threads = 0;
};

struct CompressResult {
  Container container;
  std::vector<uint8_t> bytes;
  Accounting acct;
  ScalarField xr, xg, hold;
  BoundStats bound;
  double seconds = 0, bound_seconds = 0;  // total, and the correction stage alone
};

inline void finalize(CompressResult& r) {
  r.bytes = write_container(r.container);
  read_container(r.bytes, &r.acct);
}

/// Header, normalization, min-max and keyframe latent streams of a field;
/// x^R and the keyframe-hold baseline are produced by the decoder path.
inline CompressResult compress_base(const ScalarField& x, const ModelBundle& mb, const CompressOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  x.validate();
  o.strategy.validate();
  const int T = mb.denoiser.cfg.schedule.T;
  if (o.steps < 1 || o.steps > T) throw ConfigError("steps must lie in [1, " + std::to_string(T) + "]");
  if (o.tau_nrmse < 0) throw ConfigError("tau must be non-negative");
  if (o.tile < 1 || o.tile > 1024) throw ConfigError("tile size out of range");

  CompressResult r;
  Container& c = r.container;
  ContainerHeader& h = c.header;
  h.vars = static_cast<uint32_t>(x.vars);
  h.times = static_cast<uint32_t>(x.times);
  h.height = static_cast<uint32_t>(x.height);
  h.width = static_cast<uint32_t>(x.width);
  h.dtype_bits = static_cast<uint8_t>(x.dtype_bits);
  h.var_names = x.var_names;
  h.tile = static_cast<uint16_t>(o.tile);
  h.strategy = static_cast<uint8_t>(o.strategy.kind);
  h.interval = static_cast<uint16_t>(o.strategy.interval);
  h.k = static_cast<uint16_t>(o.strategy.k);
  h.seed = o.seed;
  for (int s : subsample_steps(T, o.steps)) h.steps.push_back(static_cast<uint32_t>(s));
  h.tau_nrmse = o.tau_nrmse;
  const auto [lo, hi] = std::minmax_element(x.data.begin(), x.data.end());
  h.data_range = *hi - *lo;
  h.schedule_T = static_cast<uint32_t>(T);
  h.beta_start = mb.denoiser.cfg.schedule.beta_start;
  h.beta_end = mb.denoiser.cfg.schedule.beta_end;
  h.codec_fp = mb.codec_fp;
  h.denoiser_fp = mb.denoiser_fp;
  if (o.tau_nrmse > 0) {
    if (!mb.basis) throw ConfigError("a residual basis is required when tau > 0");
    h.basis_fp = mb.basis_fp;
  }
  const Layout L = make_layout(h, mb.codec);
  h.window = static_cast<uint16_t>(L.plan.N);

  const size_t tiles = L.grid.count(), fs = L.fs(), P = L.grid.P;
  c.norm_mean.resize(x.vars * x.times);
  c.norm_range.resize(x.vars * x.times);
  for (size_t v = 0; v < x.vars; ++v)
    for (size_t t = 0; t < x.times; ++t)
      frame_norm_constants(x.frame(v, t), c.norm_mean[v * x.times + t], c.norm_range[v * x.times + t]);

  // Analysis of every frame: keyframe latents are coded, the window min-max
  // covers all N positions.
  std::vector<std::vector<int>> all(x.vars * tiles), stored(x.vars * tiles);
  c.tracks.resize(x.vars * tiles);
  c.minmax.resize(x.vars * L.plan.windows() * tiles);
  parallel_for(
      x.vars * tiles,
      [&](size_t tr) {
        const size_t v = tr / tiles, tile = tr % tiles;
        std::vector<float> patches(x.times * P * P);
        for (size_t t = 0; t < x.times; ++t)
          normalized_patch(x, v, t, L.grid, tile, c.norm_mean[v * x.times + t], c.norm_range[v * x.times + t],
                           patches.data() + t * P * P);
        all[tr] = analyze_patches(mb.codec, patches, static_cast<int>(x.times), static_cast<int>(P));
        for (int g : L.plan.stored) stored[tr].insert(stored[tr].end(), all[tr].begin() + g * fs, all[tr].begin() + (g + 1) * fs);
        c.tracks[tr] = code_track(mb.codec, stored[tr], static_cast<int>(L.plan.stored.size()), L.h, L.w);
        for (size_t win = 0; win < L.plan.windows(); ++win) {
          std::vector<int> vals;
          for (int i = 0; i < L.plan.N; ++i) {
            const int g = L.plan.frame_at(win, i);
            vals.insert(vals.end(), all[tr].begin() + g * fs, all[tr].begin() + (g + 1) * fs);
          }
          const auto mm = LatentMinMax::of(vals);
          c.minmax[L.window_tile(v, win, tile)] = {mm.lo, mm.hi};
        }
      },
      o.threads);

  r.xr = reconstruct_base(c, L, stored, mb, o.threads, &r.hold);
  r.xg = r.xr;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  finalize(r);
  return r;
}

/// Replace the error bound of a compressed result and recompute the
/// corrections against the same x^R.
inline void recorrect(CompressResult& r, const ScalarField& x, const ModelBundle& mb, double tau_nrmse, int threads = 0) {
  const auto t0 = std::chrono::steady_clock::now();
  if (tau_nrmse < 0) throw ConfigError("tau must be non-negative");
  auto& h = r.container.header;
  h.tau_nrmse = tau_nrmse;
  h.basis_fp = {};
  if (tau_nrmse > 0) {
    if (!mb.basis) throw ConfigError("a residual basis is required when tau > 0");
    h.basis_fp = mb.basis_fp;
  }
  const Layout L = make_layout(h, mb.codec);
  if (tau_nrmse > 0) {
    r.xg = compute_corrections(r.container, L, x, r.xr, *mb.basis, threads, &r.bound);
  } else {
    r.container.corrections.clear();
    r.xg = r.xr;
    r.bound = {};
  }
  r.bound_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.seconds += r.bound_seconds;
  finalize(r);
}

inline CompressResult compress(const ScalarField& x, const ModelBundle& mb, const CompressOptions& o) {
  CompressResult r = compress_base(x, mb, o);
  if (o.tau_nrmse > 0) recorrect(r, x, mb, o.tau_nrmse, o.threads);
  return r;
}

struct DecodeResult {
  Container container;
  ScalarField xr, xg;
  double seconds = 0, bound_seconds = 0;
};

/// Everything needed beyond the container must match its fingerprints.
inline void check_models(const ContainerHeader& h, const ModelBundle& mb) {
  if (h.codec_fp != mb.codec_fp)
    throw ConfigError("container was written with transform codec " + hex(h.codec_fp) + ", got " + hex(mb.codec_fp));
  if (h.denoiser_fp != mb.denoiser_fp)
    throw ConfigError("container was written with denoiser " + hex(h.denoiser_fp) + ", got " + hex(mb.denoiser_fp));
  if (h.tau_nrmse > 0 && h.basis_fp != mb.basis_fp)
    throw ConfigError("container was written with residual basis " + hex(h.basis_fp) + ", got " +
                      (mb.basis ? hex(mb.basis_fp) : std::string("none")));
  const auto& s = mb.denoiser.cfg.schedule;
  if (h.schedule_T != static_cast<uint32_t>(s.T) || h.beta_start != s.beta_start || h.beta_end != s.beta_end)
    throw FormatError("container schedule constants do not match the denoiser");
}

inline DecodeResult decompress(std::span<const uint8_t> bytes, const ModelBundle& mb, int threads = 0) {
  const auto t0 = std::chrono::steady_clock::now();
  DecodeResult d;
  d.container = read_container(bytes);
  const Container& c = d.container;
  const auto& h = c.header;
  check_models(h, mb);
  if (h.vars != h.var_names.size()) throw FormatError("container: variable names do not match the count");
  if (h.strategy > 2) throw FormatError("container: unknown strategy");
  if (h.steps.empty()) throw FormatError("container: empty step set");
  for (uint32_t s : h.steps)
    if (s < 1 || s > h.schedule_T) throw FormatError("container: sampling step outside the schedule");
  if (!h.vars || !h.times || !h.height || !h.width) throw FormatError("container: zero dimension");
  Layout L;
  try {
    L = make_layout(h, mb.codec);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("container: ") + e.what());
  }
  if (L.plan.N != h.window) throw FormatError("container: window length does not match the strategy");
  const size_t tiles = L.grid.count();
  if (c.norm_mean.size() != static_cast<size_t>(h.vars) * h.times) throw FormatError("container: normalization count mismatch");
  if (c.tracks.size() != h.vars * tiles) throw FormatError("container: track count mismatch");
  if (c.minmax.size() != h.vars * L.plan.windows() * tiles) throw FormatError("container: min-max count mismatch");

  std::vector<std::vector<int>> stored(c.tracks.size());
  parallel_for(
      c.tracks.size(),
      [&](size_t tr) {
        stored[tr] = decode_track(mb.codec, c.tracks[tr], static_cast<int>(L.plan.stored.size()), L.h, L.w);
      },
      threads);
  d.xr = reconstruct_base(c, L, stored, mb, threads);
  const auto t1 = std::chrono::steady_clock::now();
  d.xg = apply_corrections(c, L, d.xr, mb.basis ? &*mb.basis : nullptr, threads);
  const auto t2 = std::chrono::steady_clock::now();
  d.bound_seconds = std::chrono::duration<double>(t2 - t1).count();
  d.seconds = std::chrono::duration<double>(t2 - t0).count();
  return d;
}

// ---------------------------------------------------------------------------
// Training corpora

/// Quantized latents of every (variable, tile) track over all frames.
inline std::vector<LatentTrack> latent_tracks(const ScalarField& x, const CodecModel& m, int tile, int threads = 0) {
  x.validate();
  const int f = m.config().downsample;
  if (tile % (2 * f)) throw ConfigError("tile size must be a multiple of twice the downsample factor");
  const TileGrid g(x.height, x.width, tile);
  std::vector<LatentTrack> out(x.vars * g.count());
  const size_t P = tile;
  parallel_for(
      out.size(),
      [&](size_t tr) {
        const size_t v = tr / g.count(), i = tr % g.count();
        std::vector<float> patches(x.times * P * P);
        for (size_t t = 0; t < x.times; ++t) {
          float mean, range;
          frame_norm_constants(x.frame(v, t), mean, range);
          normalized_patch(x, v, t, g, i, mean, range, patches.data() + t * P * P);
        }
        auto& lt = out[tr];
        lt.frames = static_cast<int>(x.times);
        lt.h = lt.w = tile / f;
        lt.c = m.config().latent_channels;
        lt.data = analyze_patches(m, patches, lt.frames, tile);
      },
      threads);
  return out;
}

/// Residual blocks (x - x^R) / frame range of full tiles, optionally with
/// the eight flips and transpositions of each block.
inline std::vector<std::vector<double>> residual_corpus(const ScalarField& x, const ScalarField& xr, int tile,
                                                        bool augment) {
  const TileGrid g(x.height, x.width, tile);
  const size_t P = tile;
  std::vector<std::vector<double>> out;
  for (size_t v = 0; v < x.vars; ++v)
    for (size_t t = 0; t < x.times; ++t) {
      float mean, range;
      frame_norm_constants(x.frame(v, t), mean, range);
      if (!(range > 0)) continue;
      for (size_t i = 0; i < g.count(); ++i) {
        if (g.real_h(i) != P || g.real_w(i) != P) continue;
        const auto a = detail::gather_block(x, v, t, g, i), b = detail::gather_block(xr, v, t, g, i);
        std::vector<double> r(P * P);
        for (size_t k = 0; k < r.size(); ++k) r[k] = (a[k] - b[k]) / range;
        const int variants = augment ? 8 : 1;
        for (int s = 0; s < variants; ++s) {
          std::vector<double> q(P * P);
          for (size_t y = 0; y < P; ++y)
            for (size_t xx = 0; xx < P; ++xx) {
              size_t sy = s & 1 ? P - 1 - y : y, sx = s & 2 ? P - 1 - xx : xx;
              if (s & 4) std::swap(sy, sx);
              q[y * P + xx] = r[sy * P + sx];
            }
          out.push_back(std::move(q));
        }
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct FrameStats {
  std::vector<double> base, final, hold;  // per-frame NRMSE
  std::vector<uint8_t> keyframe;
};

inline FrameStats frame_stats(const ScalarField& x, const CompressResult& r, const WindowPlan& plan) {
  FrameStats s;
  for (size_t t = 0; t < x.times; ++t) {
    s.base.push_back(frame_nrmse(x, r.xr, t));
    s.final.push_back(frame_nrmse(x, r.xg, t));
    s.hold.push_back(frame_nrmse(x, r.hold, t));
    s.keyframe.push_back(plan.is_stored(static_cast<int>(t)));
  }
  return s;
}

struct EvalRow {
  std::string strategy;
  int interval = 0, k = 0, steps = 0;
  double tau = 0;
  double nrmse = 0, nrmse_base = 0, nrmse_hold = 0;
  double nrmse_key = 0, nrmse_gen = 0;  // mean per-frame NRMSE of x^R
  double ratio = 0, file_ratio = 0;
  size_t size_L = 0, size_G = 0, file_bytes = 0, keyframes = 0;
  size_t fallback_blocks = 0;
  double max_bound_ratio = 0;
  bool bound_ok = true;
  bool decode_match = true;  // decoder x^R bit-identical to the encoder's
  double compress_s = 0, decompress_s = 0;
};

inline std::string csv_header() {
  return "strategy,interval,k,steps,tau,nrmse,nrmse_base,nrmse_hold,nrmse_key,nrmse_gen,ratio,file_ratio,size_L,size_G,"
         "file_bytes,keyframes,fallback_blocks,max_bound_ratio,bound_ok,decode_match,compress_s,decompress_s";
}

inline std::string csv_row(const EvalRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%.6g,%.8g,%.8g,%.8g,%.8g,%.8g,%.6g,%.6g,%zu,%zu,%zu,%zu,%zu,%.6g,%d,%d,%.3f,%.3f",
                r.strategy.c_str(), r.interval, r.k, r.steps, r.tau, r.nrmse, r.nrmse_base, r.nrmse_hold, r.nrmse_key,
                r.nrmse_gen, r.ratio, r.file_ratio, r.size_L, r.size_G, r.file_bytes, r.keyframes, r.fallback_blocks,
                r.max_bound_ratio, r.bound_ok ? 1 : 0, r.decode_match ? 1 : 0, r.compress_s, r.decompress_s);
  return buf;
}

inline void write_csv(const std::string& path, const std::vector<EvalRow>& rows) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << csv_header() << "\n";
  for (auto& r : rows) f << csv_row(r) << "\n";
}

inline void write_frame_csv(const std::string& path, const FrameStats& s) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << "frame,keyframe,nrmse_base,nrmse_final,nrmse_hold\n";
  for (size_t t = 0; t < s.base.size(); ++t)
    f << t << "," << int(s.keyframe[t]) << "," << s.base[t] << "," << s.final[t] << "," << s.hold[t] << "\n";
}

inline bool bit_identical(const ScalarField& a, const ScalarField& b) {
  if (a.dims() != b.dims()) return false;
  for (size_t i = 0; i < a.data.size(); ++i)
    if (std::bit_cast<uint64_t>(a.data[i]) != std::bit_cast<uint64_t>(b.data[i])) return false;
  return true;
}

/// Row for one compressed result whose container was decoded into `dec`.
inline EvalRow make_row(const ScalarField& x, const CompressResult& r, const DecodeResult& dec, const ModelBundle& mb) {
  const auto& h = r.container.header;
  const Layout L = make_layout(h, mb.codec);
  EvalRow row;
  const Strategy s{static_cast<StrategyKind>(h.strategy), h.interval, h.k};
  row.strategy = to_string(s.kind);
  row.interval = s.kind == StrategyKind::interpolation ? s.interval : 0;
  row.k = s.kind == StrategyKind::interpolation ? 0 : s.k;
  row.steps = static_cast<int>(h.steps.size());
  row.tau = h.tau_nrmse;
  row.nrmse = nrmse(x, dec.xg);
  row.nrmse_base = nrmse(x, dec.xr);
  row.nrmse_hold = nrmse(x, r.hold);
  const FrameStats fs = frame_stats(x, r, L.plan);
  double sk = 0, sg = 0;
  size_t nk = 0, ng = 0;
  for (size_t t = 0; t < fs.base.size(); ++t) (fs.keyframe[t] ? (sk += fs.base[t], ++nk) : (sg += fs.base[t], ++ng));
  row.nrmse_key = nk ? sk / nk : NAN;
  row.nrmse_gen = ng ? sg / ng : NAN;
  row.size_L = r.acct.size_L();
  row.size_G = r.acct.size_G();
  row.file_bytes = r.bytes.size();
  row.ratio = r.acct.ratio(static_cast<double>(x.bytes()));
  row.file_ratio = static_cast<double>(x.bytes()) / static_cast<double>(r.bytes.size());
  row.keyframes = L.plan.stored.size();
  row.fallback_blocks = r.bound.fallback;
  if (h.tau_nrmse > 0) {
    const BoundStats b = check_bound(h, L, x, dec.xg);
    row.max_bound_ratio = b.max_ratio;
    row.bound_ok = b.holds();
  }
  row.decode_match = bit_identical(dec.xr, r.xr) && bit_identical(dec.xg, r.xg);
  row.compress_s = r.seconds;
  row.decompress_s = dec.seconds;
  return row;
}

struct SweepGrid {
  std::vector<Strategy> strategies;
  std::vector<int> steps = {32};
  std::vector<double> taus = {0.0};
  uint64_t seed = 0;
  int tile = 32;
  int threads = 0;
};

using BundleForSteps = std::function<const ModelBundle&(int steps)>;
using SweepProgress = std::function<void(const EvalRow&)>;

/// One row per (strategy, S, tau). x^R does not depend on tau, so each
/// (strategy, S) pair is sampled once by the encoder and once by a full
/// decode of its first container; the containers of the remaining taus share
/// their latent sections byte for byte and are decoded by applying their
/// corrections to the decoded x^R.
inline std::vector<EvalRow> eval_sweep(const ScalarField& x, const SweepGrid& grid, const BundleForSteps& bundle_for,
                                       const SweepProgress& progress = {}) {
  if (grid.strategies.empty() || grid.steps.empty() || grid.taus.empty()) throw ConfigError("sweep: empty grid");
  std::vector<EvalRow> rows;
  for (const Strategy& s : grid.strategies)
    for (int S : grid.steps) {
      const ModelBundle& mb = bundle_for(S);
      CompressOptions o{s, S, grid.taus.front(), grid.seed, grid.tile, grid.threads};
      CompressResult r = compress(x, mb, o);
      DecodeResult base = decompress(r.bytes, mb, grid.threads);
      const double base_seconds = r.seconds - r.bound_seconds;
      for (size_t ti = 0; ti < grid.taus.size(); ++ti) {
        if (ti == 0) {
          rows.push_back(make_row(x, r, base, mb));
        } else {
          recorrect(r, x, mb, grid.taus[ti], grid.threads);
          r.seconds = base_seconds + r.bound_seconds;
          const auto t0 = std::chrono::steady_clock::now();
          DecodeResult d;
          d.container = read_container(r.bytes);
          check_models(d.container.header, mb);
          const Container& a = d.container;
          const Container& b = base.container;
          if (a.tracks != b.tracks || a.minmax != b.minmax || a.norm_mean != b.norm_mean || a.norm_range != b.norm_range)
            throw DataError("sweep: latent sections differ between error bounds");
          d.xr = base.xr;
          d.xg = apply_corrections(a, make_layout(a.header, mb.codec), d.xr, mb.basis ? &*mb.basis : nullptr,
                                   grid.threads);
          d.seconds = base.seconds - base.bound_seconds +
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          rows.push_back(make_row(x, r, d, mb));
        }
        if (progress) progress(rows.back());
      }
    }
  return rows;
}

}  // namespace kfd
