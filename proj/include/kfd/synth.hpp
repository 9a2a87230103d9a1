#pragma once

// Synthetic spatiotemporal corpora: Gaussian blobs advected across a
// periodic domain, and a smooth random field built from drifting Fourier
// modes.

#include <cmath>
#include <string>

#include "kfd/core.hpp"

namespace kfd {

enum class SynthKind { advecting_blobs, smooth_random_field };

inline SynthKind parse_synth_kind(const std::string& s) {
  if (s == "advecting-blobs") return SynthKind::advecting_blobs;
  if (s == "smooth-random-field") return SynthKind::smooth_random_field;
  throw ConfigError("unknown synthetic kind '" + s + "' (expected advecting-blobs or smooth-random-field)");
}

struct SynthConfig {
  SynthKind kind = SynthKind::advecting_blobs;
  size_t vars = 1, times = 64, height = 64, width = 64;
  int dtype_bits = 32;
  uint64_t seed = 0;
  int blobs = 10;
  double speed = 0.6;  // blob speed in pixels per frame
  double radius_min = 3.0, radius_max = 8.0;
  int modes = 24;
  int max_wavenumber = 4;
  double drift = 0.08;  // max phase drift of a mode, radians per frame

  void validate() const {
    require(vars >= 1 && times >= 1 && height >= 1 && width >= 1, "synth: dimensions must be positive");
    require(dtype_bits == 32 || dtype_bits == 64, "synth: dtype must be 32 or 64");
    require(blobs >= 1 && modes >= 1 && max_wavenumber >= 1, "synth: counts must be positive");
    require(speed >= 0 && drift >= 0, "synth: speeds must be non-negative");
    require(radius_min > 0 && radius_max >= radius_min, "synth: bad blob radii");
  }
};

namespace detail {

inline double wrap_delta(double d, double n) {
  d = std::fmod(d, n);
  if (d > n / 2) d -= n;
  if (d < -n / 2) d += n;
  return d;
}

inline void synth_blobs(ScalarField& f, size_t v, const SynthConfig& c, Rng& rng) {
  struct Blob {
    double y, x, vy, vx, r, a;
  };
  std::vector<Blob> blobs(c.blobs);
  for (auto& b : blobs) {
    b.y = rng.uniform(0, static_cast<double>(f.height));
    b.x = rng.uniform(0, static_cast<double>(f.width));
    const double ang = rng.uniform(0, 2 * M_PI), sp = c.speed * rng.uniform(0.5, 1.0);
    b.vy = sp * std::sin(ang);
    b.vx = sp * std::cos(ang);
    b.r = rng.uniform(c.radius_min, c.radius_max);
    b.a = rng.uniform(0.5, 1.5) * (rng.uniform() < 0.3 ? -1.0 : 1.0);
  }
  const double H = static_cast<double>(f.height), W = static_cast<double>(f.width);
  for (size_t t = 0; t < f.times; ++t)
    for (size_t y = 0; y < f.height; ++y)
      for (size_t x = 0; x < f.width; ++x) {
        double s = 0;
        for (auto& b : blobs) {
          const double dy = wrap_delta(y - (b.y + b.vy * t), H), dx = wrap_delta(x - (b.x + b.vx * t), W);
          s += b.a * std::exp(-(dy * dy + dx * dx) / (2 * b.r * b.r));
        }
        f.at(v, t, y, x) = to_dtype(s, f.dtype_bits);
      }
}

inline void synth_modes(ScalarField& f, size_t v, const SynthConfig& c, Rng& rng) {
  struct Mode {
    int ky, kx;
    double a, phase, omega;
  };
  std::vector<Mode> modes;
  while (static_cast<int>(modes.size()) < c.modes) {
    Mode m;
    m.ky = static_cast<int>(rng.uniform_int(-c.max_wavenumber, c.max_wavenumber));
    m.kx = static_cast<int>(rng.uniform_int(-c.max_wavenumber, c.max_wavenumber));
    if (m.ky == 0 && m.kx == 0) continue;
    m.a = rng.normal() / (1.0 + m.ky * m.ky + m.kx * m.kx);
    m.phase = rng.uniform(0, 2 * M_PI);
    m.omega = rng.uniform(-c.drift, c.drift);
    modes.push_back(m);
  }
  for (size_t t = 0; t < f.times; ++t)
    for (size_t y = 0; y < f.height; ++y)
      for (size_t x = 0; x < f.width; ++x) {
        double s = 0;
        for (auto& m : modes)
          s += m.a * std::cos(2 * M_PI * (m.ky * static_cast<double>(y) / f.height + m.kx * static_cast<double>(x) / f.width) +
                              m.phase + m.omega * t);
        f.at(v, t, y, x) = to_dtype(s, f.dtype_bits);
      }
}

}  // namespace detail

inline ScalarField synth_data(const SynthConfig& c) {
  c.validate();
  ScalarField f(c.vars, c.times, c.height, c.width, c.dtype_bits);
  for (size_t v = 0; v < c.vars; ++v) {
    Rng rng(derive_seed(c.seed, v));
    if (c.kind == SynthKind::advecting_blobs) detail::synth_blobs(f, v, c, rng);
    else detail::synth_modes(f, v, c, rng);
  }
  return f;
}

/// Mean Pearson correlation between consecutive frames.
inline double temporal_autocorrelation(const ScalarField& f) {
  if (f.times < 2) throw ConfigError("temporal_autocorrelation: need two frames");
  double acc = 0;
  size_t n = 0;
  for (size_t v = 0; v < f.vars; ++v)
    for (size_t t = 0; t + 1 < f.times; ++t) {
      auto a = f.frame(v, t), b = f.frame(v, t + 1);
      double ma = 0, mb = 0;
      for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
      }
      ma /= a.size();
      mb /= b.size();
      double sab = 0, saa = 0, sbb = 0;
      for (size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
      }
      acc += saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 1.0;
      ++n;
    }
  return acc / n;
}

}  // namespace kfd
