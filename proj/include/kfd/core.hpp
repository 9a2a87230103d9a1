#pragma once

// Field containers, per-frame normalization, the frame-merge operator over a
// keyframe partition, and the two evaluation metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "kfd/common.hpp"

namespace kfd {

/// 4-D real field laid out [variable, time, height, width], row major.
/// Values are held in double; dtype_bits records the on-disk precision.
struct ScalarField {
  size_t vars = 0, times = 0, height = 0, width = 0;
  std::vector<double> data;
  std::vector<std::string> var_names;
  int dtype_bits = 32;

  ScalarField() = default;
  ScalarField(size_t v, size_t t, size_t h, size_t w, int bits = 32)
      : vars(v), times(t), height(h), width(w), data(v * t * h * w, 0.0), dtype_bits(bits) {
    for (size_t i = 0; i < v; ++i) var_names.push_back("var" + std::to_string(i));
  }

  size_t frame_size() const { return height * width; }
  size_t size() const { return data.size(); }
  size_t bytes() const { return size() * static_cast<size_t>(dtype_bits / 8); }
  std::array<size_t, 4> dims() const { return {vars, times, height, width}; }

  double& at(size_t v, size_t t, size_t y, size_t x) {
    return data[((v * times + t) * height + y) * width + x];
  }
  double at(size_t v, size_t t, size_t y, size_t x) const {
    return data[((v * times + t) * height + y) * width + x];
  }
  std::span<double> frame(size_t v, size_t t) {
    return std::span<double>(data).subspan((v * times + t) * frame_size(), frame_size());
  }
  std::span<const double> frame(size_t v, size_t t) const {
    return std::span<const double>(data).subspan((v * times + t) * frame_size(), frame_size());
  }

  /// Throws DataError unless the invariants hold.
  void validate() const {
    if (vars < 1 || times < 1 || height < 1 || width < 1) throw DataError("field dimensions must be positive");
    if (data.size() != vars * times * height * width) throw DataError("field payload does not match dimensions");
    if (dtype_bits != 32 && dtype_bits != 64) throw DataError("dtype_bits must be 32 or 64");
    if (var_names.size() != vars) throw DataError("one name per variable required");
    for (double d : data)
      if (!std::isfinite(d)) throw DataError("field contains non-finite values");
  }
};

/// Round a value to the field's storage precision.
inline double to_dtype(double v, int dtype_bits) {
  return dtype_bits == 32 ? static_cast<double>(static_cast<float>(v)) : v;
}

struct FrameNormalization {
  double mean = 0.0;
  double range = 0.0;  // max - min; zero marks a constant frame
  bool constant() const { return range == 0.0; }
};

/// Shift to zero mean and scale to unit range. A constant frame maps to zeros
/// and keeps its mean so it can be restored.
inline std::vector<double> normalize_frame(std::span<const double> frame, FrameNormalization& norm) {
  if (frame.empty()) throw ConfigError("normalize_frame: empty frame");
  double lo = frame[0], hi = frame[0], sum = 0.0;
  for (double v : frame) {
    if (!std::isfinite(v)) throw DataError("normalize_frame: non-finite value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    sum += v;
  }
  norm.mean = sum / static_cast<double>(frame.size());
  norm.range = hi - lo;
  std::vector<double> out(frame.size(), 0.0);
  if (norm.constant()) return out;
  const double inv = 1.0 / norm.range;
  for (size_t i = 0; i < frame.size(); ++i) out[i] = (frame[i] - norm.mean) * inv;
  return out;
}

inline std::vector<double> denormalize_frame(std::span<const double> normalized, const FrameNormalization& norm) {
  std::vector<double> out(normalized.size());
  for (size_t i = 0; i < normalized.size(); ++i) out[i] = normalized[i] * norm.range + norm.mean;
  return out;
}

/// Disjoint keyframe (cond) and generated (gen) index sets covering
/// {0, ..., n_frames-1}. Indices are zero based.
struct IndexPartition {
  size_t n_frames = 0;
  std::vector<size_t> cond;
  std::vector<size_t> gen;

  IndexPartition() = default;
  IndexPartition(size_t n, std::vector<size_t> keyframes) : n_frames(n), cond(std::move(keyframes)) {
    std::sort(cond.begin(), cond.end());
    cond.erase(std::unique(cond.begin(), cond.end()), cond.end());
    std::vector<bool> is_cond(n, false);
    for (size_t c : cond) {
      if (c >= n) throw ConfigError("keyframe index out of range");
      is_cond[c] = true;
    }
    for (size_t i = 0; i < n; ++i)
      if (!is_cond[i]) gen.push_back(i);
    if (cond.empty()) throw ConfigError("partition needs at least one keyframe");
  }

  bool is_keyframe(size_t i) const { return std::binary_search(cond.begin(), cond.end(), i); }
  std::vector<uint8_t> keyframe_mask() const {
    std::vector<uint8_t> m(n_frames, 0);
    for (size_t c : cond) m[c] = 1;
    return m;
  }
  std::vector<size_t> cond_one_based() const {
    std::vector<size_t> r;
    for (size_t c : cond) r.push_back(c + 1);
    return r;
  }
  /// Nearest keyframe to frame i; ties resolve to the earlier keyframe.
  size_t nearest_keyframe(size_t i) const {
    size_t best = cond.front();
    for (size_t c : cond) {
      const auto d = c > i ? c - i : i - c;
      const auto bd = best > i ? best - i : i - best;
      if (d < bd) best = c;
    }
    return best;
  }
};

/// Merge generated frames (ordered as partition.gen) with keyframes (ordered
/// as partition.cond) into a full sequence.
template <class T>
std::vector<T> oplus(std::span<const T> gen_frames, std::span<const T> cond_frames, const IndexPartition& p) {
  if (gen_frames.size() != p.gen.size() || cond_frames.size() != p.cond.size())
    throw ConfigError("oplus: frame counts do not match the partition");
  std::vector<T> out(p.n_frames);
  for (size_t i = 0; i < p.gen.size(); ++i) out[p.gen[i]] = gen_frames[i];
  for (size_t i = 0; i < p.cond.size(); ++i) out[p.cond[i]] = cond_frames[i];
  return out;
}

template <class T>
std::vector<T> oplus(const std::vector<T>& gen_frames, const std::vector<T>& cond_frames, const IndexPartition& p) {
  return oplus(std::span<const T>(gen_frames), std::span<const T>(cond_frames), p);
}

/// Select the frames at the given indices.
template <class T>
std::vector<T> restrict_to(std::span<const T> frames, std::span<const size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (size_t i : idx) out.push_back(frames[i]);
  return out;
}

template <class T>
std::vector<T> restrict_to(const std::vector<T>& frames, const std::vector<size_t>& idx) {
  return restrict_to(std::span<const T>(frames), std::span<const size_t>(idx));
}

/// Root mean square error normalized by the value range of the original.
inline double nrmse(std::span<const double> original, std::span<const double> reconstructed) {
  if (original.size() != reconstructed.size()) throw ConfigError("nrmse: shape mismatch");
  if (original.empty()) throw ConfigError("nrmse: empty input");
  const auto [lo, hi] = std::minmax_element(original.begin(), original.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) throw DataError("nrmse: original is constant");
  double ss = 0.0;
  for (size_t i = 0; i < original.size(); ++i) {
    const double d = original[i] - reconstructed[i];
    ss += d * d;
  }
  return std::sqrt(ss / static_cast<double>(original.size())) / range;
}

inline double nrmse(const ScalarField& original, const ScalarField& reconstructed) {
  if (original.dims() != reconstructed.dims()) throw ConfigError("nrmse: shape mismatch");
  return nrmse(std::span<const double>(original.data), std::span<const double>(reconstructed.data));
}

/// NRMSE restricted to one time index, normalized by the global range.
inline double frame_nrmse(const ScalarField& original, const ScalarField& reconstructed, size_t t) {
  const auto [lo, hi] = std::minmax_element(original.data.begin(), original.data.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) throw DataError("frame_nrmse: original is constant");
  double ss = 0.0;
  size_t n = 0;
  for (size_t v = 0; v < original.vars; ++v) {
    auto a = original.frame(v, t);
    auto b = reconstructed.frame(v, t);
    for (size_t i = 0; i < a.size(); ++i) {
      ss += (a[i] - b[i]) * (a[i] - b[i]);
      ++n;
    }
  }
  return std::sqrt(ss / static_cast<double>(n)) / range;
}

inline double compression_ratio(double original_bytes, double l_bytes, double g_bytes) {
  if (!(l_bytes + g_bytes > 0)) throw ConfigError("compression_ratio: zero compressed size");
  return original_bytes / (l_bytes + g_bytes);
}

}  // namespace kfd
