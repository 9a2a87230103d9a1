#pragma once

// Residual correction with a guaranteed per-block l2 bound: a PCA basis of
// reconstruction residuals, greedy selection and quantization of projection
// coefficients, verification on the output precision, and a lossless
// fallback when the basis cannot reach the bound.

#include <zlib.h>

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "kfd/core.hpp"

namespace kfd {

struct ResidualBasis {
  int D = 0, B = 0;
  Eigen::MatrixXd U;                 // D x B, orthonormal columns
  std::vector<double> eigenvalues;   // explained variance per column, descending
  Digest corpus_fingerprint{};

  std::vector<uint8_t> save() const {
    ByteWriter w;
    for (char c : std::string_view("KFDB")) w.put<uint8_t>(static_cast<uint8_t>(c));
    w.put<uint16_t>(1);
    w.put<uint32_t>(static_cast<uint32_t>(D));
    w.put<uint32_t>(static_cast<uint32_t>(B));
    w.put_bytes(corpus_fingerprint);
    for (double e : eigenvalues) w.put<double>(e);
    for (int j = 0; j < B; ++j)
      for (int i = 0; i < D; ++i) w.put<double>(U(i, j));
    return w.take();
  }

  static ResidualBasis load(std::span<const uint8_t> bytes) {
    ByteReader r(bytes);
    std::string magic;
    for (int i = 0; i < 4; ++i) magic.push_back(static_cast<char>(r.get<uint8_t>()));
    if (magic != "KFDB") throw FormatError("basis: bad magic");
    if (r.get<uint16_t>() != 1) throw FormatError("basis: unsupported version");
    ResidualBasis b;
    b.D = static_cast<int>(r.get<uint32_t>());
    b.B = static_cast<int>(r.get<uint32_t>());
    if (b.D <= 0 || b.B <= 0 || b.B > b.D) throw FormatError("basis: bad dimensions");
    const auto fp = r.get_bytes(b.corpus_fingerprint.size());
    std::copy(fp.begin(), fp.end(), b.corpus_fingerprint.begin());
    b.eigenvalues.resize(b.B);
    for (auto& e : b.eigenvalues) e = r.get<double>();
    b.U.resize(b.D, b.B);
    for (int j = 0; j < b.B; ++j)
      for (int i = 0; i < b.D; ++i) b.U(i, j) = r.get<double>();
    if (!r.done()) throw FormatError("basis: trailing bytes");
    return b;
  }
};

/// Top-B principal directions of the centered corpus (rows are D-vectors).
inline ResidualBasis fit_basis(const std::vector<std::vector<double>>& corpus, int B) {
  if (corpus.empty()) throw ConfigError("fit_basis: empty corpus");
  const int D = static_cast<int>(corpus.front().size());
  if (B < 1 || B > D) throw ConfigError("fit_basis: need 1 <= B <= D");
  if (static_cast<int>(corpus.size()) < B) throw ConfigError("fit_basis: corpus smaller than basis size");
  const int n = static_cast<int>(corpus.size());
  Eigen::MatrixXd X(n, D);
  for (int r = 0; r < n; ++r) {
    if (static_cast<int>(corpus[r].size()) != D) throw ConfigError("fit_basis: ragged corpus");
    for (int i = 0; i < D; ++i) X(r, i) = corpus[r][i];
  }
  X.rowwise() -= X.colwise().mean();
  const Eigen::MatrixXd cov = (X.transpose() * X) / std::max(1, n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw DataError("fit_basis: eigendecomposition failed");
  ResidualBasis b;
  b.D = D;
  b.B = B;
  b.U.resize(D, B);
  for (int j = 0; j < B; ++j) {
    const int src = D - 1 - j;  // eigenvalues ascend
    b.U.col(j) = es.eigenvectors().col(src);
    b.eigenvalues.push_back(std::max(0.0, es.eigenvalues()(src)));
  }
  ByteWriter w;
  for (auto& v : corpus)
    for (double x : v) w.put<double>(x);
  const auto bytes = w.take();
  b.corpus_fingerprint = sha256(bytes);
  return b;
}

/// c = U^T r.
inline Eigen::VectorXd project(const Eigen::VectorXd& residual, const ResidualBasis& b) {
  if (residual.size() != b.D) throw ConfigError("project: residual length does not match basis");
  return b.U.transpose() * residual;
}

struct CorrectionPayload {
  bool fallback = false;
  std::vector<uint32_t> indices;  // strictly increasing
  std::vector<int64_t> values;    // quantized coefficients, parallel to indices
  float q = 0.f;                  // quantization step
  int dtype_bits = 64;            // fallback word size
  std::vector<uint8_t> fallback_words;  // XOR of bit patterns, deflated

  bool empty() const { return !fallback && indices.empty(); }
  bool operator==(const CorrectionPayload&) const = default;
};

namespace detail {

inline uint64_t bits_of(double v, int dtype_bits) {
  if (dtype_bits == 32) return std::bit_cast<uint32_t>(static_cast<float>(v));
  return std::bit_cast<uint64_t>(v);
}

inline double from_bits(uint64_t w, int dtype_bits) {
  if (dtype_bits == 32) return static_cast<double>(std::bit_cast<float>(static_cast<uint32_t>(w)));
  return std::bit_cast<double>(w);
}

inline std::vector<uint8_t> deflate_bytes(std::span<const uint8_t> in) {
  uLongf n = compressBound(static_cast<uLong>(in.size()));
  std::vector<uint8_t> out(n);
  if (compress2(out.data(), &n, in.data(), static_cast<uLong>(in.size()), 9) != Z_OK)
    throw DataError("deflate failed");
  out.resize(n);
  return out;
}

inline std::vector<uint8_t> inflate_bytes(std::span<const uint8_t> in, size_t expected) {
  std::vector<uint8_t> out(expected);
  uLongf n = static_cast<uLongf>(expected);
  if (uncompress(out.data(), &n, in.data(), static_cast<uLong>(in.size())) != Z_OK || n != expected)
    throw FormatError("correction payload: corrupt fallback data");
  return out;
}

/// Apply U_s c_q to x_r (length n <= D; trailing basis entries are padding).
inline std::vector<double> corrected(std::span<const double> x_r, const CorrectionPayload& p, const ResidualBasis& b,
                                     int dtype_bits) {
  std::vector<double> out(x_r.begin(), x_r.end());
  for (size_t k = 0; k < p.indices.size(); ++k) {
    const double c = static_cast<double>(p.values[k]) * static_cast<double>(p.q);
    const auto col = b.U.col(p.indices[k]);
    for (size_t i = 0; i < out.size(); ++i) out[i] += c * col(static_cast<Eigen::Index>(i));
  }
  for (auto& v : out) v = to_dtype(v, dtype_bits);
  return out;
}

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace detail

/// Safety factor s in the quantization step q = tau / (2 sqrt(M) s).
inline constexpr double kQuantSafety = 1.0;

/// Decreasing-|c| order of coefficient indices; ties keep the lower index.
inline std::vector<uint32_t> greedy_order(const Eigen::VectorXd& c) {
  std::vector<uint32_t> order(c.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) { return std::abs(c(a)) > std::abs(c(b)); });
  return order;
}

/// Number of greedy coefficients needed so that the unselected in-span
/// energy plus the out-of-span energy is at most target^2, or -1 if even all
/// B coefficients fall short.
inline int greedy_count(const Eigen::VectorXd& c, std::span<const uint32_t> order, double residual_sq, double target) {
  double rem = residual_sq;
  const double t2 = target * target;
  if (rem <= t2) return 0;
  for (size_t m = 0; m < order.size(); ++m) {
    rem -= c(order[m]) * c(order[m]);
    if (rem <= t2) return static_cast<int>(m + 1);
  }
  return -1;
}

/// Choose and quantize correction coefficients so that, after casting the
/// corrected block to dtype_bits, ||x - x_G||_2 <= tau. x and x_r have the
/// block's n <= D real elements; padding entries are treated as zero.
inline CorrectionPayload enforce_bound(std::span<const double> x, std::span<const double> x_r, const ResidualBasis& b,
                                       double tau, int dtype_bits = 64) {
  if (!(tau > 0)) throw ConfigError("error bound tau must be positive (use the lossless path explicitly)");
  if (x.size() != x_r.size() || x.size() > static_cast<size_t>(b.D))
    throw ConfigError("enforce_bound: block length does not match basis");
  const size_t n = x.size();
  CorrectionPayload p;
  p.dtype_bits = dtype_bits;
  if (detail::l2_distance(x, x_r) <= tau) return p;

  Eigen::VectorXd r = Eigen::VectorXd::Zero(b.D);
  for (size_t i = 0; i < n; ++i) r(i) = x[i] - x_r[i];
  const Eigen::VectorXd c = project(r, b);
  const auto order = greedy_order(c);
  const double rsq = r.squaredNorm();
  const double target = tau * std::sqrt(1.0 - 1.0 / (16.0 * kQuantSafety * kQuantSafety));
  int M = greedy_count(c, order, rsq, target);
  if (M < 0) M = b.B;

  auto build = [&](int m, float q) {
    CorrectionPayload t;
    t.dtype_bits = dtype_bits;
    t.q = q;
    std::vector<uint32_t> sel(order.begin(), order.begin() + m);
    std::sort(sel.begin(), sel.end());
    for (uint32_t i : sel) {
      t.indices.push_back(i);
      t.values.push_back(static_cast<int64_t>(std::llround(c(i) / q)));
    }
    return t;
  };
  auto achieved = [&](const CorrectionPayload& t) {
    return detail::l2_distance(x, detail::corrected(x_r, t, b, dtype_bits));
  };

  // Repair: add coefficients first, then refine the step.
  for (int m = std::max(M, 1); m <= b.B; m = m == b.B ? b.B + 1 : std::min(b.B, m + std::max(1, m / 8))) {
    const float q = static_cast<float>(tau / (2.0 * std::sqrt(static_cast<double>(m)) * kQuantSafety));
    CorrectionPayload t = build(m, q);
    if (achieved(t) <= tau) return t;
    if (m == b.B) {
      float qq = q;
      for (int k = 0; k < 40; ++k) {
        qq *= 0.5f;
        t = build(m, qq);
        if (achieved(t) <= tau) return t;
      }
    }
  }

  // Lossless fallback: XOR of the dtype bit patterns of x and x_r.
  CorrectionPayload f;
  f.fallback = true;
  f.dtype_bits = dtype_bits;
  ByteWriter w;
  for (size_t i = 0; i < n; ++i) {
    const uint64_t d = detail::bits_of(x[i], dtype_bits) ^ detail::bits_of(x_r[i], dtype_bits);
    if (dtype_bits == 32) w.put<uint32_t>(static_cast<uint32_t>(d));
    else w.put<uint64_t>(d);
  }
  f.fallback_words = detail::deflate_bytes(w.take());
  return f;
}

/// Spec-level entry point: residual only, reconstruction taken as zero.
inline CorrectionPayload select_and_quantize(std::span<const double> residual, const ResidualBasis& b, double tau) {
  std::vector<double> zero(residual.size(), 0.0);
  return enforce_bound(residual, zero, b, tau, 64);
}

/// x_G = x_R + U_s c_q (or exact x under fallback), cast to dtype_bits.
inline std::vector<double> apply_correction(std::span<const double> x_r, const CorrectionPayload& p,
                                            const ResidualBasis& b) {
  if (p.fallback) {
    const size_t wb = p.dtype_bits / 8;
    const auto raw = detail::inflate_bytes(p.fallback_words, x_r.size() * wb);
    ByteReader r(raw);
    std::vector<double> out(x_r.size());
    for (size_t i = 0; i < out.size(); ++i) {
      const uint64_t d = p.dtype_bits == 32 ? r.get<uint32_t>() : r.get<uint64_t>();
      out[i] = detail::from_bits(detail::bits_of(x_r[i], p.dtype_bits) ^ d, p.dtype_bits);
    }
    return out;
  }
  if (x_r.size() > static_cast<size_t>(b.D)) throw ConfigError("apply_correction: block longer than basis");
  for (uint32_t i : p.indices)
    if (i >= static_cast<uint32_t>(b.B)) throw FormatError("correction payload: index outside basis");
  return detail::corrected(x_r, p, b, p.dtype_bits);
}

// ---------------------------------------------------------------------------
// Payload coding: order-0 exp-Golomb for counts, index gaps and magnitudes.

class BitWriter {
 public:
  void bit(bool b) {
    cur_ = static_cast<uint8_t>(cur_ | (b << (7 - n_)));
    if (++n_ == 8) flush();
  }
  void bits(uint64_t v, int count) {
    for (int i = count - 1; i >= 0; --i) bit((v >> i) & 1);
  }
  void exp_golomb(uint64_t v) {
    const uint64_t u = v + 1;
    const int len = 64 - std::countl_zero(u);
    bits(0, len - 1);
    bits(u, len);
  }
  std::vector<uint8_t> take() {
    if (n_) flush();
    return std::move(out_);
  }

 private:
  void flush() {
    out_.push_back(cur_);
    cur_ = 0;
    n_ = 0;
  }
  std::vector<uint8_t> out_;
  uint8_t cur_ = 0;
  int n_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const uint8_t> b) : in_(b) {}
  bool bit() {
    if (pos_ >= in_.size() * 8) throw FormatError("correction payload: truncated bitstream");
    const bool b = (in_[pos_ / 8] >> (7 - pos_ % 8)) & 1;
    ++pos_;
    return b;
  }
  uint64_t bits(int count) {
    uint64_t v = 0;
    for (int i = 0; i < count; ++i) v = (v << 1) | bit();
    return v;
  }
  uint64_t exp_golomb() {
    int zeros = 0;
    while (!bit())
      if (++zeros > 63) throw FormatError("correction payload: bad exp-Golomb code");
    return ((uint64_t{1} << zeros) | bits(zeros)) - 1;
  }
  size_t bytes_used() const { return (pos_ + 7) / 8; }

 private:
  std::span<const uint8_t> in_;
  size_t pos_ = 0;
};

/// Layout: u8 kind (0 empty, 1 coefficients, 2 fallback).
/// kind 1: f32 q, then a bitstream of EG(M), EG(first index), EG(gap - 1)...,
///   and per value EG(|v|) followed by a sign bit when v != 0.
/// kind 2: u8 dtype bits, then the deflated XOR words.
inline std::vector<uint8_t> code_payload(const CorrectionPayload& p) {
  ByteWriter w;
  if (p.fallback) {
    w.put<uint8_t>(2);
    w.put<uint8_t>(static_cast<uint8_t>(p.dtype_bits));
    w.put_bytes(p.fallback_words);
    return w.take();
  }
  if (p.indices.empty()) {
    w.put<uint8_t>(0);
    return w.take();
  }
  if (p.values.size() != p.indices.size()) throw ConfigError("code_payload: index/value count mismatch");
  w.put<uint8_t>(1);
  w.put<float>(p.q);
  BitWriter bw;
  bw.exp_golomb(p.indices.size());
  for (size_t k = 0; k < p.indices.size(); ++k) {
    if (k && p.indices[k] <= p.indices[k - 1]) throw ConfigError("code_payload: indices must increase");
    bw.exp_golomb(k == 0 ? p.indices[0] : p.indices[k] - p.indices[k - 1] - 1);
  }
  for (int64_t v : p.values) {
    bw.exp_golomb(static_cast<uint64_t>(v < 0 ? -v : v));
    if (v != 0) bw.bit(v < 0);
  }
  w.put_bytes(bw.take());
  return w.take();
}

inline CorrectionPayload decode_payload(std::span<const uint8_t> bytes, int dtype_bits) {
  ByteReader r(bytes);
  CorrectionPayload p;
  p.dtype_bits = dtype_bits;
  const uint8_t kind = r.get<uint8_t>();
  if (kind == 0) {
    if (!r.done()) throw FormatError("correction payload: trailing bytes");
    return p;
  }
  if (kind == 2) {
    p.fallback = true;
    p.dtype_bits = r.get<uint8_t>();
    if (p.dtype_bits != 32 && p.dtype_bits != 64) throw FormatError("correction payload: bad dtype");
    const auto rest = r.get_bytes(r.remaining());
    p.fallback_words.assign(rest.begin(), rest.end());
    return p;
  }
  if (kind != 1) throw FormatError("correction payload: unknown kind");
  p.q = r.get<float>();
  if (!(p.q > 0) || !std::isfinite(p.q)) throw FormatError("correction payload: bad step");
  const auto rest = r.get_bytes(r.remaining());
  BitReader br(rest);
  const uint64_t m = br.exp_golomb();
  if (m == 0 || m > (1u << 24)) throw FormatError("correction payload: bad coefficient count");
  uint64_t idx = 0;
  for (uint64_t k = 0; k < m; ++k) {
    const uint64_t g = br.exp_golomb();
    idx = k == 0 ? g : idx + g + 1;
    if (idx > UINT32_MAX) throw FormatError("correction payload: index overflow");
    p.indices.push_back(static_cast<uint32_t>(idx));
  }
  for (uint64_t k = 0; k < m; ++k) {
    const uint64_t mag = br.exp_golomb();
    if (mag > (uint64_t{1} << 62)) throw FormatError("correction payload: magnitude overflow");
    const bool neg = mag != 0 && br.bit();
    p.values.push_back(neg ? -static_cast<int64_t>(mag) : static_cast<int64_t>(mag));
  }
  if (br.bytes_used() != rest.size()) throw FormatError("correction payload: trailing bytes");
  return p;
}

}  // namespace kfd
