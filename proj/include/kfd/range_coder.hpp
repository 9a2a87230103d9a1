#pragma once

// Fixed-point probability tables and a carry-propagating range coder.
//
// The coder keeps a 56-bit range renormalized a byte at a time whenever it
// drops below 2^48, and a 57-bit low whose top bit is the pending carry
// (the LZMA "cache" scheme widened to 64-bit arithmetic). Only integer
// tables reach the coder, so encoder and decoder agree bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "kfd/common.hpp"

namespace kfd {

inline constexpr int kPmfPrecision = 16;
inline constexpr uint32_t kPmfTotal = 1u << kPmfPrecision;

/// Probability table on the integer support [s_min, s_max]. Every symbol has
/// at least one quantum and the quanta sum to exactly 2^16.
struct DiscretePMFTable {
  int s_min = 0;
  std::vector<uint32_t> cum;  // size n+1, cum[0] = 0, cum[n] = 2^16

  int s_max() const { return s_min + static_cast<int>(cum.size()) - 2; }
  size_t size() const { return cum.size() - 1; }
  uint32_t freq(int s) const { return cum[s - s_min + 1] - cum[s - s_min]; }
  bool contains(int s) const { return s >= s_min && s <= s_max(); }
  double probability(int s) const { return static_cast<double>(freq(s)) / kPmfTotal; }
  double bits(int s) const { return kPmfPrecision - std::log2(static_cast<double>(freq(s))); }
};

/// Quantize real probabilities to a floored fixed-point table.
inline DiscretePMFTable pmf_from_probabilities(std::span<const double> probs, int s_min) {
  const size_t n = probs.size();
  if (n == 0) throw ConfigError("pmf: empty support");
  if (n > kPmfTotal / 2) throw ConfigError("pmf: support too large for fixed-point precision");
  double total = 0;
  for (double p : probs) total += std::max(p, 0.0);
  std::vector<uint32_t> f(n);
  const double budget = static_cast<double>(kPmfTotal - n);
  int64_t sum = 0;
  for (size_t i = 0; i < n; ++i) {
    const double p = total > 0 ? std::max(probs[i], 0.0) / total : 1.0 / n;
    f[i] = 1 + static_cast<uint32_t>(std::floor(p * budget));
    sum += f[i];
  }
  int64_t diff = static_cast<int64_t>(kPmfTotal) - sum;
  // Remainder goes to (or comes from) the largest bins; lowest index wins ties.
  while (diff != 0) {
    const size_t big = static_cast<size_t>(std::max_element(f.begin(), f.end()) - f.begin());
    if (diff > 0) {
      f[big] += static_cast<uint32_t>(diff);
      diff = 0;
    } else {
      const int64_t take = std::min<int64_t>(-diff, f[big] - 1);
      if (take <= 0) throw ConfigError("pmf: cannot renormalize");
      f[big] -= static_cast<uint32_t>(take);
      diff += take;
    }
  }
  DiscretePMFTable t;
  t.s_min = s_min;
  t.cum.resize(n + 1, 0);
  for (size_t i = 0; i < n; ++i) t.cum[i + 1] = t.cum[i] + f[i];
  return t;
}

inline DiscretePMFTable uniform_pmf(int s_min, int s_max) {
  std::vector<double> p(static_cast<size_t>(s_max - s_min + 1), 1.0);
  return pmf_from_probabilities(p, s_min);
}

/// Standard normal probability of the interval (a, b), computed on the tail
/// side that avoids cancellation.
inline double normal_interval(double a, double b) {
  constexpr double r2 = 0.70710678118654752440;
  if (a > 0) return 0.5 * (std::erfc(a * r2) - std::erfc(b * r2));
  if (b < 0) return 0.5 * (std::erfc(-b * r2) - std::erfc(-a * r2));
  return 1.0 - 0.5 * std::erfc(-a * r2) - 0.5 * std::erfc(b * r2);
}

/// Gaussian convolved with the unit box, evaluated at integers. Tail mass
/// beyond the support is folded into the end bins.
inline DiscretePMFTable discretized_gaussian_pmf(double mu, double sigma, int s_min, int s_max) {
  if (s_max < s_min) throw ConfigError("discretized_gaussian_pmf: empty support");
  if (!(sigma > 0)) throw ConfigError("discretized_gaussian_pmf: sigma must be positive");
  std::vector<double> p(static_cast<size_t>(s_max - s_min + 1));
  const double inf = std::numeric_limits<double>::infinity();
  for (int k = s_min; k <= s_max; ++k) {
    const double lo = k == s_min ? -inf : (k - 0.5 - mu) / sigma;
    const double hi = k == s_max ? inf : (k + 0.5 - mu) / sigma;
    p[k - s_min] = normal_interval(lo, hi);
  }
  return pmf_from_probabilities(p, s_min);
}

// ---------------------------------------------------------------------------

class RangeEncoder {
 public:
  static constexpr uint64_t kTop = 1ULL << 56;
  static constexpr uint64_t kBot = 1ULL << 48;

  void encode(uint32_t cum, uint32_t freq) {
    const uint64_t r = range_ >> kPmfPrecision;
    low_ += r * cum;
    range_ = r * freq;
    while (range_ < kBot) {
      range_ <<= 8;
      shift_low();
    }
  }

  void encode(const DiscretePMFTable& t, int symbol) {
    if (!t.contains(symbol))
      throw ConfigError("range_encode: symbol " + std::to_string(symbol) + " outside support [" +
                        std::to_string(t.s_min) + ", " + std::to_string(t.s_max()) + "]");
    const size_t i = static_cast<size_t>(symbol - t.s_min);
    encode(t.cum[i], t.cum[i + 1] - t.cum[i]);
  }

  std::vector<uint8_t> finish() {
    for (int i = 0; i < 8; ++i) shift_low();
    return std::move(out_);
  }

 private:
  void shift_low() {
    if ((low_ & (kTop - 1)) < (0xFFULL << 48) || (low_ >> 56) != 0) {
      const uint8_t carry = static_cast<uint8_t>(low_ >> 56);
      uint8_t temp = cache_;
      do {
        out_.push_back(static_cast<uint8_t>(temp + carry));
        temp = 0xFF;
      } while (--cache_size_ != 0);
      cache_ = static_cast<uint8_t>((low_ >> 48) & 0xFF);
    }
    ++cache_size_;
    low_ = (low_ & ((1ULL << 48) - 1)) << 8;
  }

  uint64_t low_ = 0;
  uint64_t range_ = kTop - 1;
  uint8_t cache_ = 0;
  uint64_t cache_size_ = 1;
  std::vector<uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const uint8_t> bytes) : in_(bytes) {
    for (int i = 0; i < 8; ++i) code_ = (code_ << 8) | next_byte();
    if (code_ >= RangeEncoder::kTop) throw FormatError("range_decode: corrupt stream header");
  }

  int decode(const DiscretePMFTable& t) {
    const uint64_t r = range_ >> kPmfPrecision;
    const uint64_t v = code_ / r;
    if (v >= kPmfTotal) throw FormatError("range_decode: corrupt stream");
    const auto it = std::upper_bound(t.cum.begin(), t.cum.end(), static_cast<uint32_t>(v));
    const size_t i = static_cast<size_t>(it - t.cum.begin()) - 1;
    code_ -= r * t.cum[i];
    range_ = r * (t.cum[i + 1] - t.cum[i]);
    while (range_ < RangeEncoder::kBot) {
      code_ = (code_ << 8) | next_byte();
      range_ <<= 8;
    }
    return t.s_min + static_cast<int>(i);
  }

  size_t consumed() const { return pos_; }

 private:
  uint8_t next_byte() {
    if (pos_ >= in_.size()) throw FormatError("range_decode: truncated stream");
    return in_[pos_++];
  }

  std::span<const uint8_t> in_;
  size_t pos_ = 0;
  uint64_t code_ = 0;
  uint64_t range_ = RangeEncoder::kTop - 1;
};

using TableLookup = std::function<const DiscretePMFTable&(size_t)>;

inline std::vector<uint8_t> range_encode(std::span<const int> symbols, const TableLookup& table_for) {
  RangeEncoder enc;
  for (size_t i = 0; i < symbols.size(); ++i) enc.encode(table_for(i), symbols[i]);
  return enc.finish();
}

inline std::vector<uint8_t> range_encode(std::span<const int> symbols, std::span<const DiscretePMFTable> pmfs) {
  if (pmfs.size() != symbols.size()) throw ConfigError("range_encode: one table per symbol required");
  return range_encode(symbols, [&](size_t i) -> const DiscretePMFTable& { return pmfs[i]; });
}

/// Decodes exactly `count` symbols; the stream must be consumed completely.
inline std::vector<int> range_decode(std::span<const uint8_t> bytes, const TableLookup& table_for, size_t count) {
  RangeDecoder dec(bytes);
  std::vector<int> out(count);
  for (size_t i = 0; i < count; ++i) out[i] = dec.decode(table_for(i));
  if (dec.consumed() != bytes.size()) throw FormatError("range_decode: trailing bytes");
  return out;
}

inline std::vector<int> range_decode(std::span<const uint8_t> bytes, std::span<const DiscretePMFTable> pmfs,
                                     size_t count) {
  if (pmfs.size() < count) throw ConfigError("range_decode: one table per symbol required");
  return range_decode(bytes, [&](size_t i) -> const DiscretePMFTable& { return pmfs[i]; }, count);
}

/// Ideal code length of the sequence under the tables, in bits.
inline double table_bits(std::span<const int> symbols, const TableLookup& table_for) {
  double b = 0;
  for (size_t i = 0; i < symbols.size(); ++i) {
    const auto& t = table_for(i);
    if (!t.contains(symbols[i])) throw ConfigError("table_bits: symbol outside support");
    b += t.bits(symbols[i]);
  }
  return b;
}

}  // namespace kfd
