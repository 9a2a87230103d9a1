#pragma once

// Compressed container. Layout (all integers little endian):
//
//   "KFDZ" | u16 version | u32 body length | body | u32 CRC-32(body)
//
// The body is five u32-length-prefixed sections, in order:
//   header       global geometry, strategy, sampler seed and steps, error
//                bound, schedule constants, model fingerprints
//   norms        f32 mean, f32 range per (variable, frame)
//   latent       per-window min-max and the keyframe latent streams
//   hyperlatent  the keyframe hyperlatent streams
//   correction   one varint-length-prefixed payload per (variable, frame, tile)
//
// Size(L) counts the header, norms, latent and hyperlatent section contents;
// Size(G) counts the correction section contents. Everything else (magic,
// version, lengths, CRC) is framing.

#include <string>
#include <vector>

#include "kfd/core.hpp"

namespace kfd {

inline constexpr uint16_t kContainerVersion = 1;

inline void put_varint(ByteWriter& w, uint64_t v) {
  while (v >= 0x80) {
    w.put<uint8_t>(static_cast<uint8_t>(v | 0x80));
    v >>= 7;
  }
  w.put<uint8_t>(static_cast<uint8_t>(v));
}

inline uint64_t get_varint(ByteReader& r) {
  uint64_t v = 0;
  for (int shift = 0; shift < 64; shift += 7) {
    const uint8_t b = r.get<uint8_t>();
    v |= static_cast<uint64_t>(b & 0x7f) << shift;
    if (!(b & 0x80)) return v;
  }
  throw FormatError("container: varint too long");
}

inline void put_svarint(ByteWriter& w, int64_t v) { put_varint(w, (static_cast<uint64_t>(v) << 1) ^ static_cast<uint64_t>(v >> 63)); }
inline int64_t get_svarint(ByteReader& r) {
  const uint64_t u = get_varint(r);
  return static_cast<int64_t>(u >> 1) ^ -static_cast<int64_t>(u & 1);
}

struct ContainerHeader {
  uint32_t vars = 0, times = 0, height = 0, width = 0;
  uint8_t dtype_bits = 32;
  std::vector<std::string> var_names;
  uint16_t tile = 32;
  uint8_t strategy = 1;  // StrategyKind
  uint16_t interval = 3, k = 6, window = 16;
  uint64_t seed = 0;
  std::vector<uint32_t> steps;
  double tau_nrmse = 0;   // requested bound as NRMSE; 0 disables correction
  double data_range = 0;  // range of the original field, for the per-block bound
  uint32_t schedule_T = 0;
  double beta_start = 0, beta_end = 0;
  Digest codec_fp{}, denoiser_fp{}, basis_fp{};

  bool operator==(const ContainerHeader&) const = default;
};

/// Entropy-coded keyframe latents of one (variable, tile) track: all stored
/// frames in time order share one y stream and one z stream.
struct TrackCode {
  std::vector<uint32_t> y_support, z_support;  // per channel max |symbol|
  std::vector<uint8_t> y_bytes, z_bytes;
  bool operator==(const TrackCode&) const = default;
};

struct MinMaxRecord {
  int32_t lo = 0, hi = 1;
  bool operator==(const MinMaxRecord&) const = default;
};

struct Container {
  ContainerHeader header;
  std::vector<float> norm_mean, norm_range;  // per (var, frame)
  std::vector<MinMaxRecord> minmax;          // per (var, window, tile)
  std::vector<TrackCode> tracks;             // per (var, tile)
  std::vector<std::vector<uint8_t>> corrections;  // per (var, frame, tile)
  bool operator==(const Container&) const = default;
};

struct Accounting {
  size_t header = 0, norms = 0, latent = 0, hyper = 0, correction = 0, framing = 0;
  size_t size_L() const { return header + norms + latent + hyper; }
  size_t size_G() const { return correction; }
  size_t total() const { return size_L() + size_G() + framing; }
  double ratio(double original_bytes) const { return compression_ratio(original_bytes, size_L(), size_G()); }
};

namespace detail {

inline std::vector<uint8_t> encode_header(const ContainerHeader& h) {
  ByteWriter w;
  w.put(h.vars);
  w.put(h.times);
  w.put(h.height);
  w.put(h.width);
  w.put(h.dtype_bits);
  put_varint(w, h.var_names.size());
  for (auto& s : h.var_names) w.put_string(s);
  w.put(h.tile);
  w.put(h.strategy);
  w.put(h.interval);
  w.put(h.k);
  w.put(h.window);
  w.put(h.seed);
  put_varint(w, h.steps.size());
  for (uint32_t s : h.steps) put_varint(w, s);
  w.put(h.tau_nrmse);
  w.put(h.data_range);
  w.put(h.schedule_T);
  w.put(h.beta_start);
  w.put(h.beta_end);
  w.put_bytes(h.codec_fp);
  w.put_bytes(h.denoiser_fp);
  w.put_bytes(h.basis_fp);
  return w.take();
}

inline void read_digest(ByteReader& r, Digest& d) {
  const auto b = r.get_bytes(d.size());
  std::copy(b.begin(), b.end(), d.begin());
}

inline size_t checked_count(ByteReader& r, size_t min_bytes_each) {
  const uint64_t n = get_varint(r);
  if (min_bytes_each && n > r.remaining() / min_bytes_each) throw FormatError("container: implausible count");
  return static_cast<size_t>(n);
}

inline ContainerHeader decode_header(std::span<const uint8_t> b) {
  ByteReader r(b);
  ContainerHeader h;
  h.vars = r.get<uint32_t>();
  h.times = r.get<uint32_t>();
  h.height = r.get<uint32_t>();
  h.width = r.get<uint32_t>();
  h.dtype_bits = r.get<uint8_t>();
  const size_t nv = checked_count(r, 2);
  for (size_t i = 0; i < nv; ++i) h.var_names.push_back(r.get_string());
  h.tile = r.get<uint16_t>();
  h.strategy = r.get<uint8_t>();
  h.interval = r.get<uint16_t>();
  h.k = r.get<uint16_t>();
  h.window = r.get<uint16_t>();
  h.seed = r.get<uint64_t>();
  const size_t ns = checked_count(r, 1);
  for (size_t i = 0; i < ns; ++i) h.steps.push_back(static_cast<uint32_t>(get_varint(r)));
  h.tau_nrmse = r.get<double>();
  h.data_range = r.get<double>();
  h.schedule_T = r.get<uint32_t>();
  h.beta_start = r.get<double>();
  h.beta_end = r.get<double>();
  read_digest(r, h.codec_fp);
  read_digest(r, h.denoiser_fp);
  read_digest(r, h.basis_fp);
  if (!r.done()) throw FormatError("container: trailing bytes in header");
  if (h.dtype_bits != 32 && h.dtype_bits != 64) throw FormatError("container: bad dtype");
  return h;
}

inline void put_blob(ByteWriter& w, std::span<const uint8_t> b) {
  put_varint(w, b.size());
  w.put_bytes(b);
}

inline std::vector<uint8_t> get_blob(ByteReader& r) {
  const uint64_t n = get_varint(r);
  if (n > r.remaining()) throw FormatError("container: truncated blob");
  const auto b = r.get_bytes(static_cast<size_t>(n));
  return {b.begin(), b.end()};
}

struct Sections {
  std::vector<uint8_t> header, norms, latent, hyper, correction;
};

inline Sections encode_sections(const Container& c) {
  Sections s;
  s.header = encode_header(c.header);
  if (c.norm_mean.size() != c.norm_range.size()) throw ConfigError("container: normalization arrays differ in size");
  {
    ByteWriter w;
    put_varint(w, c.norm_mean.size());
    for (size_t i = 0; i < c.norm_mean.size(); ++i) {
      w.put(c.norm_mean[i]);
      w.put(c.norm_range[i]);
    }
    s.norms = w.take();
  }
  {
    ByteWriter w;
    put_varint(w, c.minmax.size());
    for (auto& m : c.minmax) {
      put_svarint(w, m.lo);
      put_svarint(w, m.hi);
    }
    put_varint(w, c.tracks.size());
    for (auto& t : c.tracks) {
      put_varint(w, t.y_support.size());
      for (uint32_t v : t.y_support) put_varint(w, v);
      put_blob(w, t.y_bytes);
    }
    s.latent = w.take();
  }
  {
    ByteWriter w;
    put_varint(w, c.tracks.size());
    for (auto& t : c.tracks) {
      put_varint(w, t.z_support.size());
      for (uint32_t v : t.z_support) put_varint(w, v);
      put_blob(w, t.z_bytes);
    }
    s.hyper = w.take();
  }
  {
    ByteWriter w;
    put_varint(w, c.corrections.size());
    for (auto& p : c.corrections) put_blob(w, p);
    s.correction = w.take();
  }
  return s;
}

}  // namespace detail

inline std::vector<uint8_t> write_container(const Container& c) {
  const auto s = detail::encode_sections(c);
  ByteWriter body;
  for (auto* sec : {&s.header, &s.norms, &s.latent, &s.hyper, &s.correction}) body.put_section(*sec);
  const auto b = body.take();
  ByteWriter w;
  for (char ch : std::string_view("KFDZ")) w.put<uint8_t>(static_cast<uint8_t>(ch));
  w.put<uint16_t>(kContainerVersion);
  w.put<uint32_t>(static_cast<uint32_t>(b.size()));
  w.put_bytes(b);
  w.put<uint32_t>(crc32(b));
  return w.take();
}

inline Container read_container(std::span<const uint8_t> bytes, Accounting* acct = nullptr) {
  ByteReader r(bytes);
  std::string magic;
  for (int i = 0; i < 4; ++i) magic.push_back(static_cast<char>(r.get<uint8_t>()));
  if (magic != "KFDZ") throw FormatError("container: bad magic");
  const uint16_t ver = r.get<uint16_t>();
  if (ver != kContainerVersion)
    throw FormatError("container: unsupported version " + std::to_string(ver) + " (expected " +
                      std::to_string(kContainerVersion) + ")");
  const auto body = r.get_section();
  const uint32_t crc = r.get<uint32_t>();
  if (!r.done()) throw FormatError("container: trailing bytes");
  if (crc32(body) != crc) throw FormatError("container: checksum mismatch");

  ByteReader br(body);
  const auto sh = br.get_section(), sn = br.get_section(), sl = br.get_section(), sz = br.get_section(),
             sc = br.get_section();
  if (!br.done()) throw FormatError("container: trailing bytes in body");

  Container c;
  c.header = detail::decode_header(sh);
  {
    ByteReader q(sn);
    const size_t n = detail::checked_count(q, 8);
    c.norm_mean.resize(n);
    c.norm_range.resize(n);
    for (size_t i = 0; i < n; ++i) {
      c.norm_mean[i] = q.get<float>();
      c.norm_range[i] = q.get<float>();
    }
    if (!q.done()) throw FormatError("container: trailing bytes in norms");
  }
  {
    ByteReader q(sl);
    const size_t nm = detail::checked_count(q, 2);
    for (size_t i = 0; i < nm; ++i) {
      MinMaxRecord m;
      m.lo = static_cast<int32_t>(get_svarint(q));
      m.hi = static_cast<int32_t>(get_svarint(q));
      if (m.hi <= m.lo) throw FormatError("container: bad min-max record");
      c.minmax.push_back(m);
    }
    const size_t nt = detail::checked_count(q, 2);
    c.tracks.resize(nt);
    for (auto& t : c.tracks) {
      const size_t ns = detail::checked_count(q, 1);
      for (size_t i = 0; i < ns; ++i) t.y_support.push_back(static_cast<uint32_t>(get_varint(q)));
      t.y_bytes = detail::get_blob(q);
    }
    if (!q.done()) throw FormatError("container: trailing bytes in latent section");
  }
  {
    ByteReader q(sz);
    if (detail::checked_count(q, 2) != c.tracks.size()) throw FormatError("container: track count mismatch");
    for (auto& t : c.tracks) {
      const size_t ns = detail::checked_count(q, 1);
      for (size_t i = 0; i < ns; ++i) t.z_support.push_back(static_cast<uint32_t>(get_varint(q)));
      t.z_bytes = detail::get_blob(q);
    }
    if (!q.done()) throw FormatError("container: trailing bytes in hyperlatent section");
  }
  {
    ByteReader q(sc);
    const size_t n = detail::checked_count(q, 1);
    for (size_t i = 0; i < n; ++i) c.corrections.push_back(detail::get_blob(q));
    if (!q.done()) throw FormatError("container: trailing bytes in correction section");
  }
  if (acct) {
    acct->header = sh.size();
    acct->norms = sn.size();
    acct->latent = sl.size();
    acct->hyper = sz.size();
    acct->correction = sc.size();
    acct->framing = bytes.size() - acct->size_L() - acct->size_G();
  }
  return c;
}

inline Accounting accounting(const Container& c) {
  const auto s = detail::encode_sections(c);
  Accounting a;
  a.header = s.header.size();
  a.norms = s.norms.size();
  a.latent = s.latent.size();
  a.hyper = s.hyper.size();
  a.correction = s.correction.size();
  a.framing = 4 + 2 + 4 + 4 + 5 * 4;
  return a;
}

}  // namespace kfd
