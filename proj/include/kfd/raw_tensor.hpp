#pragma once

// Raw tensor files:
//
//   "KFDT" | u16 version | u8 dtype bits (32|64) | u8 0 |
//   u32 V | u32 T | u32 H | u32 W | V x (u16 length, name bytes) |
//   V*T*H*W little-endian IEEE values, row major [V, T, H, W]

#include <string>

#include "kfd/core.hpp"
#include "kfd/nn/layers.hpp"

namespace kfd {

inline constexpr uint16_t kRawTensorVersion = 1;

inline std::vector<uint8_t> encode_raw_tensor(const ScalarField& f) {
  f.validate();
  ByteWriter w;
  for (char c : std::string_view("KFDT")) w.put<uint8_t>(static_cast<uint8_t>(c));
  w.put<uint16_t>(kRawTensorVersion);
  w.put<uint8_t>(static_cast<uint8_t>(f.dtype_bits));
  w.put<uint8_t>(0);
  for (size_t d : f.dims()) w.put<uint32_t>(static_cast<uint32_t>(d));
  for (auto& n : f.var_names) w.put_string(n);
  for (double v : f.data) {
    if (f.dtype_bits == 32) w.put<float>(static_cast<float>(v));
    else w.put<double>(v);
  }
  return w.take();
}

inline ScalarField decode_raw_tensor(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  std::string magic;
  for (int i = 0; i < 4; ++i) magic.push_back(static_cast<char>(r.get<uint8_t>()));
  if (magic != "KFDT") throw FormatError("raw tensor: bad magic");
  if (r.get<uint16_t>() != kRawTensorVersion) throw FormatError("raw tensor: unsupported version");
  ScalarField f;
  f.dtype_bits = r.get<uint8_t>();
  r.get<uint8_t>();
  if (f.dtype_bits != 32 && f.dtype_bits != 64) throw FormatError("raw tensor: dtype must be 32 or 64 bits");
  f.vars = r.get<uint32_t>();
  f.times = r.get<uint32_t>();
  f.height = r.get<uint32_t>();
  f.width = r.get<uint32_t>();
  if (!f.vars || !f.times || !f.height || !f.width) throw DataError("raw tensor: zero dimension");
  for (size_t v = 0; v < f.vars; ++v) f.var_names.push_back(r.get_string());
  const uint64_t count = static_cast<uint64_t>(f.vars) * f.times * f.height * f.width;
  const uint64_t word = static_cast<uint64_t>(f.dtype_bits / 8);
  if (r.remaining() % word || r.remaining() / word != count)
    throw DataError("raw tensor: header declares " + std::to_string(count) + " values but payload holds " +
                    std::to_string(r.remaining() / word));
  f.data.resize(count);
  for (auto& v : f.data) v = f.dtype_bits == 32 ? static_cast<double>(r.get<float>()) : r.get<double>();
  f.validate();
  return f;
}

inline ScalarField read_raw_tensor(const std::string& path) { return decode_raw_tensor(nn::read_file(path)); }
inline void write_raw_tensor(const std::string& path, const ScalarField& f) { nn::write_file(path, encode_raw_tensor(f)); }

}  // namespace kfd
