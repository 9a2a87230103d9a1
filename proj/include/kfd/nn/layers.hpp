#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "kfd/nn/ops.hpp"

namespace kfd::nn {

struct NamedParam {
  std::string name;
  Var* var;
};
using ParamList = std::vector<NamedParam>;

inline Var make_param(Shape s, Rng& rng, float std_dev) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = static_cast<float>(rng.normal() * std_dev);
  return Var(std::move(t), true);
}

inline Var make_param_fill(Shape s, float fill) { return Var(Tensor(std::move(s), fill), true); }

struct Linear {
  Var w, b;
  Linear() = default;
  Linear(int in, int out, Rng& rng, float gain = 1.f)
      : w(make_param({in, out}, rng, gain / std::sqrt(static_cast<float>(in)))), b(make_param_fill({out}, 0.f)) {}
  Var operator()(const Var& x) const { return linear(x, w, b); }
  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }
};

struct Conv2d {
  int k = 3, stride = 1, pad = 1;
  Var w, b;
  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride_, Rng& rng, float gain = 1.f)
      : k(kernel), stride(stride_), pad(kernel / 2),
        w(make_param({kernel * kernel * in, out}, rng, gain / std::sqrt(static_cast<float>(kernel * kernel * in)))),
        b(make_param_fill({out}, 0.f)) {}
  Var operator()(const Var& x) const { return conv2d(x, w, b, k, stride, pad); }
  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }
};

struct LayerNorm {
  Var g, b;
  LayerNorm() = default;
  explicit LayerNorm(int c) : g(make_param_fill({c}, 1.f)), b(make_param_fill({c}, 0.f)) {}
  Var operator()(const Var& x) const { return layer_norm(x, g, b); }
  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".g", &g});
    out.push_back({prefix + ".b", &b});
  }
};

/// Pre-norm multi-head self attention with a residual connection. Input is
/// [groups, tokens, channels].
struct SelfAttention {
  int heads = 1;
  LayerNorm norm;
  Linear q, k, v, o;
  SelfAttention() = default;
  SelfAttention(int ch, int heads_, Rng& rng)
      : heads(heads_), norm(ch), q(ch, ch, rng), k(ch, ch, rng), v(ch, ch, rng), o(ch, ch, rng, 0.f) {}
  Var operator()(const Var& x) const {
    Var h = norm(x);
    return add(x, o(attention(q(h), k(h), v(h), heads)));
  }
  void collect(const std::string& prefix, ParamList& out) {
    norm.collect(prefix + ".norm", out);
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    o.collect(prefix + ".o", out);
  }
};

/// Adam with optional global-norm gradient clipping.
class Adam {
 public:
  explicit Adam(ParamList params, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
      : params_(std::move(params)), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& p : params_) {
      m_.emplace_back(p.var->numel(), 0.f);
      v_.emplace_back(p.var->numel(), 0.f);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.var->zero_grad();
  }

  /// Global L2 norm of all gradients.
  double grad_norm() const {
    double s = 0;
    for (auto& p : params_)
      if (p.var->has_grad())
        for (float g : p.var->grad().data) s += static_cast<double>(g) * g;
    return std::sqrt(s);
  }

  void step(float lr, float clip_norm = 0.f) {
    ++t_;
    float factor = 1.f;
    if (clip_norm > 0.f) {
      const double gn = grad_norm();
      if (gn > clip_norm) factor = static_cast<float>(clip_norm / gn);
    }
    const float c1 = 1.f - std::pow(b1_, static_cast<float>(t_));
    const float c2 = 1.f - std::pow(b2_, static_cast<float>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Var& p = *params_[i].var;
      if (!p.has_grad()) continue;
      auto& w = p.mutable_value().data;
      const auto& g = p.grad().data;
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < w.size(); ++j) {
        const float gj = g[j] * factor;
        m[j] = b1_ * m[j] + (1.f - b1_) * gj;
        v[j] = b2_ * v[j] + (1.f - b2_) * gj * gj;
        w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      }
    }
  }

 private:
  ParamList params_;
  std::vector<std::vector<float>> m_, v_;
  float b1_, b2_, eps_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint files: "KFDM" magic, u16 version, u32-prefixed JSON manifest,
// then raw little-endian float32 payload for each tensor in manifest order.

inline constexpr uint16_t kCheckpointVersion = 1;

inline std::vector<uint8_t> encode_checkpoint(const nlohmann::json& config, const ParamList& params) {
  nlohmann::json manifest;
  manifest["config"] = config;
  manifest["tensors"] = nlohmann::json::array();
  for (auto& p : params) manifest["tensors"].push_back({{"name", p.name}, {"shape", p.var->shape()}});
  const std::string js = manifest.dump();
  ByteWriter w;
  for (char c : std::string_view("KFDM")) w.put<uint8_t>(static_cast<uint8_t>(c));
  w.put<uint16_t>(kCheckpointVersion);
  w.put_section(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(js.data()), js.size()));
  for (auto& p : params)
    for (float v : p.var->value().data) w.put<float>(v);
  return w.take();
}

/// Parses the manifest; when params is non-null, loads tensors into it by
/// name and checks every shape.
inline nlohmann::json decode_checkpoint(std::span<const uint8_t> bytes, ParamList* params) {
  ByteReader r(bytes);
  std::string magic;
  for (int i = 0; i < 4; ++i) magic.push_back(static_cast<char>(r.get<uint8_t>()));
  if (magic != "KFDM") throw FormatError("checkpoint: bad magic");
  const auto ver = r.get<uint16_t>();
  if (ver != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(ver));
  const auto js = r.get_section();
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(js.begin(), js.end());
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  if (!params) return manifest["config"];
  std::map<std::string, Var*> by_name;
  for (auto& p : *params) by_name[p.name] = p.var;
  size_t loaded = 0;
  for (auto& t : manifest["tensors"]) {
    const std::string name = t["name"];
    const Shape shape = t["shape"].get<Shape>();
    const size_t n = shape_numel(shape);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: unexpected tensor " + name);
    if (it->second->shape() != shape) throw FormatError("checkpoint: shape mismatch for " + name);
    auto& dst = it->second->mutable_value().data;
    for (size_t i = 0; i < n; ++i) dst[i] = r.get<float>();
    ++loaded;
  }
  if (loaded != params->size()) throw FormatError("checkpoint: missing tensors");
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return manifest["config"];
}

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, std::span<const uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed: " + path);
}

}  // namespace kfd::nn
