#pragma once

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "kfd/nn/autograd.hpp"

namespace kfd::nn {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using StrideMap = Eigen::Map<MatR, 0, Eigen::OuterStride<>>;
using CStrideMap = Eigen::Map<const MatR, 0, Eigen::OuterStride<>>;

inline Var constant(Tensor t) { return Var(std::move(t), false); }

inline void check_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  check_same(a, b, "add");
  Tensor out = a.value();
  for (size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return make_op(std::move(out), {a, b}, [](detail::Node& n) {
    for (size_t p = 0; p < 2; ++p) {
      if (!parent_needs(n, p)) continue;
      auto& g = parent_grad(n, p);
      for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_same(a, b, "sub");
  Tensor out = a.value();
  for (size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return make_op(std::move(out), {a, b}, [](detail::Node& n) {
    if (parent_needs(n, 0)) {
      auto& g = parent_grad(n, 0);
      for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (parent_needs(n, 1)) {
      auto& g = parent_grad(n, 1);
      for (size_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same(a, b, "mul");
  Tensor out = a.value();
  for (size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_op(std::move(out), {a, b}, [](detail::Node& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (parent_needs(n, 0)) {
      auto& g = parent_grad(n, 0);
      for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (parent_needs(n, 1)) {
      auto& g = parent_grad(n, 1);
      for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, float s) {
  Tensor out = a.value();
  for (auto& v : out.data) v *= s;
  return make_op(std::move(out), {a}, [s](detail::Node& n) {
    auto& g = parent_grad(n, 0);
    for (size_t i = 0; i < g.numel(); ++i) g[i] += s * n.grad[i];
  });
}

/// y = f(x) with derivative expressed through x and y.
template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  Tensor out = x.value();
  for (auto& v : out.data) v = f(v);
  return make_op(std::move(out), {x}, [df](detail::Node& n) {
    const auto& xv = n.parents[0]->value;
    auto& g = parent_grad(n, 0);
    for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * df(xv[i], n.value[i]);
  });
}

inline Var silu(const Var& x) {
  return unary(
      x, [](float v) { return v / (1.f + std::exp(-v)); },
      [](float v, float) {
        const float s = 1.f / (1.f + std::exp(-v));
        return s * (1.f + v * (1.f - s));
      });
}

inline Var leaky_relu(const Var& x, float slope = 0.01f) {
  return unary(
      x, [slope](float v) { return v > 0 ? v : slope * v; }, [slope](float v, float) { return v > 0 ? 1.f : slope; });
}

inline Var tanh(const Var& x) {
  return unary(x, [](float v) { return std::tanh(v); }, [](float, float y) { return 1.f - y * y; });
}

inline Var sigmoid(const Var& x) {
  return unary(
      x, [](float v) { return 1.f / (1.f + std::exp(-v)); }, [](float, float y) { return y * (1.f - y); });
}

inline float softplus_f(float v) { return v > 20.f ? v : std::log1p(std::exp(v)); }

inline Var softplus(const Var& x) {
  return unary(x, softplus_f, [](float v, float) { return 1.f / (1.f + std::exp(-v)); });
}

/// Clamp with zero gradient outside [lo, hi].
inline Var clamp(const Var& x, float lo, float hi) {
  return unary(
      x, [lo, hi](float v) { return std::clamp(v, lo, hi); },
      [lo, hi](float v, float) { return (v >= lo && v <= hi) ? 1.f : 0.f; });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(const Var& x, Shape s) {
  if (shape_numel(s) != x.numel()) throw ConfigError("reshape: element count mismatch");
  Tensor out(std::move(s), x.value().data);
  return make_op(std::move(out), {x}, [](detail::Node& n) {
    auto& g = parent_grad(n, 0);
    for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

/// [A, B, C, D] -> [A, C, B, D]
inline Var transpose12(const Var& x) {
  if (x.value().rank() != 4) throw ConfigError("transpose12 expects rank 4");
  const int A = x.shape()[0], B = x.shape()[1], C = x.shape()[2], D = x.shape()[3];
  Tensor out(Shape{A, C, B, D});
  const float* s = x.value().ptr();
  float* d = out.ptr();
  for (int a = 0; a < A; ++a)
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        std::copy_n(s + (((size_t)a * B + b) * C + c) * D, D, d + (((size_t)a * C + c) * B + b) * D);
  return make_op(std::move(out), {x}, [A, B, C, D](detail::Node& n) {
    auto& g = parent_grad(n, 0);
    for (int a = 0; a < A; ++a)
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          float* gd = g.ptr() + (((size_t)a * B + b) * C + c) * D;
          const float* od = n.grad.ptr() + (((size_t)a * C + c) * B + b) * D;
          for (int k = 0; k < D; ++k) gd[k] += od[k];
        }
  });
}

/// Depth-to-space: [B, H, W, C*r*r] -> [B, H*r, W*r, C]. Input channel
/// (dy*r + dx)*C + c feeds output pixel (y*r+dy, x*r+dx), channel c.
inline Var pixel_shuffle(const Var& x, int r) {
  const int B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], Cin = x.shape()[3];
  if (Cin % (r * r)) throw ConfigError("pixel_shuffle: channels not divisible by r^2");
  const int C = Cin / (r * r);
  Tensor out(Shape{B, H * r, W * r, C});
  auto map = [=](int b, int y, int xx, int dy, int dx, size_t& src, size_t& dst) {
    src = (((size_t)b * H + y) * W + xx) * Cin + (size_t)(dy * r + dx) * C;
    dst = (((size_t)b * H * r + (y * r + dy)) * (W * r) + (xx * r + dx)) * C;
  };
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        for (int dy = 0; dy < r; ++dy)
          for (int dx = 0; dx < r; ++dx) {
            size_t s, d;
            map(b, y, xx, dy, dx, s, d);
            std::copy_n(x.value().ptr() + s, C, out.ptr() + d);
          }
  return make_op(std::move(out), {x}, [=](detail::Node& n) {
    auto& g = parent_grad(n, 0);
    for (int b = 0; b < B; ++b)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
          for (int dy = 0; dy < r; ++dy)
            for (int dx = 0; dx < r; ++dx) {
              size_t s, d;
              map(b, y, xx, dy, dx, s, d);
              for (int c = 0; c < C; ++c) g[s + c] += n.grad[d + c];
            }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// x [..., K] times w [K, N] plus optional bias b [N].
inline Var linear(const Var& x, const Var& w, const Var& b = Var()) {
  const int K = w.shape()[0], N = w.shape()[1];
  if (x.shape().back() != K) throw ConfigError("linear: inner dimension mismatch " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const int M = static_cast<int>(x.numel() / K);
  Shape os = x.shape();
  os.back() = N;
  Tensor out(os);
  MapR Y(out.ptr(), M, N);
  Y.noalias() = CMapR(x.value().ptr(), M, K) * CMapR(w.value().ptr(), K, N);
  const bool has_b = b.defined();
  if (has_b) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(b.value().ptr(), N);
  std::vector<Var> parents{x, w};
  if (has_b) parents.push_back(b);
  return make_op(std::move(out), parents, [M, K, N, has_b](detail::Node& n) {
    CMapR dY(n.grad.ptr(), M, N);
    if (parent_needs(n, 0)) {
      MapR dX(parent_grad(n, 0).ptr(), M, K);
      dX.noalias() += dY * CMapR(n.parents[1]->value.ptr(), K, N).transpose();
    }
    if (parent_needs(n, 1)) {
      MapR dW(parent_grad(n, 1).ptr(), K, N);
      dW.noalias() += CMapR(n.parents[0]->value.ptr(), M, K).transpose() * dY;
    }
    if (has_b && parent_needs(n, 2)) {
      Eigen::Map<Eigen::RowVectorXf> db(parent_grad(n, 2).ptr(), N);
      db += dY.colwise().sum();
    }
  });
}

/// Patch extraction with zero padding: [B, H, W, C] -> [B, Ho, Wo, k*k*C],
/// patch element order (ky, kx, c).
inline Var im2col(const Var& x, int k, int stride, int pad) {
  const int B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
  const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ConfigError("im2col: kernel larger than padded input");
  const int P = k * k * C;
  Tensor out(Shape{B, Ho, Wo, P});
  const float* src = x.value().ptr();
  float* dst = out.ptr();
  for (int b = 0; b < B; ++b)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        float* row = dst + (((size_t)b * Ho + oy) * Wo + ox) * P;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride + ky - pad;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride + kx - pad;
            float* cell = row + (ky * k + kx) * C;
            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
            std::copy_n(src + (((size_t)b * H + iy) * W + ix) * C, C, cell);
          }
        }
      }
  return make_op(std::move(out), {x}, [=](detail::Node& n) {
    auto& g = parent_grad(n, 0);
    const float* gd = n.grad.ptr();
    for (int b = 0; b < B; ++b)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const float* row = gd + (((size_t)b * Ho + oy) * Wo + ox) * P;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= W) continue;
              float* gx = g.ptr() + (((size_t)b * H + iy) * W + ix) * C;
              const float* cell = row + (ky * k + kx) * C;
              for (int c = 0; c < C; ++c) gx[c] += cell[c];
            }
          }
        }
  });
}

/// 2-D convolution; w is [k*k*Cin, Cout].
inline Var conv2d(const Var& x, const Var& w, const Var& b, int k, int stride, int pad) {
  if (k == 1 && stride == 1 && pad == 0) return linear(x, w, b);
  return linear(im2col(x, k, stride, pad), w, b);
}

/// x viewed as [G, R, C]; e is [G, C] and is added to each of the R rows.
inline Var add_broadcast(const Var& x, const Var& e) {
  const int G = e.shape()[0], C = e.shape()[1];
  if (x.numel() % ((size_t)G * C)) throw ConfigError("add_broadcast: incompatible shapes");
  const size_t R = x.numel() / ((size_t)G * C);
  Tensor out = x.value();
  for (int g = 0; g < G; ++g)
    for (size_t r = 0; r < R; ++r) {
      float* o = out.ptr() + ((size_t)g * R + r) * C;
      const float* ev = e.value().ptr() + (size_t)g * C;
      for (int c = 0; c < C; ++c) o[c] += ev[c];
    }
  return make_op(std::move(out), {x, e}, [G, C, R](detail::Node& n) {
    if (parent_needs(n, 0)) {
      auto& gx = parent_grad(n, 0);
      for (size_t i = 0; i < gx.numel(); ++i) gx[i] += n.grad[i];
    }
    if (parent_needs(n, 1)) {
      auto& ge = parent_grad(n, 1);
      for (int g = 0; g < G; ++g)
        for (size_t r = 0; r < R; ++r) {
          const float* o = n.grad.ptr() + ((size_t)g * R + r) * C;
          for (int c = 0; c < C; ++c) ge[(size_t)g * C + c] += o[c];
        }
    }
  });
}

/// Layer normalization over the last dimension with affine gain and bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, float eps = 1e-5f) {
  const int C = x.shape().back();
  const size_t M = x.numel() / C;
  Tensor out(x.shape());
  std::vector<float> xhat(x.numel()), rstd(M);
  const float* xv = x.value().ptr();
  const float* gv = gain.value().ptr();
  const float* bv = bias.value().ptr();
  for (size_t m = 0; m < M; ++m) {
    const float* row = xv + m * C;
    double mu = 0, var = 0;
    for (int c = 0; c < C; ++c) mu += row[c];
    mu /= C;
    for (int c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= C;
    const float rs = 1.f / std::sqrt(static_cast<float>(var) + eps);
    rstd[m] = rs;
    for (int c = 0; c < C; ++c) {
      const float h = (row[c] - static_cast<float>(mu)) * rs;
      xhat[m * C + c] = h;
      out[m * C + c] = h * gv[c] + bv[c];
    }
  }
  return make_op(std::move(out), {x, gain, bias},
                 [C, M, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& n) {
                   const float* gv = n.parents[1]->value.ptr();
                   const float* dy = n.grad.ptr();
                   if (parent_needs(n, 1) || parent_needs(n, 2)) {
                     auto& gg = parent_grad(n, 1);
                     auto& gb = parent_grad(n, 2);
                     for (size_t m = 0; m < M; ++m)
                       for (int c = 0; c < C; ++c) {
                         gg[c] += dy[m * C + c] * xhat[m * C + c];
                         gb[c] += dy[m * C + c];
                       }
                   }
                   if (parent_needs(n, 0)) {
                     auto& gx = parent_grad(n, 0);
                     for (size_t m = 0; m < M; ++m) {
                       double s1 = 0, s2 = 0;
                       for (int c = 0; c < C; ++c) {
                         const float dh = dy[m * C + c] * gv[c];
                         s1 += dh;
                         s2 += dh * xhat[m * C + c];
                       }
                       const float a = static_cast<float>(s1 / C), bq = static_cast<float>(s2 / C);
                       for (int c = 0; c < C; ++c) {
                         const float dh = dy[m * C + c] * gv[c];
                         gx[m * C + c] += rstd[m] * (dh - a - xhat[m * C + c] * bq);
                       }
                     }
                   }
                 });
}

/// Multi-head scaled dot-product self attention. q, k, v are [G, L, C];
/// each of the G groups attends independently over its L tokens, with C
/// split evenly across heads.
inline Var attention(const Var& q, const Var& k, const Var& v, int heads) {
  check_same(q, k, "attention");
  check_same(q, v, "attention");
  const int G = q.shape()[0], L = q.shape()[1], C = q.shape()[2];
  if (C % heads) throw ConfigError("attention: channels not divisible by heads");
  const int d = C / heads;
  const float sc = 1.f / std::sqrt(static_cast<float>(d));
  Tensor out(q.shape());
  std::vector<float> probs((size_t)G * heads * L * L);
  MatR S(L, L);
  for (int g = 0; g < G; ++g)
    for (int h = 0; h < heads; ++h) {
      const size_t off = (size_t)g * L * C + (size_t)h * d;
      CStrideMap Q(q.value().ptr() + off, L, d, Eigen::OuterStride<>(C));
      CStrideMap K(k.value().ptr() + off, L, d, Eigen::OuterStride<>(C));
      CStrideMap V(v.value().ptr() + off, L, d, Eigen::OuterStride<>(C));
      S.noalias() = (Q * K.transpose()) * sc;
      for (int i = 0; i < L; ++i) {
        const float mx = S.row(i).maxCoeff();
        S.row(i) = (S.row(i).array() - mx).exp();
        S.row(i) /= S.row(i).sum();
      }
      MapR P(probs.data() + ((size_t)g * heads + h) * L * L, L, L);
      P = S;
      StrideMap O(out.ptr() + off, L, d, Eigen::OuterStride<>(C));
      O.noalias() = P * V;
    }
  return make_op(std::move(out), {q, k, v}, [G, L, C, heads, d, sc, probs = std::move(probs)](detail::Node& n) {
    const bool need_q = parent_needs(n, 0), need_k = parent_needs(n, 1), need_v = parent_needs(n, 2);
    float* gq = need_q ? parent_grad(n, 0).ptr() : nullptr;
    float* gk = need_k ? parent_grad(n, 1).ptr() : nullptr;
    float* gv = need_v ? parent_grad(n, 2).ptr() : nullptr;
    MatR dP(L, L), dS(L, L);
    for (int g = 0; g < G; ++g)
      for (int h = 0; h < heads; ++h) {
        const size_t off = (size_t)g * L * C + (size_t)h * d;
        CStrideMap Q(n.parents[0]->value.ptr() + off, L, d, Eigen::OuterStride<>(C));
        CStrideMap K(n.parents[1]->value.ptr() + off, L, d, Eigen::OuterStride<>(C));
        CStrideMap V(n.parents[2]->value.ptr() + off, L, d, Eigen::OuterStride<>(C));
        CStrideMap dO(n.grad.ptr() + off, L, d, Eigen::OuterStride<>(C));
        CMapR P(probs.data() + ((size_t)g * heads + h) * L * L, L, L);
        if (need_v) {
          StrideMap dV(gv + off, L, d, Eigen::OuterStride<>(C));
          dV.noalias() += P.transpose() * dO;
        }
        dP.noalias() = dO * V.transpose();
        for (int i = 0; i < L; ++i) {
          const float dot = (dP.row(i).array() * P.row(i).array()).sum();
          dS.row(i) = P.row(i).array() * (dP.row(i).array() - dot);
        }
        dS *= sc;
        if (need_q) {
          StrideMap dQ(gq + off, L, d, Eigen::OuterStride<>(C));
          dQ.noalias() += dS * K;
        }
        if (need_k) {
          StrideMap dK(gk + off, L, d, Eigen::OuterStride<>(C));
          dK.noalias() += dS.transpose() * Q;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Var sum(const Var& x) {
  double s = 0;
  for (float v : x.value().data) s += v;
  return make_op(Tensor(Shape{1}, {static_cast<float>(s)}), {x}, [](detail::Node& n) {
    auto& g = parent_grad(n, 0);
    for (auto& v : g.data) v += n.grad[0];
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.f / static_cast<float>(x.numel())); }

/// Mean of (pred - target)^2 over the rows whose mask entry is nonzero.
/// pred is viewed as [rows, row_size] with rows = mask.size().
inline Var masked_mse(const Var& pred, const Tensor& target, const std::vector<uint8_t>& row_mask) {
  if (pred.numel() != target.numel()) throw ConfigError("masked_mse: shape mismatch");
  const size_t rows = row_mask.size();
  if (rows == 0 || pred.numel() % rows) throw ConfigError("masked_mse: mask does not tile prediction");
  const size_t rs = pred.numel() / rows;
  size_t count = 0;
  double s = 0;
  for (size_t r = 0; r < rows; ++r) {
    if (!row_mask[r]) continue;
    count += rs;
    for (size_t i = r * rs; i < (r + 1) * rs; ++i) {
      const double dlt = pred.value()[i] - target[i];
      s += dlt * dlt;
    }
  }
  if (count == 0) throw ConfigError("masked_mse: empty mask");
  const float inv = 1.f / static_cast<float>(count);
  return make_op(Tensor(Shape{1}, {static_cast<float>(s / count)}), {pred},
                 [target, row_mask, rs, inv](detail::Node& n) {
                   auto& g = parent_grad(n, 0);
                   const float go = n.grad[0];
                   for (size_t r = 0; r < row_mask.size(); ++r) {
                     if (!row_mask[r]) continue;
                     for (size_t i = r * rs; i < (r + 1) * rs; ++i)
                       g[i] += 2.f * inv * go * (n.parents[0]->value[i] - target[i]);
                   }
                 });
}

inline Var mse(const Var& pred, const Tensor& target) {
  return masked_mse(pred, target, std::vector<uint8_t>(1, 1));
}

}  // namespace kfd::nn
