#pragma once

// Hyperprior entropy model: a factorized learned density for the hyperlatent
// z, a Gaussian conditional for the latent y whose mean and scale come from
// the hyper-synthesis transform, and bit-rate estimates for both.

#include <cmath>
#include <limits>
#include <vector>

#include "kfd/nn/layers.hpp"
#include "kfd/range_coder.hpp"

namespace kfd {

inline constexpr double kSigmaMin = 0.01;
inline constexpr double kSigmaMax = 256.0;
inline constexpr double kLikelihoodFloor = 1e-9;

namespace detail {
inline double normal_pdf(double x) { return 0.3989422804014327 * std::exp(-0.5 * x * x); }
}  // namespace detail

/// Sum over elements of -log2 P(y | mu, sigma) with P the unit-box
/// convolved Gaussian. Differentiable in all three inputs; gradients vanish
/// where the likelihood sits on the floor.
inline nn::Var gaussian_rate_bits(const nn::Var& y, const nn::Var& mu, const nn::Var& sigma) {
  nn::check_same(y, mu, "gaussian_rate_bits");
  nn::check_same(y, sigma, "gaussian_rate_bits");
  const size_t n = y.numel();
  std::vector<float> dy(n), dmu(n), dsig(n);
  double total = 0;
  const double floor_bits = -std::log2(kLikelihoodFloor);
  for (size_t i = 0; i < n; ++i) {
    const double s = sigma.value()[i];
    const double c = y.value()[i] - mu.value()[i];
    const double u = (c + 0.5) / s, l = (c - 0.5) / s;
    const double p = normal_interval(l, u);
    if (!(p > kLikelihoodFloor)) {
      total += floor_bits;
      dy[i] = dmu[i] = dsig[i] = 0.f;
      continue;
    }
    total += -std::log2(p);
    const double pu = detail::normal_pdf(u), pl = detail::normal_pdf(l);
    const double dbits_dp = -1.0 / (p * M_LN2);
    const double dp_dy = (pu - pl) / s;
    const double dp_ds = -(pu * u - pl * l) / s;
    dy[i] = static_cast<float>(dbits_dp * dp_dy);
    dmu[i] = static_cast<float>(-dbits_dp * dp_dy);
    dsig[i] = static_cast<float>(dbits_dp * dp_ds);
  }
  return nn::make_op(nn::Tensor(nn::Shape{1}, {static_cast<float>(total)}), {y, mu, sigma},
                     [dy = std::move(dy), dmu = std::move(dmu), dsig = std::move(dsig)](nn::detail::Node& nd) {
                       const float go = nd.grad[0];
                       const std::vector<float>* parts[3] = {&dy, &dmu, &dsig};
                       for (size_t p = 0; p < 3; ++p) {
                         if (!nn::parent_needs(nd, p)) continue;
                         auto& g = nn::parent_grad(nd, p);
                         for (size_t i = 0; i < g.numel(); ++i) g[i] += go * (*parts[p])[i];
                       }
                     });
}

/// Non-parametric fully factorized density: per channel, a monotone chain of
/// small dense layers maps x to the logit of its CDF. Layer widths are
/// 1 -> 3 -> 3 -> 3 -> 1; positivity of the matrices comes from softplus and
/// the gated tanh terms use factors bounded by tanh, so the CDF is monotone.
class FactorizedDensity {
 public:
  static constexpr int kLayers = 4;
  static constexpr int kDims[kLayers + 1] = {1, 3, 3, 3, 1};

  FactorizedDensity() = default;
  FactorizedDensity(int channels, Rng& rng, double init_scale = 10.0) : channels_(channels) {
    const double sc = std::pow(init_scale, 1.0 / (kLayers + 1));
    for (int k = 0; k < kLayers; ++k) {
      const int din = kDims[k], dout = kDims[k + 1];
      const float init = static_cast<float>(std::log(std::expm1(1.0 / sc / dout)));
      matrices_[k] = nn::make_param_fill({channels, dout, din}, init);
      nn::Tensor b(nn::Shape{channels, dout});
      for (auto& v : b.data) v = static_cast<float>(rng.uniform(-0.5, 0.5));
      biases_[k] = nn::Var(std::move(b), true);
      if (k < kLayers - 1) factors_[k] = nn::make_param_fill({channels, dout}, 0.f);
    }
  }

  int channels() const { return channels_; }

  void collect(const std::string& prefix, nn::ParamList& out) {
    for (int k = 0; k < kLayers; ++k) {
      out.push_back({prefix + ".H" + std::to_string(k), &matrices_[k]});
      out.push_back({prefix + ".b" + std::to_string(k), &biases_[k]});
      if (k < kLayers - 1) out.push_back({prefix + ".a" + std::to_string(k), &factors_[k]});
    }
  }

  /// CDF logit of channel c at x.
  double logit(int c, double x) const {
    double h[3] = {x, 0, 0};
    for (int k = 0; k < kLayers; ++k) {
      const int din = kDims[k], dout = kDims[k + 1];
      double o[3];
      for (int j = 0; j < dout; ++j) {
        double s = biases_[k].value()[c * dout + j];
        for (int i = 0; i < din; ++i)
          s += nn::softplus_f(matrices_[k].value()[(c * dout + j) * din + i]) * h[i];
        if (k < kLayers - 1) s += std::tanh(factors_[k].value()[c * dout + j]) * std::tanh(s);
        o[j] = s;
      }
      std::copy_n(o, dout, h);
    }
    return h[0];
  }

  double cdf(int c, double x) const { return 1.0 / (1.0 + std::exp(-logit(c, x))); }

  /// PMF over [s_min, s_max] from CDF differences at half integers, tails
  /// folded into the end bins.
  DiscretePMFTable pmf_table(int c, int s_min, int s_max) const {
    if (s_max < s_min) throw ConfigError("factorized pmf: empty support");
    std::vector<double> p(static_cast<size_t>(s_max - s_min + 1));
    double prev = 0.0;
    for (int k = s_min; k <= s_max; ++k) {
      const double up = k == s_max ? 1.0 : cdf(c, k + 0.5);
      p[k - s_min] = std::max(up - prev, 0.0);
      prev = up;
    }
    return pmf_from_probabilities(p, s_min);
  }

  /// Sum of -log2 P(z) over a channel-last tensor, with P the CDF difference
  /// over the unit box around each value.
  nn::Var rate_bits(const nn::Var& z) const {
    const int C = channels_;
    if (z.shape().back() != C) throw ConfigError("factorized density: channel mismatch");
    const size_t n = z.numel();
    std::vector<Chan> ch(C);
    for (int c = 0; c < C; ++c)
      for (int k = 0; k < kLayers; ++k) {
        const int din = kDims[k], dout = kDims[k + 1];
        for (int j = 0; j < dout; ++j) {
          for (int i = 0; i < din; ++i) {
            const float raw = matrices_[k].value()[(c * dout + j) * din + i];
            ch[c].W[k][j][i] = nn::softplus_f(raw);
            ch[c].dW[k][j][i] = 1.0 / (1.0 + std::exp(-static_cast<double>(raw)));
          }
          ch[c].b[k][j] = biases_[k].value()[c * dout + j];
          ch[c].ta[k][j] = k < kLayers - 1 ? std::tanh(factors_[k].value()[c * dout + j]) : 0.0;
        }
      }

    double total = 0;
    std::vector<double> dlogit_up(n), dlogit_lo(n);
    std::vector<uint8_t> floored(n, 0);
    for (size_t e = 0; e < n; ++e) {
      const int c = static_cast<int>(e % C);
      Trace tu, tl;
      const double x = z.value()[e];
      const double U = trace(ch[c], x + 0.5, tu), L = trace(ch[c], x - 0.5, tl);
      const double sgn = (U + L) > 0 ? -1.0 : 1.0;
      const double su = 1.0 / (1.0 + std::exp(-sgn * U)), sl = 1.0 / (1.0 + std::exp(-sgn * L));
      const double p = std::abs(su - sl);
      if (!(p > kLikelihoodFloor)) {
        total += -std::log2(kLikelihoodFloor);
        floored[e] = 1;
        continue;
      }
      total += -std::log2(p);
      const double db_dp = -1.0 / (p * M_LN2);
      dlogit_up[e] = db_dp * su * (1 - su);
      dlogit_lo[e] = -db_dp * sl * (1 - sl);
    }

    std::vector<nn::Var> parents{z};
    for (int k = 0; k < kLayers; ++k) {
      parents.push_back(matrices_[k]);
      parents.push_back(biases_[k]);
      if (k < kLayers - 1) parents.push_back(factors_[k]);
    }
    return nn::make_op(
        nn::Tensor(nn::Shape{1}, {static_cast<float>(total)}), parents,
        [C, n, ch = std::move(ch), dlogit_up = std::move(dlogit_up), dlogit_lo = std::move(dlogit_lo),
         floored = std::move(floored)](nn::detail::Node& nd) {
          const float go = nd.grad[0];
          const bool need_z = nn::parent_needs(nd, 0);
          float* gz = need_z ? nn::parent_grad(nd, 0).ptr() : nullptr;
          // Parent slots for each layer's parameters.
          size_t slot = 1;
          float* gH[kLayers];
          float* gb[kLayers];
          float* ga[kLayers] = {nullptr, nullptr, nullptr, nullptr};
          for (int k = 0; k < kLayers; ++k) {
            gH[k] = nn::parent_grad(nd, slot++).ptr();
            gb[k] = nn::parent_grad(nd, slot++).ptr();
            if (k < kLayers - 1) ga[k] = nn::parent_grad(nd, slot++).ptr();
          }
          const auto& zv = nd.parents[0]->value;
          for (size_t e = 0; e < n; ++e) {
            if (floored[e]) continue;
            const int c = static_cast<int>(e % C);
            double dx_total = 0;
            for (int side = 0; side < 2; ++side) {
              Trace tr;
              trace(ch[c], zv[e] + (side == 0 ? 0.5 : -0.5), tr);
              double g[3] = {go * (side == 0 ? dlogit_up[e] : dlogit_lo[e]), 0, 0};
              for (int k = kLayers - 1; k >= 0; --k) {
                const int din = kDims[k], dout = kDims[k + 1];
                double gpre[3];
                for (int j = 0; j < dout; ++j) {
                  if (k < kLayers - 1) {
                    const double tp = std::tanh(tr.pre[k][j]);
                    const double ta = ch[c].ta[k][j];
                    gpre[j] = g[j] * (1 + ta * (1 - tp * tp));
                    ga[k][c * dout + j] += static_cast<float>(g[j] * tp * (1 - ta * ta));
                  } else {
                    gpre[j] = g[j];
                  }
                  gb[k][c * dout + j] += static_cast<float>(gpre[j]);
                }
                double gin[3] = {0, 0, 0};
                for (int j = 0; j < dout; ++j)
                  for (int i = 0; i < din; ++i) {
                    gH[k][(c * dout + j) * din + i] += static_cast<float>(gpre[j] * tr.h[k][i] * ch[c].dW[k][j][i]);
                    gin[i] += ch[c].W[k][j][i] * gpre[j];
                  }
                std::copy_n(gin, din, g);
              }
              dx_total += g[0];
            }
            if (need_z) gz[e] += static_cast<float>(dx_total);
          }
        });
  }

 private:
  struct Chan {
    double W[kLayers][3][3];   // softplus of the raw matrices
    double dW[kLayers][3][3];  // derivative of softplus
    double b[kLayers][3];
    double ta[kLayers][3];     // tanh of the gate factors
  };
  struct Trace {
    double h[kLayers + 1][3];  // layer inputs (h[0]) and outputs
    double pre[kLayers][3];
  };
  static double trace(const Chan& ch, double x, Trace& tr) {
    tr.h[0][0] = x;
    for (int k = 0; k < kLayers; ++k) {
      const int din = kDims[k], dout = kDims[k + 1];
      for (int j = 0; j < dout; ++j) {
        double s = ch.b[k][j];
        for (int i = 0; i < din; ++i) s += ch.W[k][j][i] * tr.h[k][i];
        tr.pre[k][j] = s;
        tr.h[k + 1][j] = k < kLayers - 1 ? s + ch.ta[k][j] * std::tanh(s) : s;
      }
    }
    return tr.h[kLayers][0];
  }

  int channels_ = 0;
  nn::Var matrices_[kLayers];
  nn::Var biases_[kLayers];
  nn::Var factors_[kLayers];
};

/// Fit a factorized density to z samples laid out [count, channels] by
/// minimizing the relaxed negative log-likelihood.
inline FactorizedDensity fit_factorized_density(const nn::Tensor& samples, int iters, Rng& rng, float lr = 1e-2f,
                                                int batch = 256) {
  const int C = samples.dim(-1);
  const int count = static_cast<int>(samples.numel() / C);
  FactorizedDensity density(C, rng);
  nn::ParamList params;
  density.collect("density", params);
  nn::Adam opt(params);
  for (int it = 0; it < iters; ++it) {
    nn::Tensor b(nn::Shape{batch, C});
    for (int r = 0; r < batch; ++r) {
      const int src = static_cast<int>(rng.uniform_int(0, count - 1));
      for (int c = 0; c < C; ++c) b[r * C + c] = samples[src * C + c] + static_cast<float>(rng.uniform(-0.5, 0.5));
    }
    opt.zero_grad();
    nn::Var loss = nn::scale(density.rate_bits(nn::constant(std::move(b))), 1.f / (batch * C));
    nn::backward(loss);
    opt.step(lr);
  }
  return density;
}

/// Hyper-analysis and hyper-synthesis transforms. z has half the spatial
/// resolution of y.
struct HyperpriorParams {
  int latent_channels = 16, hyper_channels = 8, hidden = 32;
  nn::Conv2d a1, a2, a3;
  nn::Conv2d s1, s2, s_mu, s_sigma;
  FactorizedDensity density;

  HyperpriorParams() = default;
  HyperpriorParams(int latent, int hyper, int hid, Rng& rng)
      : latent_channels(latent), hyper_channels(hyper), hidden(hid),
        a1(latent, hid, 3, 1, rng), a2(hid, hid, 3, 2, rng), a3(hid, hyper, 3, 1, rng),
        s1(hyper, hid, 3, 1, rng), s2(hid, hid * 4, 3, 1, rng), s_mu(hid, latent, 3, 1, rng),
        s_sigma(hid, latent, 3, 1, rng), density(hyper, rng) {}

  void collect(const std::string& prefix, nn::ParamList& out) {
    a1.collect(prefix + ".a1", out);
    a2.collect(prefix + ".a2", out);
    a3.collect(prefix + ".a3", out);
    s1.collect(prefix + ".s1", out);
    s2.collect(prefix + ".s2", out);
    s_mu.collect(prefix + ".s_mu", out);
    s_sigma.collect(prefix + ".s_sigma", out);
    density.collect(prefix + ".density", out);
  }
};

/// z = hyper-analysis(y); y is [B, h, w, C].
inline nn::Var hyper_analyze(const nn::Var& y, const HyperpriorParams& hp) {
  if (y.shape().back() != hp.latent_channels) throw ConfigError("hyper_analyze: channel mismatch");
  if (y.shape()[1] % 2 || y.shape()[2] % 2) throw ConfigError("hyper_analyze: latent dims must be even");
  return hp.a3(nn::silu(hp.a2(nn::silu(hp.a1(y)))));
}

struct MeanScale {
  nn::Var mu, sigma;
};

/// (mu, sigma) for every latent element; sigma is clamped to
/// [kSigmaMin, kSigmaMax].
inline MeanScale hyper_synthesize(const nn::Var& z, const HyperpriorParams& hp) {
  nn::Var h = nn::silu(hp.s1(z));
  h = nn::silu(nn::pixel_shuffle(hp.s2(h), 2));
  return {hp.s_mu(h), nn::clamp(nn::softplus(hp.s_sigma(h)), static_cast<float>(kSigmaMin), static_cast<float>(kSigmaMax))};
}

/// Estimated code length, in bits, of integer latents under per-element
/// tables and of integer hyperlatents under the factorized density.
struct RateEstimate {
  double y_bits = 0, z_bits = 0;
  double total() const { return y_bits + z_bits; }
};

/// Per-channel symmetric support bound: max |v| over a channel-last tensor.
inline std::vector<int> channel_support(std::span<const int> symbols, int channels) {
  std::vector<int> m(channels, 0);
  for (size_t i = 0; i < symbols.size(); ++i)
    m[i % channels] = std::max(m[i % channels], std::abs(symbols[i]));
  return m;
}

/// Tables for every element of y given (mu, sigma) and per-channel supports.
inline std::vector<DiscretePMFTable> gaussian_tables(std::span<const float> mu, std::span<const float> sigma,
                                                     std::span<const int> support, int channels) {
  std::vector<DiscretePMFTable> t;
  t.reserve(mu.size());
  for (size_t i = 0; i < mu.size(); ++i) {
    const int m = support[i % channels];
    t.push_back(discretized_gaussian_pmf(mu[i], std::max<double>(sigma[i], kSigmaMin), -m, m));
  }
  return t;
}

inline std::vector<DiscretePMFTable> factorized_tables(const FactorizedDensity& d, std::span<const int> support) {
  std::vector<DiscretePMFTable> t;
  for (int c = 0; c < d.channels(); ++c) t.push_back(d.pmf_table(c, -support[c], support[c]));
  return t;
}

inline RateEstimate rate_estimate(std::span<const int> y_hat, std::span<const DiscretePMFTable> y_tables,
                                  std::span<const int> z_hat, std::span<const DiscretePMFTable> z_channel_tables) {
  if (y_hat.size() != y_tables.size()) throw ConfigError("rate_estimate: shape mismatch");
  RateEstimate r;
  r.y_bits = table_bits(y_hat, [&](size_t i) -> const DiscretePMFTable& { return y_tables[i]; });
  const size_t C = z_channel_tables.size();
  if (C > 0)
    r.z_bits = table_bits(z_hat, [&](size_t i) -> const DiscretePMFTable& { return z_channel_tables[i % C]; });
  return r;
}

}  // namespace kfd
