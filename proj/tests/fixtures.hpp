#pragma once

// Random inputs shared by unit tests and the acceptance run.

#include <Eigen/Dense>

#include "kfd/container.hpp"
#include "kfd/error_bound.hpp"

namespace kfd::testing {

inline std::vector<uint8_t> random_bytes(Rng& rng, size_t max_len) {
  std::vector<uint8_t> b(static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(max_len))));
  for (auto& v : b) v = static_cast<uint8_t>(rng.uniform_int(0, 255));
  return b;
}

inline Container random_container(Rng& rng) {
  Container c;
  auto& h = c.header;
  h.vars = static_cast<uint32_t>(rng.uniform_int(1, 3));
  h.times = static_cast<uint32_t>(rng.uniform_int(1, 40));
  h.height = static_cast<uint32_t>(rng.uniform_int(1, 300));
  h.width = static_cast<uint32_t>(rng.uniform_int(1, 300));
  h.dtype_bits = rng.uniform_int(0, 1) ? 32 : 64;
  for (uint32_t v = 0; v < h.vars; ++v) h.var_names.push_back("var" + std::to_string(rng.uniform_int(0, 1000)));
  h.tile = static_cast<uint16_t>(rng.uniform_int(8, 64));
  h.strategy = static_cast<uint8_t>(rng.uniform_int(0, 2));
  h.interval = static_cast<uint16_t>(rng.uniform_int(1, 15));
  h.k = static_cast<uint16_t>(rng.uniform_int(1, 15));
  h.window = static_cast<uint16_t>(rng.uniform_int(2, 16));
  h.seed = (static_cast<uint64_t>(rng.uniform_int(0, INT32_MAX)) << 32) | rng.uniform_int(0, INT32_MAX);
  const int ns = static_cast<int>(rng.uniform_int(1, 12));
  for (int i = 0; i < ns; ++i) h.steps.push_back(static_cast<uint32_t>(rng.uniform_int(1, 1000)));
  h.tau_nrmse = rng.uniform(0, 0.1);
  h.data_range = rng.uniform(0, 100);
  h.schedule_T = static_cast<uint32_t>(rng.uniform_int(1, 1000));
  h.beta_start = rng.uniform(1e-5, 1e-3);
  h.beta_end = rng.uniform(1e-2, 0.2);
  for (auto* d : {&h.codec_fp, &h.denoiser_fp, &h.basis_fp})
    for (auto& v : *d) v = static_cast<uint8_t>(rng.uniform_int(0, 255));

  const size_t nf = h.vars * h.times;
  for (size_t i = 0; i < nf; ++i) {
    c.norm_mean.push_back(static_cast<float>(rng.normal() * 10));
    c.norm_range.push_back(static_cast<float>(rng.uniform(0, 5)));
  }
  const int nm = static_cast<int>(rng.uniform_int(0, 30));
  for (int i = 0; i < nm; ++i) {
    MinMaxRecord m;
    m.lo = static_cast<int32_t>(rng.uniform_int(-5000, 5000));
    m.hi = m.lo + static_cast<int32_t>(rng.uniform_int(1, 5000));
    c.minmax.push_back(m);
  }
  const int nt = static_cast<int>(rng.uniform_int(0, 10));
  for (int i = 0; i < nt; ++i) {
    TrackCode t;
    const int cy = static_cast<int>(rng.uniform_int(0, 16)), cz = static_cast<int>(rng.uniform_int(0, 8));
    for (int j = 0; j < cy; ++j) t.y_support.push_back(static_cast<uint32_t>(rng.uniform_int(0, 300)));
    for (int j = 0; j < cz; ++j) t.z_support.push_back(static_cast<uint32_t>(rng.uniform_int(0, 300)));
    t.y_bytes = random_bytes(rng, 400);
    t.z_bytes = random_bytes(rng, 100);
    c.tracks.push_back(t);
  }
  const int nc = static_cast<int>(rng.uniform_int(0, 40));
  for (int i = 0; i < nc; ++i) c.corrections.push_back(random_bytes(rng, rng.uniform_int(0, 3) ? 4 : 300));
  return c;
}

inline ResidualBasis random_orthonormal(int D, int B, Rng& rng) {
  Eigen::MatrixXd A(D, D);
  for (int i = 0; i < D; ++i)
    for (int j = 0; j < D; ++j) A(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
  Eigen::MatrixXd Q = qr.householderQ();
  ResidualBasis b;
  b.D = D;
  b.B = B;
  b.U = Q.leftCols(B);
  b.eigenvalues.assign(B, 1.0);
  return b;
}

}  // namespace kfd::testing
