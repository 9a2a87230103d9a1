#include <gtest/gtest.h>

#include <cmath>

#include "kfd/error_bound.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace kfd;
using kfd::testing::random_orthonormal;

namespace {

ResidualBasis identity_basis(int D, int B) {
  ResidualBasis b;
  b.D = D;
  b.B = B;
  b.U = Eigen::MatrixXd::Identity(D, B);
  b.eigenvalues.assign(B, 1.0);
  return b;
}

std::vector<double> random_vec(size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal() * scale;
  return v;
}

double dist(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST(FitBasis, RankOneCorpus) {
  Rng rng(1);
  const int D = 12;
  auto dir = random_vec(D, rng);
  double nrm = 0;
  for (double v : dir) nrm += v * v;
  nrm = std::sqrt(nrm);
  std::vector<std::vector<double>> corpus;
  for (int i = 0; i < 40; ++i) {
    const double k = rng.normal() * 3;
    std::vector<double> v(D);
    for (int j = 0; j < D; ++j) v[j] = k * dir[j];
    corpus.push_back(v);
  }
  const auto b = fit_basis(corpus, 4);
  double cosv = 0;
  for (int j = 0; j < D; ++j) cosv += b.U(j, 0) * dir[j] / nrm;
  EXPECT_GT(std::abs(cosv), 1 - 1e-6);
  EXPECT_THROW(fit_basis(corpus, 41), ConfigError);
}

TEST(FitBasis, OrthonormalAndMatchesJacobiOracle) {
  Rng rng(2);
  const int D = 16, B = 6;
  // Anisotropic corpus: independent scales per latent direction.
  std::vector<std::vector<double>> corpus;
  auto mix = random_orthonormal(D, D, rng);
  for (int i = 0; i < 300; ++i) {
    Eigen::VectorXd z(D);
    for (int j = 0; j < D; ++j) z(j) = rng.normal() * (1.0 + 10.0 / (1 + j));
    Eigen::VectorXd x = mix.U * z;
    corpus.emplace_back(x.data(), x.data() + D);
  }
  const auto b = fit_basis(corpus, B);
  const Eigen::MatrixXd gram = b.U.transpose() * b.U;
  EXPECT_LT((gram - Eigen::MatrixXd::Identity(B, B)).cwiseAbs().maxCoeff(), 1e-6);
  for (int j = 1; j < B; ++j) EXPECT_GE(b.eigenvalues[j - 1], b.eigenvalues[j]);

  const auto oracle = kfd::testing::jacobi_eigenvalues(kfd::testing::covariance(corpus));
  for (int j = 0; j < B; ++j) EXPECT_NEAR(b.eigenvalues[j], oracle[j], 1e-8 * oracle[0]);
  double ev = 0, ov = 0;
  for (int j = 0; j < B; ++j) {
    ev += b.eigenvalues[j];
    ov += oracle[j];
  }
  EXPECT_NEAR(ev, ov, 1e-8 * ov);
}

TEST(BasisFile, RoundTrip) {
  Rng rng(3);
  std::vector<std::vector<double>> corpus;
  for (int i = 0; i < 20; ++i) corpus.push_back(random_vec(8, rng));
  const auto b = fit_basis(corpus, 8);
  const auto bytes = b.save();
  const auto r = ResidualBasis::load(bytes);
  EXPECT_EQ(r.U, b.U);
  EXPECT_EQ(r.corpus_fingerprint, b.corpus_fingerprint);
  auto bad = bytes;
  bad.pop_back();
  EXPECT_THROW(ResidualBasis::load(bad), FormatError);
}

TEST(Project, Basics) {
  Rng rng(4);
  const auto b = random_orthonormal(10, 6, rng);
  EXPECT_EQ(project(Eigen::VectorXd::Zero(10), b).norm(), 0.0);
  const Eigen::VectorXd aligned = 2.5 * b.U.col(3);
  const auto c = project(aligned, b);
  for (int j = 0; j < 6; ++j) EXPECT_NEAR(c(j), j == 3 ? 2.5 : 0.0, 1e-12);
  for (int k = 0; k < 100; ++k) {
    Eigen::VectorXd r = Eigen::VectorXd::NullaryExpr(10, [&] { return rng.normal(); });
    EXPECT_LE(project(r, b).norm(), r.norm() + 1e-12);
  }
  const Eigen::VectorXd in_span = b.U * Eigen::VectorXd::NullaryExpr(6, [&] { return rng.normal(); });
  EXPECT_NEAR(project(in_span, b).norm(), in_span.norm(), 1e-12);
}

TEST(SelectAndQuantize, HandWorkedExample) {
  const auto b = identity_basis(2, 2);
  std::vector<double> r = {3, 4};
  const auto p = select_and_quantize(r, b, 4.0);
  ASSERT_FALSE(p.fallback);
  ASSERT_EQ(p.indices, std::vector<uint32_t>{1});
  std::vector<double> zero = {0, 0};
  const auto xg = apply_correction(zero, p, b);
  EXPECT_NEAR(xg[1], 4.0, 1e-9);
  EXPECT_LE(dist(r, xg), 4.0);
  EXPECT_NEAR(dist(r, xg), 3.0, 1e-9);
}

TEST(SelectAndQuantize, NoOpAndErrors) {
  const auto b = identity_basis(3, 3);
  std::vector<double> r = {0.1, 0.1, 0.1};
  EXPECT_TRUE(select_and_quantize(r, b, 1.0).empty());
  EXPECT_THROW(select_and_quantize(r, b, 0.0), ConfigError);
  std::vector<double> x = {1, 2, 3};
  EXPECT_EQ(apply_correction(x, CorrectionPayload{}, b), x);
}

TEST(SelectAndQuantize, OutOfSpanFallsBackLosslessly) {
  Rng rng(5);
  const auto b = identity_basis(4, 2);
  for (int bits : {32, 64}) {
    std::vector<double> xr = {1.5, -2.25, 0.1, 7.0};
    std::vector<double> x = {1.5, -2.25, 9.1, 7.0};  // off-span residual of norm 9
    for (auto& v : x) v = to_dtype(v, bits);
    const auto p = enforce_bound(x, xr, b, 1.0, bits);
    ASSERT_TRUE(p.fallback);
    const auto rt = decode_payload(code_payload(p), bits);
    const auto xg = apply_correction(xr, rt, b);
    for (size_t i = 0; i < 4; ++i) EXPECT_EQ(std::bit_cast<uint64_t>(xg[i]), std::bit_cast<uint64_t>(x[i]));
  }
}

TEST(SelectAndQuantize, BoundHoldsOnRandomBlocks) {
  Rng rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    const int D = 4 + static_cast<int>(rng.uniform_int(0, 60));
    const int B = 1 + static_cast<int>(rng.uniform_int(0, D - 1));
    const auto b = random_orthonormal(D, B, rng);
    const int bits = trial % 2 ? 32 : 64;
    const size_t n = D - static_cast<size_t>(rng.uniform_int(0, 3));  // partial blocks too
    auto x = random_vec(n, rng, std::exp(rng.uniform(-3, 6)));
    for (auto& v : x) v = to_dtype(v, bits);
    auto xr = x;
    for (auto& v : xr) v = to_dtype(v + rng.normal() * std::exp(rng.uniform(-4, 3)), bits);
    const double tau = std::exp(rng.uniform(-8, 3));
    const auto p = enforce_bound(x, xr, b, tau, bits);
    const auto xg = apply_correction(xr, decode_payload(code_payload(p), bits), b);
    EXPECT_LE(dist(x, xg), tau) << "trial " << trial;
  }
}

TEST(SelectAndQuantize, GreedyMatchesBruteForce) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int D = 2 + static_cast<int>(rng.uniform_int(0, 6));
    const int B = 1 + static_cast<int>(rng.uniform_int(0, D - 1));
    const auto b = random_orthonormal(D, B, rng);
    Eigen::VectorXd r = Eigen::VectorXd::NullaryExpr(D, [&] { return rng.normal(); });
    const auto c = project(r, b);
    const auto order = greedy_order(c);
    for (int M = 0; M <= B; ++M) {
      Eigen::VectorXd g = r;
      for (int k = 0; k < M; ++k) g -= c(order[k]) * b.U.col(order[k]);
      EXPECT_NEAR(g.norm(), kfd::testing::best_subset_residual(r, b.U, M), 1e-10);
    }
  }
}

TEST(Payload, RoundTripsAndSizes) {
  Rng rng(8);
  EXPECT_EQ(decode_payload(code_payload(CorrectionPayload{}), 64), CorrectionPayload{});
  for (int trial = 0; trial < 200; ++trial) {
    CorrectionPayload p;
    p.q = static_cast<float>(std::exp(rng.uniform(-10, 2)));
    uint32_t idx = static_cast<uint32_t>(rng.uniform_int(0, 5));
    const int m = 1 + static_cast<int>(rng.uniform_int(0, 100));
    for (int k = 0; k < m; ++k) {
      p.indices.push_back(idx);
      idx += 1 + static_cast<uint32_t>(rng.uniform_int(0, 20));
      p.values.push_back(static_cast<int64_t>(std::lround(rng.normal() * std::exp(rng.uniform(0, 8)))));
    }
    const auto bytes = code_payload(p);
    EXPECT_EQ(decode_payload(bytes, 64), p);
    auto cut = bytes;
    cut.resize(bytes.size() - 1);
    EXPECT_THROW(decode_payload(cut, 64), FormatError);
  }
  // Coarse quantization beats storing the selected coefficients as floats.
  const auto b = identity_basis(64, 64);
  auto r = random_vec(64, rng);
  const auto p = select_and_quantize(r, b, 0.5);
  EXPECT_LT(code_payload(p).size(), p.indices.size() * (sizeof(float) + sizeof(uint16_t)));
}

TEST(Payload, SizeNonIncreasingInTau) {
  Rng rng(9);
  const auto b = random_orthonormal(32, 32, rng);
  int violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto r = random_vec(32, rng);
    size_t prev = SIZE_MAX;
    for (double tau = 0.01; tau < 6; tau *= 1.5) {
      const size_t sz = code_payload(select_and_quantize(r, b, tau)).size();
      violations += sz > prev;
      prev = sz;
    }
  }
  EXPECT_EQ(violations, 0);
}
