#include <gtest/gtest.h>

#include "lrtp/decomposition.hpp"
#include "lrtp/io.hpp"
#include "lrtp/pipelines.hpp"
#include "oracles.hpp"

using namespace lrtp;

TEST(RankFromRatio, SeventyBProjectionDims) {
  // 40% compression of LLaMA-3-70B's projections.
  EXPECT_EQ(rank_from_ratio(0.4, 8192, 1024), 614u);
  EXPECT_EQ(rank_from_ratio(0.4, 8192, 8192), 4915u);
  EXPECT_EQ(rank_from_ratio(0.4, 8192, 28672), 4915u);
  EXPECT_EQ(rank_from_ratio(0.0, 32, 16), 16u);
  EXPECT_EQ(rank_from_ratio(0.99, 4, 4), 1u);
}

TEST(RankFromRatio, RejectsOutOfRange) {
  for (double r : {-0.1, 1.0, 1.5}) {
    try {
      rank_from_ratio(r, 4, 4);
      FAIL() << r;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kParameter);
    }
  }
}

TEST(DecomposeMatrix, ParameterCountIdentity) {
  Rng rng(1);
  const DenseMatrix w = rng.normal_matrix(12, 20);
  const FactorPair f = decompose_matrix(w, 5);
  EXPECT_EQ(f.rank(), 5u);
  EXPECT_EQ(f.d_in(), 12u);
  EXPECT_EQ(f.d_out(), 20u);
  EXPECT_EQ(f.parameter_count(), 5u * (12 + 20));
}

TEST(DecomposeMatrix, ErrorMatchesOracleTail) {
  Rng rng(2);
  const DenseMatrix w = rng.normal_matrix(16, 10);
  for (std::size_t k = 1; k <= 10; ++k) {
    const FactorPair f = decompose_matrix(w, k);
    const long double want = oracle::tail_energy(w, k);
    const long double got = oracle::squared_residual(w, f.down, f.up);
    EXPECT_LE(std::fabs(got - want), 1e-9L * std::max<long double>(want, 1e-12L * oracle::tail_energy(w, 0))) << k;
  }
}

TEST(DecomposeModel, LosslessReconstructsEveryMatrix) {
  const auto cfg = ModelConfig::from_heads(4, 2, 4, 24, MlpVariant::kGlu, false, 2);
  const auto dense = random_dense_model(cfg, 3);
  const auto model = decompose_model(dense, DecompositionPlan::lossless(dense));
  for (std::size_t i = 0; i < dense.size(); ++i) {
    for (const auto& [m, w] : dense[i]) {
      EXPECT_LT(relative_frobenius_diff(model.layers[i].at(m).product(), w), 1e-10) << to_string(m);
    }
  }
}

TEST(DecomposeModel, PerLayerRanksDiffer) {
  const auto cfg = ModelConfig::from_heads(2, 2, 4, 16, MlpVariant::kNonGlu, false, 2);
  const auto dense = random_dense_model(cfg, 4);
  DecompositionPlan plan = plan_lossless(cfg);
  plan.set(1, LayerMatrix::kQ, 3);
  const auto model = decompose_model(dense, plan);
  EXPECT_EQ(model.layers[0].at(LayerMatrix::kQ).rank(), 8u);
  EXPECT_EQ(model.layers[1].at(LayerMatrix::kQ).rank(), 3u);
}

TEST(DecomposeModel, PlanErrorsNameTheMatrix) {
  const auto cfg = ModelConfig::from_heads(2, 2, 4, 16, MlpVariant::kGlu, false, 1);
  const auto dense = random_dense_model(cfg, 5);
  DecompositionPlan missing(1);
  missing.set(0, LayerMatrix::kQ, 2);
  try {
    decompose_model(dense, missing);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kPlan);
    EXPECT_NE(std::string(e.what()).find("layers.0."), std::string::npos);
  }
  DecompositionPlan too_big = plan_lossless(cfg);
  too_big.set(0, LayerMatrix::kK, 9);
  try {
    decompose_model(dense, too_big);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kPlan);
    EXPECT_NE(std::string(e.what()).find("layers.0.k"), std::string::npos);
  }
}

TEST(AbsorbFactorChain, CutsAtNarrowestInnerDim) {
  Rng rng(6);
  const std::vector<DenseMatrix> chain = {rng.normal_matrix(6, 5), rng.normal_matrix(5, 2), rng.normal_matrix(2, 4),
                                          rng.normal_matrix(4, 7)};
  const FactorPair f = absorb_factor_chain(chain);
  EXPECT_EQ(f.rank(), 2u);
  DenseMatrix full = chain[0];
  for (std::size_t i = 1; i < chain.size(); ++i) full = oracle::naive_matmul(full, chain[i]);
  EXPECT_LT(relative_frobenius_diff(f.product(), full), 1e-13);
}

TEST(AbsorbFactorChain, TiesTakeLeftmost) {
  Rng rng(7);
  const std::vector<DenseMatrix> chain = {rng.normal_matrix(4, 3), rng.normal_matrix(3, 5), rng.normal_matrix(5, 3),
                                          rng.normal_matrix(3, 4)};
  const FactorPair f = absorb_factor_chain(chain);
  EXPECT_EQ(f.down.cols(), 3u);
  EXPECT_EQ(f.down, chain[0]);
}

TEST(AbsorbFactorChain, RejectsNonConformable) {
  const std::vector<DenseMatrix> chain = {DenseMatrix(2, 3), DenseMatrix(4, 2)};
  EXPECT_THROW(absorb_factor_chain(chain), Error);
}
