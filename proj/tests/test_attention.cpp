#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "lrtp/attention.hpp"
#include "oracles.hpp"

using namespace lrtp;

namespace {

std::vector<std::size_t> iota(std::size_t n, std::size_t from = 0) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), from);
  return v;
}

}  // namespace

TEST(HeadSlice, EvenSplitAndGqaMapping) {
  const auto cfg = ModelConfig::from_heads(8, 2, 4, 16, MlpVariant::kGlu, false);
  const HeadSlice s = HeadSlice::for_worker(cfg, 1, 2);
  EXPECT_EQ(s.q_begin, 4u);
  EXPECT_EQ(s.q_count, 4u);
  EXPECT_EQ(s.kv_begin, 1u);
  EXPECT_EQ(s.kv_count, 1u);
  EXPECT_EQ(s.local_kv_for(3), 0u);
  EXPECT_EQ(s.q_width(), 16u);
}

TEST(HeadSlice, KvHeadsReplicatedPastTheirCount) {
  const auto cfg = ModelConfig::from_heads(4, 1, 2, 8, MlpVariant::kGlu, false);
  for (std::size_t r = 0; r < 4; ++r) {
    const HeadSlice s = HeadSlice::for_worker(cfg, r, 4);
    EXPECT_EQ(s.q_count, 1u);
    EXPECT_EQ(s.kv_begin, 0u);
    EXPECT_EQ(s.kv_count, 1u);
  }
}

TEST(HeadSlice, IndivisibleHeads) {
  const auto cfg = ModelConfig::from_heads(6, 3, 2, 8, MlpVariant::kGlu, false);
  try {
    HeadSlice::for_worker(cfg, 0, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kPartition);
  }
}

TEST(Rope, MatchesComplexRotation) {
  Rng rng(1);
  for (std::size_t pos : {0u, 1u, 7u, 100u}) {
    const DenseMatrix x = rng.normal_matrix(1, 12);
    std::vector<double> want(x.row(0).begin(), x.row(0).end());
    oracle::rope(want, 6, pos, 10000.0);
    DenseMatrix got = x;
    rope_in_place(got.row(0), 6, pos, 10000.0);
    for (std::size_t c = 0; c < 12; ++c) EXPECT_NEAR(got(0, c), want[c], 1e-14);
  }
}

TEST(Rope, PreservesNormAndRelativePosition) {
  Rng rng(2);
  const DenseMatrix q = rng.normal_matrix(1, 8), k = rng.normal_matrix(1, 8);
  auto rotated_dot = [&](std::size_t pq, std::size_t pk) {
    DenseMatrix a = q, b = k;
    rope_in_place(a.row(0), 8, pq, 500.0);
    rope_in_place(b.row(0), 8, pk, 500.0);
    EXPECT_NEAR(frobenius_norm(a), frobenius_norm(q), 1e-13);
    double d = 0;
    for (std::size_t c = 0; c < 8; ++c) d += a(0, c) * b(0, c);
    return d;
  };
  EXPECT_NEAR(rotated_dot(5, 2), rotated_dot(13, 10), 1e-12);
}

TEST(Rope, OddHeadDimRejected) {
  DenseMatrix x(1, 6);
  try {
    rope_in_place(x.row(0), 3, 1, 10000.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
}

TEST(Attend, MatchesDirectSummationAcrossVariants) {
  Rng rng(3);
  for (auto [h, kv] : {std::pair{4, 4}, std::pair{4, 1}, std::pair{6, 2}}) {
    const std::size_t hd = 3, t = 5;
    const auto cfg = ModelConfig::from_heads(h, kv, hd, 8, MlpVariant::kGlu, false);
    const DenseMatrix q = rng.normal_matrix(t, h * hd), k = rng.normal_matrix(t, kv * hd),
                      v = rng.normal_matrix(t, kv * hd);
    const auto pos = iota(t);
    const DenseMatrix got = attend(q, k, v, HeadSlice::full(cfg), pos, pos);
    EXPECT_LT(max_abs_diff(got, oracle::attention(q, k, v, h, kv, hd)), 1e-13) << h << "/" << kv;
  }
}

TEST(Attend, DecodeAgainstHistoryMatchesPrefix) {
  Rng rng(4);
  const auto cfg = ModelConfig::from_heads(2, 2, 4, 8, MlpVariant::kGlu, false);
  const DenseMatrix q = rng.normal_matrix(1, 8), k = rng.normal_matrix(6, 8), v = rng.normal_matrix(6, 8);
  const std::vector<std::size_t> qpos = {5};
  const auto kpos = iota(6);
  const DenseMatrix got = attend(q, k, v, HeadSlice::full(cfg), qpos, kpos);
  EXPECT_LT(max_abs_diff(got, oracle::attention(q, k, v, 2, 2, 4, {5}, kpos)), 1e-13);
}

TEST(Attend, FlopCount) {
  const auto cfg = ModelConfig::from_heads(4, 2, 8, 8, MlpVariant::kGlu, false);
  Rng rng(5);
  const std::size_t t = 6;
  const DenseMatrix q = rng.normal_matrix(t, 32), k = rng.normal_matrix(t, 16), v = rng.normal_matrix(t, 16);
  const auto pos = iota(t);
  std::uint64_t causal = 0, full = 0;
  attend(q, k, v, HeadSlice::full(cfg), pos, pos, true, &causal);
  attend(q, k, v, HeadSlice::full(cfg), pos, pos, false, &full);
  // 4 * hd per (head, query, visible key): 21 causal pairs, 36 full.
  EXPECT_EQ(causal, 4u * 8 * 4 * 21);
  EXPECT_EQ(full, 4u * 8 * 4 * 36);
}

TEST(SelfAttentionReference, AgreesWithPackedForm) {
  Rng rng(6);
  const std::size_t t = 4, hd = 2;
  std::vector<DenseMatrix> qh, kh, vh;
  for (int g = 0; g < 4; ++g) qh.push_back(rng.normal_matrix(t, hd));
  for (int g = 0; g < 2; ++g) {
    kh.push_back(rng.normal_matrix(t, hd));
    vh.push_back(rng.normal_matrix(t, hd));
  }
  const auto per_head = self_attention_reference(qh, kh, vh, true);
  const DenseMatrix want = oracle::attention(hconcat(qh), hconcat(kh), hconcat(vh), 4, 2, hd);
  EXPECT_LT(max_abs_diff(hconcat(per_head), want), 1e-13);
}

TEST(Activations, SiluAndRelu) {
  EXPECT_DOUBLE_EQ(relu(-2.0), 0.0);
  EXPECT_DOUBLE_EQ(relu(3.0), 3.0);
  EXPECT_NEAR(silu(1.0), 1.0 / (1.0 + std::exp(-1.0)), 1e-16);
  EXPECT_DOUBLE_EQ(silu(0.0), 0.0);
}
