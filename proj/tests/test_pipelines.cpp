#include <gtest/gtest.h>

#include "lrtp/checks.hpp"
#include "lrtp/model.hpp"
#include "lrtp/pipelines.hpp"

using namespace lrtp;

namespace {

struct Toy {
  ModelConfig config;
  std::vector<DenseLayer> dense;
  DecompositionPlan plan;
  DecomposedModel model;
};

// Ranks are multiples of 4 so every p in {1, 2, 4} divides them.
Toy make_toy(std::size_t heads, std::size_t kv_heads, MlpVariant mlp, bool rope, std::uint64_t seed,
             std::size_t layers = 2) {
  Toy t;
  t.config = ModelConfig::from_heads(heads, kv_heads, 4, 32, mlp, rope, layers);
  t.dense = random_dense_model(t.config, seed);
  std::map<LayerMatrix, std::size_t> ranks = {{LayerMatrix::kQ, 8},  {LayerMatrix::kK, 4},  {LayerMatrix::kV, 4},
                                              {LayerMatrix::kO, 8},  {LayerMatrix::kUp, 12}, {LayerMatrix::kDown, 8}};
  if (mlp == MlpVariant::kGlu) ranks[LayerMatrix::kGate] = 12;
  t.plan = DecompositionPlan::uniform(layers, ranks);
  t.model = decompose_model(t.dense, t.plan);
  return t;
}

DenseMatrix input(const ModelConfig& c, std::size_t rows, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_matrix(rows, c.hidden_dim);
}

}  // namespace

TEST(PipelineMode, ParsesAlias) {
  EXPECT_EQ(parse_pipeline_mode("latent"), PipelineMode::kLatent);
  EXPECT_EQ(parse_pipeline_mode("deinfer"), PipelineMode::kLatent);
  EXPECT_EQ(parse_pipeline_mode("base"), PipelineMode::kBase);
  EXPECT_THROW(parse_pipeline_mode("naive"), Error);
}

TEST(Census, PerBlockCollectiveCounts) {
  for (MlpVariant mlp : {MlpVariant::kGlu, MlpVariant::kNonGlu}) {
    const Toy t = make_toy(4, 2, mlp, true, 1);
    const DenseMatrix x = input(t.config, 5, 2);
    const std::size_t base_mlp_rs = mlp == MlpVariant::kGlu ? 3 : 2;
    for (std::size_t p : {2u, 4u}) {
      EXPECT_EQ(measure_census(t.config, t.model, t.plan, PipelineMode::kDense, p, x), (CensusCounts{0, 1, 0, 1}));
      EXPECT_EQ(measure_census(t.config, t.model, t.plan, PipelineMode::kBase, p, x),
                (CensusCounts{0, 4, 0, base_mlp_rs}));
      EXPECT_EQ(measure_census(t.config, t.model, t.plan, PipelineMode::kLatent, p, x), (CensusCounts{1, 1, 1, 1}));
      for (PipelineMode m : {PipelineMode::kDense, PipelineMode::kBase, PipelineMode::kLatent}) {
        EXPECT_EQ(measure_census(t.config, t.model, t.plan, m, p, x), expected_census(t.config, m, p));
      }
    }
  }
}

TEST(AttentionFlops, LatentSplitsHeadsBaseDoesNot) {
  const Toy t = make_toy(4, 2, MlpVariant::kGlu, true, 3);
  const DenseMatrix x = input(t.config, 6, 4);
  const auto flops = [&](PipelineMode m, std::size_t p) {
    return measure_attention_flops(t.config, t.model, t.plan, m, p, x);
  };
  const std::uint64_t one = flops(PipelineMode::kLatent, 1);
  // Two layers, 4 heads, hd 4, 21 causal pairs.
  EXPECT_EQ(one, 2u * 4 * 4 * 4 * 21);
  for (std::size_t p : {1u, 2u, 4u}) {
    EXPECT_EQ(flops(PipelineMode::kLatent, p) * p, one) << p;
    EXPECT_EQ(flops(PipelineMode::kDense, p) * p, one) << p;
    EXPECT_EQ(flops(PipelineMode::kBase, p), one) << p;
  }
}

TEST(Equivalence, LatentBaseAndOracleAgree) {
  std::uint64_t seed = 10;
  for (auto [h, kv] : {std::pair{4, 4}, std::pair{4, 1}, std::pair{4, 2}}) {
    for (MlpVariant mlp : {MlpVariant::kGlu, MlpVariant::kNonGlu}) {
      for (bool rope : {false, true}) {
        const Toy t = make_toy(h, kv, mlp, rope, ++seed);
        const DenseMatrix x = input(t.config, 5, ++seed);
        for (std::size_t p : {1u, 2u, 4u}) {
          const EquivalenceDiffs d = measure_equivalence(t.config, t.model, t.plan, p, x);
          EXPECT_LT(d.latent_vs_base, 1e-10) << h << "/" << kv << " p=" << p;
          EXPECT_LT(d.latent_vs_oracle, 1e-10);
          EXPECT_LT(d.base_vs_oracle, 1e-10);
        }
      }
    }
  }
}

TEST(Equivalence, LosslessMatchesDense) {
  const auto cfg = ModelConfig::from_heads(4, 2, 4, 32, MlpVariant::kGlu, true, 2);
  const auto dense = random_dense_model(cfg, 40);
  for (std::size_t p : {1u, 2u, 4u}) EXPECT_LT(measure_lossless(cfg, dense, p, input(cfg, 4, 41)), 1e-10) << p;
}

TEST(Ledger, LatentVolumesPerToken) {
  const Toy t = make_toy(4, 2, MlpVariant::kGlu, false, 50, 1);
  ParallelModel model(t.config, t.model, PipelineMode::kLatent, 4);
  model.forward(input(t.config, 3, 51));
  const auto& ledger = model.group().ledger();
  // All-gathers carry the concatenated latents; reduce-sums carry 2 * l_o.
  EXPECT_EQ(ledger.per_token_volume(CollectiveKind::kAllGather, 0, Sublayer::kAttention), 8u + 4 + 4);
  EXPECT_EQ(ledger.per_token_volume(CollectiveKind::kReduceSum, 0, Sublayer::kAttention), 2u * 8);
  EXPECT_EQ(ledger.per_token_volume(CollectiveKind::kAllGather, 0, Sublayer::kMlp), 12u + 12);
  EXPECT_EQ(ledger.per_token_volume(CollectiveKind::kReduceSum, 0, Sublayer::kMlp), 2u * 8);
}

TEST(Partition, RankNotDivisibleByWorkers) {
  const auto cfg = ModelConfig::from_heads(4, 2, 4, 32, MlpVariant::kGlu, false, 1);
  const auto dense = random_dense_model(cfg, 60);
  DecompositionPlan plan = DecompositionPlan::lossless(dense);
  plan.set(0, LayerMatrix::kQ, 6);
  const auto model = decompose_model(dense, plan);
  for (PipelineMode m : {PipelineMode::kBase, PipelineMode::kLatent}) {
    try {
      ParallelModel pm(cfg, model, m, 4, std::nullopt, &plan);
      FAIL() << to_string(m);
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kPartition);
    }
  }
}

// Feeds two sequences token by token through the decode path and compares
// every emitted row with a full recompute of the prefix.
TEST(Decode, AllModesMatchRecompute) {
  const Toy t = make_toy(4, 2, MlpVariant::kGlu, true, 70);
  const DenseMatrix a = input(t.config, 6, 71), b = input(t.config, 4, 72);
  CacheSettings cache;
  cache.block_size = 2;
  cache.num_blocks = 16;
  cache.max_tokens = 16;
  cache.scramble_seed = 3;
  for (PipelineMode m : {PipelineMode::kDense, PipelineMode::kBase, PipelineMode::kLatent}) {
    for (std::size_t p : {1u, 2u}) {
      ParallelModel pm(t.config, t.model, m, p, cache);
      const std::vector<QueryChunk> first = {{1, 2}, {2, 1}};
      pm.decode_step(vconcat(std::vector<DenseMatrix>{a.row_range(0, 2), b.row_range(0, 1)}), first);
      for (std::size_t s = 0; s < 3; ++s) {
        const std::vector<QueryChunk> step = {{1, 1}, {2, 1}};
        const DenseMatrix x = vconcat(std::vector<DenseMatrix>{a.row_range(2 + s, 3 + s), b.row_range(1 + s, 2 + s)});
        const DenseMatrix got = pm.decode_step(x, step).output();
        const auto ref = [&](const DenseMatrix& prefix) {
          return m == PipelineMode::kDense ? reference_forward(t.config, std::span<const DenseLayer>(t.dense), prefix)
                                           : reference_forward(t.config, t.model.layers, prefix);
        };
        const DenseMatrix want_a = ref(a.row_range(0, 3 + s));
        const DenseMatrix want_b = ref(b.row_range(0, 2 + s));
        EXPECT_LT(relative_frobenius_diff(got.row_range(0, 1), want_a.row_range(2 + s, 3 + s)), 1e-10)
            << to_string(m) << " p=" << p << " step " << s;
        EXPECT_LT(relative_frobenius_diff(got.row_range(1, 2), want_b.row_range(1 + s, 2 + s)), 1e-10);
      }
    }
  }
}

TEST(Decode, ScrambledCacheFidelity) {
  const Toy t = make_toy(4, 2, MlpVariant::kNonGlu, true, 80);
  CacheSettings cache;
  cache.block_size = 2;
  cache.num_blocks = 32;
  cache.max_tokens = 64;
  cache.scramble_seed = 9;
  const DecodeFidelity f = measure_decode_fidelity(t.config, t.model, t.plan, 2, cache, 8, 81);
  EXPECT_EQ(f.steps, 8u);
  EXPECT_TRUE(f.blocks_scrambled);
  EXPECT_LT(f.worst_logit_diff, 1e-8);
  EXPECT_LT(f.worst_reconstruction_diff, 1e-10);
  EXPECT_EQ(f.replay_allocations, 0u);
  EXPECT_TRUE(f.signatures_constant);
  EXPECT_GT(f.replay_windows, 8u);
}

TEST(Decode, CacheAccessorOnlyForLatent) {
  const Toy t = make_toy(4, 2, MlpVariant::kGlu, false, 90, 1);
  ParallelModel base(t.config, t.model, PipelineMode::kBase, 2, CacheSettings{});
  EXPECT_THROW(base.cache(0, 0), Error);
  ParallelModel latent(t.config, t.model, PipelineMode::kLatent, 2, CacheSettings{});
  EXPECT_EQ(latent.cache(0, 1).pool().k_dim(), 4u);
}
