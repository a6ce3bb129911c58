#include <gtest/gtest.h>

#include "lrtp/costmodel.hpp"
#include "lrtp/model.hpp"

using namespace lrtp;

namespace {

CostInputs llama() {
  CostInputs in;
  in.h = 8192;
  in.h_kv = 1024;
  in.m = 28672;
  in.l_q = in.l_o = in.l_up = in.l_gate = in.l_down = 4916;
  in.l_k = in.l_v = 614;
  in.num_layers = 80;
  return in;
}

}  // namespace

TEST(CostModel, LlamaTableValues) {
  const CostInputs in = llama();
  const auto tabulated = CostConvention::kTabulated;
  EXPECT_EQ(attention_cost(in, CostStatus::kUnoptimized, tabulated), (CostRow{Sublayer::kAttention, CostStatus::kUnoptimized, 0, 36864}));
  EXPECT_EQ(mlp_cost(in, CostStatus::kUnoptimized, tabulated).total(), 131072u);
  EXPECT_EQ(block_cost(in, CostStatus::kUnoptimized, tabulated).total(), 167936u);
  EXPECT_EQ(block_cost(in, CostStatus::kLatent, tabulated).all_gather, 20892u);
  EXPECT_EQ(attention_cost(in, CostStatus::kLatent, tabulated).all_gather, 6144u);
  EXPECT_EQ(mlp_cost(in, CostStatus::kLatent, tabulated).all_gather, 14748u);
}

TEST(CostModel, ConventionTotalsAndSavings) {
  const CostReport tabulated = model_cost_report(llama(), CostConvention::kTabulated);
  const CostReport measured = model_cost_report(llama(), CostConvention::kPipelineMeasured);
  EXPECT_EQ(tabulated.latent.total(), 53660u);
  EXPECT_EQ(tabulated.saved.rounded_percent(), 68u);
  EXPECT_EQ(measured.latent.total(), 35640u);
  EXPECT_EQ(measured.saved.rounded_percent(), 79u);
  EXPECT_EQ(tabulated.compatibility_aggregate.total(), 37276u);
  EXPECT_EQ(tabulated.compatibility_saved.rounded_percent(), 78u);
  EXPECT_EQ(tabulated.model_unoptimized, 80u * 167936);
  EXPECT_EQ(measured.model_latent, 80u * 35640);
  // Measured <= compatibility <= tabulated.
  EXPECT_LE(measured.latent.total(), tabulated.compatibility_aggregate.total());
  EXPECT_LE(tabulated.compatibility_aggregate.total(), tabulated.latent.total());
  EXPECT_LT(tabulated.latent.total(), tabulated.unoptimized.total());
}

TEST(CostModel, OrderingHoldsOverRandomRanks) {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    CostInputs in;
    in.h = 8 * (1 + rng.uniform_index(64));
    in.h_kv = rng.uniform_index(2) ? in.h : in.h / 2;
    in.m = in.h * (1 + rng.uniform_index(4));
    in.mlp_variant = rng.uniform_index(2) ? MlpVariant::kGlu : MlpVariant::kNonGlu;
    auto r = [&](std::uint64_t bound) { return 1 + rng.uniform_index(bound); };
    in.l_q = r(in.h);
    in.l_o = r(in.h);
    in.l_k = r(in.h_kv);
    in.l_v = r(in.h_kv);
    in.l_up = r(std::min(in.h, in.m));
    in.l_gate = r(std::min(in.h, in.m));
    in.l_down = r(std::min(in.h, in.m));
    const auto tabulated = block_cost(in, CostStatus::kLatent, CostConvention::kTabulated);
    const auto measured = block_cost(in, CostStatus::kLatent, CostConvention::kPipelineMeasured);
    EXPECT_LE(measured.total(), tabulated.total());
    EXPECT_EQ(block_cost(in, CostStatus::kUnoptimized, CostConvention::kTabulated).total(),
              block_cost(in, CostStatus::kUnoptimized, CostConvention::kPipelineMeasured).total());
  }
}

TEST(CostModel, NonGluDropsGate) {
  CostInputs in = llama();
  in.mlp_variant = MlpVariant::kNonGlu;
  in.l_gate = 0;
  EXPECT_EQ(mlp_cost(in, CostStatus::kUnoptimized, CostConvention::kTabulated).reduce_sum, 2u * (28672 + 8192));
  const CostRow tabulated = mlp_cost(in, CostStatus::kLatent, CostConvention::kTabulated);
  EXPECT_EQ(tabulated.all_gather, 4916u * 2);
  EXPECT_EQ(tabulated.reduce_sum, 2u * 8192);
  const CostRow measured = mlp_cost(in, CostStatus::kLatent, CostConvention::kPipelineMeasured);
  EXPECT_EQ(measured.all_gather, 4916u);
  EXPECT_EQ(measured.reduce_sum, 2u * 4916);
}

TEST(CostModel, RejectsBadInputs) {
  CostInputs in = llama();
  in.l_k = 1025;
  try {
    model_cost_report(in, CostConvention::kTabulated);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParameter);
    EXPECT_NE(std::string(e.what()).find("l_k"), std::string::npos);
  }
  in = llama();
  in.m = 0;
  EXPECT_THROW(in.validate(), Error);
  in = llama();
  in.l_up = 0;
  EXPECT_THROW(in.validate(), Error);
}

TEST(CostModel, SavedFractionRounding) {
  EXPECT_EQ((SavedFraction{1, 2}).rounded_percent(), 50u);
  EXPECT_EQ((SavedFraction{1, 200}).rounded_percent(), 1u);
  EXPECT_EQ((SavedFraction{1, 201}).rounded_percent(), 0u);
  EXPECT_EQ(parse_cost_convention("measured"), CostConvention::kPipelineMeasured);
  EXPECT_THROW(parse_cost_convention("other"), Error);
}

// Random small configurations: the ledger each pipeline records must match
// the analytic volumes exactly, per layer, sub-layer and collective kind.
TEST(Reconciliation, LedgerMatchesModelOnRandomConfigs) {
  Rng rng(2);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t kv = std::size_t{1} << rng.uniform_index(3);
    const std::size_t heads = kv * (1 + rng.uniform_index(2)) * 2;
    const std::size_t hd = 2 * (1 + rng.uniform_index(2));
    const MlpVariant mlp = rng.uniform_index(2) ? MlpVariant::kGlu : MlpVariant::kNonGlu;
    const auto cfg = ModelConfig::from_heads(heads, kv, hd, 4 * heads, mlp, rng.uniform_index(2) == 1, 2);
    if (cfg.kv_dim < 4) continue;
    const auto dense = random_dense_model(cfg, 100 + trial);
    const std::size_t rank_k = cfg.kv_dim >= 8 && rng.uniform_index(2) ? 8 : 4;
    DecompositionPlan plan(2);
    for (std::size_t l = 0; l < 2; ++l) {
      plan.set(l, LayerMatrix::kQ, 4);
      plan.set(l, LayerMatrix::kK, rank_k);
      plan.set(l, LayerMatrix::kV, 4);
      plan.set(l, LayerMatrix::kO, 4);
      plan.set(l, LayerMatrix::kUp, 4);
      if (mlp == MlpVariant::kGlu) plan.set(l, LayerMatrix::kGate, 4);
      plan.set(l, LayerMatrix::kDown, 4);
    }
    const auto model = decompose_model(dense, plan);
    const DenseMatrix x = Rng(trial).normal_matrix(3, cfg.hidden_dim);
    for (std::size_t p : {2u, 4u}) {
      if (heads % p != 0) continue;
      const auto report = model_cost_report(CostInputs::from_plan(cfg, plan), CostConvention::kPipelineMeasured);
      ParallelModel latent(cfg, model, PipelineMode::kLatent, p, std::nullopt, &plan);
      const auto rec = compare_with_measured(report, CostStatus::kLatent, latent.forward(x).trace.ledger);
      EXPECT_TRUE(rec.ok()) << rec.describe();
      EXPECT_EQ(rec.checked.size(), 2u * 4);
      ParallelModel base(cfg, model, PipelineMode::kBase, p);
      const auto rb = compare_with_measured(report, CostStatus::kUnoptimized, base.forward(x).trace.ledger);
      EXPECT_TRUE(rb.ok()) << rb.describe();
    }
  }
}

TEST(Reconciliation, MismatchIsReported) {
  CostInputs in = llama();
  in.num_layers = 1;
  const auto report = model_cost_report(in, CostConvention::kPipelineMeasured);
  TrafficLedger empty;
  const auto rec = compare_with_measured(report, CostStatus::kLatent, empty);
  EXPECT_FALSE(rec.ok());
  try {
    require_reconciled(report, CostStatus::kLatent, empty);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kReconciliation);
  }
}

TEST(Reconciliation, PerSequenceCollectivesNormalisedByTokens) {
  CostInputs in = llama();
  in.num_layers = 1;
  const auto report = model_cost_report(in, CostConvention::kPipelineMeasured);
  const CostRow attn = attention_cost(in, CostStatus::kLatent, CostConvention::kPipelineMeasured);
  const CostRow mlp = mlp_cost(in, CostStatus::kLatent, CostConvention::kPipelineMeasured);
  TrafficLedger ledger;
  // Two sequences of 3 and 5 tokens, each with its own collectives.
  for (std::size_t tokens : {3u, 5u}) {
    ledger.record({CollectiveKind::kAllGather, {0, Sublayer::kAttention}, attn.all_gather, tokens, 0});
    ledger.record({CollectiveKind::kReduceSum, {0, Sublayer::kAttention}, attn.reduce_sum, tokens, 0});
    ledger.record({CollectiveKind::kAllGather, {0, Sublayer::kMlp}, mlp.all_gather, tokens, 0});
    ledger.record({CollectiveKind::kReduceSum, {0, Sublayer::kMlp}, mlp.reduce_sum, tokens, 0});
  }
  EXPECT_FALSE(compare_with_measured(report, CostStatus::kLatent, ledger).ok());
  EXPECT_TRUE(compare_with_measured(report, CostStatus::kLatent, ledger, 8).ok());
  EXPECT_FALSE(compare_with_measured(report, CostStatus::kLatent, ledger, 7).ok());
}
