#include <gtest/gtest.h>

#include <json.hpp>

#include "lrtp/commands.hpp"

using namespace lrtp;
using nlohmann::json;

namespace {

RunConfig llama() {
  RunConfig rc;
  rc.model = ModelConfig::from_heads(64, 8, 128, 28672, MlpVariant::kGlu, true, 80);
  rc.ranks = {{LayerMatrix::kQ, 4916},  {LayerMatrix::kK, 614},    {LayerMatrix::kV, 614},
              {LayerMatrix::kO, 4916},  {LayerMatrix::kUp, 4916},  {LayerMatrix::kGate, 4916},
              {LayerMatrix::kDown, 4916}};
  rc.tp = {8};
  return rc;
}

RunConfig toy() {
  RunConfig rc;
  rc.model = ModelConfig::from_heads(4, 2, 8, 64, MlpVariant::kGlu, true, 2);
  rc.ranks = {{LayerMatrix::kQ, 16}, {LayerMatrix::kK, 8},   {LayerMatrix::kV, 8},   {LayerMatrix::kO, 16},
              {LayerMatrix::kUp, 16}, {LayerMatrix::kGate, 16}, {LayerMatrix::kDown, 16}};
  rc.seed = 3;
  return rc;
}

}  // namespace

TEST(FormatThousands, Groups) {
  EXPECT_EQ(format_thousands(0), "0");
  EXPECT_EQ(format_thousands(999), "999");
  EXPECT_EQ(format_thousands(1000), "1,000");
  EXPECT_EQ(format_thousands(167936), "167,936");
  EXPECT_EQ(format_thousands(13434880), "13,434,880");
}

TEST(ExitCodes, ByErrorKind) {
  EXPECT_EQ(exit_code_for(Error(ErrorCode::kIo, "x")), kExitIo);
  EXPECT_EQ(exit_code_for(Error(ErrorCode::kConfig, "x")), kExitInvalid);
  EXPECT_EQ(exit_code_for(Error(ErrorCode::kPartition, "x")), kExitInvalid);
  EXPECT_EQ(parse_output_format("json"), OutputFormat::kJson);
  EXPECT_THROW(parse_output_format("yaml"), Error);
}

TEST(RenderCost, TableCarriesReferenceNumbers) {
  const std::string out = render_cost(llama(), OutputFormat::kTable);
  for (const char* s : {"36,864", "131,072", "167,936", "20,892", "53,660", "68%", "35,640", "79%", "37,276", "78%"}) {
    EXPECT_NE(out.find(s), std::string::npos) << s;
  }
}

TEST(RenderCost, JsonIsStableAndComplete) {
  const std::string a = render_cost(llama(), OutputFormat::kJson);
  EXPECT_EQ(a, render_cost(llama(), OutputFormat::kJson));
  const json j = json::parse(a);
  EXPECT_EQ(j.at("command"), "cost");
  EXPECT_EQ(j.at("inputs").at("ranks").at("k"), 614);
  EXPECT_EQ(j.at("rows").size(), 8u);
  EXPECT_EQ(j.at("saved_percent").at("tabulated"), 68);
  EXPECT_EQ(j.at("saved_percent").at("measured"), 79);
  EXPECT_EQ(j.at("saved_percent").at("compatibility"), 78);
  std::map<std::string, std::uint64_t> latent;
  for (const auto& t : j.at("totals")) {
    if (t.at("status") == "latent") latent[t.at("convention")] = t.at("total");
  }
  EXPECT_EQ(latent.at("tabulated"), 53660u);
  EXPECT_EQ(latent.at("measured"), 35640u);
  EXPECT_EQ(latent.at("compatibility"), 37276u);
}

TEST(RenderCost, SingleConvention) {
  RunConfig rc = llama();
  rc.convention = ConventionSelection::kMeasured;
  const json j = json::parse(render_cost(rc, OutputFormat::kJson));
  for (const auto& r : j.at("rows")) EXPECT_EQ(r.at("convention"), "measured");
}

TEST(Decompose, ErrorEqualsTailEnergy) {
  const auto cfg = toy().model;
  const WeightArchive in = synth_archive(cfg, 4);
  const auto report = decompose_archive(in, cfg, plan_from_ratio(cfg, 0.4));
  ASSERT_EQ(report.entries.size(), 2u * 7);
  for (const auto& e : report.entries) {
    EXPECT_NEAR(e.relative_error, e.tail_energy_relative, 1e-9) << e.name;
    EXPECT_GT(e.relative_error, 0.0);
  }
  EXPECT_TRUE(report.output.contains("layers.1.gate.up"));
  const json j = json::parse(render_decompose(report, OutputFormat::kJson));
  EXPECT_EQ(j.at("rows").size(), 14u);
}

TEST(Decompose, LosslessIsExact) {
  const auto cfg = toy().model;
  const auto report = decompose_archive(synth_archive(cfg, 5), cfg, plan_lossless(cfg));
  for (const auto& e : report.entries) EXPECT_LT(e.relative_error, 1e-10) << e.name;
}

TEST(Bench, SingleWorkerMovesNothing) {
  BenchOptions o;
  o.world_size = 1;
  o.prefill = 4;
  o.decode = 2;
  for (PipelineMode m : {PipelineMode::kDense, PipelineMode::kBase, PipelineMode::kLatent}) {
    o.mode = m;
    const BenchReport r = run_bench(toy(), o);
    EXPECT_EQ(r.all_gather_elements + r.reduce_sum_elements, 0u) << to_string(m);
    EXPECT_EQ(r.total_tokens, 6u);
    EXPECT_EQ(r.steps.size(), 3u);
  }
}

TEST(Bench, LatentMovesLessThanBase) {
  BenchOptions o;
  o.world_size = 2;
  o.prefill = 8;
  o.decode = 4;
  o.batch = 2;
  o.mode = PipelineMode::kBase;
  const BenchReport base = run_bench(toy(), o);
  o.mode = PipelineMode::kLatent;
  const BenchReport latent = run_bench(toy(), o);
  EXPECT_LT(latent.all_gather_elements + latent.reduce_sum_elements,
            base.all_gather_elements + base.reduce_sum_elements);
  EXPECT_TRUE(latent.cost_model_checked);
  EXPECT_TRUE(latent.cost_model_match);
  EXPECT_TRUE(base.cost_model_match);
  EXPECT_EQ(latent.attention_flops.size(), 2u);
  EXPECT_EQ(latent.attention_flops[0], latent.attention_flops[1]);
  const json j = json::parse(render_bench(latent, OutputFormat::kJson));
  EXPECT_EQ(j.at("pipeline"), "latent");
}

TEST(Check, ToySuitePasses) {
  CheckOptions opt;
  opt.permutation_trials = 50;
  opt.decode_steps = 4;
  RunConfig rc = toy();
  rc.cache.block_size = 2;
  rc.cache.scramble_seed = 7;
  const CheckReport report = run_checks(rc, CheckSuite::kAll, opt);
  EXPECT_TRUE(report.ok()) << render_check(rc, CheckSuite::kAll, report, OutputFormat::kTable);
  const json j = json::parse(render_check(rc, CheckSuite::kAll, report, OutputFormat::kJson));
  EXPECT_TRUE(j.at("passed").get<bool>());
  EXPECT_GT(j.at("properties").size(), 20u);
}

TEST(Check, IndivisibleRanksFailRatherThanSkip) {
  RunConfig rc = toy();
  rc.ranks[LayerMatrix::kQ] = 6;
  rc.tp = {4};
  CheckOptions opt;
  opt.permutation_trials = 10;
  opt.decode_steps = 2;
  const CheckReport report = run_checks(rc, CheckSuite::kEquivalence, opt);
  EXPECT_FALSE(report.ok());
  EXPECT_GT(report.failures(), 0u);
}
