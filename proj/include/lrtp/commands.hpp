#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lrtp/checks.hpp"
#include "lrtp/io.hpp"
#include "lrtp/model.hpp"

namespace lrtp {

enum class OutputFormat { kTable, kJson };
OutputFormat parse_output_format(std::string_view s);

// 167936 -> "167,936".
std::string format_thousands(std::uint64_t v);

// Process exit codes of the command-line front end.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitInvalid = 3;  // config, plan, shape or partition errors
inline constexpr int kExitIo = 4;
int exit_code_for(const Error& e);

std::string render_cost(const RunConfig& config, OutputFormat format);
std::string render_check(const RunConfig& config, CheckSuite suite, const CheckReport& report, OutputFormat format);

struct DecomposeEntry {
  std::string name;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t rank = 0;
  double relative_error = 0.0;        // ||W - AB||_F / ||W||_F
  double tail_energy_relative = 0.0;  // sqrt(discarded energy) / ||W||_F
};

struct DecomposeReport {
  std::vector<DecomposeEntry> entries;
  WeightArchive output;
};

// Factors every "layers.<i>.<matrix>" tensor of `input` per `plan`.
DecomposeReport decompose_archive(const WeightArchive& input, const ModelConfig& config,
                                  const DecompositionPlan& plan);
std::string render_decompose(const DecomposeReport& report, OutputFormat format);

struct BenchOptions {
  PipelineMode mode = PipelineMode::kLatent;
  std::size_t world_size = 2;
  std::size_t batch = 1;
  std::size_t prefill = 32;
  std::size_t decode = 8;
};

struct BenchStep {
  std::string phase;  // "prefill" or "decode"
  std::size_t tokens = 0;
  double wall_ms = 0.0;
};

struct BenchReport {
  BenchOptions options;
  std::uint64_t seed = 0;
  std::vector<BenchStep> steps;
  std::size_t total_tokens = 0;
  std::uint64_t all_gather_elements = 0;  // summed over tokens
  std::uint64_t reduce_sum_elements = 0;
  std::size_t bytes_per_element = 2;
  std::vector<std::uint64_t> attention_flops;  // per worker
  std::vector<std::uint64_t> matmul_flops;
  // Prefill-only Base/latent runs at p >= 2: the ledger against the
  // pipeline-measured cost model, per token per layer.
  bool cost_model_checked = false;
  bool cost_model_match = false;
};

BenchReport run_bench(const RunConfig& config, const BenchOptions& options);
std::string render_bench(const BenchReport& report, OutputFormat format);

WeightArchive synth_archive(const ModelConfig& config, std::uint64_t seed);

}  // namespace lrtp
