#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lrtp/io.hpp"
#include "lrtp/model.hpp"

namespace lrtp {

// Single-worker stacks with plain residuals, used as oracles.
DenseMatrix reference_forward(const ModelConfig& config, std::span<const FactorLayer> layers, const DenseMatrix& x,
                              std::vector<DenseMatrix>* attention_inputs = nullptr);
DenseMatrix reference_forward(const ModelConfig& config, std::span<const DenseLayer> layers, const DenseMatrix& x);

struct EquivalenceDiffs {
  double latent_vs_base = 0.0;
  double latent_vs_oracle = 0.0;
  double base_vs_oracle = 0.0;
};
EquivalenceDiffs measure_equivalence(const ModelConfig& config, const DecomposedModel& model,
                                     const DecompositionPlan& plan, std::size_t world_size, const DenseMatrix& x);

// Worst relative difference of the dense TP, Base and latent pipelines
// against the dense single-worker stack, under a lossless plan.
double measure_lossless(const ModelConfig& config, std::span<const DenseLayer> dense, std::size_t world_size,
                        const DenseMatrix& x);

struct CensusCounts {
  std::size_t attention_all_gather = 0;
  std::size_t attention_reduce_sum = 0;
  std::size_t mlp_all_gather = 0;
  std::size_t mlp_reduce_sum = 0;
  friend bool operator==(const CensusCounts&, const CensusCounts&) = default;
};
// Collective calls issued by layer 0 during one forward.
CensusCounts measure_census(const ModelConfig& config, const DecomposedModel& model, const DecompositionPlan& plan,
                            PipelineMode mode, std::size_t world_size, const DenseMatrix& x);
// What each pipeline is expected to issue per block.
CensusCounts expected_census(const ModelConfig& config, PipelineMode mode, std::size_t world_size);

// Per-worker self-attention FLOPs of one forward; throws kCollective if
// workers disagree.
std::uint64_t measure_attention_flops(const ModelConfig& config, const DecomposedModel& model,
                                      const DecompositionPlan& plan, PipelineMode mode, std::size_t world_size,
                                      const DenseMatrix& x);

struct DecodeFidelity {
  std::size_t steps = 0;
  double worst_logit_diff = 0.0;           // relative Frobenius, per step and sequence
  double worst_reconstruction_diff = 0.0;  // max abs over every reconstructed K/V row
  std::size_t replay_windows = 0;
  std::size_t replay_allocations = 0;
  bool signatures_constant = true;
  bool blocks_scrambled = false;  // some sequence spans more than one physical run
};
// Two sequences, a short prefill then `steps` single-token decode steps on
// both, against recompute-from-scratch through the single-worker oracle.
DecodeFidelity measure_decode_fidelity(const ModelConfig& config, const DecomposedModel& model,
                                       const DecompositionPlan& plan, std::size_t world_size,
                                       const CacheSettings& cache, std::size_t steps, std::uint64_t seed);

// Brute force over all 2^(n-1) cut sets: the fewest order-preserving
// segments whose physical ids each ascend by one. Returns (start, length)
// per segment.
std::vector<std::pair<std::size_t, std::size_t>> minimal_partition_oracle(std::span<const std::size_t> physical);
// Compares scan_contiguous_runs against the oracle on random block lists
// drawn from scrambled pools of at most `max_blocks` blocks. Returns the
// number of disagreements.
std::size_t run_scan_disagreements(std::uint64_t seed, std::size_t trials, std::size_t max_blocks);

enum class CheckSuite { kEquivalence, kCensus, kKvcache, kCost, kAll };
CheckSuite parse_check_suite(std::string_view s);
std::string_view to_string(CheckSuite s);

struct PropertyResult {
  std::string suite;
  std::string name;
  bool passed = false;
  std::string detail;
};

struct CheckReport {
  std::vector<PropertyResult> properties;
  bool ok() const;
  std::size_t failures() const;
};

struct CheckOptions {
  std::size_t tokens = 6;
  std::size_t decode_steps = 16;
  std::size_t permutation_trials = 1000;
  std::size_t max_permutation_blocks = 8;
  double tolerance = 1e-8;
  double reconstruction_tolerance = 1e-10;
};

CheckReport run_checks(const RunConfig& config, CheckSuite suite, const CheckOptions& options = {});

}  // namespace lrtp
