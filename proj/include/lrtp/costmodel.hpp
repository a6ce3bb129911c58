#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lrtp/decomposition.hpp"
#include "lrtp/model_config.hpp"
#include "lrtp/parallel.hpp"

namespace lrtp {

// Per-token, per-block communication volume in elements. All arithmetic is
// integral.

enum class CostConvention {
  kTabulated,         // second-sub-layer reduce-sum priced at 2h per sub-layer
  kPipelineMeasured,  // reduce-sum in the low-rank space, as the pipeline executes it
};
enum class CostStatus { kUnoptimized, kLatent };

std::string_view to_string(CostConvention c);
std::string_view to_string(CostStatus s);
CostConvention parse_cost_convention(std::string_view s);

struct CostInputs {
  std::uint64_t h = 0, h_kv = 0, m = 0;
  std::uint64_t l_q = 0, l_k = 0, l_v = 0, l_o = 0;
  std::uint64_t l_up = 0, l_gate = 0, l_down = 0;  // l_gate unused for NonGLU
  std::uint64_t num_layers = 1;
  MlpVariant mlp_variant = MlpVariant::kGlu;

  // Throws kParameter: dims positive, ranks in [1, min dim].
  void validate() const;

  // Dims from the config and ranks from one layer of the plan.
  static CostInputs from_plan(const ModelConfig& config, const DecompositionPlan& plan, std::size_t layer = 0);
};

struct CostRow {
  Sublayer layer = Sublayer::kAttention;
  CostStatus status = CostStatus::kUnoptimized;
  std::uint64_t all_gather = 0;
  std::uint64_t reduce_sum = 0;

  std::uint64_t total() const noexcept { return all_gather + reduce_sum; }
  friend bool operator==(const CostRow&, const CostRow&) = default;
};

CostRow attention_cost(const CostInputs& in, CostStatus status, CostConvention convention);
CostRow mlp_cost(const CostInputs& in, CostStatus status, CostConvention convention);

struct BlockCost {
  std::uint64_t all_gather = 0;
  std::uint64_t reduce_sum = 0;
  std::uint64_t total() const noexcept { return all_gather + reduce_sum; }
};

BlockCost block_cost(const CostInputs& in, CostStatus status, CostConvention convention);

// Saved fraction kept as an exact ratio; percentages are derived from it.
struct SavedFraction {
  std::uint64_t saved = 0;  // unoptimized - optimized
  std::uint64_t base = 1;   // unoptimized
  double fraction() const { return static_cast<double>(saved) / static_cast<double>(base); }
  // Nearest whole percent, ties away from zero.
  std::uint64_t rounded_percent() const { return (200 * saved + base) / (2 * base); }
};

struct CostReport {
  CostInputs inputs;
  CostConvention convention = CostConvention::kTabulated;
  std::vector<CostRow> rows;  // attention x {unopt, latent}, mlp x {unopt, latent}
  BlockCost unoptimized;
  BlockCost latent;
  std::uint64_t model_unoptimized = 0;  // block totals x num_layers
  std::uint64_t model_latent = 0;
  SavedFraction saved;
  // One 2h reduce-sum per block on top of the all-gather total. This is the
  // counting behind the 37,276 / 78% aggregate for the 70B configuration.
  BlockCost compatibility_aggregate;
  SavedFraction compatibility_saved;
};

CostReport model_cost_report(const CostInputs& in, CostConvention convention);

struct VolumeDelta {
  std::size_t layer = 0;
  Sublayer sublayer = Sublayer::kAttention;
  CollectiveKind kind = CollectiveKind::kAllGather;
  std::uint64_t expected = 0;
  std::uint64_t measured = 0;
};

struct Reconciliation {
  std::vector<VolumeDelta> checked;
  std::vector<VolumeDelta> mismatches;
  bool ok() const noexcept { return mismatches.empty(); }
  std::string describe() const;
};

// Compares per-token ledger volumes, per layer, sub-layer and collective
// kind, against the analytic rows for `status` (latent rows use the
// report's convention, so pass a kPipelineMeasured report for exact match).
// With `tokens`, the measured value is instead the element total divided by
// the tokens processed, which also covers collectives issued per sequence.
Reconciliation compare_with_measured(const CostReport& report, CostStatus status, const TrafficLedger& ledger,
                                     std::optional<std::size_t> tokens = std::nullopt);
// Same, but throws kReconciliation listing every delta.
void require_reconciled(const CostReport& report, CostStatus status, const TrafficLedger& ledger);

}  // namespace lrtp
