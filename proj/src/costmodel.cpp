#include "lrtp/costmodel.hpp"

#include <algorithm>
#include <sstream>

namespace lrtp {

std::string_view to_string(CostConvention c) {
  return c == CostConvention::kTabulated ? "tabulated" : "measured";
}

std::string_view to_string(CostStatus s) { return s == CostStatus::kUnoptimized ? "unoptimized" : "latent"; }

CostConvention parse_cost_convention(std::string_view s) {
  if (s == "tabulated") return CostConvention::kTabulated;
  if (s == "measured") return CostConvention::kPipelineMeasured;
  throw Error(ErrorCode::kConfig, "unknown cost convention '" + std::string(s) + "'");
}

void CostInputs::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kParameter, msg); };
  if (h == 0 || h_kv == 0 || m == 0 || num_layers == 0) fail("h, h_kv, m and num_layers must be positive");
  auto check = [&](std::uint64_t rank, std::uint64_t bound, const char* name) {
    if (rank < 1 || rank > bound) {
      fail(std::string(name) + " = " + std::to_string(rank) + " outside [1, " + std::to_string(bound) + "]");
    }
  };
  check(l_q, h, "l_q");
  check(l_k, std::min(h, h_kv), "l_k");
  check(l_v, std::min(h, h_kv), "l_v");
  check(l_o, h, "l_o");
  check(l_up, std::min(h, m), "l_up");
  if (mlp_variant == MlpVariant::kGlu) check(l_gate, std::min(h, m), "l_gate");
  check(l_down, std::min(h, m), "l_down");
}

CostInputs CostInputs::from_plan(const ModelConfig& config, const DecompositionPlan& plan, std::size_t layer) {
  auto rank = [&](LayerMatrix m) -> std::uint64_t {
    const auto r = plan.rank(layer, m);
    if (!r) throw Error(ErrorCode::kPlan, "no rank planned for " + std::string(to_string(m)));
    return *r;
  };
  CostInputs in;
  in.h = config.hidden_dim;
  in.h_kv = config.kv_dim;
  in.m = config.intermediate_dim;
  in.l_q = rank(LayerMatrix::kQ);
  in.l_k = rank(LayerMatrix::kK);
  in.l_v = rank(LayerMatrix::kV);
  in.l_o = rank(LayerMatrix::kO);
  in.l_up = rank(LayerMatrix::kUp);
  in.l_gate = config.mlp_variant == MlpVariant::kGlu ? rank(LayerMatrix::kGate) : 0;
  in.l_down = rank(LayerMatrix::kDown);
  in.num_layers = config.num_layers;
  in.mlp_variant = config.mlp_variant;
  return in;
}

CostRow attention_cost(const CostInputs& in, CostStatus status, CostConvention convention) {
  in.validate();
  CostRow row{Sublayer::kAttention, status, 0, 0};
  if (status == CostStatus::kUnoptimized) {
    // One reduce-sum after each of the Q, K, V and O factor pairs.
    row.reduce_sum = 2 * (2 * in.h + 2 * in.h_kv);
    return row;
  }
  row.all_gather = in.l_q + in.l_k + in.l_v;
  row.reduce_sum = convention == CostConvention::kTabulated ? 2 * in.h : 2 * in.l_o;
  return row;
}

CostRow mlp_cost(const CostInputs& in, CostStatus status, CostConvention convention) {
  in.validate();
  const bool glu = in.mlp_variant == MlpVariant::kGlu;
  CostRow row{Sublayer::kMlp, status, 0, 0};
  if (status == CostStatus::kUnoptimized) {
    row.reduce_sum = glu ? 2 * (2 * in.m + in.h) : 2 * (in.m + in.h);
    return row;
  }
  const std::uint64_t first = in.l_up + (glu ? in.l_gate : 0);
  if (convention == CostConvention::kTabulated) {
    row.all_gather = first + in.l_down;
    row.reduce_sum = 2 * in.h;
  } else {
    row.all_gather = first;
    row.reduce_sum = 2 * in.l_down;
  }
  return row;
}

BlockCost block_cost(const CostInputs& in, CostStatus status, CostConvention convention) {
  const CostRow a = attention_cost(in, status, convention);
  const CostRow b = mlp_cost(in, status, convention);
  return BlockCost{a.all_gather + b.all_gather, a.reduce_sum + b.reduce_sum};
}

CostReport model_cost_report(const CostInputs& in, CostConvention convention) {
  in.validate();
  CostReport r;
  r.inputs = in;
  r.convention = convention;
  r.rows = {attention_cost(in, CostStatus::kUnoptimized, convention),
            attention_cost(in, CostStatus::kLatent, convention),
            mlp_cost(in, CostStatus::kUnoptimized, convention), mlp_cost(in, CostStatus::kLatent, convention)};
  r.unoptimized = block_cost(in, CostStatus::kUnoptimized, convention);
  r.latent = block_cost(in, CostStatus::kLatent, convention);
  r.model_unoptimized = r.unoptimized.total() * in.num_layers;
  r.model_latent = r.latent.total() * in.num_layers;
  r.saved = SavedFraction{r.unoptimized.total() - r.latent.total(), r.unoptimized.total()};
  // The aggregate row always uses the printed all-gather row.
  const BlockCost tabulated = block_cost(in, CostStatus::kLatent, CostConvention::kTabulated);
  r.compatibility_aggregate = BlockCost{tabulated.all_gather, 2 * in.h};
  r.compatibility_saved =
      SavedFraction{r.unoptimized.total() - r.compatibility_aggregate.total(), r.unoptimized.total()};
  return r;
}

std::string Reconciliation::describe() const {
  std::ostringstream os;
  for (const auto& d : mismatches) {
    os << "layer " << d.layer << " " << to_string(d.sublayer) << " " << to_string(d.kind) << ": expected "
       << d.expected << ", measured " << d.measured << "\n";
  }
  return os.str();
}

Reconciliation compare_with_measured(const CostReport& report, CostStatus status, const TrafficLedger& ledger,
                                     std::optional<std::size_t> tokens) {
  if (tokens && *tokens == 0) throw Error(ErrorCode::kParameter, "token count must be positive");
  Reconciliation out;
  const CostRow attention = attention_cost(report.inputs, status, report.convention);
  const CostRow mlp = mlp_cost(report.inputs, status, report.convention);
  for (std::size_t layer = 0; layer < report.inputs.num_layers; ++layer) {
    for (const CostRow* row : {&attention, &mlp}) {
      for (CollectiveKind kind : {CollectiveKind::kAllGather, CollectiveKind::kReduceSum}) {
        VolumeDelta d{layer, row->layer, kind,
                      kind == CollectiveKind::kAllGather ? row->all_gather : row->reduce_sum,
                      ledger.per_token_volume(kind, layer, row->layer)};
        bool exact = true;
        if (tokens) {
          const std::uint64_t elements = ledger.total_volume(kind, layer, row->layer);
          d.measured = elements / *tokens;
          exact = elements % *tokens == 0;
        }
        out.checked.push_back(d);
        if (d.expected != d.measured || !exact) out.mismatches.push_back(d);
      }
    }
  }
  return out;
}

void require_reconciled(const CostReport& report, CostStatus status, const TrafficLedger& ledger) {
  const Reconciliation rec = compare_with_measured(report, status, ledger);
  if (!rec.ok()) throw Error(ErrorCode::kReconciliation, "ledger disagrees with the cost model:\n" + rec.describe());
}

}  // namespace lrtp
