#include "lrtp/checks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace lrtp {

DenseMatrix reference_forward(const ModelConfig& config, std::span<const FactorLayer> layers, const DenseMatrix& x,
                              std::vector<DenseMatrix>* attention_inputs) {
  DenseMatrix h = x;
  if (attention_inputs) attention_inputs->clear();
  for (const auto& layer : layers) {
    if (attention_inputs) attention_inputs->push_back(h);
    h = add(h, reference_attention(config, layer, h));
    h = add(h, reference_mlp(config, layer, h));
  }
  return h;
}

DenseMatrix reference_forward(const ModelConfig& config, std::span<const DenseLayer> layers, const DenseMatrix& x) {
  DenseMatrix h = x;
  for (const auto& layer : layers) {
    h = add(h, reference_attention(config, layer, h));
    h = add(h, reference_mlp(config, layer, h));
  }
  return h;
}

EquivalenceDiffs measure_equivalence(const ModelConfig& config, const DecomposedModel& model,
                                     const DecompositionPlan& plan, std::size_t world_size, const DenseMatrix& x) {
  ParallelModel base(config, model, PipelineMode::kBase, world_size);
  ParallelModel latent(config, model, PipelineMode::kLatent, world_size, std::nullopt, &plan);
  const DenseMatrix oracle = reference_forward(config, model.layers, x);
  const DenseMatrix b = base.forward(x).output();
  const DenseMatrix l = latent.forward(x).output();
  return {relative_frobenius_diff(l, b), relative_frobenius_diff(l, oracle), relative_frobenius_diff(b, oracle)};
}

double measure_lossless(const ModelConfig& config, std::span<const DenseLayer> dense, std::size_t world_size,
                        const DenseMatrix& x) {
  const DecompositionPlan plan = plan_lossless(config);
  const DecomposedModel model = decompose_model(dense, plan);
  const DenseMatrix oracle = reference_forward(config, dense, x);
  double worst = 0.0;
  for (PipelineMode mode : {PipelineMode::kDense, PipelineMode::kBase, PipelineMode::kLatent}) {
    ParallelModel m(config, model, mode, world_size, std::nullopt, &plan);
    worst = std::max(worst, relative_frobenius_diff(m.forward(x).output(), oracle));
  }
  return worst;
}

CensusCounts measure_census(const ModelConfig& config, const DecomposedModel& model, const DecompositionPlan& plan,
                            PipelineMode mode, std::size_t world_size, const DenseMatrix& x) {
  ParallelModel m(config, model, mode, world_size, std::nullopt, &plan);
  const TrafficLedger ledger = m.forward(x).trace.ledger;
  CensusCounts c;
  for (const auto& r : ledger.records()) {
    if (r.tag.layer != 0) continue;
    const bool gather = r.kind == CollectiveKind::kAllGather;
    if (r.tag.sublayer == Sublayer::kAttention) {
      ++(gather ? c.attention_all_gather : c.attention_reduce_sum);
    } else if (r.tag.sublayer == Sublayer::kMlp) {
      ++(gather ? c.mlp_all_gather : c.mlp_reduce_sum);
    }
  }
  return c;
}

CensusCounts expected_census(const ModelConfig& config, PipelineMode mode, std::size_t /*world_size*/) {
  const bool glu = config.mlp_variant == MlpVariant::kGlu;
  switch (mode) {
    case PipelineMode::kDense: return {0, 1, 0, 1};
    case PipelineMode::kBase: return {0, 4, 0, glu ? 3u : 2u};
    case PipelineMode::kLatent: return {1, 1, 1, 1};
  }
  return {};
}

std::uint64_t measure_attention_flops(const ModelConfig& config, const DecomposedModel& model,
                                      const DecompositionPlan& plan, PipelineMode mode, std::size_t world_size,
                                      const DenseMatrix& x) {
  ParallelModel m(config, model, mode, world_size, std::nullopt, &plan);
  const auto flops = m.forward(x).trace.attention_flops;
  if (std::adjacent_find(flops.begin(), flops.end(), std::not_equal_to<>()) != flops.end()) {
    throw Error(ErrorCode::kCollective, "workers disagree on attention FLOPs");
  }
  return flops.front();
}

DecodeFidelity measure_decode_fidelity(const ModelConfig& config, const DecomposedModel& model,
                                       const DecompositionPlan& plan, std::size_t world_size,
                                       const CacheSettings& cache, std::size_t steps, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t h = config.hidden_dim;
  const DenseMatrix lm_head = rng.normal_matrix(h, 2 * h, 1.0 / std::sqrt(static_cast<double>(h)));
  ParallelModel lat(config, model, PipelineMode::kLatent, world_size, cache, &plan);

  const std::vector<SequenceId> ids = {1, 2};
  const std::vector<std::size_t> prefill = {5, 3};
  std::vector<DenseMatrix> history(ids.size(), DenseMatrix(0, h));
  DecodeFidelity out;
  std::vector<std::vector<std::vector<OpSignature>>> first(config.num_layers);

  for (std::size_t step = 0; step <= steps; ++step) {
    std::vector<QueryChunk> batch;
    std::vector<DenseMatrix> rows;
    for (std::size_t j = 0; j < ids.size(); ++j) {
      const std::size_t n = step == 0 ? prefill[j] : 1;
      batch.push_back({ids[j], n});
      rows.push_back(rng.normal_matrix(n, h));
      history[j] = vconcat(std::vector<DenseMatrix>{history[j], rows.back()});
    }
    const DenseMatrix x = vconcat(rows);
    const DenseMatrix y = lat.decode_step(x, batch).output();

    std::size_t cursor = 0;
    for (std::size_t j = 0; j < ids.size(); ++j) {
      std::vector<DenseMatrix> inputs;
      const DenseMatrix ref = reference_forward(config, model.layers, history[j], &inputs);
      const std::size_t n = batch[j].rows;
      const std::size_t len = history[j].rows();
      const DenseMatrix got = matmul(y.row_range(cursor, cursor + n), lm_head);
      const DenseMatrix want = matmul(ref.row_range(len - n, len), lm_head);
      out.worst_logit_diff = std::max(out.worst_logit_diff, relative_frobenius_diff(got, want));
      cursor += n;

      // Reconstructed rows against x_layer * D * U_shard, rotated.
      for (std::size_t i = 0; i < config.num_layers; ++i) {
        const auto& k_pair = model.layers[i].at(LayerMatrix::kK);
        const auto& v_pair = model.layers[i].at(LayerMatrix::kV);
        const DenseMatrix k_low = matmul(inputs[i], k_pair.down);
        const DenseMatrix v_low = matmul(inputs[i], v_pair.down);
        for (std::size_t r = 0; r < world_size; ++r) {
          const HeadSlice heads = HeadSlice::for_worker(config, r, world_size);
          const std::size_t c0 = heads.kv_begin * config.head_dim;
          const std::size_t c1 = c0 + heads.kv_width();
          DenseMatrix k = matmul(k_low, k_pair.up.columns(c0, c1));
          const DenseMatrix v = matmul(v_low, v_pair.up.columns(c0, c1));
          if (config.use_rope) {
            for (std::size_t t = 0; t < len; ++t) rope_in_place(k.row(t), config.head_dim, t, config.rope_base);
          }
          const WorkerKvCache& wc = lat.cache(i, r);
          const ReplayPlan p = prepare_replay(wc.table(), ids, wc.buffers().capacity_blocks(), 0);
          const auto entry = std::find_if(p.remapping.begin(), p.remapping.end(),
                                          [&](const RemappingEntry& e) { return e.seq == ids[j]; });
          const std::size_t bs = wc.buffers().block_size();
          for (std::size_t t = 0; t < len; ++t) {
            const std::size_t row = entry->buffer_blocks[t / bs] * bs + t % bs;
            if (wc.buffers().position(row) != t) out.worst_reconstruction_diff = INFINITY;
            const auto kr = wc.buffers().k_row(row);
            const auto vr = wc.buffers().v_row(row);
            for (std::size_t c = 0; c < kr.size(); ++c) {
              out.worst_reconstruction_diff = std::max(out.worst_reconstruction_diff, std::abs(kr[c] - k(t, c)));
            }
            for (std::size_t c = 0; c < vr.size(); ++c) {
              out.worst_reconstruction_diff = std::max(out.worst_reconstruction_diff, std::abs(vr[c] - v(t, c)));
            }
          }
        }
      }
    }

    for (std::size_t i = 0; i < config.num_layers; ++i) {
      for (std::size_t r = 0; r < world_size; ++r) {
        const auto& captured = lat.cache(i, r).guard().captured();
        if (step == 0) {
          first[i].push_back(captured);
        } else if (!(captured == first[i][r])) {
          out.signatures_constant = false;
        }
      }
    }
    ++out.steps;
  }

  for (std::size_t i = 0; i < config.num_layers; ++i) {
    for (std::size_t r = 0; r < world_size; ++r) {
      const WorkerKvCache& wc = lat.cache(i, r);
      out.replay_windows += wc.guard().replay_windows();
      out.replay_allocations += wc.guard().replay_allocation_count();
      for (SequenceId s : ids) {
        if (scan_contiguous_runs(wc.table(), s).size() > 1) out.blocks_scrambled = true;
      }
    }
  }
  out.steps -= 1;  // the prefill is not a decode step
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> minimal_partition_oracle(std::span<const std::size_t> physical) {
  const std::size_t n = physical.size();
  if (n == 0) return {};
  std::vector<std::pair<std::size_t, std::size_t>> best;
  // Bit i set = cut between i and i+1.
  for (std::uint64_t cuts = 0; cuts < (std::uint64_t{1} << (n - 1)); ++cuts) {
    std::vector<std::pair<std::size_t, std::size_t>> segs;
    std::size_t start = 0;
    bool valid = true;
    for (std::size_t i = 0; i < n && valid; ++i) {
      const bool cut = i + 1 == n || ((cuts >> i) & 1u);
      if (!cut) {
        valid = physical[i + 1] == physical[i] + 1;
        continue;
      }
      segs.emplace_back(start, i + 1 - start);
      start = i + 1;
    }
    if (valid && (best.empty() || segs.size() < best.size())) best = std::move(segs);
  }
  return best;
}

std::size_t run_scan_disagreements(std::uint64_t seed, std::size_t trials, std::size_t max_blocks) {
  Rng rng(seed);
  std::size_t bad = 0;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(max_blocks);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    const std::size_t bs = 1 + rng.uniform_index(4);
    PagedCachePool pool(bs, n, 1, 1, order);
    BlockTable table(bs);
    const std::size_t take = 1 + rng.uniform_index(n);
    allocate_blocks(pool, table, 0, take);
    table.at(0).filled = take * bs - rng.uniform_index(bs);

    const auto& phys = table.at(0).physical;
    const auto oracle = minimal_partition_oracle(phys);
    const auto runs = scan_contiguous_runs(table, 0);
    bool same = runs.size() == oracle.size();
    for (std::size_t i = 0; same && i < runs.size(); ++i) {
      same = runs[i].physical_start == phys[oracle[i].first] && runs[i].length == oracle[i].second;
    }
    if (!same) ++bad;
  }
  return bad;
}

CheckSuite parse_check_suite(std::string_view s) {
  if (s == "equivalence") return CheckSuite::kEquivalence;
  if (s == "census") return CheckSuite::kCensus;
  if (s == "kvcache") return CheckSuite::kKvcache;
  if (s == "cost") return CheckSuite::kCost;
  if (s == "all") return CheckSuite::kAll;
  throw Error(ErrorCode::kConfig, "unknown suite '" + std::string(s) + "'");
}

std::string_view to_string(CheckSuite s) {
  switch (s) {
    case CheckSuite::kEquivalence: return "equivalence";
    case CheckSuite::kCensus: return "census";
    case CheckSuite::kKvcache: return "kvcache";
    case CheckSuite::kCost: return "cost";
    case CheckSuite::kAll: return "all";
  }
  return "?";
}

bool CheckReport::ok() const { return failures() == 0; }

std::size_t CheckReport::failures() const {
  return static_cast<std::size_t>(
      std::count_if(properties.begin(), properties.end(), [](const PropertyResult& p) { return !p.passed; }));
}

namespace {

std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

std::string with_p(const std::string& name, std::size_t p) { return name + "[p=" + std::to_string(p) + "]"; }

std::string census_text(const CensusCounts& c) {
  return "attention " + std::to_string(c.attention_all_gather) + " AG + " + std::to_string(c.attention_reduce_sum) +
         " RS, mlp " + std::to_string(c.mlp_all_gather) + " AG + " + std::to_string(c.mlp_reduce_sum) + " RS";
}

class Runner {
 public:
  Runner(const RunConfig& rc, const CheckOptions& opt) : rc_(rc), opt_(opt) {}

  void add(const std::string& suite, const std::string& name, bool passed, std::string detail) {
    report_.properties.push_back({suite, name, passed, std::move(detail)});
  }

  // Runs `body`; a library error fails the property instead of aborting the suite.
  template <class F>
  void guarded(const std::string& suite, const std::string& name, F&& body) {
    try {
      body();
    } catch (const Error& e) {
      add(suite, name, false, e.what());
    }
  }

  void equivalence(const DecomposedModel& model, const DecompositionPlan& plan, const std::vector<DenseLayer>& dense,
                   const DenseMatrix& x) {
    for (std::size_t p : rc_.tp) {
      guarded("equivalence", with_p("latent_matches_base", p), [&] {
        const EquivalenceDiffs d = measure_equivalence(rc_.model, model, plan, p, x);
        add("equivalence", with_p("latent_matches_base", p), d.latent_vs_base <= opt_.tolerance,
            "rel " + sci(d.latent_vs_base));
        add("equivalence", with_p("latent_matches_oracle", p), d.latent_vs_oracle <= opt_.tolerance,
            "rel " + sci(d.latent_vs_oracle));
        add("equivalence", with_p("base_matches_oracle", p), d.base_vs_oracle <= opt_.tolerance,
            "rel " + sci(d.base_vs_oracle));
      });
      guarded("equivalence", with_p("lossless_matches_dense", p), [&] {
        const double worst = measure_lossless(rc_.model, dense, p, x);
        add("equivalence", with_p("lossless_matches_dense", p), worst <= opt_.tolerance, "rel " + sci(worst));
      });
    }
  }

  void census(const DecomposedModel& model, const DecompositionPlan& plan, const DenseMatrix& x) {
    for (std::size_t p : rc_.tp) {
      for (PipelineMode mode : {PipelineMode::kDense, PipelineMode::kBase, PipelineMode::kLatent}) {
        const std::string name = with_p("collectives_" + std::string(to_string(mode)), p);
        guarded("census", name, [&] {
          const CensusCounts got = measure_census(rc_.model, model, plan, mode, p, x);
          const CensusCounts want = expected_census(rc_.model, mode, p);
          add("census", name, got == want, census_text(got));
        });
      }
    }
    guarded("census", "attention_flops", [&] {
      const std::uint64_t base1 = measure_attention_flops(rc_.model, model, plan, PipelineMode::kBase, 1, x);
      const std::uint64_t lat1 = measure_attention_flops(rc_.model, model, plan, PipelineMode::kLatent, 1, x);
      for (std::size_t p : rc_.tp) {
        guarded("census", with_p("attention_flops_base", p), [&] {
          const auto b = measure_attention_flops(rc_.model, model, plan, PipelineMode::kBase, p, x);
          add("census", with_p("attention_flops_base", p), b == base1,
              std::to_string(b) + " / " + std::to_string(base1));
        });
        guarded("census", with_p("attention_flops_latent", p), [&] {
          const auto l = measure_attention_flops(rc_.model, model, plan, PipelineMode::kLatent, p, x);
          add("census", with_p("attention_flops_latent", p), l * p == lat1,
              std::to_string(l) + " / " + std::to_string(lat1));
        });
      }
    });
  }

  void kvcache(const DecomposedModel& model, const DecompositionPlan& plan) {
    CacheSettings cache = rc_.cache;
    if (!cache.scramble_seed) cache.scramble_seed = rc_.seed;
    for (std::size_t p : rc_.tp) {
      guarded("kvcache", with_p("decode", p), [&] {
        const DecodeFidelity f =
            measure_decode_fidelity(rc_.model, model, plan, p, cache, opt_.decode_steps, rc_.seed + p);
        add("kvcache", with_p("decode_logits", p), f.worst_logit_diff <= opt_.tolerance,
            std::to_string(f.steps) + " steps" + (f.blocks_scrambled ? " on scrambled blocks" : "") + ", rel " +
                sci(f.worst_logit_diff));
        add("kvcache", with_p("reconstruction", p), f.worst_reconstruction_diff <= opt_.reconstruction_tolerance,
            "max abs " + sci(f.worst_reconstruction_diff));
        add("kvcache", with_p("replay_allocations", p), f.replay_allocations == 0,
            std::to_string(f.replay_allocations) + " in " + std::to_string(f.replay_windows) + " windows");
        add("kvcache", with_p("replay_signatures", p), f.signatures_constant,
            f.signatures_constant ? "constant" : "drifted");
      });
    }
    const std::size_t bad = run_scan_disagreements(rc_.seed, opt_.permutation_trials, opt_.max_permutation_blocks);
    add("kvcache", "run_scan_minimal", bad == 0,
        std::to_string(bad) + " of " + std::to_string(opt_.permutation_trials) + " disagree");
  }

  void cost(const DecomposedModel& model, const DecompositionPlan& plan, const DenseMatrix& x) {
    guarded("cost", "convention_ordering", [&] {
      const CostInputs in = CostInputs::from_plan(rc_.model, plan);
      const auto tabulated = model_cost_report(in, CostConvention::kTabulated);
      const auto measured = model_cost_report(in, CostConvention::kPipelineMeasured);
      const bool ok = measured.latent.total() <= tabulated.latent.total() &&
                      tabulated.latent.total() <= tabulated.unoptimized.total();
      add("cost", "convention_ordering", ok,
          std::to_string(measured.latent.total()) + " <= " + std::to_string(tabulated.latent.total()) +
              " <= " + std::to_string(tabulated.unoptimized.total()));
    });
    for (std::size_t p : rc_.tp) {
      if (p < 2) continue;
      guarded("cost", with_p("ledger_latent", p), [&] {
        const CostInputs in = CostInputs::from_plan(rc_.model, plan);
        const auto report = model_cost_report(in, CostConvention::kPipelineMeasured);
        ParallelModel m(rc_.model, model, PipelineMode::kLatent, p, std::nullopt, &plan);
        const Reconciliation rec = compare_with_measured(report, CostStatus::kLatent, m.forward(x).trace.ledger);
        add("cost", with_p("ledger_latent", p), rec.ok(),
            rec.ok() ? std::to_string(rec.checked.size()) + " volumes exact" : rec.describe());
      });
      guarded("cost", with_p("ledger_base", p), [&] {
        const CostInputs in = CostInputs::from_plan(rc_.model, plan);
        const auto report = model_cost_report(in, CostConvention::kPipelineMeasured);
        ParallelModel m(rc_.model, model, PipelineMode::kBase, p);
        const Reconciliation rec =
            compare_with_measured(report, CostStatus::kUnoptimized, m.forward(x).trace.ledger);
        add("cost", with_p("ledger_base", p), rec.ok(),
            rec.ok() ? std::to_string(rec.checked.size()) + " volumes exact" : rec.describe());
      });
      guarded("cost", with_p("ledger_dense", p), [&] {
        ParallelModel m(rc_.model, model, PipelineMode::kDense, p);
        const TrafficLedger ledger = m.forward(x).trace.ledger;
        const auto got = ledger.per_token_volume(CollectiveKind::kReduceSum, 0, Sublayer::kAttention);
        add("cost", with_p("ledger_dense", p), got == 2 * rc_.model.hidden_dim,
            "attention reduce-sum " + std::to_string(got) + " per token");
      });
    }
  }

  CheckReport run(CheckSuite suite) {
    rc_.validate();
    const DecompositionPlan plan = rc_.plan();
    const std::vector<DenseLayer> dense = random_dense_model(rc_.model, rc_.seed);
    const DecomposedModel model = decompose_model(dense, plan);
    Rng rng(rc_.seed ^ 0x9e3779b97f4a7c15ull);
    const DenseMatrix x = rng.normal_matrix(opt_.tokens, rc_.model.hidden_dim);
    const bool all = suite == CheckSuite::kAll;
    if (all || suite == CheckSuite::kEquivalence) equivalence(model, plan, dense, x);
    if (all || suite == CheckSuite::kCensus) census(model, plan, x);
    if (all || suite == CheckSuite::kKvcache) kvcache(model, plan);
    if (all || suite == CheckSuite::kCost) cost(model, plan, x);
    return std::move(report_);
  }

 private:
  const RunConfig& rc_;
  const CheckOptions& opt_;
  CheckReport report_;
};

}  // namespace

CheckReport run_checks(const RunConfig& config, CheckSuite suite, const CheckOptions& options) {
  return Runner(config, options).run(suite);
}

}  // namespace lrtp
