#include "lrtp/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace lrtp {

using ojson = nlohmann::ordered_json;

OutputFormat parse_output_format(std::string_view s) {
  if (s == "table") return OutputFormat::kTable;
  if (s == "json") return OutputFormat::kJson;
  throw Error(ErrorCode::kConfig, "unknown format '" + std::string(s) + "'");
}

std::string format_thousands(std::uint64_t v) {
  std::string digits = std::to_string(v);
  std::string out;
  const std::size_t n = digits.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0 && (n - i) % 3 == 0) out.push_back(',');
    out.push_back(digits[i]);
  }
  return out;
}

int exit_code_for(const Error& e) {
  return e.code() == ErrorCode::kIo ? kExitIo : kExitInvalid;
}

namespace {

// The first `left` columns are left-aligned, the rest right-aligned.
class Table {
 public:
  Table(std::vector<std::string> header, std::size_t left) : left_(left) { rows_.push_back(std::move(header)); }
  void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }

  std::string str() const {
    std::vector<std::size_t> width(rows_.front().size(), 0);
    for (const auto& r : rows_) {
      for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
    }
    std::ostringstream os;
    for (const auto& r : rows_) {
      for (std::size_t c = 0; c < r.size(); ++c) {
        if (c > 0) os << "  ";
        if (c < left_) {
          os << std::left << std::setw(c + 1 == r.size() ? 0 : static_cast<int>(width[c])) << r[c];
        } else {
          os << std::right << std::setw(static_cast<int>(width[c])) << r[c];
        }
      }
      os << "\n";
    }
    return os.str();
  }

 private:
  std::size_t left_;
  std::vector<std::vector<std::string>> rows_;
};

std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

ojson ranks_json(const CostInputs& in) {
  ojson r;
  r["q"] = in.l_q;
  r["k"] = in.l_k;
  r["v"] = in.l_v;
  r["o"] = in.l_o;
  r["up"] = in.l_up;
  if (in.mlp_variant == MlpVariant::kGlu) r["gate"] = in.l_gate;
  r["down"] = in.l_down;
  return r;
}

ojson row_json(std::string_view convention, std::string_view sublayer, std::string_view status, std::uint64_t ag,
               std::uint64_t rs) {
  ojson j;
  j["convention"] = convention;
  j["sublayer"] = sublayer;
  j["status"] = status;
  j["all_gather"] = ag;
  j["reduce_sum"] = rs;
  j["total"] = ag + rs;
  return j;
}

ojson total_json(std::string_view convention, std::string_view status, const BlockCost& b, std::uint64_t layers,
                 std::uint64_t bytes) {
  ojson j;
  j["convention"] = convention;
  j["status"] = status;
  j["all_gather"] = b.all_gather;
  j["reduce_sum"] = b.reduce_sum;
  j["total"] = b.total();
  j["model_total"] = b.total() * layers;
  j["model_bytes"] = b.total() * layers * bytes;
  return j;
}

}  // namespace

std::string render_cost(const RunConfig& config, OutputFormat format) {
  config.validate();
  const CostInputs in = config.cost_inputs();
  const auto convs = conventions(config.convention);
  std::vector<CostReport> reports;
  for (CostConvention c : convs) reports.push_back(model_cost_report(in, c));
  const CostReport& any = reports.front();
  const std::uint64_t bytes = config.bytes_per_element;

  if (format == OutputFormat::kJson) {
    ojson j;
    j["command"] = "cost";
    ojson inputs;
    inputs["h"] = in.h;
    inputs["h_kv"] = in.h_kv;
    inputs["m"] = in.m;
    inputs["mlp"] = to_string(in.mlp_variant);
    inputs["ranks"] = ranks_json(in);
    inputs["num_layers"] = in.num_layers;
    inputs["bytes_per_element"] = bytes;
    j["inputs"] = inputs;
    ojson rows = ojson::array();
    ojson totals = ojson::array();
    ojson saved = ojson::object();
    for (const auto& r : reports) {
      const auto conv = to_string(r.convention);
      for (const auto& row : r.rows) {
        rows.push_back(row_json(conv, to_string(row.layer), to_string(row.status), row.all_gather, row.reduce_sum));
      }
      totals.push_back(total_json(conv, "unoptimized", r.unoptimized, in.num_layers, bytes));
      totals.push_back(total_json(conv, "latent", r.latent, in.num_layers, bytes));
      saved[std::string(conv)] = r.saved.rounded_percent();
    }
    totals.push_back(total_json("compatibility", "latent", any.compatibility_aggregate, in.num_layers, bytes));
    saved["compatibility"] = any.compatibility_saved.rounded_percent();
    j["rows"] = rows;
    j["totals"] = totals;
    j["saved_percent"] = saved;
    return j.dump(2) + "\n";
  }

  std::ostringstream os;
  os << "communication per token per block (elements)\n";
  os << "h=" << in.h << " h_kv=" << in.h_kv << " m=" << in.m << " mlp=" << to_string(in.mlp_variant)
     << " layers=" << in.num_layers << "\n";
  os << "ranks: q=" << in.l_q << " k=" << in.l_k << " v=" << in.l_v << " o=" << in.l_o << " up=" << in.l_up;
  if (in.mlp_variant == MlpVariant::kGlu) os << " gate=" << in.l_gate;
  os << " down=" << in.l_down << "\n";
  for (const auto& r : reports) {
    os << "\nconvention: " << to_string(r.convention) << "\n";
    Table t({"sub-layer", "status", "all-gather", "reduce-sum", "total"}, 2);
    for (const auto& row : r.rows) {
      t.add({std::string(to_string(row.layer)), std::string(to_string(row.status)), format_thousands(row.all_gather),
             format_thousands(row.reduce_sum), format_thousands(row.total())});
    }
    t.add({"block", "unoptimized", format_thousands(r.unoptimized.all_gather),
           format_thousands(r.unoptimized.reduce_sum), format_thousands(r.unoptimized.total())});
    t.add({"block", "latent", format_thousands(r.latent.all_gather), format_thousands(r.latent.reduce_sum),
           format_thousands(r.latent.total())});
    os << t.str();
    os << "saved: " << r.saved.rounded_percent() << "% (" << format_thousands(r.saved.saved) << " / "
       << format_thousands(r.saved.base) << ")\n";
    os << "model: " << format_thousands(r.model_unoptimized) << " -> " << format_thousands(r.model_latent)
       << " elements per token, " << format_thousands(r.model_unoptimized * bytes) << " -> "
       << format_thousands(r.model_latent * bytes) << " bytes at " << bytes << " B/element\n";
  }
  const BlockCost& c = any.compatibility_aggregate;
  os << "\ncompatibility aggregate (one 2h reduce-sum per block): " << format_thousands(c.all_gather) << " + "
     << format_thousands(c.reduce_sum) << " = " << format_thousands(c.total()) << ", saved "
     << any.compatibility_saved.rounded_percent() << "%\n";
  return os.str();
}

std::string render_check(const RunConfig& config, CheckSuite suite, const CheckReport& report, OutputFormat format) {
  if (format == OutputFormat::kJson) {
    ojson j;
    j["command"] = "check";
    j["suite"] = to_string(suite);
    j["seed"] = config.seed;
    j["tp"] = config.tp;
    ojson props = ojson::array();
    for (const auto& p : report.properties) {
      ojson e;
      e["suite"] = p.suite;
      e["name"] = p.name;
      e["passed"] = p.passed;
      e["detail"] = p.detail;
      props.push_back(e);
    }
    j["properties"] = props;
    j["passed"] = report.ok();
    j["failures"] = report.failures();
    return j.dump(2) + "\n";
  }
  std::ostringstream os;
  os << "check " << to_string(suite) << ", seed " << config.seed << "\n";
  Table t({"suite", "property", "result", "detail"}, 4);
  for (const auto& p : report.properties) t.add({p.suite, p.name, p.passed ? "PASS" : "FAIL", p.detail});
  os << t.str();
  os << report.properties.size() - report.failures() << " passed, " << report.failures() << " failed\n";
  return os.str();
}

DecomposeReport decompose_archive(const WeightArchive& input, const ModelConfig& config,
                                  const DecompositionPlan& plan) {
  const std::vector<DenseLayer> dense = dense_from_archive(input, config);
  const DecomposedModel model = decompose_model(dense, plan);
  DecomposeReport report;
  report.output = archive_factors(model.layers);
  for (std::size_t i = 0; i < dense.size(); ++i) {
    for (const auto& [m, w] : dense[i]) {
      const FactorPair& f = model.layers[i].at(m);
      const double norm = std::max(frobenius_norm(w), 1e-300);
      const SvdResult svd = thin_svd(w);
      double tail = 0.0;
      for (std::size_t s = f.rank(); s < svd.singular_values.size(); ++s) {
        tail += svd.singular_values[s] * svd.singular_values[s];
      }
      report.entries.push_back({tensor_name(i, m), w.rows(), w.cols(), f.rank(),
                                relative_frobenius_diff(f.product(), w), std::sqrt(tail) / norm});
    }
  }
  return report;
}

std::string render_decompose(const DecomposeReport& report, OutputFormat format) {
  if (format == OutputFormat::kJson) {
    ojson j;
    j["command"] = "decompose";
    ojson rows = ojson::array();
    for (const auto& e : report.entries) {
      ojson r;
      r["name"] = e.name;
      r["d_in"] = e.d_in;
      r["d_out"] = e.d_out;
      r["rank"] = e.rank;
      r["relative_error"] = e.relative_error;
      r["tail_energy_relative"] = e.tail_energy_relative;
      rows.push_back(r);
    }
    j["rows"] = rows;
    return j.dump(2) + "\n";
  }
  Table t({"tensor", "shape", "rank", "rel. error", "tail energy"}, 2);
  for (const auto& e : report.entries) {
    t.add({e.name, std::to_string(e.d_in) + "x" + std::to_string(e.d_out), std::to_string(e.rank),
           sci(e.relative_error), sci(e.tail_energy_relative)});
  }
  return t.str();
}

BenchReport run_bench(const RunConfig& config, const BenchOptions& options) {
  config.validate();
  if (options.batch == 0 || options.prefill == 0) throw Error(ErrorCode::kConfig, "batch and prefill must be positive");
  const DecompositionPlan plan = config.plan();
  const std::vector<DenseLayer> dense = random_dense_model(config.model, config.seed);
  const DecomposedModel model = decompose_model(dense, plan);

  // Enough pool and buffer room for the whole run.
  CacheSettings cache = config.cache;
  const std::size_t per_seq = options.prefill + options.decode;
  cache.max_tokens = std::max(cache.max_tokens, options.batch * per_seq);
  cache.num_blocks =
      std::max(cache.num_blocks, options.batch * ((per_seq + cache.block_size - 1) / cache.block_size));
  cache.max_sequences = std::max(cache.max_sequences, options.batch);

  ParallelModel runner(config.model, model, options.mode, options.world_size, cache, &plan);
  BenchReport report;
  report.options = options;
  report.seed = config.seed;
  report.bytes_per_element = config.bytes_per_element;
  report.attention_flops.assign(options.world_size, 0);
  report.matmul_flops.assign(options.world_size, 0);

  Rng rng(config.seed ^ 0xb5ad4eceda1ce2a9ull);
  TrafficLedger ledger;
  auto step = [&](const std::string& phase, std::size_t rows_per_seq) {
    std::vector<QueryChunk> batch;
    for (std::size_t s = 0; s < options.batch; ++s) batch.push_back({s, rows_per_seq});
    const DenseMatrix x = rng.normal_matrix(options.batch * rows_per_seq, config.model.hidden_dim);
    const auto t0 = std::chrono::steady_clock::now();
    const ForwardResult r = runner.decode_step(x, batch);
    const auto t1 = std::chrono::steady_clock::now();
    report.steps.push_back({phase, x.rows(), std::chrono::duration<double, std::milli>(t1 - t0).count()});
    report.total_tokens += x.rows();
    for (std::size_t w = 0; w < options.world_size; ++w) {
      report.attention_flops[w] += r.trace.attention_flops[w];
      report.matmul_flops[w] += r.trace.matmul_flops[w];
    }
    for (const auto& rec : r.trace.ledger.records()) ledger.record(rec);
    return r.trace.ledger;
  };

  const TrafficLedger prefill = step("prefill", options.prefill);
  for (std::size_t d = 0; d < options.decode; ++d) step("decode", 1);

  for (const auto& rec : ledger.records()) {
    const std::uint64_t v = rec.per_token_volume * rec.tokens;
    (rec.kind == CollectiveKind::kAllGather ? report.all_gather_elements : report.reduce_sum_elements) += v;
  }

  if (options.world_size >= 2 && options.mode != PipelineMode::kDense) {
    const auto cost = model_cost_report(CostInputs::from_plan(config.model, plan), CostConvention::kPipelineMeasured);
    const CostStatus status = options.mode == PipelineMode::kLatent ? CostStatus::kLatent : CostStatus::kUnoptimized;
    report.cost_model_checked = true;
    report.cost_model_match = compare_with_measured(cost, status, prefill, options.batch * options.prefill).ok();
  }
  return report;
}

std::string render_bench(const BenchReport& report, OutputFormat format) {
  const auto& o = report.options;
  const std::uint64_t total = report.all_gather_elements + report.reduce_sum_elements;
  if (format == OutputFormat::kJson) {
    ojson j;
    j["command"] = "bench";
    j["pipeline"] = to_string(o.mode);
    j["tp"] = o.world_size;
    j["batch"] = o.batch;
    j["prefill"] = o.prefill;
    j["decode"] = o.decode;
    j["seed"] = report.seed;
    j["total_tokens"] = report.total_tokens;
    ojson ledger;
    ledger["all_gather_elements"] = report.all_gather_elements;
    ledger["reduce_sum_elements"] = report.reduce_sum_elements;
    ledger["total_elements"] = total;
    ledger["total_bytes"] = total * report.bytes_per_element;
    j["ledger"] = ledger;
    j["attention_flops"] = report.attention_flops;
    j["matmul_flops"] = report.matmul_flops;
    if (report.cost_model_checked) j["cost_model_match"] = report.cost_model_match;
    ojson steps = ojson::array();
    for (const auto& s : report.steps) {
      ojson e;
      e["phase"] = s.phase;
      e["tokens"] = s.tokens;
      e["wall_ms"] = s.wall_ms;
      steps.push_back(e);
    }
    j["steps"] = steps;
    return j.dump(2) + "\n";
  }
  std::ostringstream os;
  os << "bench " << to_string(o.mode) << " tp=" << o.world_size << " batch=" << o.batch << " prefill=" << o.prefill
     << " decode=" << o.decode << " seed=" << report.seed << "\n";
  Table t({"step", "phase", "tokens", "wall ms"}, 0);
  for (std::size_t i = 0; i < report.steps.size(); ++i) {
    std::ostringstream ms;
    ms << std::fixed << std::setprecision(3) << report.steps[i].wall_ms;
    t.add({std::to_string(i), report.steps[i].phase, std::to_string(report.steps[i].tokens), ms.str()});
  }
  os << t.str();
  os << "tokens: " << report.total_tokens << "\n";
  os << "ledger: all-gather " << format_thousands(report.all_gather_elements) << ", reduce-sum "
     << format_thousands(report.reduce_sum_elements) << ", total " << format_thousands(total) << " elements ("
     << format_thousands(total * report.bytes_per_element) << " bytes)\n";
  Table w({"worker", "attention flops", "matmul flops"}, 0);
  for (std::size_t r = 0; r < report.attention_flops.size(); ++r) {
    w.add({std::to_string(r), format_thousands(report.attention_flops[r]), format_thousands(report.matmul_flops[r])});
  }
  os << w.str();
  if (report.cost_model_checked) {
    os << "prefill ledger vs cost model: " << (report.cost_model_match ? "match" : "MISMATCH") << "\n";
  }
  return os.str();
}

WeightArchive synth_archive(const ModelConfig& config, std::uint64_t seed) {
  return archive_dense(random_dense_model(config, seed));
}

}  // namespace lrtp
