#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lrtp/commands.hpp"

namespace {

struct Common {
  std::string config_path;
  std::string ranks_path;
  std::vector<std::size_t> tp;
  std::optional<std::uint64_t> seed;
  std::string convention;
  std::string format = "table";
  std::string out_path;
};

void add_common(CLI::App* cmd, Common& c, bool need_config) {
  auto* opt = cmd->add_option("--config", c.config_path, "run config (JSON)");
  if (need_config) opt->required();
  cmd->add_option("--ranks", c.ranks_path, "explicit ranks file (JSON), overrides the config plan");
  cmd->add_option("--tp", c.tp, "tensor-parallel degrees, comma separated")->delimiter(',');
  cmd->add_option("--seed", c.seed, "seed for synthetic weights and inputs");
  cmd->add_option("--convention", c.convention, "cost convention")
      ->check(CLI::IsMember({"tabulated", "measured", "both"}));
  cmd->add_option("--format", c.format, "output format")->check(CLI::IsMember({"table", "json"}));
  cmd->add_option("--out", c.out_path, "write the report here instead of stdout");
}

lrtp::RunConfig load_config(const Common& c) {
  lrtp::RunConfig rc = lrtp::RunConfig::load(c.config_path);
  if (!c.ranks_path.empty()) rc.ranks = lrtp::load_ranks(c.ranks_path);
  if (!c.tp.empty()) rc.tp = c.tp;
  if (c.seed) rc.seed = *c.seed;
  if (!c.convention.empty()) rc.convention = lrtp::parse_convention_selection(c.convention);
  rc.validate();
  return rc;
}

void emit(const Common& c, const std::string& text) {
  if (c.out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(c.out_path, std::ios::trunc);
  if (!f) throw lrtp::Error(lrtp::ErrorCode::kIo, "cannot write " + c.out_path);
  f << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank tensor-parallel inference toolkit"};
  app.require_subcommand(1);

  Common common;

  auto* cost = app.add_subcommand("cost", "per-token communication cost report");
  add_common(cost, common, true);

  std::string suite = "all";
  auto* check = app.add_subcommand("check", "run property suites");
  add_common(check, common, true);
  check->add_option("--suite", suite, "suite to run")
      ->check(CLI::IsMember({"equivalence", "census", "kvcache", "cost", "all"}));

  std::string in_archive, out_archive;
  std::optional<double> ratio;
  auto* decompose = app.add_subcommand("decompose", "factor an archive of dense weights");
  add_common(decompose, common, true);
  decompose->add_option("input", in_archive, "dense weight archive")->required();
  decompose->add_option("output", out_archive, "factor archive to write")->required();
  decompose->add_option("--ratio", ratio, "compression ratio, overrides the config plan");

  std::string pipeline = "latent";
  lrtp::BenchOptions bench_opts;
  auto* bench = app.add_subcommand("bench", "desk-scale prefill and decode run");
  add_common(bench, common, true);
  bench->add_option("--pipeline", pipeline, "dense, base or latent (alias deinfer)")
      ->check(CLI::IsMember({"dense", "base", "latent", "deinfer"}));
  bench->add_option("--batch", bench_opts.batch, "sequences per step");
  bench->add_option("--prefill", bench_opts.prefill, "prefill tokens per sequence");
  bench->add_option("--decode", bench_opts.decode, "decode steps");

  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "write a seeded random dense archive");
  add_common(synth, common, true);
  synth->add_option("output", synth_out, "archive to write")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? lrtp::kExitOk : lrtp::kExitUsage;
  }

  try {
    const lrtp::RunConfig rc = load_config(common);
    const lrtp::OutputFormat format = lrtp::parse_output_format(common.format);

    if (*cost) {
      emit(common, lrtp::render_cost(rc, format));
      return lrtp::kExitOk;
    }
    if (*check) {
      const auto s = lrtp::parse_check_suite(suite);
      const lrtp::CheckReport report = lrtp::run_checks(rc, s);
      emit(common, lrtp::render_check(rc, s, report, format));
      return report.ok() ? lrtp::kExitOk : lrtp::kExitCheckFailed;
    }
    if (*decompose) {
      lrtp::RunConfig plan_rc = rc;
      if (ratio) {
        plan_rc.ranks.clear();
        plan_rc.ratio = *ratio;
      }
      const auto input = lrtp::WeightArchive::read(in_archive);
      const auto report = lrtp::decompose_archive(input, rc.model, plan_rc.plan());
      report.output.write(out_archive);
      emit(common, lrtp::render_decompose(report, format));
      return lrtp::kExitOk;
    }
    if (*bench) {
      bench_opts.mode = lrtp::parse_pipeline_mode(pipeline);
      std::string text;
      for (std::size_t p : rc.tp) {
        bench_opts.world_size = p;
        text += lrtp::render_bench(lrtp::run_bench(rc, bench_opts), format);
      }
      emit(common, text);
      return lrtp::kExitOk;
    }
    if (*synth) {
      lrtp::synth_archive(rc.model, rc.seed).write(synth_out);
      emit(common, "wrote " + synth_out + " (seed " + std::to_string(rc.seed) + ")\n");
      return lrtp::kExitOk;
    }
  } catch (const lrtp::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return lrtp::exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return lrtp::kExitInvalid;
  }
  return lrtp::kExitUsage;
}
