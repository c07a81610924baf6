// admn: generate data, run the three training stages, evaluate and report.
//
// Exit codes: 0 ok, 2 config error, 3 missing upstream artifact, 4 invariant
// violation, 1 anything else.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "admn/errors.hpp"
#include "admn/pipeline.hpp"

namespace {

using namespace admn;

struct Args {
  std::string config;
  std::string out = "runs/toy";
  std::vector<std::uint64_t> seeds;
  std::vector<std::size_t> budgets;
  std::string mode;
  std::vector<std::string> providers;
  std::optional<std::size_t> stop_after;
  bool quiet = false;
};

std::size_t threads_from_env() {
  const char* v = std::getenv("ADMN_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end || n < 1) throw ConfigError("ADMN_THREADS must be a positive integer, got '" + std::string(v) + "'");
  return static_cast<std::size_t>(n);
}

void print_final(const std::string& what, const std::vector<LossRow>& rows) {
  if (rows.empty()) {
    std::cout << what << ": nothing to do\n";
    return;
  }
  const auto& r = rows.back();
  std::cout << what << ": epoch " << r.epoch << " train " << r.train << " val " << r.val << '\n';
}

int run(const std::string& cmd, const Args& a) {
  RunConfig cfg = load_run_config(a.config);
  if (!a.budgets.empty()) cfg.budgets = a.budgets;
  if (cmd != "pretrain" && cmd != "finetune" && !a.seeds.empty()) cfg.seeds = a.seeds;
  cfg.validate();
  const Layout layout{a.out};
  TrainOptions opts;
  opts.stop_after = a.stop_after;
  opts.verbose = !a.quiet;

  if (cmd == "generate") {
    const auto ds = run_generate(cfg, layout);
    std::cout << "dataset: " << ds.train.size() << " train, " << ds.val.size() << " val, " << ds.test.size()
              << " test -> " << layout.data().string() << '\n';
  } else if (cmd == "pretrain" || cmd == "finetune") {
    const std::uint64_t seed = a.seeds.empty() ? cfg.model_seed : a.seeds.front();
    if (a.seeds.size() > 1) throw ConfigError("--seed: " + cmd + " takes a single seed");
    const auto rows = cmd == "pretrain" ? run_pretrain(cfg, layout, seed, opts) : run_finetune(cfg, layout, seed, opts);
    print_final(cmd, rows);
  } else if (cmd == "train-controller") {
    const ControllerMode mode = a.mode.empty() ? cfg.mode : parse_controller_mode(a.mode);
    for (auto L : cfg.budgets)
      for (auto seed : cfg.seeds) {
        const auto rows = run_train_controller(cfg, layout, L, mode, seed, opts);
        print_final("controller " + to_string(mode) + " L=" + std::to_string(L) + " seed " + std::to_string(seed), rows);
      }
  } else if (cmd == "eval" || cmd == "report") {
    const auto providers = a.providers.empty() ? provider_names() : a.providers;
    std::vector<CellResult> cells;
    if (cmd == "eval") {
      cells = run_eval(cfg, layout, providers, threads_from_env());
    } else {
      for (const auto& c : read_cells_csv(layout.eval() / "cells.csv"))
        for (const auto& p : providers)
          if (c.provider == p) cells.push_back(c);
    }
    write_eval_outputs(cfg, layout, cells, providers);
    write_table(std::cout, summarize(cells, providers, cfg.budgets), providers, cfg.budgets);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive layer allocation over a LayerDrop-trained multimodal network"};
  app.require_subcommand(1);
  Args a;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", a.config, "run configuration (INI)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", a.out, "artifact root")->capture_default_str();
    sub->add_flag("--quiet", a.quiet, "no per-epoch lines");
  };
  auto* gen = app.add_subcommand("generate", "synthesize the dataset");
  add_common(gen);
  for (const char* name : {"pretrain", "finetune"}) {
    auto* sub = app.add_subcommand(name, std::string(name) == "pretrain" ? "Stage 0 masked-autoencoder pretraining"
                                                                        : "Stage 1 LayerDrop finetuning");
    add_common(sub);
    sub->add_option("--seed", a.seeds, "model seed (default: model.seed)");
    sub->add_option("--stop-after", a.stop_after, "stop after this many epochs (resume later)");
  }
  auto* ctl = app.add_subcommand("train-controller", "train one controller per (budget, seed)");
  add_common(ctl);
  ctl->add_option("--budget", a.budgets, "budget(s) L (default: eval.budgets)")->delimiter(',');
  ctl->add_option("--seed", a.seeds, "controller seed(s) (default: eval.seeds)")->delimiter(',');
  ctl->add_option("--mode", a.mode, "corruption_supervised | autoencoder | task_only | plain_st");
  ctl->add_option("--stop-after", a.stop_after, "stop after this many epochs (resume later)");
  for (const char* name : {"eval", "report"}) {
    auto* sub = app.add_subcommand(name, std::string(name) == "eval" ? "evaluate providers over budgets and seeds"
                                                                     : "rebuild tables from saved results");
    add_common(sub);
    sub->add_option("--budget", a.budgets, "budget(s) L (default: eval.budgets)")->delimiter(',');
    sub->add_option("--seed", a.seeds, "seed(s) (default: eval.seeds)")->delimiter(',');
    sub->add_option("--providers", a.providers, "comma-separated provider names")->delimiter(',');
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    return run(cmd, a);
  } catch (const admn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const admn::BudgetError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const admn::MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return 3;
  } catch (const admn::InvariantError& e) {
    std::cerr << "invariant violated: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
