#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "admn/errors.hpp"
#include "admn/pipeline.hpp"
#include "doctest.h"

using namespace admn;
namespace fs = std::filesystem;

namespace {

// Small enough for a few seconds per stage.
const char* kTinyConfig = R"(# tiny run
[data]
mode = gaussian
values_a = 0, 1, 2, 3
values_b = 0, 0.5, 1.0, 1.5
samples = 120
seed = 11

[model]
task = regress
fusion_layers = 1
; a ';' comment is fine too
seed = 5

[pretrain]
epochs = 2
batch = 16

[finetune]
epochs = 4
lr = 1e-3
batch = 8

[controller]
downsample = 2
epochs = 2
batch = 8
ae_epochs = 2

[eval]
budgets = 3, 4, 6
seeds = 1, 2
)";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("admn_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path write_config(const fs::path& dir, const std::string& text, const std::string& name = "run.ini") {
  std::ofstream(dir / name) << text;
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Relative path -> bytes for every regular file under `root`.
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

struct Run {
  int code;
  std::string output;
};

Run cli(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "cli.log";
  const std::string cmd = std::string(ADMN_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

RunConfig tiny() {
  std::istringstream in(kTinyConfig);
  return parse_run_config(in);
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
  const auto at = s.find(from);
  REQUIRE(at != std::string::npos);
  return s.replace(at, from.size(), to);
}

}  // namespace

TEST_CASE("config parsing") {
  const auto cfg = tiny();
  CHECK(cfg.samples == 120);
  CHECK(cfg.data_seed == 11);
  CHECK(cfg.corruption.values[1] == std::vector<double>{0, 0.5, 1.0, 1.5});
  CHECK(cfg.model.fusion_layers == 1);
  CHECK(cfg.model_seed == 5);
  CHECK(cfg.controller.downsample == 2);
  CHECK(cfg.controller.corruption_outputs == 2);
  CHECK(cfg.budgets == std::vector<std::size_t>{3, 4, 6});
  CHECK(cfg.seeds == std::vector<std::uint64_t>{1, 2});
  // unset keys keep their defaults
  CHECK(cfg.finetune.lr == 1e-3);
  CHECK(cfg.pretrain.lr == 1e-3);
  CHECK(cfg.mode == ControllerMode::corruption_supervised);
  CHECK_FALSE(cfg.controller_train.linear_decay);
  CHECK(cfg.finetune.lr_at(7, 3) == 1e-3);

  auto expect_error = [](const std::string& text, const std::string& needle) {
    std::istringstream in(text);
    try {
      parse_run_config(in);
      FAIL("expected a ConfigError mentioning " << needle);
    } catch (const ConfigError& e) {
      INFO(e.what());
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  expect_error(replace(kTinyConfig, "samples = 120\n", ""), "data.samples");
  expect_error(replace(kTinyConfig, "task = regress", "task = segment"), "model.task");
  expect_error(replace(kTinyConfig, "seed = 11", "seed = eleven"), "data.seed");
  expect_error(replace(kTinyConfig, "epochs = 4", "epochs = -4"), "finetune.epochs");
  expect_error(replace(kTinyConfig, "downsample = 2", "downsamples = 2"), "controller.downsamples");
  expect_error(replace(kTinyConfig, "budgets = 3, 4, 6", "budgets = 3, 1"), "eval.budgets");
  expect_error(replace(kTinyConfig, "budgets = 3, 4, 6", "budgets = 3, 11"), "eval.budgets");
  expect_error(replace(kTinyConfig, "ae_epochs = 2", "ae_epochs = 2\nae_schedule = cosine"), "controller.ae_schedule");

  std::istringstream sched(replace(kTinyConfig, "ae_epochs = 2", "ae_epochs = 2\nschedule = linear\nae_schedule = linear"));
  const auto c1 = parse_run_config(sched);
  CHECK(c1.controller_train.linear_decay);
  CHECK(c1.autoencoder.linear_decay);
  CHECK_FALSE(c1.finetune.linear_decay);
  // 2 epochs x 4 steps: step 0 at full rate, halfway at half
  CHECK(c1.controller_train.lr_at(0, 4) == doctest::Approx(1e-3));
  CHECK(c1.controller_train.lr_at(4, 4) == doctest::Approx(0.5e-3));

  std::istringstream cls(replace(replace(kTinyConfig, "task = regress", "task = classify"), "downsample = 2",
                                 "downsample = 2\nhead = categorical"));
  const auto c2 = parse_run_config(cls);
  CHECK(c2.model.outputs == 8);
  CHECK(c2.controller.corruption_outputs == 16);
}

TEST_CASE("generate writes three splits and is byte-identical on rerun") {
  const auto dir = scratch("generate");
  const auto cfg = write_config(dir, kTinyConfig);
  auto r = cli("generate --config " + cfg.string() + " --out " + (dir / "a").string(), dir);
  REQUIRE(r.code == 0);
  for (const char* f : {"manifest.txt", "descriptors.csv", "train_m0.admt", "val_m1.admt", "test_z.admt"})
    CHECK(fs::exists(dir / "a" / "data" / f));
  const auto ds = synth::load_dataset(dir / "a" / "data");
  CHECK(ds.train.size() + ds.val.size() + ds.test.size() == 120);
  CHECK(!ds.val.empty());
  CHECK(!ds.test.empty());
  REQUIRE(cli("generate --config " + cfg.string() + " --out " + (dir / "b").string(), dir).code == 0);
  CHECK(snapshot(dir / "a") == snapshot(dir / "b"));
}

TEST_CASE("exit codes") {
  const auto dir = scratch("exit");
  const auto good = write_config(dir, kTinyConfig);
  const std::string out = " --out " + (dir / "run").string();

  SUBCASE("missing field is a named config error") {
    const auto bad = write_config(dir, replace(kTinyConfig, "mode = gaussian\n", ""), "bad.ini");
    const auto r = cli("generate --config " + bad.string() + out, dir);
    CHECK(r.code == 2);
    CHECK(r.output.find("data.mode") != std::string::npos);
  }
  SUBCASE("bad command line") {
    CHECK(cli("generate", dir).code == 2);
    CHECK(cli("train-controller --config " + good.string() + out + " --mode greedy", dir).code == 2);
  }
  SUBCASE("missing upstream artifacts") {
    auto r = cli("pretrain --config " + good.string() + out, dir);
    CHECK(r.code == 3);
    CHECK(r.output.find("dataset") != std::string::npos);
    REQUIRE(cli("generate --config " + good.string() + out, dir).code == 0);
    r = cli("finetune --config " + good.string() + out, dir);
    CHECK(r.code == 3);
    CHECK(r.output.find("Stage 0") != std::string::npos);
    r = cli("train-controller --config " + good.string() + out + " --budget 3", dir);
    CHECK(r.code == 3);
    CHECK(r.output.find("Stage 1") != std::string::npos);
    CHECK(cli("report --config " + good.string() + out, dir).code == 3);
  }
  SUBCASE("dataset from a different config") {
    REQUIRE(cli("generate --config " + good.string() + out, dir).code == 0);
    const auto other = write_config(dir, replace(kTinyConfig, "seed = 11", "seed = 12"), "other.ini");
    CHECK(cli("pretrain --config " + other.string() + out, dir).code == 2);
  }
}

TEST_CASE("pipeline end to end on a tiny config") {
  const auto dir = scratch("pipeline");
  const auto cfg = tiny();
  const Layout layout{dir / "run"};
  run_generate(cfg, layout);
  const auto pre = run_pretrain(cfg, layout, cfg.model_seed);
  CHECK(pre.size() == cfg.pretrain.epochs);
  CHECK(fs::exists(layout.pretrain(cfg.model_seed) / "checkpoint" / "manifest.txt"));

  SUBCASE("finetune validation error falls") {
    auto long_cfg = cfg;
    long_cfg.finetune.epochs = 8;
    const auto rows = run_finetune(long_cfg, layout, cfg.model_seed);
    REQUIRE(rows.size() == 8);
    CHECK(rows.back().val < rows.front().val);
    const auto on_disk = read_loss_csv(layout.finetune(cfg.model_seed) / "loss.csv");
    CHECK(on_disk.size() == 8);
    CHECK(on_disk.back().val == doctest::Approx(rows.back().val).epsilon(1e-9));
  }

  SUBCASE("interrupted and resumed stages match uninterrupted runs") {
    const Layout other{dir / "other"};
    fs::create_directories(other.pretrain(cfg.model_seed).parent_path());
    fs::copy(layout.data(), other.data(), fs::copy_options::recursive);
    fs::copy(layout.pretrain(cfg.model_seed), other.pretrain(cfg.model_seed), fs::copy_options::recursive);

    run_finetune(cfg, layout, cfg.model_seed);
    TrainOptions stop;
    stop.stop_after = 1;
    CHECK(run_finetune(cfg, other, cfg.model_seed, stop).size() == 1);
    CHECK_FALSE(fs::exists(other.finetune(cfg.model_seed) / "checkpoint"));
    stop.stop_after = 3;
    CHECK(run_finetune(cfg, other, cfg.model_seed, stop).size() == 3);
    run_finetune(cfg, other, cfg.model_seed);
    CHECK(snapshot(layout.finetune(cfg.model_seed) / "checkpoint") ==
          snapshot(other.finetune(cfg.model_seed) / "checkpoint"));
    CHECK(slurp(layout.finetune(cfg.model_seed) / "loss.csv") == slurp(other.finetune(cfg.model_seed) / "loss.csv"));

    for (auto mode : {ControllerMode::corruption_supervised, ControllerMode::autoencoder}) {
      INFO(to_string(mode));
      run_train_controller(cfg, layout, 4, mode, 1);
      stop.stop_after = mode == ControllerMode::autoencoder ? 3 : 1;  // inside the controller phase for AE
      run_train_controller(cfg, other, 4, mode, 1, stop);
      run_train_controller(cfg, other, 4, mode, 1);
      const auto a = layout.controller(mode, 4, 1), b = other.controller(mode, 4, 1);
      CHECK(snapshot(a / "checkpoint") == snapshot(b / "checkpoint"));
      CHECK(slurp(a / "loss.csv") == slurp(b / "loss.csv"));
      CHECK(slurp(a / "latent.csv") == slurp(b / "latent.csv"));
    }
    const auto ae = read_loss_csv(layout.controller(ControllerMode::autoencoder, 4, 1) / "loss.csv");
    REQUIRE(ae.size() == cfg.autoencoder.epochs + cfg.controller_train.epochs);
    CHECK(ae.front().phase == "ae_pretrain");
    CHECK(ae.back().phase == "autoencoder");
  }

  SUBCASE("eval sweep, table and determinism") {
    run_finetune(cfg, layout, cfg.model_seed);
    for (auto L : cfg.budgets)
      for (auto s : cfg.seeds) run_train_controller(cfg, layout, L, ControllerMode::corruption_supervised, s);
    const std::vector<std::string> providers{"ADMN", "Naive", "Unimodal-A", "Unimodal-B", "Upper Bound"};
    const auto cells = run_eval(cfg, layout, providers, 1);
    CHECK(cells.size() == providers.size() * cfg.budgets.size() * cfg.seeds.size());
    write_eval_outputs(cfg, layout, cells, providers);
    const auto first = snapshot(layout.eval());

    const auto summary = summarize(cells, providers, cfg.budgets);
    std::map<std::string, std::vector<const SummaryRow*>> by;
    for (const auto& r : summary) by[r.provider].push_back(&r);
    // Upper Bound ignores the budget.
    for (const auto* r : by["Upper Bound"]) CHECK(r->mean == by["Upper Bound"].front()->mean);
    // L = 6 would need 5 layers in one 4-layer backbone.
    for (const char* p : {"Unimodal-A", "Unimodal-B"})
      for (const auto* r : by[p]) CHECK(r->feasible == (r->budget != 6));
    for (const auto& r : summary)
      if (r.feasible) {
        CHECK(r.rank >= 1);
        CHECK(r.seeds == 2);
      }

    std::ostringstream table;
    write_table(table, summary, providers, cfg.budgets);
    const std::string t = table.str();
    CHECK(t.find("provider") == 0);
    CHECK(t.find("±") != std::string::npos);
    CHECK(t.find("(#1)") != std::string::npos);
    CHECK(t.find("—") != std::string::npos);
    CHECK(slurp(layout.eval() / "table.txt") == t);
    CHECK(fs::exists(layout.eval() / "plans" / "ADMN_L3_seed1.csv"));
    CHECK(slurp(layout.eval() / "metrics.csv").rfind("split,budget,provider,seed,metric\n", 0) == 0);

    // More workers, same bytes.
    const auto again = run_eval(cfg, layout, providers, 3);
    write_eval_outputs(cfg, layout, again, providers);
    CHECK(snapshot(layout.eval()) == first);

    const auto back = read_cells_csv(layout.eval() / "cells.csv");
    REQUIRE(back.size() == cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      CHECK(back[i].provider == cells[i].provider);
      CHECK(back[i].feasible == cells[i].feasible);
      CHECK(back[i].metric == doctest::Approx(cells[i].metric).epsilon(1e-9));
    }

    // A controller that was never trained.
    CHECK_THROWS_AS(run_eval(cfg, layout, {"Plain-ST"}, 1), MissingArtifactError);
    CHECK_THROWS_AS(run_eval(cfg, layout, {"Oracle"}, 1), ConfigError);
  }
}

TEST_CASE("epoch order is a seeded permutation") {
  std::vector<synth::MultimodalSample> split(50);
  for (std::size_t i = 0; i < split.size(); ++i) split[i].id = i;
  const auto a = epoch_order(split, 3, 1), b = epoch_order(split, 3, 1), c = epoch_order(split, 3, 2);
  CHECK(a == b);
  CHECK(a != c);
  std::vector<std::uint64_t> ids;
  for (const auto* s : a) ids.push_back(s->id);
  std::sort(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(ids[i] == i);
  const auto bs = batches(a, 16);
  CHECK(bs.size() == 3);
  for (const auto& x : bs) CHECK(x.size() == 16);
}
