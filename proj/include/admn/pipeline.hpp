#pragma once

// End-to-end workflows behind the command-line tool: run configuration,
// artifact layout, the three training stages with resumable state, and the
// provider x budget x seed evaluation sweep.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "admn/controller.hpp"

namespace admn {

struct StageSettings {
  std::size_t epochs = 10;
  double lr = 1e-3;
  std::size_t batch = 16;
  bool linear_decay = false;  // "schedule = linear": lr falls linearly to 0 over the stage

  // Learning rate at a 0-based optimizer step of a stage with `steps_per_epoch` steps.
  double lr_at(std::size_t step, std::size_t steps_per_epoch) const;
};

struct RunConfig {
  // [data]
  synth::CorruptionSpec corruption;
  std::size_t samples = 1500;
  std::uint64_t data_seed = 7;
  synth::SplitRatios ratios;

  // [model]
  MultimodalNetConfig model = MultimodalNetConfig::toy();
  std::uint64_t model_seed = 100;  // Stage 0/1 seed shared by every controller

  // [pretrain]
  StageSettings pretrain{10, 1e-3, 32};
  double mask_ratio = 0.75;
  std::size_t decoder_layers = 1;
  double pretrain_drop = 0.2;

  // [finetune]
  StageSettings finetune{30, 5e-4, 16};
  DropConfig drop;

  // [controller]
  ControllerConfig controller;
  StageSettings controller_train{10, 1e-3, 16};
  StageSettings autoencoder{30, 1e-3, 16};
  ControllerMode mode = ControllerMode::corruption_supervised;
  bool corruption_only_first_epoch = true;

  // [eval]
  std::vector<std::size_t> budgets{3, 4, 6};
  std::vector<std::uint64_t> seeds{100, 200, 300};
  std::vector<std::size_t> costs;  // per modality; empty means 1 each

  BudgetSpec budget_spec(std::size_t budget) const;
  // ConfigError when a budget is infeasible for the geometry or a value is out of range.
  void validate() const;
};

// Flat "key = value" lines under [section] headers; ';' and '#' start comments.
// Unknown keys and malformed values raise ConfigError naming "section.key".
RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::filesystem::path& path);

// Where each command reads and writes, relative to --out.
struct Layout {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path pretrain(std::uint64_t seed) const;
  std::filesystem::path finetune(std::uint64_t seed) const;
  std::filesystem::path controller(ControllerMode mode, std::size_t budget, std::uint64_t seed) const;
  std::filesystem::path eval() const { return root / "eval"; }
};

struct LossRow {
  std::string phase;
  std::size_t epoch = 0;
  double train = 0;
  double val = 0;
  double aux = 0;  // corruption loss for controllers, else 0
};

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& rows);
std::vector<LossRow> read_loss_csv(const std::filesystem::path& path);

// Deterministic per-epoch order of the training split.
std::vector<const synth::MultimodalSample*> epoch_order(const std::vector<synth::MultimodalSample>& split,
                                                        std::uint64_t seed, std::uint64_t epoch);
std::vector<std::vector<const synth::MultimodalSample*>> batches(
    const std::vector<const synth::MultimodalSample*>& order, std::size_t batch);

synth::Dataset run_generate(const RunConfig& cfg, const Layout& layout);
// Loads the dataset and checks it against the configured geometry.
synth::Dataset load_run_dataset(const RunConfig& cfg, const Layout& layout);

// Each training command checkpoints its full state after every epoch under
// <dir>/state and resumes from it; `stop_after` ends the run early after
// that many total epochs (an interruption, for testing resume).
struct TrainOptions {
  std::optional<std::size_t> stop_after;
  bool verbose = false;
};

// Stage 0: masked-autoencoder pretraining of every backbone.
std::vector<LossRow> run_pretrain(const RunConfig& cfg, const Layout& layout, std::uint64_t seed,
                                  const TrainOptions& opts = {});
// Stage 1: LayerDrop finetuning from the Stage 0 checkpoint of the same seed.
std::vector<LossRow> run_finetune(const RunConfig& cfg, const Layout& layout, std::uint64_t seed,
                                  const TrainOptions& opts = {});
// One controller for (mode, budget, seed) on top of the Stage 1 network of cfg.model_seed.
std::vector<LossRow> run_train_controller(const RunConfig& cfg, const Layout& layout, std::size_t budget,
                                          ControllerMode mode, std::uint64_t seed, const TrainOptions& opts = {});

MultimodalNet load_stage1(const RunConfig& cfg, const Layout& layout, std::uint64_t seed);
ControllerNet load_trained_controller(const RunConfig& cfg, const Layout& layout, ControllerMode mode,
                                      std::size_t budget, std::uint64_t seed);

// ---- evaluation sweep ---------------------------------------------------------------------

inline const std::vector<std::string>& provider_names() {
  static const std::vector<std::string> names{"ADMN",       "ADMN_AE",    "Task-Only",   "Naive",
                                              "Unimodal-A", "Unimodal-B", "Upper Bound", "Plain-ST"};
  return names;
}
std::optional<ControllerMode> provider_mode(const std::string& provider);

struct CellResult {
  std::string provider;
  std::size_t budget = 0;
  std::uint64_t seed = 0;
  bool feasible = true;
  double metric = 0;
  double mean_macs = 0;
  std::uint64_t controller_macs = 0;
};

struct SummaryRow {
  std::string provider;
  std::size_t budget = 0;
  bool feasible = true;
  double mean = 0, stdev = 0;  // sample standard deviation over seeds
  std::size_t seeds = 0;
  std::size_t rank = 0;  // 1 = lowest error among feasible providers at this budget
  double mean_macs = 0;
  double controller_macs = 0;
};

// All (provider, budget, seed) cells on the test split; up to `threads`
// cells run concurrently. Missing controller checkpoints raise
// MissingArtifactError. Plan logs go to <eval>/plans.
std::vector<CellResult> run_eval(const RunConfig& cfg, const Layout& layout, const std::vector<std::string>& providers,
                                 std::size_t threads = 1);
std::vector<SummaryRow> summarize(const std::vector<CellResult>& cells, const std::vector<std::string>& providers,
                                  const std::vector<std::size_t>& budgets);

void write_cells_csv(const std::filesystem::path& path, const std::vector<CellResult>& cells);
std::vector<CellResult> read_cells_csv(const std::filesystem::path& path);
void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows);
// Aligned text: one row per provider, one column per budget, "mean ± std (#rank)"; "—" when infeasible.
void write_table(std::ostream& os, const std::vector<SummaryRow>& rows, const std::vector<std::string>& providers,
                 const std::vector<std::size_t>& budgets);
// FLOPs report rows for the summary (budget,provider,mean_flops,controller_flops,controller_share,mean_metric).
std::vector<ReportRow> flops_rows(const std::vector<SummaryRow>& rows);

// Writes the eval outputs (cells, summary, table, FLOPs CSV) under layout.eval().
void write_eval_outputs(const RunConfig& cfg, const Layout& layout, const std::vector<CellResult>& cells,
                        const std::vector<std::string>& providers);

}  // namespace admn
