#pragma once

// Layer budgets in cost units and analytic multiply-accumulate accounting.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "admn/layerdrop.hpp"

namespace admn {

struct BudgetSpec {
  std::size_t budget = 0;          // L, in cost units
  std::vector<std::size_t> costs;  // per modality, per layer
  bool pin_first = true;           // first layer of each modality always active

  // Equal unit costs for `modalities` backbones.
  static BudgetSpec uniform(std::size_t budget, std::size_t modalities);

  std::size_t pinned_cost() const;
  std::size_t full_cost(const std::vector<std::size_t>& depths) const;
  // ConfigError for zero costs or a cost list that does not match `depths`;
  // BudgetError when L is below the pinned cost or above the full network.
  void validate(const std::vector<std::size_t>& depths) const;
};

std::size_t plan_cost(const LayerMask& mask, const BudgetSpec& spec);

struct BudgetCheck {
  bool ok = false;
  long long excess = 0;  // plan_cost - L
  std::vector<std::size_t> missing_pins;
  std::string detail;
};

BudgetCheck enforce_budget(const LayerMask& mask, const BudgetSpec& spec);

// MACs of one pre-norm transformer layer over t tokens of width d:
// projections 4td^2, scores and mixing 2t^2 d, MLP 8td^2. Norms, residuals,
// biases and activations are not multiply-accumulates and count as zero.
std::uint64_t layer_flops(std::size_t tokens, std::size_t dim);

struct FlopsComponent {
  std::string name;
  std::uint64_t macs = 0;
  bool controller = false;
};

struct FlopsReport {
  std::vector<FlopsComponent> components;

  void add(std::string name, std::uint64_t macs, bool controller = false);
  std::uint64_t total() const;
  std::uint64_t controller_macs() const;
  std::uint64_t model_macs() const { return total() - controller_macs(); }
  double controller_share() const;  // controller / total
  std::uint64_t get(const std::string& name) const;
};

struct ReportRow {
  std::size_t budget = 0;
  std::string provider;
  double mean_flops = 0;
  double controller_flops = 0;
  double controller_share = 0;
  double mean_metric = 0;
};

// Header: budget,provider,mean_flops,controller_flops,controller_share,mean_metric
void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows);

}  // namespace admn
