#include "admn/budget.hpp"

#include <iomanip>
#include <ostream>

#include "admn/errors.hpp"

namespace admn {

BudgetSpec BudgetSpec::uniform(std::size_t budget, std::size_t modalities) {
  return {budget, std::vector<std::size_t>(modalities, 1), true};
}

std::size_t BudgetSpec::pinned_cost() const {
  if (!pin_first) return 0;
  std::size_t c = 0;
  for (auto v : costs) c += v;
  return c;
}

std::size_t BudgetSpec::full_cost(const std::vector<std::size_t>& depths) const {
  std::size_t c = 0;
  for (std::size_t i = 0; i < depths.size() && i < costs.size(); ++i) c += depths[i] * costs[i];
  return c;
}

void BudgetSpec::validate(const std::vector<std::size_t>& depths) const {
  if (costs.size() != depths.size()) {
    throw ConfigError("budget: " + std::to_string(costs.size()) + " costs for " + std::to_string(depths.size()) +
                      " modalities");
  }
  for (auto c : costs) {
    if (c == 0) throw ConfigError("budget: layer costs must be >= 1");
  }
  if (budget < pinned_cost()) {
    throw BudgetError("budget " + std::to_string(budget) + " is below the pinned cost " +
                      std::to_string(pinned_cost()));
  }
  if (budget > full_cost(depths)) {
    throw BudgetError("budget " + std::to_string(budget) + " exceeds the full network cost " +
                      std::to_string(full_cost(depths)));
  }
}

std::size_t plan_cost(const LayerMask& mask, const BudgetSpec& spec) {
  if (spec.costs.size() != mask.num_modalities()) {
    throw ContractError("plan_cost: mask has " + std::to_string(mask.num_modalities()) + " modalities, spec " +
                        std::to_string(spec.costs.size()));
  }
  std::size_t c = 0;
  for (std::size_t i = 0; i < mask.num_modalities(); ++i) c += mask.active_count(i) * spec.costs[i];
  return c;
}

BudgetCheck enforce_budget(const LayerMask& mask, const BudgetSpec& spec) {
  BudgetCheck r;
  const auto cost = plan_cost(mask, spec);
  r.excess = static_cast<long long>(cost) - static_cast<long long>(spec.budget);
  if (spec.pin_first) {
    for (std::size_t i = 0; i < mask.num_modalities(); ++i) {
      if (mask.modalities[i].empty() || !mask.modalities[i][0]) r.missing_pins.push_back(i);
    }
  }
  r.ok = r.excess == 0 && r.missing_pins.empty();
  if (r.excess != 0) r.detail = "excess=" + std::to_string(r.excess);
  if (!r.missing_pins.empty()) {
    if (!r.detail.empty()) r.detail += "; ";
    r.detail += "pin missing in modality";
    for (auto m : r.missing_pins) r.detail += " " + std::to_string(m);
  }
  return r;
}

std::uint64_t layer_flops(std::size_t tokens, std::size_t dim) {
  const std::uint64_t t = tokens, d = dim;
  return 4 * t * d * d + 2 * t * t * d + 8 * t * d * d;
}

void FlopsReport::add(std::string name, std::uint64_t macs, bool controller) {
  components.push_back({std::move(name), macs, controller});
}

std::uint64_t FlopsReport::total() const {
  std::uint64_t s = 0;
  for (const auto& c : components) s += c.macs;
  return s;
}

std::uint64_t FlopsReport::controller_macs() const {
  std::uint64_t s = 0;
  for (const auto& c : components)
    if (c.controller) s += c.macs;
  return s;
}

double FlopsReport::controller_share() const {
  const auto t = total();
  return t == 0 ? 0.0 : static_cast<double>(controller_macs()) / static_cast<double>(t);
}

std::uint64_t FlopsReport::get(const std::string& name) const {
  for (const auto& c : components)
    if (c.name == name) return c.macs;
  return 0;
}

void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows) {
  os << "budget,provider,mean_flops,controller_flops,controller_share,mean_metric\n";
  os << std::setprecision(10);
  for (const auto& r : rows) {
    os << r.budget << ',' << r.provider << ',' << r.mean_flops << ',' << r.controller_flops << ','
       << r.controller_share << ',' << r.mean_metric << '\n';
  }
}

}  // namespace admn
