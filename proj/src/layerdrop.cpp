#include "admn/layerdrop.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <cstdint>
#include <numeric>

#include "admn/errors.hpp"

namespace admn {

LayerMask LayerMask::all(const std::vector<std::size_t>& depths, bool active) {
  LayerMask m;
  for (auto d : depths) m.modalities.emplace_back(d, active);
  return m;
}

LayerMask LayerMask::from_flat(const std::vector<std::size_t>& depths, const std::vector<bool>& flat) {
  const std::size_t total = std::accumulate(depths.begin(), depths.end(), std::size_t{0});
  if (flat.size() != total) {
    throw ContractError("mask: flat length " + std::to_string(flat.size()) + " != total depth " +
                        std::to_string(total));
  }
  LayerMask m;
  std::size_t k = 0;
  for (auto d : depths) {
    m.modalities.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(k),
                              flat.begin() + static_cast<std::ptrdiff_t>(k + d));
    k += d;
  }
  return m;
}

LayerMask LayerMask::parse(const std::string& text) {
  LayerMask m;
  m.modalities.emplace_back();
  for (char c : text) {
    if (c == '|') {
      m.modalities.emplace_back();
    } else if (c == '0' || c == '1') {
      m.modalities.back().push_back(c == '1');
    } else {
      throw FormatError(std::string("mask: unexpected character '") + c + "' in \"" + text + "\"");
    }
  }
  return m;
}

std::vector<std::size_t> LayerMask::depths() const {
  std::vector<std::size_t> d;
  for (const auto& m : modalities) d.push_back(m.size());
  return d;
}

std::size_t LayerMask::active_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < modalities.size(); ++i) n += active_count(i);
  return n;
}

std::size_t LayerMask::active_count(std::size_t modality) const {
  const auto& m = modalities.at(modality);
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
}

std::vector<bool> LayerMask::flat() const {
  std::vector<bool> out;
  for (const auto& m : modalities) out.insert(out.end(), m.begin(), m.end());
  return out;
}

std::string LayerMask::to_string() const {
  std::string s;
  for (std::size_t i = 0; i < modalities.size(); ++i) {
    if (i) s += '|';
    for (bool b : modalities[i]) s += b ? '1' : '0';
  }
  return s;
}

void LayerMask::check_depths(const std::vector<std::size_t>& expected) const {
  if (depths() != expected) {
    throw ContractError("mask " + to_string() + " does not match backbone depths " + shape_string(expected));
  }
}

void DropConfig::validate() const {
  auto check = [](double v, const char* name) {
    if (!(v >= 0.0 && v < 1.0)) throw ConfigError(std::string("drop config: ") + name + " must be in [0, 1)");
  };
  check(p, "p");
  check(q, "q");
  check(r, "r");
}

LayerMask sample_training_mask(Rng& rng, const std::vector<std::size_t>& depths, const DropConfig& cfg) {
  LayerMask mask;
  for (auto d : depths) {
    const bool whole = rng.uniform() < cfg.q;
    std::vector<bool> layers(d);
    for (std::size_t j = 0; j < d; ++j) {
      const bool keep = rng.uniform() >= cfg.p;
      layers[j] = keep && !whole;
    }
    mask.modalities.push_back(std::move(layers));
  }
  return mask;
}

std::vector<bool> sample_modality_dropout(Rng& rng, std::size_t modalities, double r) {
  std::vector<bool> out(modalities);
  for (std::size_t i = 0; i < modalities; ++i) out[i] = rng.uniform() < r;
  return out;
}

std::vector<std::size_t> every_other_keep_set(std::size_t depth, std::size_t keep) {
  if (keep == 0 || keep > depth) {
    throw BudgetError("every-other: cannot keep " + std::to_string(keep) + " of " + std::to_string(depth) +
                      " layers");
  }
  if (keep == 1) return {0};
  std::vector<bool> used(depth, false);
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < keep; ++j) {
    auto idx = static_cast<std::size_t>(
        std::lround(static_cast<double>(j) * static_cast<double>(depth - 1) / static_cast<double>(keep - 1)));
    while (idx < depth && used[idx]) ++idx;
    if (idx == depth) {
      // Cannot happen for step >= 1, but keep the set size exact regardless.
      idx = 0;
      while (used[idx]) ++idx;
    }
    used[idx] = true;
    out.push_back(idx);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<bool> every_other_mask(std::size_t depth, std::size_t keep) {
  std::vector<bool> m(depth, false);
  if (keep == 0) return m;
  for (auto i : every_other_keep_set(depth, keep)) m[i] = true;
  return m;
}

namespace {

// Exhaustive search for per-modality counts hitting `target` exactly, used when
// the round-robin pass strands a residue (a saturated cheap modality). Picks
// the most even split in layer counts; earlier modalities win ties.
std::vector<std::size_t> exact_counts(std::size_t target, const std::vector<std::size_t>& depths,
                                      const std::vector<std::size_t>& costs) {
  std::vector<std::size_t> cur(depths.size(), 1), best;
  std::size_t best_spread = SIZE_MAX;
  double space = 1;
  for (auto d : depths) space *= static_cast<double>(d);
  if (space > 1e7) throw BudgetError("naive allocation: no exact split found");
  auto rec = [&](auto&& self, std::size_t i, std::size_t cost) -> void {
    if (i == depths.size()) {
      if (cost != target) return;
      const auto [lo, hi] = std::minmax_element(cur.begin(), cur.end());
      if (*hi - *lo < best_spread) {
        best_spread = *hi - *lo;
        best = cur;
      }
      return;
    }
    for (std::size_t c = depths[i]; c >= 1; --c) {
      if (cost + c * costs[i] > target) continue;
      cur[i] = c;
      self(self, i + 1, cost + c * costs[i]);
    }
  };
  rec(rec, 0, 0);
  if (best.empty()) {
    throw BudgetError("naive allocation: budget " + std::to_string(target) +
                      " cannot be met exactly with these layer costs");
  }
  return best;
}

}  // namespace

std::vector<std::size_t> naive_layer_counts(std::size_t budget, const std::vector<std::size_t>& depths,
                                            const std::vector<std::size_t>& costs) {
  if (depths.size() != costs.size() || depths.empty()) {
    throw ContractError("naive allocation: need one cost per modality");
  }
  std::size_t pinned = 0, full = 0;
  for (std::size_t i = 0; i < depths.size(); ++i) {
    if (costs[i] == 0) throw ConfigError("naive allocation: layer costs must be >= 1");
    pinned += costs[i];
    full += costs[i] * depths[i];
  }
  if (budget < pinned) {
    throw BudgetError("naive allocation: budget " + std::to_string(budget) + " is below the pinned cost " +
                      std::to_string(pinned));
  }
  std::vector<std::size_t> counts(depths.size(), 0);
  std::size_t remaining = std::min(budget, full);
  for (bool progress = true; progress && remaining > 0;) {
    progress = false;
    for (std::size_t i = 0; i < depths.size(); ++i) {
      if (counts[i] < depths[i] && costs[i] <= remaining) {
        ++counts[i];
        remaining -= costs[i];
        progress = true;
      }
    }
  }
  if (remaining != 0) counts = exact_counts(std::min(budget, full), depths, costs);
  return counts;
}

LayerMask naive_allocation(std::size_t budget, const std::vector<std::size_t>& depths,
                           const std::vector<std::size_t>& costs) {
  const auto counts = naive_layer_counts(budget, depths, costs);
  LayerMask m;
  for (std::size_t i = 0; i < depths.size(); ++i) m.modalities.push_back(every_other_mask(depths[i], counts[i]));
  return m;
}

}  // namespace admn
