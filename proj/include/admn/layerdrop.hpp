#pragma once

// Layer activation policies: stochastic LayerDrop masks for training and
// deterministic keep sets for inference-time baselines.

#include <cstddef>
#include <string>
#include <vector>

#include "admn/autodiff.hpp"

namespace admn {

// One boolean per backbone layer, grouped by modality in config order.
struct LayerMask {
  std::vector<std::vector<bool>> modalities;

  LayerMask() = default;
  explicit LayerMask(std::vector<std::vector<bool>> m) : modalities(std::move(m)) {}
  static LayerMask all(const std::vector<std::size_t>& depths, bool active);
  // Splits a concatenated vector of length sum(depths).
  static LayerMask from_flat(const std::vector<std::size_t>& depths, const std::vector<bool>& flat);
  // "1010|1000"
  static LayerMask parse(const std::string& text);

  std::size_t num_modalities() const { return modalities.size(); }
  std::vector<std::size_t> depths() const;
  std::size_t active_count() const;
  std::size_t active_count(std::size_t modality) const;
  std::vector<bool> flat() const;
  std::string to_string() const;

  // ContractError when lengths disagree with `depths`.
  void check_depths(const std::vector<std::size_t>& depths) const;

  bool operator==(const LayerMask&) const = default;
};

struct DropConfig {
  double p = 0.2;  // per-layer drop rate
  double q = 0.1;  // whole-backbone drop probability
  double r = 0.1;  // modality dropout rate
  void validate() const;
};

// Per modality, in config order: one uniform decides whole-backbone drop
// (probability q), then one uniform per layer in index order decides that
// layer (drop probability p). Every uniform is drawn even when the backbone is
// dropped, so the number of draws depends only on the depths.
LayerMask sample_training_mask(Rng& rng, const std::vector<std::size_t>& depths, const DropConfig& cfg);

// Independent per-modality dropout flags (true = zero that modality's
// post-backbone embedding), rate r.
std::vector<bool> sample_modality_dropout(Rng& rng, std::size_t modalities, double r);

// {round(j(D-1)/(k-1))} for j < k, {0} for k = 1, collisions pushed up to the
// next free index. BudgetError when k > D or k == 0.
std::vector<std::size_t> every_other_keep_set(std::size_t depth, std::size_t keep);

// Mask keeping `keep` layers of a depth-D backbone via every_other_keep_set;
// keep = 0 gives an all-false mask.
std::vector<bool> every_other_mask(std::size_t depth, std::size_t keep);

// Per-modality layer counts for an equal split of budget L: one layer at a
// time to each modality in config order while its cost fits and depth remains.
// Saturates at the full network. If that pass strands a residue, the most even
// exact split is searched instead. BudgetError when L cannot give every
// modality its first layer or no exact split exists.
std::vector<std::size_t> naive_layer_counts(std::size_t budget, const std::vector<std::size_t>& depths,
                                            const std::vector<std::size_t>& costs);

LayerMask naive_allocation(std::size_t budget, const std::vector<std::size_t>& depths,
                           const std::vector<std::size_t>& costs);

}  // namespace admn
