#pragma once

// QoI-aware layer allocator. A small perceptual stack (strided downsampling,
// two convolutions and a linear embedding per modality, one fusion layer with
// a readout token) yields e_corr; MLP_pi maps it to one logit per backbone
// layer, and a relaxed top-L selection with straight-through gradients turns
// the logits into an exact-budget layer mask.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "admn/budget.hpp"
#include "admn/model.hpp"

namespace admn {

enum class SelectMode { gumbel_st, plain_st, deterministic_topL };
enum class CorruptionHeadKind { none, quantitative, categorical };
enum class ControllerMode { corruption_supervised, autoencoder, task_only, plain_st };

std::string to_string(ControllerMode m);
ControllerMode parse_controller_mode(const std::string& s);

struct ControllerConfig {
  std::size_t downsample = 4;
  std::size_t conv1_channels = 4, conv2_channels = 8;
  std::size_t kernel = 3, stride = 2, padding = 1;
  std::size_t embed_dim = 16;
  std::size_t fusion_layers = 1, fusion_heads = 2;
  std::size_t hidden = 32;
  CorruptionHeadKind head = CorruptionHeadKind::quantitative;
  std::size_t corruption_outputs = 2;  // M for quantitative, K for categorical
  bool squared_corruption_loss = false;
  bool decoder = true;
};

struct ModalityPerception {
  nn::ConvLayerParams conv1, conv2;
  nn::Linear embed;  // flattened conv output -> embed_dim
};

struct ModalityDecoder {
  nn::Linear expand;  // embed_dim -> conv2_channels * s * s
  nn::DeconvLayerParams deconv;
};

struct ControllerNet {
  ControllerConfig config;
  std::vector<ModalityConfig> modalities;
  std::vector<std::size_t> depths;
  std::vector<ModalityPerception> perception;
  std::vector<nn::TransformerLayerParams> fusion;
  Tensor readout;  // [1, embed_dim]
  nn::Mlp alloc;   // embed_dim -> C
  std::optional<nn::Mlp> corruption;
  std::vector<ModalityDecoder> decoders;

  static ControllerNet init(const ControllerConfig& cfg, const MultimodalNetConfig& net, std::uint64_t seed);

  std::size_t total_layers() const;
  std::size_t downsampled_size(std::size_t m) const;  // side of the downsampled map
  std::size_t conv_output_size(std::size_t m) const;  // side after both convs

  // Roles: "perceive", "alloc", "corruption", "decoder".
  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> parameters_with_role(const std::string& role) const;
};

// Strided nearest subsampling, keeping pixel (f*i + f/2, f*j + f/2).
Matrix downsample(const Matrix& image, std::size_t factor);

// ContractError when the input count differs from the modality count.
Tensor perceive(const ControllerNet& c, const std::vector<Matrix>& inputs);
Tensor allocation_logits(const ControllerNet& c, const Tensor& e_corr);

struct AllocationPlan {
  Tensor y;        // relaxed probabilities [1, C]
  Tensor z;        // straight-through mask [1, C]: forward 0/1, backward identity into y
  LayerMask mask;  // discrete z
  std::size_t budget = 0;
  std::vector<std::size_t> pinned;  // flat indices
};

// Pinned first layers, then the highest y among unpinned layers until the
// remaining budget is spent. Equal costs: top-R, lowest index first on ties.
// Unequal costs: greedy by y / cost; if that strands a residue, the exact
// subset with maximum total y is taken instead. BudgetError when the budget
// is infeasible.
std::vector<bool> select_layers(const Matrix& y, const std::vector<std::size_t>& depths, const BudgetSpec& budget);

AllocationPlan allocate(const Tensor& logits, const std::vector<std::size_t>& depths, const BudgetSpec& budget,
                        Rng& rng, SelectMode mode);

struct CorruptionTarget {
  CorruptionHeadKind kind = CorruptionHeadKind::quantitative;
  std::vector<double> sigma;
  std::size_t category = 0;

  static CorruptionTarget from_sample(CorruptionHeadKind kind, const synth::MultimodalSample& s,
                                      const synth::CorruptionSpec& spec);
};

Tensor corruption_head(const ControllerNet& c, const Tensor& e_corr);
// Quantitative: sum_m |s_hat_m - s_m| (or the squared form when configured).
// Categorical: cross-entropy against the joint category. ConfigError on a
// head/target mismatch.
Tensor corruption_loss(const ControllerNet& c, const Tensor& head_output, const CorruptionTarget& target);

struct ControllerSchedule {
  std::size_t epoch = 1;  // 1-based
  bool corruption_only_first_epoch = true;
  double lr = 1e-3;
};

struct ControllerLosses {
  double task = 0;
  double corruption = 0;
  double total = 0;
};

// Forward controller, plan, frozen net under the plan; Adam step on `opt`
// (the controller parameters being trained). InvariantError if the frozen
// network's parameter hash changes across the step.
ControllerLosses controller_train_step(Rng& rng, const ControllerNet& c, const MultimodalNet& net, Adam& opt,
                                       const std::vector<const synth::MultimodalSample*>& batch,
                                       const BudgetSpec& budget, const synth::CorruptionSpec& spec,
                                       ControllerMode mode, const ControllerSchedule& schedule);

// Per-modality reconstructions of the downsampled inputs, [1, s, s] each.
std::vector<Tensor> decode(const ControllerNet& c, const Tensor& e_corr);
Tensor reconstruction_loss(const ControllerNet& c, const std::vector<Matrix>& inputs);
double ae_pretrain_step(const ControllerNet& c, Adam& opt, const std::vector<const synth::MultimodalSample*>& batch,
                        double lr = -1);

// Mean pairwise e_corr distance across groups over the mean within groups.
double separation_ratio(const std::vector<RowVector>& latents, const std::vector<std::size_t>& groups);

// ---- providers --------------------------------------------------------------------------

MaskProvider upper_bound_provider(const std::vector<std::size_t>& depths);
MaskProvider naive_provider(const BudgetSpec& budget, const std::vector<std::size_t>& depths);
// All L budget units to modality m (L / cost layers), laid out by every_other_keep_set.
MaskProvider unimodal_provider(std::size_t m, const BudgetSpec& budget, const std::vector<std::size_t>& depths);
// `keep` layers in every backbone.
MaskProvider every_other_provider(std::size_t keep, const std::vector<std::size_t>& depths);
MaskProvider controller_provider(const ControllerNet& c, const BudgetSpec& budget);

// Analytic MACs of perceive + MLP_pi (the inference path).
std::uint64_t controller_macs(const ControllerNet& c);

// ---- logs -------------------------------------------------------------------------------

// "sample_id,budget,mask,corruption,metric" lines; corruption values joined by ';'.
void write_plan_log(std::ostream& os, const EvalReport& report, const std::vector<synth::MultimodalSample>& samples,
                    std::size_t budget);
// "sample_id,e0,...,e{d-1},label"
void write_latent_dump(std::ostream& os, const ControllerNet& c, const std::vector<synth::MultimodalSample>& samples,
                       const synth::CorruptionSpec& spec);

void save_controller(const std::filesystem::path& dir, const ControllerNet& c);
void load_controller(const std::filesystem::path& dir, ControllerNet& c);

}  // namespace admn
