#pragma once

// Embedding-level fusion network: per-modality ViT-style backbones, a fusion
// transformer over the concatenated tokens plus a readout token, and a
// 2-layer MLP head. Also the Stage 0 (masked autoencoder) and Stage 1
// (LayerDrop finetuning) training steps.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "admn/budget.hpp"
#include "admn/layerdrop.hpp"
#include "admn/nn.hpp"
#include "admn/optim.hpp"
#include "admn/synth.hpp"

namespace admn {

struct ModalityConfig {
  std::string name;
  std::size_t channels = 1, height = 16, width = 16, patch = 4;
  std::size_t depth = 4;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t freeze = 2;  // layers [0, freeze) and the patch embedding are frozen in Stage 1

  std::size_t tokens() const { return (height / patch) * (width / patch); }
  std::size_t patch_size() const { return channels * patch * patch; }
};

enum class TaskKind { regress, classify };

struct MultimodalNetConfig {
  std::vector<ModalityConfig> modalities;
  std::size_t fusion_layers = 6;
  std::size_t fusion_dim = 32;
  std::size_t fusion_heads = 4;
  std::size_t head_hidden = 64;
  TaskKind task = TaskKind::regress;
  std::size_t outputs = 2;  // regression dim or class count

  // Two 16x16 modalities, depth 4, dim 32, patch 4.
  static MultimodalNetConfig toy();
  void validate() const;
  std::vector<std::size_t> depths() const;
  std::size_t total_layers() const;
  std::size_t fusion_tokens() const;  // all modality tokens + readout
};

struct Backbone {
  nn::Linear patch;
  std::vector<nn::TransformerLayerParams> layers;
};

struct MultimodalNet {
  MultimodalNetConfig config;
  std::vector<Backbone> backbones;
  std::vector<nn::Linear> projections;  // modality dim -> fusion dim
  std::vector<nn::TransformerLayerParams> fusion;
  Tensor readout;  // [1, fusion_dim]
  Tensor final_gain, final_bias;
  nn::Mlp head;

  static MultimodalNet init(const MultimodalNetConfig& cfg, std::uint64_t seed);

  // Roles: "frozen" (below the freeze boundary), "backbone", "fusion", "head".
  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> tunable_parameters() const;
  // Stage 1 setup: frozen tensors stop requiring gradients.
  void apply_freeze();
  void set_requires_grad(bool on);
};

Tensor image_tensor(const Matrix& image, const ModalityConfig& m);

// Patch embedding plus positions, then the layers selected by `mask`.
// ContractError when the mask length differs from the depth.
Tensor backbone_forward(const Backbone& b, const ModalityConfig& m, const Tensor& image, const std::vector<bool>& mask);
// Gated variant: layer j scaled by gates[0, j] (values 0/1 from a straight-through plan).
Tensor backbone_forward(const Backbone& b, const ModalityConfig& m, const Tensor& image, const Tensor& gates);

// `embeddings[m]` undefined means the modality contributes nothing: its tokens
// become the projection bias (a zeroed embedding). ContractError for an empty
// or mis-sized list.
Tensor fuse_and_predict(const MultimodalNet& net, const std::vector<Tensor>& embeddings);

// A modality with no active layers, or flagged in `dropped`, is zeroed
// without running its backbone.
Tensor forward(const MultimodalNet& net, const std::vector<Matrix>& inputs, const LayerMask& mask,
               const std::vector<bool>& dropped = {});
// z: [1, total_layers], concatenated per-modality gates.
Tensor forward_gated(const MultimodalNet& net, const std::vector<Matrix>& inputs, const Tensor& z);

// MSE against z (regression) or cross-entropy on the sector (classification).
Tensor task_loss(const MultimodalNetConfig& cfg, const Tensor& output, const synth::MultimodalSample& s);
// Euclidean error in label units (regression) or 0/1 misclassification.
double task_error(const MultimodalNetConfig& cfg, const Matrix& output, const synth::MultimodalSample& s);

// Analytic MACs of forward() under `mask`; matches the MacCounter exactly.
FlopsReport predicted_macs(const MultimodalNet& net, const LayerMask& mask, const std::vector<bool>& dropped = {});

// ---- Stage 0: masked autoencoder ---------------------------------------------------

struct MaeDecoder {
  nn::Linear embed;
  Tensor mask_token;
  std::vector<nn::TransformerLayerParams> layers;
  nn::Linear predict;

  static MaeDecoder init(Rng& rng, const ModalityConfig& m, std::size_t dim, std::size_t layers, std::size_t heads);
  std::vector<NamedTensor> parameters(const std::string& prefix) const;
};

// Number of masked tokens for a ratio, kept within [1, t-1].
std::size_t mae_masked_count(std::size_t tokens, double ratio);

// One sample: random token mask, encoder on visible tokens under a fresh
// LayerDrop mask (rate p, no whole-backbone drop), decoder at full depth,
// MSE over the pixels of masked tokens only.
Tensor mae_loss(Rng& rng, const Backbone& b, const MaeDecoder& d, const ModalityConfig& m, const Matrix& image,
                double mask_ratio, double p);

// Mean mae_loss over the batch, one Adam step. Returns the loss.
double mae_pretrain_step(Rng& rng, const Backbone& b, const MaeDecoder& d, const ModalityConfig& m, Adam& opt,
                         const std::vector<const Matrix*>& batch, double mask_ratio, double p, double lr = -1);

// ---- Stage 1: LayerDrop finetuning ---------------------------------------------------

// One mask and one set of modality-dropout flags per batch; mean task loss;
// one Adam step over `opt`'s parameters (the tunable set). Returns the loss.
double stage1_finetune_step(Rng& rng, const MultimodalNet& net, Adam& opt,
                            const std::vector<const synth::MultimodalSample*>& batch, const DropConfig& cfg,
                            double lr = -1);

// ---- evaluation ------------------------------------------------------------------------

using MaskProvider = std::function<LayerMask(const synth::MultimodalSample&)>;

struct EvalRecord {
  std::uint64_t id = 0;
  LayerMask mask;
  double error = 0;
  std::uint64_t macs = 0;  // instrumented
};

struct EvalReport {
  double mean_error = 0;
  double mean_macs = 0;
  std::vector<EvalRecord> records;
};

// ContractError on an empty split.
EvalReport evaluate(const MultimodalNet& net, const std::vector<synth::MultimodalSample>& samples,
                    const MaskProvider& provider);

// Metric CSV: split,budget,provider,seed,metric
void write_metric_csv(std::ostream& os, const std::string& split, std::size_t budget, const std::string& provider,
                      std::uint64_t seed, double metric, bool header);

void save_net(const std::filesystem::path& dir, const MultimodalNet& net);
void load_net(const std::filesystem::path& dir, MultimodalNet& net);

}  // namespace admn
