#include "admn/controller.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>

#include "admn/errors.hpp"

namespace admn {

std::string to_string(ControllerMode m) {
  switch (m) {
    case ControllerMode::corruption_supervised: return "corruption_supervised";
    case ControllerMode::autoencoder: return "autoencoder";
    case ControllerMode::task_only: return "task_only";
    case ControllerMode::plain_st: return "plain_st";
  }
  return "?";
}

ControllerMode parse_controller_mode(const std::string& s) {
  if (s == "corruption_supervised") return ControllerMode::corruption_supervised;
  if (s == "autoencoder") return ControllerMode::autoencoder;
  if (s == "task_only") return ControllerMode::task_only;
  if (s == "plain_st") return ControllerMode::plain_st;
  throw ConfigError("unknown controller mode '" + s +
                    "' (corruption_supervised, autoencoder, task_only, plain_st)");
}

ControllerNet ControllerNet::init(const ControllerConfig& cfg, const MultimodalNetConfig& net, std::uint64_t seed) {
  net.validate();
  if (cfg.downsample == 0) throw ConfigError("controller: downsample factor must be >= 1");
  if (cfg.fusion_heads == 0 || cfg.embed_dim % cfg.fusion_heads != 0) {
    throw ConfigError("controller: fusion heads must divide embed dim");
  }
  ControllerNet c;
  c.config = cfg;
  c.modalities = net.modalities;
  c.depths = net.depths();
  Rng rng(seed);
  for (std::size_t m = 0; m < c.modalities.size(); ++m) {
    const auto& mc = c.modalities[m];
    if (mc.height != mc.width) throw ConfigError("controller: square inputs only");
    if (mc.height % cfg.downsample != 0) throw ConfigError("controller: downsample factor must divide the input size");
    ModalityPerception p;
    p.conv1 = nn::ConvLayerParams::init(rng, mc.channels, cfg.conv1_channels, cfg.kernel, cfg.stride, cfg.padding);
    p.conv2 = nn::ConvLayerParams::init(rng, cfg.conv1_channels, cfg.conv2_channels, cfg.kernel, cfg.stride, cfg.padding);
    c.perception.push_back(p);
    const std::size_t s2 = c.conv_output_size(m);
    c.perception.back().embed = nn::Linear::init(rng, cfg.conv2_channels * s2 * s2, cfg.embed_dim);
  }
  for (std::size_t k = 0; k < cfg.fusion_layers; ++k)
    c.fusion.push_back(nn::TransformerLayerParams::init(rng, cfg.embed_dim, cfg.fusion_heads));
  c.readout = nn::glorot(rng, 1, cfg.embed_dim, {1, cfg.embed_dim});
  c.alloc = nn::Mlp::init(rng, cfg.embed_dim, cfg.hidden, c.total_layers());
  if (cfg.head != CorruptionHeadKind::none) {
    if (cfg.corruption_outputs == 0) throw ConfigError("controller: corruption head needs outputs");
    c.corruption = nn::Mlp::init(rng, cfg.embed_dim, cfg.hidden, cfg.corruption_outputs);
  }
  if (cfg.decoder) {
    for (std::size_t m = 0; m < c.modalities.size(); ++m) {
      const std::size_t s0 = c.downsampled_size(m);
      if (s0 % 2 != 0) throw ConfigError("controller: decoder needs an even downsampled size");
      ModalityDecoder d;
      d.expand = nn::Linear::init(rng, cfg.embed_dim, cfg.conv2_channels * (s0 / 2) * (s0 / 2));
      d.deconv = nn::DeconvLayerParams::init(rng, cfg.conv2_channels, c.modalities[m].channels, 2, 2);
      c.decoders.push_back(d);
    }
  }
  return c;
}

std::size_t ControllerNet::total_layers() const { return std::accumulate(depths.begin(), depths.end(), std::size_t{0}); }

std::size_t ControllerNet::downsampled_size(std::size_t m) const { return modalities.at(m).height / config.downsample; }

std::size_t ControllerNet::conv_output_size(std::size_t m) const {
  const std::size_t s0 = downsampled_size(m);
  const auto& p = perception.at(m);
  return p.conv2.output_size(p.conv1.output_size(s0));
}

std::vector<NamedTensor> ControllerNet::parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t m = 0; m < perception.size(); ++m) {
    const std::string pre = "c.m" + std::to_string(m);
    perception[m].conv1.collect(out, pre + ".conv1", "perceive");
    perception[m].conv2.collect(out, pre + ".conv2", "perceive");
    perception[m].embed.collect(out, pre + ".embed", "perceive");
  }
  for (std::size_t k = 0; k < fusion.size(); ++k) fusion[k].collect(out, "c.fusion" + std::to_string(k), "perceive");
  out.push_back({"c.readout", readout, "perceive"});
  alloc.collect(out, "c.alloc", "alloc");
  if (corruption) corruption->collect(out, "c.corr", "corruption");
  for (std::size_t m = 0; m < decoders.size(); ++m) {
    decoders[m].expand.collect(out, "c.dec" + std::to_string(m) + ".expand", "decoder");
    decoders[m].deconv.collect(out, "c.dec" + std::to_string(m) + ".deconv", "decoder");
  }
  return out;
}

std::vector<NamedTensor> ControllerNet::parameters_with_role(const std::string& role) const {
  std::vector<NamedTensor> out;
  for (auto& p : parameters())
    if (p.role == role) out.push_back(p);
  return out;
}

Matrix downsample(const Matrix& image, std::size_t factor) {
  if (factor == 0 || image.rows() % static_cast<Eigen::Index>(factor) != 0 ||
      image.cols() % static_cast<Eigen::Index>(factor) != 0) {
    throw ConfigError("downsample: factor must divide the input size");
  }
  const auto f = static_cast<Eigen::Index>(factor);
  Matrix out(image.rows() / f, image.cols() / f);
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) = image(f * i + f / 2, f * j + f / 2);
  return out;
}

namespace {

Matrix downsample_channels(const Matrix& input, const ModalityConfig& mc, std::size_t factor) {
  const auto h = static_cast<Eigen::Index>(mc.height);
  Matrix out(static_cast<Eigen::Index>(mc.channels * mc.height / factor), static_cast<Eigen::Index>(mc.width / factor));
  for (std::size_t ch = 0; ch < mc.channels; ++ch)
    out.middleRows(static_cast<Eigen::Index>(ch) * (h / static_cast<Eigen::Index>(factor)), h / static_cast<Eigen::Index>(factor)) =
        downsample(input.middleRows(static_cast<Eigen::Index>(ch) * h, h), factor);
  return out;
}

}  // namespace

Tensor perceive(const ControllerNet& c, const std::vector<Matrix>& inputs) {
  if (inputs.size() != c.modalities.size()) {
    throw ContractError("perceive: expected " + std::to_string(c.modalities.size()) + " modality inputs, got " +
                        std::to_string(inputs.size()));
  }
  std::vector<Tensor> tokens{c.readout};
  for (std::size_t m = 0; m < inputs.size(); ++m) {
    const auto& mc = c.modalities[m];
    if (static_cast<std::size_t>(inputs[m].size()) != mc.channels * mc.height * mc.width) {
      throw DimensionError("perceive: modality '" + mc.name + "' input has the wrong size");
    }
    const std::size_t s0 = c.downsampled_size(m);
    Tensor x = Tensor::from_matrix(Shape{mc.channels, s0, s0}, downsample_channels(inputs[m], mc, c.config.downsample));
    x = gelu(nn::conv2d_forward(x, c.perception[m].conv1));
    x = gelu(nn::conv2d_forward(x, c.perception[m].conv2));
    x = reshape(x, {1, x.size()});
    tokens.push_back(c.perception[m].embed.forward(x));
  }
  Tensor h = concat_rows(tokens);
  for (const auto& layer : c.fusion) h = nn::transformer_layer_forward(h, layer, true);
  return slice_rows(h, 0, 1);
}

Tensor allocation_logits(const ControllerNet& c, const Tensor& e_corr) { return c.alloc.forward(e_corr); }

std::vector<bool> select_layers(const Matrix& y, const std::vector<std::size_t>& depths, const BudgetSpec& budget) {
  budget.validate(depths);
  const std::size_t C = std::accumulate(depths.begin(), depths.end(), std::size_t{0});
  if (static_cast<std::size_t>(y.size()) != C) throw DimensionError("allocate: score count does not match the layers");
  std::vector<bool> z(C, false);
  std::vector<std::size_t> cost(C);
  std::vector<std::size_t> candidates;
  std::size_t remaining = budget.budget;
  for (std::size_t m = 0, k = 0; m < depths.size(); ++m)
    for (std::size_t j = 0; j < depths[m]; ++j, ++k) {
      cost[k] = budget.costs[m];
      if (j == 0 && budget.pin_first) {
        z[k] = true;
        remaining -= cost[k];
      } else {
        candidates.push_back(k);
      }
    }
  const double* yv = y.data();
  const bool equal = std::all_of(cost.begin(), cost.end(), [&](std::size_t v) { return v == cost[0]; });
  if (equal) {
    if (remaining % cost[0] != 0) throw BudgetError("allocate: budget is not a multiple of the layer cost");
    std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) { return yv[a] > yv[b]; });
    const std::size_t take = remaining / cost[0];
    for (std::size_t i = 0; i < take; ++i) z[candidates[i]] = true;
    return z;
  }

  std::vector<std::size_t> ranked = candidates;
  std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) {
    return yv[a] / double(cost[a]) > yv[b] / double(cost[b]);
  });
  std::vector<bool> greedy = z;
  std::size_t left = remaining;
  for (auto k : ranked) {
    if (cost[k] <= left) {
      greedy[k] = true;
      left -= cost[k];
    }
  }
  if (left == 0) return greedy;

  // Exact 0/1 subset: best[i][r] = max total y over the first i candidates
  // using exactly r cost units.
  const double none = -std::numeric_limits<double>::infinity();
  const std::size_t n = candidates.size();
  std::vector<std::vector<double>> best(n + 1, std::vector<double>(remaining + 1, none));
  best[0][0] = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = candidates[i];
    for (std::size_t r = 0; r <= remaining; ++r) {
      best[i + 1][r] = best[i][r];
      if (r >= cost[k] && best[i][r - cost[k]] != none) best[i + 1][r] = std::max(best[i + 1][r], best[i][r - cost[k]] + yv[k]);
    }
  }
  if (best[n][remaining] == none) {
    throw BudgetError("allocate: budget " + std::to_string(budget.budget) + " cannot be met exactly");
  }
  for (std::size_t i = n, r = remaining; i > 0; --i) {
    if (best[i][r] != best[i - 1][r]) {
      z[candidates[i - 1]] = true;
      r -= cost[candidates[i - 1]];
    }
  }
  return z;
}

AllocationPlan allocate(const Tensor& logits, const std::vector<std::size_t>& depths, const BudgetSpec& budget, Rng& rng,
                        SelectMode mode) {
  AllocationPlan plan;
  plan.budget = budget.budget;
  if (mode == SelectMode::gumbel_st) {
    plan.y = softmax(add(log_softmax(logits), sample_gumbel(rng, logits.shape())));
  } else {
    plan.y = softmax(logits);
  }
  const auto hard = select_layers(plan.y.value(), depths, budget);
  Matrix zh(1, static_cast<Eigen::Index>(hard.size()));
  for (std::size_t i = 0; i < hard.size(); ++i) zh(0, static_cast<Eigen::Index>(i)) = hard[i] ? 1.0 : 0.0;
  plan.z = straight_through(zh, plan.y);
  plan.mask = LayerMask::from_flat(depths, hard);
  if (budget.pin_first)
    for (std::size_t m = 0, k = 0; m < depths.size(); k += depths[m], ++m) plan.pinned.push_back(k);
  return plan;
}

// ---- corruption supervision ---------------------------------------------------------------

CorruptionTarget CorruptionTarget::from_sample(CorruptionHeadKind kind, const synth::MultimodalSample& s,
                                               const synth::CorruptionSpec& spec) {
  CorruptionTarget t;
  t.kind = kind;
  t.sigma = s.corruption;
  t.category = s.corruption_category(spec);
  return t;
}

Tensor corruption_head(const ControllerNet& c, const Tensor& e_corr) {
  if (!c.corruption) throw ConfigError("controller has no corruption head");
  return c.corruption->forward(e_corr);
}

Tensor corruption_loss(const ControllerNet& c, const Tensor& head_output, const CorruptionTarget& target) {
  if (c.config.head != target.kind || target.kind == CorruptionHeadKind::none) {
    throw ConfigError("corruption loss: target mode does not match the controller head");
  }
  if (target.kind == CorruptionHeadKind::categorical) return cross_entropy(head_output, target.category);
  if (static_cast<std::size_t>(head_output.size()) != target.sigma.size()) {
    throw DimensionError("corruption loss: head predicts " + std::to_string(head_output.size()) + " values for " +
                         std::to_string(target.sigma.size()) + " modalities");
  }
  const Tensor sigma = Tensor::from_data(head_output.shape(), target.sigma);
  return c.config.squared_corruption_loss ? sum_squares(head_output, sigma) : l1(head_output, sigma);
}

ControllerLosses controller_train_step(Rng& rng, const ControllerNet& c, const MultimodalNet& net, Adam& opt,
                                       const std::vector<const synth::MultimodalSample*>& batch,
                                       const BudgetSpec& budget, const synth::CorruptionSpec& spec,
                                       ControllerMode mode, const ControllerSchedule& schedule) {
  if (batch.empty()) throw ContractError("controller step: empty batch");
  const auto frozen_before = parameter_hash(net.parameters());
  const bool supervised = mode == ControllerMode::corruption_supervised || mode == ControllerMode::plain_st;
  const bool task_on = !(supervised && schedule.corruption_only_first_epoch && schedule.epoch == 1);
  const SelectMode select = mode == ControllerMode::plain_st ? SelectMode::plain_st : SelectMode::gumbel_st;

  opt.zero_grad();
  std::vector<Tensor> task, corr;
  double task_value = 0;
  for (const auto* s : batch) {
    const Tensor e = perceive(c, s->inputs);
    if (supervised) {
      corr.push_back(corruption_loss(c, corruption_head(c, e), CorruptionTarget::from_sample(c.config.head, *s, spec)));
    }
    if (task_on) {
      const auto plan = allocate(allocation_logits(c, e), c.depths, budget, rng, select);
      task.push_back(task_loss(net.config, forward_gated(net, s->inputs, plan.z), *s));
      task_value += task.back().item();
    } else {
      // Logged only; the same draws are consumed as in later epochs.
      NoGradGuard ng;
      const auto plan = allocate(allocation_logits(c, e.detach()), c.depths, budget, rng, select);
      task_value += task_loss(net.config, forward(net, s->inputs, plan.mask), *s).item();
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  ControllerLosses out;
  out.task = task_value * inv;
  std::vector<Tensor> terms;
  if (task_on) terms.push_back(scale(sum(concat_cols(task)), inv));
  if (!corr.empty()) {
    terms.push_back(scale(sum(concat_cols(corr)), inv));
    out.corruption = terms.back().item();
  }
  const Tensor total = terms.size() == 1 ? terms[0] : add(terms[0], terms[1]);
  out.total = total.item();
  if (total.requires_grad()) {
    backward(total);
    opt.step(schedule.lr);
  }
  if (parameter_hash(net.parameters()) != frozen_before) {
    throw InvariantError("controller step modified the frozen Stage 1 network");
  }
  return out;
}

// ---- autoencoder initialization ------------------------------------------------------------

std::vector<Tensor> decode(const ControllerNet& c, const Tensor& e_corr) {
  if (c.decoders.empty()) throw ConfigError("controller has no decoder");
  std::vector<Tensor> out;
  for (std::size_t m = 0; m < c.decoders.size(); ++m) {
    const std::size_t half = c.downsampled_size(m) / 2;
    Tensor h = gelu(c.decoders[m].expand.forward(e_corr));
    h = reshape(h, {c.config.conv2_channels, half, half});
    out.push_back(nn::deconv2d_forward(h, c.decoders[m].deconv));
  }
  return out;
}

Tensor reconstruction_loss(const ControllerNet& c, const std::vector<Matrix>& inputs) {
  const auto recon = decode(c, perceive(c, inputs));
  std::vector<Tensor> parts;
  for (std::size_t m = 0; m < recon.size(); ++m) {
    const auto& mc = c.modalities[m];
    const std::size_t s0 = c.downsampled_size(m);
    const Tensor target =
        Tensor::from_matrix(Shape{mc.channels, s0, s0}, downsample_channels(inputs[m], mc, c.config.downsample));
    parts.push_back(mse(recon[m], target));
  }
  return scale(sum(concat_cols(parts)), 1.0 / static_cast<double>(parts.size()));
}

double ae_pretrain_step(const ControllerNet& c, Adam& opt, const std::vector<const synth::MultimodalSample*>& batch,
                        double lr) {
  if (batch.empty()) throw ContractError("autoencoder step: empty batch");
  opt.zero_grad();
  std::vector<Tensor> losses;
  for (const auto* s : batch) losses.push_back(reconstruction_loss(c, s->inputs));
  const Tensor total = scale(sum(concat_cols(losses)), 1.0 / static_cast<double>(batch.size()));
  if (total.requires_grad()) {
    backward(total);
    opt.step(lr);
  }
  return total.item();
}

double separation_ratio(const std::vector<RowVector>& latents, const std::vector<std::size_t>& groups) {
  if (latents.size() != groups.size() || latents.size() < 2) throw ContractError("separation_ratio: bad input");
  double between = 0, within = 0;
  std::size_t nb = 0, nw = 0;
  for (std::size_t i = 0; i < latents.size(); ++i)
    for (std::size_t j = i + 1; j < latents.size(); ++j) {
      const double d = (latents[i] - latents[j]).norm();
      if (groups[i] == groups[j]) {
        within += d;
        ++nw;
      } else {
        between += d;
        ++nb;
      }
    }
  if (nb == 0 || nw == 0) throw ContractError("separation_ratio: need two groups with two members each");
  return (between / double(nb)) / (within / double(nw));
}

// ---- providers --------------------------------------------------------------------------

MaskProvider upper_bound_provider(const std::vector<std::size_t>& depths) {
  const LayerMask all = LayerMask::all(depths, true);
  return [all](const synth::MultimodalSample&) { return all; };
}

MaskProvider naive_provider(const BudgetSpec& budget, const std::vector<std::size_t>& depths) {
  const LayerMask m = naive_allocation(budget.budget, depths, budget.costs);
  return [m](const synth::MultimodalSample&) { return m; };
}

MaskProvider unimodal_provider(std::size_t m, const BudgetSpec& budget, const std::vector<std::size_t>& depths) {
  if (m >= depths.size()) throw ContractError("unimodal provider: modality out of range");
  const std::size_t cost = budget.costs.at(m);
  if (budget.budget % cost != 0 || budget.budget / cost > depths[m] || budget.budget == 0) {
    throw BudgetError("unimodal provider: budget " + std::to_string(budget.budget) + " does not fit modality " +
                      std::to_string(m));
  }
  LayerMask mask = LayerMask::all(depths, false);
  mask.modalities[m] = every_other_mask(depths[m], budget.budget / cost);
  return [mask](const synth::MultimodalSample&) { return mask; };
}

MaskProvider every_other_provider(std::size_t keep, const std::vector<std::size_t>& depths) {
  LayerMask mask;
  for (auto d : depths) mask.modalities.push_back(every_other_mask(d, keep));
  return [mask](const synth::MultimodalSample&) { return mask; };
}

MaskProvider controller_provider(const ControllerNet& c, const BudgetSpec& budget) {
  return [&c, budget](const synth::MultimodalSample& s) {
    NoGradGuard ng;
    Rng unused(0);
    return allocate(allocation_logits(c, perceive(c, s.inputs)), c.depths, budget, unused, SelectMode::deterministic_topL)
        .mask;
  };
}

std::uint64_t controller_macs(const ControllerNet& c) {
  const auto& cfg = c.config;
  std::uint64_t total = 0;
  for (std::size_t m = 0; m < c.modalities.size(); ++m) {
    const auto& p = c.perception[m];
    const std::uint64_t s1 = p.conv1.output_size(c.downsampled_size(m)), s2 = p.conv2.output_size(s1);
    total += s1 * s1 * (p.conv1.in_channels * cfg.kernel * cfg.kernel) * p.conv1.out_channels;
    total += s2 * s2 * (p.conv2.in_channels * cfg.kernel * cfg.kernel) * p.conv2.out_channels;
    total += p.embed.macs(1);
  }
  total += c.fusion.size() * layer_flops(c.modalities.size() + 1, cfg.embed_dim);
  total += c.alloc.macs(1);
  return total;
}

// ---- logs -------------------------------------------------------------------------------

void write_plan_log(std::ostream& os, const EvalReport& report, const std::vector<synth::MultimodalSample>& samples,
                    std::size_t budget) {
  os << "sample_id,budget,mask,corruption,metric\n" << std::setprecision(10);
  for (std::size_t i = 0; i < report.records.size(); ++i) {
    const auto& r = report.records[i];
    os << r.id << ',' << budget << ',' << r.mask.to_string() << ',';
    for (std::size_t m = 0; m < samples[i].corruption.size(); ++m) os << (m ? ";" : "") << samples[i].corruption[m];
    os << ',' << r.error << '\n';
  }
}

void write_latent_dump(std::ostream& os, const ControllerNet& c, const std::vector<synth::MultimodalSample>& samples,
                       const synth::CorruptionSpec& spec) {
  os << "sample_id";
  for (std::size_t k = 0; k < c.config.embed_dim; ++k) os << ",e" << k;
  os << ",label\n" << std::setprecision(10);
  NoGradGuard ng;
  for (const auto& s : samples) {
    const Tensor e = perceive(c, s.inputs);
    os << s.id;
    for (double v : e.data()) os << ',' << v;
    os << ',' << s.corruption_category(spec) << '\n';
  }
}

void save_controller(const std::filesystem::path& dir, const ControllerNet& c) { save_checkpoint(dir, c.parameters()); }

void load_controller(const std::filesystem::path& dir, ControllerNet& c) { restore_checkpoint(dir, c.parameters()); }

}  // namespace admn
