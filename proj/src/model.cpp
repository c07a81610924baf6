#include "admn/model.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "admn/errors.hpp"

namespace admn {

MultimodalNetConfig MultimodalNetConfig::toy() {
  MultimodalNetConfig c;
  ModalityConfig a;
  a.name = "blob";
  ModalityConfig b = a;
  b.name = "ring";
  c.modalities = {a, b};
  return c;
}

void MultimodalNetConfig::validate() const {
  if (modalities.empty()) throw ConfigError("model: at least one modality is required");
  for (const auto& m : modalities) {
    const std::string where = "model: modality '" + m.name + "': ";
    if (m.depth == 0) throw ConfigError(where + "depth must be >= 1");
    if (m.freeze >= m.depth) {
      throw ConfigError(where + "freeze boundary " + std::to_string(m.freeze) + " must be below depth " +
                        std::to_string(m.depth));
    }
    if (m.heads == 0 || m.dim % m.heads != 0) throw ConfigError(where + "heads must divide dim");
    if (m.patch == 0 || m.height % m.patch != 0 || m.width % m.patch != 0) {
      throw ConfigError(where + "patch must divide the image size");
    }
    if (m.channels == 0) throw ConfigError(where + "channels must be >= 1");
  }
  if (fusion_heads == 0 || fusion_dim % fusion_heads != 0) throw ConfigError("model: fusion heads must divide fusion dim");
  if (outputs == 0) throw ConfigError("model: outputs must be >= 1");
  if (head_hidden == 0) throw ConfigError("model: head_hidden must be >= 1");
}

std::vector<std::size_t> MultimodalNetConfig::depths() const {
  std::vector<std::size_t> d;
  for (const auto& m : modalities) d.push_back(m.depth);
  return d;
}

std::size_t MultimodalNetConfig::total_layers() const {
  std::size_t n = 0;
  for (const auto& m : modalities) n += m.depth;
  return n;
}

std::size_t MultimodalNetConfig::fusion_tokens() const {
  std::size_t t = 1;
  for (const auto& m : modalities) t += m.tokens();
  return t;
}

MultimodalNet MultimodalNet::init(const MultimodalNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  MultimodalNet net;
  net.config = cfg;
  Rng rng(seed);
  for (const auto& m : cfg.modalities) {
    Backbone b;
    b.patch = nn::Linear::init(rng, m.patch_size(), m.dim);
    for (std::size_t j = 0; j < m.depth; ++j) b.layers.push_back(nn::TransformerLayerParams::init(rng, m.dim, m.heads));
    net.backbones.push_back(std::move(b));
    net.projections.push_back(nn::Linear::init(rng, m.dim, cfg.fusion_dim));
  }
  for (std::size_t k = 0; k < cfg.fusion_layers; ++k)
    net.fusion.push_back(nn::TransformerLayerParams::init(rng, cfg.fusion_dim, cfg.fusion_heads));
  net.readout = nn::glorot(rng, 1, cfg.fusion_dim, {1, cfg.fusion_dim});
  net.final_gain = Tensor::full({1, cfg.fusion_dim}, 1.0, true);
  net.final_bias = Tensor::zeros({1, cfg.fusion_dim}, true);
  net.head = nn::Mlp::init(rng, cfg.fusion_dim, cfg.head_hidden, cfg.outputs);
  return net;
}

std::vector<NamedTensor> MultimodalNet::parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < backbones.size(); ++i) {
    const auto& m = config.modalities[i];
    const std::string pre = "m" + std::to_string(i);
    backbones[i].patch.collect(out, pre + ".patch", m.freeze > 0 ? "frozen" : "backbone");
    for (std::size_t j = 0; j < backbones[i].layers.size(); ++j)
      backbones[i].layers[j].collect(out, pre + ".layer" + std::to_string(j), j < m.freeze ? "frozen" : "backbone");
    projections[i].collect(out, pre + ".proj", "fusion");
  }
  for (std::size_t k = 0; k < fusion.size(); ++k) fusion[k].collect(out, "fusion" + std::to_string(k), "fusion");
  out.push_back({"readout", readout, "fusion"});
  out.push_back({"final.gain", final_gain, "head"});
  out.push_back({"final.bias", final_bias, "head"});
  head.collect(out, "head", "head");
  return out;
}

std::vector<NamedTensor> MultimodalNet::tunable_parameters() const {
  std::vector<NamedTensor> out;
  for (auto& p : parameters())
    if (p.role != "frozen") out.push_back(p);
  return out;
}

void MultimodalNet::apply_freeze() {
  for (auto& p : parameters()) {
    Tensor t = p.tensor;
    t.set_requires_grad(p.role != "frozen");
  }
}

void MultimodalNet::set_requires_grad(bool on) { nn::set_requires_grad(parameters(), on); }

Tensor image_tensor(const Matrix& image, const ModalityConfig& m) {
  if (static_cast<std::size_t>(image.size()) != m.channels * m.height * m.width) {
    throw DimensionError("modality '" + m.name + "': input has " + std::to_string(image.size()) + " values, expected " +
                         std::to_string(m.channels * m.height * m.width));
  }
  return Tensor::from_matrix(Shape{m.channels, m.height, m.width}, image);
}

Tensor backbone_forward(const Backbone& b, const ModalityConfig& m, const Tensor& image, const std::vector<bool>& mask) {
  if (mask.size() != b.layers.size()) {
    throw ContractError("backbone '" + m.name + "': mask length " + std::to_string(mask.size()) + " != depth " +
                        std::to_string(b.layers.size()));
  }
  Tensor x = nn::add_positional(nn::patch_embed(image, m.patch, b.patch));
  for (std::size_t j = 0; j < b.layers.size(); ++j) x = nn::transformer_layer_forward(x, b.layers[j], bool(mask[j]));
  return x;
}

Tensor backbone_forward(const Backbone& b, const ModalityConfig& m, const Tensor& image, const Tensor& gates) {
  if (gates.size() != b.layers.size()) {
    throw ContractError("backbone '" + m.name + "': gate count " + std::to_string(gates.size()) + " != depth " +
                        std::to_string(b.layers.size()));
  }
  Tensor x = nn::add_positional(nn::patch_embed(image, m.patch, b.patch));
  for (std::size_t j = 0; j < b.layers.size(); ++j) x = nn::transformer_layer_forward(x, b.layers[j], select(gates, j));
  return x;
}

Tensor fuse_and_predict(const MultimodalNet& net, const std::vector<Tensor>& embeddings) {
  if (embeddings.empty()) throw ContractError("fuse_and_predict: no modality embeddings");
  if (embeddings.size() != net.config.modalities.size()) {
    throw ContractError("fuse_and_predict: got " + std::to_string(embeddings.size()) + " embeddings for " +
                        std::to_string(net.config.modalities.size()) + " modalities");
  }
  std::vector<Tensor> parts{net.readout};
  for (std::size_t m = 0; m < embeddings.size(); ++m) {
    const auto t = static_cast<Eigen::Index>(net.config.modalities[m].tokens());
    if (embeddings[m].defined()) {
      parts.push_back(net.projections[m].forward(embeddings[m]));
    } else {
      parts.push_back(repeat_rows(net.projections[m].bias, t));
    }
  }
  Tensor x = concat_rows(parts);
  for (const auto& layer : net.fusion) x = nn::transformer_layer_forward(x, layer, true);
  Tensor r = layer_norm(slice_rows(x, 0, 1), net.final_gain, net.final_bias);
  return net.head.forward(r);
}

Tensor forward(const MultimodalNet& net, const std::vector<Matrix>& inputs, const LayerMask& mask,
               const std::vector<bool>& dropped) {
  const auto& cfg = net.config;
  if (inputs.size() != cfg.modalities.size()) throw ContractError("forward: wrong number of modality inputs");
  mask.check_depths(cfg.depths());
  std::vector<Tensor> emb(inputs.size());
  for (std::size_t m = 0; m < inputs.size(); ++m) {
    if ((!dropped.empty() && dropped.at(m)) || mask.active_count(m) == 0) continue;
    emb[m] = backbone_forward(net.backbones[m], cfg.modalities[m], image_tensor(inputs[m], cfg.modalities[m]),
                              mask.modalities[m]);
  }
  return fuse_and_predict(net, emb);
}

Tensor forward_gated(const MultimodalNet& net, const std::vector<Matrix>& inputs, const Tensor& z) {
  const auto& cfg = net.config;
  if (inputs.size() != cfg.modalities.size()) throw ContractError("forward: wrong number of modality inputs");
  if (z.size() != cfg.total_layers()) throw ContractError("forward_gated: gate vector length mismatch");
  std::vector<Tensor> emb(inputs.size());
  Eigen::Index offset = 0;
  for (std::size_t m = 0; m < inputs.size(); ++m) {
    const auto d = static_cast<Eigen::Index>(cfg.modalities[m].depth);
    Tensor gates = slice_cols(reshape(z, {1, z.size()}), offset, d);
    offset += d;
    if ((gates.value().array() == 0.0).all()) continue;
    emb[m] = backbone_forward(net.backbones[m], cfg.modalities[m], image_tensor(inputs[m], cfg.modalities[m]), gates);
  }
  return fuse_and_predict(net, emb);
}

Tensor task_loss(const MultimodalNetConfig& cfg, const Tensor& output, const synth::MultimodalSample& s) {
  if (cfg.task == TaskKind::classify) return cross_entropy(output, s.label_class);
  return mse(output, Tensor::from_data({1, 2}, std::vector<double>{s.z[0], s.z[1]}));
}

double task_error(const MultimodalNetConfig& cfg, const Matrix& output, const synth::MultimodalSample& s) {
  if (cfg.task == TaskKind::classify) {
    Eigen::Index k;
    output.row(0).maxCoeff(&k);
    return static_cast<std::size_t>(k) == s.label_class ? 0.0 : 1.0;
  }
  const double dx = output(0, 0) - s.z[0], dy = output(0, 1) - s.z[1];
  return std::sqrt(dx * dx + dy * dy);
}

FlopsReport predicted_macs(const MultimodalNet& net, const LayerMask& mask, const std::vector<bool>& dropped) {
  const auto& cfg = net.config;
  mask.check_depths(cfg.depths());
  FlopsReport r;
  for (std::size_t m = 0; m < cfg.modalities.size(); ++m) {
    const auto& mc = cfg.modalities[m];
    const bool off = (!dropped.empty() && dropped.at(m)) || mask.active_count(m) == 0;
    const std::string pre = "m" + std::to_string(m);
    const std::uint64_t t = mc.tokens();
    r.add(pre + ".patch", off ? 0 : t * mc.patch_size() * mc.dim);
    for (std::size_t j = 0; j < mc.depth; ++j)
      r.add(pre + ".layer" + std::to_string(j), (!off && mask.modalities[m][j]) ? layer_flops(t, mc.dim) : 0);
    r.add(pre + ".proj", off ? 0 : t * mc.dim * cfg.fusion_dim);
  }
  for (std::size_t k = 0; k < cfg.fusion_layers; ++k)
    r.add("fusion" + std::to_string(k), layer_flops(cfg.fusion_tokens(), cfg.fusion_dim));
  r.add("head", std::uint64_t(cfg.fusion_dim) * cfg.head_hidden + std::uint64_t(cfg.head_hidden) * cfg.outputs);
  return r;
}

// ---- Stage 0 ----------------------------------------------------------------------------

MaeDecoder MaeDecoder::init(Rng& rng, const ModalityConfig& m, std::size_t dim, std::size_t layers, std::size_t heads) {
  MaeDecoder d;
  d.embed = nn::Linear::init(rng, m.dim, dim);
  d.mask_token = nn::glorot(rng, 1, dim, {1, dim});
  for (std::size_t k = 0; k < layers; ++k) d.layers.push_back(nn::TransformerLayerParams::init(rng, dim, heads));
  d.predict = nn::Linear::init(rng, dim, m.patch_size());
  return d;
}

std::vector<NamedTensor> MaeDecoder::parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  embed.collect(out, prefix + ".embed", "decoder");
  out.push_back({prefix + ".mask_token", mask_token, "decoder"});
  for (std::size_t k = 0; k < layers.size(); ++k) layers[k].collect(out, prefix + ".layer" + std::to_string(k), "decoder");
  predict.collect(out, prefix + ".predict", "decoder");
  return out;
}

std::size_t mae_masked_count(std::size_t tokens, double ratio) {
  if (tokens < 2) throw ConfigError("mae: need at least 2 tokens");
  const auto n = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(tokens)));
  return std::clamp<std::size_t>(n, 1, tokens - 1);
}

Tensor mae_loss(Rng& rng, const Backbone& b, const MaeDecoder& d, const ModalityConfig& m, const Matrix& image,
                double mask_ratio, double p) {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mae: mask ratio must be in (0, 1)");
  const std::size_t t = m.tokens();
  const std::size_t n_mask = mae_masked_count(t, mask_ratio);
  std::vector<std::size_t> perm(t);
  for (std::size_t i = 0; i < t; ++i) perm[i] = i;
  for (std::size_t i = t - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  std::vector<Eigen::Index> masked(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_mask));
  std::vector<Eigen::Index> visible(perm.begin() + static_cast<std::ptrdiff_t>(n_mask), perm.end());
  std::sort(masked.begin(), masked.end());
  std::sort(visible.begin(), visible.end());

  const Tensor img = image_tensor(image, m);
  Tensor tokens = nn::add_positional(nn::patch_embed(img, m.patch, b.patch));
  Tensor x = gather_rows(tokens, visible);
  const auto enc_mask = sample_training_mask(rng, {b.layers.size()}, {p, 0.0, 0.0}).modalities[0];
  for (std::size_t j = 0; j < b.layers.size(); ++j) x = nn::transformer_layer_forward(x, b.layers[j], bool(enc_mask[j]));

  Tensor e = d.embed.forward(x);
  std::vector<Tensor> cat_parts{e, d.mask_token};
  Tensor cat = concat_rows(cat_parts);
  std::vector<Eigen::Index> place(t, static_cast<Eigen::Index>(visible.size()));
  for (std::size_t k = 0; k < visible.size(); ++k) place[static_cast<std::size_t>(visible[k])] = static_cast<Eigen::Index>(k);
  Tensor full = nn::add_positional(gather_rows(cat, place));
  for (const auto& layer : d.layers) full = nn::transformer_layer_forward(full, layer, true);
  Tensor pred = d.predict.forward(full);

  const Matrix target = nn::patchify(image, m.channels, m.height, m.width, m.patch);
  Matrix target_masked(static_cast<Eigen::Index>(n_mask), target.cols());
  for (std::size_t k = 0; k < n_mask; ++k) target_masked.row(static_cast<Eigen::Index>(k)) = target.row(masked[k]);
  return mse(gather_rows(pred, masked), Tensor::from_matrix(target_masked));
}

double mae_pretrain_step(Rng& rng, const Backbone& b, const MaeDecoder& d, const ModalityConfig& m, Adam& opt,
                         const std::vector<const Matrix*>& batch, double mask_ratio, double p, double lr) {
  if (batch.empty()) throw ContractError("mae: empty batch");
  opt.zero_grad();
  std::vector<Tensor> losses;
  for (const Matrix* img : batch) losses.push_back(mae_loss(rng, b, d, m, *img, mask_ratio, p));
  Tensor total = scale(sum(concat_cols(losses)), 1.0 / static_cast<double>(batch.size()));
  backward(total);
  opt.step(lr);
  return total.item();
}

// ---- Stage 1 ----------------------------------------------------------------------------

double stage1_finetune_step(Rng& rng, const MultimodalNet& net, Adam& opt,
                            const std::vector<const synth::MultimodalSample*>& batch, const DropConfig& cfg,
                            double lr) {
  if (batch.empty()) throw ContractError("finetune: empty batch");
  const LayerMask mask = sample_training_mask(rng, net.config.depths(), cfg);
  const std::vector<bool> dropped = sample_modality_dropout(rng, net.config.modalities.size(), cfg.r);
  opt.zero_grad();
  std::vector<Tensor> losses;
  for (const auto* s : batch) losses.push_back(task_loss(net.config, forward(net, s->inputs, mask, dropped), *s));
  Tensor total = scale(sum(concat_cols(losses)), 1.0 / static_cast<double>(batch.size()));
  backward(total);
  opt.step(lr);
  return total.item();
}

// ---- evaluation ---------------------------------------------------------------------------

EvalReport evaluate(const MultimodalNet& net, const std::vector<synth::MultimodalSample>& samples,
                    const MaskProvider& provider) {
  if (samples.empty()) throw ContractError("evaluate: empty dataset");
  NoGradGuard no_grad;
  EvalReport r;
  double err = 0, macs = 0;
  for (const auto& s : samples) {
    EvalRecord rec;
    rec.id = s.id;
    rec.mask = provider(s);
    MacCounter counter;
    const Tensor out = forward(net, s.inputs, rec.mask);
    rec.macs = counter.count();
    rec.error = task_error(net.config, out.value(), s);
    err += rec.error;
    macs += static_cast<double>(rec.macs);
    r.records.push_back(std::move(rec));
  }
  r.mean_error = err / static_cast<double>(samples.size());
  r.mean_macs = macs / static_cast<double>(samples.size());
  return r;
}

void write_metric_csv(std::ostream& os, const std::string& split, std::size_t budget, const std::string& provider,
                      std::uint64_t seed, double metric, bool header) {
  if (header) os << "split,budget,provider,seed,metric\n";
  os << split << ',' << budget << ',' << provider << ',' << seed << ',' << std::setprecision(10) << metric << '\n';
}

void save_net(const std::filesystem::path& dir, const MultimodalNet& net) { save_checkpoint(dir, net.parameters()); }

void load_net(const std::filesystem::path& dir, MultimodalNet& net) { restore_checkpoint(dir, net.parameters()); }

}  // namespace admn
