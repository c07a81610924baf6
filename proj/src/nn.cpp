#include "admn/nn.hpp"

#include <cmath>

#include "admn/errors.hpp"

namespace admn::nn {

Tensor glorot(Rng& rng, std::size_t fan_in, std::size_t fan_out, Shape shape) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = (2.0 * rng.uniform() - 1.0) * bound;
  return Tensor::from_data(std::move(shape), v, true);
}

// ---- Linear / Mlp ---------------------------------------------------------------

Linear Linear::init(Rng& rng, std::size_t in, std::size_t out) {
  return {glorot(rng, in, out, {in, out}), Tensor::zeros({1, out}, true)};
}

Tensor Linear::forward(const Tensor& x) const { return add_row(matmul(x, weight), bias); }

std::uint64_t Linear::macs(std::size_t rows) const {
  return static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(weight.rows() * weight.cols());
}

void Linear::collect(std::vector<NamedTensor>& out, const std::string& prefix, const std::string& role) const {
  out.push_back({prefix + ".weight", weight, role});
  out.push_back({prefix + ".bias", bias, role});
}

Mlp Mlp::init(Rng& rng, std::size_t in, std::size_t hidden, std::size_t out) {
  Linear a = Linear::init(rng, in, hidden);
  Linear b = Linear::init(rng, hidden, out);
  return {a, b};
}

Tensor Mlp::forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

std::uint64_t Mlp::macs(std::size_t rows) const { return fc1.macs(rows) + fc2.macs(rows); }

void Mlp::collect(std::vector<NamedTensor>& out, const std::string& prefix, const std::string& role) const {
  fc1.collect(out, prefix + ".fc1", role);
  fc2.collect(out, prefix + ".fc2", role);
}

// ---- transformer ------------------------------------------------------------------

TransformerLayerParams TransformerLayerParams::init(Rng& rng, std::size_t dim, std::size_t heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("transformer layer: heads (" + std::to_string(heads) + ") must divide dim (" +
                      std::to_string(dim) + ")");
  }
  TransformerLayerParams p;
  p.dim = dim;
  p.heads = heads;
  p.ln1_gain = Tensor::full({1, dim}, 1.0, true);
  p.ln1_bias = Tensor::zeros({1, dim}, true);
  p.wq = glorot(rng, dim, dim, {dim, dim});
  p.wk = glorot(rng, dim, dim, {dim, dim});
  p.wv = glorot(rng, dim, dim, {dim, dim});
  p.wo = glorot(rng, dim, dim, {dim, dim});
  p.ln2_gain = Tensor::full({1, dim}, 1.0, true);
  p.ln2_bias = Tensor::zeros({1, dim}, true);
  p.w1 = glorot(rng, dim, 4 * dim, {dim, 4 * dim});
  p.b1 = Tensor::zeros({1, 4 * dim}, true);
  p.w2 = glorot(rng, 4 * dim, dim, {4 * dim, dim});
  p.b2 = Tensor::zeros({1, dim}, true);
  return p;
}

void TransformerLayerParams::validate() const {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("transformer layer: heads (" + std::to_string(heads) + ") must divide dim (" +
                      std::to_string(dim) + ")");
  }
  const auto d = static_cast<Eigen::Index>(dim);
  auto check = [](const Tensor& t, Eigen::Index r, Eigen::Index c, const char* name) {
    if (t.rows() != r || t.cols() != c) {
      throw DimensionError(std::string("transformer layer: ") + name + " has shape " + shape_string(t.shape()));
    }
  };
  check(wq, d, d, "wq");
  check(wk, d, d, "wk");
  check(wv, d, d, "wv");
  check(wo, d, d, "wo");
  check(w1, d, 4 * d, "w1");
  check(b1, 1, 4 * d, "b1");
  check(w2, 4 * d, d, "w2");
  check(b2, 1, d, "b2");
  check(ln1_gain, 1, d, "ln1_gain");
  check(ln2_gain, 1, d, "ln2_gain");
}

void TransformerLayerParams::collect(std::vector<NamedTensor>& out, const std::string& prefix,
                                     const std::string& role) const {
  out.push_back({prefix + ".ln1_gain", ln1_gain, role});
  out.push_back({prefix + ".ln1_bias", ln1_bias, role});
  out.push_back({prefix + ".wq", wq, role});
  out.push_back({prefix + ".wk", wk, role});
  out.push_back({prefix + ".wv", wv, role});
  out.push_back({prefix + ".wo", wo, role});
  out.push_back({prefix + ".ln2_gain", ln2_gain, role});
  out.push_back({prefix + ".ln2_bias", ln2_bias, role});
  out.push_back({prefix + ".w1", w1, role});
  out.push_back({prefix + ".b1", b1, role});
  out.push_back({prefix + ".w2", w2, role});
  out.push_back({prefix + ".b2", b2, role});
}

void TransformerLayerParams::set_requires_grad(bool on) {
  std::vector<NamedTensor> all;
  collect(all, "", "");
  nn::set_requires_grad(all, on);
}

namespace {

struct AttentionParts {
  std::vector<Tensor> weights;
  std::vector<Tensor> heads;
};

AttentionParts attention_parts(const Tensor& x, const TransformerLayerParams& p) {
  p.validate();
  if (x.cols() != static_cast<Eigen::Index>(p.dim)) {
    throw DimensionError("mha: input " + shape_string(x.shape()) + " does not match model dim " +
                         std::to_string(p.dim));
  }
  const auto dh = static_cast<Eigen::Index>(p.head_dim());
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = matmul(x, p.wq);
  Tensor k = matmul(x, p.wk);
  Tensor v = matmul(x, p.wv);
  AttentionParts parts;
  for (std::size_t h = 0; h < p.heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    Tensor qh = slice_cols(q, off, dh);
    Tensor kh = slice_cols(k, off, dh);
    Tensor vh = slice_cols(v, off, dh);
    Tensor a = softmax(scale(matmul(qh, transpose(kh)), scale_factor));
    parts.heads.push_back(matmul(a, vh));
    parts.weights.push_back(a);
  }
  return parts;
}

Tensor mlp_branch(const Tensor& x, const TransformerLayerParams& p) {
  return add_row(matmul(gelu(add_row(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

}  // namespace

Tensor mha_forward(const Tensor& x, const TransformerLayerParams& p) {
  auto parts = attention_parts(x, p);
  return matmul(concat_cols(parts.heads), p.wo);
}

std::vector<Matrix> attention_weights(const Tensor& x, const TransformerLayerParams& p) {
  NoGradGuard guard;
  std::vector<Matrix> out;
  for (auto& w : attention_parts(x, p).weights) out.push_back(w.value());
  return out;
}

Tensor transformer_layer_forward(const Tensor& x, const TransformerLayerParams& p, bool active) {
  if (!active) return x;
  Tensor h = add(x, mha_forward(layer_norm(x, p.ln1_gain, p.ln1_bias), p));
  return add(h, mlp_branch(layer_norm(h, p.ln2_gain, p.ln2_bias), p));
}

Tensor transformer_layer_forward(const Tensor& x, const TransformerLayerParams& p, const Tensor& gate) {
  Tensor h = add(x, mul_scalar(mha_forward(layer_norm(x, p.ln1_gain, p.ln1_bias), p), gate));
  return add(h, mul_scalar(mlp_branch(layer_norm(h, p.ln2_gain, p.ln2_bias), p), gate));
}

// ---- patches and positions -----------------------------------------------------------

Matrix patchify(const Matrix& image, std::size_t channels, std::size_t height, std::size_t width, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ConfigError("patch size " + std::to_string(patch) + " must divide image " + std::to_string(height) + "x" +
                      std::to_string(width));
  }
  if (static_cast<std::size_t>(image.size()) != channels * height * width) {
    throw DimensionError("patchify: image has " + std::to_string(image.size()) + " values, expected " +
                         std::to_string(channels * height * width));
  }
  const std::size_t py = height / patch, px = width / patch;
  Matrix out(static_cast<Eigen::Index>(py * px), static_cast<Eigen::Index>(channels * patch * patch));
  const double* src = image.data();
  for (std::size_t ty = 0; ty < py; ++ty)
    for (std::size_t tx = 0; tx < px; ++tx)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            out(static_cast<Eigen::Index>(ty * px + tx), static_cast<Eigen::Index>((c * patch + y) * patch + x)) =
                src[(c * height + ty * patch + y) * width + tx * patch + x];
  return out;
}

Matrix unpatchify(const Matrix& patches, std::size_t channels, std::size_t height, std::size_t width,
                  std::size_t patch) {
  const std::size_t py = height / patch, px = width / patch;
  if (patches.rows() != static_cast<Eigen::Index>(py * px) ||
      patches.cols() != static_cast<Eigen::Index>(channels * patch * patch)) {
    throw DimensionError("unpatchify: patch matrix does not match geometry");
  }
  Matrix out(static_cast<Eigen::Index>(channels * height), static_cast<Eigen::Index>(width));
  double* dst = out.data();
  for (std::size_t ty = 0; ty < py; ++ty)
    for (std::size_t tx = 0; tx < px; ++tx)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            dst[(c * height + ty * patch + y) * width + tx * patch + x] =
                patches(static_cast<Eigen::Index>(ty * px + tx), static_cast<Eigen::Index>((c * patch + y) * patch + x));
  return out;
}

Tensor patch_embed(const Tensor& image, std::size_t patch, const Linear& proj) {
  if (image.shape().size() != 3) {
    throw DimensionError("patch_embed: image must be [channels, height, width], got " + shape_string(image.shape()));
  }
  const auto& s = image.shape();
  Matrix rows = patchify(image.value(), s[0], s[1], s[2], patch);
  if (rows.cols() != proj.weight.rows()) {
    throw DimensionError("patch_embed: projection expects " + std::to_string(proj.weight.rows()) +
                         " inputs per patch, got " + std::to_string(rows.cols()));
  }
  // Input pixels are data, not parameters: gradients stop at the patch rows.
  return proj.forward(Tensor::from_matrix(rows));
}

Matrix sinusoidal_positions(std::size_t tokens, std::size_t dim) {
  Matrix pe(static_cast<Eigen::Index>(tokens), static_cast<Eigen::Index>(dim));
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double angle = static_cast<double>(t) * freq;
      pe(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i)) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Tensor add_positional(const Tensor& x) {
  auto pe = Tensor::from_matrix(x.shape(), sinusoidal_positions(static_cast<std::size_t>(x.rows()),
                                                                 static_cast<std::size_t>(x.cols())));
  return add(x, pe);
}

// ---- convolutions ------------------------------------------------------------------

ConvLayerParams ConvLayerParams::init(Rng& rng, std::size_t in, std::size_t out, std::size_t kernel,
                                      std::size_t stride, std::size_t padding) {
  ConvLayerParams p;
  p.kernel = kernel;
  p.in_channels = in;
  p.out_channels = out;
  p.stride = stride;
  p.padding = padding;
  p.validate();
  p.weight = glorot(rng, in * kernel * kernel, out * kernel * kernel, {out, in * kernel * kernel});
  p.bias = Tensor::zeros({1, out}, true);
  return p;
}

void ConvLayerParams::validate() const {
  if (kernel % 2 == 0) throw ConfigError("conv layer: kernel size must be odd, got " + std::to_string(kernel));
  if (stride < 1) throw ConfigError("conv layer: stride must be >= 1");
  if (in_channels == 0 || out_channels == 0) throw ConfigError("conv layer: channel counts must be positive");
}

void ConvLayerParams::collect(std::vector<NamedTensor>& out, const std::string& prefix,
                              const std::string& role) const {
  out.push_back({prefix + ".weight", weight, role});
  out.push_back({prefix + ".bias", bias, role});
}

Tensor conv2d_forward(const Tensor& x, const ConvLayerParams& p) {
  p.validate();
  if (x.shape().size() != 3 || x.shape()[0] != p.in_channels) {
    throw DimensionError("conv2d_forward: input " + shape_string(x.shape()) + " does not have " +
                         std::to_string(p.in_channels) + " channels");
  }
  return conv2d(x, p.weight, p.bias, p.kernel, p.stride, p.padding);
}

DeconvLayerParams DeconvLayerParams::init(Rng& rng, std::size_t in, std::size_t out, std::size_t kernel,
                                          std::size_t stride) {
  DeconvLayerParams p;
  p.kernel = kernel;
  p.in_channels = in;
  p.out_channels = out;
  p.stride = stride;
  p.weight = glorot(rng, in * kernel * kernel, out * kernel * kernel, {in, out * kernel * kernel});
  p.bias = Tensor::zeros({1, out}, true);
  return p;
}

void DeconvLayerParams::collect(std::vector<NamedTensor>& out, const std::string& prefix,
                                const std::string& role) const {
  out.push_back({prefix + ".weight", weight, role});
  out.push_back({prefix + ".bias", bias, role});
}

Tensor deconv2d_forward(const Tensor& x, const DeconvLayerParams& p) {
  return conv_transpose2d(x, p.weight, p.bias, p.kernel, p.stride);
}

void set_requires_grad(const std::vector<NamedTensor>& params, bool on) {
  for (const auto& nt : params) {
    Tensor t = nt.tensor;
    t.set_requires_grad(on);
  }
}

}  // namespace admn::nn
