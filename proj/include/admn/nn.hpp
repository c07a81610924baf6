#pragma once

// Transformer encoder layers, patch embedding and small convolutions.

#include <string>
#include <vector>

#include "admn/autodiff.hpp"
#include "admn/tensor_io.hpp"

namespace admn::nn {

// Uniform in +-sqrt(6 / (fan_in + fan_out)).
Tensor glorot(Rng& rng, std::size_t fan_in, std::size_t fan_out, Shape shape);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [1, out]

  static Linear init(Rng& rng, std::size_t in, std::size_t out);
  Tensor forward(const Tensor& x) const;
  std::uint64_t macs(std::size_t rows) const;
  void collect(std::vector<NamedTensor>& out, const std::string& prefix, const std::string& role) const;
};

// Two linear maps with a GELU in between.
struct Mlp {
  Linear fc1;
  Linear fc2;

  static Mlp init(Rng& rng, std::size_t in, std::size_t hidden, std::size_t out);
  Tensor forward(const Tensor& x) const;
  std::uint64_t macs(std::size_t rows) const;
  void collect(std::vector<NamedTensor>& out, const std::string& prefix, const std::string& role) const;
};

struct TransformerLayerParams {
  std::size_t dim = 0;
  std::size_t heads = 0;
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;  // [dim, dim]
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1;  // [dim, 4 dim], [1, 4 dim]
  Tensor w2, b2;  // [4 dim, dim], [1, dim]

  static TransformerLayerParams init(Rng& rng, std::size_t dim, std::size_t heads);
  std::size_t head_dim() const { return dim / heads; }
  void validate() const;
  void collect(std::vector<NamedTensor>& out, const std::string& prefix, const std::string& role) const;
  void set_requires_grad(bool on);
};

// Multi-head scaled dot-product self-attention (scale 1/sqrt(dim/heads)),
// followed by the output projection.
Tensor mha_forward(const Tensor& x, const TransformerLayerParams& p);

// Per-head attention weights [t, t], exposed for inspection.
std::vector<Matrix> attention_weights(const Tensor& x, const TransformerLayerParams& p);

// Pre-norm residual block: h = x + MHA(LN1(x)); out = h + MLP(LN2(h)).
// An inactive layer returns `x` itself.
Tensor transformer_layer_forward(const Tensor& x, const TransformerLayerParams& p, bool active);

// Gated variant used for straight-through training: both residual branches
// are scaled by the one-element `gate`. A gate of exactly 0 leaves x unchanged.
Tensor transformer_layer_forward(const Tensor& x, const TransformerLayerParams& p, const Tensor& gate);

// Rearranges a [c, H, W] array into [(H/patch)*(W/patch), c*patch*patch]
// rows, patches in row-major order, each flattened as (channel, y, x).
Matrix patchify(const Matrix& image, std::size_t channels, std::size_t height, std::size_t width, std::size_t patch);

// Inverse of patchify.
Matrix unpatchify(const Matrix& patches, std::size_t channels, std::size_t height, std::size_t width,
                  std::size_t patch);

// Linear projection of each patch: [t, c*p*p] -> [t, d].
Tensor patch_embed(const Tensor& image, std::size_t patch, const Linear& proj);

// Fixed sinusoidal encodings: pe[t][2i] = sin(t / 10000^(2i/d)), pe[t][2i+1] = cos(...).
Matrix sinusoidal_positions(std::size_t tokens, std::size_t dim);
Tensor add_positional(const Tensor& x);

struct ConvLayerParams {
  std::size_t kernel = 3;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Tensor weight;  // [out, in*k*k]
  Tensor bias;    // [1, out]

  static ConvLayerParams init(Rng& rng, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                              std::size_t padding = 0);
  void validate() const;
  std::size_t output_size(std::size_t input) const { return (input + 2 * padding - kernel) / stride + 1; }
  void collect(std::vector<NamedTensor>& out, const std::string& prefix, const std::string& role) const;
};

// Cross-correlation plus bias; zero padding only when `padding` is set.
Tensor conv2d_forward(const Tensor& x, const ConvLayerParams& p);

struct DeconvLayerParams {
  std::size_t kernel = 2;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t stride = 2;
  Tensor weight;  // [in, out*k*k]
  Tensor bias;    // [1, out]

  static DeconvLayerParams init(Rng& rng, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride);
  std::size_t output_size(std::size_t input) const { return (input - 1) * stride + kernel; }
  void collect(std::vector<NamedTensor>& out, const std::string& prefix, const std::string& role) const;
};

Tensor deconv2d_forward(const Tensor& x, const DeconvLayerParams& p);

void set_requires_grad(const std::vector<NamedTensor>& params, bool on);

}  // namespace admn::nn
