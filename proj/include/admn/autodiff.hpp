#pragma once

// Reverse-mode automatic differentiation over dense row-major double matrices.
//
// A Tensor is a shared handle to a graph node. Every n-d tensor is viewed as a
// matrix of shape (prod(shape[:-1]), shape.back()); a 1-d tensor of length n is
// a 1 x n row. Ops record their parents and a backward closure when gradient
// recording is enabled and at least one input requires a gradient.
//
// Gradient semantics: backward() clears the gradients of intermediate nodes,
// then accumulates into leaves. Leaf gradients keep accumulating across calls
// until zero_grad() is invoked explicitly.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace admn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  // Leaf constructors. `data` is row-major.
  static Tensor from_data(Shape shape, std::span<const double> data, bool requires_grad = false);
  static Tensor from_matrix(const Matrix& value, bool requires_grad = false);
  static Tensor from_matrix(Shape shape, const Matrix& value, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t size() const;
  Eigen::Index rows() const;
  Eigen::Index cols() const;

  const Matrix& value() const;
  std::span<const double> data() const;
  double item() const;  // scalar tensors only
  double at(std::size_t flat_index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);  // leaves only
  bool is_leaf() const;
  bool has_grad() const;
  const Matrix& grad() const;  // zeros when no gradient has been accumulated
  void zero_grad();

  // Direct mutation of a leaf's values (optimizer updates, checkpoint loads).
  Matrix& mutable_value();

  // Same values, detached from the graph.
  Tensor detach() const;

  std::uint64_t id() const;
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Backward closure: receives the output gradient and one pointer per parent;
// pointers are null for parents that do not require a gradient.
using BackwardFn = std::function<void(const Matrix& grad_out, std::span<Matrix* const> parent_grads)>;

// Builds a recorded op node. Public so tests and downstream code can define
// custom primitives.
Tensor make_op(Shape shape, Matrix value, std::vector<Tensor> parents, BackwardFn backward);

// Populates gradients of all requires_grad ancestors of a scalar loss.
void backward(const Tensor& loss);

// Gradient recording switch (thread-local).
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Thread-local multiply-accumulate counter, incremented by matrix products
// (matmul and the convolution kernels built on it).
class MacCounter {
 public:
  MacCounter();
  std::uint64_t count() const;

 private:
  std::uint64_t start_;
};
void add_macs(std::uint64_t n);

// ---- elementwise / structural ops -------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// a * s where s is a one-element tensor; gradient flows into both.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
// a (rows x n) + bias (1 x n) broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& bias);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, double s);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor slice_rows(const Tensor& a, Eigen::Index begin, Eigen::Index count);
Tensor slice_cols(const Tensor& a, Eigen::Index begin, Eigen::Index count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& a, std::span<const Eigen::Index> rows);
Tensor repeat_rows(const Tensor& row, Eigen::Index count);
// Element `flat_index` as a one-element tensor.
Tensor select(const Tensor& a, std::size_t flat_index);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // (rows x n) -> (1 x n)

Tensor gelu(const Tensor& x);  // exact erf form
Tensor relu(const Tensor& x);

// Softmax along `axis` (negative counts from the back). Only the last axis of
// an n-d tensor, or either axis of a 2-d tensor, is supported.
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x);  // along last axis
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Forward value `hard`, backward identity into `soft`.
Tensor straight_through(const Matrix& hard, const Tensor& soft);

// ---- losses ------------------------------------------------------------------

Tensor mse(const Tensor& x, const Tensor& y);  // mean over elements
Tensor l1(const Tensor& x, const Tensor& y);   // sum of absolute differences
Tensor sum_squares(const Tensor& x, const Tensor& y);
// logits: 1 x K (or length-K 1-d).
Tensor cross_entropy(const Tensor& logits, std::size_t class_index);

// ---- convolutions ------------------------------------------------------------

// x: [cin, H, W]; weight: [cout, cin*k*k]; bias: [cout]. Output [cout, Ho, Wo]
// with zero padding `pad` and stride `stride`.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t kernel,
              std::size_t stride, std::size_t pad = 0);
// x: [cin, H, W]; weight: [cin, cout*k*k]; bias: [cout]. Output
// [cout, (H-1)*stride+k, (W-1)*stride+k].
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t kernel,
                        std::size_t stride);

// ---- random numbers ----------------------------------------------------------

struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t position = 0;
  bool operator==(const RngState&) const = default;
};

// Counter-based SplitMix64 stream; the draw at a position depends only on
// (seed, position), so sequences are identical across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t position = 0);
  explicit Rng(RngState state) : Rng(state.seed, state.position) {}

  RngState state() const { return {seed_, position_}; }
  std::uint64_t next_u64();
  double uniform();  // [0, 1)
  double normal();   // Box-Muller, consumes two draws
  std::size_t below(std::size_t n);
  // Independent stream derived from this seed and a stream id; does not advance.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t position_;
};

std::uint64_t splitmix64(std::uint64_t x);

inline constexpr double kGumbelClampLo = 1e-12;
inline constexpr double kGumbelClampHi = 1.0 - 1e-12;

// i.i.d. standard Gumbel draws -log(-log(u)), u clamped to [1e-12, 1-1e-12].
Tensor sample_gumbel(Rng& rng, Shape shape);

// ---- gradient checking ---------------------------------------------------------

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // Relative error uses max(|analytic|, |numeric|, floor) as denominator.
  double floor = 1e-6;
};

struct GradCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> relative_error;
  double max_error = 0.0;
  bool passed = false;
};

using RandomFn = std::function<Tensor(const Tensor&, Rng&)>;
using PlainFn = std::function<Tensor(const Tensor&)>;

// Compares backward() against central differences for every element of `x`.
// `f` is evaluated with a fresh copy of `rng` each time; it must be
// deterministic given that state.
GradCheckReport grad_check(const RandomFn& f, const Tensor& x, const RngState& rng,
                           GradCheckOptions options = {});
GradCheckReport grad_check(const PlainFn& f, const Tensor& x, GradCheckOptions options = {});

}  // namespace admn
