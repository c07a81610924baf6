#include "admn/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "admn/errors.hpp"

namespace admn {

namespace detail {

struct Node {
  Shape shape;
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

}  // namespace detail

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_macs = 0;

std::pair<Eigen::Index, Eigen::Index> matrix_dims(const Shape& shape) {
  if (shape.empty()) {
    throw DimensionError("tensor shape must have at least one dimension");
  }
  for (auto d : shape) {
    if (d == 0) {
      throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
    }
  }
  if (shape.size() == 1) {
    return {1, static_cast<Eigen::Index>(shape[0])};
  }
  std::size_t rows = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
  return {static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(shape.back())};
}

std::shared_ptr<detail::Node> new_node(Shape shape, Matrix value) {
  auto [r, c] = matrix_dims(shape);
  if (value.rows() != r || value.cols() != c) {
    // Accept any matrix holding the right number of elements; storage stays row-major.
    if (value.size() != r * c) {
      throw DimensionError("value of " + std::to_string(value.size()) + " elements does not fit shape " +
                           shape_string(shape));
    }
    Matrix reshaped = Eigen::Map<const Matrix>(value.data(), r, c);
    value = std::move(reshaped);
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_scalar(const Tensor& s, const char* op) {
  if (s.size() != 1) {
    throw DimensionError(std::string(op) + ": expected a one-element tensor, got " + shape_string(s.shape()));
  }
}

Shape shape2(Eigen::Index r, Eigen::Index c) {
  return {static_cast<std::size_t>(r), static_cast<std::size_t>(c)};
}

double erf_gelu_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

Matrix softmax_rows(const Matrix& x) {
  Matrix y = x.colwise() - x.rowwise().maxCoeff();
  y = y.array().exp();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ------------------------------------------------------------------

Tensor Tensor::from_data(Shape shape, std::span<const double> data, bool requires_grad) {
  auto [r, c] = matrix_dims(shape);
  if (static_cast<Eigen::Index>(data.size()) != r * c) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_string(shape));
  }
  Matrix m = Eigen::Map<const Matrix>(data.data(), r, c);
  return from_matrix(std::move(shape), m, requires_grad);
}

Tensor Tensor::from_matrix(const Matrix& value, bool requires_grad) {
  return from_matrix(shape2(value.rows(), value.cols()), value, requires_grad);
}

Tensor Tensor::from_matrix(Shape shape, const Matrix& value, bool requires_grad) {
  if (!value.allFinite()) {
    throw NumericError("non-finite value in tensor of shape " + shape_string(shape));
  }
  auto node = new_node(std::move(shape), value);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto [r, c] = matrix_dims(shape);
  return from_matrix(std::move(shape), Matrix::Constant(r, c, v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return full({1}, v, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return static_cast<std::size_t>(node_->value.size()); }
Eigen::Index Tensor::rows() const { return node_->value.rows(); }
Eigen::Index Tensor::cols() const { return node_->value.cols(); }
const Matrix& Tensor::value() const { return node_->value; }

std::span<const double> Tensor::data() const {
  return {node_->value.data(), static_cast<std::size_t>(node_->value.size())};
}

double Tensor::item() const {
  if (size() != 1) {
    throw ContractError("item() requires a one-element tensor, got " + shape_string(shape()));
  }
  return node_->value(0, 0);
}

double Tensor::at(std::size_t flat_index) const {
  if (flat_index >= size()) throw RangeError("flat index out of range");
  return node_->value.data()[flat_index];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!node_->leaf) throw ContractError("set_requires_grad is only valid on leaf tensors");
  node_->requires_grad = on;
}

bool Tensor::is_leaf() const { return node_->leaf; }
bool Tensor::has_grad() const { return node_->grad.size() != 0; }

const Matrix& Tensor::grad() const {
  if (node_->grad.size() == 0) {
    node_->grad = Matrix::Zero(node_->value.rows(), node_->value.cols());
  }
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.resize(0, 0); }

Matrix& Tensor::mutable_value() {
  if (!node_->leaf) throw ContractError("only leaf tensors may be mutated");
  return node_->value;
}

Tensor Tensor::detach() const { return from_matrix(shape(), value(), false); }

std::uint64_t Tensor::id() const { return node_->id; }

// ---- graph machinery -----------------------------------------------------------

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

MacCounter::MacCounter() : start_(t_macs) {}
std::uint64_t MacCounter::count() const { return t_macs - start_; }
void add_macs(std::uint64_t n) { t_macs += n; }

Tensor make_op(Shape shape, Matrix value, std::vector<Tensor> parents, BackwardFn backward) {
  if (!value.allFinite()) {
    throw NumericError("non-finite value produced by op with output shape " + shape_string(shape));
  }
  auto node = new_node(std::move(shape), std::move(value));
  node->leaf = false;
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node().get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  // Node ids grow with creation time, so descending id is a reverse topological order.
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id > b->id; });

  for (auto* n : order) {
    if (!n->leaf) n->grad = Matrix::Zero(n->value.rows(), n->value.cols());
  }
  auto* root = loss.node().get();
  if (root->grad.size() == 0) root->grad = Matrix::Zero(1, 1);
  root->grad(0, 0) += 1.0;

  std::vector<Matrix*> ptrs;
  for (auto* n : order) {
    if (n->leaf || !n->backward) continue;
    ptrs.clear();
    for (auto& p : n->parents) {
      if (!p->requires_grad) {
        ptrs.push_back(nullptr);
        continue;
      }
      if (p->grad.size() == 0) p->grad = Matrix::Zero(p->value.rows(), p->value.cols());
      ptrs.push_back(&p->grad);
    }
    n->backward(n->grad, ptrs);
  }
  for (auto* n : order) {
    if (!n->leaf) n->grad.resize(0, 0);
  }
}

// ---- elementwise ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return make_op(a.shape(), a.value() + b.value(), {a, b}, [](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) *d[0] += g;
    if (d[1]) *d[1] += g;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return make_op(a.shape(), a.value() - b.value(), {a, b}, [](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) *d[0] += g;
    if (d[1]) *d[1] -= g;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return make_op(a.shape(), a.value().cwiseProduct(b.value()), {a, b},
                 [a, b](const Matrix& g, std::span<Matrix* const> d) {
                   if (d[0]) *d[0] += g.cwiseProduct(b.value());
                   if (d[1]) *d[1] += g.cwiseProduct(a.value());
                 });
}

Tensor scale(const Tensor& a, double s) {
  return make_op(a.shape(), a.value() * s, {a}, [s](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) *d[0] += g * s;
  });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  require_scalar(s, "mul_scalar");
  const double sv = s.value()(0, 0);
  return make_op(a.shape(), a.value() * sv, {a, s}, [a, sv](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) *d[0] += g * sv;
    if (d[1]) (*d[1])(0, 0) += g.cwiseProduct(a.value()).sum();
  });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw DimensionError("add_row: bias " + shape_string(bias.shape()) + " incompatible with " +
                         shape_string(a.shape()));
  }
  Matrix v = a.value().rowwise() + bias.value().row(0);
  return make_op(a.shape(), std::move(v), {a, bias}, [](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) *d[0] += g;
    if (d[1]) *d[1] += g.colwise().sum();
  });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, double s) { return scale(a, s); }

// ---- structural -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() > 2 || b.shape().size() > 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  add_macs(static_cast<std::uint64_t>(a.rows() * a.cols() * b.cols()));
  Matrix v = a.value() * b.value();
  Shape out_shape = shape2(v.rows(), v.cols());
  return make_op(std::move(out_shape), std::move(v), {a, b},
                 [a, b](const Matrix& g, std::span<Matrix* const> d) {
                   if (d[0]) d[0]->noalias() += g * b.value().transpose();
                   if (d[1]) d[1]->noalias() += a.value().transpose() * g;
                 });
}

Tensor transpose(const Tensor& a) {
  Matrix v = a.value().transpose();
  Shape out_shape = shape2(v.rows(), v.cols());
  return make_op(std::move(out_shape), std::move(v), {a}, [](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) *d[0] += g.transpose();
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  Matrix v = a.value();
  const auto r = a.rows();
  const auto c = a.cols();
  return make_op(std::move(shape), std::move(v), {a}, [r, c](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) *d[0] += Eigen::Map<const Matrix>(g.data(), r, c);
  });
}

Tensor slice_rows(const Tensor& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count <= 0 || begin + count > a.rows()) {
    throw DimensionError("slice_rows: range out of bounds for " + shape_string(a.shape()));
  }
  Matrix v = a.value().middleRows(begin, count);
  return make_op(shape2(count, a.cols()), std::move(v), {a},
                 [begin, count](const Matrix& g, std::span<Matrix* const> d) {
                   if (d[0]) d[0]->middleRows(begin, count) += g;
                 });
}

Tensor slice_cols(const Tensor& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count <= 0 || begin + count > a.cols()) {
    throw DimensionError("slice_cols: range out of bounds for " + shape_string(a.shape()));
  }
  Matrix v = a.value().middleCols(begin, count);
  return make_op(shape2(a.rows(), count), std::move(v), {a},
                 [begin, count](const Matrix& g, std::span<Matrix* const> d) {
                   if (d[0]) d[0]->middleCols(begin, count) += g;
                 });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const auto c = parts[0].cols();
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column mismatch");
    r += p.rows();
  }
  Matrix v(r, c);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    offsets.push_back(off);
    off += p.rows();
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make_op(shape2(r, c), std::move(v), parents,
                 [offsets](const Matrix& g, std::span<Matrix* const> d) {
                   for (std::size_t i = 0; i < d.size(); ++i) {
                     if (d[i]) *d[i] += g.middleRows(offsets[i], d[i]->rows());
                   }
                 });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const auto r = parts[0].rows();
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DimensionError("concat_cols: row mismatch");
    c += p.cols();
  }
  Matrix v(r, c);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make_op(shape2(r, c), std::move(v), parents,
                 [offsets](const Matrix& g, std::span<Matrix* const> d) {
                   for (std::size_t i = 0; i < d.size(); ++i) {
                     if (d[i]) *d[i] += g.middleCols(offsets[i], d[i]->cols());
                   }
                 });
}

Tensor gather_rows(const Tensor& a, std::span<const Eigen::Index> rows) {
  if (rows.empty()) throw ContractError("gather_rows: empty index list");
  Matrix v(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw RangeError("gather_rows: row index out of range");
    v.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  Shape out_shape = shape2(v.rows(), v.cols());
  return make_op(std::move(out_shape), std::move(v), {a}, [idx](const Matrix& g, std::span<Matrix* const> d) {
    if (!d[0]) return;
    for (std::size_t i = 0; i < idx.size(); ++i) d[0]->row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Tensor repeat_rows(const Tensor& row, Eigen::Index count) {
  if (row.rows() != 1 || count <= 0) throw DimensionError("repeat_rows: expects a single row and count > 0");
  Matrix v = row.value().replicate(count, 1);
  return make_op(shape2(count, row.cols()), std::move(v), {row}, [](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) *d[0] += g.colwise().sum();
  });
}

Tensor select(const Tensor& a, std::size_t flat_index) {
  if (flat_index >= a.size()) throw RangeError("select: index out of range");
  Matrix v(1, 1);
  v(0, 0) = a.value().data()[flat_index];
  return make_op({1}, std::move(v), {a}, [flat_index](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) d[0]->data()[flat_index] += g(0, 0);
  });
}

Tensor sum(const Tensor& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return make_op({1}, std::move(v), {a}, [](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) d[0]->array() += g(0, 0);
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  Matrix v(1, 1);
  v(0, 0) = a.value().sum() / n;
  return make_op({1}, std::move(v), {a}, [n](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) d[0]->array() += g(0, 0) / n;
  });
}

Tensor mean_rows(const Tensor& a) {
  const double n = static_cast<double>(a.rows());
  Matrix v = a.value().colwise().sum() / n;
  return make_op(shape2(1, a.cols()), std::move(v), {a}, [n](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) d[0]->rowwise() += g.row(0) / n;
  });
}

// ---- nonlinearities ------------------------------------------------------------------

Tensor gelu(const Tensor& x) {
  Matrix v = x.value().unaryExpr([](double t) { return t * erf_gelu_cdf(t); });
  return make_op(x.shape(), std::move(v), {x}, [x](const Matrix& g, std::span<Matrix* const> d) {
    if (!d[0]) return;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Matrix dx = x.value().unaryExpr([inv_sqrt_2pi](double t) {
      return erf_gelu_cdf(t) + t * inv_sqrt_2pi * std::exp(-0.5 * t * t);
    });
    *d[0] += g.cwiseProduct(dx);
  });
}

Tensor relu(const Tensor& x) {
  Matrix v = x.value().cwiseMax(0.0);
  return make_op(x.shape(), std::move(v), {x}, [x](const Matrix& g, std::span<Matrix* const> d) {
    if (!d[0]) return;
    *d[0] += (x.value().array() > 0.0).select(g, 0.0).matrix();
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const int nd = static_cast<int>(x.shape().size());
  const int ax = axis < 0 ? nd + axis : axis;
  if (ax < 0 || ax >= nd) throw DimensionError("softmax: axis out of range");
  if (ax != nd - 1) {
    if (nd != 2) throw DimensionError("softmax: only the last axis is supported for n-d tensors");
    return transpose(softmax(transpose(x), -1));
  }
  Matrix y = softmax_rows(x.value());
  Matrix yc = y;
  return make_op(x.shape(), std::move(y), {x}, [yc](const Matrix& g, std::span<Matrix* const> d) {
    if (!d[0]) return;
    Eigen::VectorXd dots = g.cwiseProduct(yc).rowwise().sum();
    *d[0] += yc.cwiseProduct(g.colwise() - dots);
  });
}

Tensor log_softmax(const Tensor& x) {
  const Matrix& xv = x.value();
  Eigen::VectorXd mx = xv.rowwise().maxCoeff();
  Matrix shifted = xv.colwise() - mx;
  Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log().matrix();
  Matrix out = shifted.colwise() - lse;
  Matrix p = out.array().exp();
  return make_op(x.shape(), std::move(out), {x}, [p](const Matrix& g, std::span<Matrix* const> d) {
    if (!d[0]) return;
    Eigen::VectorXd gs = g.rowwise().sum();
    *d[0] += g - p.cwiseProduct(gs.replicate(1, p.cols()));
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto n = x.cols();
  if (gain.size() != static_cast<std::size_t>(n) || bias.size() != static_cast<std::size_t>(n)) {
    throw DimensionError("layer_norm: gain/bias must have length " + std::to_string(n));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const Matrix& xv = x.value();
  Eigen::VectorXd mu = xv.rowwise().mean();
  Matrix centered = xv.colwise() - mu;
  Eigen::VectorXd var = centered.array().square().rowwise().mean();
  Eigen::VectorXd rstd = (var.array() + eps).rsqrt();
  Matrix xhat = centered.array().colwise() * rstd.array();
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  return make_op(x.shape(), std::move(y), {x, gain, bias},
                 [xhat, rstd, gain](const Matrix& g, std::span<Matrix* const> d) {
                   if (d[1]) *d[1] += g.cwiseProduct(xhat).colwise().sum();
                   if (d[2]) *d[2] += g.colwise().sum();
                   if (!d[0]) return;
                   Matrix dxhat = g.array().rowwise() * gain.value().row(0).array();
                   Eigen::VectorXd m1 = dxhat.rowwise().mean();
                   Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                   Matrix dx = dxhat.colwise() - m1;
                   dx.array() -= xhat.array().colwise() * m2.array();
                   dx.array().colwise() *= rstd.array();
                   *d[0] += dx;
                 });
}

Tensor straight_through(const Matrix& hard, const Tensor& soft) {
  if (hard.size() != static_cast<Eigen::Index>(soft.size())) {
    throw DimensionError("straight_through: hard value does not match soft tensor");
  }
  Matrix v = Eigen::Map<const Matrix>(hard.data(), soft.rows(), soft.cols());
  return make_op(soft.shape(), std::move(v), {soft}, [](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) *d[0] += g;
  });
}

// ---- losses -----------------------------------------------------------------------

Tensor mse(const Tensor& x, const Tensor& y) {
  require_same_shape(x, y, "mse");
  const double n = static_cast<double>(x.size());
  Matrix diff = x.value() - y.value();
  Matrix v(1, 1);
  v(0, 0) = diff.squaredNorm() / n;
  return make_op({1}, std::move(v), {x, y}, [diff, n](const Matrix& g, std::span<Matrix* const> d) {
    const double s = 2.0 * g(0, 0) / n;
    if (d[0]) *d[0] += diff * s;
    if (d[1]) *d[1] -= diff * s;
  });
}

Tensor sum_squares(const Tensor& x, const Tensor& y) {
  require_same_shape(x, y, "sum_squares");
  Matrix diff = x.value() - y.value();
  Matrix v(1, 1);
  v(0, 0) = diff.squaredNorm();
  return make_op({1}, std::move(v), {x, y}, [diff](const Matrix& g, std::span<Matrix* const> d) {
    const double s = 2.0 * g(0, 0);
    if (d[0]) *d[0] += diff * s;
    if (d[1]) *d[1] -= diff * s;
  });
}

Tensor l1(const Tensor& x, const Tensor& y) {
  require_same_shape(x, y, "l1");
  Matrix diff = x.value() - y.value();
  Matrix v(1, 1);
  v(0, 0) = diff.cwiseAbs().sum();
  Matrix sign = diff.unaryExpr([](double t) { return static_cast<double>((t > 0.0) - (t < 0.0)); });
  return make_op({1}, std::move(v), {x, y}, [sign](const Matrix& g, std::span<Matrix* const> d) {
    if (d[0]) *d[0] += sign * g(0, 0);
    if (d[1]) *d[1] -= sign * g(0, 0);
  });
}

Tensor cross_entropy(const Tensor& logits, std::size_t class_index) {
  if (logits.rows() != 1) throw DimensionError("cross_entropy: expects a single row of logits");
  if (class_index >= static_cast<std::size_t>(logits.cols())) {
    throw RangeError("cross_entropy: class index " + std::to_string(class_index) + " out of range for " +
                     std::to_string(logits.cols()) + " classes");
  }
  const Matrix& z = logits.value();
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  Matrix v(1, 1);
  v(0, 0) = lse - z(0, static_cast<Eigen::Index>(class_index));
  Matrix p = (z.array() - lse).exp();
  return make_op({1}, std::move(v), {logits}, [p, class_index](const Matrix& g, std::span<Matrix* const> d) {
    if (!d[0]) return;
    Matrix dz = p;
    dz(0, static_cast<Eigen::Index>(class_index)) -= 1.0;
    *d[0] += dz * g(0, 0);
  });
}

// ---- convolutions -----------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
};

ConvGeometry conv_geometry(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (x.shape().size() != 3) {
    throw DimensionError("conv2d: input must be [channels, height, width], got " + shape_string(x.shape()));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  const std::size_t cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (h + 2 * pad < kernel || w + 2 * pad < kernel) {
    throw DimensionError("conv2d: input " + shape_string(x.shape()) + " smaller than kernel " +
                         std::to_string(kernel));
  }
  return {cin, h, w, kernel, stride, pad, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1};
}

Matrix im2col(const Matrix& x, const ConvGeometry& g) {
  Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(g.ho * g.wo), static_cast<Eigen::Index>(g.cin * g.k * g.k));
  const double* src = x.data();
  for (std::size_t oy = 0; oy < g.ho; ++oy) {
    for (std::size_t ox = 0; ox < g.wo; ++ox) {
      const auto row = static_cast<Eigen::Index>(oy * g.wo + ox);
      for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            cols(row, static_cast<Eigen::Index>((c * g.k + ky) * g.k + kx)) =
                src[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(const Matrix& cols, const ConvGeometry& g, Matrix& dx) {
  double* dst = dx.data();
  for (std::size_t oy = 0; oy < g.ho; ++oy) {
    for (std::size_t ox = 0; ox < g.wo; ++ox) {
      const auto row = static_cast<Eigen::Index>(oy * g.wo + ox);
      for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dst[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                cols(row, static_cast<Eigen::Index>((c * g.k + ky) * g.k + kx));
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t kernel, std::size_t stride,
              std::size_t pad) {
  const auto g = conv_geometry(x, kernel, stride, pad);
  const auto patch = static_cast<Eigen::Index>(g.cin * g.k * g.k);
  if (weight.cols() != patch || weight.shape().size() != 2) {
    throw DimensionError("conv2d: weight " + shape_string(weight.shape()) + " does not match " +
                         std::to_string(g.cin) + " input channels and kernel " + std::to_string(kernel));
  }
  const auto cout = weight.rows();
  if (bias.size() != static_cast<std::size_t>(cout)) throw DimensionError("conv2d: bias length mismatch");
  Matrix cols = im2col(x.value(), g);
  add_macs(static_cast<std::uint64_t>(cols.rows() * patch * cout));
  Matrix y = weight.value() * cols.transpose();  // cout x (ho*wo)
  y.colwise() += bias.value().row(0).transpose();
  Shape out_shape{static_cast<std::size_t>(cout), g.ho, g.wo};
  return make_op(std::move(out_shape), std::move(y), {x, weight, bias},
                 [g, cols, weight, cout](const Matrix& grad, std::span<Matrix* const> d) {
                   Eigen::Map<const Matrix> gm(grad.data(), cout, static_cast<Eigen::Index>(g.ho * g.wo));
                   if (d[1]) d[1]->noalias() += gm * cols;
                   if (d[2]) *d[2] += gm.rowwise().sum().transpose();
                   if (d[0]) {
                     Matrix dcols = gm.transpose() * weight.value();
                     col2im_add(dcols, g, *d[0]);
                   }
                 });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t kernel,
                        std::size_t stride) {
  if (x.shape().size() != 3) {
    throw DimensionError("conv_transpose2d: input must be [channels, height, width]");
  }
  if (stride == 0 || kernel == 0) throw ConfigError("conv_transpose2d: stride and kernel must be >= 1");
  const std::size_t cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const auto kk = static_cast<Eigen::Index>(kernel * kernel);
  if (weight.rows() != static_cast<Eigen::Index>(cin) || weight.cols() % kk != 0) {
    throw DimensionError("conv_transpose2d: weight " + shape_string(weight.shape()) + " incompatible with input " +
                         shape_string(x.shape()));
  }
  const auto cout = static_cast<std::size_t>(weight.cols() / kk);
  if (bias.size() != cout) throw DimensionError("conv_transpose2d: bias length mismatch");
  const std::size_t ho = (h - 1) * stride + kernel, wo = (w - 1) * stride + kernel;
  Eigen::Map<const Matrix> xm(x.value().data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(h * w));
  add_macs(static_cast<std::uint64_t>(h * w * cin * cout * kernel * kernel));
  Matrix p = xm.transpose() * weight.value();  // (h*w) x (cout*k*k)
  Matrix y(static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(ho * wo));
  for (std::size_t c = 0; c < cout; ++c) y.row(static_cast<Eigen::Index>(c)).setConstant(bias.value()(0, static_cast<Eigen::Index>(c)));
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t iy = 0; iy < h; ++iy)
      for (std::size_t ix = 0; ix < w; ++ix)
        for (std::size_t c = 0; c < cout; ++c)
          for (std::size_t ky = 0; ky < kernel; ++ky)
            for (std::size_t kx = 0; kx < kernel; ++kx)
              fn(static_cast<Eigen::Index>(iy * w + ix), static_cast<Eigen::Index>((c * kernel + ky) * kernel + kx),
                 static_cast<Eigen::Index>(c), static_cast<Eigen::Index>((iy * stride + ky) * wo + ix * stride + kx));
  };
  for_each_tap([&](Eigen::Index pr, Eigen::Index pc, Eigen::Index c, Eigen::Index o) { y(c, o) += p(pr, pc); });
  Shape out_shape{cout, ho, wo};
  return make_op(std::move(out_shape), std::move(y), {x, weight, bias},
                 [=](const Matrix& grad, std::span<Matrix* const> d) {
                   Eigen::Map<const Matrix> gm(grad.data(), static_cast<Eigen::Index>(cout),
                                               static_cast<Eigen::Index>(ho * wo));
                   if (d[2]) *d[2] += gm.rowwise().sum().transpose();
                   if (!d[0] && !d[1]) return;
                   Matrix dp(static_cast<Eigen::Index>(h * w), weight.cols());
                   for_each_tap([&](Eigen::Index pr, Eigen::Index pc, Eigen::Index c, Eigen::Index o) {
                     dp(pr, pc) = gm(c, o);
                   });
                   Eigen::Map<const Matrix> xmb(x.value().data(), static_cast<Eigen::Index>(cin),
                                                static_cast<Eigen::Index>(h * w));
                   if (d[1]) d[1]->noalias() += xmb * dp;
                   if (d[0]) {
                     Matrix dxm = weight.value() * dp.transpose();  // cin x (h*w)
                     *d[0] += Eigen::Map<const Matrix>(dxm.data(), d[0]->rows(), d[0]->cols());
                   }
                 });
}

// ---- random numbers -------------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed, std::uint64_t position) : seed_(seed), key_(splitmix64(seed)), position_(position) {}

std::uint64_t Rng::next_u64() {
  const std::uint64_t v = splitmix64(key_ + 0x9E3779B97F4A7C15ULL * position_);
  ++position_;
  return v;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw RangeError("Rng::below requires n > 0");
  const unsigned __int128 prod = static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::size_t>(prod >> 64);
}

Rng Rng::fork(std::uint64_t stream) const {
  return Rng(splitmix64(seed_ ^ splitmix64(stream ^ 0x632BE59BD9B4E019ULL)), 0);
}

Tensor sample_gumbel(Rng& rng, Shape shape) {
  const auto n = shape_size(shape);
  std::vector<double> draws(n);
  for (auto& g : draws) {
    const double u = std::clamp(rng.uniform(), kGumbelClampLo, kGumbelClampHi);
    g = -std::log(-std::log(u));
  }
  return Tensor::from_data(std::move(shape), draws);
}

// ---- gradient checking ----------------------------------------------------------------

GradCheckReport grad_check(const RandomFn& f, const Tensor& x, const RngState& state, GradCheckOptions options) {
  if (!(options.h >= 1e-7 && options.h <= 1e-3)) {
    throw ConfigError("grad_check: step h must lie in [1e-7, 1e-3]");
  }
  auto eval = [&](const Matrix& v) {
    NoGradGuard guard;
    Rng rng(state);
    Tensor out = f(Tensor::from_matrix(x.shape(), v), rng);
    if (out.size() != 1) throw ContractError("grad_check: function must return a scalar");
    return out.item();
  };

  const double base_a = eval(x.value());
  const double base_b = eval(x.value());
  if (base_a != base_b) {
    throw ContractError("grad_check: function is not deterministic under a fixed RngState");
  }

  Tensor leaf = Tensor::from_matrix(x.shape(), x.value(), true);
  {
    Rng rng(state);
    Tensor out = f(leaf, rng);
    backward(out);
  }
  const Matrix analytic = leaf.grad();

  GradCheckReport report;
  const auto n = static_cast<Eigen::Index>(x.size());
  Matrix probe = x.value();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + options.h;
    const double fp = eval(probe);
    probe.data()[i] = orig - options.h;
    const double fm = eval(probe);
    probe.data()[i] = orig;
    const double num = (fp - fm) / (2.0 * options.h);
    const double ana = analytic.data()[i];
    const double denom = std::max({std::abs(ana), std::abs(num), options.floor});
    const double err = std::abs(ana - num) / denom;
    report.analytic.push_back(ana);
    report.numeric.push_back(num);
    report.relative_error.push_back(err);
    report.max_error = std::max(report.max_error, err);
  }
  report.passed = report.max_error < options.tol;
  return report;
}

GradCheckReport grad_check(const PlainFn& f, const Tensor& x, GradCheckOptions options) {
  return grad_check([&f](const Tensor& t, Rng&) { return f(t); }, x, RngState{}, options);
}

}  // namespace admn
