#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "admn/autodiff.hpp"
#include "admn/errors.hpp"
#include "admn/tensor_io.hpp"
#include "doctest.h"

using namespace admn;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Naive triple loop, kept independent of Eigen's product kernels.
Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out = Matrix::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  return out;
}

Tensor t2(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (auto r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return Tensor::from_matrix(m);
}

Tensor t1(std::vector<double> v) { return Tensor::from_data({v.size()}, v); }

}  // namespace

TEST_CASE("matmul examples") {
  auto a = t2({{1, 2}, {3, 4}});
  auto id = Tensor::from_matrix(Matrix::Identity(2, 2));
  CHECK(matmul(a, id).value() == a.value());

  auto b = t2({{5, 6}, {7, 8}});
  Matrix expected(2, 2);
  expected << 19, 22, 43, 50;
  CHECK(matmul(a, b).value() == expected);
  CHECK(naive_matmul(a.value(), b.value()) == expected);

  auto row = Tensor::full({1, 4}, 1.0);
  auto col = Tensor::full({4, 1}, 1.0);
  CHECK(matmul(row, col).item() == 4.0);

  Rng rng(7);
  Matrix x = random_matrix(rng, 5, 3), y = random_matrix(rng, 3, 4);
  Matrix got = matmul(Tensor::from_matrix(x), Tensor::from_matrix(y)).value();
  CHECK((got - naive_matmul(x, y)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax examples") {
  auto u = softmax(t1({0, 0, 0, 0}));
  for (double v : u.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  auto big = softmax(t1({1000, 0}));
  CHECK(big.at(0) == doctest::Approx(1.0));
  CHECK(big.at(1) < 1e-300);

  // 40-digit evaluation of exp(i)/sum exp.
  const double oracle[3] = {0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953};
  auto s = softmax(t1({1, 2, 3}));
  for (int i = 0; i < 3; ++i) CHECK(std::abs(s.at(static_cast<std::size_t>(i)) - oracle[i]) < 1e-12);

  // Column softmax equals row softmax of the transpose.
  Rng rng(3);
  Matrix m = random_matrix(rng, 3, 4);
  auto col = softmax(Tensor::from_matrix(m), 0);
  auto row = softmax(Tensor::from_matrix(Matrix(m.transpose())), -1);
  CHECK((col.value() - row.value().transpose()).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto r = static_cast<Eigen::Index>(1 + rng.below(5));
    const auto c = static_cast<Eigen::Index>(1 + rng.below(9));
    auto y = softmax(Tensor::from_matrix(random_matrix(rng, r, c, 5.0)));
    for (Eigen::Index i = 0; i < r; ++i) CHECK(std::abs(y.value().row(i).sum() - 1.0) < 1e-12);
  }
}

TEST_CASE("layer_norm examples") {
  auto g = Tensor::full({4}, 1.0), b = Tensor::zeros({4});
  auto constant = layer_norm(t1({3, 3, 3, 3}), g, b);
  for (double v : constant.data()) CHECK(v == 0.0);

  auto g2 = Tensor::full({2}, 1.0), b2 = Tensor::zeros({2});
  auto pm = layer_norm(t1({1, -1}), g2, b2, 1e-300);
  CHECK(pm.at(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pm.at(1) == doctest::Approx(-1.0).epsilon(1e-12));

  Rng rng(5);
  Matrix row = random_matrix(rng, 1, 16, 3.0);
  auto g16 = Tensor::full({16}, 1.0), b16 = Tensor::zeros({16});
  auto y = layer_norm(Tensor::from_matrix(row), g16, b16, 1e-5).value();
  const double m = y.mean();
  const double var = (y.array() - m).square().mean();
  CHECK(std::abs(m) < 1e-9);
  CHECK(std::abs(var - 1.0) < 1e-6);
}

TEST_CASE("pointwise and loss examples") {
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(cross_entropy(t1({10, -10}), 0).item() < 1e-4);
  CHECK(l1(t1({2, 0}), t1({1, 1})).item() == 2.0);
  CHECK(mse(t1({2, 0}), t1({1, 1})).item() == 1.0);
  CHECK_THROWS_AS(cross_entropy(t1({1, 2}), 2), RangeError);
}

TEST_CASE("non-finite forward values raise") {
  CHECK_THROWS_AS(scale(Tensor::scalar(1e300), 1e300), NumericError);
  std::vector<double> bad{std::nan("")};
  CHECK_THROWS_AS(Tensor::from_data({1}, bad), NumericError);
}

TEST_CASE("backward examples") {
  auto x = Tensor::from_data({3}, std::vector<double>{1, 2, 3}, true);
  backward(sum(x));
  CHECK(x.grad() == Matrix::Ones(1, 3));

  // Accumulation across calls until reset.
  backward(sum(x));
  CHECK(x.grad() == Matrix::Constant(1, 3, 2.0));
  x.zero_grad();
  CHECK(x.grad() == Matrix::Zero(1, 3));

  // mse is a mean: d/dx (x - 0)^2 / n with n = 1 gives 2x = 4.
  auto x2 = Tensor::from_data({1}, std::vector<double>{2}, true);
  backward(mse(x2, Tensor::zeros({1})));
  CHECK(x2.grad()(0, 0) == doctest::Approx(4.0));
  // n = 2: 2 * x / n.
  auto x3 = Tensor::from_data({2}, std::vector<double>{2, 2}, true);
  backward(mse(x3, Tensor::zeros({2})));
  CHECK(x3.grad()(0, 0) == doctest::Approx(2.0));

  CHECK_THROWS_AS(backward(x), ContractError);
}

TEST_CASE("two-layer composition matches central differences") {
  Rng rng(21);
  auto w1 = Tensor::from_matrix(random_matrix(rng, 4, 6));
  auto w2 = Tensor::from_matrix(random_matrix(rng, 6, 3));
  auto x = Tensor::from_matrix(random_matrix(rng, 2, 4));
  auto f = [&](const Tensor& in) { return sum(mul(matmul(gelu(matmul(in, w1)), w2), matmul(gelu(matmul(in, w1)), w2))); };
  auto report = grad_check(f, x, {.h = 1e-5, .tol = 1e-4});
  CHECK(report.passed);
  CHECK(report.max_error < 1e-4);
}

TEST_CASE("grad_check examples") {
  auto x = t1({1, 2, 3});
  auto sq = grad_check([](const Tensor& t) { return sum(mul(t, t)); }, x, {.h = 1e-5, .tol = 1e-4});
  CHECK(sq.passed);
  for (std::size_t i = 0; i < 3; ++i) CHECK(sq.analytic[i] == doctest::Approx(2.0 * static_cast<double>(i + 1)));

  auto ce = grad_check([](const Tensor& t) { return cross_entropy(log_softmax(t), 1); },
                       Tensor::from_data({4}, std::vector<double>{0.3, -1.2, 0.8, 2.0}), {.h = 1e-5, .tol = 1e-4});
  CHECK(ce.passed);
  auto ce2 = grad_check([](const Tensor& t) { return mse(softmax(t), Tensor::full({4}, 0.25)); },
                        Tensor::from_data({4}, std::vector<double>{0.3, -1.2, 0.8, 2.0}), {.h = 1e-5, .tol = 1e-4});
  CHECK(ce2.passed);

  // Negative control: a primitive whose backward is off by a factor of two.
  auto wrong_square = [](const Tensor& t) {
    Matrix v = t.value().array().square();
    return make_op(t.shape(), v, {t}, [t](const Matrix& g, std::span<Matrix* const> d) {
      if (d[0]) *d[0] += g.cwiseProduct(t.value()) * 4.0;
    });
  };
  auto bad = grad_check([&](const Tensor& t) { return sum(wrong_square(t)); }, x, {.h = 1e-5, .tol = 1e-4});
  CHECK_FALSE(bad.passed);

  // Functions that ignore the supplied RngState and draw elsewhere are rejected.
  Rng global(99);
  auto nondet = [&global](const Tensor& t, Rng&) { return sum(scale(t, global.uniform())); };
  CHECK_THROWS_AS(grad_check(nondet, x, RngState{1, 0}), ContractError);

  // Stochastic functions that use the supplied stream are fine.
  auto noisy = [](const Tensor& t, Rng& rng) { return sum(mul(t, sample_gumbel(rng, t.shape()))); };
  CHECK(grad_check(noisy, x, RngState{1, 0}).passed);

  CHECK_THROWS_AS(grad_check([](const Tensor& t) { return sum(t); }, x, {.h = 1e-2}), ConfigError);
}

TEST_CASE("every differentiable op passes gradient checks on random tensors") {
  struct Case {
    const char* name;
    std::function<Tensor(const Tensor&, const Matrix& other)> op;
    bool square_other = false;
  };
  const std::vector<Case> cases = {
      {"add", [](const Tensor& x, const Matrix& o) { return add(x, Tensor::from_matrix(o)); }},
      {"sub", [](const Tensor& x, const Matrix& o) { return sub(Tensor::from_matrix(o), x); }},
      {"mul", [](const Tensor& x, const Matrix& o) { return mul(x, Tensor::from_matrix(o)); }},
      {"scale", [](const Tensor& x, const Matrix&) { return scale(x, -1.7); }},
      {"mul_scalar", [](const Tensor& x, const Matrix& o) { return mul_scalar(Tensor::from_matrix(o), select(x, 0)); }},
      {"add_row", [](const Tensor& x, const Matrix& o) { return add_row(Tensor::from_matrix(o), slice_rows(x, 0, 1)); }},
      {"matmul_left", [](const Tensor& x, const Matrix& o) { return matmul(x, Tensor::from_matrix(Matrix(o.transpose()))); }},
      {"matmul_right", [](const Tensor& x, const Matrix& o) { return matmul(Tensor::from_matrix(o), transpose(x)); }},
      {"transpose", [](const Tensor& x, const Matrix&) { return transpose(x); }},
      {"reshape", [](const Tensor& x, const Matrix&) { return reshape(x, {x.size()}); }},
      {"slice_cols", [](const Tensor& x, const Matrix&) { return slice_cols(x, 0, std::max<Eigen::Index>(1, x.cols() / 2)); }},
      {"concat", [](const Tensor& x, const Matrix&) {
         std::vector<Tensor> p{x, scale(x, 2.0)};
         std::vector<Tensor> q{concat_rows(p), concat_rows(p)};
         return concat_cols(q);
       }},
      {"gather", [](const Tensor& x, const Matrix&) {
         std::vector<Eigen::Index> idx{x.rows() - 1, 0, x.rows() - 1};
         return gather_rows(x, idx);
       }},
      {"repeat", [](const Tensor& x, const Matrix&) { return repeat_rows(slice_rows(x, 0, 1), 3); }},
      {"mean", [](const Tensor& x, const Matrix&) { return mean(x); }},
      {"mean_rows", [](const Tensor& x, const Matrix&) { return mean_rows(x); }},
      {"gelu", [](const Tensor& x, const Matrix&) { return gelu(x); }},
      {"relu", [](const Tensor& x, const Matrix&) { return relu(x); }},
      {"softmax", [](const Tensor& x, const Matrix&) { return softmax(x); }},
      {"softmax_axis0", [](const Tensor& x, const Matrix&) { return softmax(x, 0); }},
      {"log_softmax", [](const Tensor& x, const Matrix&) { return log_softmax(x); }},
      {"layer_norm", [](const Tensor& x, const Matrix& o) {
         return layer_norm(x, Tensor::from_matrix(Matrix(o.row(0))), Tensor::from_matrix(Matrix(o.row(0) * 0.5)));
       }},
      {"layer_norm_gain", [](const Tensor& x, const Matrix& o) {
         return layer_norm(Tensor::from_matrix(o), slice_rows(x, 0, 1), Tensor::zeros({1, static_cast<std::size_t>(x.cols())}));
       }},
      {"mse", [](const Tensor& x, const Matrix& o) { return mse(x, Tensor::from_matrix(o)); }},
      {"sum_squares", [](const Tensor& x, const Matrix& o) { return sum_squares(Tensor::from_matrix(o), x); }},
      {"l1", [](const Tensor& x, const Matrix& o) { return l1(x, Tensor::from_matrix(o)); }},
      {"cross_entropy", [](const Tensor& x, const Matrix&) { return cross_entropy(slice_rows(x, 0, 1), 0); }},
  };

  Rng rng(2024);
  for (const auto& c : cases) {
    int failures = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto r = static_cast<Eigen::Index>(1 + rng.below(4));
      const auto cols = static_cast<Eigen::Index>(1 + rng.below(8));
      Matrix xv = random_matrix(rng, r, cols);
      // Keep kinked ops away from their non-differentiable points.
      xv = xv.unaryExpr([](double v) { return v + (v >= 0 ? 0.05 : -0.05); });
      Matrix other = random_matrix(rng, r, cols);
      Tensor out_probe = c.op(Tensor::from_matrix(xv), other);
      Matrix weights = random_matrix(rng, out_probe.rows(), out_probe.cols());
      auto w = Tensor::from_matrix(out_probe.shape(), weights);
      auto f = [&](const Tensor& x) { return sum(mul(c.op(x, other), w)); };
      auto report = grad_check(f, Tensor::from_matrix(xv), {.h = 1e-5, .tol = 1e-4});
      if (!report.passed) ++failures;
    }
    INFO("op: " << std::string(c.name));
    CHECK(failures == 0);
  }
}

TEST_CASE("straight-through forwards the hard value and copies gradients") {
  auto soft = Tensor::from_data({3}, std::vector<double>{0.2, 0.5, 0.3}, true);
  Matrix hard(1, 3);
  hard << 0, 1, 1;
  auto z = straight_through(hard, soft);
  CHECK(z.value() == hard);
  auto w = Tensor::from_data({3}, std::vector<double>{1, 2, 3});
  backward(sum(mul(z, w)));
  CHECK(soft.grad() == w.value());
}

TEST_CASE("convolution gradients") {
  Rng rng(31);
  auto w = Tensor::from_matrix(random_matrix(rng, 3, 2 * 9));
  auto b = Tensor::from_matrix(random_matrix(rng, 1, 3));
  auto x = Tensor::from_matrix(Shape{2, 5, 6}, random_matrix(rng, 10, 6));
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      auto probe = conv2d(x, w, b, 3, stride, pad);
      auto wt = Tensor::from_matrix(probe.shape(), random_matrix(rng, probe.rows(), probe.cols()));
      CHECK(grad_check([&](const Tensor& in) { return sum(mul(conv2d(in, w, b, 3, stride, pad), wt)); }, x).passed);
      CHECK(grad_check([&](const Tensor& in) { return sum(mul(conv2d(x, in, b, 3, stride, pad), wt)); }, w).passed);
      CHECK(grad_check([&](const Tensor& in) { return sum(mul(conv2d(x, w, in, 3, stride, pad), wt)); }, b).passed);
    }
  }
  auto wd = Tensor::from_matrix(random_matrix(rng, 2, 3 * 4));
  auto bd = Tensor::from_matrix(random_matrix(rng, 1, 3));
  auto xd = Tensor::from_matrix(Shape{2, 2, 3}, random_matrix(rng, 4, 3));
  auto probe = conv_transpose2d(xd, wd, bd, 2, 2);
  CHECK(probe.shape() == Shape{3, 4, 6});
  auto wt = Tensor::from_matrix(probe.shape(), random_matrix(rng, probe.rows(), probe.cols()));
  CHECK(grad_check([&](const Tensor& in) { return sum(mul(conv_transpose2d(in, wd, bd, 2, 2), wt)); }, xd).passed);
  CHECK(grad_check([&](const Tensor& in) { return sum(mul(conv_transpose2d(xd, in, bd, 2, 2), wt)); }, wd).passed);
  CHECK(grad_check([&](const Tensor& in) { return sum(mul(conv_transpose2d(xd, wd, in, 2, 2), wt)); }, bd).passed);
}

TEST_CASE("gumbel sampling") {
  Rng a(42), b(42);
  auto ga = sample_gumbel(a, {64});
  auto gb = sample_gumbel(b, {64});
  CHECK(ga.value() == gb.value());
  CHECK(a.state() == b.state());
  CHECK(a.state().position == 64);

  Rng rng(1234);
  auto many = sample_gumbel(rng, {100000});
  const double m = many.value().mean();
  CHECK(std::abs(m - 0.5772156649) < 0.01);

  // Clamp bounds stay finite.
  CHECK(std::isfinite(-std::log(-std::log(kGumbelClampLo))));
  CHECK(std::isfinite(-std::log(-std::log(kGumbelClampHi))));
}

TEST_CASE("rng replay is bit-identical") {
  Rng rng(5, 17);
  std::vector<double> first;
  for (int i = 0; i < 10; ++i) first.push_back(rng.normal());
  Rng replay(RngState{5, 17});
  for (int i = 0; i < 10; ++i) CHECK(replay.normal() == first[static_cast<std::size_t>(i)]);
  CHECK(Rng(1).fork(3).uniform() == Rng(1).fork(3).uniform());
  CHECK(Rng(1).fork(3).uniform() != Rng(1).fork(4).uniform());
}

TEST_CASE("tensor file format") {
  Rng rng(8);
  auto t = Tensor::from_matrix(Shape{2, 3, 4}, random_matrix(rng, 6, 4));
  const std::string bytes = encode_tensor(t);
  REQUIRE(bytes.size() == 4 + 1 + 1 + 3 * 4 + 24 * 8);
  CHECK(bytes.substr(0, 4) == "ADMT");
  CHECK(static_cast<unsigned char>(bytes[4]) == 0x01);
  CHECK(static_cast<unsigned char>(bytes[5]) == 3);
  CHECK(static_cast<unsigned char>(bytes[6]) == 2);  // little-endian dims
  CHECK(static_cast<unsigned char>(bytes[7]) == 0);
  auto back = decode_tensor(bytes);
  CHECK(back.shape() == t.shape());
  CHECK(back.value() == t.value());

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_tensor(bad_magic), FormatError);
  std::string bad_version = bytes;
  bad_version[4] = 0x02;
  CHECK_THROWS_AS(decode_tensor(bad_version), FormatError);
}
