#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "admn/autodiff.hpp"

namespace admn::testing {

// Central differences against backward() for a leaf used somewhere inside `loss`.
inline double leaf_grad_error(Tensor leaf, const std::function<Tensor()>& loss, double h = 1e-5,
                              double floor = 1e-5) {
  const Matrix original = leaf.value();
  const bool had = leaf.requires_grad();
  leaf.set_requires_grad(true);
  leaf.zero_grad();
  backward(loss());
  const Matrix analytic = leaf.grad();
  leaf.zero_grad();
  double worst = 0.0;
  {
    NoGradGuard ng;
    for (Eigen::Index i = 0; i < original.size(); ++i) {
      leaf.mutable_value().data()[i] = original.data()[i] + h;
      const double fp = loss().item();
      leaf.mutable_value().data()[i] = original.data()[i] - h;
      const double fm = loss().item();
      leaf.mutable_value().data()[i] = original.data()[i];
      const double num = (fp - fm) / (2 * h), ana = analytic.data()[i];
      worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), floor}));
    }
  }
  leaf.set_requires_grad(had);
  return worst;
}

}  // namespace admn::testing
