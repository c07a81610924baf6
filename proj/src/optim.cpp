#include "admn/optim.hpp"

#include <cmath>
#include <map>

#include "admn/errors.hpp"

namespace admn {

Adam::Adam(std::vector<NamedTensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    if (!p.tensor.is_leaf()) throw ContractError("adam: parameter '" + p.name + "' is not a leaf");
    m_.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
    v_.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
  }
}

void Adam::step(double lr) {
  if (lr < 0) lr = cfg_.lr;
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].tensor;
    const Matrix& g = p.grad();
    m_[i] = cfg_.beta1 * m_[i] + (1 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1 - cfg_.beta2) * g.cwiseProduct(g);
    if (lr == 0.0) continue;
    p.mutable_value().array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

std::vector<NamedTensor> Adam::state(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.push_back({prefix + ".m." + params_[i].name, Tensor::from_matrix(params_[i].tensor.shape(), m_[i]), "optim"});
    out.push_back({prefix + ".v." + params_[i].name, Tensor::from_matrix(params_[i].tensor.shape(), v_[i]), "optim"});
  }
  out.push_back({prefix + ".t", Tensor::scalar(static_cast<double>(t_)), "optim"});
  return out;
}

void Adam::load_state(const std::vector<NamedTensor>& saved, const std::string& prefix) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& s : saved) by_name[s.name] = &s.tensor;
  auto get = [&](const std::string& name) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("adam state: missing '" + name + "'");
    return *it->second;
  };
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor& m = get(prefix + ".m." + params_[i].name);
    const Tensor& v = get(prefix + ".v." + params_[i].name);
    if (m.rows() != m_[i].rows() || m.cols() != m_[i].cols() || v.rows() != v_[i].rows() ||
        v.cols() != v_[i].cols()) {
      throw DimensionError("adam state: shape mismatch for '" + params_[i].name + "'");
    }
    m_[i] = m.value();
    v_[i] = v.value();
  }
  t_ = static_cast<std::uint64_t>(get(prefix + ".t").item());
}

double linear_decay(std::uint64_t step, std::uint64_t total) {
  if (total == 0 || step >= total) return 0.0;
  return 1.0 - static_cast<double>(step) / static_cast<double>(total);
}

}  // namespace admn
