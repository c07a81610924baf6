#pragma once

#include <cstdint>
#include <vector>

#include "admn/tensor_io.hpp"

namespace admn {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed list of leaf parameters. Reads each parameter's .grad();
// callers zero gradients between steps.
class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamConfig cfg);

  // One update at learning rate `lr` (the configured rate when negative).
  void step(double lr = -1.0);
  void zero_grad();

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }
  const std::vector<NamedTensor>& params() const { return params_; }

  // Moments and step count as named tensors ("<prefix>.m.<name>",
  // "<prefix>.v.<name>", "<prefix>.t") for checkpointing.
  std::vector<NamedTensor> state(const std::string& prefix = "adam") const;
  void load_state(const std::vector<NamedTensor>& saved, const std::string& prefix = "adam");

 private:
  std::vector<NamedTensor> params_;
  AdamConfig cfg_;
  std::vector<Matrix> m_, v_;
  std::uint64_t t_ = 0;
};

// Multiplier for a linear decay from 1 at step 0 to 0 at `total`.
double linear_decay(std::uint64_t step, std::uint64_t total);

}  // namespace admn
