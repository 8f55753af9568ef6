#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lovis/tensor.hpp"

namespace lovis {

// Named, ordered parameter list. Order is the checkpoint and optimizer order.
class ParameterSet {
 public:
  Tensor& add(std::string name, Tensor value);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t total_elements() const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  // Parameters whose name starts with any of the given prefixes.
  std::vector<Tensor> with_prefixes(std::span<const std::string> prefixes) const;

  void zero_grad();
  // Deep copy of the values into `other`, which must have the same layout.
  void copy_values_to(ParameterSet& other) const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig config);

  // Decoupled weight decay followed by a bias-corrected Adam update; zeroes
  // the gradients afterwards. Throws ContractError if a parameter has no grad.
  void step();

  std::int64_t steps() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Tensor> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t step_ = 0;
};

// Clips the global L2 norm of the gradients to max_norm; returns the
// pre-clip norm.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

}  // namespace lovis
