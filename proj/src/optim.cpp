#include "lovis/optim.hpp"

#include <algorithm>
#include <cmath>

#include "lovis/errors.hpp"

namespace lovis {

Tensor& ParameterSet::add(std::string name, Tensor value) {
  if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  value.set_requires_grad(true);
  entries_.emplace_back(std::move(name), std::move(value));
  return entries_.back().second;
}

const Tensor& ParameterSet::get(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw IndexError("unknown parameter '" + name + "'");
}

Tensor& ParameterSet::get(const std::string& name) {
  for (auto& [n, t] : entries_)
    if (n == name) return t;
  throw IndexError("unknown parameter '" + name + "'");
}

bool ParameterSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::size_t ParameterSet::total_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

std::vector<Tensor> ParameterSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

std::vector<Tensor> ParameterSet::with_prefixes(std::span<const std::string> prefixes) const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : entries_) {
    for (const auto& p : prefixes) {
      if (name.rfind(p, 0) == 0) {
        out.push_back(t);
        break;
      }
    }
  }
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

void ParameterSet::copy_values_to(ParameterSet& other) const {
  if (other.entries_.size() != entries_.size()) throw DimensionError("parameter set layouts differ");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto src = entries_[i].second.data();
    auto dst = other.entries_[i].second.data_mut();
    if (src.size() != dst.size()) throw DimensionError("parameter '" + entries_[i].first + "' differs in size");
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  for (const auto& p : params_) {
    if (!p.has_grad()) throw ContractError("adamw_step: parameter " + shape_str(p.shape()) + " has no gradient");
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    auto theta = p.data_mut();
    auto g = p.grad_mut();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      theta[j] *= 1.0 - config_.lr * config_.weight_decay;
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      theta[j] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
      g[j] = 0.0;
    }
  }
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double total = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) total += g * g;
  }
  const double norm = std::sqrt(total);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.grad_mut()) g *= factor;
    }
  }
  return norm;
}

}  // namespace lovis
