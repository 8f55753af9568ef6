#pragma once

// Dense f64 tensors with define-by-run reverse-mode differentiation.
//
// Every differentiable op that has at least one grad-requiring input appends
// a node to the calling thread's Graph. backward() walks that record in exact
// reverse execution order and then discards it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lovis {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;

  std::span<double> ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor row(std::vector<double> values, bool requires_grad = false);
  static Tensor randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;
  // Rank-2 views: a rank-1 tensor reads as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  std::span<double> data_mut();
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  // Copy of the values with no graph history.
  Tensor detach() const;
  bool same(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl>& handle() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Graph recording

class Graph {
 public:
  struct Node {
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;
  };

  static Graph& current();

  void record(std::shared_ptr<TensorImpl> output, std::function<void()> backward);
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  void run_backward();

 private:
  std::vector<Node> nodes_;
};

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

// Populates grads of every grad-requiring tensor reachable from `loss`,
// accumulating into existing leaf grads, then discards the recorded graph.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Differentiable operations. Matrices are rank 2 and row-major; the only
// broadcast supported is a row vector over the leading dimension.

Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ without materializing the transpose.
Tensor matmul_bt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor add_rowvec(const Tensor& x, const Tensor& bias);

Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log_clamped(const Tensor& x, double floor = 1e-12);

Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// −log softmax(logits)[target]; logits is rank 1 or a single row.
Tensor cross_entropy(const Tensor& logits, std::size_t target);
// Binary cross-entropy of sigmoid(logit) against y ∈ {0, 1}.
Tensor bce_with_logits(const Tensor& logit, double y);
// Mean of squared differences against a constant target.
Tensor mse(const Tensor& pred, std::span<const double> target);

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor element(const Tensor& x, std::size_t flat);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Multi-head scaled dot-product attention. q: n×d, k and v: m×d, d divisible
// by heads. key_mask (length m, nonzero = visible) may be empty. Masked keys
// receive exactly zero weight. When probs is non-null it receives the
// head-averaged n×m attention matrix (no graph history).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const std::uint8_t> key_mask = {}, Tensor* probs = nullptr);

// ---------------------------------------------------------------------------

struct FiniteDiffOptions {
  double h = 1e-5;
  // 0 checks every coordinate; otherwise a seeded sample of this many per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

// max_i |analytic_i − (f(θ+h eᵢ) − f(θ−h eᵢ))/2h| / (|analytic_i| + 1e-8)
// over the checked coordinates of `params`. loss_fn must be deterministic.
double finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                         const FiniteDiffOptions& options = {});

}  // namespace lovis
