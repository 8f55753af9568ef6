#include "lovis/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "lovis/errors.hpp"

namespace lovis {

namespace {

thread_local bool g_grad_enabled = true;

using ImplPtr = std::shared_ptr<TensorImpl>;

bool wants_grad(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

Tensor make_output(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Applies an elementwise unary op; dfdx receives (x, y) and returns dy/dx.
template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D dfdx) {
  Tensor out = make_output(x.shape(), wants_grad(x));
  auto xd = x.data();
  auto od = out.data_mut();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = f(xd[i]);
  if (out.requires_grad()) {
    ImplPtr xi = x.handle();
    ImplPtr oi = out.handle();
    Graph::current().record(oi, [xi, oi, dfdx]() {
      auto gx = xi->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += oi->grad[i] * dfdx(xi->data[i], oi->data[i]);
      }
    });
  }
  return out;
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::span<double> TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return make_output(std::move(shape), requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = make_output(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return from({1, n}, std::move(values), requires_grad);
}

Tensor Tensor::randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  Tensor t = make_output(std::move(shape), requires_grad);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.impl_->data) v = dist(rng);
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= rank()) throw IndexError("dim " + std::to_string(i) + " out of range for " + shape_str(shape()));
  return impl_->shape[i];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  if (s.size() <= 1) return 1;
  return numel() / s.back();
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  return s.empty() ? 1 : s.back();
}

std::span<const double> Tensor::data() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::data_mut() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!impl_) throw ContractError("use of an undefined tensor");
  impl_->requires_grad = on;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return impl_->grad;
}

std::span<double> Tensor::grad_mut() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->ensure_grad();
}

void Tensor::zero_grad() {
  if (!impl_) return;
  impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

// ---------------------------------------------------------------------------
// Graph

Graph& Graph::current() {
  thread_local Graph graph;
  return graph;
}

void Graph::record(std::shared_ptr<TensorImpl> output, std::function<void()> backward) {
  nodes_.push_back(Node{std::move(output), std::move(backward)});
}

void Graph::run_backward() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not reachable from the loss
    it->backward();
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  Graph& graph = Graph::current();
  if (loss.requires_grad()) {
    loss.handle()->ensure_grad()[0] += 1.0;
    graph.run_backward();
  }
  graph.clear();
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor out = make_output({m, n}, wants_grad(a) || wants_grad(b));
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data_mut().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
    }
  }
  if (out.requires_grad()) {
    ImplPtr ai = a.handle(), bi = b.handle(), oi = out.handle();
    Graph::current().record(oi, [ai, bi, oi, m, k, n]() {
      const double* G = oi->grad.data();
      if (ai->requires_grad) {
        double* GA = ai->ensure_grad().data();
        const double* B = bi->data.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* g = G + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = B + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[j] * brow[j];
            GA[i * k + p] += acc;
          }
        }
      }
      if (bi->requires_grad) {
        double* GB = bi->ensure_grad().data();
        const double* A = ai->data.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* g = G + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            double* gb = GB + p * n;
            for (std::size_t j = 0; j < n; ++j) gb[j] += av * g[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_bt");
  require_matrix(b, "matmul_bt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_bt: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()) + "ᵀ");
  }
  Tensor out = make_output({m, n}, wants_grad(a) || wants_grad(b));
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data_mut().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
      C[i * n + j] = acc;
    }
  }
  if (out.requires_grad()) {
    ImplPtr ai = a.handle(), bi = b.handle(), oi = out.handle();
    Graph::current().record(oi, [ai, bi, oi, m, k, n]() {
      const double* G = oi->grad.data();
      const double* A = ai->data.data();
      const double* B = bi->data.data();
      if (ai->requires_grad) {
        double* GA = ai->ensure_grad().data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const double g = G[i * n + j];
            for (std::size_t p = 0; p < k; ++p) GA[i * k + p] += g * B[j * k + p];
          }
        }
      }
      if (bi->requires_grad) {
        double* GB = bi->ensure_grad().data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const double g = G[i * n + j];
            for (std::size_t p = 0; p < k; ++p) GB[j * k + p] += g * A[i * k + p];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = make_output({n, m}, wants_grad(a));
  auto ad = a.data();
  auto od = out.data_mut();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) od[j * m + i] = ad[i * n + j];
  if (out.requires_grad()) {
    ImplPtr ai = a.handle(), oi = out.handle();
    Graph::current().record(oi, [ai, oi, m, n]() {
      auto ga = ai->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += oi->grad[j * m + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = make_output(a.shape(), wants_grad(a) || wants_grad(b));
  auto ad = a.data(), bd = b.data();
  auto od = out.data_mut();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  if (out.requires_grad()) {
    ImplPtr ai = a.handle(), bi = b.handle(), oi = out.handle();
    Graph::current().record(oi, [ai, bi, oi]() {
      if (ai->requires_grad) {
        auto g = ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto g = bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = make_output(a.shape(), wants_grad(a) || wants_grad(b));
  auto ad = a.data(), bd = b.data();
  auto od = out.data_mut();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
  if (out.requires_grad()) {
    ImplPtr ai = a.handle(), bi = b.handle(), oi = out.handle();
    Graph::current().record(oi, [ai, bi, oi]() {
      if (ai->requires_grad) {
        auto g = ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto g = bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= oi->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = make_output(a.shape(), wants_grad(a) || wants_grad(b));
  auto ad = a.data(), bd = b.data();
  auto od = out.data_mut();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
  if (out.requires_grad()) {
    ImplPtr ai = a.handle(), bi = b.handle(), oi = out.handle();
    Graph::current().record(oi, [ai, bi, oi]() {
      if (ai->requires_grad) {
        auto g = ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto g = bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * ai->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.cols();
  if (bias.numel() != n || bias.rows() != 1) {
    throw DimensionError("add_rowvec: bias " + shape_str(bias.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
  }
  const std::size_t m = x.rows();
  Tensor out = make_output(x.shape(), wants_grad(x) || wants_grad(bias));
  auto xd = x.data(), bd = bias.data();
  auto od = out.data_mut();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) od[i * n + j] = xd[i * n + j] + bd[j];
  if (out.requires_grad()) {
    ImplPtr xi = x.handle(), bi = bias.handle(), oi = out.handle();
    Graph::current().record(oi, [xi, bi, oi, m, n]() {
      if (xi->requires_grad) {
        auto g = xi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto g = bi->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += oi->grad[i * n + j];
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_clamped(const Tensor& x, double floor) {
  return unary(
      x, [floor](double v) { return std::log(std::max(v, floor)); },
      [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& x, int axis) {
  const auto& s = x.shape();
  if (s.empty()) throw DimensionError("softmax: rank-0 input");
  const int r = static_cast<int>(s.size());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw IndexError("softmax: axis " + std::to_string(axis) + " out of range");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[i];
  for (int i = ax + 1; i < r; ++i) inner *= s[i];
  const std::size_t n = s[ax];

  Tensor out = make_output(s, wants_grad(x));
  auto xd = x.data();
  auto od = out.data_mut();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = xd[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xd[base + j * inner] - mx);
        od[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) od[base + j * inner] /= total;
    }
  }
  if (out.requires_grad()) {
    ImplPtr xi = x.handle(), oi = out.handle();
    Graph::current().record(oi, [xi, oi, outer, inner, n]() {
      auto gx = xi->ensure_grad();
      const auto& y = oi->data;
      const auto& gy = oi->grad;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += gy[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += y[idx] * (gy[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t n = x.cols(), m = x.rows();
  Tensor out = make_output(x.shape(), wants_grad(x));
  auto xd = x.data();
  auto od = out.data_mut();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) od[i * n + j] = row[j] - lse;
  }
  if (out.requires_grad()) {
    ImplPtr xi = x.handle(), oi = out.handle();
    Graph::current().record(oi, [xi, oi, m, n]() {
      auto gx = xi->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < n; ++j) gsum += oi->grad[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = i * n + j;
          gx[idx] += oi->grad[idx] - std::exp(oi->data[idx]) * gsum;
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.cols(), m = x.rows();
  if (d < 2) throw DimensionError("layer_norm: feature width must be at least 2");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
  }
  Tensor out = make_output(x.shape(), wants_grad(x) || wants_grad(gain) || wants_grad(bias));
  auto xd = x.data(), gd = gain.data(), bd = bias.data();
  auto od = out.data_mut();
  // Normalized activations and per-row inverse std are kept for backward.
  auto xhat = std::make_shared<std::vector<double>>(m * d);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  auto floored = std::make_shared<std::vector<std::uint8_t>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    (*floored)[i] = var < eps;
    const double is = 1.0 / std::sqrt(std::max(var, eps));
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[i * d + j] = h;
      od[i * d + j] = h * gd[j] + bd[j];
    }
  }
  if (out.requires_grad()) {
    ImplPtr xi = x.handle(), gi = gain.handle(), bi = bias.handle(), oi = out.handle();
    Graph::current().record(oi, [xi, gi, bi, oi, xhat, inv_std, floored, m, d]() {
      const auto& gy = oi->grad;
      if (gi->requires_grad) {
        auto g = gi->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < d; ++j) g[j] += gy[i * d + j] * (*xhat)[i * d + j];
      }
      if (bi->requires_grad) {
        auto g = bi->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < d; ++j) g[j] += gy[i * d + j];
      }
      if (xi->requires_grad) {
        auto gx = xi->ensure_grad();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t i = 0; i < m; ++i) {
          double sum_g = 0.0, sum_gh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = gy[i * d + j] * gi->data[j];
            sum_g += gh;
            sum_gh += gh * (*xhat)[i * d + j];
          }
          const double is = (*inv_std)[i];
          // With a floored variance the scale is a constant.
          const double var_term = (*floored)[i] ? 0.0 : 1.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = gy[i * d + j] * gi->data[j];
            gx[i * d + j] += is * (gh - sum_g * inv_d - var_term * (*xhat)[i * d + j] * sum_gh * inv_d);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

Tensor cross_entropy(const Tensor& logits, std::size_t target) {
  if (logits.rows() != 1) {
    throw DimensionError("cross_entropy: expected a single row of logits, got " + shape_str(logits.shape()));
  }
  const std::size_t n = logits.numel();
  if (target >= n) {
    throw IndexError("cross_entropy: target " + std::to_string(target) + " out of range for " +
                     std::to_string(n) + " classes");
  }
  Tensor out = make_output({1}, wants_grad(logits));
  auto xd = logits.data();
  const double mx = *std::max_element(xd.begin(), xd.end());
  double total = 0.0;
  for (double v : xd) total += std::exp(v - mx);
  out.data_mut()[0] = mx + std::log(total) - xd[target];
  if (out.requires_grad()) {
    ImplPtr xi = logits.handle(), oi = out.handle();
    Graph::current().record(oi, [xi, oi, target, mx, total]() {
      auto gx = xi->ensure_grad();
      const double g = oi->grad[0];
      for (std::size_t j = 0; j < gx.size(); ++j) {
        const double p = std::exp(xi->data[j] - mx) / total;
        gx[j] += g * (p - (j == target ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

Tensor bce_with_logits(const Tensor& logit, double y) {
  if (logit.numel() != 1) throw DimensionError("bce_with_logits: expected a scalar logit");
  if (y != 0.0 && y != 1.0) throw ContractError("bce_with_logits: label must be 0 or 1");
  const double z = logit.item();
  Tensor out = make_output({1}, wants_grad(logit));
  // −[y log σ(z) + (1−y) log(1−σ(z))] = softplus(z) − y z
  const double softplus = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
  out.data_mut()[0] = softplus - y * z;
  if (out.requires_grad()) {
    ImplPtr xi = logit.handle(), oi = out.handle();
    Graph::current().record(oi, [xi, oi, z, y]() {
      const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      xi->ensure_grad()[0] += oi->grad[0] * (p - y);
    });
  }
  return out;
}

Tensor mse(const Tensor& pred, std::span<const double> target) {
  if (pred.numel() != target.size()) {
    throw DimensionError("mse: prediction " + shape_str(pred.shape()) + " vs target of " +
                         std::to_string(target.size()));
  }
  const std::size_t n = target.size();
  auto pd = pred.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += (pd[i] - target[i]) * (pd[i] - target[i]);
  Tensor out = make_output({1}, wants_grad(pred));
  out.data_mut()[0] = total / static_cast<double>(n);
  if (out.requires_grad()) {
    ImplPtr pi = pred.handle(), oi = out.handle();
    std::vector<double> t(target.begin(), target.end());
    Graph::current().record(oi, [pi, oi, t = std::move(t), n]() {
      auto g = pi->ensure_grad();
      const double scale_factor = 2.0 * oi->grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) g[i] += scale_factor * (pi->data[i] - t[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gathers, slices and reductions

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (std::size_t id : ids) {
    if (id >= vocab) {
      throw IndexError("embedding: id " + std::to_string(id) + " out of range for table of " +
                       std::to_string(vocab) + " rows");
    }
  }
  Tensor out = make_output({ids.size(), d}, wants_grad(table));
  auto td = table.data();
  auto od = out.data_mut();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(td.begin() + ids[i] * d, d, od.begin() + i * d);
  if (out.requires_grad()) {
    ImplPtr ti = table.handle(), oi = out.handle();
    std::vector<std::size_t> idv(ids.begin(), ids.end());
    Graph::current().record(oi, [ti, oi, idv = std::move(idv), d]() {
      auto g = ti->ensure_grad();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[idv[i] * d + j] += oi->grad[i * d + j];
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t d = parts.front().cols();
  std::size_t total_rows = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.cols() != d) {
      throw DimensionError("concat_rows: width mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    total_rows += p.rows();
    any_grad = any_grad || wants_grad(p);
  }
  Tensor out = make_output({total_rows, d}, any_grad);
  auto od = out.data_mut();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), od.begin() + offset);
    offset += p.numel();
  }
  if (out.requires_grad()) {
    std::vector<ImplPtr> handles;
    handles.reserve(parts.size());
    for (const auto& p : parts) handles.push_back(p.handle());
    ImplPtr oi = out.handle();
    Graph::current().record(oi, [handles = std::move(handles), oi]() {
      std::size_t offset = 0;
      for (const auto& h : handles) {
        const std::size_t n = h->data.size();
        if (h->requires_grad) {
          auto g = h->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) g[i] += oi->grad[offset + i];
        }
        offset += n;
      }
    });
  }
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: row count mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), ca = a.cols(), cb = b.cols(), c = ca + cb;
  Tensor out = make_output({m, c}, wants_grad(a) || wants_grad(b));
  auto ad = a.data(), bd = b.data();
  auto od = out.data_mut();
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(ad.begin() + i * ca, ca, od.begin() + i * c);
    std::copy_n(bd.begin() + i * cb, cb, od.begin() + i * c + ca);
  }
  if (out.requires_grad()) {
    ImplPtr ai = a.handle(), bi = b.handle(), oi = out.handle();
    Graph::current().record(oi, [ai, bi, oi, m, ca, cb, c]() {
      if (ai->requires_grad) {
        auto g = ai->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < ca; ++j) g[i * ca + j] += oi->grad[i * c + j];
      }
      if (bi->requires_grad) {
        auto g = bi->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < cb; ++j) g[i * cb + j] += oi->grad[i * c + ca + j];
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t d = x.cols();
  if (begin + count > x.rows() || count == 0) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_str(x.shape()));
  }
  Tensor out = make_output({count, d}, wants_grad(x));
  auto xd = x.data();
  std::copy_n(xd.begin() + begin * d, count * d, out.data_mut().begin());
  if (out.requires_grad()) {
    ImplPtr xi = x.handle(), oi = out.handle();
    Graph::current().record(oi, [xi, oi, begin, d]() {
      auto g = xi->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) g[begin * d + i] += oi->grad[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t m = x.rows(), c = x.cols();
  if (begin + count > c || count == 0) {
    throw IndexError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_str(x.shape()));
  }
  Tensor out = make_output({m, count}, wants_grad(x));
  auto xd = x.data();
  auto od = out.data_mut();
  for (std::size_t i = 0; i < m; ++i) std::copy_n(xd.begin() + i * c + begin, count, od.begin() + i * count);
  if (out.requires_grad()) {
    ImplPtr xi = x.handle(), oi = out.handle();
    Graph::current().record(oi, [xi, oi, m, c, begin, count]() {
      auto g = xi->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) g[i * c + begin + j] += oi->grad[i * count + j];
    });
  }
  return out;
}

Tensor element(const Tensor& x, std::size_t flat) {
  if (flat >= x.numel()) {
    throw IndexError("element: index " + std::to_string(flat) + " out of range for " + shape_str(x.shape()));
  }
  Tensor out = make_output({1}, wants_grad(x));
  out.data_mut()[0] = x.data()[flat];
  if (out.requires_grad()) {
    ImplPtr xi = x.handle(), oi = out.handle();
    Graph::current().record(oi, [xi, oi, flat]() { xi->ensure_grad()[flat] += oi->grad[0]; });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = make_output({1}, wants_grad(x));
  double total = 0.0;
  for (double v : x.data()) total += v;
  out.data_mut()[0] = total;
  if (out.requires_grad()) {
    ImplPtr xi = x.handle(), oi = out.handle();
    Graph::current().record(oi, [xi, oi]() {
      auto g = xi->ensure_grad();
      for (double& v : g) v += oi->grad[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Attention

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const std::uint8_t> key_mask, Tensor* probs) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t n = q.dim(0), m = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != m) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()) + " are incompatible");
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (!key_mask.empty() && key_mask.size() != m) {
    throw DimensionError("attention: key mask length " + std::to_string(key_mask.size()) + " vs " +
                         std::to_string(m) + " keys");
  }
  std::vector<std::size_t> visible;
  visible.reserve(m);
  for (std::size_t j = 0; j < m; ++j)
    if (key_mask.empty() || key_mask[j]) visible.push_back(j);
  if (visible.empty()) throw ContractError("attention: every key is masked");

  const std::size_t dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();

  Tensor out = make_output({n, d}, wants_grad(q) || wants_grad(k) || wants_grad(v));
  double* O = out.data_mut().data();
  // P[h][i][j], zero on masked keys.
  auto P = std::make_shared<std::vector<double>>(heads * n * m, 0.0);
  std::vector<double> scores(m);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      const double* qi = Q + i * d + off;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j : visible) {
        const double* kj = K + j * d + off;
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
        scores[j] = acc * inv_scale;
        mx = std::max(mx, scores[j]);
      }
      double total = 0.0;
      double* prow = P->data() + (h * n + i) * m;
      for (std::size_t j : visible) {
        prow[j] = std::exp(scores[j] - mx);
        total += prow[j];
      }
      double* oi = O + i * d + off;
      for (std::size_t j : visible) {
        prow[j] /= total;
        const double* vj = V + j * d + off;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += prow[j] * vj[c];
      }
    }
  }
  if (probs) {
    Tensor avg = make_output({n, m}, false);
    auto ad = avg.data_mut();
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t idx = 0; idx < n * m; ++idx) ad[idx] += (*P)[h * n * m + idx];
    for (double& a : ad) a /= static_cast<double>(heads);
    *probs = std::move(avg);
  }
  if (out.requires_grad()) {
    ImplPtr qi = q.handle(), ki = k.handle(), vi = v.handle(), oi = out.handle();
    Graph::current().record(oi, [qi, ki, vi, oi, P, visible, n, m, d, dh, heads, inv_scale]() {
      const double* G = oi->grad.data();
      const double* Q = qi->data.data();
      const double* K = ki->data.data();
      const double* V = vi->data.data();
      double* GQ = qi->requires_grad ? qi->ensure_grad().data() : nullptr;
      double* GK = ki->requires_grad ? ki->ensure_grad().data() : nullptr;
      double* GV = vi->requires_grad ? vi->ensure_grad().data() : nullptr;
      std::vector<double> dp(m);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < n; ++i) {
          const double* gi = G + i * d + off;
          const double* prow = P->data() + (h * n + i) * m;
          double dot = 0.0;
          for (std::size_t j : visible) {
            const double* vj = V + j * d + off;
            double acc = 0.0;
            for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vj[c];
            dp[j] = acc;
            dot += acc * prow[j];
            if (GV) {
              double* gvj = GV + j * d + off;
              for (std::size_t c = 0; c < dh; ++c) gvj[c] += prow[j] * gi[c];
            }
          }
          for (std::size_t j : visible) {
            const double ds = prow[j] * (dp[j] - dot) * inv_scale;
            if (ds == 0.0) continue;
            if (GQ) {
              double* gq = GQ + i * d + off;
              const double* kj = K + j * d + off;
              for (std::size_t c = 0; c < dh; ++c) gq[c] += ds * kj[c];
            }
            if (GK) {
              double* gk = GK + j * d + off;
              const double* q_i = Q + i * d + off;
              for (std::size_t c = 0; c < dh; ++c) gk[c] += ds * q_i[c];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

double finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                         const FiniteDiffOptions& options) {
  for (auto& p : params) p.zero_grad();
  {
    Tensor loss = loss_fn();
    backward(loss);
  }
  std::mt19937_64 rng(options.seed);
  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& p : params) {
    const std::size_t n = p.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_tensor && options.max_coords_per_tensor < n) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_tensor);
    }
    auto values = p.data_mut();
    auto analytic = p.grad();
    for (std::size_t idx : coords) {
      const double saved = values[idx];
      values[idx] = saved + options.h;
      const double plus = loss_fn().item();
      values[idx] = saved - options.h;
      const double minus = loss_fn().item();
      values[idx] = saved;
      const double numeric = (plus - minus) / (2.0 * options.h);
      const double err = std::abs(analytic[idx] - numeric) / (std::abs(analytic[idx]) + 1e-8);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace lovis
