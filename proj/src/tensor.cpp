#include "stagformer/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "stagformer/errors.hpp"

namespace stagformer {

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
};

}  // namespace detail

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

thread_local Tape* tls_tape = nullptr;
thread_local FlopCounter* tls_counter = nullptr;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

void require_matrix(const char* op, const Tensor& t) {
  if (t.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_to_string(t.shape()));
  }
}

template <typename Fn>
Tensor elementwise_unary(const Tensor& x, Fn&& fn) {
  Tensor out(x.shape());
  auto in = x.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < in.size(); ++i) dst[i] = fn(in[i]);
  return out;
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<detail::TensorNode>()) {
  check_shape(shape);
  node_->data.assign(product(shape), 0.0);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<detail::TensorNode>()) {
  check_shape(shape);
  if (product(shape) != values.size()) {
    throw DimensionError("tensor of shape " + shape_to_string(shape) + " cannot hold " +
                         std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->data.size(); }
std::size_t Tensor::cols() const { return node_->shape.back(); }
std::size_t Tensor::rows() const { return numel() / cols(); }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (row >= rows() || col >= cols()) throw IndexError("tensor coordinate out of range");
  return node_->data[row * cols() + col];
}

std::span<const double> Tensor::row(std::size_t r) const {
  if (r >= rows()) throw IndexError("tensor row out of range");
  return std::span<const double>(node_->data).subspan(r * cols(), cols());
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw StateError("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
  node_->grad.clear();
  node_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }

// ---- tape -------------------------------------------------------------------

void Tape::record(std::function<void()> adjoint) {
  if (consumed_) throw StateError("cannot record on a consumed tape; call reset()");
  adjoints_.push_back(std::move(adjoint));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw StateError("backward() called twice without resetting the tape");
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward() requires a scalar loss, got " +
                         (loss.defined() ? shape_to_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) throw StateError("loss was not produced on the tape");
  Tensor seed = loss;
  seed.mutable_grad()[0] = 1.0;
  for (auto it = adjoints_.rbegin(); it != adjoints_.rend(); ++it) (*it)();
  consumed_ = true;
}

void Tape::reset() {
  adjoints_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(tls_tape) { tls_tape = &tape; }
TapeScope::~TapeScope() { tls_tape = previous_; }

NoGradGuard::NoGradGuard() : previous_(tls_tape) { tls_tape = nullptr; }
NoGradGuard::~NoGradGuard() { tls_tape = previous_; }

Tape* active_tape() noexcept { return tls_tape; }

void backward(const Tensor& loss) {
  if (tls_tape == nullptr) throw StateError("backward() without an active tape");
  tls_tape->backward(loss);
}

namespace autograd {

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (tls_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void record(Tensor& out, std::function<void()> adjoint) {
  out.set_requires_grad(true);
  tls_tape->record(std::move(adjoint));
}

void accumulate(const Tensor& target, std::span<const double> values) {
  auto g = target.mutable_grad();
  for (std::size_t i = 0; i < values.size(); ++i) g[i] += values[i];
}

}  // namespace autograd

// ---- instrumentation --------------------------------------------------------

std::uint64_t FlopCounts::total() const {
  return std::accumulate(macs.begin(), macs.end(), std::uint64_t{0});
}

FlopCounter::FlopCounter() : previous_(tls_counter) { tls_counter = this; }
FlopCounter::~FlopCounter() { tls_counter = previous_; }
void FlopCounter::add(std::uint64_t macs) noexcept { counts_[partition] += macs; }

FlopPartitionScope::FlopPartitionScope(FlopPartition partition) {
  if (tls_counter != nullptr) {
    previous_ = tls_counter->partition;
    tls_counter->partition = partition;
  }
}

FlopPartitionScope::~FlopPartitionScope() {
  if (tls_counter != nullptr) tls_counter->partition = previous_;
}

void count_macs(std::uint64_t macs) noexcept {
  if (tls_counter != nullptr) tls_counter->add(macs);
}

// ---- primitives -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  Tensor out({m, n});
  MatrixMap(out.mutable_data().data(), m, n).noalias() =
      ConstMatrixMap(a.data().data(), m, k) * ConstMatrixMap(b.data().data(), k, n);
  count_macs(static_cast<std::uint64_t>(m) * k * n);

  if (autograd::should_record({&a, &b})) {
    autograd::record(out, [a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      ConstMatrixMap dc(out.grad().data(), m, n);
      if (a.requires_grad()) {
        MatrixMap(a.mutable_grad().data(), m, k).noalias() += dc * ConstMatrixMap(b.data().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        MatrixMap(b.mutable_grad().data(), k, n).noalias() += ConstMatrixMap(a.data().data(), m, k).transpose() * dc;
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = x[i] + y[i];
  if (autograd::should_record({&a, &b})) {
    autograd::record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      if (a.requires_grad()) autograd::accumulate(a, out.grad());
      if (b.requires_grad()) autograd::accumulate(b, out.grad());
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = x[i] - y[i];
  if (autograd::should_record({&a, &b})) {
    autograd::record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      if (a.requires_grad()) autograd::accumulate(a, out.grad());
      if (b.requires_grad()) {
        auto g = b.mutable_grad();
        auto go = out.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = x[i] * y[i];
  if (autograd::should_record({&a, &b})) {
    autograd::record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.mutable_grad();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * y[i];
      }
      if (b.requires_grad()) {
        auto g = b.mutable_grad();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * x[i];
      }
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.shape().size() != 1 || bias.numel() != x.cols()) {
    throw DimensionError("add_bias: bias " + shape_to_string(bias.shape()) + " does not match rows of " +
                         shape_to_string(x.shape()));
  }
  const std::size_t rows = x.rows(), n = x.cols();
  Tensor out(x.shape());
  auto src = x.data(), b = bias.data();
  auto dst = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < n; ++c) dst[r * n + c] = src[r * n + c] + b[c];
  }
  if (autograd::should_record({&x, &bias})) {
    autograd::record(out, [x, bias, out, rows, n]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (x.requires_grad()) autograd::accumulate(x, go);
      if (bias.requires_grad()) {
        auto g = bias.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < n; ++c) g[c] += go[r * n + c];
        }
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = elementwise_unary(x, [factor](double v) { return v * factor; });
  if (autograd::should_record({&x})) {
    autograd::record(out, [x, out, factor]() mutable {
      if (!out.has_grad()) return;
      auto g = x.mutable_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * factor;
    });
  }
  return out;
}

Tensor scale_by(const Tensor& x, const Tensor& coefficients, std::size_t index) {
  if (index >= coefficients.numel()) throw IndexError("scale_by: coefficient index out of range");
  const double factor = coefficients.data()[index];
  Tensor out = elementwise_unary(x, [factor](double v) { return v * factor; });
  if (autograd::should_record({&x, &coefficients})) {
    autograd::record(out, [x, coefficients, out, index]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      const double factor = coefficients.data()[index];
      if (x.requires_grad()) {
        auto g = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * factor;
      }
      if (coefficients.requires_grad()) {
        auto xv = x.data();
        double acc = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) acc += go[i] * xv[i];
        coefficients.mutable_grad()[index] += acc;
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  auto v = x.data();
  Tensor out = Tensor::scalar(std::accumulate(v.begin(), v.end(), 0.0));
  if (autograd::should_record({&x})) {
    autograd::record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      const double go = out.grad()[0];
      for (double& g : x.mutable_grad()) g += go;
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, std::span<const std::uint32_t> ids) {
  require_matrix("gather_rows", table);
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<std::uint32_t> index(ids.begin(), ids.end());
  Tensor out({index.size(), d});
  auto src = table.data();
  auto dst = out.mutable_data();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= vocab) {
      throw IndexError("gather_rows: id " + std::to_string(index[r]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(src.begin() + index[r] * d, d, dst.begin() + r * d);
  }
  if (autograd::should_record({&table})) {
    autograd::record(out, [table, out, index = std::move(index), d]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto g = table.mutable_grad();
      for (std::size_t r = 0; r < index.size(); ++r) {
        for (std::size_t c = 0; c < d; ++c) g[index[r] * d + c] += go[r * d + c];
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.cols(), rows = x.rows();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_to_string(gain.shape()) + "/" +
                         shape_to_string(bias.shape()) + " do not match " + shape_to_string(x.shape()));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  Tensor out(x.shape());
  std::vector<double> normalized(x.numel());
  std::vector<double> inv_std(rows);
  auto src = x.data(), g = gain.data(), b = bias.data();
  auto dst = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = src.data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    inv_std[r] = rstd;
    for (std::size_t c = 0; c < d; ++c) {
      const double xhat = (row[c] - mean) * rstd;
      normalized[r * d + c] = xhat;
      dst[r * d + c] = xhat * g[c] + b[c];
    }
  }
  if (autograd::should_record({&x, &gain, &bias})) {
    autograd::record(out, [x, gain, bias, out, normalized = std::move(normalized), inv_std = std::move(inv_std),
                           rows, d]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (gain.requires_grad()) {
        auto dg = gain.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < d; ++c) dg[c] += go[r * d + c] * normalized[r * d + c];
        }
      }
      if (bias.requires_grad()) {
        auto db = bias.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < d; ++c) db[c] += go[r * d + c];
        }
      }
      if (x.requires_grad()) {
        auto dx = x.mutable_grad();
        auto g = gain.data();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double dxhat = go[r * d + c] * g[c];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * normalized[r * d + c];
          }
          mean_dxhat *= inv_d;
          mean_dxhat_xhat *= inv_d;
          for (std::size_t c = 0; c < d; ++c) {
            const double dxhat = go[r * d + c] * g[c];
            dx[r * d + c] += inv_std[r] * (dxhat - mean_dxhat - normalized[r * d + c] * mean_dxhat_xhat);
          }
        }
      }
    });
  }
  return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  Tensor out = elementwise_unary(x, [](double v) {
    return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluK * v * v * v)));
  });
  if (autograd::should_record({&x})) {
    autograd::record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto xv = x.data();
      auto g = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xv[i];
        const double t = std::tanh(kGeluC * (v + kGeluK * v * v * v));
        const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluK * v * v);
        g[i] += go[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
      }
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = x.cols(), rows = x.rows();
  if (n == 0) throw DomainError("softmax_rows: empty row");
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = src.data() + r * n;
    double* y = dst.data() + r * n;
    const double peak = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      y[c] = std::exp(row[c] - peak);
      total += y[c];
    }
    for (std::size_t c = 0; c < n; ++c) y[c] /= total;
  }
  if (autograd::should_record({&x})) {
    autograd::record(out, [x, out, rows, n]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto y = out.data();
      auto g = x.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += go[r * n + c] * y[r * n + c];
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += y[r * n + c] * (go[r * n + c] - dot);
      }
    });
  }
  return out;
}

Tensor cross_entropy_logits(const Tensor& logits, std::span<const std::uint32_t> targets) {
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  std::vector<std::uint32_t> target(targets.begin(), targets.end());
  std::vector<double> probs(logits.numel());
  auto z = logits.data();
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (target[r] >= vocab) {
      throw IndexError("cross_entropy_logits: target " + std::to_string(target[r]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    const double* row = z.data() + r * vocab;
    const double peak = *std::max_element(row, row + vocab);
    double total = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      probs[r * vocab + c] = std::exp(row[c] - peak);
      total += probs[r * vocab + c];
    }
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] /= total;
    loss += std::log(total) + peak - row[target[r]];
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(rows));
  if (autograd::should_record({&logits})) {
    autograd::record(out, [logits, out, probs = std::move(probs), target = std::move(target), rows,
                           vocab]() mutable {
      if (!out.has_grad()) return;
      const double go = out.grad()[0] / static_cast<double>(rows);
      auto g = logits.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < vocab; ++c) g[r * vocab + c] += go * probs[r * vocab + c];
        g[r * vocab + target[r]] -= go;
      }
    });
  }
  return out;
}

// ---- finite differences -----------------------------------------------------

FiniteDiffReport finite_diff_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                   double h, std::size_t samples, std::uint64_t seed) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_check: h must be positive");
  std::vector<std::vector<double>> analytic(params.size());
  {
    for (Tensor& p : params) p.clear_grad();
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].has_grad()) {
        analytic[i].assign(params[i].grad().begin(), params[i].grad().end());
      } else {
        analytic[i].assign(params[i].numel(), 0.0);
      }
    }
  }

  std::vector<std::size_t> offsets{0};
  for (const Tensor& p : params) offsets.push_back(offsets.back() + p.numel());
  FiniteDiffReport report;
  if (offsets.back() == 0) return report;

  NoGradGuard no_grad;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, offsets.back() - 1);
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t flat = pick(rng);
    const std::size_t which =
        static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin()) - 1;
    const std::size_t index = flat - offsets[which];
    auto values = params[which].mutable_data();
    const double original = values[index];
    values[index] = original + h;
    const double plus = loss_fn().item();
    values[index] = original - h;
    const double minus = loss_fn().item();
    values[index] = original;
    const double numeric = (plus - minus) / (2.0 * h);
    const double exact = analytic[which][index];
    const double rel = std::abs(numeric - exact) / (std::abs(exact) + 1e-12);
    ++report.coordinates_checked;
    if (rel > report.max_relative_error || report.coordinates_checked == 1) {
      report.max_relative_error = std::max(rel, report.max_relative_error);
      report.worst_parameter = which;
      report.worst_index = index;
      report.worst_analytic = exact;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

}  // namespace stagformer
