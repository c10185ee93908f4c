#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stagformer {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

namespace detail {
struct TensorNode;
}

// Dense row-major double tensor with an optional gradient buffer.
//
// Tensor is a shared handle: copies alias the same storage. This is what
// lets shared-weights models reference one parameter from several passes.
// A tensor is treated as a matrix [rows x cols] where cols is the last
// extent and rows is the product of the leading extents.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t row, std::size_t col) const;
  std::span<const double> row(std::size_t r) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates a zero gradient on first use.
  std::span<double> mutable_grad() const;
  void zero_grad();
  void clear_grad();

  bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }
  Tensor detach() const;

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Ordered record of adjoint closures. Replaying the closures in reverse
// recording order is a valid reverse topological traversal because an op
// can only consume tensors that already exist.
class Tape {
 public:
  void record(std::function<void()> adjoint);
  // Seeds d(loss)/d(loss) = 1 and replays the tape. A second call without
  // reset() is a StateError.
  void backward(const Tensor& loss);
  void reset();
  std::size_t size() const noexcept { return adjoints_.size(); }
  bool consumed() const noexcept { return consumed_; }

 private:
  std::vector<std::function<void()>> adjoints_;
  bool consumed_ = false;
};

// Makes `tape` the recording tape of the calling thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording on the calling thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

// Runs backward on the calling thread's active tape.
void backward(const Tensor& loss);

namespace autograd {

// True when an op consuming `inputs` must be recorded on the active tape.
bool should_record(std::initializer_list<const Tensor*> inputs);
// Marks `out` as differentiable and appends `adjoint` to the active tape.
void record(Tensor& out, std::function<void()> adjoint);
// grad += values (elementwise).
void accumulate(const Tensor& target, std::span<const double> values);

}  // namespace autograd

// ---- multiply-accumulate instrumentation ---------------------------------

enum class FlopPartition : std::size_t {
  kEmbed = 0,
  kSelfAttention,
  kCrossAttention,
  kFfn,
  kUnembed,
  kOther,
};
inline constexpr std::size_t kFlopPartitions = 6;

struct FlopCounts {
  std::array<std::uint64_t, kFlopPartitions> macs{};

  std::uint64_t& operator[](FlopPartition p) { return macs[static_cast<std::size_t>(p)]; }
  std::uint64_t operator[](FlopPartition p) const { return macs[static_cast<std::size_t>(p)]; }
  std::uint64_t total() const;
};

// Accumulates MACs issued by forward ops on the calling thread while alive.
class FlopCounter {
 public:
  FlopCounter();
  ~FlopCounter();
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  const FlopCounts& counts() const noexcept { return counts_; }
  void add(std::uint64_t macs) noexcept;
  FlopPartition partition = FlopPartition::kOther;

 private:
  FlopCounts counts_;
  FlopCounter* previous_;
};

// Tags MACs issued in this scope with `partition`.
class FlopPartitionScope {
 public:
  explicit FlopPartitionScope(FlopPartition partition);
  ~FlopPartitionScope();
  FlopPartitionScope(const FlopPartitionScope&) = delete;
  FlopPartitionScope& operator=(const FlopPartitionScope&) = delete;

 private:
  FlopPartition previous_ = FlopPartition::kOther;
};

void count_macs(std::uint64_t macs) noexcept;

// ---- differentiable primitives --------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x [rows x n] + bias [n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
// x * coefficients[index], differentiable in both.
Tensor scale_by(const Tensor& x, const Tensor& coefficients, std::size_t index);
Tensor sum(const Tensor& x);
// Rows of `table` selected by `ids`.
Tensor gather_rows(const Tensor& table, std::span<const std::uint32_t> ids);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Tanh approximation.
Tensor gelu(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy_logits(const Tensor& logits, std::span<const std::uint32_t> targets);

// ---- gradient verification -----------------------------------------------

struct FiniteDiffReport {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  std::size_t worst_parameter = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares autodiff gradients of `loss_fn` against central differences on
// `samples` coordinates drawn uniformly (seeded) over all entries of
// `params`. loss_fn must rebuild the loss from the current parameter values.
// Relative error: |numeric - analytic| / (|analytic| + 1e-12).
FiniteDiffReport finite_diff_check(const std::function<Tensor()>& loss_fn,
                                   std::vector<Tensor> params, double h, std::size_t samples,
                                   std::uint64_t seed);

}  // namespace stagformer
