#pragma once

// Dense float32 tensors and a tape-based reverse-mode autodiff engine.
//
// A `Tensor` is a plain value: a shape and a row-major buffer. Differentiable
// computation happens on a `Tape`, which owns one node per recorded value.
// `Var` is a cheap handle to a node. Leaves are added with `Tape::leaf`,
// operations append nodes in execution order (so the tape is topologically
// sorted by construction), and `backward` walks the tape in reverse.
//
//   Tape tape;
//   Var w = tape.leaf(weights, /*requires_grad=*/true);
//   Var y = sum(mul(w, w));
//   backward(y);
//   Tensor g = tape.grad_of(w);   // == 2 * weights

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pdit {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor scalar(float value) { return Tensor({1}, {value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& vec() const noexcept { return data_; }
  float* ptr() noexcept { return data_.data(); }
  const float* ptr() const noexcept { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  /// Value of a single-element tensor.
  float item() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const noexcept;
  void fill(float value) noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

class Tape;

/// Handle to a value recorded on a tape. Valid as long as the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of operations. Nodes are appended in execution order, so
/// every node's inputs precede it. Single-threaded; move it, never share it.
class Tape {
 public:
  /// Backward rule for node `self`: read `tape.grad(self)` and accumulate into
  /// the grads of its inputs (only those that require grad).
  using BackwardFn = std::function<void(Tape& tape, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an operation output. The node requires grad iff any input does;
  /// otherwise `fn` is dropped. Throws NumericError if `value` is not finite.
  Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Mutable gradient buffer, zero-allocated on first access.
  Tensor& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return nodes_.at(id).has_grad; }
  /// Gradient of `v`, or zeros when nothing flowed into it.
  Tensor grad_of(const Var& v) const;

  void zero_grad();
  Var var(std::size_t id) { return Var(this, id); }

 private:
  friend void backward(const Var& loss);

  struct Node {
    const char* op = "leaf";
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  // deque keeps references to existing nodes stable across appends
  std::deque<Node> nodes_;
};

/// Reverse pass from a scalar loss. Populates a grad for every requires_grad
/// leaf; leaves not connected to the loss receive zeros. Deterministic.
void backward(const Var& loss);

// ---------------------------------------------------------------------------
// Operations. All inputs must live on the same tape. Shape mismatches throw
// InvalidArgument; non-finite outputs throw NumericError.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var add_scalar(const Var& a, float s);
/// x[..., n] + b[n]
Var add_bias(const Var& x, const Var& b);

Var exp(const Var& x);
Var log(const Var& x);
Var relu(const Var& x);
/// tanh-approximation GELU.
Var gelu(const Var& x);
Var square(const Var& x);
/// Clamp into [lo, hi]; gradient is zero outside the interval.
Var clamp(const Var& x, float lo, float hi);
/// Elementwise min; ties route the gradient to `a`.
Var minimum(const Var& a, const Var& b);

/// x[..., k] @ w[k, n] (+ bias[n]) -> [..., n]
Var linear(const Var& x, const Var& w, std::optional<Var> bias = std::nullopt);
/// a[n, k] @ b[k, m], or a[n, k] @ b[m, k]^T when trans_b.
Var matmul(const Var& a, const Var& b, bool trans_b = false);
/// Batched matmul over the leading axis: a[B, n, k] @ b[B, k, m] (or b[B, m, k]^T).
Var bmm(const Var& a, const Var& b, bool trans_b = false);

Var softmax(const Var& x, std::size_t axis);
Var log_softmax(const Var& x, std::size_t axis);
/// Normalizes over the last axis, then gain * xhat + bias.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, float eps = 1e-5f);
/// Rows of x[..., d] scaled to unit L2 norm. Zero rows throw NumericError.
Var l2_normalize(const Var& x);

/// Rows of table[V, d] selected by ids -> [ids.size(), d].
Var embedding(const Var& table, std::span<const int> ids);
Var reshape(const Var& x, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t count);
/// [A, B, C, D] -> [A, C, B, D]
Var swap_axes_12(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
Var sum_axis(const Var& x, std::size_t axis);
Var mean_axis(const Var& x, std::size_t axis);
/// x[B, C] -> [B] with out[b] = x[b, index[b]].
Var pick(const Var& x, std::span<const int> index);

/// Stride-1 2-D convolution on channels-last input x[B, H, W, C] with
/// weight[k*k*C, Cout] (rows ordered ky, kx, c) and bias[Cout]. Zero padding.
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t kernel, std::size_t padding);

/// Copy of x's value as a constant on the same tape (stop-gradient).
Var detach(const Var& x);

struct AttentionResult {
  Var output;
  Var weights;
};

/// Scaled dot-product attention softmax(Q K^T / sqrt(d_k)) V. Accepts rank-2
/// Q[n, d_k], K[m, d_k], V[m, d_v] or the batched rank-3 equivalents. `mask`
/// (shape [n, m], true = attend) is shared across the batch; a row with no
/// attendable key throws InvalidArgument.
AttentionResult attention(const Var& q, const Var& k, const Var& v,
                          const std::vector<std::vector<bool>>* mask = nullptr);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

using TapeProgram = std::function<Var(Tape&, std::span<const Var>)>;

/// Fingerprint of the branches taken by piecewise-linear ops (relu, clamp,
/// minimum) on this thread while the trace is alive. Traces do not nest.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  std::uint64_t signature() const noexcept { return signature_; }
  /// Folds one branch decision into the active trace, if any.
  static void note(bool branch) noexcept;

 private:
  std::uint64_t signature_ = 0xcbf29ce484222325ULL;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
  /// Coordinates where exactly one of the +h / -h steps changed a relu, clamp
  /// or minimum branch; they use the one-sided difference on the other side.
  std::size_t one_sided = 0;
  /// Coordinates where both steps changed a branch. They are excluded from
  /// max_rel_error and counted here instead.
  std::size_t kink_crossings = 0;
};

/// Compares backward() against central differences for every coordinate of
/// every parameter, falling back to one-sided differences next to a kink.
/// Error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckReport grad_check(const TapeProgram& f, std::span<const Tensor> params, float h = 1e-3f);

// ---------------------------------------------------------------------------
// Adam.

struct AdamHyper {
  float lr = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
};

class AdamState {
 public:
  AdamState() = default;
  AdamState(AdamHyper hyper, std::span<const Tensor> params);

  const AdamHyper& hyper() const noexcept { return hyper_; }
  AdamHyper& hyper() noexcept { return hyper_; }
  std::uint64_t step() const noexcept { return step_; }
  std::span<const Tensor> first_moments() const noexcept { return m_; }
  std::span<const Tensor> second_moments() const noexcept { return v_; }

 private:
  friend void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state);

  AdamHyper hyper_;
  std::uint64_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

/// One bias-corrected Adam update in place.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state);

}  // namespace pdit
