#include "pdit/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <sstream>

#include "pdit/error.hpp"

namespace pdit {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {
  for (std::size_t d : shape_)
    if (d == 0) throw InvalidArgument("tensor dimensions must be positive: " + shape_string(shape_));
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (std::size_t d : shape_)
    if (d == 0) throw InvalidArgument("tensor dimensions must be positive: " + shape_string(shape_));
  if (numel(shape_) != data_.size())
    throw InvalidArgument("shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) +
                          " elements");
}

float Tensor::item() const {
  if (data_.size() != 1) throw InvalidArgument("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size())
    throw InvalidArgument("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  // Inf and NaN are exactly the values with an all-ones exponent.
  std::uint32_t bad = 0;
  for (float x : data_) bad |= static_cast<std::uint32_t>((std::bit_cast<std::uint32_t>(x) & 0x7f800000u) == 0x7f800000u);
  return bad == 0;
}

void Tensor::fill(float value) noexcept { std::fill(data_.begin(), data_.end(), value); }

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite output from ") + op);
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.requires_grad =
      std::any_of(inputs.begin(), inputs.end(), [this](std::size_t i) { return nodes_[i].requires_grad; });
  if (node.requires_grad) {
    node.inputs = std::move(inputs);
    node.backward = std::move(fn);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_.at(id);
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0f);
    n.has_grad = true;
  }
  return n.grad;
}

Tensor Tape::grad_of(const Var& v) const {
  const Node& n = nodes_.at(v.id());
  if (n.has_grad) return n.grad;
  return Tensor(n.value.shape(), 0.0f);
}

void Tape::zero_grad() {
  for (Node& n : nodes_) {
    n.grad = Tensor();
    n.has_grad = false;
  }
}

void backward(const Var& loss) {
  if (!loss.valid()) throw InvalidArgument("backward on an empty Var");
  if (loss.value().size() != 1)
    throw InvalidArgument("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  Tape& tape = loss.tape();
  tape.grad(loss.id()).fill(1.0f);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& node = tape.nodes_[i];
    if (!node.requires_grad) continue;
    if (node.backward && node.has_grad) {
      node.backward(tape, i);
      if (!node.grad.all_finite()) throw NumericError(std::string("non-finite gradient at ") + node.op);
    } else if (!node.backward) {
      tape.grad(i);  // leaf: make sure a (possibly zero) gradient exists
    }
  }
}

}  // namespace pdit
