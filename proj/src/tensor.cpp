#include "clipin/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "clipin/error.hpp"

namespace clipin {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::ZeroNormRow: return "ZeroNormRow";
    case ErrorCode::NotScalar: return "NotScalar";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::TokenOutOfRange: return "TokenOutOfRange";
    case ErrorCode::PadOnlySequence: return "PadOnlySequence";
    case ErrorCode::BatchTooSmall: return "BatchTooSmall";
    case ErrorCode::NonPositiveTau: return "NonPositiveTau";
    case ErrorCode::MissingComponent: return "MissingComponent";
    case ErrorCode::OutOfRangePixels: return "OutOfRangePixels";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DegenerateClass: return "DegenerateClass";
    case ErrorCode::EmptyPrompts: return "EmptyPrompts";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::NoPositives: return "NoPositives";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

Buffer& Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

thread_local bool g_no_grad = false;

void check_finite(const Buffer& values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteValue, "tensor holds NaN or Inf");
  }
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() { return g_no_grad; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Buffer values(shape_size(shape), value);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return from(std::move(shape), Buffer(values.begin(), values.end()), requires_grad);
}

Tensor Tensor::from(Shape shape, Buffer values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw Error(ErrorCode::ShapeMismatch, "shape " + shape_string(shape) + " does not hold " +
                                              std::to_string(values.size()) + " values");
  }
  check_finite(values);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from(Shape{}, Buffer{value}, requires_grad);
}

Tensor Tensor::from_op(Shape shape, Buffer values, std::vector<Tensor> parents,
                       detail::BackwardFn backward) {
  Tensor out = from(std::move(shape), std::move(values), false);
  if (g_no_grad) return out;
  bool needs = std::any_of(parents.begin(), parents.end(),
                           [](const Tensor& p) { return p.defined() && p.requires_grad(); });
  if (!needs) return out;
  auto& node = *out.node_;
  node.requires_grad = true;
  node.parents.reserve(parents.size());
  for (auto& p : parents) node.parents.push_back(p.node_);
  node.backward = std::move(backward);
  return out;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw Error(ErrorCode::ShapeMismatch, "axis " + std::to_string(axis) + " out of range for " +
                                              shape_string(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw Error(ErrorCode::ShapeMismatch, "expected 2-D, got " + shape_string(shape()));
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw Error(ErrorCode::ShapeMismatch, "expected 2-D, got " + shape_string(shape()));
  return node_->shape[1];
}

std::span<const double> Tensor::values() const { return {node_->value.data(), node_->value.size()}; }
std::span<double> Tensor::mutable_values() { return {node_->value.data(), node_->value.size()}; }

double Tensor::at(std::size_t row, std::size_t col) const {
  return node_->value[row * cols() + col];
}

double Tensor::item() const {
  if (size() != 1) throw Error(ErrorCode::NotScalar, "item() on " + shape_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return {node_->grad.data(), node_->grad.size()}; }

std::span<double> Tensor::mutable_grad() {
  auto& g = node_->grad_buffer();
  return {g.data(), g.size()};
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone(bool requires_grad) const {
  return from(node_->shape, node_->value, requires_grad);
}

void Tensor::copy_values_from(const Tensor& other) {
  if (other.shape() != shape()) {
    throw Error(ErrorCode::ShapeMismatch,
                "copy " + shape_string(other.shape()) + " into " + shape_string(shape()));
  }
  node_->value = other.node_->value;
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw Error(ErrorCode::NotScalar, "backward() needs a scalar, got " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order of the recorded graph.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward) node->backward(*node);
  }
  for (detail::Node* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->parents.clear();
    }
  }
}

}  // namespace clipin
