#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace clipin {

using Shape = std::vector<std::size_t>;

// Max-aligned storage keeps Eigen kernels on the same code path from run
// to run, which the bit-exact determinism tests depend on.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor;

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  // Lazily allocates a zeroed gradient buffer.
  Buffer& grad_buffer();
};

}  // namespace detail

// Dense row-major f64 array with an optional gradient slot. Copies are cheap
// handles onto shared storage; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor from(Shape shape, Buffer values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  // Builds the result of a differentiable op. The backward closure is kept
  // only when a parent requires gradients and no NoGradGuard is active.
  static Tensor from_op(Shape shape, Buffer values, std::vector<Tensor> parents,
                        detail::BackwardFn backward);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t rows() const;  // first dim of a 2-D tensor
  std::size_t cols() const;  // second dim of a 2-D tensor

  std::span<const double> values() const;
  // Direct writes are reserved for optimizers, EMA and gradient checks.
  std::span<double> mutable_values();
  double operator[](std::size_t i) const { return values()[i]; }
  double at(std::size_t row, std::size_t col) const;
  double item() const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;  // empty when no gradient was accumulated
  std::span<double> mutable_grad();       // allocates zeros on first use
  void zero_grad();

  Tensor clone(bool requires_grad = false) const;
  void copy_values_from(const Tensor& other);

  detail::Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// While alive, ops on the current thread record no backward graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool active();

 private:
  bool previous_;
};

// Reverse sweep from a scalar loss. Accumulates into every reachable
// requires_grad tensor, then releases the recorded graph.
void backward(const Tensor& loss);

// Integer token ids, row-major [batch, length]. Id 0 is padding.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;

  std::int32_t at(std::size_t b, std::size_t t) const { return ids[b * length + t]; }
  std::span<const std::int32_t> row(std::size_t b) const {
    return {ids.data() + b * length, length};
  }
};

inline constexpr std::int32_t kPadToken = 0;
inline constexpr std::int32_t kMaskToken = 1;

}  // namespace clipin
