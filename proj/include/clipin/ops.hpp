#pragma once

#include <cstdint>

#include "clipin/tensor.hpp"

// Differentiable building blocks. Every op registers a backward rule; shapes
// must match exactly (no implicit broadcasting) or ShapeMismatch is thrown.
namespace clipin::ops {

Tensor matmul(const Tensor& a, const Tensor& b);  // [n,k] x [k,m]
Tensor transpose(const Tensor& x);                // 2-D only
Tensor reshape(const Tensor& x, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);  // [n,d] + [d]
Tensor scale(const Tensor& x, double factor);
Tensor scale_by(const Tensor& x, const Tensor& factor);    // factor is a scalar tensor
Tensor add_scalar(const Tensor& x, double offset);
Tensor exp(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

inline constexpr double kNormEps = 1e-12;
// Row-wise x / ||x||_2. A 1-D input is treated as a single row.
Tensor l2_normalize(const Tensor& x);
Tensor row_dot(const Tensor& a, const Tensor& b);  // [n,d],[n,d] -> [n]

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor diag(const Tensor& x);  // [n,n] -> [n]

// Masked mean of embedding rows over non-pad positions: [V,d] x [B,l] -> [B,d].
Tensor embedding_mean(const Tensor& table, const TokenBatch& tokens);

// Value copy that blocks the backward path.
Tensor stop_grad(const Tensor& x);

// While alive, relu() folds its activation sign pattern into a thread-local
// hash. Gradient checks use it to detect finite-difference steps that cross a
// kink, where central differences stop approximating the derivative.
class KinkProbe {
 public:
  KinkProbe();
  ~KinkProbe();
  KinkProbe(const KinkProbe&) = delete;
  KinkProbe& operator=(const KinkProbe&) = delete;

  std::uint64_t signature() const;

 private:
  bool previous_active_;
  std::uint64_t previous_hash_;
};

}  // namespace clipin::ops
