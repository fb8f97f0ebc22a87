#pragma once

#include <functional>

#include "clipin/tensor.hpp"

namespace clipin {

using ScalarFn = std::function<double(const Tensor&)>;

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
// f receives a scratch copy of x with one coordinate perturbed.
Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h = 1e-5);

// Derivative of f() with respect to coordinate i of a tensor that f reads in
// place (model parameters). The value is restored afterwards. When a
// KinkProbe reports that a ReLU changes sign inside [x - h, x + h] the
// second-order one-sided difference on the smooth side is used instead.
// With `extrapolate`, central differences at h and h/2 are combined by
// Richardson extrapolation, cancelling the h^2 truncation term.
double finite_diff_coordinate(const std::function<double()>& f, Tensor& param, std::size_t i,
                              double h = 1e-5, bool extrapolate = false);

// |a - b| / max(|a|, |b|, floor); the floor keeps exact zeros comparable.
double relative_error(double analytic, double numeric, double floor = 1e-6);

}  // namespace clipin
