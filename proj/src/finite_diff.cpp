#include "clipin/finite_diff.hpp"

#include <algorithm>
#include <cmath>

#include "clipin/ops.hpp"

namespace clipin {

Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h) {
  Tensor work = x.clone();
  Buffer grad(x.size());
  auto values = work.mutable_values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double original = values[i];
    values[i] = original + h;
    const double plus = f(work);
    values[i] = original - h;
    const double minus = f(work);
    values[i] = original;
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return Tensor::from(x.shape(), std::move(grad));
}

double finite_diff_coordinate(const std::function<double()>& f, Tensor& param, std::size_t i,
                              double h, bool extrapolate) {
  auto values = param.mutable_values();
  const double original = values[i];
  auto eval = [&](double v, std::uint64_t& signature) {
    values[i] = v;
    ops::KinkProbe probe;
    const double out = f();
    signature = probe.signature();
    return out;
  };
  std::uint64_t s0 = 0, sp = 0, sm = 0, s2 = 0;
  const double center = eval(original, s0);
  const double plus = eval(original + h, sp);
  const double minus = eval(original - h, sm);
  double result = 0.0;
  if ((sp == s0 && sm == s0) || h < 1e-9) {
    result = (plus - minus) / (2.0 * h);
    if (extrapolate) {
      const double p2 = eval(original + 0.5 * h, s2);
      const double m2 = eval(original - 0.5 * h, s2);
      result = (4.0 * (p2 - m2) / h - result) / 3.0;
    }
  } else if (sm == s0) {
    const double m2 = eval(original - 2.0 * h, s2);
    result = s2 == s0 ? (3.0 * center - 4.0 * minus + m2) / (2.0 * h) : (center - minus) / h;
  } else if (sp == s0) {
    const double p2 = eval(original + 2.0 * h, s2);
    result = s2 == s0 ? (-3.0 * center + 4.0 * plus - p2) / (2.0 * h) : (plus - center) / h;
  } else {
    // Kinks on both sides: retry closer in.
    values[i] = original;
    return finite_diff_coordinate(f, param, i, h * 0.1, extrapolate);
  }
  values[i] = original;
  return result;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace clipin
