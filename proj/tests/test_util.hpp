#pragma once

#include <cmath>
#include <functional>

#include "rfbd/rng.hpp"
#include "rfbd/tensor.hpp"

namespace rfbd::testutil {

// Central finite differences against an analytic gradient. The loss functor
// must be a pure function of the tensor contents. Works in the tensor's own
// precision; callers use double instantiations for tight tolerances.
template <typename T>
double max_rel_grad_error(Tensor<T>& x, const std::function<double(const Tensor<T>&)>& loss,
                          const Tensor<T>& analytic_grad, double eps = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const T keep = x.data[i];
    x.data[i] = keep + static_cast<T>(eps);
    const double up = loss(x);
    x.data[i] = keep - static_cast<T>(eps);
    const double down = loss(x);
    x.data[i] = keep;
    const double numeric = (up - down) / (2.0 * eps);
    const double analytic = static_cast<double>(analytic_grad.data[i]);
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
    worst = std::max(worst, std::abs(numeric - analytic) / denom);
  }
  return worst;
}

template <typename T>
Tensor<T> random_tensor(std::vector<std::int64_t> shape, rfbd::Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.data) v = static_cast<T>(rng.normal(0.0, scale));
  return t;
}

}  // namespace rfbd::testutil
