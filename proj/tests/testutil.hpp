// Shared helpers for the test suites: finite-difference gradient checking and
// random tensor construction.
#pragma once

#include <functional>

#include "mer/ops_nn.hpp"

namespace mer::testing {

// Values bounded away from zero so |.|-style kinks are never sampled.
template <typename T>
Tensor<T> random_signed(Shape shape, Rng& rng, double lo = 0.3,
                        double hi = 1.2) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.mutable_data())
    v = static_cast<T>((rng.coin() ? 1.0 : -1.0) * rng.uniform(lo, hi));
  return t;
}

template <typename T>
struct GradCheckConfig {
  double step;       // central-difference step
  double rel_tol;    // acceptance threshold on the relative error
  double floor;      // denominator floor when both gradients are tiny
  int points = 20;   // coordinates sampled per check
};

template <typename T>
GradCheckConfig<T> default_gradcheck() {
  if constexpr (std::is_same_v<T, float>)
    return {5e-3, 1e-3, 1e-3, 20};
  else
    return {1e-5, 1e-5, 1e-6, 20};
}

// Central finite differences against the analytic gradient of a scalar-valued
// function of the given inputs. Returns the worst relative error seen.
template <typename T>
double gradcheck(
    const std::function<Tensor<T>(std::vector<Tensor<T>>&)>& fn,
    std::vector<Tensor<T>> inputs, Rng& rng,
    GradCheckConfig<T> cfg = default_gradcheck<T>()) {
  for (auto& in : inputs) in.set_requires_grad(true);

  for (auto& in : inputs) in.zero_grad();
  Tensor<T> loss = fn(inputs);
  loss.backward();
  std::vector<std::vector<T>> analytic;
  for (auto& in : inputs)
    analytic.emplace_back(in.grad().begin(), in.grad().end());

  double worst = 0.0;
  for (int k = 0; k < cfg.points; ++k) {
    const std::size_t which =
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(inputs.size()) - 1));
    auto data = inputs[which].mutable_data();
    const std::size_t coord =
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1));
    const T saved = data[coord];
    const T h = static_cast<T>(cfg.step);

    data[coord] = saved + h;
    double plus;
    {
      NoGradGuard ng;
      plus = static_cast<double>(fn(inputs).item());
    }
    data[coord] = saved - h;
    double minus;
    {
      NoGradGuard ng;
      minus = static_cast<double>(fn(inputs).item());
    }
    data[coord] = saved;

    const double numeric = (plus - minus) / (2.0 * static_cast<double>(h));
    const double a = static_cast<double>(analytic[which][coord]);
    const double denom = std::max({std::abs(a), std::abs(numeric), cfg.floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace mer::testing
