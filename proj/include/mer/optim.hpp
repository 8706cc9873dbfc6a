// Adam with bias correction, plus the cosine learning-rate schedule.
#pragma once

#include "mer/nn.hpp"

namespace mer {

// lr(t) = lr0 * (1 + cos(pi * t / total)) / 2; lr(0) = lr0, lr(total) = 0.
inline double cosine_anneal(std::int64_t step, std::int64_t total, double lr0) {
  if (total <= 0) return lr0;
  const double t = std::min<double>(static_cast<double>(step),
                                    static_cast<double>(total));
  return lr0 * (1.0 + std::cos(std::numbers::pi * t / static_cast<double>(total))) / 2.0;
}

template <typename T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(ParamList<T> params, T beta1 = T(0.9), T beta2 = T(0.999),
                T eps = T(1e-8))
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    slots_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const std::size_t n = static_cast<std::size_t>(params_[i].tensor.size());
      slots_[i].m.assign(n, T(0));
      slots_[i].v.assign(n, T(0));
    }
  }

  // One update with the given learning rate. Parameters whose gradient was
  // never populated in this step are left untouched.
  void step(T lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), t_);
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].tensor;
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto x = p.mutable_data();
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      for (std::size_t j = 0; j < x.size(); ++j) {
        m[j] = beta1_ * m[j] + (T(1) - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (T(1) - beta2_) * g[j] * g[j];
        const T mhat = m[j] / static_cast<T>(bc1);
        const T vhat = v[j] / static_cast<T>(bc2);
        x[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  const ParamList<T>& params() const { return params_; }
  std::int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  ParamList<T> params_;
  std::vector<Slot> slots_;
  T beta1_ = T(0.9), beta2_ = T(0.999), eps_ = T(1e-8);
  std::int64_t t_ = 0;
};

}  // namespace mer
