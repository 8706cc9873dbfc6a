// Trainable layers. Each layer owns Parameter tensors (requires_grad leaves)
// and reports them through collect_params with hierarchical dotted names;
// names must be unique within a model, which the collector enforces.
#pragma once

#include <map>

#include "mer/ops_nn.hpp"

namespace mer {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
void append_param(ParamList<T>& out, const std::string& name,
                  const Tensor<T>& t) {
  out.push_back({name, t});
}

template <typename T>
void check_unique_names(const ParamList<T>& params) {
  std::map<std::string, int> seen;
  for (const auto& p : params)
    if (++seen[p.name] > 1)
      throw UsageError("duplicate parameter name: " + p.name);
}

// Kaiming-uniform fan-in initialization.
template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor<T> t = Tensor<T>::uniform(std::move(shape), rng, -bound, bound);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias = true)
      : in_(in), out_(out) {
    weight_ = kaiming_uniform<T>({out, in}, in, rng);
    if (with_bias) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      bias_ = Tensor<T>::uniform({out}, rng, -bound, bound);
      bias_.set_requires_grad(true);
    }
  }

  // x [..., in] -> [..., out]
  Tensor<T> forward(const Tensor<T>& x) const {
    return linear_op(x, weight_, bias_);
  }

  void collect_params(const std::string& prefix, ParamList<T>& out) const {
    append_param(out, prefix + ".weight", weight_);
    if (bias_.defined()) append_param(out, prefix + ".bias", bias_);
  }

  const Tensor<T>& weight() const { return weight_; }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  std::int64_t in_features() const { return in_; }
  std::int64_t out_features() const { return out_; }

 private:
  std::int64_t in_ = 0, out_ = 0;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(std::int64_t cin, std::int64_t cout, std::int64_t ksize,
              std::int64_t stride, std::int64_t pad, Rng& rng,
              bool with_bias = true)
      : stride_(stride), pad_(pad) {
    const std::int64_t fan_in = cin * ksize * ksize;
    weight_ = kaiming_uniform<T>({cout, cin, ksize, ksize}, fan_in, rng);
    if (with_bias) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      bias_ = Tensor<T>::uniform({cout}, rng, -bound, bound);
      bias_.set_requires_grad(true);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d(x, weight_, bias_, stride_, pad_);
  }

  void collect_params(const std::string& prefix, ParamList<T>& out) const {
    append_param(out, prefix + ".weight", weight_);
    if (bias_.defined()) append_param(out, prefix + ".bias", bias_);
  }

 private:
  std::int64_t stride_ = 1, pad_ = 0;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

// Batch normalization layer holding scale/shift parameters plus running
// statistics (plain buffers, saved in checkpoints but never differentiated).
template <typename T>
class BatchNormLayer {
 public:
  BatchNormLayer() = default;
  explicit BatchNormLayer(std::int64_t features, T eps = T(1e-5),
                          T momentum = T(0.1))
      : eps_(eps), momentum_(momentum) {
    gamma_ = Tensor<T>::ones({features});
    gamma_.set_requires_grad(true);
    beta_ = Tensor<T>::zeros({features});
    beta_.set_requires_grad(true);
    running_mean_.assign(features, T(0));
    running_var_.assign(features, T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return batch_norm(x, gamma_, beta_, running_mean_, running_var_, training,
                      momentum_, eps_);
  }

  void collect_params(const std::string& prefix, ParamList<T>& out) const {
    append_param(out, prefix + ".gamma", gamma_);
    append_param(out, prefix + ".beta", beta_);
  }

  // Running stats travel with checkpoints as named buffers.
  void collect_buffers(const std::string& prefix,
                       std::vector<std::pair<std::string, std::vector<T>*>>& out) {
    out.push_back({prefix + ".running_mean", &running_mean_});
    out.push_back({prefix + ".running_var", &running_var_});
  }

  std::vector<T>& running_mean() { return running_mean_; }
  std::vector<T>& running_var() { return running_var_; }

 private:
  T eps_ = T(1e-5), momentum_ = T(0.1);
  Tensor<T> gamma_, beta_;
  std::vector<T> running_mean_, running_var_;
};

template <typename T>
class LayerNormLayer {
 public:
  LayerNormLayer() = default;
  explicit LayerNormLayer(std::int64_t features, T eps = T(1e-5)) : eps_(eps) {
    gamma_ = Tensor<T>::ones({features});
    gamma_.set_requires_grad(true);
    beta_ = Tensor<T>::zeros({features});
    beta_.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return layer_norm(x, gamma_, beta_, eps_);
  }

  void collect_params(const std::string& prefix, ParamList<T>& out) const {
    append_param(out, prefix + ".gamma", gamma_);
    append_param(out, prefix + ".beta", beta_);
  }

 private:
  T eps_ = T(1e-5);
  Tensor<T> gamma_, beta_;
};

// Two-layer feed-forward block with GELU.
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::int64_t dim, std::int64_t hidden, Rng& rng)
      : fc1_(dim, hidden, rng), fc2_(hidden, dim, rng) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    return fc2_.forward(gelu(fc1_.forward(x)));
  }

  void collect_params(const std::string& prefix, ParamList<T>& out) const {
    fc1_.collect_params(prefix + ".fc1", out);
    fc2_.collect_params(prefix + ".fc2", out);
  }

 private:
  Linear<T> fc1_, fc2_;
};

}  // namespace mer
