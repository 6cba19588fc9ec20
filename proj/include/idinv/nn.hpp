#pragma once

// Parameter storage, equalized-learning-rate layers and the Adam optimizer
// shared by every learned model.

#include <cmath>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "idinv/autodiff.hpp"
#include "idinv/core.hpp"

namespace idinv::nn {

using namespace idinv::ad;

/// Ordered, named parameter arrays. Copies share storage; use clone() for a deep copy.
template <typename Scalar>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Var<Scalar> var;
  };

  int add(std::string name, Buffer<Scalar> init, Shape shape) {
    entries_.push_back({std::move(name), Var<Scalar>::leaf(std::move(init), std::move(shape))});
    return static_cast<int>(entries_.size()) - 1;
  }

  const Var<Scalar>& operator[](int index) const { return entries_.at(static_cast<std::size_t>(index)).var; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return static_cast<int>(i);
    throw Error(ErrorKind::kNotFound, "no parameter named " + name);
  }

  std::vector<Var<Scalar>> vars() const {
    std::vector<Var<Scalar>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.var);
    return out;
  }

  Eigen::Index count() const {
    Eigen::Index n = 0;
    for (const auto& e : entries_) n += e.var.size();
    return n;
  }

  void set_trainable(bool on) {
    for (auto& e : entries_) e.var.set_requires_grad(on);
  }

  ParameterSet clone() const {
    ParameterSet copy;
    for (const auto& e : entries_) {
      const int i = copy.add(e.name, e.var.value(), e.var.shape());
      copy.entries_[static_cast<std::size_t>(i)].var.set_requires_grad(e.var.requires_grad());
    }
    return copy;
  }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> copy;
    for (const auto& e : entries_) copy.add(e.name, e.var.value().template cast<Other>(), e.var.shape());
    copy.set_trainable(!entries_.empty() && entries_.front().var.requires_grad());
    return copy;
  }

  /// Replace values in order; shapes must agree.
  void assign(const std::vector<Buffer<Scalar>>& values) {
    IDINV_REQUIRE(values.size() == entries_.size(), "parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      IDINV_REQUIRE(values[i].size() == entries_[i].var.size(), "parameter size mismatch for " + entries_[i].name);
      entries_[i].var.mutable_value() = values[i];
    }
  }

  bool bit_equal(const ParameterSet& other) const {
    if (other.entries_.size() != entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i].var.value();
      const auto& b = other.entries_[i].var.value();
      if (a.size() != b.size() || std::memcmp(a.data(), b.data(), sizeof(Scalar) * static_cast<std::size_t>(a.size())) != 0)
        return false;
    }
    return true;
  }

  bool all_finite() const {
    for (const auto& e : entries_)
      if (!e.var.value().allFinite()) return false;
    return true;
  }

 private:
  std::vector<Entry> entries_;
};

/// Fully connected layer; weights are stored unit-variance and scaled at run time.
struct Dense {
  int weight = -1;
  int bias = -1;
  int in = 0;
  int out = 0;
  double gain = 1.0;
};

struct Conv {
  int weight = -1;
  int bias = -1;
  int in = 0;
  int out = 0;
  int kernel = 3;
};

template <typename Scalar>
Dense make_dense(ParameterSet<Scalar>& params, SeededRng& rng, const std::string& name, int in, int out,
                 double bias_init = 0.0, double gain = std::sqrt(2.0)) {
  Dense layer;
  layer.in = in;
  layer.out = out;
  layer.gain = gain / std::sqrt(static_cast<double>(in));
  layer.weight = params.add(name + "/weight", rng.normal_buffer<Scalar>(Eigen::Index(in) * out), {in, out});
  layer.bias = params.add(name + "/bias", Buffer<Scalar>::Constant(out, static_cast<Scalar>(bias_init)), {out});
  return layer;
}

template <typename Scalar>
Conv make_conv(ParameterSet<Scalar>& params, SeededRng& rng, const std::string& name, int in, int out, int kernel) {
  Conv layer;
  layer.in = in;
  layer.out = out;
  layer.kernel = kernel;
  layer.weight = params.add(name + "/weight", rng.normal_buffer<Scalar>(Eigen::Index(out) * in * kernel * kernel),
                            {out, in, kernel, kernel});
  layer.bias = params.add(name + "/bias", Buffer<Scalar>::Zero(out), {out});
  return layer;
}

/// x [N, in] -> [N, out]
template <typename Scalar>
Var<Scalar> dense(const ParameterSet<Scalar>& params, const Dense& layer, const Var<Scalar>& x) {
  auto y = matmul(x, scale(params[layer.weight], static_cast<Scalar>(layer.gain)));
  return add(y, expand_channels(params[layer.bias], y.shape()));
}

/// x [N, in, H, W] -> [N, out, H, W]
template <typename Scalar>
Var<Scalar> conv(const ParameterSet<Scalar>& params, const Conv& layer, const Var<Scalar>& x, double gain = std::sqrt(2.0)) {
  const double fan_in = static_cast<double>(layer.in) * layer.kernel * layer.kernel;
  auto y = conv2d(x, scale(params[layer.weight], static_cast<Scalar>(gain / std::sqrt(fan_in))));
  return add(y, expand_channels(params[layer.bias], y.shape()));
}

/// Per-sample, per-channel normalization over spatial positions.
template <typename Scalar>
Var<Scalar> instance_norm(const Var<Scalar>& x, Scalar eps = Scalar(1e-8)) {
  const Scalar inv_hw = Scalar(1) / static_cast<Scalar>(x.dim(2) * x.dim(3));
  auto mu = scale(reduce_channels(x, true), inv_hw);
  auto centered = sub(x, expand_channels(mu, x.shape()));
  auto var = scale(reduce_channels(square(centered), true), inv_hw);
  return mul(centered, expand_channels(pow_scalar(add_scalar(var, eps), Scalar(-0.5)), x.shape()));
}

/// Rescale each row of [N, d] to unit mean square.
template <typename Scalar>
Var<Scalar> pixel_norm(const Var<Scalar>& x, Scalar eps = Scalar(1e-8)) {
  auto ms = scale(sum_per_sample(square(x)), Scalar(1) / static_cast<Scalar>(x.dim(1)));
  return mul(x, expand_per_sample(pow_scalar(add_scalar(ms, eps), Scalar(-0.5)), x.shape()));
}

/// Repeat a [1, ...] tensor n times along the batch axis.
template <typename Scalar>
Var<Scalar> tile_batch(const Var<Scalar>& x, int n) {
  Shape shape = x.shape();
  const int inner = static_cast<int>(x.size());
  auto ones = Var<Scalar>::full({n, 1}, Scalar(1));
  auto tiled = matmul(ones, reshape(x, {1, inner}));
  shape[0] = n;
  return reshape(tiled, shape);
}

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First-order adaptive-moment optimizer over leaf tensors.
template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Var<Scalar>> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
      first_.push_back(Buffer<Scalar>::Zero(p.size()));
      second_.push_back(Buffer<Scalar>::Zero(p.size()));
    }
  }

  void step(const std::vector<Var<Scalar>>& grads) {
    IDINV_REQUIRE(grads.size() == params_.size(), "gradient count does not match parameter count");
    ++steps_;
    const Scalar b1 = static_cast<Scalar>(config_.beta1);
    const Scalar b2 = static_cast<Scalar>(config_.beta2);
    const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(config_.beta1, static_cast<double>(steps_)));
    const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(config_.beta2, static_cast<double>(steps_)));
    const Scalar lr = static_cast<Scalar>(config_.learning_rate);
    const Scalar eps = static_cast<Scalar>(config_.epsilon);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& g = grads[i].value();
      first_[i] = b1 * first_[i] + (Scalar(1) - b1) * g;
      second_[i] = b2 * second_[i] + (Scalar(1) - b2) * g.square();
      params_[i].mutable_value() -= lr * (first_[i] / c1) / ((second_[i] / c2).sqrt() + eps);
    }
  }

  long steps() const { return steps_; }

 private:
  std::vector<Var<Scalar>> params_;
  AdamConfig config_;
  std::vector<Buffer<Scalar>> first_;
  std::vector<Buffer<Scalar>> second_;
  long steps_ = 0;
};

}  // namespace idinv::nn
