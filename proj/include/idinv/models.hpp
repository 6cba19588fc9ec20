#pragma once

// Encoder E(.) and discriminator D(.) that are trained against a frozen generator.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "idinv/core.hpp"
#include "idinv/nn.hpp"
#include "idinv/synthesis.hpp"
#include "idinv/trunk.hpp"

namespace idinv::training {

struct EncoderConfig {
  int resolution = 32;
  int channels = 1;
  int layers = 8;
  int latent_dim = 64;
  int min_fmaps = 16;
  int max_fmaps = 32;

  static EncoderConfig for_generator(const synthesis::GeneratorConfig& g) {
    EncoderConfig c;
    c.resolution = g.resolution;
    c.channels = g.channels;
    c.layers = g.layers();
    c.latent_dim = g.latent_dim;
    return c;
  }
  nn::TrunkConfig trunk() const { return {resolution, channels, min_fmaps, max_fmaps}; }
};

/// Image -> layer-wise W code [L, d].
template <typename Scalar>
class EncoderModel {
 public:
  EncoderModel() = default;

  static EncoderModel create(const EncoderConfig& config, std::uint64_t seed) {
    EncoderModel e;
    e.config_ = config;
    SeededRng rng(seed);
    e.trunk_ = nn::ConvTrunk<Scalar>(e.params_, rng, "encoder/trunk", config.trunk());
    const int c = config.trunk().out_fmaps();
    e.final_ = nn::make_conv(e.params_, rng, "encoder/final", c, c, 3);
    e.head_ = nn::make_dense(e.params_, rng, "encoder/head", c * 16, config.layers * config.latent_dim, 0.0, 1.0);
    return e;
  }

  const EncoderConfig& config() const { return config_; }
  const nn::ParameterSet<Scalar>& parameters() const { return params_; }
  nn::ParameterSet<Scalar>& parameters() { return params_; }

  EncoderModel clone() const {
    EncoderModel e = *this;
    e.params_ = params_.clone();
    return e;
  }

  template <typename Other>
  EncoderModel<Other> cast() const {
    auto e = EncoderModel<Other>::create(config_, 0);
    e.parameters() = params_.template cast<Other>();
    return e;
  }

  void set_trainable(bool on) { params_.set_trainable(on); }
  bool frozen() const {
    for (const auto& v : params_.vars())
      if (v.requires_grad()) return false;
    return true;
  }

  /// [N, C, R, R] -> [N, L, d]
  Var<Scalar> encode(const Var<Scalar>& x) const {
    auto h = leaky_relu(nn::conv(params_, final_, trunk_.forward(params_, x)));
    auto flat = reshape(h, {h.dim(0), static_cast<int>(h.size() / h.dim(0))});
    return reshape(nn::dense(params_, head_, flat), {x.dim(0), config_.layers, config_.latent_dim});
  }

 private:
  EncoderConfig config_;
  nn::ParameterSet<Scalar> params_;
  nn::ConvTrunk<Scalar> trunk_;
  nn::Conv final_;
  nn::Dense head_;
};

template <typename Scalar>
LatentCode<Scalar> encode(const EncoderModel<Scalar>& e, const Image<Scalar>& x) {
  ad::NoGrad ng;
  return unstack_codes(e.encode(stack_images(std::vector<Image<Scalar>>{x})), LatentSpace::kW).front();
}

template <typename Scalar>
std::vector<LatentCode<Scalar>> encode(const EncoderModel<Scalar>& e, const std::vector<Image<Scalar>>& images) {
  if (images.empty()) return {};
  ad::NoGrad ng;
  return unstack_codes(e.encode(stack_images(images)), LatentSpace::kW);
}

struct DiscriminatorConfig {
  int resolution = 32;
  int channels = 1;
  int min_fmaps = 16;
  int max_fmaps = 32;

  nn::TrunkConfig trunk() const { return {resolution, channels, min_fmaps, max_fmaps}; }
};

/// Image -> scalar realness score.
template <typename Scalar>
class DiscriminatorModel {
 public:
  DiscriminatorModel() = default;

  static DiscriminatorModel create(const DiscriminatorConfig& config, std::uint64_t seed) {
    DiscriminatorModel d;
    d.config_ = config;
    SeededRng rng(seed);
    d.trunk_ = nn::ConvTrunk<Scalar>(d.params_, rng, "discriminator/trunk", config.trunk());
    const int c = config.trunk().out_fmaps();
    d.final_ = nn::make_conv(d.params_, rng, "discriminator/final", c, c, 3);
    d.hidden_ = nn::make_dense(d.params_, rng, "discriminator/hidden", c * 16, c);
    d.out_ = nn::make_dense(d.params_, rng, "discriminator/out", c, 1, 0.0, 1.0);
    return d;
  }

  const DiscriminatorConfig& config() const { return config_; }
  const nn::ParameterSet<Scalar>& parameters() const { return params_; }
  nn::ParameterSet<Scalar>& parameters() { return params_; }

  DiscriminatorModel clone() const {
    DiscriminatorModel d = *this;
    d.params_ = params_.clone();
    return d;
  }

  template <typename Other>
  DiscriminatorModel<Other> cast() const {
    auto d = DiscriminatorModel<Other>::create(config_, 0);
    d.parameters() = params_.template cast<Other>();
    return d;
  }

  /// [N, C, R, R] -> [N]
  Var<Scalar> score(const Var<Scalar>& x) const {
    auto h = leaky_relu(nn::conv(params_, final_, trunk_.forward(params_, x)));
    auto flat = reshape(h, {h.dim(0), static_cast<int>(h.size() / h.dim(0))});
    auto s = nn::dense(params_, out_, leaky_relu(nn::dense(params_, hidden_, flat)));
    return reshape(s, {x.dim(0)});
  }

 private:
  DiscriminatorConfig config_;
  nn::ParameterSet<Scalar> params_;
  nn::ConvTrunk<Scalar> trunk_;
  nn::Conv final_;
  nn::Dense hidden_;
  nn::Dense out_;
};

}  // namespace idinv::training
