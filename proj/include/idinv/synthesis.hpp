#pragma once

// Style-based generator: an MLP mapping Z -> W followed by a synthesis network
// that consumes one W row per style layer. No per-layer noise is injected, so
// generation is a deterministic function of the code.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "idinv/core.hpp"
#include "idinv/nn.hpp"

namespace idinv::synthesis {

struct MapperConfig {
  int depth = 4;
  int width = 64;
};

struct GeneratorConfig {
  int resolution = 32;
  int latent_dim = 64;
  int channels = 1;
  int max_fmaps = 32;
  int min_fmaps = 16;
  MapperConfig mapper;

  int blocks() const { return static_cast<int>(std::lround(std::log2(resolution))) - 1; }
  /// Two style inputs per resolution block.
  int layers() const { return 2 * blocks(); }
  int fmaps(int block) const { return std::max(min_fmaps, max_fmaps >> std::max(0, block - 1)); }

  void validate() const {
    IDINV_REQUIRE(resolution == 8 || resolution == 16 || resolution == 32 || resolution == 64,
                  "generator resolution must be one of 8, 16, 32, 64");
    IDINV_REQUIRE(latent_dim >= 1, "latent width must be positive");
    IDINV_REQUIRE(channels == 1 || channels == 3, "channels must be 1 or 3");
    IDINV_REQUIRE(mapper.depth >= 1, "mapper depth must be at least 1");
    IDINV_REQUIRE(mapper.width >= latent_dim, "mapper width must be at least the latent width");
    IDINV_REQUIRE(min_fmaps >= 1 && max_fmaps >= min_fmaps, "invalid feature-map widths");
  }
};

template <typename Scalar>
class GeneratorModel {
 public:
  GeneratorModel() = default;

  static GeneratorModel create(const GeneratorConfig& config, std::uint64_t seed) {
    config.validate();
    GeneratorModel g;
    g.config_ = config;
    SeededRng rng(seed);
    const int d = config.latent_dim;
    for (int i = 0; i < config.mapper.depth; ++i) {
      const int in = i == 0 ? d : config.mapper.width;
      const int out = i + 1 == config.mapper.depth ? d : config.mapper.width;
      g.mapper_.push_back(nn::make_dense(g.params_, rng, "mapper/" + std::to_string(i), in, out));
    }
    const int c0 = config.fmaps(0);
    g.const_input_ = g.params_.add("synthesis/const", Buffer<Scalar>::Ones(c0 * 16), {1, c0, 4, 4});
    int in = c0;
    for (int l = 0; l < config.layers(); ++l) {
      const int out = config.fmaps(l / 2);
      const std::string prefix = "synthesis/layer" + std::to_string(l);
      g.convs_.push_back(nn::make_conv(g.params_, rng, prefix + "/conv", in, out, 3));
      g.style_scale_.push_back(nn::make_dense(g.params_, rng, prefix + "/style_scale", d, out, 1.0, 1.0));
      g.style_shift_.push_back(nn::make_dense(g.params_, rng, prefix + "/style_shift", d, out, 0.0, 1.0));
      in = out;
    }
    g.to_image_ = nn::make_conv(g.params_, rng, "synthesis/to_image", in, config.channels, 1);
    return g;
  }

  const GeneratorConfig& config() const { return config_; }
  int layers() const { return config_.layers(); }
  int latent_dim() const { return config_.latent_dim; }

  const nn::ParameterSet<Scalar>& parameters() const { return params_; }
  nn::ParameterSet<Scalar>& parameters() { return params_; }

  bool frozen() const { return frozen_; }
  void freeze() {
    frozen_ = true;
    params_.set_trainable(false);
  }
  void unfreeze() {
    frozen_ = false;
    params_.set_trainable(true);
  }

  /// Deep copy with independent parameter storage.
  GeneratorModel clone() const {
    GeneratorModel g = *this;
    g.params_ = params_.clone();
    return g;
  }

  template <typename Other>
  GeneratorModel<Other> cast() const {
    auto g = GeneratorModel<Other>::create(config_, 0);
    g.parameters() = params_.template cast<Other>();
    if (frozen_) g.freeze();
    return g;
  }

  /// z [N, d] -> w [N, d]
  Var<Scalar> map(const Var<Scalar>& z) const {
    IDINV_REQUIRE(z.rank() == 2 && z.dim(1) == config_.latent_dim, "mapper input must be [N, " + std::to_string(config_.latent_dim) + "]");
    auto x = nn::pixel_norm(z);
    for (const auto& layer : mapper_) x = leaky_relu(nn::dense(params_, layer, x));
    return x;
  }

  /// codes [N, L, d] -> images [N, C, R, R] in [-1, 1]
  Var<Scalar> synthesize(const Var<Scalar>& codes) const {
    IDINV_REQUIRE(codes.rank() == 3 && codes.dim(1) == layers() && codes.dim(2) == config_.latent_dim,
                  "synthesis expects codes [N, " + std::to_string(layers()) + ", " + std::to_string(config_.latent_dim) +
                      "], got " + shape_string(codes.shape()));
    const int n = codes.dim(0);
    auto x = nn::tile_batch(params_[const_input_], n);
    for (int l = 0; l < layers(); ++l) {
      if (l > 0 && l % 2 == 0) x = upsample2(x);
      x = nn::instance_norm(leaky_relu(nn::conv(params_, convs_[static_cast<std::size_t>(l)], x)));
      auto w = select_row(codes, l);
      auto s = nn::dense(params_, style_scale_[static_cast<std::size_t>(l)], w);
      auto t = nn::dense(params_, style_shift_[static_cast<std::size_t>(l)], w);
      x = add(mul(x, expand_channels(s, x.shape())), expand_channels(t, x.shape()));
    }
    return tanh(nn::conv(params_, to_image_, x, 1.0));
  }

 private:
  GeneratorConfig config_;
  nn::ParameterSet<Scalar> params_;
  std::vector<nn::Dense> mapper_;
  int const_input_ = -1;
  std::vector<nn::Conv> convs_;
  std::vector<nn::Dense> style_scale_;
  std::vector<nn::Dense> style_shift_;
  nn::Conv to_image_;
  bool frozen_ = false;
};

/// Single-code mapping Z -> W.
template <typename Scalar>
LatentCode<Scalar> map_z_to_w(const GeneratorModel<Scalar>& g, const LatentCode<Scalar>& z) {
  IDINV_REQUIRE(z.space == LatentSpace::kZ && z.layers() == 1, "map_z_to_w expects a single Z-space row");
  IDINV_REQUIRE(z.width() == g.latent_dim(), "latent width mismatch: expected " + std::to_string(g.latent_dim()) +
                                                 ", got " + std::to_string(z.width()));
  ad::NoGrad ng;
  auto w = g.map(Var<Scalar>::constant(Buffer<Scalar>(Eigen::Map<const Buffer<Scalar>>(z.values.data(), z.width())), {1, z.width()}));
  return unstack_codes(w, LatentSpace::kW).front();
}

/// Batched mapping; equal to calling map_z_to_w on each code.
template <typename Scalar>
std::vector<LatentCode<Scalar>> map_z_to_w(const GeneratorModel<Scalar>& g, const std::vector<LatentCode<Scalar>>& zs) {
  if (zs.empty()) return {};
  for (const auto& z : zs) IDINV_REQUIRE(z.space == LatentSpace::kZ && z.width() == g.latent_dim(), "map_z_to_w: invalid Z code");
  ad::NoGrad ng;
  auto batch = stack_codes(zs);
  return unstack_codes(g.map(reshape(batch, {batch.dim(0), batch.dim(2)})), LatentSpace::kW);
}

/// Repeat a single W row into an L-row layer-wise code.
template <typename Scalar>
LatentCode<Scalar> broadcast_w(const LatentCode<Scalar>& w, int layers) {
  IDINV_REQUIRE(w.layers() == 1, "broadcast_w expects a single-row code");
  IDINV_REQUIRE(layers >= 1, "layer count must be positive");
  return LatentCode<Scalar>(w.values.replicate(layers, 1), LatentSpace::kW);
}

template <typename Scalar>
Image<Scalar> generate(const GeneratorModel<Scalar>& g, const LatentCode<Scalar>& code) {
  IDINV_REQUIRE(code.layers() == g.layers(), "code has " + std::to_string(code.layers()) + " rows, generator expects " +
                                                 std::to_string(g.layers()));
  IDINV_REQUIRE(code.width() == g.latent_dim(), "code width does not match the generator");
  ad::NoGrad ng;
  return unstack_images(g.synthesize(stack_codes(std::vector<LatentCode<Scalar>>{code}))).front();
}

template <typename Scalar>
std::vector<Image<Scalar>> generate(const GeneratorModel<Scalar>& g, const std::vector<LatentCode<Scalar>>& codes) {
  if (codes.empty()) return {};
  for (const auto& c : codes) IDINV_REQUIRE(c.layers() == g.layers() && c.width() == g.latent_dim(), "generate: code shape mismatch");
  ad::NoGrad ng;
  return unstack_images(g.synthesize(stack_codes(codes)));
}

/// The canonical sampling path: z -> w -> broadcast -> G.
template <typename Scalar>
std::vector<LatentCode<Scalar>> sample_w_codes(const GeneratorModel<Scalar>& g, SeededRng& rng, int n) {
  auto ws = map_z_to_w(g, sample_latent<Scalar>(rng, n, g.latent_dim()));
  std::vector<LatentCode<Scalar>> out;
  out.reserve(ws.size());
  for (const auto& w : ws) out.push_back(broadcast_w(w, g.layers()));
  return out;
}

}  // namespace idinv::synthesis
