#pragma once

// Small attribute classifier whose mid-level activations serve as the
// perceptual feature space F(.) and as the embedding for the Frechet metric.

#include <cstdint>
#include <string>
#include <vector>

#include "idinv/core.hpp"
#include "idinv/nn.hpp"
#include "idinv/trunk.hpp"

namespace idinv::perception {

struct FeatureConfig {
  int resolution = 32;
  int channels = 1;
  int attributes = 4;
  int min_fmaps = 16;
  int max_fmaps = 32;

  nn::TrunkConfig trunk() const { return {resolution, channels, min_fmaps, max_fmaps}; }
};

template <typename Scalar>
struct FeatureMap {
  Buffer<Scalar> values;
};

template <typename Scalar>
class FeatureExtractor {
 public:
  FeatureExtractor() = default;

  static FeatureExtractor create(const FeatureConfig& config, std::uint64_t seed) {
    IDINV_REQUIRE(config.attributes >= 1, "feature extractor needs at least one attribute output");
    FeatureExtractor f;
    f.config_ = config;
    SeededRng rng(seed);
    f.trunk_ = nn::ConvTrunk<Scalar>(f.params_, rng, "features/trunk", config.trunk());
    const int c = config.trunk().out_fmaps();
    f.final_ = nn::make_conv(f.params_, rng, "features/final", c, c, 3);
    f.head_ = nn::make_dense(f.params_, rng, "features/head", c, config.attributes, 0.0, 1.0);
    return f;
  }

  const FeatureConfig& config() const { return config_; }
  /// Name of the layer whose activations are exposed as features.
  std::string tap() const { return "features/trunk/block" + std::to_string(config_.trunk().blocks() - 1); }
  int feature_dim() const { return config_.trunk().out_fmaps() * 16; }

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

  FeatureExtractor clone() const {
    FeatureExtractor f = *this;
    f.params_ = params_.clone();
    return f;
  }

  template <typename Other>
  FeatureExtractor<Other> cast() const {
    auto f = FeatureExtractor<Other>::create(config_, 0);
    f.parameters() = params_.template cast<Other>();
    if (frozen_) f.freeze();
    return f;
  }

  /// Tap activations, flattened: [N, C, R, R] -> [N, feature_dim].
  Var<Scalar> features(const Var<Scalar>& x) const {
    auto h = trunk_.forward(params_, x);
    return reshape(h, {h.dim(0), feature_dim()});
  }

  /// Per-attribute logits: [N, C, R, R] -> [N, attributes].
  Var<Scalar> logits(const Var<Scalar>& x) const {
    auto h = leaky_relu(nn::conv(params_, final_, trunk_.forward(params_, x)));
    auto pooled = scale(reduce_channels(h, true), Scalar(1) / static_cast<Scalar>(h.dim(2) * h.dim(3)));
    return nn::dense(params_, head_, pooled);
  }

 private:
  FeatureConfig config_;
  nn::ParameterSet<Scalar> params_;
  nn::ConvTrunk<Scalar> trunk_;
  nn::Conv final_;
  nn::Dense head_;
  bool frozen_ = false;
};

template <typename Scalar>
FeatureMap<Scalar> extract_features(const FeatureExtractor<Scalar>& f, const Image<Scalar>& x) {
  IDINV_REQUIRE(x.height == f.config().resolution && x.width == f.config().resolution && x.channels == f.config().channels,
                "image does not match the feature extractor's trained resolution");
  ad::NoGrad ng;
  return {f.features(stack_images(std::vector<Image<Scalar>>{x})).value()};
}

/// Batched feature extraction, one row per image.
template <typename Scalar>
RowMatrix<Scalar> extract_features(const FeatureExtractor<Scalar>& f, const std::vector<Image<Scalar>>& images,
                                   int batch = 64) {
  RowMatrix<Scalar> out(static_cast<Eigen::Index>(images.size()), f.feature_dim());
  ad::NoGrad ng;
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t stop = std::min(images.size(), start + static_cast<std::size_t>(batch));
    std::vector<Image<Scalar>> chunk(images.begin() + static_cast<long>(start), images.begin() + static_cast<long>(stop));
    auto feats = f.features(stack_images(chunk));
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(stop - start)) =
        Eigen::Map<const RowMatrix<Scalar>>(feats.value().data(), feats.dim(0), feats.dim(1));
  }
  return out;
}

/// L2 distance between tap features.
template <typename Scalar>
Scalar perceptual_distance(const FeatureExtractor<Scalar>& f, const Image<Scalar>& a, const Image<Scalar>& b) {
  IDINV_REQUIRE(a.same_shape(b), "perceptual_distance: image shapes differ");
  auto fa = extract_features(f, a);
  auto fb = extract_features(f, b);
  return std::sqrt((fa.values - fb.values).square().sum());
}

}  // namespace idinv::perception
