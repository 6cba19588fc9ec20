#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "idinv/nn.hpp"

namespace idinv::nn {

struct TrunkConfig {
  int resolution = 32;
  int channels = 1;
  int min_fmaps = 16;
  int max_fmaps = 32;

  /// Pooling blocks needed to reach 4x4.
  int blocks() const { return static_cast<int>(std::lround(std::log2(resolution))) - 2; }
  int fmaps(int block) const { return std::min(max_fmaps, min_fmaps << block); }
  int out_fmaps() const { return fmaps(std::max(0, blocks() - 1)); }
};

/// Downsampling convolutional trunk: image [N, C, R, R] -> features [N, F, 4, 4].
/// Each block is conv3x3 -> leaky ReLU -> 2x2 average pool.
template <typename Scalar>
class ConvTrunk {
 public:
  ConvTrunk() = default;

  ConvTrunk(ParameterSet<Scalar>& params, SeededRng& rng, const std::string& prefix, const TrunkConfig& config)
      : config_(config) {
    IDINV_REQUIRE(config.resolution >= 8 && (config.resolution & (config.resolution - 1)) == 0,
                  "trunk resolution must be a power of two >= 8");
    from_image_ = make_conv(params, rng, prefix + "/from_image", config.channels, config.fmaps(0), 1);
    int in = config.fmaps(0);
    for (int b = 0; b < config.blocks(); ++b) {
      const int out = config.fmaps(b);
      blocks_.push_back(make_conv(params, rng, prefix + "/block" + std::to_string(b), in, out, 3));
      in = out;
    }
  }

  const TrunkConfig& config() const { return config_; }

  Var<Scalar> forward(const ParameterSet<Scalar>& params, const Var<Scalar>& x) const {
    IDINV_REQUIRE(x.rank() == 4 && x.dim(1) == config_.channels && x.dim(2) == config_.resolution &&
                      x.dim(3) == config_.resolution,
                  "expected images [N, " + std::to_string(config_.channels) + ", " + std::to_string(config_.resolution) +
                      ", " + std::to_string(config_.resolution) + "], got " + shape_string(x.shape()));
    auto h = leaky_relu(conv(params, from_image_, x));
    for (const auto& block : blocks_) h = avg_pool2(leaky_relu(conv(params, block, h)));
    return h;
  }

 private:
  TrunkConfig config_;
  Conv from_image_;
  std::vector<Conv> blocks_;
};

}  // namespace idinv::nn
