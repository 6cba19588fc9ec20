#pragma once

#include <Eigen/Core>
#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>
#include <boost/random/uniform_int_distribution.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "idinv/autodiff.hpp"
#include "idinv/error.hpp"

namespace idinv {

using ad::Buffer;
using ad::RowMatrix;
using ad::Shape;
using ad::Var;
using ad::shape_string;

/// Pixels in [-1, 1], laid out [C, H, W].
template <typename Scalar>
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  Buffer<Scalar> pixels;

  Image() = default;
  Image(int c, int h, int w) : channels(c), height(h), width(w), pixels(Buffer<Scalar>::Zero(Eigen::Index(c) * h * w)) {}
  Image(int c, int h, int w, Buffer<Scalar> values) : channels(c), height(h), width(w), pixels(std::move(values)) {
    IDINV_REQUIRE(pixels.size() == Eigen::Index(c) * h * w, "image buffer does not match its shape");
  }

  Eigen::Index size() const { return pixels.size(); }
  Shape shape() const { return {channels, height, width}; }
  bool same_shape(const Image& o) const { return channels == o.channels && height == o.height && width == o.width; }

  Scalar& at(int c, int y, int x) { return pixels((Eigen::Index(c) * height + y) * width + x); }
  Scalar at(int c, int y, int x) const { return pixels((Eigen::Index(c) * height + y) * width + x); }

  bool valid() const {
    if (channels != 1 && channels != 3) return false;
    if (!pixels.allFinite()) return false;
    const Scalar tol = Scalar(1e-6);
    return pixels.size() == 0 || (pixels.minCoeff() >= Scalar(-1) - tol && pixels.maxCoeff() <= Scalar(1) + tol);
  }

  template <typename Other>
  Image<Other> cast() const {
    return Image<Other>(channels, height, width, pixels.template cast<Other>());
  }
};

/// Real-valued gate in [0, 1] over an image's spatial grid, shape [1, H, W].
template <typename Scalar>
struct Mask {
  int height = 0;
  int width = 0;
  Buffer<Scalar> weights;

  Mask() = default;
  Mask(int h, int w, Scalar fill = Scalar(1)) : height(h), width(w), weights(Buffer<Scalar>::Constant(Eigen::Index(h) * w, fill)) {}

  Scalar& at(int y, int x) { return weights(Eigen::Index(y) * width + x); }
  Scalar at(int y, int x) const { return weights(Eigen::Index(y) * width + x); }

  bool valid() const {
    return weights.size() == Eigen::Index(height) * width &&
           (weights.size() == 0 || (weights.minCoeff() >= Scalar(0) && weights.maxCoeff() <= Scalar(1)));
  }

  template <typename Other>
  Mask<Other> cast() const {
    Mask<Other> m;
    m.height = height;
    m.width = width;
    m.weights = weights.template cast<Other>();
    return m;
  }
};

enum class LatentSpace { kZ, kW };

inline const char* latent_space_name(LatentSpace s) { return s == LatentSpace::kZ ? "Z" : "W"; }

/// Layer-wise latent code [L, d].
template <typename Scalar>
struct LatentCode {
  RowMatrix<Scalar> values;
  LatentSpace space = LatentSpace::kW;

  LatentCode() = default;
  LatentCode(RowMatrix<Scalar> v, LatentSpace s) : values(std::move(v)), space(s) {}

  int layers() const { return static_cast<int>(values.rows()); }
  int width() const { return static_cast<int>(values.cols()); }

  bool valid() const {
    if (values.rows() < 1 || !values.allFinite()) return false;
    return space == LatentSpace::kW || values.rows() == 1;
  }

  template <typename Other>
  LatentCode<Other> cast() const {
    return LatentCode<Other>(values.template cast<Other>(), space);
  }
};

/// Deterministic random source; the algorithm name is persisted with checkpoints.
class SeededRng {
 public:
  static constexpr const char* kAlgorithm = "boost-mt19937_64/ziggurat-normal";

  explicit SeededRng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::string algorithm() const { return kAlgorithm; }

  double normal() { return normal_(engine_); }
  double uniform() { return boost::random::uniform_01<double>()(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi) { return boost::random::uniform_int_distribution<int>(lo, hi)(engine_); }

  /// Independent child stream derived from this seed and a stream id.
  SeededRng fork(std::uint64_t stream) const { return SeededRng(mix(seed_ ^ mix(stream + 0x9e3779b97f4a7c15ULL))); }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const int j = uniform_int(0, static_cast<int>(i) - 1);
      std::swap(items[i - 1], items[static_cast<std::size_t>(j)]);
    }
  }

  template <typename Scalar>
  Buffer<Scalar> normal_buffer(Eigen::Index n) {
    Buffer<Scalar> out(n);
    for (Eigen::Index i = 0; i < n; ++i) out(i) = static_cast<Scalar>(normal());
    return out;
  }

 private:
  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  boost::random::mt19937_64 engine_;
  boost::random::normal_distribution<double> normal_;
};

/// n i.i.d. standard-normal Z codes of width d.
template <typename Scalar>
std::vector<LatentCode<Scalar>> sample_latent(SeededRng& rng, int n, int d) {
  IDINV_REQUIRE(d >= 1, "latent width must be positive");
  IDINV_REQUIRE(n >= 0, "sample count must be non-negative");
  std::vector<LatentCode<Scalar>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    RowMatrix<Scalar> v(1, d);
    for (int j = 0; j < d; ++j) v(0, j) = static_cast<Scalar>(rng.normal());
    out.emplace_back(std::move(v), LatentSpace::kZ);
  }
  return out;
}

/// Affine map of 8-bit levels onto [-1, 1].
template <typename Scalar>
Image<Scalar> rescale_pixels(std::span<const int> raw, int channels, int height, int width) {
  IDINV_REQUIRE(static_cast<Eigen::Index>(raw.size()) == Eigen::Index(channels) * height * width,
                "raw pixel count does not match the image shape");
  Image<Scalar> img(channels, height, width);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    IDINV_REQUIRE(raw[i] >= 0 && raw[i] <= 255, "raw pixel " + std::to_string(raw[i]) + " outside [0, 255]");
    img.pixels(static_cast<Eigen::Index>(i)) = Scalar(2) * static_cast<Scalar>(raw[i]) / Scalar(255) - Scalar(1);
  }
  return img;
}

/// Inverse of rescale_pixels, rounding to the nearest level and clamping.
template <typename Scalar>
std::vector<int> unscale_pixels(const Image<Scalar>& img) {
  std::vector<int> raw(static_cast<std::size_t>(img.size()));
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const double level = std::round((static_cast<double>(img.pixels(i)) + 1.0) * 127.5);
    raw[static_cast<std::size_t>(i)] = static_cast<int>(std::clamp(level, 0.0, 255.0));
  }
  return raw;
}

template <typename Scalar>
Scalar mse(const Image<Scalar>& a, const Image<Scalar>& b) {
  IDINV_REQUIRE(a.same_shape(b), "mse: image shapes differ");
  return (a.pixels - b.pixels).square().mean();
}

/// Mask-weighted squared error averaged over the mask support and channels.
template <typename Scalar>
Scalar masked_mse(const Image<Scalar>& a, const Image<Scalar>& b, const Mask<Scalar>& m) {
  IDINV_REQUIRE(a.same_shape(b), "masked_mse: image shapes differ");
  IDINV_REQUIRE(m.height == a.height && m.width == a.width, "masked_mse: mask does not match image size");
  IDINV_REQUIRE(m.valid(), "masked_mse: mask values outside [0, 1]");
  const Scalar support = m.weights.sum();
  if (!(support > Scalar(0))) throw Error(ErrorKind::kDegenerateMask, "mask has no support");
  const Eigen::Index plane = Eigen::Index(a.height) * a.width;
  Scalar total = 0;
  for (int c = 0; c < a.channels; ++c) {
    auto diff = a.pixels.segment(c * plane, plane) - b.pixels.segment(c * plane, plane);
    total += (m.weights * diff.square()).sum();
  }
  return total / (support * static_cast<Scalar>(a.channels));
}

// ---------------------------------------------------------------------------
// Batching helpers between domain types and autodiff tensors.

template <typename Scalar>
Var<Scalar> stack_images(const std::vector<Image<Scalar>>& images) {
  IDINV_REQUIRE(!images.empty(), "cannot stack an empty image list");
  const auto& first = images.front();
  Buffer<Scalar> data(first.size() * static_cast<Eigen::Index>(images.size()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    IDINV_REQUIRE(images[i].same_shape(first), "cannot stack images of different shapes");
    data.segment(static_cast<Eigen::Index>(i) * first.size(), first.size()) = images[i].pixels;
  }
  return Var<Scalar>::constant(std::move(data), {static_cast<int>(images.size()), first.channels, first.height, first.width});
}

template <typename Scalar>
std::vector<Image<Scalar>> unstack_images(const Var<Scalar>& batch) {
  const int n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const Eigen::Index per = Eigen::Index(c) * h * w;
  std::vector<Image<Scalar>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.emplace_back(c, h, w, Buffer<Scalar>(batch.value().segment(i * per, per)));
  return out;
}

/// Codes [L, d] stacked to [N, L, d].
template <typename Scalar>
Var<Scalar> stack_codes(const std::vector<LatentCode<Scalar>>& codes, bool trainable = false) {
  IDINV_REQUIRE(!codes.empty(), "cannot stack an empty code list");
  const int rows = codes.front().layers(), d = codes.front().width();
  const Eigen::Index per = Eigen::Index(rows) * d;
  Buffer<Scalar> data(per * static_cast<Eigen::Index>(codes.size()));
  for (std::size_t i = 0; i < codes.size(); ++i) {
    IDINV_REQUIRE(codes[i].layers() == rows && codes[i].width() == d, "cannot stack codes of different shapes");
    // RowMatrix storage is already [L, d] row-major.
    data.segment(static_cast<Eigen::Index>(i) * per, per) = Eigen::Map<const Buffer<Scalar>>(codes[i].values.data(), per);
  }
  Shape shape{static_cast<int>(codes.size()), rows, d};
  return trainable ? Var<Scalar>::leaf(std::move(data), shape) : Var<Scalar>::constant(std::move(data), shape);
}

template <typename Scalar>
std::vector<LatentCode<Scalar>> unstack_codes(const Var<Scalar>& batch, LatentSpace space) {
  const int n = batch.dim(0);
  const int rows = batch.rank() == 3 ? batch.dim(1) : 1;
  const int d = batch.rank() == 3 ? batch.dim(2) : batch.dim(1);
  const Eigen::Index per = Eigen::Index(rows) * d;
  std::vector<LatentCode<Scalar>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    RowMatrix<Scalar> v = Eigen::Map<const RowMatrix<Scalar>>(batch.value().data() + i * per, rows, d);
    out.emplace_back(std::move(v), space);
  }
  return out;
}

}  // namespace idinv
