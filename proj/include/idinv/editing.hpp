#pragma once

// Code-space editing on top of inverted codes: boundary-direction
// manipulation, interpolation, style mixing and masked semantic diffusion.

#include <optional>
#include <vector>

#include "idinv/evaluation.hpp"
#include "idinv/inversion.hpp"
#include "idinv/synthesis.hpp"

namespace idinv::editing {

/// Half-open row range [begin, end) of a layer-wise code.
struct LayerRange {
  int begin = 0;
  int end = 0;
};

struct EditSpec {
  evaluation::SemanticBoundary boundary;
  double alpha = 0.0;
  std::optional<LayerRange> layers;  // all rows when unset
};

namespace detail {
inline LayerRange resolve(const std::optional<LayerRange>& r, int layers) {
  const LayerRange out = r.value_or(LayerRange{0, layers});
  IDINV_REQUIRE(out.begin >= 0 && out.begin <= out.end && out.end <= layers,
                "layer range [" + std::to_string(out.begin) + ", " + std::to_string(out.end) + ") outside [0, " +
                    std::to_string(layers) + ")");
  return out;
}

template <typename Scalar>
void require_same_shape(const LatentCode<Scalar>& a, const LatentCode<Scalar>& b) {
  IDINV_REQUIRE(a.layers() >= 1 && b.layers() >= 1, "codes must not be empty");
  IDINV_REQUIRE(a.layers() == b.layers() && a.width() == b.width(), "codes have different shapes");
}
}  // namespace detail

/// z + alpha * n on the selected rows.
template <typename Scalar>
LatentCode<Scalar> shift_code(const LatentCode<Scalar>& z, const EditSpec& spec) {
  IDINV_REQUIRE(spec.boundary.normal.size() == z.width(), "boundary width " + std::to_string(spec.boundary.normal.size()) +
                                                              " does not match code width " + std::to_string(z.width()));
  IDINV_REQUIRE(std::abs(spec.boundary.normal.norm() - 1.0) < 1e-6, "boundary normal must have unit length");
  const auto range = detail::resolve(spec.layers, z.layers());
  LatentCode<Scalar> out = z;
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> step = (spec.alpha * spec.boundary.normal).transpose().template cast<Scalar>();
  for (int r = range.begin; r < range.end; ++r) out.values.row(r) += step;
  return out;
}

template <typename Scalar>
Image<Scalar> manipulate(const synthesis::GeneratorModel<Scalar>& g, const LatentCode<Scalar>& z, const EditSpec& spec) {
  return synthesis::generate(g, shift_code(z, spec));
}

template <typename Scalar>
LatentCode<Scalar> interpolate_codes(const LatentCode<Scalar>& a, const LatentCode<Scalar>& b, double lambda) {
  IDINV_REQUIRE(lambda >= 0.0 && lambda <= 1.0, "interpolation weight must lie in [0, 1]");
  detail::require_same_shape(a, b);
  if (lambda == 0.0) return a;
  if (lambda == 1.0) return b;
  const auto l = static_cast<Scalar>(lambda);
  return LatentCode<Scalar>((Scalar(1) - l) * a.values + l * b.values, a.space);
}

template <typename Scalar>
Image<Scalar> interpolate(const synthesis::GeneratorModel<Scalar>& g, const LatentCode<Scalar>& a, const LatentCode<Scalar>& b,
                          double lambda) {
  return synthesis::generate(g, interpolate_codes(a, b, lambda));
}

/// `frames` evenly spaced weights from 0 to 1 inclusive.
template <typename Scalar>
std::vector<Image<Scalar>> interpolation_sweep(const synthesis::GeneratorModel<Scalar>& g, const LatentCode<Scalar>& a,
                                               const LatentCode<Scalar>& b, int frames) {
  IDINV_REQUIRE(frames >= 2, "a sweep needs at least two frames");
  std::vector<LatentCode<Scalar>> codes;
  for (int k = 0; k < frames; ++k) codes.push_back(interpolate_codes(a, b, k == frames - 1 ? 1.0 : double(k) / (frames - 1)));
  std::vector<Image<Scalar>> out;
  for (const auto& c : codes) out.push_back(synthesis::generate(g, c));
  return out;
}

/// Default style rows: the last four.
inline LayerRange default_style_layers(int layers) { return {std::max(0, layers - 4), layers}; }

template <typename Scalar>
LatentCode<Scalar> mix_codes(const LatentCode<Scalar>& content, const LatentCode<Scalar>& style,
                             const std::optional<LayerRange>& layers = std::nullopt) {
  detail::require_same_shape(content, style);
  const auto range = detail::resolve(layers ? layers : std::optional(default_style_layers(content.layers())), content.layers());
  LatentCode<Scalar> out = content;
  for (int r = range.begin; r < range.end; ++r) out.values.row(r) = style.values.row(r);
  return out;
}

template <typename Scalar>
Image<Scalar> style_mix(const synthesis::GeneratorModel<Scalar>& g, const LatentCode<Scalar>& content,
                        const LatentCode<Scalar>& style, const std::optional<LayerRange>& layers = std::nullopt) {
  return synthesis::generate(g, mix_codes(content, style, layers));
}

// ---------------------------------------------------------------------------
// Semantic diffusion

struct Rect {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
};

struct DiffusionSpec {
  Rect crop;           // on the target
  int paste_top = 0;   // on the context
  int paste_left = 0;
  int feather = 0;     // linear ramp width in pixels inside the pasted region
  double lambda_vgg = 5e-5;
  double lambda_dom = 2.0;
  int steps = 200;
  double step_size = 0.01;

  void validate(int target_h, int target_w, int context_h, int context_w) const {
    IDINV_REQUIRE(crop.height >= 0 && crop.width >= 0, "crop size must be non-negative");
    if (crop.height == 0 || crop.width == 0) throw Error(ErrorKind::kDegenerateMask, "empty crop leaves the diffusion mask without support");
    IDINV_REQUIRE(crop.top >= 0 && crop.left >= 0 && crop.top + crop.height <= target_h && crop.left + crop.width <= target_w,
                  "crop lies outside the target");
    IDINV_REQUIRE(paste_top >= 0 && paste_left >= 0 && paste_top + crop.height <= context_h && paste_left + crop.width <= context_w,
                  "pasted region lies outside the context");
    IDINV_REQUIRE(feather >= 0, "feather must be non-negative");
  }
};

/// Mask over the context grid: 1 inside the pasted region, optionally ramped
/// down linearly over `feather` pixels at its border.
template <typename Scalar>
Mask<Scalar> diffusion_mask(const DiffusionSpec& spec, int height, int width) {
  Mask<Scalar> m(height, width, Scalar(0));
  for (int y = 0; y < spec.crop.height; ++y)
    for (int x = 0; x < spec.crop.width; ++x) {
      Scalar w = 1;
      if (spec.feather > 0) {
        const int edge = std::min({y, x, spec.crop.height - 1 - y, spec.crop.width - 1 - x});
        w = std::min(Scalar(1), static_cast<Scalar>(edge + 1) / static_cast<Scalar>(spec.feather + 1));
      }
      m.at(spec.paste_top + y, spec.paste_left + x) = w;
    }
  return m;
}

/// Pastes the target crop onto a copy of the context.
template <typename Scalar>
Image<Scalar> stitch(const Image<Scalar>& target, const Image<Scalar>& context, const DiffusionSpec& spec) {
  IDINV_REQUIRE(target.channels == context.channels, "target and context have different channel counts");
  spec.validate(target.height, target.width, context.height, context.width);
  Image<Scalar> out = context;
  for (int c = 0; c < context.channels; ++c)
    for (int y = 0; y < spec.crop.height; ++y)
      for (int x = 0; x < spec.crop.width; ++x)
        out.at(c, spec.paste_top + y, spec.paste_left + x) = target.at(c, spec.crop.top + y, spec.crop.left + x);
  return out;
}

template <typename Scalar>
inversion::InversionConfig diffusion_config(const DiffusionSpec& spec, int height, int width) {
  inversion::InversionConfig cfg;
  cfg.lambda_vgg = spec.lambda_vgg;
  cfg.lambda_dom = spec.lambda_dom;
  cfg.init = inversion::InitMode::kEncoder;
  cfg.steps = spec.steps;
  cfg.step_size = spec.step_size;
  cfg.mask = diffusion_mask<float>(spec, height, width);
  return cfg;
}

/// Stitch, encode the stitched image, then invert it with the pixel term gated by the mask.
template <typename Scalar>
inversion::InversionResult<Scalar> semantic_diffuse(const synthesis::GeneratorModel<Scalar>& g,
                                                    const training::EncoderModel<Scalar>& e,
                                                    const perception::FeatureExtractor<Scalar>& f, const Image<Scalar>& target,
                                                    const Image<Scalar>& context, const DiffusionSpec& spec) {
  const auto stitched = stitch(target, context, spec);
  const auto cfg = diffusion_config<Scalar>(spec, context.height, context.width);
  if (!(cfg.mask->weights.sum() > 0.0f)) throw Error(ErrorKind::kDegenerateMask, "diffusion mask has no support");
  return inversion::invert(g, e, f, stitched, cfg);
}

}  // namespace idinv::editing
