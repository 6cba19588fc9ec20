#pragma once

// Per-image latent optimization with an encoder-based code regularizer, plus
// the random-init pixel-only and encoder-only baselines as configurations.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "idinv/core.hpp"
#include "idinv/models.hpp"
#include "idinv/nn.hpp"
#include "idinv/perception.hpp"
#include "idinv/synthesis.hpp"

namespace idinv::inversion {

using perception::FeatureExtractor;
using synthesis::GeneratorModel;
using training::EncoderModel;

enum class InitMode { kEncoder, kRandom, kGiven };

inline const char* init_mode_name(InitMode m) {
  switch (m) {
    case InitMode::kEncoder: return "encoder";
    case InitMode::kRandom: return "random";
    case InitMode::kGiven: return "given";
  }
  return "unknown";
}

struct InversionConfig {
  double lambda_vgg = 5e-5;
  double lambda_dom = 2.0;
  InitMode init = InitMode::kEncoder;
  int steps = 200;
  double step_size = 0.01;
  std::optional<Mask<float>> mask;
  std::optional<LatentCode<float>> initial_code;  // for InitMode::kGiven
  std::uint64_t seed = 0;                         // for InitMode::kRandom

  void validate() const {
    IDINV_REQUIRE(lambda_vgg >= 0 && lambda_dom >= 0, "loss weights must be non-negative");
    IDINV_REQUIRE(steps >= 0, "steps must be non-negative");
    IDINV_REQUIRE(step_size > 0, "step size must be positive");
    IDINV_REQUIRE(init != InitMode::kGiven || initial_code.has_value(), "init=given requires an initial code");
    if (mask) IDINV_REQUIRE(mask->valid(), "mask values must lie in [0, 1]");
  }

  /// Baseline presets.
  static InversionConfig pixel_only(int steps = 200, std::uint64_t seed = 0) {
    InversionConfig c;
    c.lambda_vgg = 0.0;
    c.lambda_dom = 0.0;
    c.init = InitMode::kRandom;
    c.steps = steps;
    c.seed = seed;
    return c;
  }
  static InversionConfig encoder_only() {
    InversionConfig c;
    c.steps = 0;
    return c;
  }
};

/// pixel: ||x - G(z)||_2 (mask-gated), perceptual: ||F(x) - F(G(z))||_2, domain: ||z - E(G(z))||_2.
struct ObjectiveTerms {
  double pixel = 0.0;
  double perceptual = 0.0;
  double domain = 0.0;
  double total = 0.0;

  double weighted_sum(double lambda_vgg, double lambda_dom) const { return pixel + lambda_vgg * perceptual + lambda_dom * domain; }
};

struct TraceRecord {
  int step = 0;
  ObjectiveTerms terms;
};

template <typename Scalar>
struct InversionResult {
  LatentCode<Scalar> code;
  Image<Scalar> reconstruction;
  LatentCode<Scalar> init_code;
  std::vector<TraceRecord> trace;  // trace[t] evaluates the code after t updates
  int steps_used = 0;
  ObjectiveTerms initial;
  ObjectiveTerms final;  // terms of the returned (best) code
};

template <typename Scalar>
struct BatchObjective {
  Var<Scalar> total;  // sum over the batch of per-image totals
  std::vector<ObjectiveTerms> terms;
};

namespace detail {

template <typename Scalar>
Var<Scalar> tile_mask(const Mask<Scalar>& m, int n, int channels) {
  const Eigen::Index plane = m.weights.size();
  Buffer<Scalar> data(plane * channels * n);
  for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(n) * channels; ++k) data.segment(k * plane, plane) = m.weights;
  return Var<Scalar>::constant(std::move(data), {n, channels, m.height, m.width});
}

template <typename Scalar>
std::vector<double> per_sample(const Var<Scalar>& v) {
  std::vector<double> out(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(v.value()(i));
  return out;
}

}  // namespace detail

/// Precomputed per-target constants shared by every objective evaluation.
template <typename Scalar>
struct Targets {
  Var<Scalar> images;    // [N, C, H, W]
  Var<Scalar> features;  // [N, K]
  Var<Scalar> mask;      // [N, C, H, W] or undefined
};

template <typename Scalar>
Targets<Scalar> make_targets(const FeatureExtractor<Scalar>& f, const std::vector<Image<Scalar>>& xs,
                             const std::optional<Mask<float>>& mask) {
  Targets<Scalar> t;
  t.images = stack_images(xs);
  ad::NoGrad ng;
  t.features = f.features(t.images);
  if (mask) {
    IDINV_REQUIRE(mask->height == xs.front().height && mask->width == xs.front().width, "mask does not match the image size");
    if (!(mask->weights.sum() > 0.0f)) throw Error(ErrorKind::kDegenerateMask, "mask has no support");
    t.mask = detail::tile_mask(mask->template cast<Scalar>(), static_cast<int>(xs.size()), xs.front().channels);
  }
  return t;
}

/// Objective for a batch of codes [N, L, d]. Terms with zero weight are
/// still reported but carry no gradient.
template <typename Scalar>
BatchObjective<Scalar> batch_objective(const GeneratorModel<Scalar>& g, const EncoderModel<Scalar>& e,
                                       const FeatureExtractor<Scalar>& f, const Targets<Scalar>& t,
                                       const Var<Scalar>& codes, double lambda_vgg, double lambda_dom) {
  IDINV_REQUIRE(codes.rank() == 3 && codes.dim(0) == t.images.dim(0), "code batch does not match the image batch");
  auto recon = g.synthesize(codes);
  IDINV_REQUIRE(recon.shape() == t.images.shape(),
                "image shape " + shape_string(t.images.shape()) + " does not match generator output " + shape_string(recon.shape()));
  auto diff2 = square(sub(t.images, recon));
  auto pixel = safe_sqrt(sum_per_sample(t.mask.defined() ? mul(t.mask, diff2) : diff2));

  auto weighted = [](double lambda, auto&& term) {
    if (lambda != 0.0) return term();
    ad::NoGrad ng;
    return term();
  };
  auto perceptual = weighted(lambda_vgg, [&] { return norm_per_sample(sub(t.features, f.features(recon))); });
  auto domain = weighted(lambda_dom, [&] { return norm_per_sample(sub(codes, e.encode(recon))); });

  auto per_image = pixel;
  if (lambda_vgg != 0.0) per_image = add(per_image, scale(perceptual, static_cast<Scalar>(lambda_vgg)));
  if (lambda_dom != 0.0) per_image = add(per_image, scale(domain, static_cast<Scalar>(lambda_dom)));

  BatchObjective<Scalar> out;
  out.total = sum(per_image);
  const auto p = detail::per_sample(pixel), q = detail::per_sample(perceptual), r = detail::per_sample(domain),
             s = detail::per_sample(per_image);
  for (std::size_t i = 0; i < p.size(); ++i) out.terms.push_back({p[i], q[i], r[i], s[i]});
  return out;
}

namespace detail {
template <typename Scalar>
void check_inputs(const GeneratorModel<Scalar>& g, const EncoderModel<Scalar>& e, const FeatureExtractor<Scalar>& f,
                  const std::vector<Image<Scalar>>& xs) {
  IDINV_REQUIRE(g.frozen() && e.frozen() && f.frozen(), "inversion requires frozen G, E and F");
  IDINV_REQUIRE(!xs.empty(), "no images to invert");
  const auto& cfg = g.config();
  for (const auto& x : xs) {
    IDINV_REQUIRE(x.channels == cfg.channels && x.height == cfg.resolution && x.width == cfg.resolution,
                  "image shape " + shape_string(x.shape()) + " does not match the generator's " +
                      shape_string({cfg.channels, cfg.resolution, cfg.resolution}));
    IDINV_REQUIRE(x.valid(), "image pixels must be finite and lie in [-1, 1]");
  }
}

template <typename Scalar>
void check_code(const GeneratorModel<Scalar>& g, const LatentCode<Scalar>& z) {
  IDINV_REQUIRE(z.space == LatentSpace::kW && z.layers() == g.layers() && z.width() == g.latent_dim(),
                "code must be a W-space [" + std::to_string(g.layers()) + ", " + std::to_string(g.latent_dim()) + "] code");
}
}  // namespace detail

/// Value and breakdown for a single image and code.
template <typename Scalar>
ObjectiveTerms inversion_objective(const GeneratorModel<Scalar>& g, const EncoderModel<Scalar>& e,
                                   const FeatureExtractor<Scalar>& f, const Image<Scalar>& x, const LatentCode<Scalar>& z,
                                   const InversionConfig& cfg) {
  cfg.validate();
  const std::vector<Image<Scalar>> xs{x};
  detail::check_inputs(g, e, f, xs);
  detail::check_code(g, z);
  ad::NoGrad ng;
  const auto t = make_targets(f, xs, cfg.mask);
  return batch_objective(g, e, f, t, stack_codes(std::vector<LatentCode<Scalar>>{z}), cfg.lambda_vgg, cfg.lambda_dom)
      .terms.front();
}

/// Starting codes for a batch, per the configured init mode.
template <typename Scalar>
std::vector<LatentCode<Scalar>> initial_codes(const GeneratorModel<Scalar>& g, const EncoderModel<Scalar>& e,
                                              const std::vector<Image<Scalar>>& xs, const InversionConfig& cfg) {
  switch (cfg.init) {
    case InitMode::kEncoder:
      return training::encode(e, xs);
    case InitMode::kRandom: {
      SeededRng rng(cfg.seed);
      auto code = synthesis::sample_w_codes(g, rng, 1).front();
      return std::vector<LatentCode<Scalar>>(xs.size(), code);
    }
    case InitMode::kGiven: {
      auto code = cfg.initial_code->template cast<Scalar>();
      detail::check_code(g, code);
      return std::vector<LatentCode<Scalar>>(xs.size(), code);
    }
  }
  return {};
}

/// Batched inversion; every image is optimized independently (the batch
/// objective is a sum and the optimizer is elementwise).
template <typename Scalar>
std::vector<InversionResult<Scalar>> invert(const GeneratorModel<Scalar>& g, const EncoderModel<Scalar>& e,
                                            const FeatureExtractor<Scalar>& f, const std::vector<Image<Scalar>>& xs,
                                            const InversionConfig& cfg) {
  cfg.validate();
  detail::check_inputs(g, e, f, xs);
  const std::size_t n = xs.size();
  const auto targets = make_targets(f, xs, cfg.mask);
  const auto init = initial_codes(g, e, xs, cfg);

  auto codes = stack_codes(init, true);
  nn::Adam<Scalar> opt({codes}, {cfg.step_size, 0.9, 0.999, 1e-8});
  std::vector<InversionResult<Scalar>> results(n);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  const Eigen::Index per = codes.size() / static_cast<Eigen::Index>(n);
  Buffer<Scalar> best_codes = codes.value();

  for (int step = 0; step <= cfg.steps; ++step) {
    const bool last = step == cfg.steps;
    BatchObjective<Scalar> obj;
    if (last) {
      ad::NoGrad ng;
      obj = batch_objective(g, e, f, targets, codes, cfg.lambda_vgg, cfg.lambda_dom);
    } else {
      obj = batch_objective(g, e, f, targets, codes, cfg.lambda_vgg, cfg.lambda_dom);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& terms = obj.terms[i];
      if (!std::isfinite(terms.total)) {
        std::vector<double> tail;
        const auto& tr = results[i].trace;
        for (std::size_t k = tr.size() > 5 ? tr.size() - 5 : 0; k < tr.size(); ++k) tail.push_back(tr[k].terms.total);
        tail.push_back(terms.total);
        throw StepFailure(ErrorKind::kInversionFailure, step, "non-finite objective for image " + std::to_string(i), std::move(tail));
      }
      results[i].trace.push_back({step, terms});
      if (terms.total < best[i]) {
        best[i] = terms.total;
        best_codes.segment(static_cast<Eigen::Index>(i) * per, per) = codes.value().segment(static_cast<Eigen::Index>(i) * per, per);
        results[i].final = terms;
      }
    }
    if (last) break;
    opt.step(ad::grad(obj.total, {codes}));
  }

  const auto final_codes = unstack_codes(Var<Scalar>::constant(best_codes, codes.shape()), LatentSpace::kW);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = results[i];
    r.code = final_codes[i];
    r.reconstruction = synthesis::generate(g, r.code);
    r.init_code = init[i];
    r.initial = r.trace.front().terms;
    r.steps_used = cfg.steps;
  }
  return results;
}

template <typename Scalar>
InversionResult<Scalar> invert(const GeneratorModel<Scalar>& g, const EncoderModel<Scalar>& e,
                               const FeatureExtractor<Scalar>& f, const Image<Scalar>& x, const InversionConfig& cfg) {
  return invert(g, e, f, std::vector<Image<Scalar>>{x}, cfg).front();
}

/// Analytic d objective / d z against central differences on `coordinates`
/// randomly chosen entries of z. Returns the max relative error.
template <typename Scalar>
double gradient_check(const GeneratorModel<Scalar>& g, const EncoderModel<Scalar>& e, const FeatureExtractor<Scalar>& f,
                      const Image<Scalar>& x, const LatentCode<Scalar>& z, const InversionConfig& cfg, int coordinates = 24,
                      double h = 1e-6, std::uint64_t seed = 0) {
  cfg.validate();
  const std::vector<Image<Scalar>> xs{x};
  detail::check_inputs(g, e, f, xs);
  detail::check_code(g, z);
  const auto t = make_targets(f, xs, cfg.mask);
  auto code = stack_codes(std::vector<LatentCode<Scalar>>{z}, true);
  const auto analytic = ad::grad(batch_objective(g, e, f, t, code, cfg.lambda_vgg, cfg.lambda_dom).total, {code})[0].value();

  auto value_at = [&](const Buffer<Scalar>& v) {
    ad::NoGrad ng;
    return static_cast<double>(
        batch_objective(g, e, f, t, Var<Scalar>::constant(v, code.shape()), cfg.lambda_vgg, cfg.lambda_dom).total.item());
  };
  SeededRng rng(seed);
  const Eigen::Index size = code.size();
  const int count = static_cast<int>(std::min<Eigen::Index>(coordinates, size));
  std::vector<Eigen::Index> picks(static_cast<std::size_t>(size));
  for (Eigen::Index i = 0; i < size; ++i) picks[static_cast<std::size_t>(i)] = i;
  rng.shuffle(picks);

  double worst = 0.0;
  for (int k = 0; k < count; ++k) {
    const Eigen::Index i = picks[static_cast<std::size_t>(k)];
    Buffer<Scalar> plus = code.value(), minus = code.value();
    plus(i) += static_cast<Scalar>(h);
    minus(i) -= static_cast<Scalar>(h);
    const double numeric = (value_at(plus) - value_at(minus)) / (2 * h);
    const double a = static_cast<double>(analytic(i));
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace idinv::inversion
