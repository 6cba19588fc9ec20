#pragma once

// Objectives and learning loops: GAN pre-training, the conventional
// code-reconstruction encoder, and the domain-guided encoder trained against
// the frozen generator with an adversarial discriminator.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "idinv/core.hpp"
#include "idinv/dataset.hpp"
#include "idinv/models.hpp"
#include "idinv/perception.hpp"
#include "idinv/synthesis.hpp"

namespace idinv::training {

template <typename Scalar>
using TensorMap = std::function<Var<Scalar>(const Var<Scalar>&)>;

struct TrainingConfig {
  double lambda_vgg = 5e-5;
  double lambda_adv = 0.1;
  double gamma = 10.0;
  double lr_encoder = 1e-4;
  double lr_discriminator = 1e-4;
  int batch_size = 16;
  int steps = 20000;
  std::uint64_t seed = 1;

  void validate() const {
    IDINV_REQUIRE(lambda_vgg >= 0 && lambda_adv >= 0 && gamma >= 0, "loss weights must be non-negative");
    IDINV_REQUIRE(lr_encoder > 0 && lr_discriminator > 0, "learning rates must be positive");
    IDINV_REQUIRE(steps >= 1, "steps must be at least 1");
    IDINV_REQUIRE(batch_size >= 1, "batch size must be at least 1");
  }
};

struct GanConfig {
  int steps = 20000;
  int batch_size = 16;
  double learning_rate = 2e-3;
  double gamma = 10.0;
  std::uint64_t seed = 1;

  void validate() const {
    IDINV_REQUIRE(steps >= 1 && batch_size >= 1, "steps and batch size must be positive");
    IDINV_REQUIRE(learning_rate > 0 && gamma >= 0, "invalid GAN optimizer settings");
  }
};

struct FeatureTrainingConfig {
  int steps = 1500;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 2;

  void validate() const {
    IDINV_REQUIRE(steps >= 1 && batch_size >= 1, "steps and batch size must be positive");
    IDINV_REQUIRE(holdout_fraction > 0 && holdout_fraction < 1, "holdout fraction must lie in (0, 1)");
  }
};

/// One row of the per-step metrics log.
struct StepRecord {
  std::string phase;
  long step = 0;
  std::vector<std::pair<std::string, double>> terms;
};

using MetricsSink = std::function<void(const StepRecord&)>;

// ---------------------------------------------------------------------------
// Objectives. Each takes the participating maps as callables so that tests can
// substitute fabricated networks.

/// mean_i || z_i - E(G(z_i)) ||_2 over a batch of codes [N, L, d].
template <typename Scalar>
Var<Scalar> conventional_encoder_loss(const TensorMap<Scalar>& encode, const TensorMap<Scalar>& generate,
                                      const Var<Scalar>& codes) {
  Var<Scalar> images;
  {
    ad::NoGrad ng;
    images = generate(codes);
  }
  return mean(norm_per_sample(sub(codes.detach(), encode(images))));
}

template <typename Scalar>
struct EncoderLossTerms {
  Var<Scalar> total;
  Scalar pixel = 0;        // mean ||x - G(E(x))||_2
  Scalar perceptual = 0;   // mean ||F(x) - F(G(E(x)))||_2
  Scalar adversarial = 0;  // mean D(G(E(x)))
  Scalar weighted_sum(double lambda_vgg, double lambda_adv) const {
    return pixel + static_cast<Scalar>(lambda_vgg) * perceptual - static_cast<Scalar>(lambda_adv) * adversarial;
  }
};

/// Encoder objective on real images: pixel + lambda_vgg * perceptual - lambda_adv * E[D(G(E(x)))].
template <typename Scalar>
EncoderLossTerms<Scalar> domain_guided_encoder_loss(const TensorMap<Scalar>& encode, const TensorMap<Scalar>& generate,
                                                    const TensorMap<Scalar>& discriminate,
                                                    const TensorMap<Scalar>& features, const Var<Scalar>& x_real,
                                                    double lambda_vgg, double lambda_adv) {
  auto recon = generate(encode(x_real));
  auto pixel = mean(norm_per_sample(sub(x_real, recon)));
  Var<Scalar> real_features;
  {
    ad::NoGrad ng;
    real_features = features(x_real);
  }
  auto perceptual = mean(norm_per_sample(sub(real_features, features(recon))));
  auto adversarial = mean(discriminate(recon));
  EncoderLossTerms<Scalar> out;
  out.total = sub(add(pixel, scale(perceptual, static_cast<Scalar>(lambda_vgg))), scale(adversarial, static_cast<Scalar>(lambda_adv)));
  out.pixel = pixel.item();
  out.perceptual = perceptual.item();
  out.adversarial = adversarial.item();
  return out;
}

template <typename Scalar>
struct DiscriminatorLossTerms {
  Var<Scalar> total;
  Scalar fake_score = 0;  // mean D(G(E(x)))
  Scalar real_score = 0;  // mean D(x)
  Scalar penalty = 0;     // mean ||grad_x D(x)||^2
  Scalar weighted_sum(double gamma) const {
    return fake_score - real_score + static_cast<Scalar>(gamma / 2.0) * penalty;
  }
};

/// Scores on real samples together with mean_i ||d D(x_i) / d x_i||^2; both
/// remain differentiable with respect to D's parameters.
template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> scores_with_penalty(const TensorMap<Scalar>& discriminate, const Var<Scalar>& x_real) {
  auto x = Var<Scalar>::leaf(x_real.value(), x_real.shape());
  auto scores = discriminate(x);
  auto gx = ad::grad(sum(scores), {x}, true)[0];
  return {scores, mean(sum_per_sample(square(gx)))};
}

/// Score-difference objective with a gradient penalty on real samples:
/// E[D(G(E(x)))] - E[D(x)] + gamma/2 * E[||grad_x D(x)||^2].
/// `reconstructions` are treated as constants.
template <typename Scalar>
DiscriminatorLossTerms<Scalar> discriminator_loss(const TensorMap<Scalar>& discriminate, const Var<Scalar>& reconstructions,
                                                  const Var<Scalar>& x_real, double gamma, long step = 0) {
  auto [real_scores, penalty] = scores_with_penalty(discriminate, x_real);
  if (!std::isfinite(static_cast<double>(penalty.item())))
    throw StepFailure(ErrorKind::kTrainingFailure, step, "non-finite discriminator gradient norm");
  auto fake = mean(discriminate(reconstructions.detach()));
  auto real = mean(real_scores);
  DiscriminatorLossTerms<Scalar> out;
  out.total = add(sub(fake, real), scale(penalty, static_cast<Scalar>(gamma / 2.0)));
  out.fake_score = fake.item();
  out.real_score = real.item();
  out.penalty = penalty.item();
  return out;
}

/// Non-saturating logistic generator loss: mean softplus(-D(G(w))).
template <typename Scalar>
Var<Scalar> gan_generator_loss(const TensorMap<Scalar>& discriminate, const Var<Scalar>& fakes) {
  return mean(softplus(neg(discriminate(fakes))));
}

/// Logistic discriminator loss with gradient penalty on reals.
template <typename Scalar>
Var<Scalar> gan_discriminator_loss(const TensorMap<Scalar>& discriminate, const Var<Scalar>& fakes, const Var<Scalar>& reals,
                                   double gamma) {
  auto fake_term = mean(softplus(discriminate(fakes.detach())));
  if (gamma == 0.0) return add(fake_term, mean(softplus(neg(discriminate(reals.detach())))));
  auto [real_scores, penalty] = scores_with_penalty(discriminate, reals);
  return add(add(fake_term, mean(softplus(neg(real_scores)))), scale(penalty, static_cast<Scalar>(gamma / 2.0)));
}

// Adapters from models to callables.
template <typename Scalar>
TensorMap<Scalar> as_generator(const synthesis::GeneratorModel<Scalar>& g) {
  return [&g](const Var<Scalar>& codes) { return g.synthesize(codes); };
}
template <typename Scalar>
TensorMap<Scalar> as_encoder(const EncoderModel<Scalar>& e) {
  return [&e](const Var<Scalar>& x) { return e.encode(x); };
}
template <typename Scalar>
TensorMap<Scalar> as_discriminator(const DiscriminatorModel<Scalar>& d) {
  return [&d](const Var<Scalar>& x) { return d.score(x); };
}
template <typename Scalar>
TensorMap<Scalar> as_features(const perception::FeatureExtractor<Scalar>& f) {
  return [&f](const Var<Scalar>& x) { return f.features(x); };
}

// ---------------------------------------------------------------------------
// Training loops (32-bit).

struct GanResult {
  synthesis::GeneratorModel<float> generator;
  DiscriminatorModel<float> discriminator;
};

/// Pre-trains G and D with the non-saturating logistic loss; the returned generator is frozen.
GanResult train_gan(const workspace::Dataset& data, const synthesis::GeneratorConfig& config, const GanConfig& cfg,
                    const MetricsSink& sink = {});

struct FeatureTrainingResult {
  perception::FeatureExtractor<float> extractor;
  double held_out_accuracy = 0.0;
  std::vector<double> per_attribute_accuracy;
};

/// Trains the attribute classifier behind F(.); the returned extractor is frozen.
FeatureTrainingResult train_feature_extractor(const workspace::Dataset& data, const perception::FeatureConfig& config,
                                              const FeatureTrainingConfig& cfg, const MetricsSink& sink = {});

/// Per-attribute probabilities from the extractor's classifier head, [N, attributes].
RowMatrix<float> classify_attributes(const perception::FeatureExtractor<float>& f, const std::vector<Image<float>>& images);

struct EncoderTrainingResult {
  EncoderModel<float> encoder;
  DiscriminatorModel<float> discriminator;
};

/// Alternating encoder / discriminator updates on real images. `g` must be frozen;
/// `d_init` is copied, never modified.
EncoderTrainingResult train_domain_guided_encoder(const synthesis::GeneratorModel<float>& g,
                                                  const DiscriminatorModel<float>& d_init,
                                                  const perception::FeatureExtractor<float>& f,
                                                  const workspace::Dataset& data, const TrainingConfig& cfg,
                                                  const MetricsSink& sink = {});

/// Encoder trained only on generator samples (G(z), z); it never sees real data.
EncoderModel<float> train_conventional_encoder(const synthesis::GeneratorModel<float>& g, const TrainingConfig& cfg,
                                               const MetricsSink& sink = {});

}  // namespace idinv::training
