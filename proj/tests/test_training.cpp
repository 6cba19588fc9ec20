#include <doctest.h>

#include <cstring>

#include "gradcheck.hpp"
#include "idinv/training.hpp"
#include "toy_models.hpp"

using namespace idinv;
using namespace idinv::training;
using idinv::testing::max_relative_error;
using idinv::testing::toy_models;

namespace {

using VarD = Var<double>;

workspace::Dataset toy_data(int resolution, int count, std::uint64_t seed = 1) {
  workspace::SyntheticParams p;
  p.resolution = resolution;
  p.count = count;
  return workspace::make_synthetic_dataset(p, seed);
}

VarD random_images(SeededRng& rng, int n, int r) {
  return VarD::constant(Buffer<double>(rng.normal_buffer<double>(Eigen::Index(n) * r * r).tanh()), {n, 1, r, r});
}

template <typename Model>
bool same_parameters(const Model& a, const Model& b) {
  const auto& x = a.parameters().entries();
  const auto& y = b.parameters().entries();
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto& u = x[i].var.value();
    const auto& v = y[i].var.value();
    if (u.size() != v.size() || std::memcmp(u.data(), v.data(), sizeof(float) * u.size()) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("conventional loss on a fabricated encoder") {
  TensorMap<double> zero_encoder = [](const VarD& x) {
    return VarD::constant(Buffer<double>::Zero(x.dim(0) * 2), {x.dim(0), 1, 2});
  };
  TensorMap<double> identity = [](const VarD& z) { return z; };
  auto codes = VarD::constant(Buffer<double>((Buffer<double>(2) << 1.0, 0.0).finished()), {1, 1, 2});
  CHECK(conventional_encoder_loss(zero_encoder, identity, codes).item() == doctest::Approx(1.0));

  auto two = VarD::constant(Buffer<double>((Buffer<double>(4) << 3.0, 4.0, 0.0, 2.0).finished()), {2, 1, 2});
  CHECK(conventional_encoder_loss(zero_encoder, identity, two).item() == doctest::Approx(3.5));
  CHECK(conventional_encoder_loss(identity, identity, two).item() == 0.0);
}

TEST_CASE("encoder loss terms recompose the total") {
  auto m = toy_models<double>(16, 3);
  SeededRng rng(5);
  auto x = random_images(rng, 3, 16);
  for (double lvgg : {0.0, 5e-5, 0.3})
    for (double ladv : {0.0, 0.1, 2.0}) {
      auto t = domain_guided_encoder_loss(as_encoder(m.e), as_generator(m.g), as_discriminator(m.d), as_features(m.f), x, lvgg, ladv);
      CHECK(t.weighted_sum(lvgg, ladv) == doctest::Approx(t.total.item()).epsilon(1e-6));
    }
  auto t = domain_guided_encoder_loss(as_encoder(m.e), as_generator(m.g), as_discriminator(m.d), as_features(m.f), x, 0.0, 0.0);
  auto recon = m.g.synthesize(m.e.encode(x));
  double pixel = 0;
  for (int i = 0; i < 3; ++i) {
    const Eigen::Index per = 256;
    pixel += std::sqrt((x.value().segment(i * per, per) - recon.value().segment(i * per, per)).square().sum());
  }
  CHECK(t.pixel == doctest::Approx(pixel / 3).epsilon(1e-10));
}

TEST_CASE("gradient penalty matches finite-difference input gradients") {
  auto d = DiscriminatorModel<double>::create({8, 1, 4, 8}, 4);
  SeededRng rng(6);
  auto x = random_images(rng, 2, 8);
  auto [scores, penalty] = scores_with_penalty(as_discriminator(d), x);

  double oracle = 0;
  Buffer<double> xs = x.value();
  const double h = 1e-6;
  for (int i = 0; i < 2; ++i) {
    double norm2 = 0;
    for (int k = 0; k < 64; ++k) {
      const Eigen::Index j = i * 64 + k;
      const double saved = xs(j);
      ad::NoGrad ng;
      xs(j) = saved + h;
      const double up = d.score(VarD::constant(xs, x.shape())).value()(i);
      xs(j) = saved - h;
      const double down = d.score(VarD::constant(xs, x.shape())).value()(i);
      xs(j) = saved;
      norm2 += std::pow((up - down) / (2 * h), 2);
    }
    oracle += norm2 / 2;
  }
  CHECK(penalty.item() == doctest::Approx(oracle).epsilon(1e-6));
}

TEST_CASE("penalty gradient with respect to discriminator parameters matches finite differences") {
  auto d = DiscriminatorModel<double>::create({8, 1, 4, 8}, 5);
  SeededRng rng(7);
  auto x = random_images(rng, 2, 8);
  const auto disc = as_discriminator(d);
  const auto vars = d.parameters().vars();
  auto grads = ad::grad(scores_with_penalty(disc, x).second, vars);
  auto f = [&] { return scores_with_penalty(disc, x).second.item(); };
  double worst = 0;
  for (std::size_t i = 0; i < vars.size(); ++i) {
    auto v = vars[i];
    worst = std::max(worst, max_relative_error(f, v.mutable_value(), grads[i].value(), 1e-6, 4, 1e-5));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("discriminator loss terms") {
  SeededRng rng(8);
  auto x = random_images(rng, 3, 8);
  auto fake = random_images(rng, 3, 8);
  TensorMap<double> constant = [](const VarD& v) { return add_scalar(scale(sum_per_sample(v), 0.0), 0.25); };
  auto t = discriminator_loss(constant, fake, x, 10.0);
  CHECK(t.penalty == 0.0);
  CHECK(t.total.item() == doctest::Approx(0.0));

  TensorMap<double> linear = [](const VarD& v) { return scale(sum_per_sample(v), 0.5); };
  auto l = discriminator_loss(linear, fake, x, 4.0);
  CHECK(l.penalty == doctest::Approx(0.25 * 64));
  CHECK(l.weighted_sum(4.0) == doctest::Approx(l.total.item()).epsilon(1e-12));
  CHECK(l.real_score == doctest::Approx(0.5 * x.value().sum() / 3));

  TensorMap<double> broken = [](const VarD& v) { return scale(sum_per_sample(v), std::numeric_limits<double>::infinity()); };
  CHECK_THROWS_AS(discriminator_loss(broken, fake, x, 1.0, 7), StepFailure);
}

TEST_CASE("a small encoder step does not increase the objective") {
  auto m = toy_models<double>(16, 9);
  m.e.set_trainable(true);
  SeededRng rng(10);
  auto x = random_images(rng, 4, 16);
  const auto loss = [&] {
    return domain_guided_encoder_loss(as_encoder(m.e), as_generator(m.g), as_discriminator(m.d), as_features(m.f), x, 5e-5, 0.1);
  };
  auto before = loss();
  nn::Adam<double> opt(m.e.parameters().vars(), {1e-5, 0.9, 0.999, 1e-8});
  opt.step(ad::grad(before.total, m.e.parameters().vars()));
  CHECK(loss().total.item() <= before.total.item());
}

TEST_CASE("encoder training leaves the generator untouched and is seed-deterministic") {
  auto m = toy_models<float>(16, 2);
  const auto g_before = m.g.clone();
  const auto data = toy_data(16, 12);
  TrainingConfig cfg;
  cfg.steps = 2;
  cfg.batch_size = 4;
  cfg.seed = 3;
  std::vector<StepRecord> records;
  auto a = train_domain_guided_encoder(m.g, m.d, m.f, data, cfg, [&](const StepRecord& r) { records.push_back(r); });
  CHECK(same_parameters(m.g, g_before));
  CHECK(a.encoder.frozen());
  CHECK(records.size() == 4);
  CHECK(records[0].phase == "encoder");
  CHECK(records[1].phase == "discriminator");

  auto b = train_domain_guided_encoder(m.g, m.d, m.f, data, cfg);
  CHECK(same_parameters(a.encoder, b.encoder));
  CHECK(same_parameters(a.discriminator, b.discriminator));
  cfg.seed = 4;
  auto c = train_domain_guided_encoder(m.g, m.d, m.f, data, cfg);
  CHECK_FALSE(same_parameters(a.encoder, c.encoder));

  auto conv = train_conventional_encoder(m.g, cfg);
  CHECK(conv.frozen());
  CHECK(same_parameters(m.g, g_before));
}

TEST_CASE("encoder training input errors") {
  auto m = toy_models<float>(16, 2);
  TrainingConfig cfg;
  cfg.steps = 1;
  cfg.batch_size = 2;
  workspace::Dataset empty;
  CHECK_THROWS_AS(train_domain_guided_encoder(m.g, m.d, m.f, empty, cfg), Error);
  CHECK_THROWS_AS(train_domain_guided_encoder(m.g, m.d, m.f, toy_data(32, 4), cfg), Error);
  auto unfrozen = synthesis::GeneratorModel<float>::create(m.g.config(), 1);
  CHECK_THROWS_AS(train_conventional_encoder(unfrozen, cfg), Error);
  cfg.steps = 0;
  CHECK_THROWS_AS(train_conventional_encoder(m.g, cfg), Error);
}

TEST_CASE("GAN and feature training smoke runs") {
  const auto data = toy_data(16, 20);
  GanConfig gc;
  gc.steps = 1;
  gc.batch_size = 4;
  int records = 0;
  auto gan = train_gan(data, idinv::testing::toy_generator_config(16), gc, [&](const StepRecord& r) {
    CHECK(r.phase == "gan");
    ++records;
  });
  CHECK(records == 1);
  CHECK(gan.generator.frozen());
  auto again = train_gan(data, idinv::testing::toy_generator_config(16), gc);
  CHECK(same_parameters(gan.generator, again.generator));

  FeatureTrainingConfig fc;
  fc.steps = 2;
  fc.batch_size = 4;
  fc.holdout_fraction = 0.25;
  auto feat = train_feature_extractor(data, {16, 1, 4, 4, 8}, fc);
  CHECK(feat.extractor.frozen());
  CHECK(feat.per_attribute_accuracy.size() == 4);
  CHECK(feat.held_out_accuracy >= 0.0);
  CHECK(feat.held_out_accuracy <= 1.0);
  const auto probs = classify_attributes(feat.extractor, data.images);
  CHECK(probs.rows() == 20);
  CHECK(probs.minCoeff() >= 0.0f);
  CHECK(probs.maxCoeff() <= 1.0f);

  auto unlabelled = data;
  unlabelled.labels.resize(0, 0);
  CHECK_THROWS_AS(train_feature_extractor(unlabelled, {16, 1, 4, 4, 8}, fc), Error);
  CHECK_THROWS_AS(train_gan(workspace::Dataset{}, idinv::testing::toy_generator_config(16), gc), Error);
}
