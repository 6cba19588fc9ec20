#include <doctest.h>

#include <cstring>

#include "idinv/inversion.hpp"
#include "toy_models.hpp"

using namespace idinv;
using namespace idinv::inversion;
using idinv::testing::toy_models;

namespace {

struct Fixture {
  idinv::testing::ToyModels<double> m = toy_models<double>(16, 21);
  SeededRng rng{4};
  LatentCode<double> z_star = synthesis::sample_w_codes(m.g, rng, 1).front();
  Image<double> x_star = synthesis::generate(m.g, z_star);

  Image<double> noisy_target(std::uint64_t seed) {
    SeededRng r(seed);
    Buffer<double> p = (x_star.pixels + 0.2 * r.normal_buffer<double>(x_star.pixels.size())).cwiseMax(-1.0).cwiseMin(1.0);
    return Image<double>(1, 16, 16, p);
  }
  LatentCode<double> perturbed(std::uint64_t seed, double scale = 0.3) {
    SeededRng r(seed);
    return LatentCode<double>(z_star.values + scale * RowMatrix<double>(Eigen::Map<RowMatrix<double>>(
                                                          r.normal_buffer<double>(z_star.values.size()).data(),
                                                          z_star.layers(), z_star.width())),
                              LatentSpace::kW);
  }
};

InversionConfig with(double lvgg, double ldom, int steps = 20) {
  InversionConfig c;
  c.lambda_vgg = lvgg;
  c.lambda_dom = ldom;
  c.steps = steps;
  return c;
}

}  // namespace

TEST_CASE("objective gradient matches finite differences") {
  Fixture fx;
  const auto x = fx.noisy_target(1);
  const auto z = fx.perturbed(2);
  CHECK(gradient_check(fx.m.g, fx.m.e, fx.m.f, x, z, InversionConfig{}) < 1e-3);
  CHECK(gradient_check(fx.m.g, fx.m.e, fx.m.f, x, z, InversionConfig::pixel_only()) < 1e-4);
  CHECK(gradient_check(fx.m.g, fx.m.e, fx.m.f, x, z, with(0.5, 0.0)) < 1e-3);
  CHECK(gradient_check(fx.m.g, fx.m.e, fx.m.f, x, z, with(0.0, 3.0)) < 1e-3);
  auto masked = InversionConfig::pixel_only();
  masked.mask = Mask<float>(16, 16, 0.5f);
  CHECK(gradient_check(fx.m.g, fx.m.e, fx.m.f, x, z, masked) < 1e-4);
}

TEST_CASE("terms recompose and zero weights reduce to the baseline") {
  Fixture fx;
  const auto x = fx.noisy_target(3);
  const auto z = fx.perturbed(4);
  const auto full = inversion_objective(fx.m.g, fx.m.e, fx.m.f, x, z, with(0.2, 2.0));
  CHECK(full.weighted_sum(0.2, 2.0) == doctest::Approx(full.total).epsilon(1e-12));

  const auto pixel = inversion_objective(fx.m.g, fx.m.e, fx.m.f, x, z, with(0.0, 0.0));
  CHECK(std::abs(pixel.total - pixel.pixel) <= 1e-9);
  const auto vgg = inversion_objective(fx.m.g, fx.m.e, fx.m.f, x, z, with(1.0, 0.0));
  const auto dom = inversion_objective(fx.m.g, fx.m.e, fx.m.f, x, z, with(0.0, 1.0));
  CHECK(pixel.pixel + 0.2 * (vgg.total - pixel.total) + 2.0 * (dom.total - pixel.total) == doctest::Approx(full.total).epsilon(1e-10));

  const auto recon = synthesis::generate(fx.m.g, z);
  CHECK(pixel.pixel == doctest::Approx(std::sqrt((x.pixels - recon.pixels).square().sum())).epsilon(1e-12));
  const auto fa = perception::extract_features(fx.m.f, x), fb = perception::extract_features(fx.m.f, recon);
  CHECK(full.perceptual == doctest::Approx(std::sqrt((fa.values - fb.values).square().sum())).epsilon(1e-10));
  const auto back = training::encode(fx.m.e, recon);
  CHECK(full.domain == doctest::Approx((z.values - back.values).norm()).epsilon(1e-10));
}

TEST_CASE("the generating code is an exact optimum of the pixel objective") {
  Fixture fx;
  auto cfg = InversionConfig::pixel_only(5);
  CHECK(inversion_objective(fx.m.g, fx.m.e, fx.m.f, fx.x_star, fx.z_star, cfg).total == 0.0);
  cfg.init = InitMode::kGiven;
  cfg.initial_code = fx.z_star.cast<float>();
  const auto r = invert(fx.m.g, fx.m.e, fx.m.f, fx.x_star, cfg);
  CHECK(r.final.total <= 1e-6);
  CHECK((r.code.values - fx.z_star.values).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("zero steps returns the encoder code") {
  Fixture fx;
  const auto x = fx.noisy_target(5);
  const auto r = invert(fx.m.g, fx.m.e, fx.m.f, x, InversionConfig::encoder_only());
  CHECK(r.trace.size() == 1);
  CHECK(r.steps_used == 0);
  CHECK(r.code.values == training::encode(fx.m.e, x).values);
  CHECK(r.init_code.values == r.code.values);
  CHECK(r.final.total == r.initial.total);
}

TEST_CASE("optimization never returns a worse code than its start") {
  Fixture fx;
  const auto x = fx.noisy_target(6);
  for (const auto& cfg : {with(5e-5, 2.0, 30), InversionConfig::pixel_only(30, 3)}) {
    const auto r = invert(fx.m.g, fx.m.e, fx.m.f, x, cfg);
    CHECK(r.trace.size() == 31);
    CHECK(r.final.total <= r.initial.total);
    CHECK(r.final.total < r.initial.total);
    double best = r.trace.front().terms.total;
    for (const auto& t : r.trace) best = std::min(best, t.terms.total);
    CHECK(r.final.total == best);
    const auto again = synthesis::generate(fx.m.g, r.code);
    CHECK(std::memcmp(again.pixels.data(), r.reconstruction.pixels.data(), sizeof(double) * 256) == 0);
    CHECK(inversion_objective(fx.m.g, fx.m.e, fx.m.f, x, r.code, cfg).total == doctest::Approx(r.final.total).epsilon(1e-9));
  }
}

TEST_CASE("batched inversion matches per-image inversion") {
  Fixture fx;
  const std::vector<Image<double>> xs{fx.noisy_target(7), fx.noisy_target(8), fx.x_star};
  const auto cfg = with(5e-5, 2.0, 10);
  const auto batch = invert(fx.m.g, fx.m.e, fx.m.f, xs, cfg);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto single = invert(fx.m.g, fx.m.e, fx.m.f, xs[i], cfg);
    CHECK((single.code.values - batch[i].code.values).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK(single.final.total == doctest::Approx(batch[i].final.total).epsilon(1e-9));
  }
}

TEST_CASE("random init is one seeded code shared across the batch") {
  Fixture fx;
  const std::vector<Image<double>> xs{fx.noisy_target(9), fx.noisy_target(10)};
  auto cfg = InversionConfig::pixel_only(0, 42);
  const auto a = initial_codes(fx.m.g, fx.m.e, xs, cfg);
  const auto b = initial_codes(fx.m.g, fx.m.e, xs, cfg);
  CHECK(a[0].values == a[1].values);
  CHECK(a[0].values == b[0].values);
  cfg.seed = 43;
  CHECK(initial_codes(fx.m.g, fx.m.e, xs, cfg)[0].values != a[0].values);
}

TEST_CASE("masked objective ignores pixels outside the mask") {
  Fixture fx;
  auto cfg = with(0.0, 2.0, 8);
  Mask<float> mask(16, 16, 0.0f);
  for (int y = 4; y < 12; ++y)
    for (int x = 2; x < 10; ++x) mask.at(y, x) = 1.0f;
  cfg.mask = mask;
  const auto x = fx.noisy_target(11);
  auto changed = x;
  for (int y = 0; y < 16; ++y)
    for (int c = 12; c < 16; ++c) changed.at(0, y, c) = -changed.at(0, y, c);
  const auto z = fx.perturbed(12);
  CHECK(inversion_objective(fx.m.g, fx.m.e, fx.m.f, x, z, cfg).total ==
        inversion_objective(fx.m.g, fx.m.e, fx.m.f, changed, z, cfg).total);
  cfg.init = InitMode::kGiven;
  cfg.initial_code = z.cast<float>();
  const auto a = invert(fx.m.g, fx.m.e, fx.m.f, x, cfg);
  const auto b = invert(fx.m.g, fx.m.e, fx.m.f, changed, cfg);
  CHECK(a.code.values == b.code.values);

  cfg.mask = Mask<float>(16, 16, 0.0f);
  try {
    invert(fx.m.g, fx.m.e, fx.m.f, x, cfg);
    FAIL("expected degenerate-mask error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDegenerateMask);
  }
}

TEST_CASE("invalid inputs and non-finite objectives") {
  Fixture fx;
  const auto x = fx.noisy_target(13);
  auto bad = x;
  bad.pixels(3) = 2.0;
  CHECK_THROWS_AS(invert(fx.m.g, fx.m.e, fx.m.f, bad, InversionConfig{}), Error);
  CHECK_THROWS_AS(invert(fx.m.g, fx.m.e, fx.m.f, Image<double>(1, 8, 8), InversionConfig{}), Error);
  CHECK_THROWS_AS(invert(fx.m.g, fx.m.e, fx.m.f, std::vector<Image<double>>{}, InversionConfig{}), Error);
  auto neg = InversionConfig{};
  neg.steps = -1;
  CHECK_THROWS_AS(invert(fx.m.g, fx.m.e, fx.m.f, x, neg), Error);
  auto given = InversionConfig{};
  given.init = InitMode::kGiven;
  CHECK_THROWS_AS(invert(fx.m.g, fx.m.e, fx.m.f, x, given), Error);

  auto live = synthesis::GeneratorModel<double>::create(fx.m.g.config(), 1);
  CHECK_THROWS_AS(invert(live, fx.m.e, fx.m.f, x, InversionConfig{}), Error);

  auto broken = fx.m.g.clone();
  auto v = broken.parameters().vars().back();
  v.mutable_value()(0) = std::numeric_limits<double>::quiet_NaN();
  try {
    invert(broken, fx.m.e, fx.m.f, x, with(5e-5, 2.0, 3));
    FAIL("expected inversion failure");
  } catch (const StepFailure& e) {
    CHECK(e.kind() == ErrorKind::kInversionFailure);
    CHECK(e.step() == 0);
  }
}
