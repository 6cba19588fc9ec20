#include <doctest.h>

#include <cstring>

#include "idinv/editing.hpp"
#include "toy_models.hpp"

using namespace idinv;
using namespace idinv::editing;
using idinv::testing::toy_models;

namespace {

template <typename Scalar>
bool bit_equal(const Image<Scalar>& a, const Image<Scalar>& b) {
  return a.same_shape(b) && std::memcmp(a.pixels.data(), b.pixels.data(), sizeof(Scalar) * a.pixels.size()) == 0;
}

evaluation::SemanticBoundary unit_boundary(int d, std::uint64_t seed) {
  SeededRng rng(seed);
  Eigen::VectorXd n = rng.normal_buffer<double>(d).matrix();
  return {"size", n.normalized(), 0.1};
}

struct Fixture {
  idinv::testing::ToyModels<float> m = toy_models<float>(16, 31);
  SeededRng rng{2};
  std::vector<LatentCode<float>> codes = synthesis::sample_w_codes(m.g, rng, 2);
};

}  // namespace

TEST_CASE("manipulation identities") {
  Fixture fx;
  const auto& z = fx.codes[0];
  EditSpec spec{unit_boundary(z.width(), 1), 0.0, std::nullopt};
  CHECK(bit_equal(manipulate(fx.m.g, z, spec), synthesis::generate(fx.m.g, z)));

  spec.alpha = 0.75;
  const auto once = shift_code(shift_code(z, spec), EditSpec{spec.boundary, 1.25, std::nullopt});
  const auto both = shift_code(z, EditSpec{spec.boundary, 2.0, std::nullopt});
  CHECK((once.values - both.values).cwiseAbs().maxCoeff() <= 1e-6f);

  spec.layers = LayerRange{2, 4};
  const auto partial = shift_code(z, spec);
  for (int r = 0; r < z.layers(); ++r) {
    const bool inside = r >= 2 && r < 4;
    CHECK((partial.values.row(r) == z.values.row(r)) != inside);
  }
  const auto original = z.values;
  manipulate(fx.m.g, z, spec);
  CHECK(z.values == original);

  spec.layers = LayerRange{3, z.layers() + 1};
  CHECK_THROWS_AS(shift_code(z, spec), Error);
  spec.layers.reset();
  spec.boundary.normal *= 2.0;
  CHECK_THROWS_AS(shift_code(z, spec), Error);
  spec.boundary = unit_boundary(z.width() + 1, 2);
  CHECK_THROWS_AS(shift_code(z, spec), Error);
}

TEST_CASE("interpolation identities") {
  Fixture fx;
  const auto& a = fx.codes[0];
  const auto& b = fx.codes[1];
  CHECK(bit_equal(interpolate(fx.m.g, a, b, 0.0), synthesis::generate(fx.m.g, a)));
  CHECK(bit_equal(interpolate(fx.m.g, a, b, 1.0), synthesis::generate(fx.m.g, b)));
  const auto mid = interpolate_codes(a, b, 0.5);
  CHECK((mid.values - 0.5f * (a.values + b.values)).cwiseAbs().maxCoeff() <= 1e-6f);
  CHECK_THROWS_AS(interpolate_codes(a, b, -0.1), Error);
  CHECK_THROWS_AS(interpolate_codes(a, b, 1.5), Error);
  LatentCode<float> other(RowMatrix<float>::Zero(a.layers() - 1, a.width()), LatentSpace::kW);
  CHECK_THROWS_AS(interpolate_codes(a, other, 0.5), Error);

  const auto frames = interpolation_sweep(fx.m.g, a, b, 8);
  REQUIRE(frames.size() == 8);
  CHECK(bit_equal(frames.front(), synthesis::generate(fx.m.g, a)));
  CHECK(bit_equal(frames.back(), synthesis::generate(fx.m.g, b)));
  CHECK(bit_equal(interpolate(fx.m.g, a, b, 3.0 / 7.0), frames[3]));
}

TEST_CASE("style mixing identities") {
  Fixture fx;
  const auto& c = fx.codes[0];
  const auto& s = fx.codes[1];
  const int layers = c.layers();
  CHECK(bit_equal(style_mix(fx.m.g, c, c), synthesis::generate(fx.m.g, c)));
  CHECK(bit_equal(style_mix(fx.m.g, c, s, LayerRange{0, 0}), synthesis::generate(fx.m.g, c)));
  CHECK(bit_equal(style_mix(fx.m.g, c, s, LayerRange{0, layers}), synthesis::generate(fx.m.g, s)));

  const auto range = default_style_layers(layers);
  CHECK(range.begin == layers - 4);
  CHECK(range.end == layers);
  const auto mixed = mix_codes(c, s);
  for (int r = 0; r < layers; ++r) CHECK(mixed.values.row(r) == (r >= layers - 4 ? s : c).values.row(r));

  LatentCode<float> empty(RowMatrix<float>(0, c.width()), LatentSpace::kW);
  CHECK_THROWS_AS(mix_codes(empty, empty), Error);
}

TEST_CASE("diffusion mask and stitching") {
  DiffusionSpec spec;
  spec.crop = {2, 3, 6, 5};
  spec.paste_top = 8;
  spec.paste_left = 1;
  const auto hard = diffusion_mask<float>(spec, 16, 16);
  CHECK(hard.weights.sum() == 30.0f);
  CHECK(hard.at(8, 1) == 1.0f);
  CHECK(hard.at(7, 1) == 0.0f);

  spec.feather = 2;
  const auto soft = diffusion_mask<float>(spec, 16, 16);
  CHECK(soft.valid());
  CHECK(soft.at(8, 1) == doctest::Approx(1.0f / 3));
  CHECK(soft.at(9, 2) == doctest::Approx(2.0f / 3));
  CHECK(soft.at(10, 3) == 1.0f);

  Image<float> target(1, 16, 16, Buffer<float>::Constant(256, 0.5f));
  Image<float> context(1, 16, 16, Buffer<float>::Constant(256, -0.5f));
  const auto stitched = stitch(target, context, spec);
  CHECK(stitched.at(0, 8, 1) == 0.5f);
  CHECK(stitched.at(0, 13, 5) == 0.5f);
  CHECK(stitched.at(0, 14, 5) == -0.5f);
  CHECK(stitched.pixels.sum() == doctest::Approx(30 * 0.5f - 226 * 0.5f));

  spec.paste_top = 12;
  CHECK_THROWS_AS(stitch(target, context, spec), Error);
  spec.paste_top = 0;
  spec.crop.height = 0;
  try {
    stitch(target, context, spec);
    FAIL("empty crop accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDegenerateMask);
  }
  spec.crop.height = -1;
  CHECK_THROWS_AS(stitch(target, context, spec), Error);
}

TEST_CASE("full-frame diffusion equals plain inversion") {
  auto m = toy_models<double>(16, 33);
  SeededRng rng(5);
  const auto z = synthesis::sample_w_codes(m.g, rng, 1).front();
  auto x = synthesis::generate(m.g, z);
  x.pixels = (x.pixels + 0.1 * rng.normal_buffer<double>(256)).cwiseMax(-1.0).cwiseMin(1.0);

  DiffusionSpec spec;
  spec.crop = {0, 0, 16, 16};
  spec.steps = 15;
  const auto diffused = semantic_diffuse(m.g, m.e, m.f, x, x, spec);
  inversion::InversionConfig cfg;
  cfg.steps = 15;
  const auto plain = inversion::invert(m.g, m.e, m.f, x, cfg);
  REQUIRE(diffused.trace.size() == plain.trace.size());
  for (std::size_t t = 0; t < plain.trace.size(); ++t)
    CHECK(diffused.trace[t].terms.total == doctest::Approx(plain.trace[t].terms.total).epsilon(1e-6));
  CHECK((diffused.code.values - plain.code.values).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("diffusion ignores context outside the pasted region") {
  auto m = toy_models<double>(16, 34);
  SeededRng rng(6);
  Image<double> target(1, 16, 16, Buffer<double>(rng.normal_buffer<double>(256).tanh()));
  Image<double> context(1, 16, 16, Buffer<double>(rng.normal_buffer<double>(256).tanh()));
  DiffusionSpec spec;
  spec.crop = {4, 4, 8, 8};
  spec.paste_top = 4;
  spec.paste_left = 4;
  spec.lambda_vgg = 0.0;
  spec.steps = 0;
  auto changed = context;
  changed.at(0, 0, 0) = 0.9;
  changed.at(0, 15, 2) = -0.3;
  const auto a = stitch(target, context, spec);
  const auto b = stitch(target, changed, spec);
  auto cfg = diffusion_config<double>(spec, 16, 16);
  const auto code = training::encode(m.e, a);
  CHECK(inversion::inversion_objective(m.g, m.e, m.f, a, code, cfg).pixel ==
        inversion::inversion_objective(m.g, m.e, m.f, b, code, cfg).pixel);
}
