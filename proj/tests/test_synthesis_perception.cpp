#include <doctest.h>

#include <cstring>

#include "gradcheck.hpp"
#include "toy_models.hpp"

using namespace idinv;
using idinv::testing::max_relative_error;
using idinv::testing::toy_models;

namespace {

template <typename Scalar>
bool bit_equal(const Image<Scalar>& a, const Image<Scalar>& b) {
  return a.same_shape(b) && std::memcmp(a.pixels.data(), b.pixels.data(), sizeof(Scalar) * a.pixels.size()) == 0;
}

}  // namespace

TEST_CASE("generator layout follows the resolution") {
  for (int r : {8, 16, 32, 64}) {
    auto c = idinv::testing::toy_generator_config(r);
    CHECK(c.layers() == 2 * static_cast<int>(std::log2(r)) - 2);
  }
  auto bad = idinv::testing::toy_generator_config(16);
  bad.resolution = 24;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("mapping and synthesis are deterministic and batch-consistent") {
  auto m = toy_models<float>(16, 4);
  SeededRng rng(2);
  const auto zs = sample_latent<float>(rng, 3, m.g.latent_dim());
  const auto ws = synthesis::map_z_to_w(m.g, zs);
  REQUIRE(ws.size() == 3);
  for (int i = 0; i < 3; ++i) {
    const auto single = synthesis::map_z_to_w(m.g, zs[i]);
    CHECK(single.space == LatentSpace::kW);
    CHECK((single.values - ws[i].values).cwiseAbs().maxCoeff() <= 1e-6f);
  }

  const auto code = synthesis::broadcast_w(ws[0], m.g.layers());
  CHECK(code.layers() == m.g.layers());
  for (int r = 0; r < code.layers(); ++r) CHECK(code.values.row(r) == ws[0].values.row(0));

  const auto a = synthesis::generate(m.g, code);
  const auto b = synthesis::generate(m.g, code);
  CHECK(bit_equal(a, b));
  CHECK(a.shape() == Shape{1, 16, 16});
  CHECK(a.valid());

  std::vector<LatentCode<float>> codes;
  for (const auto& w : ws) codes.push_back(synthesis::broadcast_w(w, m.g.layers()));
  const auto batch = synthesis::generate(m.g, codes);
  for (int i = 0; i < 3; ++i)
    CHECK((batch[i].pixels - synthesis::generate(m.g, codes[i]).pixels).abs().maxCoeff() <= 1e-5f);

  SeededRng r1(11), r2(11);
  const auto s1 = synthesis::sample_w_codes(m.g, r1, 2);
  const auto s2 = synthesis::sample_w_codes(m.g, r2, 2);
  CHECK(s1[1].values == s2[1].values);

  auto same = toy_models<float>(16, 4);
  CHECK(bit_equal(synthesis::generate(same.g, code), a));
}

TEST_CASE("generate rejects malformed codes") {
  auto m = toy_models<float>(16);
  LatentCode<float> short_code(RowMatrix<float>::Zero(m.g.layers() - 1, m.g.latent_dim()), LatentSpace::kW);
  CHECK_THROWS_AS(synthesis::generate(m.g, short_code), Error);
  LatentCode<float> narrow(RowMatrix<float>::Zero(m.g.layers(), m.g.latent_dim() + 1), LatentSpace::kW);
  CHECK_THROWS_AS(synthesis::generate(m.g, narrow), Error);
  LatentCode<float> two_rows(RowMatrix<float>::Zero(2, m.g.latent_dim()), LatentSpace::kZ);
  CHECK_THROWS_AS(synthesis::map_z_to_w(m.g, two_rows), Error);
}

TEST_CASE("synthesis gradient with respect to the code matches finite differences") {
  auto m = toy_models<double>(8, 6);
  SeededRng rng(3);
  const Shape s{1, m.g.layers(), m.g.latent_dim()};
  auto code = Var<double>::leaf(rng.normal_buffer<double>(ad::shape_size(s)) * 0.7, s);
  auto probe = Var<double>::constant(rng.normal_buffer<double>(64), {1, 1, 8, 8});
  auto loss = sum(mul(m.g.synthesize(code), probe));
  auto g = ad::grad(loss, {code})[0].value();
  auto f = [&] {
    ad::NoGrad ng;
    return sum(mul(m.g.synthesize(code), probe)).item();
  };
  CHECK(max_relative_error(f, code.mutable_value(), g) < 1e-3);
}

TEST_CASE("synthesis gradient with respect to parameters matches finite differences") {
  auto m = toy_models<double>(8, 8);
  m.g.parameters().set_trainable(true);
  SeededRng rng(4);
  const Shape s{2, m.g.layers(), m.g.latent_dim()};
  auto code = Var<double>::constant(rng.normal_buffer<double>(ad::shape_size(s)), s);
  auto probe = Var<double>::constant(rng.normal_buffer<double>(128), {2, 1, 8, 8});
  const auto vars = m.g.parameters().vars();
  auto grads = ad::grad(sum(mul(m.g.synthesize(code), probe)), vars);
  auto f = [&] {
    ad::NoGrad ng;
    return sum(mul(m.g.synthesize(code), probe)).item();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < vars.size(); ++i) {
    auto v = vars[i];
    worst = std::max(worst, max_relative_error(f, v.mutable_value(), grads[i].value(), 1e-6, 6, 1e-5));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("perceptual distance is a pseudometric") {
  auto m = toy_models<double>(16, 5);
  SeededRng rng(6);
  std::vector<Image<double>> xs;
  for (int i = 0; i < 3; ++i) xs.emplace_back(1, 16, 16, Buffer<double>(rng.normal_buffer<double>(256).tanh()));
  CHECK(perception::perceptual_distance(m.f, xs[0], xs[0]) == 0.0);
  const double ab = perception::perceptual_distance(m.f, xs[0], xs[1]);
  const double ba = perception::perceptual_distance(m.f, xs[1], xs[0]);
  const double ac = perception::perceptual_distance(m.f, xs[0], xs[2]);
  const double cb = perception::perceptual_distance(m.f, xs[2], xs[1]);
  CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
  CHECK(ab > 0.0);
  CHECK(ab <= ac + cb + 1e-12);

  const auto rows = perception::extract_features(m.f, xs);
  CHECK(rows.cols() == m.f.feature_dim());
  const auto single = perception::extract_features(m.f, xs[1]);
  for (Eigen::Index j = 0; j < rows.cols(); ++j) CHECK(rows(1, j) == doctest::Approx(single.values(j)).epsilon(1e-10));
  CHECK(std::sqrt((rows.row(0) - rows.row(1)).squaredNorm()) == doctest::Approx(ab).epsilon(1e-10));

  Image<double> wrong(1, 8, 8);
  CHECK_THROWS_AS(perception::extract_features(m.f, wrong), Error);
}

TEST_CASE("feature gradient matches finite differences") {
  auto m = toy_models<double>(16, 7);
  SeededRng rng(8);
  auto x = Var<double>::leaf(Buffer<double>(rng.normal_buffer<double>(256).tanh()), {1, 1, 16, 16});
  auto probe = Var<double>::constant(rng.normal_buffer<double>(m.f.feature_dim()), {1, m.f.feature_dim()});
  auto g = ad::grad(sum(mul(m.f.features(x), probe)), {x})[0].value();
  auto f = [&] {
    ad::NoGrad ng;
    return sum(mul(m.f.features(x), probe)).item();
  };
  CHECK(max_relative_error(f, x.mutable_value(), g, 1e-6, 64) < 1e-3);
}

TEST_CASE("single and double precision generators agree") {
  auto m = toy_models<float>(16, 9);
  auto gd = m.g.cast<double>();
  SeededRng rng(12);
  auto code = synthesis::sample_w_codes(m.g, rng, 1).front();
  LatentCode<double> code_d(code.values.cast<double>(), LatentSpace::kW);
  const auto a = synthesis::generate(m.g, code);
  const auto b = synthesis::generate(gd, code_d);
  CHECK((a.pixels.cast<double>() - b.pixels).abs().maxCoeff() < 1e-4);
}
