#include <doctest.h>

#include "gradcheck.hpp"
#include "idinv/autodiff.hpp"
#include "idinv/core.hpp"
#include "idinv/nn.hpp"

using namespace idinv;
using namespace idinv::ad;
using idinv::testing::max_relative_error;

namespace {

using VarD = Var<double>;
using UnaryOp = std::function<VarD(const VarD&)>;

// Checks d/dx sum(r * op(x)) against central differences.
double check_unary(const UnaryOp& op, Buffer<double> x0, const Shape& shape, std::uint64_t seed = 3, double h = 1e-6) {
  SeededRng rng(seed);
  auto x = VarD::leaf(x0, shape);
  auto probe = op(x);
  auto r = VarD::constant(rng.normal_buffer<double>(probe.size()), probe.shape());
  auto loss = sum(mul(op(x), r));
  auto g = grad(loss, {x})[0].value();
  auto f = [&] {
    NoGrad ng;
    return sum(mul(op(x), r)).item();
  };
  return max_relative_error(f, x.mutable_value(), g, h);
}

Buffer<double> randn(std::uint64_t seed, Eigen::Index n) {
  SeededRng rng(seed);
  return rng.normal_buffer<double>(n);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  const Shape s{2, 3, 4};
  auto x = randn(1, shape_size(s));
  auto positive = Buffer<double>((x.abs() + 0.5).eval());
  auto other = VarD::constant(randn(2, shape_size(s)), s);

  CHECK(check_unary([](const VarD& a) { return scale(a, 1.7); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return add_scalar(a, 0.3); }, x, s) < 1e-5);
  CHECK(check_unary([&](const VarD& a) { return mul(a, other); }, x, s) < 1e-5);
  CHECK(check_unary([&](const VarD& a) { return sub(other, a); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return square(a); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return tanh(a); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return sigmoid(a); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return softplus(a); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return leaky_relu(a, 0.2); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return pow_scalar(a, -0.5); }, positive, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return safe_sqrt(a); }, positive, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return safe_reciprocal(a); }, positive, s) < 1e-5);
}

TEST_CASE("reductions and broadcasts match finite differences") {
  const Shape s{2, 3, 4, 4};
  auto x = randn(4, shape_size(s));
  CHECK(check_unary([](const VarD& a) { return sum(a); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return norm_per_sample(a); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return reduce_channels(a, true); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return reduce_channels(a, false); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return nn::instance_norm(a); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return avg_pool2(a); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return upsample2(a); }, x, s) < 1e-5);

  auto v = randn(5, 6);
  CHECK(check_unary([&](const VarD& a) { return expand_channels(a, s); }, v, Shape{2, 3}) < 1e-5);
  CHECK(check_unary([&](const VarD& a) { return expand_channels(a, s); }, randn(6, 3), Shape{3}) < 1e-5);
  CHECK(check_unary([&](const VarD& a) { return expand_per_sample(a, s); }, randn(7, 2), Shape{2}) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return nn::pixel_norm(a); }, randn(8, 10), Shape{2, 5}) < 1e-5);
}

TEST_CASE("row selection and tiling match finite differences") {
  const Shape s{2, 4, 3};
  auto x = randn(9, shape_size(s));
  CHECK(check_unary([](const VarD& a) { return select_row(a, 2); }, x, s) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return place_row(a, 1, 5); }, randn(10, 6), Shape{2, 3}) < 1e-5);
  CHECK(check_unary([](const VarD& a) { return nn::tile_batch(a, 3); }, randn(11, 8), Shape{1, 2, 2, 2}) < 1e-5);
}

TEST_CASE("matmul gradients for every transpose combination") {
  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      Shape sa = ta ? Shape{4, 3} : Shape{3, 4};
      Shape sb = tb ? Shape{5, 4} : Shape{4, 5};
      auto b = VarD::constant(randn(12, 20), sb);
      auto a = VarD::constant(randn(13, 12), sa);
      CHECK(check_unary([&](const VarD& x) { return matmul(x, b, ta, tb); }, randn(14, 12), sa) < 1e-5);
      CHECK(check_unary([&](const VarD& x) { return matmul(a, x, ta, tb); }, randn(15, 20), sb) < 1e-5);
    }
  }
}

TEST_CASE("conv2d gradients with respect to input and kernel") {
  const Shape xs{2, 3, 5, 5};
  for (int k : {1, 3}) {
    const Shape ws{4, 3, k, k};
    auto w = VarD::constant(randn(16, shape_size(ws)), ws);
    auto x = VarD::constant(randn(17, shape_size(xs)), xs);
    // Linear in each argument, so a wide step has no truncation error and less cancellation.
    CHECK(check_unary([&](const VarD& a) { return conv2d(a, w); }, x.value(), xs, 3, 1e-3) < 1e-5);
    CHECK(check_unary([&](const VarD& a) { return conv2d(x, a); }, w.value(), ws, 3, 1e-3) < 1e-5);
  }
}

TEST_CASE("conv2d agrees with a direct sum") {
  auto x = VarD::constant(randn(18, 2 * 4 * 4), {1, 2, 4, 4});
  auto w = VarD::constant(randn(19, 3 * 2 * 9), {3, 2, 3, 3});
  auto y = conv2d(x, w);
  for (int o = 0; o < 3; ++o)
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        double acc = 0;
        for (int i = 0; i < 2; ++i)
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
              const int sr = r + a - 1, sc = c + b - 1;
              if (sr < 0 || sr >= 4 || sc < 0 || sc >= 4) continue;
              acc += w.value()(((o * 2 + i) * 3 + a) * 3 + b) * x.value()((i * 4 + sr) * 4 + sc);
            }
        CHECK(y.value()((o * 4 + r) * 4 + c) == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("second-order gradient of a squared input-gradient norm") {
  // Penalty p(theta) = || d/dx sum(f_theta(x)) ||^2 for a small conv net.
  const Shape xs{2, 1, 4, 4};
  auto x = VarD::leaf(randn(20, shape_size(xs)), xs);
  auto w1 = VarD::leaf(randn(21, 3 * 1 * 9), {3, 1, 3, 3});
  auto w2 = VarD::leaf(randn(22, 3 * 2 * 2 * 1), {12, 1});

  auto penalty = [&](bool create) {
    auto h = tanh(conv2d(x, w1));
    auto pooled = reshape(avg_pool2(leaky_relu(h, 0.2)), {2, 12});
    auto score = sum(softplus(matmul(pooled, w2)));
    auto gx = grad(score, {x}, create)[0];
    return sum(square(gx));
  };

  auto p = penalty(true);
  auto grads = grad(p, {w1, w2});
  auto f = [&] { return penalty(false).item(); };
  CHECK(max_relative_error(f, w1.mutable_value(), grads[0].value(), 1e-5) < 1e-5);
  CHECK(max_relative_error(f, w2.mutable_value(), grads[1].value(), 1e-5) < 1e-5);
}

TEST_CASE("unreachable inputs receive zero gradients") {
  auto a = VarD::leaf(randn(23, 4), {4});
  auto b = VarD::leaf(randn(24, 4), {4});
  auto g = grad(sum(square(a)), {a, b});
  CHECK(g[1].value().isZero());
  CHECK(g[0].value().isApprox(2 * a.value()));
}

TEST_CASE("no-grad scopes produce constants") {
  auto a = VarD::leaf(randn(25, 4), {4});
  NoGrad ng;
  auto y = square(a);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("norm gradient is zero at the origin") {
  auto a = VarD::leaf(Buffer<double>::Zero(6), {1, 6});
  auto g = grad(sum(norm_per_sample(a)), {a})[0];
  CHECK(g.value().isZero());
}
