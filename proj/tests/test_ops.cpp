#include <doctest.h>

#include <cmath>
#include <random>

#include "crfill/nets.hpp"
#include "crfill/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace crfill;

namespace {

Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b,
                          const ConvOptions& o) {
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = conv_output_size(h, kh, o), ow = conv_output_size(wd, kw, o);
  Tensor<double> y({n, cout, oh, ow});
  for (int b_ = 0; b_ < n; ++b_) {
    for (int co = 0; co < cout; ++co) {
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
          double acc = b ? (*b)[co] : 0.0;
          for (int ci = 0; ci < cin; ++ci) {
            for (int u = 0; u < kh; ++u) {
              for (int v = 0; v < kw; ++v) {
                const int yy = i * o.stride - o.padding + u * o.dilation;
                const int xx = j * o.stride - o.padding + v * o.dilation;
                if (yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
                acc += x.at(b_, ci, yy, xx) * w.at(co, ci, u, v);
              }
            }
          }
          y.at(b_, co, i, j) = acc;
        }
      }
    }
  }
  return y;
}

double max_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST_CASE("conv2d matches a direct loop over strides, paddings and dilations") {
  std::mt19937_64 rng(1);
  const ConvOptions cases[] = {{1, 0, 1}, {1, 1, 1}, {2, 2, 1}, {1, 2, 2}, {2, 3, 3}, {1, 4, 4}};
  for (const auto& o : cases) {
    auto x = oracle::random_tensor<double>({2, 3, 11, 9}, rng);
    auto w = oracle::random_tensor<double>({4, 3, 3, 3}, rng);
    auto b = oracle::random_tensor<double>({4}, rng);
    auto y = conv2d(Var<double>(x), Var<double>(w), Var<double>(b), o).value();
    CHECK(y.shape() == naive_conv(x, w, &b, o).shape());
    CHECK(max_diff(y, naive_conv(x, w, &b, o)) < 1e-12);
  }
  auto x = oracle::random_tensor<double>({1, 2, 7, 7}, rng);
  auto w = oracle::random_tensor<double>({3, 2, 5, 5}, rng);
  auto y = conv2d(Var<double>(x), Var<double>(w), Var<double>(), {2, 2, 1}).value();
  CHECK(max_diff(y, naive_conv(x, w, nullptr, {2, 2, 1})) < 1e-12);
}

TEST_CASE("conv2d in float agrees with double") {
  std::mt19937_64 rng(2);
  auto x = oracle::random_tensor<double>({1, 4, 10, 10}, rng);
  auto w = oracle::random_tensor<double>({5, 4, 3, 3}, rng);
  auto yd = conv2d(Var<double>(x), Var<double>(w), Var<double>(), {1, 2, 2}).value();
  auto yf = conv2d(Var<float>(x.cast<float>()), Var<float>(w.cast<float>()), Var<float>(), {1, 2, 2}).value();
  CHECK(max_diff(yf.cast<double>(), yd) < 1e-5);
}

TEST_CASE("conv2d gradients match finite differences") {
  std::mt19937_64 rng(3);
  for (const ConvOptions& o : {ConvOptions{1, 1, 1}, ConvOptions{2, 1, 1}, ConvOptions{1, 2, 2}}) {
    auto x = Var<double>::parameter(oracle::random_tensor<double>({2, 2, 6, 5}, rng));
    auto w = Var<double>::parameter(oracle::random_tensor<double>({3, 2, 3, 3}, rng));
    auto b = Var<double>::parameter(oracle::random_tensor<double>({3}, rng));
    auto probe = oracle::random_tensor<double>({2, 3, conv_output_size(6, 3, o), conv_output_size(5, 3, o)}, rng);
    auto f = [&] { return sum(mul_const(conv2d(x, w, b, o), probe)); };
    CHECK(oracle::gradient_error(f, {x, w, b}) < 1e-7);
  }
}

TEST_CASE("elementwise, shape and reduction gradients match finite differences") {
  std::mt19937_64 rng(4);
  auto a = Var<double>::parameter(oracle::random_tensor<double>({2, 4, 5, 6}, rng));
  auto b = Var<double>::parameter(oracle::random_tensor<double>({2, 4, 5, 6}, rng));
  auto probe = oracle::random_tensor<double>({2, 4, 5, 6}, rng);
  auto weigh = [&](const Var<double>& v) { return sum(mul_const(v, probe)); };

  CHECK(oracle::gradient_error([&] { return weigh(add(a, b)); }, {a, b}) < 1e-7);
  CHECK(oracle::gradient_error([&] { return weigh(sub(a, b)); }, {a, b}) < 1e-7);
  CHECK(oracle::gradient_error([&] { return weigh(mul(a, b)); }, {a, b}) < 1e-7);
  CHECK(oracle::gradient_error([&] { return weigh(scale(add_scalar(a, 0.3), -2.0)); }, {a}) < 1e-7);
  for (Activation act : {Activation::kIdentity, Activation::kElu, Activation::kLeakyRelu, Activation::kRelu,
                         Activation::kTanh, Activation::kSigmoid}) {
    CHECK(oracle::gradient_error([&] { return weigh(activate(a, act)); }, {a}) < 1e-6);
  }
  auto half = oracle::random_tensor<double>({2, 2, 5, 6}, rng);
  CHECK(oracle::gradient_error([&] { return sum(mul_const(gated_activation(a, Activation::kElu), half)); }, {a}) <
        1e-7);

  auto mask = oracle::random_mask<double>(2, 5, 6, 0.5, rng);
  CHECK(oracle::gradient_error([&] { return weigh(mul_const(a, mask)); }, {a}) < 1e-7);

  auto cat_probe = oracle::random_tensor<double>({2, 8, 5, 6}, rng);
  CHECK(oracle::gradient_error([&] { return sum(mul_const(concat_channels<double>({a, b}), cat_probe)); }, {a, b}) <
        1e-7);
  auto up_probe = oracle::random_tensor<double>({2, 4, 10, 12}, rng);
  CHECK(oracle::gradient_error([&] { return sum(mul_const(upsample_nearest2x(a), up_probe)); }, {a}) < 1e-7);
  auto rs_probe = oracle::random_tensor<double>({2, 4, 9, 4}, rng);
  CHECK(oracle::gradient_error([&] { return sum(mul_const(resize_bilinear(a, 9, 4), rs_probe)); }, {a}) < 1e-7);
  auto pad_probe = oracle::random_tensor<double>({2, 4, 8, 8}, rng);
  CHECK(oracle::gradient_error([&] { return sum(mul_const(pad_to(a, 8, 8), pad_probe)); }, {a}) < 1e-7);
  auto border_probe = oracle::random_tensor<double>({2, 4, 9, 10}, rng);
  CHECK(oracle::gradient_error([&] { return sum(mul_const(pad_border(a, 2), border_probe)); }, {a}) < 1e-7);
  auto crop_probe = oracle::random_tensor<double>({2, 4, 3, 2}, rng);
  CHECK(oracle::gradient_error([&] { return sum(mul_const(crop(a, 1, 3, 3, 2), crop_probe)); }, {a}) < 1e-7);
  auto sel_probe = oracle::random_tensor<double>({3, 4, 5, 6}, rng);
  CHECK(oracle::gradient_error([&] { return sum(mul_const(select_batch(a, {1, 0, 1}), sel_probe)); }, {a}) < 1e-7);
  CHECK(oracle::gradient_error([&] { return mean(a); }, {a}) < 1e-7);
  CHECK(oracle::gradient_error([&] { return mean_abs_diff(a, b); }, {a, b}) < 1e-6);
  CHECK(oracle::gradient_error([&] { return hinge_mean(a, 1.0); }, {a}) < 1e-6);
  CHECK(oracle::gradient_error([&] { return hinge_mean(scale(a, 3.0), -1.0); }, {a}) < 1e-6);
}

TEST_CASE("matrix op gradients match finite differences") {
  std::mt19937_64 rng(5);
  auto a = Var<double>::parameter(oracle::random_tensor<double>({2, 4, 3}, rng));
  auto b = Var<double>::parameter(oracle::random_tensor<double>({2, 5, 3}, rng));
  auto probe = oracle::random_tensor<double>({2, 4, 5}, rng);
  CHECK(oracle::gradient_error([&] { return sum(mul_const(batched_matmul(a, b, false, true), probe)); }, {a, b}) <
        1e-7);
  auto probe_t = oracle::random_tensor<double>({2, 3, 3}, rng);
  CHECK(oracle::gradient_error([&] { return sum(mul_const(batched_matmul(a, a, true, false), probe_t)); }, {a}) <
        1e-7);
  auto probe_n = oracle::random_tensor<double>({2, 4, 3}, rng);
  CHECK(oracle::gradient_error([&] { return sum(mul_const(normalize_rows(a, 1e-8), probe_n)); }, {a}) < 1e-7);

  std::vector<std::vector<std::uint8_t>> allowed{{1, 0, 1, 1, 0}, {0, 1, 0, 0, 0}};
  auto logits = Var<double>::parameter(oracle::random_tensor<double>({2, 4, 5}, rng));
  CHECK(oracle::gradient_error([&] { return sum(mul_const(masked_softmax_rows(logits, allowed), probe)); },
                               {logits}) < 1e-7);
}

TEST_CASE("masked softmax rows sum to one over allowed columns and are zero elsewhere") {
  std::mt19937_64 rng(6);
  auto logits = oracle::random_tensor<double>({2, 3, 4}, rng, -50, 50);
  std::vector<std::vector<std::uint8_t>> allowed{{0, 1, 1, 0}, {0, 0, 0, 0}};
  auto p = masked_softmax_rows(Var<double>(logits), allowed).value();
  for (int r = 0; r < 3; ++r) {
    const double* row = p.data() + r * 4;
    CHECK(row[0] == 0.0);
    CHECK(row[3] == 0.0);
    CHECK(row[1] + row[2] == doctest::Approx(1.0).epsilon(1e-12));
    for (int c = 0; c < 4; ++c) CHECK(p[12 + r * 4 + c] == 0.0);
  }
}

TEST_CASE("spectral normalisation bounds the largest singular value") {
  std::mt19937_64 rng(7);
  auto w = Var<double>::parameter(oracle::random_tensor<double>({6, 3, 3, 3}, rng));
  SpectralState<double> state;
  state.u = Tensor<double>({6}, 1.0 / std::sqrt(6.0));
  Var<double> normalised;
  for (int i = 0; i < 30; ++i) normalised = spectral_normalize(w, state, true);
  const double sigma = spectral_norm_estimate(normalised.value(), 6, 27, 500);
  CHECK(sigma <= 1.0 + 1e-2);
  CHECK(sigma == doctest::Approx(1.0).epsilon(1e-3));

  // Diagonal matrix: singular values are the absolute diagonal entries.
  Tensor<double> diag({3, 3});
  diag[0] = 2.0;
  diag[4] = -5.0;
  diag[8] = 1.0;
  CHECK(spectral_norm_estimate(diag, 3, 3, 200) == doctest::Approx(5.0).epsilon(1e-9));
}

TEST_CASE("spectral normalisation gradient treats the power-iteration vectors as constants") {
  std::mt19937_64 rng(8);
  auto w = Var<double>::parameter(oracle::random_tensor<double>({4, 2, 3, 3}, rng));
  SpectralState<double> state;
  state.u = Tensor<double>({4}, 0.5);
  for (int i = 0; i < 5; ++i) spectral_normalize(w, state, true);
  auto probe = oracle::random_tensor<double>({4, 2, 3, 3}, rng);
  auto f = [&] { return sum(mul_const(spectral_normalize(w, state, false), probe)); };
  CHECK(oracle::gradient_error(f, {w}) < 1e-6);
}

TEST_CASE("gated convolution with a saturated gate is the plain activated convolution") {
  Initializer init(9);
  GatedConv2d<double> gated(3, 4, 3, 1, 1, Activation::kElu, init);
  auto& conv = gated.conv();
  // Gate filters are the second half of the output channels.
  auto& w = conv.weight.mutable_value();
  const std::size_t per_filter = 3 * 3 * 3;
  for (std::size_t i = 4 * per_filter; i < w.size(); ++i) w[i] = 0.0;
  for (int c = 4; c < 8; ++c) conv.bias.mutable_value()[c] = 10.0;

  std::mt19937_64 rng(10);
  auto x = Var<double>(oracle::random_tensor<double>({1, 3, 8, 8}, rng));
  auto y = gated(x).value();
  auto full = conv(x).value();
  for (int c = 0; c < 4; ++c) {
    for (int i = 0; i < 8; ++i) {
      for (int j = 0; j < 8; ++j) {
        const double z = full.at(0, c, i, j);
        const double elu = z > 0 ? z : std::expm1(z);
        CHECK(std::abs(y.at(0, c, i, j) - elu) < 1e-4);
      }
    }
  }
}

TEST_CASE("no-grad mode records no graph and gradients accumulate across backward calls") {
  auto a = Var<double>::parameter(Tensor<double>({1, 1, 1, 2}, {1.0, 2.0}));
  {
    NoGradGuard guard;
    CHECK_FALSE(sum(a).requires_grad());
  }
  backward(sum(a));
  backward(sum(scale(a, 2.0)));
  CHECK(a.grad()[0] == 3.0);
  CHECK(a.grad()[1] == 3.0);
  auto d = detach(a);
  CHECK_FALSE(d.requires_grad());
  CHECK(d.value() == a.value());
}

TEST_CASE("shape errors are reported") {
  Var<double> x(Tensor<double>({1, 3, 4, 4}));
  Var<double> w(Tensor<double>({2, 2, 3, 3}));
  CHECK_THROWS_AS(conv2d(x, w, Var<double>(), {}), DimensionError);
  CHECK_THROWS_AS(add(x, Var<double>(Tensor<double>({1, 3, 4, 5}))), DimensionError);
  CHECK_THROWS_AS(gated_activation(x, Activation::kElu), DimensionError);
  CHECK_THROWS_AS(backward(Var<double>::parameter(Tensor<double>({2}))), DimensionError);
}
