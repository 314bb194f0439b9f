#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fusiondet/nn_ops.hpp"
#include "fusiondet/tensor.hpp"
#include "oracles.hpp"

using namespace fusiondet;

namespace {

Tensor4<double> random_tensor(Index b, Index h, Index w, Index c, Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
  Tensor4<double> t(b, h, w, c);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("layout round-trip is the identity over all valid indices") {
  const Tensor4<float> t(2, 3, 5, 4);
  Index flat = 0;
  for (Index b = 0; b < 2; ++b) {
    for (Index y = 0; y < 3; ++y) {
      for (Index x = 0; x < 5; ++x) {
        for (Index c = 0; c < 4; ++c) {
          CHECK(t.offset(b, y, x, c) == flat);
          const auto back = t.coords(flat);
          CHECK(back[0] == b);
          CHECK(back[1] == y);
          CHECK(back[2] == x);
          CHECK(back[3] == c);
          ++flat;
        }
      }
    }
  }
  CHECK(flat == t.size());
}

TEST_CASE("conv2d on zero input returns the bias everywhere") {
  Tensor4<double> input(1, 4, 4, 1);
  auto p = make_conv_params<double>(3, 3, 1, 2);
  Rng rng = make_rng(7);
  he_uniform_init(p, rng);
  p.bias[0] = 0.25;
  p.bias[1] = -1.5;
  const auto out = conv2d_forward(input, p);
  for (Index y = 0; y < 4; ++y) {
    for (Index x = 0; x < 4; ++x) {
      CHECK(out(0, y, x, 0) == doctest::Approx(0.25));
      CHECK(out(0, y, x, 1) == doctest::Approx(-1.5));
    }
  }
}

TEST_CASE("conv2d identity-center kernel passes the input through") {
  Tensor4<double> input(1, 1, 1, 1);
  input(0, 0, 0, 0) = 2.0;
  auto p = make_conv_params<double>(3, 3, 1, 1);
  p.kernel_at(1, 1, 0, 0) = 1.0;
  const auto out = conv2d_forward(input, p);
  CHECK(out(0, 0, 0, 0) == doctest::Approx(2.0));
}

TEST_CASE("conv2d all-ones kernel center element sums the window") {
  Tensor4<double> input(1, 3, 3, 1);
  for (Index i = 0; i < 9; ++i) input.data()[i] = static_cast<double>(i + 1);
  auto p = make_conv_params<double>(3, 3, 1, 1);
  p.kernel.setOnes();
  // Direct summation oracle over the centered window.
  const auto reference = oracles::conv_reference(input, p);
  CHECK(reference(0, 1, 1, 0) == doctest::Approx(45.0));
  const auto out = conv2d_forward(input, p);
  CHECK(out(0, 1, 1, 0) == doctest::Approx(45.0));
}

TEST_CASE("conv2d matches the direct-summation oracle on random cases") {
  Rng rng = make_rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Index h = 1 + static_cast<Index>(rng() % 6);
    const Index w = 1 + static_cast<Index>(rng() % 6);
    const Index ci = 1 + static_cast<Index>(rng() % 3);
    const Index co = 1 + static_cast<Index>(rng() % 3);
    auto input = random_tensor(2, h, w, ci, rng);
    auto p = make_conv_params<double>(3, 3, ci, co);
    he_uniform_init(p, rng);
    const auto expected = oracles::conv_reference(input, p);
    const auto actual = conv2d_forward(input, p);
    REQUIRE(actual.size() == expected.size());
    for (Index i = 0; i < actual.size(); ++i) {
      CHECK(actual.data()[i] == doctest::Approx(expected.data()[i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("conv2d rejects channel mismatch") {
  Tensor4<double> input(1, 4, 4, 3);
  auto p = make_conv_params<double>(3, 3, 2, 4);
  CHECK_THROWS_AS(conv2d_forward(input, p), DimensionError);
  CHECK_THROWS_AS(conv2d_backward(input, p, input), DimensionError);
}

TEST_CASE("forward ops are pure: identical inputs give bit-identical outputs") {
  Rng rng = make_rng(3);
  auto input = random_tensor(1, 8, 8, 3, rng);
  auto p = make_conv_params<double>(3, 3, 3, 5);
  he_uniform_init(p, rng);
  const auto a = conv2d_forward(input, p);
  const auto b = conv2d_forward(input, p);
  CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.size())) == 0);
}

TEST_CASE("conv2d_backward: zero grad_out gives zero gradients") {
  Rng rng = make_rng(5);
  auto input = random_tensor(1, 4, 4, 2, rng);
  auto p = make_conv_params<double>(3, 3, 2, 3);
  he_uniform_init(p, rng);
  Tensor4<double> zero(1, 4, 4, 3);
  const auto grads = conv2d_backward(input, p, zero);
  CHECK(grads.input.vec().cwiseAbs().maxCoeff() == 0.0);
  CHECK(grads.kernel.cwiseAbs().maxCoeff() == 0.0);
  CHECK(grads.bias.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("conv2d_backward: sum loss over constant input has countable gradients") {
  // loss = sum of outputs, zero kernel, constant input c: each bias element
  // sees every spatial position once; each kernel tap sees c times the
  // number of positions where the tap lands inside the image.
  const Index h = 4;
  const Index w = 5;
  const double c = 0.75;
  Tensor4<double> input(1, h, w, 1);
  input.vec().setConstant(c);
  auto p = make_conv_params<double>(3, 3, 1, 1);
  Tensor4<double> ones(1, h, w, 1);
  ones.vec().setConstant(1.0);
  const auto grads = conv2d_backward(input, p, ones);
  CHECK(grads.bias[0] == doctest::Approx(static_cast<double>(h * w)));
  for (Index ky = 0; ky < 3; ++ky) {
    for (Index kx = 0; kx < 3; ++kx) {
      const Index rows = h - std::abs(static_cast<long>(ky) - 1);
      const Index cols = w - std::abs(static_cast<long>(kx) - 1);
      CHECK(grads.kernel((ky * 3 + kx), 0) ==
            doctest::Approx(c * static_cast<double>(rows * cols)));
    }
  }
}

TEST_CASE("conv2d_backward matches finite differences on a random 2x2 case") {
  Rng rng = make_rng(17);
  auto input = random_tensor(1, 2, 2, 1, rng);
  auto p = make_conv_params<double>(3, 3, 1, 1);
  he_uniform_init(p, rng);
  Tensor4<double> weights = random_tensor(1, 2, 2, 1, rng);
  auto loss = [&]() { return conv2d_forward(input, p).vec().dot(weights.vec()); };
  const auto grads = conv2d_backward(input, p, weights);
  std::vector<ParamView<double>> views = {
      {"kernel", p.kernel.data(), p.kernel.size(), grads.kernel.data()},
      {"bias", p.bias.data(), p.bias.size(), grads.bias.data()},
      {"input", input.data(), input.size(), grads.input.data()},
  };
  CHECK(finite_diff_check<double>(views, loss, 1e-6) <= 1e-4);
}

TEST_CASE("relu clamps negatives and backward uses the zero subgradient at 0") {
  Tensor4<double> x(1, 1, 3, 1);
  x.data()[0] = -1;
  x.data()[1] = 0;
  x.data()[2] = 2;
  const auto y = relu(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == 2.0);

  Tensor4<double> pos(1, 1, 3, 1);
  pos.data()[0] = 0.5;
  pos.data()[1] = 1.0;
  pos.data()[2] = 7.0;
  const auto id = relu(pos);
  for (Index i = 0; i < 3; ++i) CHECK(id.data()[i] == pos.data()[i]);

  Tensor4<double> in(1, 1, 2, 1);
  in.data()[0] = -1;
  in.data()[1] = 2;
  Tensor4<double> g(1, 1, 2, 1);
  g.data()[0] = 5;
  g.data()[1] = 5;
  const auto back = relu_backward(in, g);
  CHECK(back.data()[0] == 0.0);
  CHECK(back.data()[1] == 5.0);
}

TEST_CASE("maxpool2 halves constant tensors and picks window maxima") {
  Tensor4<double> c(2, 4, 6, 3);
  c.vec().setConstant(3.5);
  const auto pooled = maxpool2(c);
  CHECK(pooled.output.height() == 2);
  CHECK(pooled.output.width() == 3);
  CHECK(pooled.output.vec().minCoeff() == 3.5);
  CHECK(pooled.output.vec().maxCoeff() == 3.5);

  Tensor4<double> w(1, 2, 2, 1);
  w.data()[0] = 1;
  w.data()[1] = 2;
  w.data()[2] = 3;
  w.data()[3] = 4;
  const auto one = maxpool2(w);
  CHECK(one.output.data()[0] == 4.0);

  Tensor4<double> g(1, 1, 1, 1);
  g.data()[0] = 2.5;
  const auto back = maxpool2_backward(one.argmax, one.input_dims, g);
  CHECK(back.data()[3] == 2.5);
  CHECK(back.data()[0] == 0.0);
  CHECK(back.data()[1] == 0.0);
  CHECK(back.data()[2] == 0.0);
}

TEST_CASE("maxpool2 output elements equal the max of their window") {
  Rng rng = make_rng(23);
  const auto input = random_tensor(2, 6, 8, 3, rng);
  const auto pooled = maxpool2(input);
  for (Index b = 0; b < 2; ++b) {
    for (Index y = 0; y < 3; ++y) {
      for (Index x = 0; x < 4; ++x) {
        for (Index c = 0; c < 3; ++c) {
          const double m = std::max({input(b, 2 * y, 2 * x, c), input(b, 2 * y, 2 * x + 1, c),
                                     input(b, 2 * y + 1, 2 * x, c),
                                     input(b, 2 * y + 1, 2 * x + 1, c)});
          CHECK(pooled.output(b, y, x, c) == m);
        }
      }
    }
  }
}

TEST_CASE("maxpool2 ties route to the first occurrence in row-major order") {
  Tensor4<double> t(1, 2, 2, 1);
  t.vec().setConstant(1.0);
  const auto pooled = maxpool2(t);
  CHECK(pooled.argmax[0] == t.offset(0, 0, 0, 0));
}

TEST_CASE("maxpool2 rejects odd spatial dims") {
  Tensor4<double> odd(1, 3, 4, 1);
  CHECK_THROWS_AS(maxpool2(odd), DimensionError);
}

TEST_CASE("add: identity, commutativity, fixed values, mismatch error") {
  Rng rng = make_rng(29);
  const auto a = random_tensor(1, 3, 3, 2, rng);
  Tensor4<double> zero(1, 3, 3, 2);
  const auto id = add(a, zero);
  for (Index i = 0; i < a.size(); ++i) CHECK(id.data()[i] == a.data()[i]);

  const auto b = random_tensor(1, 3, 3, 2, rng);
  const auto ab = add(a, b);
  const auto ba = add(b, a);
  for (Index i = 0; i < ab.size(); ++i) CHECK(ab.data()[i] == ba.data()[i]);

  Tensor4<double> u(1, 1, 2, 1);
  u.data()[0] = 1;
  u.data()[1] = 2;
  Tensor4<double> v(1, 1, 2, 1);
  v.data()[0] = 3;
  v.data()[1] = 4;
  const auto uv = add(u, v);
  CHECK(uv.data()[0] == 4.0);
  CHECK(uv.data()[1] == 6.0);

  Tensor4<double> other(1, 2, 2, 1);
  CHECK_THROWS_AS(add(u, other), DimensionError);
}

TEST_CASE("add_all equals the pairwise left-to-right reduction exactly") {
  Rng rng = make_rng(31);
  std::vector<Tensor4<float>> terms;
  for (int i = 0; i < 4; ++i) {
    Tensor4<float> t(1, 2, 2, 2);
    for (Index j = 0; j < t.size(); ++j) {
      t.data()[j] = static_cast<float>(std::uniform_real_distribution<double>(-1, 1)(rng));
    }
    terms.push_back(std::move(t));
  }
  const auto folded = add(add(add(terms[0], terms[1]), terms[2]), terms[3]);
  const auto all = add_all(terms);
  CHECK(std::memcmp(folded.data(), all.data(),
                    sizeof(float) * static_cast<size_t>(folded.size())) == 0);
}

TEST_CASE("sgdm: momentum 0 is plain SGD; lr 0 leaves params, accumulates velocity") {
  VecX<double> p(2);
  p << 1.0, -2.0;
  VecX<double> g(2);
  g << 0.5, 0.25;
  VecX<double> v = VecX<double>::Zero(2);
  sgdm_step(p, g, v, 0.1, 0.0);
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.5));
  CHECK(p[1] == doctest::Approx(-2.0 - 0.1 * 0.25));

  VecX<double> p2 = VecX<double>::Zero(1);
  VecX<double> g2(1);
  g2 << 3.0;
  VecX<double> v2 = VecX<double>::Zero(1);
  sgdm_step(p2, g2, v2, 0.0, 0.9);
  CHECK(p2[0] == 0.0);
  CHECK(v2[0] == doctest::Approx(3.0));
}

TEST_CASE("sgdm: two steps with constant gradient follow the hand recurrence") {
  // v1 = g, step1 = lr*g; v2 = 0.9g + g, step2 = 0.1*1.9g = 0.19g.
  const double g_val = 0.7;
  VecX<double> p = VecX<double>::Zero(1);
  VecX<double> g(1);
  g << g_val;
  VecX<double> v = VecX<double>::Zero(1);
  sgdm_step(p, g, v, 0.1, 0.9);
  const double after_first = p[0];
  sgdm_step(p, g, v, 0.1, 0.9);
  CHECK(after_first - p[0] == doctest::Approx(0.19 * g_val));
}

TEST_CASE("sgdm rejects mismatched sizes") {
  VecX<double> p = VecX<double>::Zero(2);
  VecX<double> g = VecX<double>::Zero(3);
  VecX<double> v = VecX<double>::Zero(2);
  CHECK_THROWS_AS(sgdm_step(p, g, v, 0.1, 0.9), DimensionError);
}

TEST_CASE("finite_diff_check: zero epsilon is a contract error") {
  VecX<double> p = VecX<double>::Zero(1);
  VecX<double> a = VecX<double>::Zero(1);
  std::vector<ParamView<double>> views = {{"p", p.data(), 1, a.data()}};
  CHECK_THROWS_AS(finite_diff_check<double>(views, [] { return 0.0; }, 0.0), ContractError);
}

TEST_CASE("finite_diff_check: linear fragment is exact to 1e-8") {
  Rng rng = make_rng(37);
  auto input = random_tensor(1, 4, 4, 1, rng, 0.0, 1.0);
  auto p = make_conv_params<double>(3, 3, 1, 1);
  he_uniform_init(p, rng);
  auto loss = [&]() { return conv2d_forward(input, p).vec().sum(); };
  Tensor4<double> ones(1, 4, 4, 1);
  ones.vec().setConstant(1.0);
  const auto grads = conv2d_backward(input, p, ones);
  std::vector<ParamView<double>> views = {
      {"kernel", p.kernel.data(), p.kernel.size(), grads.kernel.data()},
      {"bias", p.bias.data(), p.bias.size(), grads.bias.data()},
  };
  CHECK(finite_diff_check<double>(views, loss, 1e-3) <= 1e-8);
}

TEST_CASE("finite-diff property: conv/relu/pool/add pass 1e-4 over 100 seeded trials") {
  double worst = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng = make_rng(1000 + trial);
    auto input = random_tensor(1, 4, 4, 2, rng);
    auto p = make_conv_params<double>(3, 3, 2, 2);
    he_uniform_init(p, rng);
    Tensor4<double> w(1, 2, 2, 2);
    for (Index i = 0; i < w.size(); ++i) {
      w.data()[i] = std::uniform_real_distribution<double>(0.25, 1.0)(rng);
    }

    // Fragment: conv -> relu -> maxpool -> weighted sum, checking the chain
    // of backward ops together.
    auto loss = [&]() {
      return maxpool2(relu(conv2d_forward(input, p))).output.vec().dot(w.vec());
    };
    const auto pre = conv2d_forward(input, p);
    const auto act = relu(pre);
    const auto pooled = maxpool2(act);
    const auto d_act = maxpool2_backward(pooled.argmax, pooled.input_dims, w);
    const auto d_pre = relu_backward(pre, d_act);
    const auto grads = conv2d_backward(input, p, d_pre);
    std::vector<ParamView<double>> views = {
        {"kernel", p.kernel.data(), p.kernel.size(), grads.kernel.data()},
        {"bias", p.bias.data(), p.bias.size(), grads.bias.data()},
        {"input", input.data(), input.size(), grads.input.data()},
    };
    worst = std::max(worst, finite_diff_check<double>(views, loss, 1e-6));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("full conv-relu-pool fragment stays under 1e-4") {
  Rng rng = make_rng(41);
  auto input = random_tensor(1, 4, 4, 2, rng);
  auto p = make_conv_params<double>(3, 3, 2, 3);
  he_uniform_init(p, rng);
  auto loss = [&]() {
    const auto pooled = maxpool2(relu(conv2d_forward(input, p)));
    return pooled.output.vec().sum();
  };
  const auto pre = conv2d_forward(input, p);
  const auto act = relu(pre);
  const auto pooled = maxpool2(act);
  Tensor4<double> ones(1, 2, 2, 3);
  ones.vec().setConstant(1.0);
  const auto d_act = maxpool2_backward(pooled.argmax, pooled.input_dims, ones);
  const auto d_pre = relu_backward(pre, d_act);
  const auto grads = conv2d_backward(input, p, d_pre);
  std::vector<ParamView<double>> views = {
      {"kernel", p.kernel.data(), p.kernel.size(), grads.kernel.data()},
      {"input", input.data(), input.size(), grads.input.data()},
  };
  CHECK(finite_diff_check<double>(views, loss, 1e-6) <= 1e-4);
}
