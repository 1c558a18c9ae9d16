#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "dymn/gradcheck.hpp"
#include "dymn/ops.hpp"
#include "dymn/tape.hpp"
#include "dymn/tensor.hpp"
#include "support/oracles.hpp"

using namespace dymn;
using test::fill_uniform;
using test::max_abs_diff;
using test::max_rel_diff;
using test::random_tensor;
using test::reference_conv2d;

TEST_CASE("tensor invariants") {
  Tensor t({2, 3, 4, 5});
  CHECK(t.size() == 120);
  CHECK_THROWS_AS(Tensor({0, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor({1, 2, 3, 4, 5}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0f}), ShapeError);
  CHECK(t.all_finite());
}

TEST_CASE("conv2d identity kernel") {
  Tensor x = Tensor::ones({1, 1, 3, 3});
  Tensor w = Tensor::ones({1, 1, 1, 1});
  Conv2dGeom g;
  Tensor y = conv2d_fwd(x, w, nullptr, g);
  CHECK(y.shape == Shape{1, 1, 3, 3});
  for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == 1.0f);
}

TEST_CASE("conv2d sum kernel") {
  Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w = Tensor::ones({1, 1, 3, 3});
  Conv2dGeom g;  // pad 0
  Tensor y = conv2d_fwd(x, w, nullptr, g);
  CHECK(y.shape == Shape{1, 1, 1, 1});
  CHECK(y[0] == doctest::Approx(45.0f));
}

TEST_CASE("conv2d matches the six-loop reference on grouped random input") {
  std::mt19937 rng(7);
  Tensor x = random_tensor<float>({2, 4, 8, 8}, rng);
  Tensor w = random_tensor<float>({6, 2, 3, 3}, rng);
  Conv2dGeom g;
  g.groups = 2;
  g.pad_f = g.pad_t = 1;
  Tensor y = conv2d_fwd(x, w, nullptr, g);
  Tensor ref = reference_conv2d(x, w, nullptr, g);
  CHECK(max_rel_diff(y, ref) < 1e-6);
}

TEST_CASE("conv2d reference property over shapes <= 8") {
  std::mt19937 rng(11);
  for (int iter = 0; iter < 60; ++iter) {
    std::uniform_int_distribution<int> d(1, 8);
    std::uniform_int_distribution<int> dk(1, 3);
    std::uniform_int_distribution<int> ds(1, 2);
    const int B = d(rng) % 3 + 1, C_in = d(rng) % 4 + 1, C_out = d(rng) % 4 + 1;
    const int F = d(rng), L = d(rng);
    // kernels may exceed the input extent; same-padding keeps them legal
    const int kf = dk(rng), kt = dk(rng);
    Conv2dGeom g;
    g.stride_f = ds(rng);
    g.stride_t = ds(rng);
    g.pad_f = kf / 2;
    g.pad_t = kt / 2;
    Tensor x = random_tensor<float>({B, C_in, F, L}, rng);
    Tensor w = random_tensor<float>({C_out, C_in, kf, kt}, rng);
    Tensor b = random_tensor<float>({C_out}, rng);
    Tensor y = conv2d_fwd(x, w, &b, g);
    Tensor ref = reference_conv2d(x, w, &b, g);
    CHECK(max_rel_diff(y, ref) < 1e-6);
  }
}

TEST_CASE("conv2d with kernel larger than the input extent") {
  // k=5 on a 2x2 map, stride 2: taps beyond the padded input must not read
  // out of bounds or couple batch samples
  std::mt19937 rng(29);
  Tensor x = random_tensor<float>({3, 2, 2, 2}, rng);
  Tensor w = random_tensor<float>({2, 1, 5, 5}, rng);
  Conv2dGeom g;
  g.groups = 2;
  g.stride_f = g.stride_t = 2;
  g.pad_f = g.pad_t = 2;
  Tensor y = conv2d_fwd(x, w, nullptr, g);
  Tensor ref = reference_conv2d(x, w, nullptr, g);
  CHECK(max_rel_diff(y, ref) < 1e-6);

  // single-sample runs must agree with the batched run exactly
  for (int b = 0; b < 3; ++b) {
    Tensor xb({1, 2, 2, 2});
    std::copy(x.data.begin() + b * 8, x.data.begin() + (b + 1) * 8, xb.data.begin());
    Tensor yb = conv2d_fwd(xb, w, nullptr, g);
    for (std::int64_t i = 0; i < yb.size(); ++i)
      CHECK(yb[i] == y[b * yb.size() + i]);
  }
}

TEST_CASE("conv2d is linear in its input") {
  std::mt19937 rng(3);
  Tensor x = random_tensor<float>({1, 3, 6, 6}, rng);
  Tensor y = random_tensor<float>({1, 3, 6, 6}, rng);
  Tensor w = random_tensor<float>({4, 3, 3, 3}, rng);
  Conv2dGeom g;
  g.pad_f = g.pad_t = 1;
  const float a = 0.7f, b = -1.3f;
  Tensor lhs_in(x.shape);
  for (std::int64_t i = 0; i < x.size(); ++i) lhs_in[i] = a * x[i] + b * y[i];
  Tensor lhs = conv2d_fwd(lhs_in, w, nullptr, g);
  Tensor cx = conv2d_fwd(x, w, nullptr, g);
  Tensor cy = conv2d_fwd(y, w, nullptr, g);
  for (std::int64_t i = 0; i < lhs.size(); ++i)
    CHECK(lhs[i] == doctest::Approx(a * cx[i] + b * cy[i]).epsilon(1e-5));
}

TEST_CASE("conv2d error paths") {
  Tensor x({1, 4, 4, 4});
  Tensor w({4, 2, 3, 3});
  Conv2dGeom g;
  g.groups = 3;  // does not divide 4
  CHECK_THROWS_AS(conv2d_fwd(x, w, nullptr, g), ConfigError);
  g.groups = 1;
  CHECK_THROWS_AS(conv2d_fwd(x, w, nullptr, g), ShapeError);  // Cg mismatch
  Tensor big_k({1, 4, 7, 7});
  CHECK_THROWS_AS(conv2d_fwd(x, big_k, nullptr, g), ShapeError);
}

TEST_CASE("batch_norm identity and constant") {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor mean({1}, {0}), var({1}, {1}), gamma({1}, {1}), beta({1}, {0});
  Tensor y = batch_norm_affine(x, mean, var, gamma, beta, 0.0);
  CHECK(max_abs_diff(x, y) == 0.0);

  Tensor xc = Tensor::full({2, 1, 3, 3}, 5.0f);
  Tensor mc({1}, {5}), g2({1}, {2}), b3({1}, {3});
  Tensor yc = batch_norm_affine(xc, mc, var, g2, b3, 0.0);
  for (std::int64_t i = 0; i < yc.size(); ++i) CHECK(yc[i] == doctest::Approx(3.0f));

  Tensor bad_var({1}, {-1});
  CHECK_THROWS_AS(batch_norm_affine(x, mean, bad_var, gamma, beta, 0.0), NumericError);
}

TEST_CASE("batch_norm training statistics normalize the batch") {
  std::mt19937 rng(5);
  DTensor x = random_tensor<double>({2, 3, 4, 4}, rng, -2.0, 3.0);
  Tape<double> tape;
  Var xv = tape.input(x);
  Var gamma = tape.input(DTensor::ones({3}));
  Var beta = tape.input(DTensor::zeros({3}));
  auto bn = tape.batch_norm_train(xv, gamma, beta, 0.0);
  const DTensor& y = tape.value(bn.y);
  for (int c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    int n = 0;
    for (int b = 0; b < 2; ++b)
      for (int f = 0; f < 4; ++f)
        for (int t = 0; t < 4; ++t) {
          sum += y.at4(b, c, f, t);
          ++n;
        }
    const double mu = sum / n;
    for (int b = 0; b < 2; ++b)
      for (int f = 0; f < 4; ++f)
        for (int t = 0; t < 4; ++t) sq += (y.at4(b, c, f, t) - mu) * (y.at4(b, c, f, t) - mu);
    CHECK(std::abs(mu) < 1e-5);
    CHECK(std::abs(sq / n - 1.0) < 1e-4);
  }
}

TEST_CASE("activations") {
  CHECK(act_eval(ActKind::relu, -1.0) == 0.0);
  CHECK(act_eval(ActKind::relu, 2.0) == 2.0);
  CHECK(act_eval(ActKind::hardswish, -3.0) == 0.0);
  CHECK(act_eval(ActKind::hardswish, 3.0) == 3.0);
  CHECK(act_eval(ActKind::hardswish, 0.0) == 0.0);
  CHECK(act_eval(ActKind::sigmoid, 0.0) == 0.5);
  CHECK(act_eval(ActKind::sigmoid, -800.0) == doctest::Approx(0.0));  // no overflow
}

TEST_CASE("avg_pool2d constant map and hand-evaluated windows") {
  Tensor x = Tensor::full({1, 1, 4, 4}, 2.5f);
  Pool2dGeom g;
  g.k_f = g.k_t = 3;
  g.stride_f = g.stride_t = 2;
  g.pad_f = g.pad_t = 1;
  Tensor y = avg_pool2d_fwd(x, g);
  for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(2.5f));

  // 1-D sequence [1..5], k=3, s=2, pad 1 -> [1.5, 3, 4.5]
  Tensor seq({1, 1, 5, 1}, {1, 2, 3, 4, 5});
  Pool2dGeom gs;
  gs.k_f = 3;
  gs.stride_f = 2;
  gs.pad_f = 1;
  Tensor ys = avg_pool2d_fwd(seq, gs);
  CHECK(ys.shape == Shape{1, 1, 3, 1});
  CHECK(ys[0] == doctest::Approx(1.5f));
  CHECK(ys[1] == doctest::Approx(3.0f));
  CHECK(ys[2] == doctest::Approx(4.5f));

  // output length formula for k=3, s=2, pad=1
  for (int len = 2; len <= 9; ++len)
    CHECK(conv_out_extent(len, 1, 3, 2) == (len + 2 - 3) / 2 + 1);
}

TEST_CASE("axis_pool means and composition") {
  Tensor x({1, 1, 2, 2}, {1, 3, 1, 3});
  Tensor yt = axis_pool_fwd(x, Axis::time);
  CHECK(yt.shape == Shape{1, 1, 2});
  CHECK(yt[0] == doctest::Approx(2.0f));
  CHECK(yt[1] == doctest::Approx(2.0f));

  std::mt19937 rng(13);
  Tensor r = random_tensor<float>({2, 3, 5, 7}, rng);
  Tensor pooled_t = axis_pool_fwd(r, Axis::time);  // B x C x F
  double global = 0;
  for (auto v : r.data) global += v;
  global /= r.size();
  // mean over F of the time-pooled map equals the global mean per (b, c)
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 3; ++c) {
      double m = 0;
      for (int f = 0; f < 5; ++f) m += pooled_t.at3(b, c, f);
      m /= 5;
      double direct = 0;
      for (int f = 0; f < 5; ++f)
        for (int t = 0; t < 7; ++t) direct += r.at4(b, c, f, t);
      direct /= 35;
      CHECK(m == doctest::Approx(direct).epsilon(1e-6));
    }
  (void)global;
}

TEST_CASE("linear identity, hand case, loop oracle") {
  Tensor w_id({2, 2}, {1, 0, 0, 1});
  Tensor x({1, 2}, {3, 4});
  Tensor y = linear_fwd(x, w_id, nullptr);
  CHECK(y[0] == 3.0f);
  CHECK(y[1] == 4.0f);

  Tensor w({2, 2}, {1, 1, 1, -1});
  Tensor b({2}, {0, 0});
  Tensor x2({1, 2}, {1, 2});
  Tensor y2 = linear_fwd(x2, w, &b);
  CHECK(y2[0] == doctest::Approx(3.0f));
  CHECK(y2[1] == doctest::Approx(-1.0f));

  std::mt19937 rng(17);
  Tensor xr = random_tensor<float>({2, 3, 5}, rng);
  Tensor wr = random_tensor<float>({4, 5}, rng);
  Tensor br = random_tensor<float>({4}, rng);
  Tensor yr = linear_fwd(xr, wr, &br);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      for (int o = 0; o < 4; ++o) {
        double acc = br[o];
        for (int k = 0; k < 5; ++k) acc += xr.at3(i, j, k) * wr.at2(o, k);
        CHECK(yr.at3(i, j, o) == doctest::Approx(acc).epsilon(1e-6));
      }

  Tensor bad({1, 3}, {1, 2, 3});
  CHECK_THROWS_AS(linear_fwd(bad, wr, nullptr), ShapeError);
}

TEST_CASE("backward through relu and 1x1 conv") {
  Tape<float> tape;
  Var x = tape.input(Tensor({1, 1, 1, 2}, {-1, 2}));
  Var loss = tape.sum_all(tape.activation(x, ActKind::relu));
  tape.backward(loss);
  const Tensor& gx = tape.grad(x);
  CHECK(gx[0] == 0.0f);
  CHECK(gx[1] == 1.0f);

  Tape<float> t2;
  std::mt19937 rng(23);
  Tensor xv = random_tensor<float>({1, 1, 3, 3}, rng);
  Var x2 = t2.input(xv);
  Var w = t2.input(random_tensor<float>({1, 1, 1, 1}, rng));
  Var y = t2.conv2d(x2, w, Var{}, Conv2dGeom{});
  t2.backward(t2.sum_all(y));
  double sum_x = 0;
  for (auto v : xv.data) sum_x += v;
  CHECK(t2.grad(w)[0] == doctest::Approx(sum_x).epsilon(1e-5));
}

TEST_CASE("backward twice accumulates exactly 2x") {
  Tape<float> tape;
  Tensor xv({1, 2}, {0.5f, -0.25f});
  Var x = tape.input(xv);
  Var w = tape.input(Tensor({2, 2}, {1, 2, 3, 4}));
  Var loss = tape.sum_all(tape.linear(x, w, Var{}));
  tape.backward(loss);
  Tensor g1 = tape.grad(x);
  tape.backward(loss);
  const Tensor& g2 = tape.grad(x);
  for (std::int64_t i = 0; i < g1.size(); ++i) CHECK(g2[i] == 2.0f * g1[i]);
  tape.zero_grad();
  tape.backward(loss);
  const Tensor& g3 = tape.grad(x);
  for (std::int64_t i = 0; i < g1.size(); ++i) CHECK(g3[i] == g1[i]);
}

TEST_CASE("backward before forward is a state error") {
  Tape<float> tape;
  CHECK_THROWS_AS(tape.backward(Var{0}), StateError);
  Var x = tape.input(Tensor({1}, {1.0f}));
  CHECK_THROWS_AS(tape.grad(x), StateError);  // no backward yet
}

TEST_CASE("finite difference basics") {
  // f(theta) = theta^2 at theta=3: derivative 6
  DTensor theta({1}, {3.0});
  DTensor analytic({1}, {6.0});
  auto f = [&]() { return theta[0] * theta[0]; };
  auto res = finite_diff_gradcheck(f, {{"theta", &theta, &analytic}}, 1e-5);
  CHECK(res.max_rel_err < 1e-6);

  // sigmoid'(0) = 0.25
  DTensor z({1}, {0.0});
  DTensor ga({1}, {0.25});
  auto fs = [&]() { return static_cast<double>(act_eval(ActKind::sigmoid, z[0])); };
  auto rs = finite_diff_gradcheck(fs, {{"z", &z, &ga}}, 1e-5);
  CHECK(rs.max_rel_err < 1e-6);

  // corrupted analytic gradient must be reported (negative control)
  DTensor bad({1}, {5.9});
  auto rb = finite_diff_gradcheck(f, {{"theta", &theta, &bad}}, 1e-5);
  CHECK(rb.max_rel_err > 1e-3);
}

namespace {

// Runs fwd() under a fresh tape, backprops, then sweeps finite differences.
template <typename BuildLoss>
double gradcheck_inputs(BuildLoss build, std::vector<DTensor*> inputs, double h = 1e-4) {
  std::vector<DTensor> grads;
  {
    Tape<double> tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (DTensor* t : inputs) vars.push_back(tape.input(*t));
    Var loss = build(tape, vars);
    tape.backward(loss);
    for (Var v : vars) grads.push_back(tape.grad(v));
  }
  std::vector<GradcheckTarget> targets;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    targets.push_back({"input" + std::to_string(i), inputs[i], &grads[i]});
  auto f = [&]() {
    Tape<double> tape;
    std::vector<Var> vars;
    for (DTensor* t : inputs) vars.push_back(tape.input(*t));
    return static_cast<double>(tape.value(build(tape, vars)).item());
  };
  return finite_diff_gradcheck(f, targets, h).max_rel_err;
}

}  // namespace

TEST_CASE("gradcheck: every core op") {
  std::mt19937 rng(101);

  SUBCASE("conv2d") {
    DTensor x = random_tensor<double>({2, 4, 5, 6}, rng);
    DTensor w = random_tensor<double>({6, 2, 3, 3}, rng);
    DTensor b = random_tensor<double>({6}, rng);
    DTensor probe = random_tensor<double>({2, 6, 3, 6}, rng, 0.5, 1.5);
    auto build = [&](Tape<double>& t, std::vector<Var>& v) {
      Conv2dGeom g;
      g.groups = 2;
      g.stride_f = 2;
      g.pad_f = g.pad_t = 1;
      return t.mean_all(t.mul(t.conv2d(v[0], v[1], v[2], g), t.constant(probe)));
    };
    CHECK(gradcheck_inputs(build, {&x, &w, &b}) < 1e-6);
  }

  SUBCASE("linear") {
    DTensor x = random_tensor<double>({3, 4}, rng);
    DTensor w = random_tensor<double>({5, 4}, rng);
    DTensor b = random_tensor<double>({5}, rng);
    auto build = [](Tape<double>& t, std::vector<Var>& v) {
      return t.sum_all(t.activation(t.linear(v[0], v[1], v[2]), ActKind::sigmoid));
    };
    CHECK(gradcheck_inputs(build, {&x, &w, &b}) < 1e-6);
  }

  SUBCASE("batch_norm train mode") {
    DTensor x = random_tensor<double>({2, 3, 4, 4}, rng);
    DTensor gamma = random_tensor<double>({3}, rng, 0.5, 1.5);
    DTensor beta = random_tensor<double>({3}, rng);
    DTensor probe = random_tensor<double>({2, 3, 4, 4}, rng, 0.5, 1.5);
    auto build = [&](Tape<double>& t, std::vector<Var>& v) {
      auto bn = t.batch_norm_train(v[0], v[1], v[2], 1e-5);
      return t.mean_all(t.mul(bn.y, t.constant(probe)));
    };
    CHECK(gradcheck_inputs(build, {&x, &gamma, &beta}) < 1e-6);
  }

  SUBCASE("batch_norm eval mode") {
    DTensor x = random_tensor<double>({2, 3, 4, 4}, rng);
    DTensor gamma = random_tensor<double>({3}, rng, 0.5, 1.5);
    DTensor beta = random_tensor<double>({3}, rng);
    DTensor rm = random_tensor<double>({3}, rng);
    DTensor rv = random_tensor<double>({3}, rng, 0.5, 2.0);
    auto build = [&](Tape<double>& t, std::vector<Var>& v) {
      return t.sum_all(
          t.activation(t.batch_norm_eval(v[0], v[1], v[2], rm, rv, 1e-5), ActKind::sigmoid));
    };
    CHECK(gradcheck_inputs(build, {&x, &gamma, &beta}) < 1e-6);
  }

  SUBCASE("activations and pools") {
    DTensor x = random_tensor<double>({2, 3, 5, 5}, rng);
    // keep points away from the hardswish kinks so central differences hold
    for (auto& v : x.data)
      if (std::abs(std::abs(v) - 3.0) < 1e-3) v += 0.01;
    auto build = [](Tape<double>& t, std::vector<Var>& v) {
      Var h = t.activation(v[0], ActKind::hardswish);
      Pool2dGeom g;
      g.k_f = g.k_t = 3;
      g.stride_f = g.stride_t = 2;
      g.pad_f = g.pad_t = 1;
      Var p = t.avg_pool2d(h, g);
      Var a = t.axis_pool(p, Axis::time);
      Var m = t.mean_last(a);
      return t.sum_all(t.activation(m, ActKind::sigmoid));
    };
    CHECK(gradcheck_inputs(build, {&x}) < 1e-6);
  }

  SUBCASE("softmax with temperature") {
    DTensor z = random_tensor<double>({3, 4}, rng);
    DTensor probe = random_tensor<double>({3, 4}, rng);
    auto build = [&](Tape<double>& t, std::vector<Var>& v) {
      Var s = t.softmax_temp(v[0], 2.5);
      return t.sum_all(t.mul(s, t.constant(probe)));
    };
    CHECK(gradcheck_inputs(build, {&z}) < 1e-6);
  }

  SUBCASE("dyrelu with normalization") {
    DTensor x = random_tensor<double>({2, 3, 4, 4}, rng);
    DTensor u = random_tensor<double>({2, 2 * 2 * 3}, rng);
    auto build = [](Tape<double>& t, std::vector<Var>& v) {
      Var coef = t.dyrelu_normalize(v[1], 2, 3, 1.0, 0.5);
      return t.sum_all(t.activation(t.dyrelu(v[0], coef), ActKind::sigmoid));
    };
    CHECK(gradcheck_inputs(build, {&x, &u}) < 1e-6);
  }

  SUBCASE("mix and per-sample conv") {
    const int K = 3, B = 2;
    DTensor alpha = random_tensor<double>({B, K}, rng, 0.1, 1.0);
    DTensor stack = random_tensor<double>({K * 4, 2, 3, 3}, rng);
    DTensor bias = random_tensor<double>({K, 4}, rng);
    DTensor x = random_tensor<double>({B, 2, 5, 5}, rng);
    DTensor probe = random_tensor<double>({B, 4, 5, 5}, rng, 0.5, 1.5);
    auto build = [&](Tape<double>& t, std::vector<Var>& v) {
      Var sm = t.softmax_temp(v[0], 1.0);
      Var wmix = t.mix(sm, v[1]);
      Var bmix = t.mix(sm, v[2]);
      Conv2dGeom g;
      g.pad_f = g.pad_t = 1;
      Var y = t.conv2d_batched_kernels(v[3], wmix, bmix, B, g);
      return t.mean_all(t.mul(y, t.constant(probe)));
    };
    CHECK(gradcheck_inputs(build, {&alpha, &stack, &bias, &x}) < 1e-6);
  }

  SUBCASE("broadcast multiplies, concat, slice, transpose") {
    DTensor x = random_tensor<double>({2, 3, 4, 5}, rng);
    DTensor sf = random_tensor<double>({2, 3, 4}, rng);
    DTensor st = random_tensor<double>({2, 3, 5}, rng);
    auto build = [](Tape<double>& t, std::vector<Var>& v) {
      Var y = t.mul_bcf(v[0], v[1]);
      y = t.mul_bct(y, v[2]);
      Var a = t.axis_pool(y, Axis::time);
      Var b = t.axis_pool(y, Axis::frequency);
      Var cat = t.concat_last(a, b);
      Var tr = t.transpose12(cat);
      Var sl = t.slice_last(tr, 1, 2);
      return t.sum_all(t.activation(sl, ActKind::sigmoid));
    };
    CHECK(gradcheck_inputs(build, {&x, &sf, &st}) < 1e-6);
  }

  SUBCASE("bce with logits") {
    DTensor z = random_tensor<double>({3, 4}, rng, -2.0, 2.0);
    DTensor y({3, 4});
    std::uniform_int_distribution<int> coin(0, 1);
    for (auto& v : y.data) v = coin(rng);
    auto build = [&](Tape<double>& t, std::vector<Var>& v) {
      return t.bce_logits_mean(v[0], y);
    };
    CHECK(gradcheck_inputs(build, {&z}) < 1e-6);
  }
}

TEST_CASE("determinism: identical inputs give bit-identical outputs") {
  auto run = [](unsigned seed) {
    std::mt19937 rng(seed);
    Tensor x = random_tensor<float>({2, 3, 6, 6}, rng);
    Tensor w = random_tensor<float>({4, 3, 3, 3}, rng);
    Conv2dGeom g;
    g.pad_f = g.pad_t = 1;
    return conv2d_fwd(x, w, nullptr, g);
  };
  Tensor a = run(42), b = run(42);
  CHECK(a.data == b.data);
}
