#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "dymn/gradcheck.hpp"
#include "dymn/metrics.hpp"
#include "dymn/training.hpp"
#include "support/oracles.hpp"

using namespace dymn;
using test::random_tensor;

namespace {

// Regularized incomplete beta via the standard continued fraction
// (Numerical Recipes betacf); oracle for the folded-mixup expectation.
double betacf(double a, double b, double x) {
  const int max_iter = 200;
  const double eps = 3e-14, fpmin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

double reg_inc_beta(double a, double b, double x) {
  if (x <= 0) return 0;
  if (x >= 1) return 1;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log(1.0 - x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - std::exp(std::lgamma(a + b) - std::lgamma(b) - std::lgamma(a) +
                        b * std::log(1.0 - x) + a * std::log(x)) *
                   betacf(b, a, 1.0 - x) / b;
}

// E[max(L, 1-L)] for L ~ Beta(a, a): by symmetry 2 * E[L * 1{L > 1/2}]
// = 2 * (1/2) * (1 - I_{1/2}(a+1, a)).
double expected_folded_beta(double a) {
  return 1.0 - reg_inc_beta(a + 1.0, a, 0.5);
}

}  // namespace

TEST_CASE("kd_loss: boundary, perfect fit, hand-computed combination") {
  Tape<float> tape;
  std::mt19937 rng(1);
  Tensor zs = random_tensor<float>({2, 3}, rng, -2.0, 2.0);
  Tensor y({2, 3}, {1, 0, 1, 0, 1, 0});
  Tensor zt = random_tensor<float>({2, 3}, rng, -2.0, 2.0);

  // lambda = 1: teacher ignored entirely
  Var a = kd_loss(tape, tape.input(zs), y, &zt, 1.0);
  Var b = kd_loss(tape, tape.input(zs), y, nullptr, 1.0);
  CHECK(tape.value(a).item() == tape.value(b).item());

  // missing teacher with lambda < 1 is a configuration error
  Var z = tape.input(zs);
  CHECK_THROWS_AS(kd_loss(tape, z, y, nullptr, 0.5), ConfigError);

  // perfect-fit limit: student == teacher, labels = round(sigmoid(teacher))
  Tensor big({1, 4}, {12.0f, -14.0f, 13.0f, -11.0f});
  Tensor lab({1, 4}, {1, 0, 1, 0});
  Var p = kd_loss(tape, tape.input(big), lab, &big, 0.1);
  CHECK(tape.value(p).item() < 1e-4);

  // random case equals lambda * L_l + (1 - lambda) * L_kd computed by hand
  const double lambda = 0.1;
  Var l_l = tape.bce_logits_mean(tape.input(zs), y);
  Tensor sig_t(zt.shape);
  for (std::int64_t i = 0; i < zt.size(); ++i) sig_t[i] = act_eval(ActKind::sigmoid, zt[i]);
  Var l_kd = tape.bce_logits_mean(tape.input(zs), sig_t);
  const double by_hand = lambda * tape.value(l_l).item() +
                         (1.0 - lambda) * tape.value(l_kd).item();
  Var full = kd_loss(tape, tape.input(zs), y, &zt, lambda);
  CHECK(tape.value(full).item() == doctest::Approx(by_hand).epsilon(1e-7));

  // convex combination property
  const double lo = std::min(tape.value(l_l).item(), tape.value(l_kd).item());
  const double hi = std::max(tape.value(l_l).item(), tape.value(l_kd).item());
  CHECK(tape.value(full).item() >= lo - 1e-7);
  CHECK(tape.value(full).item() <= hi + 1e-7);
}

TEST_CASE("kd_loss gradient passes the finite-difference check") {
  std::mt19937 rng(2);
  DTensor zs = random_tensor<double>({3, 4}, rng, -2.0, 2.0);
  DTensor zt = random_tensor<double>({3, 4}, rng, -2.0, 2.0);
  DTensor y({3, 4});
  std::uniform_int_distribution<int> coin(0, 1);
  for (auto& v : y.data) v = coin(rng);

  DTensor grad;
  {
    Tape<double> tape;
    Var z = tape.input(zs);
    Var loss = kd_loss(tape, z, y, &zt, 0.1);
    tape.backward(loss);
    grad = tape.grad(z);
  }
  auto f = [&]() {
    Tape<double> tape;
    return tape.value(kd_loss(tape, tape.input(zs), y, &zt, 0.1)).item();
  };
  auto res = finite_diff_gradcheck(f, {{"z_s", &zs, &grad}}, 1e-6);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("mixup: identity at lambda 1, convex labels, shared coefficient") {
  std::mt19937 rng(3);
  KdBatch a{random_tensor<float>({2, 1, 4, 5}, rng), Tensor({2, 2}, {1, 0, 0, 1}),
            random_tensor<float>({2, 2}, rng)};
  KdBatch b{random_tensor<float>({2, 1, 4, 5}, rng), Tensor({2, 2}, {0, 1, 1, 0}),
            random_tensor<float>({2, 2}, rng)};

  KdBatch same = mixup(a, b, 1.0);
  CHECK(same.x.data == a.x.data);
  CHECK(same.y.data == a.y.data);

  KdBatch mixed = mixup(a, b, 0.7);
  for (auto v : mixed.y.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  // same coefficient everywhere: x, y, teacher
  CHECK(mixed.x[0] == doctest::Approx(0.7f * a.x[0] + 0.3f * b.x[0]));
  CHECK(mixed.y[0] == doctest::Approx(0.7f * a.y[0] + 0.3f * b.y[0]));
  CHECK((*mixed.teacher)[0] == doctest::Approx(0.7f * (*a.teacher)[0] + 0.3f * (*b.teacher)[0]));
}

TEST_CASE("folded Beta(0.3, 0.3) empirical mean matches the incomplete-beta oracle") {
  const double expected = expected_folded_beta(0.3);
  std::mt19937 rng(4);
  double acc = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double lam = draw_mixup_lambda(0.3, rng);
    CHECK(lam >= 0.5);
    CHECK(lam <= 1.0);
    acc += lam;
  }
  const double mc = acc / n;
  CHECK(std::abs(mc - expected) / expected < 0.01);
}

TEST_CASE("consistent teaching: mixing then scoring equals scoring mixed targets") {
  // BCE against mixed sigmoid-targets is definitionally what kd_loss sees
  // after mixup; assert the plumbing preserves it.
  std::mt19937 rng(5);
  KdBatch a{random_tensor<float>({2, 1, 3, 3}, rng), Tensor({2, 2}, {1, 0, 0, 1}),
            random_tensor<float>({2, 2}, rng)};
  KdBatch b{random_tensor<float>({2, 1, 3, 3}, rng), Tensor({2, 2}, {0, 1, 1, 0}),
            random_tensor<float>({2, 2}, rng)};
  const double lam = 0.65;
  KdBatch m = mixup(a, b, lam);

  Tensor zs = random_tensor<float>({2, 2}, rng);
  Tape<float> t1;
  Tensor mixed_sig(m.teacher->shape);
  for (std::int64_t i = 0; i < mixed_sig.size(); ++i)
    mixed_sig[i] = act_eval(ActKind::sigmoid, (*m.teacher)[i]);
  const double via_batch = t1.value(t1.bce_logits_mean(t1.input(zs), mixed_sig)).item();

  Tensor manual(m.teacher->shape);
  for (std::int64_t i = 0; i < manual.size(); ++i)
    manual[i] = act_eval(ActKind::sigmoid,
                         static_cast<float>(lam * (*a.teacher)[i] +
                                            (1 - lam) * (*b.teacher)[i]));
  Tape<float> t2;
  const double via_manual = t2.value(t2.bce_logits_mean(t2.input(zs), manual)).item();
  CHECK(via_batch == doctest::Approx(via_manual).epsilon(1e-6));
}

TEST_CASE("learning rate schedule") {
  ScheduleConfig s;
  s.peak_lr = 2e-3;

  CHECK(lr_at(0, 0.0, s) == doctest::Approx(0.01 * s.peak_lr));
  CHECK(lr_at(8, 0.0, s) == doctest::Approx(s.peak_lr));  // end of warmup
  CHECK(lr_at(40, 0.0, s) == doctest::Approx(s.peak_lr)); // constant phase
  // midpoint of rampdown: (peak + 0.01 peak) / 2
  const double mid_epoch = 8 + 72 + 95 / 2.0;
  CHECK(lr_at(static_cast<int>(mid_epoch), 0.5, s) ==
        doctest::Approx((s.peak_lr + 0.01 * s.peak_lr) / 2).epsilon(1e-3));
  CHECK(lr_at(8 + 72 + 95, 0.0, s) == doctest::Approx(0.01 * s.peak_lr));
  CHECK(lr_at(199, 0.9, s) == doctest::Approx(0.01 * s.peak_lr));  // tail

  // monotone non-increasing after warmup, never below 1% of peak
  double prev = s.peak_lr;
  for (int e = 8; e < 200; ++e)
    for (double f : {0.0, 0.25, 0.5, 0.75}) {
      const double lr = lr_at(e, f, s);
      CHECK(lr <= prev + 1e-15);
      CHECK(lr >= 0.01 * s.peak_lr - 1e-15);
      prev = lr;
    }
}

TEST_CASE("temperature schedule: 30 to 1 over the first 30 epochs") {
  ScheduleConfig s;
  CHECK(tau_at(0, s) == doctest::Approx(30.0));
  CHECK(tau_at(15, s) == doctest::Approx(15.5));
  CHECK(tau_at(30, s) == doctest::Approx(1.0));
  CHECK(tau_at(120, s) == doctest::Approx(1.0));
  for (int e = 0; e <= 60; ++e) CHECK(tau_at(e, s) >= 1.0);
}

TEST_CASE("adam: zero grads keep parameters, first step equals -lr") {
  ParamStore<double> store;
  store.add("theta", DTensor({1}, {0.3}));
  AdamState<double> st;
  adam_step(store, st, 0.05, 0.0);  // grad is zero
  CHECK(store.at("theta").value[0] == 0.3);

  ParamStore<double> s2;
  auto* e = s2.add("theta", DTensor({1}, {1.0}));
  e->grad[0] = 1.0;
  AdamState<double> st2;
  adam_step(s2, st2, 0.05, 0.0);
  // bias-corrected m/sqrt(v) = 1 at the first step
  CHECK(e->value[0] == doctest::Approx(1.0 - 0.05).epsilon(1e-6));
}

TEST_CASE("adam converges on theta^2") {
  ParamStore<double> store;
  auto* e = store.add("theta", DTensor({1}, {3.0}));
  AdamState<double> st;
  for (int i = 0; i < 500; ++i) {
    e->grad[0] = 2.0 * e->value[0];
    adam_step(store, st, 0.1, 0.0);
  }
  CHECK(std::abs(e->value[0]) < 1e-3);
}

TEST_CASE("adam decoupled weight decay shrinks parameters") {
  ParamStore<double> store;
  auto* e = store.add("theta", DTensor({1}, {2.0}));
  AdamState<double> st;
  adam_step(store, st, 0.1, 0.5);  // zero grad, decay only
  CHECK(e->value[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
}

namespace {

ModelConfig toy_config(int n_mels, int n_classes) {
  ModelConfig cfg;
  cfg.alpha = 0.1;
  cfg.n_classes = n_classes;
  cfg.in_freq = n_mels;
  cfg.placement = Placement::all;
  cfg.finalize();
  return cfg;
}

MelConfig toy_mel(int n_mels) {
  MelConfig m;
  m.n_mels = n_mels;
  return m;
}

}  // namespace

TEST_CASE("train_loop: same seed twice gives identical traces, loader on or off") {
  auto data = make_synthetic_dataset(12, 77, 0.3);
  MelConfig mel = toy_mel(32);
  ScheduleConfig s;
  s.batch_size = 4;
  s.lambda = 1.0;
  s.peak_lr = 1e-3;
  s.warmup_epochs = 1;

  auto run = [&](int loader_threads) {
    ModelConfig cfg = toy_config(32, 2);
    std::mt19937 mrng(9);
    auto model = Model<float>::build(cfg, mrng);
    ScheduleConfig sc = s;
    sc.loader_threads = loader_threads;
    std::mt19937 rng(123);
    return train_loop(model, data, mel, sc, 2, rng);
  };
  TrainResult a = run(0);
  TrainResult b = run(0);
  REQUIRE(a.steps.size() == b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) CHECK(a.steps[i].loss == b.steps[i].loss);

  // per-batch seeding keeps the bounded-queue loader bit-identical too
  TrainResult c = run(1);
  for (std::size_t i = 0; i < a.steps.size(); ++i) CHECK(a.steps[i].loss == c.steps[i].loss);
}

TEST_CASE("train_loop rejects empty data and missing teacher logits") {
  ModelConfig cfg = toy_config(32, 2);
  std::mt19937 mrng(9);
  auto model = Model<float>::build(cfg, mrng);
  ScheduleConfig s;
  std::mt19937 rng(1);
  std::vector<ClipExample> empty;
  CHECK_THROWS_AS(train_loop(model, empty, toy_mel(32), s, 1, rng), ConfigError);

  auto data = make_synthetic_dataset(4, 5, 0.2);
  ScheduleConfig kd;
  kd.lambda = 0.1;  // needs teacher logits
  CHECK_THROWS_AS(train_loop(model, data, toy_mel(32), kd, 1, rng), ConfigError);
}

TEST_CASE("teacher logit container round trip and id alignment") {
  std::mt19937 rng(6);
  Tensor logits = random_tensor<float>({3, 2}, rng);
  const std::string path = "/tmp/dymn_teacher_test.bin";
  save_teacher_logits(path, {"a", "b", "c"}, logits);
  TeacherLogits tl = load_teacher_logits(path);
  CHECK(tl.ids == std::vector<std::string>{"a", "b", "c"});
  CHECK(tl.logits.data == logits.data);

  std::vector<ClipExample> data(2);
  data[0].id = "c";
  data[0].labels = {0, 1};
  data[1].id = "a";
  data[1].labels = {1, 0};
  attach_teacher_logits(data, tl);
  CHECK((*data[0].teacher_logits)[0] == logits.at2(2, 0));
  CHECK((*data[1].teacher_logits)[1] == logits.at2(0, 1));

  data[1].id = "missing";
  CHECK_THROWS_AS(attach_teacher_logits(data, tl), ConfigError);
  std::remove(path.c_str());
}

TEST_CASE("metrics: perfect predictions give mAP 1 and accuracy 1") {
  Tensor labels({3, 3}, {1, 0, 0, 0, 1, 0, 0, 1, 1});
  Tensor perfect({3, 3}, {0.9f, 0.1f, 0.2f, 0.1f, 0.8f, 0.3f, 0.05f, 0.9f, 0.95f});
  CHECK(mean_average_precision(perfect, labels) == doctest::Approx(1.0));
  CHECK(accuracy(perfect, labels) == doctest::Approx(1.0));

  Tensor inverted({3, 3}, {0.1f, 0.9f, 0.8f, 0.9f, 0.2f, 0.7f, 0.95f, 0.1f, 0.05f});
  CHECK(accuracy(inverted, labels) == doctest::Approx(0.0));
  CHECK(mean_average_precision(inverted, labels) < 0.9);
}
