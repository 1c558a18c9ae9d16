#include "dymn/gradcheck_suite.hpp"

#include <random>

#include "dymn/blocks.hpp"
#include "dymn/gradcheck.hpp"
#include "dymn/training.hpp"

namespace dymn {

namespace {

DTensor randu(Shape s, std::mt19937& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  DTensor t(std::move(s));
  for (auto& v : t.data) v = d(rng);
  return t;
}

// Forward/backward once, then sweep finite differences over every input.
template <typename Build>
double check_inputs(Build build, std::vector<DTensor*> inputs, double h, int order) {
  std::vector<DTensor> grads;
  grads.reserve(inputs.size());
  {
    Tape<double> tape;
    std::vector<Var> vars;
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
    return tape.value(build(tape, vars)).item();
  };
  return finite_diff_gradcheck(f, targets, h, order).max_rel_err;
}

GradcheckCase run_case(const std::string& name, double err, double tol = 1e-6) {
  return {name, err, tol, err < tol};
}

BlockSpec small_spec() {
  BlockSpec s;
  s.kernel = 3;
  s.c_in = 4;
  s.c_exp = 8;
  s.c_out = 4;
  s.stride = 1;
  s.attention = AttentionKind::ca;
  s.act = Act::hardswish;
  s.dyrelu_pos = {false, true, false};
  s.conv = {ConvKind::dynamic, ConvKind::dynamic, ConvKind::dynamic};
  s.context_dim = 5;
  s.n_kernels = 2;
  s.n_mappings = 2;
  return s;
}

// Seeds pinned to draws whose evaluation points stay clear of activation
// kinks over the whole 5-point stencil sweep.
double check_block(const BlockSpec& spec, unsigned seed, Mode mode) {
  std::mt19937 rng(seed);
  ParamStore<double> store;
  auto block = IrBlock<double>::create(store, "b", spec, rng);
  std::uniform_real_distribution<double> noise(-0.4, 0.4);
  for (auto& [name, e] : store) {
    if (!e.trainable) continue;
    for (auto& v : e.value.data) v += noise(rng);
  }
  DTensor x = randu({2, spec.c_in, 5, 6}, rng);
  const int fo = spec.stride == 2 ? 3 : 5;
  const int to = spec.stride == 2 ? 3 : 6;
  DTensor probe = randu({2, spec.c_out, fo, to}, rng, 0.5, 1.5);

  auto eval_loss = [&]() {
    Tape<double> tape;
    RunContext<double> ctx{tape, mode, 3.0, nullptr, nullptr, 0};
    Var out = block.forward(ctx, tape.input(x));
    return tape.value(tape.mean_all(tape.mul(out, tape.constant(probe)))).item();
  };
  store.zero_grad();
  DTensor x_grad;
  {
    Tape<double> tape;
    RunContext<double> ctx{tape, mode, 3.0, nullptr, nullptr, 0};
    Var xv = tape.input(x);
    Var loss = tape.mean_all(tape.mul(block.forward(ctx, xv), tape.constant(probe)));
    tape.backward(loss);
    x_grad = tape.grad(xv);
  }
  std::vector<DTensor> grads;
  std::vector<GradcheckTarget> targets;
  grads.reserve(store.size() + 1);
  for (auto& [name, e] : store) {
    if (!e.trainable) continue;
    grads.push_back(e.grad);
    targets.push_back({name, &e.value, &grads.back()});
  }
  grads.push_back(x_grad);
  targets.push_back({"input", &x, &grads.back()});
  return finite_diff_gradcheck(eval_loss, targets, 5e-4, 4).max_rel_err;
}

}  // namespace

std::vector<GradcheckCase> gradcheck_ops() {
  std::vector<GradcheckCase> out;
  std::mt19937 rng(101);

  {
    DTensor x = randu({2, 4, 5, 6}, rng);
    DTensor w = randu({6, 2, 3, 3}, rng);
    DTensor b = randu({6}, rng);
    DTensor probe = randu({2, 6, 3, 6}, rng, 0.5, 1.5);
    out.push_back(run_case(
        "conv2d (grouped, strided, biased)",
        check_inputs(
            [&](Tape<double>& t, std::vector<Var>& v) {
              Conv2dGeom g;
              g.groups = 2;
              g.stride_f = 2;
              g.pad_f = g.pad_t = 1;
              return t.mean_all(t.mul(t.conv2d(v[0], v[1], v[2], g), t.constant(probe)));
            },
            {&x, &w, &b}, 1e-4, 2)));
  }
  {
    DTensor x = randu({3, 4}, rng);
    DTensor w = randu({5, 4}, rng);
    DTensor b = randu({5}, rng);
    out.push_back(run_case(
        "linear",
        check_inputs(
            [](Tape<double>& t, std::vector<Var>& v) {
              return t.sum_all(t.activation(t.linear(v[0], v[1], v[2]), ActKind::sigmoid));
            },
            {&x, &w, &b}, 1e-4, 2)));
  }
  {
    DTensor x = randu({2, 3, 4, 4}, rng);
    DTensor gamma = randu({3}, rng, 0.5, 1.5);
    DTensor beta = randu({3}, rng);
    DTensor probe = randu({2, 3, 4, 4}, rng, 0.5, 1.5);
    out.push_back(run_case(
        "batch_norm (training statistics)",
        check_inputs(
            [&](Tape<double>& t, std::vector<Var>& v) {
              auto bn = t.batch_norm_train(v[0], v[1], v[2], 1e-5);
              return t.mean_all(t.mul(bn.y, t.constant(probe)));
            },
            {&x, &gamma, &beta}, 1e-4, 2)));
  }
  {
    DTensor x = randu({2, 3, 4, 4}, rng);
    DTensor gamma = randu({3}, rng, 0.5, 1.5);
    DTensor beta = randu({3}, rng);
    DTensor rm = randu({3}, rng);
    DTensor rv = randu({3}, rng, 0.5, 2.0);
    out.push_back(run_case(
        "batch_norm (running statistics)",
        check_inputs(
            [&](Tape<double>& t, std::vector<Var>& v) {
              return t.sum_all(t.activation(t.batch_norm_eval(v[0], v[1], v[2], rm, rv, 1e-5),
                                            ActKind::sigmoid));
            },
            {&x, &gamma, &beta}, 1e-4, 2)));
  }
  {
    DTensor x = randu({2, 3, 5, 5}, rng);
    for (auto& v : x.data)
      if (std::abs(std::abs(v) - 3.0) < 1e-3) v += 0.01;
    out.push_back(run_case(
        "activations and pools (hardswish, avg_pool2d, axis_pool, mean)",
        check_inputs(
            [](Tape<double>& t, std::vector<Var>& v) {
              Var h = t.activation(v[0], ActKind::hardswish);
              Pool2dGeom g;
              g.k_f = g.k_t = 3;
              g.stride_f = g.stride_t = 2;
              g.pad_f = g.pad_t = 1;
              Var p = t.avg_pool2d(h, g);
              Var a = t.axis_pool(p, Axis::time);
              return t.sum_all(t.activation(t.mean_last(a), ActKind::sigmoid));
            },
            {&x}, 1e-4, 2)));
  }
  {
    DTensor z = randu({3, 4}, rng);
    DTensor probe = randu({3, 4}, rng);
    out.push_back(run_case(
        "softmax with temperature",
        check_inputs(
            [&](Tape<double>& t, std::vector<Var>& v) {
              return t.sum_all(t.mul(t.softmax_temp(v[0], 2.5), t.constant(probe)));
            },
            {&z}, 1e-4, 2)));
  }
  {
    DTensor x = randu({2, 3, 4, 4}, rng);
    DTensor u = randu({2, 12}, rng);
    out.push_back(run_case(
        "dyrelu (normalization + max over mappings)",
        check_inputs(
            [](Tape<double>& t, std::vector<Var>& v) {
              Var coef = t.dyrelu_normalize(v[1], 2, 3, 1.0, 0.5);
              return t.sum_all(t.activation(t.dyrelu(v[0], coef), ActKind::sigmoid));
            },
            {&x, &u}, 1e-4, 2)));
  }
  {
    const int K = 3, B = 2;
    DTensor alpha = randu({B, K}, rng, 0.1, 1.0);
    DTensor stack = randu({K * 4, 2, 3, 3}, rng);
    DTensor bias = randu({K, 4}, rng);
    DTensor x = randu({B, 2, 5, 5}, rng);
    DTensor probe = randu({B, 4, 5, 5}, rng, 0.5, 1.5);
    out.push_back(run_case(
        "kernel mixture + per-sample convolution",
        check_inputs(
            [&](Tape<double>& t, std::vector<Var>& v) {
              Var sm = t.softmax_temp(v[0], 1.0);
              Var wmix = t.mix(sm, v[1]);
              Var bmix = t.mix(sm, v[2]);
              Conv2dGeom g;
              g.pad_f = g.pad_t = 1;
              Var y = t.conv2d_batched_kernels(v[3], wmix, bmix, B, g);
              return t.mean_all(t.mul(y, t.constant(probe)));
            },
            {&alpha, &stack, &bias, &x}, 1e-4, 2)));
  }
  {
    DTensor x = randu({2, 3, 4, 5}, rng);
    DTensor sf = randu({2, 3, 4}, rng);
    DTensor st = randu({2, 3, 5}, rng);
    out.push_back(run_case(
        "broadcast recalibration + concat/slice/transpose",
        check_inputs(
            [](Tape<double>& t, std::vector<Var>& v) {
              Var y = t.mul_bct(t.mul_bcf(v[0], v[1]), v[2]);
              Var cat = t.concat_last(t.axis_pool(y, Axis::time), t.axis_pool(y, Axis::frequency));
              Var sl = t.slice_last(t.transpose12(cat), 1, 2);
              return t.sum_all(t.activation(sl, ActKind::sigmoid));
            },
            {&x, &sf, &st}, 1e-4, 2)));
  }
  {
    DTensor z = randu({3, 4}, rng, -2.0, 2.0);
    DTensor y({3, 4});
    std::uniform_int_distribution<int> coin(0, 1);
    for (auto& v : y.data) v = coin(rng);
    out.push_back(run_case(
        "binary cross-entropy on logits",
        check_inputs(
            [&](Tape<double>& t, std::vector<Var>& v) { return t.bce_logits_mean(v[0], y); },
            {&z}, 1e-4, 2)));
  }
  return out;
}

std::vector<GradcheckCase> gradcheck_blocks() {
  std::vector<GradcheckCase> out;
  out.push_back(run_case("dynamic IR block (stride 1, CA, Dy-ReLU pos 2)",
                         check_block(small_spec(), 104, Mode::train)));
  {
    BlockSpec s = small_spec();
    s.stride = 2;
    s.c_out = 6;
    out.push_back(run_case("dynamic IR block (stride 2 transition)",
                           check_block(s, 101, Mode::train)));
  }
  {
    BlockSpec s = small_spec();
    s.attention = AttentionKind::se;
    s.dyrelu_pos = {true, true, true};
    s.conv = {ConvKind::standard, ConvKind::dynamic, ConvKind::standard};
    out.push_back(run_case("dynamic IR block (all Dy-ReLU positions, SE)",
                           check_block(s, 116, Mode::train)));
  }
  out.push_back(run_case("dynamic IR block (inference statistics)",
                         check_block(small_spec(), 106, Mode::eval)));
  return out;
}

std::vector<GradcheckCase> gradcheck_loss() {
  std::vector<GradcheckCase> out;
  std::mt19937 rng(7);
  DTensor zs = randu({3, 4}, rng, -2.0, 2.0);
  DTensor zt = randu({3, 4}, rng, -2.0, 2.0);
  DTensor y({3, 4});
  std::uniform_int_distribution<int> coin(0, 1);
  for (auto& v : y.data) v = coin(rng);

  DTensor grad;
  {
    Tape<double> tape;
    Var z = tape.input(zs);
    tape.backward(kd_loss(tape, z, y, &zt, 0.1));
    grad = tape.grad(z);
  }
  auto f = [&]() {
    Tape<double> tape;
    return tape.value(kd_loss(tape, tape.input(zs), y, &zt, 0.1)).item();
  };
  auto res = finite_diff_gradcheck(f, {{"z_s", &zs, &grad}}, 1e-6);
  out.push_back(run_case("kd_loss (lambda = 0.1)", res.max_rel_err));
  return out;
}

}  // namespace dymn
