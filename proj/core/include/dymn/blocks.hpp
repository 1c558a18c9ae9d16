#pragma once

// Inverted residual blocks and their dynamic components: the Context
// Generation Module (CGM) pools the block input over each spatial axis and
// embeds both sequences; Dy-ReLU, Dy-Conv kernel attention and Coordinate
// Attention all consume that shared context.

#include <array>
#include <optional>
#include <string>

#include "dymn/params.hpp"
#include "dymn/tape.hpp"

namespace dymn {

enum class Act { relu, hardswish };
enum class ConvKind { standard, dynamic };
enum class AttentionKind { none, se, ca, srm, cbam, gc, ta, grn };

inline ActKind to_act_kind(Act a) {
  return a == Act::relu ? ActKind::relu : ActKind::hardswish;
}

enum class Mode { train, eval };

template <typename T>
struct ForwardHooks {
  // Mutates normalized Dy-ReLU coefficients (B x 2M x C); pos is 1..3.
  std::function<void(int block, int pos, TensorT<T>& coef)> dyrelu_coef;
  // Mutates kernel attention weights (B x K); pos is the conv position 1..3.
  std::function<void(int block, int pos, TensorT<T>& alpha)> dyconv_alpha;
  // Mutates CA weights; filling `joint` (shaped like the feature map) replaces
  // the factorized recalibration with an explicit elementwise map.
  std::function<void(int block, TensorT<T>& s_f, TensorT<T>& s_t,
                     std::optional<TensorT<T>>& joint)>
      ca_weights;
  // Observes Dy-ReLU evaluations.
  std::function<void(int block, int pos, const TensorT<T>& pre, const TensorT<T>& post,
                     const TensorT<T>& coef)>
      dyrelu_capture;
};

template <typename T>
struct RunContext {
  Tape<T>& tape;
  Mode mode = Mode::eval;
  double tau = 1.0;
  ForwardHooks<T>* hooks = nullptr;
  std::mt19937* rng = nullptr;
  int block_index = 0;
};

struct BlockSpec {
  int kernel = 3;
  int c_in = 0, c_exp = 0, c_out = 0;
  int stride = 1;
  AttentionKind attention = AttentionKind::se;
  Act act = Act::relu;  // base nonlinearity at positions 1 and 2
  std::array<bool, 3> dyrelu_pos{false, false, false};
  std::array<ConvKind, 3> conv{ConvKind::standard, ConvKind::standard, ConvKind::standard};
  int context_dim = 0;  // H; required > 0 when any dynamic component is present
  int n_kernels = 4;    // K
  int n_mappings = 2;   // M
  double lambda_a = 1.0;
  double lambda_b = 0.5;

  bool use_residual() const { return stride == 1 && c_in == c_out; }
  // The reference network family skips the expansion conv when it would be a
  // same-width pointwise map.
  bool has_expand() const { return c_exp != c_in; }
  bool any_dyconv() const {
    return conv[0] == ConvKind::dynamic || conv[1] == ConvKind::dynamic ||
           conv[2] == ConvKind::dynamic;
  }
  bool any_dyrelu() const { return dyrelu_pos[0] || dyrelu_pos[1] || dyrelu_pos[2]; }
  bool needs_context() const {
    return any_dyconv() || any_dyrelu() || attention == AttentionKind::ca;
  }

  void validate() const {
    if (kernel != 3 && kernel != 5) throw ConfigError("block kernel must be 3 or 5");
    if (c_in < 1 || c_out < 1 || c_exp < c_in)
      throw ConfigError("block channels must satisfy c_exp >= c_in >= 1, c_out >= 1");
    if (stride != 1 && stride != 2) throw ConfigError("block stride must be 1 or 2");
    if (n_kernels < 1 || n_mappings < 1) throw ConfigError("K and M must be >= 1");
    switch (attention) {
      case AttentionKind::none:
      case AttentionKind::se:
      case AttentionKind::ca:
        break;
      default:
        throw ConfigError("attention variant is an extension point, not implemented");
    }
    if (needs_context() && context_dim < 1)
      throw ConfigError("dynamic block components require context_dim > 0");
  }
};

// ---- layers ----

template <typename T>
struct LinearLayer {
  using Entry = typename ParamStore<T>::Entry;
  Entry* w = nullptr;
  Entry* b = nullptr;

  static LinearLayer create(ParamStore<T>& store, const std::string& prefix, int out, int in,
                            bool bias, bool zero_init, std::mt19937& rng) {
    LinearLayer l;
    l.w = store.add(prefix + ".w", zero_init ? TensorT<T>::zeros({out, in})
                                             : kaiming_uniform<T>({out, in}, in, rng));
    if (bias) l.b = store.add(prefix + ".b", TensorT<T>::zeros({out}));
    return l;
  }

  Var forward(RunContext<T>& ctx, Var x) const {
    Var wv = ctx.tape.param(&w->value, &w->grad);
    Var bv = b ? ctx.tape.param(&b->value, &b->grad) : Var{};
    return ctx.tape.linear(x, wv, bv);
  }
};

template <typename T>
struct BatchNormLayer {
  using Entry = typename ParamStore<T>::Entry;
  Entry* gamma = nullptr;
  Entry* beta = nullptr;
  Entry* running_mean = nullptr;
  Entry* running_var = nullptr;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormLayer create(ParamStore<T>& store, const std::string& prefix, int c) {
    BatchNormLayer l;
    l.gamma = store.add(prefix + ".gamma", TensorT<T>::ones({c}));
    l.beta = store.add(prefix + ".beta", TensorT<T>::zeros({c}));
    l.running_mean = store.add(prefix + ".running_mean", TensorT<T>::zeros({c}), false);
    l.running_var = store.add(prefix + ".running_var", TensorT<T>::ones({c}), false);
    return l;
  }

  Var forward(RunContext<T>& ctx, Var x) const {
    Var g = ctx.tape.param(&gamma->value, &gamma->grad);
    Var b = ctx.tape.param(&beta->value, &beta->grad);
    if (ctx.mode == Mode::eval)
      return ctx.tape.batch_norm_eval(x, g, b, running_mean->value, running_var->value, eps);
    auto out = ctx.tape.batch_norm_train(x, g, b, eps);
    const TensorT<T>& xv = ctx.tape.value(x);
    const auto n = static_cast<double>(xv.size() / xv.dim(1));
    const double unbias = n > 1 ? n / (n - 1.0) : 1.0;
    for (std::int64_t c = 0; c < out.mean.size(); ++c) {
      running_mean->value[c] = static_cast<T>((1.0 - momentum) * running_mean->value[c] +
                                              momentum * out.mean[c]);
      running_var->value[c] = static_cast<T>((1.0 - momentum) * running_var->value[c] +
                                             momentum * out.var[c] * unbias);
    }
    return out.y;
  }
};

template <typename T>
struct Conv2dLayer {
  using Entry = typename ParamStore<T>::Entry;
  Entry* w = nullptr;
  Conv2dGeom geom;

  // Bias-free convolution (batch norm always follows in this network family).
  static Conv2dLayer create(ParamStore<T>& store, const std::string& prefix, int c_out, int c_in,
                            int k, int stride, int groups, std::mt19937& rng) {
    Conv2dLayer l;
    const int cg = c_in / groups;
    const std::int64_t fan_in = static_cast<std::int64_t>(cg) * k * k;
    l.w = store.add(prefix + ".w", kaiming_uniform<T>({c_out, cg, k, k}, fan_in, rng));
    l.geom.stride_f = l.geom.stride_t = stride;
    l.geom.pad_f = l.geom.pad_t = k / 2;
    l.geom.groups = groups;
    return l;
  }

  Var forward(RunContext<T>& ctx, Var x) const {
    Var wv = ctx.tape.param(&w->value, &w->grad);
    return ctx.tape.conv2d(x, wv, Var{}, geom);
  }
};

// Dynamic convolution: K parallel kernels aggregated per sample with
// softmax(temperature) attention predicted from the pooled context.
template <typename T>
struct DyConvLayer {
  using Entry = typename ParamStore<T>::Entry;
  Entry* kernels = nullptr;  // (K * C_out) x Cg x kF x kT
  Entry* biases = nullptr;   // K x C_out, optional
  LinearLayer<T> att;        // K x H, zero-init so attention starts uniform
  Conv2dGeom geom;
  int n_kernels = 4;
  int c_out = 0;

  static DyConvLayer create(ParamStore<T>& store, const std::string& prefix, int K, int c_out,
                            int c_in, int k, int stride, int groups, int context_dim,
                            bool bias, std::mt19937& rng) {
    DyConvLayer l;
    const int cg = c_in / groups;
    const std::int64_t fan_in = static_cast<std::int64_t>(cg) * k * k;
    l.kernels = store.add(prefix + ".kernels",
                          kaiming_uniform<T>({K * c_out, cg, k, k}, fan_in, rng));
    if (bias) l.biases = store.add(prefix + ".biases", TensorT<T>::zeros({K, c_out}));
    l.att = LinearLayer<T>::create(store, prefix + ".att", K, context_dim, true, true, rng);
    l.geom.stride_f = l.geom.stride_t = stride;
    l.geom.pad_f = l.geom.pad_t = k / 2;
    l.geom.groups = groups;
    l.n_kernels = K;
    l.c_out = c_out;
    return l;
  }

  // B x K kernel attention weights on the simplex.
  Var attention(RunContext<T>& ctx, Var pooled, int pos) const {
    Var logits = att.forward(ctx, pooled);
    Var alpha = ctx.tape.softmax_temp(logits, ctx.tau);
    if (ctx.hooks && ctx.hooks->dyconv_alpha)
      ctx.hooks->dyconv_alpha(ctx.block_index, pos, ctx.tape.value_mut(alpha));
    return alpha;
  }

  Var forward(RunContext<T>& ctx, Var x, Var alpha) const {
    const int batch = ctx.tape.value(x).dim(0);
    Var kv = ctx.tape.param(&kernels->value, &kernels->grad);
    Var wmix = ctx.tape.mix(alpha, kv);
    Var bmix;
    if (biases) {
      Var bv = ctx.tape.param(&biases->value, &biases->grad);
      bmix = ctx.tape.mix(alpha, bv);
    }
    return ctx.tape.conv2d_batched_kernels(x, wmix, bmix, batch, geom);
  }
};

// Context Generation Module: pool over each spatial axis, embed both
// sequences with one shared linear + batch norm + hardswish, split back.
template <typename T>
struct ContextModule {
  LinearLayer<T> lin;  // H x C_in, bias-free (batch norm follows)
  BatchNormLayer<T> bn;
  int H = 0;

  static ContextModule create(ParamStore<T>& store, const std::string& prefix, int c_in, int H,
                              std::mt19937& rng) {
    ContextModule m;
    m.lin = LinearLayer<T>::create(store, prefix + ".lin", H, c_in, false, false, rng);
    m.bn = BatchNormLayer<T>::create(store, prefix + ".bn", H);
    m.H = H;
    return m;
  }

  struct Out {
    Var s_t, s_f;   // B x H x T_in, B x H x F_in
    Var pooled;     // B x H, mean over the concatenated length
    int t_len = 0, f_len = 0;
  };

  Out forward(RunContext<T>& ctx, Var x) const {
    const TensorT<T>& xv = ctx.tape.value(x);
    Out out;
    out.f_len = xv.dim(2);
    out.t_len = xv.dim(3);
    Var seq_t = ctx.tape.axis_pool(x, Axis::frequency);  // B x C x T
    Var seq_f = ctx.tape.axis_pool(x, Axis::time);       // B x C x F
    Var cat = ctx.tape.concat_last(seq_t, seq_f);        // B x C x (T+F)
    Var emb = ctx.tape.transpose12(cat);
    emb = lin.forward(ctx, emb);
    emb = ctx.tape.transpose12(emb);                     // B x H x (T+F)
    emb = bn.forward(ctx, emb);
    emb = ctx.tape.activation(emb, ActKind::hardswish);
    out.s_t = ctx.tape.slice_last(emb, 0, out.t_len);
    out.s_f = ctx.tape.slice_last(emb, out.t_len, out.f_len);
    out.pooled = ctx.tape.mean_last(emb);
    return out;
  }
};

// Dy-ReLU-B: spatially shared, channel-wise coefficients for M linear
// mappings, elementwise max across the mappings.
template <typename T>
struct DyReLULayer {
  LinearLayer<T> pred;  // (2*M*C) x H, zero-init: reduces exactly to ReLU
  int M = 2;
  int C = 0;
  T lambda_a = T(1);
  T lambda_b = T(0.5);

  static DyReLULayer create(ParamStore<T>& store, const std::string& prefix, int M, int C,
                            int context_dim, double la, double lb, std::mt19937& rng) {
    DyReLULayer l;
    l.pred = LinearLayer<T>::create(store, prefix + ".pred", 2 * M * C, context_dim, true, true,
                                    rng);
    l.M = M;
    l.C = C;
    l.lambda_a = static_cast<T>(la);
    l.lambda_b = static_cast<T>(lb);
    return l;
  }

  Var coefficients(RunContext<T>& ctx, Var pooled, int pos) const {
    Var raw = pred.forward(ctx, pooled);
    Var coef = ctx.tape.dyrelu_normalize(raw, M, C, lambda_a, lambda_b);
    if (ctx.hooks && ctx.hooks->dyrelu_coef)
      ctx.hooks->dyrelu_coef(ctx.block_index, pos, ctx.tape.value_mut(coef));
    return coef;
  }

  Var apply(RunContext<T>& ctx, Var x, Var coef, int pos) const {
    Var y = ctx.tape.dyrelu(x, coef);
    if (ctx.hooks && ctx.hooks->dyrelu_capture)
      ctx.hooks->dyrelu_capture(ctx.block_index, pos, ctx.tape.value(x), ctx.tape.value(y),
                                ctx.tape.value(coef));
    return y;
  }
};

// Coordinate Attention: one shared linear maps both embedded sequences from H
// to C_exp; sigmoid turns them into channel-frequency and channel-time
// recalibration weights. Strided blocks pool the sequences (k=3, s=2) first.
template <typename T>
struct CoordAttLayer {
  LinearLayer<T> lin;  // C_exp x H, zero-init
  bool strided = false;

  static CoordAttLayer create(ParamStore<T>& store, const std::string& prefix, int c_exp,
                              int context_dim, bool strided, std::mt19937& rng) {
    CoordAttLayer l;
    l.lin = LinearLayer<T>::create(store, prefix + ".lin", c_exp, context_dim, true, true, rng);
    l.strided = strided;
    return l;
  }

  struct Weights {
    Var s_f, s_t;                       // B x C_exp x F_out, B x C_exp x T_out
    std::optional<TensorT<T>> joint;    // hook override
  };

  Var transform(RunContext<T>& ctx, Var seq) const {
    Var s = seq;
    if (strided) s = ctx.tape.avg_pool_seq(s, 3, 2, 1);
    s = ctx.tape.transpose12(s);
    s = lin.forward(ctx, s);
    s = ctx.tape.transpose12(s);
    return ctx.tape.activation(s, ActKind::sigmoid);
  }

  Weights weights(RunContext<T>& ctx, Var s_t, Var s_f) const {
    Weights w;
    w.s_f = transform(ctx, s_f);
    w.s_t = transform(ctx, s_t);
    if (ctx.hooks && ctx.hooks->ca_weights)
      ctx.hooks->ca_weights(ctx.block_index, ctx.tape.value_mut(w.s_f),
                            ctx.tape.value_mut(w.s_t), w.joint);
    return w;
  }

  Var apply(RunContext<T>& ctx, Var x, const Weights& w) const {
    if (w.joint) return ctx.tape.mul(x, ctx.tape.constant(*w.joint));
    Var y = ctx.tape.mul_bcf(x, w.s_f);
    return ctx.tape.mul_bct(y, w.s_t);
  }
};

// Squeeze-and-Excitation with reduction 4 (channel-only attention baseline).
template <typename T>
struct SELayer {
  LinearLayer<T> fc1, fc2;

  static SELayer create(ParamStore<T>& store, const std::string& prefix, int c,
                        std::mt19937& rng) {
    SELayer l;
    const int squeeze = std::max(1, c / 4);
    l.fc1 = LinearLayer<T>::create(store, prefix + ".fc1", squeeze, c, true, false, rng);
    l.fc2 = LinearLayer<T>::create(store, prefix + ".fc2", c, squeeze, true, false, rng);
    return l;
  }

  Var forward(RunContext<T>& ctx, Var x) const {
    Var s = ctx.tape.global_pool(x);
    s = ctx.tape.activation(fc1.forward(ctx, s), ActKind::relu);
    s = ctx.tape.activation(fc2.forward(ctx, s), ActKind::sigmoid);
    return ctx.tape.mul_bc(x, s);
  }
};

// Conventional inverted residual block, straight-line implementation.
template <typename T>
struct StaticIrBlock {
  BlockSpec spec;
  std::optional<Conv2dLayer<T>> expand;
  Conv2dLayer<T> depthwise;
  Conv2dLayer<T> project;
  std::optional<BatchNormLayer<T>> bn1;
  BatchNormLayer<T> bn2, bn3;
  std::optional<SELayer<T>> se;

  static StaticIrBlock create(ParamStore<T>& store, const std::string& prefix,
                              const BlockSpec& spec, std::mt19937& rng) {
    spec.validate();
    if (spec.any_dyconv() || spec.any_dyrelu() || spec.attention == AttentionKind::ca)
      throw ConfigError("StaticIrBlock cannot host dynamic components");
    StaticIrBlock b;
    b.spec = spec;
    if (spec.has_expand()) {
      b.expand = Conv2dLayer<T>::create(store, prefix + ".exp.conv", spec.c_exp, spec.c_in, 1, 1,
                                        1, rng);
      b.bn1 = BatchNormLayer<T>::create(store, prefix + ".exp.bn", spec.c_exp);
    }
    b.depthwise = Conv2dLayer<T>::create(store, prefix + ".dw.conv", spec.c_exp, spec.c_exp,
                                         spec.kernel, spec.stride, spec.c_exp, rng);
    b.bn2 = BatchNormLayer<T>::create(store, prefix + ".dw.bn", spec.c_exp);
    if (spec.attention == AttentionKind::se)
      b.se = SELayer<T>::create(store, prefix + ".se", spec.c_exp, rng);
    b.project = Conv2dLayer<T>::create(store, prefix + ".proj.conv", spec.c_out, spec.c_exp, 1, 1,
                                       1, rng);
    b.bn3 = BatchNormLayer<T>::create(store, prefix + ".proj.bn", spec.c_out);
    return b;
  }

  Var forward(RunContext<T>& ctx, Var x) const {
    const ActKind act = to_act_kind(spec.act);
    Var h = x;
    if (expand) {
      h = expand->forward(ctx, h);
      h = bn1->forward(ctx, h);
      h = ctx.tape.activation(h, act);
    }
    h = depthwise.forward(ctx, h);
    h = bn2.forward(ctx, h);
    h = ctx.tape.activation(h, act);
    if (se) h = se->forward(ctx, h);
    h = project.forward(ctx, h);
    h = bn3.forward(ctx, h);
    if (spec.use_residual()) h = ctx.tape.add(h, x);
    return h;
  }
};

// Dynamic-capable inverted residual block. In a fully static configuration it
// records exactly the same op sequence as StaticIrBlock.
template <typename T>
struct IrBlock {
  BlockSpec spec;
  std::optional<ContextModule<T>> cgm;
  std::optional<Conv2dLayer<T>> conv_static[3];
  std::optional<DyConvLayer<T>> conv_dyn[3];
  std::optional<BatchNormLayer<T>> bn[3];
  std::optional<DyReLULayer<T>> dyrelu[3];
  std::optional<CoordAttLayer<T>> ca;
  std::optional<SELayer<T>> se;

  static IrBlock create(ParamStore<T>& store, const std::string& prefix, const BlockSpec& spec,
                        std::mt19937& rng) {
    spec.validate();
    IrBlock b;
    b.spec = spec;
    if (spec.needs_context())
      b.cgm = ContextModule<T>::create(store, prefix + ".cgm", spec.c_in, spec.context_dim, rng);

    struct PosCfg {
      const char* name;
      int c_in, c_out, kernel, stride, groups;
      bool present;
    };
    const PosCfg pos[3] = {
        {"exp", spec.c_in, spec.c_exp, 1, 1, 1, spec.has_expand()},
        {"dw", spec.c_exp, spec.c_exp, spec.kernel, spec.stride, spec.c_exp, true},
        {"proj", spec.c_exp, spec.c_out, 1, 1, 1, true},
    };
    for (int i = 0; i < 3; ++i) {
      if (!pos[i].present) continue;
      const std::string p = prefix + "." + pos[i].name;
      if (spec.conv[i] == ConvKind::dynamic)
        b.conv_dyn[i] = DyConvLayer<T>::create(store, p, spec.n_kernels, pos[i].c_out,
                                               pos[i].c_in, pos[i].kernel, pos[i].stride,
                                               pos[i].groups, spec.context_dim, false, rng);
      else
        b.conv_static[i] = Conv2dLayer<T>::create(store, p + ".conv", pos[i].c_out, pos[i].c_in,
                                                  pos[i].kernel, pos[i].stride, pos[i].groups,
                                                  rng);
      b.bn[i] = BatchNormLayer<T>::create(store, p + ".bn", pos[i].c_out);
    }
    for (int i = 0; i < 3; ++i) {
      if (!spec.dyrelu_pos[i]) continue;
      if (!pos[i].present) throw ConfigError("Dy-ReLU requested at a missing conv position");
      b.dyrelu[i] = DyReLULayer<T>::create(store, prefix + ".dyrelu" + std::to_string(i + 1),
                                           spec.n_mappings, pos[i].c_out, spec.context_dim,
                                           spec.lambda_a, spec.lambda_b, rng);
    }
    if (spec.attention == AttentionKind::ca)
      b.ca = CoordAttLayer<T>::create(store, prefix + ".ca", spec.c_exp, spec.context_dim,
                                      spec.stride == 2, rng);
    else if (spec.attention == AttentionKind::se)
      b.se = SELayer<T>::create(store, prefix + ".se", spec.c_exp, rng);
    return b;
  }

  Var forward(RunContext<T>& ctx, Var x) const {
    typename ContextModule<T>::Out context;
    if (cgm) context = cgm->forward(ctx, x);

    Var h = x;
    for (int i = 0; i < 3; ++i) {
      if (!conv_static[i] && !conv_dyn[i]) continue;  // skipped expansion
      if (conv_dyn[i]) {
        Var alpha = conv_dyn[i]->attention(ctx, context.pooled, i + 1);
        h = conv_dyn[i]->forward(ctx, h, alpha);
      } else {
        h = conv_static[i]->forward(ctx, h);
      }
      h = bn[i]->forward(ctx, h);
      if (i < 2) {
        if (dyrelu[i]) {
          Var coef = dyrelu[i]->coefficients(ctx, context.pooled, i + 1);
          h = dyrelu[i]->apply(ctx, h, coef, i + 1);
        } else {
          h = ctx.tape.activation(h, to_act_kind(spec.act));
        }
      }
      if (i == 1) {
        // attention operates on the expanded map, before the final pointwise conv
        if (ca) {
          auto w = ca->weights(ctx, context.s_t, context.s_f);
          h = ca->apply(ctx, h, w);
        } else if (se) {
          h = se->forward(ctx, h);
        }
      }
    }
    // position-3 Dy-ReLU sits after the projection batch norm, before the
    // residual add
    if (dyrelu[2]) {
      Var coef = dyrelu[2]->coefficients(ctx, context.pooled, 3);
      h = dyrelu[2]->apply(ctx, h, coef, 3);
    }
    if (spec.use_residual()) h = ctx.tape.add(h, x);
    return h;
  }
};

}  // namespace dymn
