#pragma once

// Reverse-mode autodiff over the kernels in ops.hpp. A Tape records an eager
// op sequence; backward replays it in reverse creation order. Leaf gradients
// (inputs and externally bound parameters) accumulate across backward calls
// until reset; interior gradients are scratch per call.

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "dymn/ops.hpp"
#include "dymn/tensor.hpp"

namespace dymn {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
 public:
  // When set, forward ops record the minimum distance of any evaluation point
  // to a non-differentiable kink (ReLU at 0, hardswish at +-3, Dy-ReLU mapping
  // crossings). Gradient checks use it to certify local smoothness.
  double* kink_watch = nullptr;

  Var input(TensorT<T> v) {
    Node n;
    n.value = std::move(v);
    n.is_leaf = true;
    return push(std::move(n));
  }

  Var constant(TensorT<T> v) {
    Node n;
    n.value = std::move(v);
    n.is_leaf = true;
    n.needs_grad = false;
    return push(std::move(n));
  }

  // Leaf whose value lives outside the tape and whose gradient accumulates
  // into an external buffer (a parameter store entry).
  Var param(const TensorT<T>* value, TensorT<T>* grad_sink) {
    Node n;
    n.ext_value = value;
    n.ext_grad = grad_sink;
    n.is_leaf = true;
    return push(std::move(n));
  }

  const TensorT<T>& value(Var v) const { return node(v).val(); }
  TensorT<T>& value_mut(Var v) {
    Node& n = node(v);
    if (n.ext_value) throw StateError("cannot mutate an externally bound value");
    return n.value;
  }

  const TensorT<T>& grad(Var v) const {
    const Node& n = node(v);
    const TensorT<T>& g = n.ext_grad ? *n.ext_grad : n.grad;
    if (g.data.empty()) throw StateError("gradient not computed; run backward first");
    return g;
  }

  void backward(Var root) { backward(root, TensorT<T>::scalar(T(1))); }

  void backward(Var root, const TensorT<T>& seed) {
    if (nodes_.empty()) throw StateError("backward before any forward op was recorded");
    Node& r = node(root);
    check_shape(seed.shape == r.val().shape, "backward: seed shape must match root shape");
    for (auto& n : nodes_)
      if (!n.is_leaf) n.grad = TensorT<T>();
    accum(root, seed);
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.backprop && !n.grad.data.empty()) n.backprop(*this, n);
    }
  }

  void zero_grad() {
    for (auto& n : nodes_)
      if (n.is_leaf && !n.ext_grad) n.grad = TensorT<T>();
  }

  std::size_t size() const { return nodes_.size(); }

  // ---- ops ----

  Var conv2d(Var x, Var w, Var b, Conv2dGeom g) {
    const TensorT<T>* bias = b.valid() ? &value(b) : nullptr;
    Node n;
    n.value = conv2d_fwd(value(x), value(w), bias, g);
    n.backprop = [x, w, b, g](Tape& t, Node& self) {
      TensorT<T>* gx = t.wants_grad(x) ? &t.grad_buf(x) : nullptr;
      TensorT<T>* gw = t.wants_grad(w) ? &t.grad_buf(w) : nullptr;
      TensorT<T>* gb = b.valid() && t.wants_grad(b) ? &t.grad_buf(b) : nullptr;
      conv2d_bwd(t.value(x), t.value(w), g, self.grad, gx, gw, gb);
    };
    return push(std::move(n));
  }

  // Per-sample convolution. Kernels for all samples arrive flattened as a
  // rank-4 tensor (B*C_out) x Cg x kF x kT; bmix is B x C_out or invalid.
  Var conv2d_batched_kernels(Var x, Var wmix, Var bmix, int batch, Conv2dGeom g) {
    const TensorT<T>& xv = value(x);
    const TensorT<T>& wv = value(wmix);
    check_shape(xv.dim(0) == batch && wv.dim(0) % batch == 0,
                "conv2d_batched_kernels: batch mismatch");
    const int c_out = wv.dim(0) / batch;
    TensorT<T> sample_w({c_out, wv.dim(1), wv.dim(2), wv.dim(3)});
    TensorT<T> sample_x({1, xv.dim(1), xv.dim(2), xv.dim(3)});
    TensorT<T> y;
    for (int b = 0; b < batch; ++b) {
      copy_sample(xv, b, sample_x);
      copy_kernel_slice(wv, b, c_out, sample_w);
      std::optional<TensorT<T>> bias;
      if (bmix.valid()) {
        const TensorT<T>& bv = value(bmix);
        bias.emplace(Shape{c_out});
        for (int c = 0; c < c_out; ++c) (*bias)[c] = bv.at2(b, c);
      }
      TensorT<T> yb = conv2d_fwd(sample_x, sample_w, bias ? &*bias : nullptr, g);
      if (b == 0) y = TensorT<T>({batch, yb.dim(1), yb.dim(2), yb.dim(3)});
      std::copy(yb.data.begin(), yb.data.end(),
                y.data.begin() + static_cast<std::size_t>(b) * yb.size());
    }
    Node n;
    n.value = std::move(y);
    n.backprop = [x, wmix, bmix, batch, g, c_out](Tape& t, Node& self) {
      const TensorT<T>& xv = t.value(x);
      const TensorT<T>& wv = t.value(wmix);
      TensorT<T>* gx = t.wants_grad(x) ? &t.grad_buf(x) : nullptr;
      TensorT<T>* gw = t.wants_grad(wmix) ? &t.grad_buf(wmix) : nullptr;
      TensorT<T>* gb = bmix.valid() && t.wants_grad(bmix) ? &t.grad_buf(bmix) : nullptr;
      TensorT<T> sample_x({1, xv.dim(1), xv.dim(2), xv.dim(3)});
      TensorT<T> sample_w({c_out, wv.dim(1), wv.dim(2), wv.dim(3)});
      TensorT<T> sample_gy({1, self.grad.dim(1), self.grad.dim(2), self.grad.dim(3)});
      const std::int64_t ysz = sample_gy.size();
      for (int b = 0; b < batch; ++b) {
        copy_sample(xv, b, sample_x);
        copy_kernel_slice(wv, b, c_out, sample_w);
        std::copy(self.grad.data.begin() + static_cast<std::size_t>(b) * ysz,
                  self.grad.data.begin() + static_cast<std::size_t>(b + 1) * ysz,
                  sample_gy.data.begin());
        TensorT<T> gxs, gws, gbs;
        if (gx) gxs = TensorT<T>(sample_x.shape);
        if (gw) gws = TensorT<T>(sample_w.shape);
        if (gb) gbs = TensorT<T>({c_out});
        conv2d_bwd(sample_x, sample_w, g, sample_gy, gx ? &gxs : nullptr, gw ? &gws : nullptr,
                   gb ? &gbs : nullptr);
        if (gx) {
          T* dst = &gx->at4(b, 0, 0, 0);
          for (std::int64_t i = 0; i < gxs.size(); ++i) dst[i] += gxs[i];
        }
        if (gw) {
          T* dst = &gw->data[static_cast<std::size_t>(b) * c_out * wv.dim(1) * wv.dim(2) *
                             wv.dim(3)];
          for (std::int64_t i = 0; i < gws.size(); ++i) dst[i] += gws[i];
        }
        if (gb)
          for (int c = 0; c < c_out; ++c) gb->at2(b, c) += gbs[c];
      }
    };
    return push(std::move(n));
  }

  // y[b, :] = sum_k alpha[b, k] * stack[k, :]. stack rank >= 2 with leading K.
  Var mix(Var alpha, Var stack) {
    const TensorT<T>& av = value(alpha);
    const TensorT<T>& sv = value(stack);
    check_shape(av.rank() == 2, "mix: alpha must be B x K");
    const int B = av.dim(0), K = av.dim(1);
    check_shape(sv.dim(0) % K == 0, "mix: stack leading extent must be a multiple of K");
    const std::int64_t D = sv.size() / K;
    Shape out_shape = sv.shape;
    out_shape[0] = B * (sv.dim(0) / K);
    TensorT<T> y(out_shape);
    for (int b = 0; b < B; ++b) {
      T* yr = &y.data[static_cast<std::size_t>(b) * D];
      for (int k = 0; k < K; ++k) {
        const T a = av.at2(b, k);
        if (a == T(0)) continue;
        const T* sr = &sv.data[static_cast<std::size_t>(k) * D];
        for (std::int64_t i = 0; i < D; ++i) yr[i] += a * sr[i];
      }
    }
    Node n;
    n.value = std::move(y);
    n.backprop = [alpha, stack, B, K, D](Tape& t, Node& self) {
      const TensorT<T>& av = t.value(alpha);
      const TensorT<T>& sv = t.value(stack);
      TensorT<T>* ga = t.wants_grad(alpha) ? &t.grad_buf(alpha) : nullptr;
      TensorT<T>* gs = t.wants_grad(stack) ? &t.grad_buf(stack) : nullptr;
      for (int b = 0; b < B; ++b) {
        const T* gyr = &self.grad.data[static_cast<std::size_t>(b) * D];
        for (int k = 0; k < K; ++k) {
          const T* sr = &sv.data[static_cast<std::size_t>(k) * D];
          if (ga) {
            T acc = 0;
            for (std::int64_t i = 0; i < D; ++i) acc += gyr[i] * sr[i];
            ga->at2(b, k) += acc;
          }
          if (gs) {
            const T a = av.at2(b, k);
            T* gsr = &gs->data[static_cast<std::size_t>(k) * D];
            for (std::int64_t i = 0; i < D; ++i) gsr[i] += a * gyr[i];
          }
        }
      }
    };
    return push(std::move(n));
  }

  struct BnTrainOut {
    Var y;
    TensorT<T> mean, var;
  };

  // Training-mode batch norm: statistics over (batch, spatial) per channel.
  BnTrainOut batch_norm_train(Var x, Var gamma, Var beta, double eps) {
    const TensorT<T>& xv = value(x);
    TensorT<T> mean, var;
    batch_stats(xv, mean, var);
    TensorT<T> inv_std({mean.dim(0)});
    for (std::int64_t c = 0; c < mean.size(); ++c)
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[c]) + eps));
    Node n;
    n.value = batch_norm_affine(xv, mean, var, value(gamma), value(beta), eps);
    TensorT<T> mean_c = mean, inv_c = inv_std;
    n.backprop = [x, gamma, beta, mean_c, inv_c](Tape& t, Node& self) {
      const TensorT<T>& xv = t.value(x);
      const TensorT<T>& gv = t.value(gamma);
      const int B = xv.dim(0), C = xv.dim(1);
      const std::int64_t inner = xv.size() / (static_cast<std::int64_t>(B) * C);
      const std::int64_t N = static_cast<std::int64_t>(B) * inner;
      TensorT<T>* gx = t.wants_grad(x) ? &t.grad_buf(x) : nullptr;
      TensorT<T>* gg = t.wants_grad(gamma) ? &t.grad_buf(gamma) : nullptr;
      TensorT<T>* gb = t.wants_grad(beta) ? &t.grad_buf(beta) : nullptr;
      for (int c = 0; c < C; ++c) {
        double sum_gy = 0, sum_gy_xhat = 0;
        for (int b = 0; b < B; ++b) {
          const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * inner;
          for (std::int64_t i = 0; i < inner; ++i) {
            const double gy = self.grad[base + i];
            const double xhat = (xv[base + i] - mean_c[c]) * inv_c[c];
            sum_gy += gy;
            sum_gy_xhat += gy * xhat;
          }
        }
        if (gg) (*gg)[c] += static_cast<T>(sum_gy_xhat);
        if (gb) (*gb)[c] += static_cast<T>(sum_gy);
        if (gx) {
          const double k = static_cast<double>(gv[c]) * inv_c[c] / static_cast<double>(N);
          for (int b = 0; b < B; ++b) {
            const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * inner;
            for (std::int64_t i = 0; i < inner; ++i) {
              const double xhat = (xv[base + i] - mean_c[c]) * inv_c[c];
              (*gx)[base + i] += static_cast<T>(
                  k * (static_cast<double>(N) * self.grad[base + i] - sum_gy -
                       xhat * sum_gy_xhat));
            }
          }
        }
      }
    };
    BnTrainOut out;
    out.mean = std::move(mean);
    out.var = std::move(var);
    out.y = push(std::move(n));
    return out;
  }

  Var batch_norm_eval(Var x, Var gamma, Var beta, const TensorT<T>& mean, const TensorT<T>& var,
                      double eps) {
    Node n;
    n.value = batch_norm_affine(value(x), mean, var, value(gamma), value(beta), eps);
    TensorT<T> inv_std({mean.dim(0)});
    for (std::int64_t c = 0; c < mean.size(); ++c)
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[c]) + eps));
    TensorT<T> mean_c = mean;
    n.backprop = [x, gamma, beta, mean_c, inv_std](Tape& t, Node& self) {
      const TensorT<T>& xv = t.value(x);
      const TensorT<T>& gv = t.value(gamma);
      const int B = xv.dim(0), C = xv.dim(1);
      const std::int64_t inner = xv.size() / (static_cast<std::int64_t>(B) * C);
      TensorT<T>* gx = t.wants_grad(x) ? &t.grad_buf(x) : nullptr;
      TensorT<T>* gg = t.wants_grad(gamma) ? &t.grad_buf(gamma) : nullptr;
      TensorT<T>* gb = t.wants_grad(beta) ? &t.grad_buf(beta) : nullptr;
      for (int c = 0; c < C; ++c) {
        const T scale = gv[c] * inv_std[c];
        double sum_gy = 0, sum_gy_xhat = 0;
        for (int b = 0; b < B; ++b) {
          const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * inner;
          for (std::int64_t i = 0; i < inner; ++i) {
            const T gy = self.grad[base + i];
            sum_gy += gy;
            sum_gy_xhat += gy * (xv[base + i] - mean_c[c]) * inv_std[c];
            if (gx) (*gx)[base + i] += gy * scale;
          }
        }
        if (gg) (*gg)[c] += static_cast<T>(sum_gy_xhat);
        if (gb) (*gb)[c] += static_cast<T>(sum_gy);
      }
    };
    return push(std::move(n));
  }

  Var activation(Var x, ActKind k) {
    if (kink_watch && k != ActKind::sigmoid) {
      const TensorT<T>& xv = value(x);
      for (std::int64_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        const double d = k == ActKind::relu ? std::abs(v) : std::abs(std::abs(v) - 3.0);
        *kink_watch = std::min(*kink_watch, d);
      }
    }
    Node n;
    n.value = activation_fwd(value(x), k);
    n.backprop = [x, k](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      const TensorT<T>& xv = t.value(x);
      TensorT<T>& gx = t.grad_buf(x);
      for (std::int64_t i = 0; i < xv.size(); ++i)
        gx[i] += self.grad[i] * act_grad(k, xv[i]);
    };
    return push(std::move(n));
  }

  Var avg_pool2d(Var x, Pool2dGeom g) {
    Node n;
    n.value = avg_pool2d_fwd(value(x), g);
    n.backprop = [x, g](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      avg_pool2d_bwd(t.value(x), g, self.grad, t.grad_buf(x));
    };
    return push(std::move(n));
  }

  // Sequence pooling over the trailing axis of a B x C x L tensor.
  Var avg_pool_seq(Var x, int k, int stride, int pad) {
    const TensorT<T>& xv = value(x);
    check_shape(xv.rank() == 3, "avg_pool_seq: input must be rank 3");
    Var x4 = reshape(x, {xv.dim(0), xv.dim(1), xv.dim(2), 1});
    Pool2dGeom g;
    g.k_f = k;
    g.stride_f = stride;
    g.pad_f = pad;
    Var y4 = avg_pool2d(x4, g);
    const TensorT<T>& yv = value(y4);
    return reshape(y4, {yv.dim(0), yv.dim(1), yv.dim(2)});
  }

  Var axis_pool(Var x, Axis over) {
    Node n;
    n.value = axis_pool_fwd(value(x), over);
    n.backprop = [x, over](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      const TensorT<T>& xv = t.value(x);
      TensorT<T>& gx = t.grad_buf(x);
      const int B = xv.dim(0), C = xv.dim(1), F = xv.dim(2), L = xv.dim(3);
      if (over == Axis::time) {
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c)
            for (int f = 0; f < F; ++f) {
              const T gv = self.grad.at3(b, c, f) / static_cast<T>(L);
              T* row = &gx.at4(b, c, f, 0);
              for (int t2 = 0; t2 < L; ++t2) row[t2] += gv;
            }
      } else {
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c)
            for (int t2 = 0; t2 < L; ++t2) {
              const T gv = self.grad.at3(b, c, t2) / static_cast<T>(F);
              for (int f = 0; f < F; ++f) gx.at4(b, c, f, t2) += gv;
            }
      }
    };
    return push(std::move(n));
  }

  // Mean over both spatial axes: B x C x F x T -> B x C.
  Var global_pool(Var x) {
    const TensorT<T>& xv = value(x);
    check_shape(xv.rank() == 4, "global_pool: input must be rank 4");
    const int B = xv.dim(0), C = xv.dim(1);
    const std::int64_t inner = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
    TensorT<T> y({B, C});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const T* row = &xv.at4(b, c, 0, 0);
        T acc = 0;
        for (std::int64_t i = 0; i < inner; ++i) acc += row[i];
        y.at2(b, c) = acc / static_cast<T>(inner);
      }
    Node n;
    n.value = std::move(y);
    n.backprop = [x, inner](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      TensorT<T>& gx = t.grad_buf(x);
      const int B = self.grad.dim(0), C = self.grad.dim(1);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const T gv = self.grad.at2(b, c) / static_cast<T>(inner);
          T* row = &gx.at4(b, c, 0, 0);
          for (std::int64_t i = 0; i < inner; ++i) row[i] += gv;
        }
    };
    return push(std::move(n));
  }

  Var linear(Var x, Var w, Var b) {
    const TensorT<T>* bias = b.valid() ? &value(b) : nullptr;
    Node n;
    n.value = linear_fwd(value(x), value(w), bias);
    n.backprop = [x, w, b](Tape& t, Node& self) {
      TensorT<T>* gx = t.wants_grad(x) ? &t.grad_buf(x) : nullptr;
      TensorT<T>* gw = t.wants_grad(w) ? &t.grad_buf(w) : nullptr;
      TensorT<T>* gb = b.valid() && t.wants_grad(b) ? &t.grad_buf(b) : nullptr;
      linear_bwd(t.value(x), t.value(w), self.grad, gx, gw, gb);
    };
    return push(std::move(n));
  }

  Var transpose12(Var x) {
    const TensorT<T>& xv = value(x);
    check_shape(xv.rank() == 3, "transpose12: input must be rank 3");
    const int B = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
    TensorT<T> y({B, L, C});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int l = 0; l < L; ++l) y.at3(b, l, c) = xv.at3(b, c, l);
    Node n;
    n.value = std::move(y);
    n.backprop = [x, B, C, L](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      TensorT<T>& gx = t.grad_buf(x);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int l = 0; l < L; ++l) gx.at3(b, c, l) += self.grad.at3(b, l, c);
    };
    return push(std::move(n));
  }

  Var concat_last(Var a, Var b) {
    const TensorT<T>& av = value(a);
    const TensorT<T>& bv = value(b);
    check_shape(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) &&
                    av.dim(1) == bv.dim(1),
                "concat_last: leading extents must match");
    const int B = av.dim(0), C = av.dim(1), La = av.dim(2), Lb = bv.dim(2);
    TensorT<T> y({B, C, La + Lb});
    for (int i = 0; i < B; ++i)
      for (int c = 0; c < C; ++c) {
        std::copy(&av.at3(i, c, 0), &av.at3(i, c, 0) + La, &y.at3(i, c, 0));
        std::copy(&bv.at3(i, c, 0), &bv.at3(i, c, 0) + Lb, &y.at3(i, c, La));
      }
    Node n;
    n.value = std::move(y);
    n.backprop = [a, b, B, C, La, Lb](Tape& t, Node& self) {
      if (t.wants_grad(a)) {
        TensorT<T>& ga = t.grad_buf(a);
        for (int i = 0; i < B; ++i)
          for (int c = 0; c < C; ++c)
            for (int l = 0; l < La; ++l) ga.at3(i, c, l) += self.grad.at3(i, c, l);
      }
      if (t.wants_grad(b)) {
        TensorT<T>& gb = t.grad_buf(b);
        for (int i = 0; i < B; ++i)
          for (int c = 0; c < C; ++c)
            for (int l = 0; l < Lb; ++l) gb.at3(i, c, l) += self.grad.at3(i, c, La + l);
      }
    };
    return push(std::move(n));
  }

  Var slice_last(Var x, int start, int len) {
    const TensorT<T>& xv = value(x);
    check_shape(xv.rank() == 3 && start >= 0 && start + len <= xv.dim(2),
                "slice_last: range out of bounds");
    const int B = xv.dim(0), C = xv.dim(1);
    TensorT<T> y({B, C, len});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        std::copy(&xv.at3(b, c, start), &xv.at3(b, c, start) + len, &y.at3(b, c, 0));
    Node n;
    n.value = std::move(y);
    n.backprop = [x, start, len, B, C](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      TensorT<T>& gx = t.grad_buf(x);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int l = 0; l < len; ++l) gx.at3(b, c, start + l) += self.grad.at3(b, c, l);
    };
    return push(std::move(n));
  }

  Var reshape(Var x, Shape s) {
    const TensorT<T>& xv = value(x);
    check_shape(numel(s) == xv.size(), "reshape: element count mismatch");
    Node n;
    n.value = TensorT<T>(s, xv.data);
    n.backprop = [x](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      TensorT<T>& gx = t.grad_buf(x);
      for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    };
    return push(std::move(n));
  }

  // Mean over the trailing axis of a rank-3 tensor: B x H x L -> B x H.
  Var mean_last(Var x) {
    const TensorT<T>& xv = value(x);
    check_shape(xv.rank() == 3, "mean_last: input must be rank 3");
    const int B = xv.dim(0), H = xv.dim(1), L = xv.dim(2);
    TensorT<T> y({B, H});
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) {
        T acc = 0;
        const T* row = &xv.at3(b, h, 0);
        for (int l = 0; l < L; ++l) acc += row[l];
        y.at2(b, h) = acc / static_cast<T>(L);
      }
    Node n;
    n.value = std::move(y);
    n.backprop = [x, B, H, L](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      TensorT<T>& gx = t.grad_buf(x);
      for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h) {
          const T gv = self.grad.at2(b, h) / static_cast<T>(L);
          T* row = &gx.at3(b, h, 0);
          for (int l = 0; l < L; ++l) row[l] += gv;
        }
    };
    return push(std::move(n));
  }

  Var add(Var a, Var b) {
    const TensorT<T>& av = value(a);
    const TensorT<T>& bv = value(b);
    check_shape(av.shape == bv.shape, "add: shapes must match");
    TensorT<T> y(av.shape);
    for (std::int64_t i = 0; i < av.size(); ++i) y[i] = av[i] + bv[i];
    Node n;
    n.value = std::move(y);
    n.backprop = [a, b](Tape& t, Node& self) {
      if (t.wants_grad(a)) {
        TensorT<T>& ga = t.grad_buf(a);
        for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
      }
      if (t.wants_grad(b)) {
        TensorT<T>& gb = t.grad_buf(b);
        for (std::int64_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i];
      }
    };
    return push(std::move(n));
  }

  Var mul(Var a, Var b) {
    const TensorT<T>& av = value(a);
    const TensorT<T>& bv = value(b);
    check_shape(av.shape == bv.shape, "mul: shapes must match");
    TensorT<T> y(av.shape);
    for (std::int64_t i = 0; i < av.size(); ++i) y[i] = av[i] * bv[i];
    Node n;
    n.value = std::move(y);
    n.backprop = [a, b](Tape& t, Node& self) {
      const TensorT<T>& av = t.value(a);
      const TensorT<T>& bv = t.value(b);
      if (t.wants_grad(a)) {
        TensorT<T>& ga = t.grad_buf(a);
        for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bv[i];
      }
      if (t.wants_grad(b)) {
        TensorT<T>& gb = t.grad_buf(b);
        for (std::int64_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * av[i];
      }
    };
    return push(std::move(n));
  }

  // Broadcast multiplies used for attention recalibration.
  Var mul_bc(Var x, Var s) { return mul_broadcast(x, s, 2); }
  Var mul_bcf(Var x, Var s) { return mul_broadcast(x, s, 3); }   // s: B x C x F
  Var mul_bct(Var x, Var s) { return mul_broadcast(x, s, 4); }   // s: B x C x T

  Var scale(Var x, T c) {
    const TensorT<T>& xv = value(x);
    TensorT<T> y(xv.shape);
    for (std::int64_t i = 0; i < xv.size(); ++i) y[i] = xv[i] * c;
    Node n;
    n.value = std::move(y);
    n.backprop = [x, c](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      TensorT<T>& gx = t.grad_buf(x);
      for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * c;
    };
    return push(std::move(n));
  }

  Var sum_all(Var x) {
    const TensorT<T>& xv = value(x);
    T acc = 0;
    for (std::int64_t i = 0; i < xv.size(); ++i) acc += xv[i];
    Node n;
    n.value = TensorT<T>::scalar(acc);
    n.backprop = [x](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      TensorT<T>& gx = t.grad_buf(x);
      const T gv = self.grad[0];
      for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += gv;
    };
    return push(std::move(n));
  }

  Var mean_all(Var x) {
    const std::int64_t nels = value(x).size();
    return scale(sum_all(x), T(1) / static_cast<T>(nels));
  }

  Var softmax_temp(Var z, double tau) {
    Node n;
    n.value = softmax_temp_fwd(value(z), tau);
    n.backprop = [z, tau](Tape& t, Node& self) {
      if (!t.wants_grad(z)) return;
      TensorT<T>& gz = t.grad_buf(z);
      const int B = self.value.dim(0), K = self.value.dim(1);
      for (int b = 0; b < B; ++b) {
        T dot = 0;
        for (int k = 0; k < K; ++k) dot += self.grad.at2(b, k) * self.value.at2(b, k);
        for (int k = 0; k < K; ++k)
          gz.at2(b, k) += self.value.at2(b, k) * (self.grad.at2(b, k) - dot) /
                          static_cast<T>(tau);
      }
    };
    return push(std::move(n));
  }

  // Dy-ReLU coefficient normalization: raw predictor output u (B x 2*M*C) ->
  // coefficients (B x 2M x C); rows [0, M) are slopes a^m, rows [M, 2M) are
  // intercepts b^m. a^m = a_init^m + la*(2*sigmoid(u)-1), b^m likewise with lb.
  // a_init = (1, 0, ...), b_init = 0, so zero predictors reduce to plain ReLU.
  Var dyrelu_normalize(Var u, int M, int C, T la, T lb) {
    const TensorT<T>& uv = value(u);
    check_shape(uv.rank() == 2 && uv.dim(1) == 2 * M * C, "dyrelu_normalize: bad input shape");
    const int B = uv.dim(0);
    TensorT<T> y({B, 2 * M, C});
    for (int b = 0; b < B; ++b)
      for (int r = 0; r < 2 * M; ++r) {
        const T init = (r == 0) ? T(1) : T(0);
        const T lam = (r < M) ? la : lb;
        for (int c = 0; c < C; ++c) {
          const T s = act_eval(ActKind::sigmoid, uv.at2(b, r * C + c));
          y.at3(b, r, c) = init + lam * (T(2) * s - T(1));
        }
      }
    Node n;
    n.value = std::move(y);
    n.backprop = [u, M, C, la, lb, B](Tape& t, Node& self) {
      if (!t.wants_grad(u)) return;
      const TensorT<T>& uv = t.value(u);
      TensorT<T>& gu = t.grad_buf(u);
      for (int b = 0; b < B; ++b)
        for (int r = 0; r < 2 * M; ++r) {
          const T lam = (r < M) ? la : lb;
          for (int c = 0; c < C; ++c) {
            const T s = act_eval(ActKind::sigmoid, uv.at2(b, r * C + c));
            gu.at2(b, r * C + c) += self.grad.at3(b, r, c) * lam * T(2) * s * (T(1) - s);
          }
        }
    };
    return push(std::move(n));
  }

  // y = max_m(a^m * x + b^m), coefficients spatially shared and channel-wise.
  // Ties pick the lowest mapping index for the subgradient.
  Var dyrelu(Var x, Var coef) {
    const TensorT<T>& xv = value(x);
    const TensorT<T>& cv = value(coef);
    check_shape(xv.rank() == 4 && cv.rank() == 3, "dyrelu: bad ranks");
    const int B = xv.dim(0), C = xv.dim(1), F = xv.dim(2), L = xv.dim(3);
    const int M = cv.dim(1) / 2;
    check_shape(cv.dim(0) == B && cv.dim(2) == C, "dyrelu: coefficient shape mismatch");
    TensorT<T> y(xv.shape);
    std::vector<std::uint8_t> argmax(static_cast<std::size_t>(xv.size()));
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const T* xr = &xv.at4(b, c, 0, 0);
        T* yr = &y.at4(b, c, 0, 0);
        std::uint8_t* ar = &argmax[((static_cast<std::size_t>(b) * C + c) * F) * L];
        for (int i = 0; i < F * L; ++i) {
          T best = cv.at3(b, 0, c) * xr[i] + cv.at3(b, M, c);
          std::uint8_t bm = 0;
          T second = std::numeric_limits<T>::lowest();
          for (int m = 1; m < M; ++m) {
            const T v = cv.at3(b, m, c) * xr[i] + cv.at3(b, M + m, c);
            if (v > best) {
              second = best;
              best = v;
              bm = static_cast<std::uint8_t>(m);
            } else {
              second = std::max(second, v);
            }
          }
          if (kink_watch && M > 1)
            *kink_watch = std::min(*kink_watch, static_cast<double>(best - second));
          yr[i] = best;
          ar[i] = bm;
        }
      }
    Node n;
    n.value = std::move(y);
    n.backprop = [x, coef, argmax, B, C, F, L, M](Tape& t, Node& self) {
      const TensorT<T>& xv = t.value(x);
      const TensorT<T>& cv = t.value(coef);
      TensorT<T>* gx = t.wants_grad(x) ? &t.grad_buf(x) : nullptr;
      TensorT<T>* gc = t.wants_grad(coef) ? &t.grad_buf(coef) : nullptr;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const T* xr = &xv.at4(b, c, 0, 0);
          const T* gyr = &self.grad.at4(b, c, 0, 0);
          const std::uint8_t* ar = &argmax[((static_cast<std::size_t>(b) * C + c) * F) * L];
          for (int i = 0; i < F * L; ++i) {
            const int m = ar[i];
            if (gx) (*gx).at4(b, c, i / L, i % L) += gyr[i] * cv.at3(b, m, c);
            if (gc) {
              gc->at3(b, m, c) += gyr[i] * xr[i];
              gc->at3(b, M + m, c) += gyr[i];
            }
          }
        }
    };
    return push(std::move(n));
  }

  // Mean-reduced binary cross-entropy on logits against constant targets,
  // in the log-sum-exp form that is stable for large |z|.
  Var bce_logits_mean(Var z, TensorT<T> targets) {
    const TensorT<T>& zv = value(z);
    check_shape(zv.shape == targets.shape, "bce_logits_mean: shape mismatch");
    const std::int64_t N = zv.size();
    double acc = 0;
    for (std::int64_t i = 0; i < N; ++i) {
      const double zz = zv[i], tt = targets[i];
      acc += std::max(zz, 0.0) - zz * tt + std::log1p(std::exp(-std::abs(zz)));
    }
    Node n;
    n.value = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(N)));
    n.backprop = [z, targets, N](Tape& t, Node& self) {
      if (!t.wants_grad(z)) return;
      const TensorT<T>& zv = t.value(z);
      TensorT<T>& gz = t.grad_buf(z);
      const T gv = self.grad[0] / static_cast<T>(N);
      for (std::int64_t i = 0; i < N; ++i)
        gz[i] += gv * (act_eval(ActKind::sigmoid, zv[i]) - targets[i]);
    };
    return push(std::move(n));
  }

  // Inverted dropout; identity when rate == 0.
  Var dropout(Var x, double rate, std::mt19937& rng) {
    if (rate <= 0) return x;
    if (rate >= 1) throw ConfigError("dropout rate must be < 1");
    const TensorT<T>& xv = value(x);
    TensorT<T> mask(xv.shape);
    std::bernoulli_distribution keep(1.0 - rate);
    const T scl = static_cast<T>(1.0 / (1.0 - rate));
    for (std::int64_t i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? scl : T(0);
    Var m = constant(std::move(mask));
    return mul(x, m);
  }

 private:
  struct Node {
    TensorT<T> value;
    TensorT<T> grad;
    const TensorT<T>* ext_value = nullptr;
    TensorT<T>* ext_grad = nullptr;
    bool is_leaf = false;
    bool needs_grad = true;
    std::function<void(Tape&, Node&)> backprop;

    const TensorT<T>& val() const { return ext_value ? *ext_value : value; }
  };

  std::vector<Node> nodes_;

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(Var v) {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw StateError("invalid tape variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw StateError("invalid tape variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  bool wants_grad(Var v) { return node(v).needs_grad; }

  TensorT<T>& grad_buf(Var v) {
    Node& n = node(v);
    if (n.ext_grad) return *n.ext_grad;
    if (n.grad.data.empty()) n.grad = TensorT<T>(n.val().shape);
    return n.grad;
  }

  void accum(Var v, const TensorT<T>& g) {
    TensorT<T>& buf = grad_buf(v);
    for (std::int64_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }

  Var mul_broadcast(Var x, Var s, int mode) {
    const TensorT<T>& xv = value(x);
    const TensorT<T>& sv = value(s);
    check_shape(xv.rank() == 4, "broadcast mul: x must be rank 4");
    const int B = xv.dim(0), C = xv.dim(1), F = xv.dim(2), L = xv.dim(3);
    if (mode == 2)
      check_shape(sv.rank() == 2 && sv.dim(0) == B && sv.dim(1) == C, "mul_bc: bad scale shape");
    if (mode == 3)
      check_shape(sv.rank() == 3 && sv.dim(0) == B && sv.dim(1) == C && sv.dim(2) == F,
                  "mul_bcf: bad scale shape");
    if (mode == 4)
      check_shape(sv.rank() == 3 && sv.dim(0) == B && sv.dim(1) == C && sv.dim(2) == L,
                  "mul_bct: bad scale shape");
    TensorT<T> y(xv.shape);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int f = 0; f < F; ++f) {
          const T* xr = &xv.at4(b, c, f, 0);
          T* yr = &y.at4(b, c, f, 0);
          for (int t2 = 0; t2 < L; ++t2) {
            const T scl = mode == 2 ? sv.at2(b, c) : (mode == 3 ? sv.at3(b, c, f)
                                                                : sv.at3(b, c, t2));
            yr[t2] = xr[t2] * scl;
          }
        }
    Node n;
    n.value = std::move(y);
    n.backprop = [x, s, mode, B, C, F, L](Tape& t, Node& self) {
      const TensorT<T>& xv = t.value(x);
      const TensorT<T>& sv = t.value(s);
      TensorT<T>* gx = t.wants_grad(x) ? &t.grad_buf(x) : nullptr;
      TensorT<T>* gs = t.wants_grad(s) ? &t.grad_buf(s) : nullptr;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int f = 0; f < F; ++f)
            for (int t2 = 0; t2 < L; ++t2) {
              const T scl = mode == 2 ? sv.at2(b, c) : (mode == 3 ? sv.at3(b, c, f)
                                                                  : sv.at3(b, c, t2));
              const T gy = self.grad.at4(b, c, f, t2);
              if (gx) gx->at4(b, c, f, t2) += gy * scl;
              if (gs) {
                const T gv = gy * xv.at4(b, c, f, t2);
                if (mode == 2)
                  gs->at2(b, c) += gv;
                else if (mode == 3)
                  gs->at3(b, c, f) += gv;
                else
                  gs->at3(b, c, t2) += gv;
              }
            }
    };
    return push(std::move(n));
  }

  static void copy_sample(const TensorT<T>& x, int b, TensorT<T>& out) {
    const std::int64_t sz = out.size();
    std::copy(x.data.begin() + static_cast<std::size_t>(b) * sz,
              x.data.begin() + static_cast<std::size_t>(b + 1) * sz, out.data.begin());
  }

  static void copy_kernel_slice(const TensorT<T>& wstack, int b, int c_out, TensorT<T>& out) {
    const std::int64_t sz = out.size();
    std::copy(wstack.data.begin() + static_cast<std::size_t>(b) * sz,
              wstack.data.begin() + static_cast<std::size_t>(b + 1) * sz, out.data.begin());
  }
};

}  // namespace dymn
