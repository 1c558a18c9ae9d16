#pragma once

// DyMN network assembly: MobileNetV3-Large topology (16-channel stride-2 stem,
// 15 bottleneck blocks, 960 -> pool -> 1280 head), channel counts scaled by a
// width multiplier and rounded to multiples of 8, with dynamic IR blocks at
// the configured placements.

#include <array>
#include <string>
#include <vector>

#include "dymn/blocks.hpp"
#include "dymn/kvfile.hpp"
#include "dymn/params.hpp"

namespace dymn {

enum class Placement { all, first5, mid5, last5, replace_se, none };

std::string placement_to_string(Placement p);
Placement placement_from_string(const std::string& s);

// MobileNet channel rounding.
inline int make_divisible(double v, int divisor = 8) {
  int n = std::max(divisor, static_cast<int>(v + divisor / 2.0) / divisor * divisor);
  if (n < 0.9 * v) n += divisor;
  return n;
}

struct BneckBase {
  int kernel;
  int exp;  // expanded width at alpha = 1
  int out;
  bool se;
  Act act;
  int stride;
};

// MobileNetV3-Large bottleneck table.
inline constexpr std::array<BneckBase, 15> kMnLargeTable{{
    {3, 16, 16, false, Act::relu, 1},
    {3, 64, 24, false, Act::relu, 2},
    {3, 72, 24, false, Act::relu, 1},
    {5, 72, 40, true, Act::relu, 2},
    {5, 120, 40, true, Act::relu, 1},
    {5, 120, 40, true, Act::relu, 1},
    {3, 240, 80, false, Act::hardswish, 2},
    {3, 200, 80, false, Act::hardswish, 1},
    {3, 184, 80, false, Act::hardswish, 1},
    {3, 184, 80, false, Act::hardswish, 1},
    {3, 480, 112, true, Act::hardswish, 1},
    {3, 672, 112, true, Act::hardswish, 1},
    {5, 672, 160, true, Act::hardswish, 2},
    {5, 960, 160, true, Act::hardswish, 1},
    {5, 960, 160, true, Act::hardswish, 1},
}};

struct ModelConfig {
  double alpha = 1.0;
  int n_classes = 527;
  int in_freq = 128;
  Placement placement = Placement::all;
  int n_kernels = 4;          // K
  int n_mappings = 2;         // M
  int context_reduction = 4;  // r
  double h_min_base = 32.0;   // scaled by alpha
  double h_max_base = 128.0;
  double dropout = 0.2;
  double lambda_a = 1.0;
  double lambda_b = 0.5;
  std::array<bool, 3> dyrelu_pos{false, true, false};
  std::array<ConvKind, 3> dyn_conv{ConvKind::dynamic, ConvKind::dynamic, ConvKind::dynamic};
  AttentionKind dyn_attention = AttentionKind::ca;

  // derived by finalize()
  int stem_channels = 0;
  int head_channels = 0;  // 1x1 conv width before pooling
  int head_dim = 0;       // pooled linear width
  std::vector<BlockSpec> blocks;

  static ModelConfig make(double alpha, int n_classes = 527,
                          Placement placement = Placement::all) {
    ModelConfig cfg;
    cfg.alpha = alpha;
    cfg.n_classes = n_classes;
    cfg.placement = placement;
    cfg.finalize();
    return cfg;
  }

  int context_dim_for(int c_exp) const {
    const int h_min = std::max(1, static_cast<int>(std::lround(h_min_base * alpha)));
    const int h_max = std::max(h_min, static_cast<int>(std::lround(h_max_base * alpha)));
    const int h = static_cast<int>(
        std::lround(static_cast<double>(c_exp) / context_reduction));
    return std::clamp(h, h_min, h_max);
  }

  bool block_is_dynamic(int i) const {
    switch (placement) {
      case Placement::all:
        return true;
      case Placement::first5:
        return i < 5;
      case Placement::mid5:
        return i >= 5 && i < 10;
      case Placement::last5:
        return i >= 10;
      case Placement::replace_se:
        return kMnLargeTable[static_cast<std::size_t>(i)].se;
      case Placement::none:
        return false;
    }
    return false;
  }

  void finalize() {
    if (alpha <= 0) throw ConfigError("width multiplier must be positive");
    if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
    stem_channels = make_divisible(16 * alpha);
    head_channels = make_divisible(960 * alpha);
    head_dim = make_divisible(1280 * alpha);
    blocks.clear();
    int c_in = stem_channels;
    for (int i = 0; i < 15; ++i) {
      const BneckBase& base = kMnLargeTable[static_cast<std::size_t>(i)];
      BlockSpec s;
      s.kernel = base.kernel;
      s.c_in = c_in;
      s.c_exp = std::max(make_divisible(base.exp * alpha), c_in);
      s.c_out = make_divisible(base.out * alpha);
      s.stride = base.stride;
      s.act = base.act;
      s.n_kernels = n_kernels;
      s.n_mappings = n_mappings;
      s.lambda_a = lambda_a;
      s.lambda_b = lambda_b;
      if (block_is_dynamic(i)) {
        s.attention = dyn_attention;
        s.dyrelu_pos = dyrelu_pos;
        s.conv = dyn_conv;
        s.context_dim = context_dim_for(s.c_exp);
      } else {
        s.attention = base.se ? AttentionKind::se : AttentionKind::none;
      }
      s.validate();
      blocks.push_back(s);
      c_in = s.c_out;
    }
  }

  KvFile to_kv() const;
  static ModelConfig from_kv(const KvFile& kv);
};

template <typename T>
struct Model {
  ModelConfig cfg;
  ParamStore<T> store;
  Conv2dLayer<T> stem_conv;
  BatchNormLayer<T> stem_bn;
  struct AnyBlock {
    std::optional<StaticIrBlock<T>> fixed;
    std::optional<IrBlock<T>> dynamic;
  };
  std::vector<AnyBlock> blocks;
  Conv2dLayer<T> head_conv;
  BatchNormLayer<T> head_bn;
  LinearLayer<T> head_fc1, head_fc2;

  Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  static Model build(const ModelConfig& cfg, std::mt19937& rng) {
    if (cfg.blocks.size() != 15) throw ConfigError("model config must define exactly 15 blocks");
    Model m;
    m.cfg = cfg;
    m.stem_conv = Conv2dLayer<T>::create(m.store, "stem.conv", cfg.stem_channels, 1, 3, 2, 1,
                                         rng);
    m.stem_bn = BatchNormLayer<T>::create(m.store, "stem.bn", cfg.stem_channels);
    for (int i = 0; i < 15; ++i) {
      const BlockSpec& spec = cfg.blocks[static_cast<std::size_t>(i)];
      const std::string prefix = "blocks." + std::to_string(i + 1);
      AnyBlock b;
      if (spec.needs_context())
        b.dynamic = IrBlock<T>::create(m.store, prefix, spec, rng);
      else
        b.fixed = StaticIrBlock<T>::create(m.store, prefix, spec, rng);
      m.blocks.push_back(std::move(b));
    }
    m.head_conv = Conv2dLayer<T>::create(m.store, "head.conv", cfg.head_channels,
                                         cfg.blocks.back().c_out, 1, 1, 1, rng);
    m.head_bn = BatchNormLayer<T>::create(m.store, "head.bn", cfg.head_channels);
    m.head_fc1 = LinearLayer<T>::create(m.store, "head.fc1", cfg.head_dim, cfg.head_channels,
                                        true, false, rng);
    m.head_fc2 = LinearLayer<T>::create(m.store, "head.fc2", cfg.n_classes, cfg.head_dim, true,
                                        false, rng);
    return m;
  }

  Var forward(RunContext<T>& ctx, Var x) const {
    const TensorT<T>& xv = ctx.tape.value(x);
    check_shape(xv.rank() == 4 && xv.dim(1) == 1,
                "model input must be B x 1 x F x T, got " + shape_str(xv.shape));
    check_shape(xv.dim(2) == cfg.in_freq,
                "model expects " + std::to_string(cfg.in_freq) + " frequency bins, got " +
                    std::to_string(xv.dim(2)));
    if (ctx.mode == Mode::eval) ctx.tau = 1.0;
    Var h = stem_conv.forward(ctx, x);
    h = stem_bn.forward(ctx, h);
    h = ctx.tape.activation(h, ActKind::hardswish);
    for (int i = 0; i < 15; ++i) {
      ctx.block_index = i + 1;
      const AnyBlock& b = blocks[static_cast<std::size_t>(i)];
      h = b.dynamic ? b.dynamic->forward(ctx, h) : b.fixed->forward(ctx, h);
    }
    ctx.block_index = 0;
    h = head_conv.forward(ctx, h);
    h = head_bn.forward(ctx, h);
    h = ctx.tape.activation(h, ActKind::hardswish);
    h = ctx.tape.global_pool(h);
    h = head_fc1.forward(ctx, h);
    h = ctx.tape.activation(h, ActKind::hardswish);
    if (ctx.mode == Mode::train && ctx.rng) h = ctx.tape.dropout(h, cfg.dropout, *ctx.rng);
    return head_fc2.forward(ctx, h);
  }

  // Convenience single-shot forward; eval mode fixes tau at 1.
  TensorT<T> logits(const TensorT<T>& x, Mode mode = Mode::eval, double tau = 1.0,
                    ForwardHooks<T>* hooks = nullptr, std::mt19937* rng = nullptr) {
    Tape<T> tape;
    RunContext<T> ctx{tape, mode, tau, hooks, rng, 0};
    Var out = forward(ctx, tape.input(x));
    return tape.value(out);
  }
};

}  // namespace dymn
