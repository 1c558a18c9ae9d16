#include "dymn/profiler.hpp"

#include <iomanip>
#include <sstream>

namespace dymn {

namespace {

struct Walker {
  MacReport report;
  BlockSubtotal* current_block = nullptr;

  MacEntry& add(const std::string& name, const std::string& kind) {
    report.layers.push_back({name, kind, 0, 0, 0, 0});
    return report.layers.back();
  }

  void conv(const std::string& name, int c_out, int c_in, int k, int groups, int f_out,
            int t_out) {
    MacEntry& e = add(name, "conv");
    const std::int64_t kernel_params =
        static_cast<std::int64_t>(c_out) * (c_in / groups) * k * k;
    e.macs = kernel_params * f_out * t_out;
    e.params = kernel_params;
  }

  void dyconv(const std::string& name, int c_out, int c_in, int k, int groups, int f_out,
              int t_out, int K, int H) {
    MacEntry& e = add(name, "dyconv");
    const std::int64_t kernel_params =
        static_cast<std::int64_t>(c_out) * (c_in / groups) * k * k;
    e.macs = kernel_params * f_out * t_out;       // single conv with the mixed kernel
    e.dyn_macs = K * kernel_params + static_cast<std::int64_t>(H) * K;  // aggregation + predictor
    e.params = K * kernel_params + static_cast<std::int64_t>(K) * H + K;
    e.elem_ops = K;  // softmax over the kernel attention logits
  }

  void bn(const std::string& name, int c, std::int64_t positions) {
    MacEntry& e = add(name, "batch_norm");
    e.params = 2LL * c;
    e.elem_ops = positions;
  }

  void act(const std::string& name, std::int64_t positions) {
    add(name, "activation").elem_ops = positions;
  }

  void linear(const std::string& name, int out, int in, std::int64_t positions, bool bias) {
    MacEntry& e = add(name, "linear");
    e.macs = static_cast<std::int64_t>(out) * in * positions;
    e.params = static_cast<std::int64_t>(out) * in + (bias ? out : 0);
  }

  void finish_entry_into_block() {
    if (!current_block) return;
    const MacEntry& e = report.layers.back();
    current_block->static_macs += e.macs;
    current_block->dyn_macs += e.dyn_macs;
    current_block->params += e.params;
  }
};

}  // namespace

MacReport mac_report(const ModelConfig& cfg, int frames) {
  if (frames < 1) throw ConfigError("frames must be >= 1");
  Walker w;
  int f = conv_out_extent(cfg.in_freq, 1, 3, 2);
  int t = conv_out_extent(frames, 1, 3, 2);

  auto tally = [&w]() { w.finish_entry_into_block(); };

  w.conv("stem.conv", cfg.stem_channels, 1, 3, 1, f, t);
  w.bn("stem.bn", cfg.stem_channels, static_cast<std::int64_t>(cfg.stem_channels) * f * t);
  w.act("stem.act", static_cast<std::int64_t>(cfg.stem_channels) * f * t);

  for (int i = 0; i < 15; ++i) {
    const BlockSpec& s = cfg.blocks[static_cast<std::size_t>(i)];
    const std::string p = "blocks." + std::to_string(i + 1);
    w.report.blocks.push_back({i + 1, 0, 0, 0});
    w.current_block = &w.report.blocks.back();

    const int f_out = conv_out_extent(f, s.kernel / 2, s.kernel, s.stride);
    const int t_out = conv_out_extent(t, s.kernel / 2, s.kernel, s.stride);
    const int H = s.context_dim;
    const std::int64_t in_pos = static_cast<std::int64_t>(f) * t;
    const std::int64_t out_pos = static_cast<std::int64_t>(f_out) * t_out;

    if (s.needs_context()) {
      MacEntry& e = w.add(p + ".cgm", "cgm");
      e.dyn_macs = static_cast<std::int64_t>(s.c_in) * H * (t + f);
      e.params = static_cast<std::int64_t>(H) * s.c_in + 2LL * H;  // linear + batch norm
      e.elem_ops = static_cast<std::int64_t>(H) * (t + f) * 2 + in_pos * 2;  // bn+act, pools
      tally();
    }

    auto conv_at = [&](int pos, const char* nm, int c_out, int c_in, int k, int groups,
                       int fo, int to) {
      if (s.conv[static_cast<std::size_t>(pos)] == ConvKind::dynamic)
        w.dyconv(p + "." + nm, c_out, c_in, k, groups, fo, to, s.n_kernels, H);
      else
        w.conv(p + "." + nm + ".conv", c_out, c_in, k, groups, fo, to);
      tally();
    };

    auto dyrelu_at = [&](int pos, int channels, std::int64_t positions) {
      MacEntry& e = w.add(p + ".dyrelu" + std::to_string(pos + 1), "dyrelu");
      e.dyn_macs = static_cast<std::int64_t>(s.n_mappings) * channels * positions +
                   static_cast<std::int64_t>(H) * 2 * s.n_mappings * channels;
      e.params = (static_cast<std::int64_t>(H) + 1) * 2 * s.n_mappings * channels;
      e.elem_ops = positions * channels;  // the max reduction
      tally();
    };

    if (s.has_expand()) {
      conv_at(0, "exp", s.c_exp, s.c_in, 1, 1, f, t);
      w.bn(p + ".exp.bn", s.c_exp, static_cast<std::int64_t>(s.c_exp) * in_pos);
      tally();
      if (s.dyrelu_pos[0])
        dyrelu_at(0, s.c_exp, in_pos);
      else {
        w.act(p + ".act1", static_cast<std::int64_t>(s.c_exp) * in_pos);
        tally();
      }
    }

    conv_at(1, "dw", s.c_exp, s.c_exp, s.kernel, s.c_exp, f_out, t_out);
    w.bn(p + ".dw.bn", s.c_exp, static_cast<std::int64_t>(s.c_exp) * out_pos);
    tally();
    if (s.dyrelu_pos[1])
      dyrelu_at(1, s.c_exp, out_pos);
    else {
      w.act(p + ".act2", static_cast<std::int64_t>(s.c_exp) * out_pos);
      tally();
    }

    if (s.attention == AttentionKind::ca) {
      MacEntry& e = w.add(p + ".ca", "ca");
      e.dyn_macs = static_cast<std::int64_t>(H) * s.c_exp * (t_out + f_out);
      e.params = (static_cast<std::int64_t>(H) + 1) * s.c_exp;
      e.elem_ops = static_cast<std::int64_t>(s.c_exp) * (t_out + f_out) +
                   2 * static_cast<std::int64_t>(s.c_exp) * out_pos;  // sigmoid + recalibration
      tally();
    } else if (s.attention == AttentionKind::se) {
      const int sq = std::max(1, s.c_exp / 4);
      MacEntry& e = w.add(p + ".se", "se");
      e.macs = 2LL * s.c_exp * sq;  // squeeze-excite linears at one position
      e.params = (static_cast<std::int64_t>(s.c_exp) + 1) * sq +
                 (static_cast<std::int64_t>(sq) + 1) * s.c_exp;
      e.elem_ops = static_cast<std::int64_t>(s.c_exp) * out_pos * 2 + s.c_exp + sq;
      tally();
    }

    conv_at(2, "proj", s.c_out, s.c_exp, 1, 1, f_out, t_out);
    w.bn(p + ".proj.bn", s.c_out, static_cast<std::int64_t>(s.c_out) * out_pos);
    tally();
    if (s.dyrelu_pos[2]) dyrelu_at(2, s.c_out, out_pos);
    if (s.use_residual()) {
      w.act(p + ".residual", static_cast<std::int64_t>(s.c_out) * out_pos);
      tally();
    }

    w.current_block = nullptr;
    f = f_out;
    t = t_out;
  }

  const int c_last = cfg.blocks.back().c_out;
  w.conv("head.conv", cfg.head_channels, c_last, 1, 1, f, t);
  w.bn("head.bn", cfg.head_channels, static_cast<std::int64_t>(cfg.head_channels) * f * t);
  w.act("head.act", static_cast<std::int64_t>(cfg.head_channels) * f * t);
  w.add("head.pool", "pool").elem_ops = static_cast<std::int64_t>(cfg.head_channels) * f * t;
  w.linear("head.fc1", cfg.head_dim, cfg.head_channels, 1, true);
  w.linear("head.fc2", cfg.n_classes, cfg.head_dim, 1, true);

  for (const MacEntry& e : w.report.layers) {
    w.report.total_static_macs += e.macs;
    w.report.total_dyn_macs += e.dyn_macs;
    w.report.total_params += e.params;
    w.report.total_elem_ops += e.elem_ops;
  }
  w.report.total_macs = w.report.total_static_macs + w.report.total_dyn_macs;
  return w.report;
}

MacReport param_report(const ModelConfig& cfg) { return mac_report(cfg, 1000); }

std::string report_text(const MacReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "layer" << std::setw(12) << "kind" << std::right
     << std::setw(14) << "macs" << std::setw(14) << "dyn_macs" << std::setw(12) << "params"
     << std::setw(14) << "elem_ops" << "\n";
  for (const MacEntry& e : r.layers)
    os << std::left << std::setw(24) << e.name << std::setw(12) << e.kind << std::right
       << std::setw(14) << e.macs << std::setw(14) << e.dyn_macs << std::setw(12) << e.params
       << std::setw(14) << e.elem_ops << "\n";
  os << "\nper-block subtotals (static MACs / dynamic-overhead MACs / overhead %):\n";
  for (const BlockSubtotal& b : r.blocks) {
    const double pct =
        b.static_macs > 0 ? 100.0 * static_cast<double>(b.dyn_macs) / b.static_macs : 0.0;
    os << "  block " << std::setw(2) << b.index << "  " << std::setw(12) << b.static_macs
       << "  " << std::setw(10) << b.dyn_macs << "  " << std::fixed << std::setprecision(2)
       << pct << "%\n";
    os.unsetf(std::ios::fixed);
  }
  os << "\ntotal MACs " << r.total_macs << " (static " << r.total_static_macs
     << ", dynamic overhead " << r.total_dyn_macs << ")\n";
  os << "total params " << r.total_params << "\n";
  os << "element-ops (excluded from MAC totals) " << r.total_elem_ops << "\n";
  return os.str();
}

std::string report_csv(const MacReport& r) {
  std::ostringstream os;
  os << "layer,kind,macs,params,dyn_overhead\n";
  for (const MacEntry& e : r.layers)
    os << e.name << "," << e.kind << "," << e.macs << "," << e.params << "," << e.dyn_macs
       << "\n";
  for (const BlockSubtotal& b : r.blocks)
    os << "blocks." << b.index << ",block_subtotal," << b.static_macs << "," << b.params << ","
       << b.dyn_macs << "\n";
  os << "total,total," << r.total_static_macs << "," << r.total_params << ","
     << r.total_dyn_macs << "\n";
  return os.str();
}

}  // namespace dymn
