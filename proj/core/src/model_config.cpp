#include "dymn/model.hpp"

#include <sstream>

namespace dymn {

std::string placement_to_string(Placement p) {
  switch (p) {
    case Placement::all: return "all";
    case Placement::first5: return "first5";
    case Placement::mid5: return "mid5";
    case Placement::last5: return "last5";
    case Placement::replace_se: return "replace_se";
    case Placement::none: return "none";
  }
  return "all";
}

Placement placement_from_string(const std::string& s) {
  if (s == "all") return Placement::all;
  if (s == "first5") return Placement::first5;
  if (s == "mid5") return Placement::mid5;
  if (s == "last5") return Placement::last5;
  if (s == "replace_se" || s == "replace-se") return Placement::replace_se;
  if (s == "none") return Placement::none;
  throw ConfigError("unknown dynamic placement: " + s);
}

namespace {

std::string conv_kinds_to_string(const std::array<ConvKind, 3>& kinds) {
  std::string s;
  for (int i = 0; i < 3; ++i) {
    if (i) s += ",";
    s += kinds[static_cast<std::size_t>(i)] == ConvKind::dynamic ? "dynamic" : "static";
  }
  return s;
}

std::array<ConvKind, 3> conv_kinds_from_string(const std::string& s) {
  std::array<ConvKind, 3> kinds{};
  std::istringstream is(s);
  std::string tok;
  int i = 0;
  while (std::getline(is, tok, ',') && i < 3) {
    if (tok == "dynamic")
      kinds[static_cast<std::size_t>(i)] = ConvKind::dynamic;
    else if (tok == "static")
      kinds[static_cast<std::size_t>(i)] = ConvKind::standard;
    else
      throw ConfigError("conv kind must be 'static' or 'dynamic', got " + tok);
    ++i;
  }
  if (i != 3) throw ConfigError("conv_kinds needs exactly three comma-separated entries");
  return kinds;
}

std::string positions_to_string(const std::array<bool, 3>& pos) {
  std::string s;
  for (int i = 0; i < 3; ++i)
    if (pos[static_cast<std::size_t>(i)]) {
      if (!s.empty()) s += ",";
      s += std::to_string(i + 1);
    }
  return s.empty() ? "none" : s;
}

std::array<bool, 3> positions_from_string(const std::string& s) {
  std::array<bool, 3> pos{false, false, false};
  if (s == "none") return pos;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    const int p = std::stoi(tok);
    if (p < 1 || p > 3) throw ConfigError("Dy-ReLU position must be 1..3, got " + tok);
    pos[static_cast<std::size_t>(p - 1)] = true;
  }
  return pos;
}

std::string attention_to_string(AttentionKind a) {
  switch (a) {
    case AttentionKind::none: return "none";
    case AttentionKind::se: return "se";
    case AttentionKind::ca: return "ca";
    case AttentionKind::srm: return "srm";
    case AttentionKind::cbam: return "cbam";
    case AttentionKind::gc: return "gc";
    case AttentionKind::ta: return "ta";
    case AttentionKind::grn: return "grn";
  }
  return "ca";
}

AttentionKind attention_from_string(const std::string& s) {
  if (s == "none") return AttentionKind::none;
  if (s == "se") return AttentionKind::se;
  if (s == "ca") return AttentionKind::ca;
  if (s == "srm") return AttentionKind::srm;
  if (s == "cbam") return AttentionKind::cbam;
  if (s == "gc") return AttentionKind::gc;
  if (s == "ta") return AttentionKind::ta;
  if (s == "grn") return AttentionKind::grn;
  throw ConfigError("unknown attention kind: " + s);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

KvFile ModelConfig::to_kv() const {
  KvFile kv;
  kv.set("alpha", fmt_double(alpha));
  kv.set("n_classes", std::to_string(n_classes));
  kv.set("in_freq", std::to_string(in_freq));
  kv.set("placement", placement_to_string(placement));
  kv.set("n_kernels", std::to_string(n_kernels));
  kv.set("n_mappings", std::to_string(n_mappings));
  kv.set("context_reduction", std::to_string(context_reduction));
  kv.set("h_min_base", fmt_double(h_min_base));
  kv.set("h_max_base", fmt_double(h_max_base));
  kv.set("dropout", fmt_double(dropout));
  kv.set("lambda_a", fmt_double(lambda_a));
  kv.set("lambda_b", fmt_double(lambda_b));
  kv.set("dyrelu_positions", positions_to_string(dyrelu_pos));
  kv.set("conv_kinds", conv_kinds_to_string(dyn_conv));
  kv.set("attention", attention_to_string(dyn_attention));
  return kv;
}

ModelConfig ModelConfig::from_kv(const KvFile& kv) {
  ModelConfig cfg;
  cfg.alpha = kv.get("alpha", 1.0);
  cfg.n_classes = kv.get("n_classes", 527);
  cfg.in_freq = kv.get("in_freq", 128);
  cfg.placement = placement_from_string(kv.get("placement", std::string("all")));
  cfg.n_kernels = kv.get("n_kernels", 4);
  cfg.n_mappings = kv.get("n_mappings", 2);
  cfg.context_reduction = kv.get("context_reduction", 4);
  cfg.h_min_base = kv.get("h_min_base", 32.0);
  cfg.h_max_base = kv.get("h_max_base", 128.0);
  cfg.dropout = kv.get("dropout", 0.2);
  cfg.lambda_a = kv.get("lambda_a", 1.0);
  cfg.lambda_b = kv.get("lambda_b", 0.5);
  cfg.dyrelu_pos = positions_from_string(kv.get("dyrelu_positions", std::string("2")));
  cfg.dyn_conv = conv_kinds_from_string(
      kv.get("conv_kinds", std::string("dynamic,dynamic,dynamic")));
  cfg.dyn_attention = attention_from_string(kv.get("attention", std::string("ca")));
  cfg.finalize();
  return cfg;
}

}  // namespace dymn
