#include "dymn/inspection.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace dymn {

InspectTarget inspect_target_from_string(const std::string& s) {
  if (s == "ca") return InspectTarget::ca;
  if (s == "dyconv") return InspectTarget::dyconv;
  if (s == "dyrelu") return InspectTarget::dyrelu;
  throw ConfigError("unknown inspection target: " + s);
}

std::string inspect_target_to_string(InspectTarget t) {
  switch (t) {
    case InspectTarget::ca: return "ca";
    case InspectTarget::dyconv: return "dyconv";
    case InspectTarget::dyrelu: return "dyrelu";
  }
  return "ca";
}

InspectMethod inspect_method_from_string(const std::string& s) {
  if (s == "identity") return InspectMethod::identity;
  if (s == "context_shuffle") return InspectMethod::context_shuffle;
  if (s == "channel_shuffle") return InspectMethod::channel_shuffle;
  if (s == "spatial_shuffle") return InspectMethod::spatial_shuffle;
  if (s == "time_shuffle") return InspectMethod::time_shuffle;
  if (s == "frequency_shuffle") return InspectMethod::frequency_shuffle;
  if (s == "attention_shuffle") return InspectMethod::attention_shuffle;
  if (s == "uniform_attention") return InspectMethod::uniform_attention;
  if (s == "max_attention") return InspectMethod::max_attention;
  throw ConfigError("unknown inspection method: " + s);
}

std::string inspect_method_to_string(InspectMethod m) {
  switch (m) {
    case InspectMethod::identity: return "identity";
    case InspectMethod::context_shuffle: return "context_shuffle";
    case InspectMethod::channel_shuffle: return "channel_shuffle";
    case InspectMethod::spatial_shuffle: return "spatial_shuffle";
    case InspectMethod::time_shuffle: return "time_shuffle";
    case InspectMethod::frequency_shuffle: return "frequency_shuffle";
    case InspectMethod::attention_shuffle: return "attention_shuffle";
    case InspectMethod::uniform_attention: return "uniform_attention";
    case InspectMethod::max_attention: return "max_attention";
  }
  return "identity";
}

bool method_valid_for(InspectTarget t, InspectMethod m) {
  if (m == InspectMethod::identity || m == InspectMethod::context_shuffle) return true;
  switch (t) {
    case InspectTarget::ca:
      return m == InspectMethod::channel_shuffle || m == InspectMethod::spatial_shuffle ||
             m == InspectMethod::time_shuffle || m == InspectMethod::frequency_shuffle;
    case InspectTarget::dyconv:
      return m == InspectMethod::attention_shuffle || m == InspectMethod::uniform_attention ||
             m == InspectMethod::max_attention;
    case InspectTarget::dyrelu:
      return m == InspectMethod::channel_shuffle;
  }
  return false;
}

std::vector<int> derangement(int n, std::mt19937& rng) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  if (n < 2) return perm;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::shuffle(perm.begin(), perm.end(), rng);
    bool fixed = false;
    for (int i = 0; i < n; ++i)
      if (perm[static_cast<std::size_t>(i)] == i) {
        fixed = true;
        break;
      }
    if (!fixed) return perm;
  }
  // rotating by one is always a derangement
  std::iota(perm.begin(), perm.end(), 0);
  std::rotate(perm.begin(), perm.begin() + 1, perm.end());
  return perm;
}

namespace {

std::vector<int> identity_perm(int n) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  return p;
}

std::vector<int> shuffled(int n, std::mt19937& rng) {
  std::vector<int> p = identity_perm(n);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

// Permute the leading (batch) axis.
void permute_batch_axis(Tensor& t, const std::vector<int>& perm) {
  Tensor out(t.shape);
  const std::int64_t row = t.size() / t.dim(0);
  for (std::size_t i = 0; i < perm.size(); ++i)
    std::copy(t.data.begin() + perm[i] * row, t.data.begin() + (perm[i] + 1) * row,
              out.data.begin() + static_cast<std::int64_t>(i) * row);
  t = std::move(out);
}

// Permute the middle (channel) axis of a rank-3 tensor.
void permute_channel_axis(Tensor& t, const std::vector<int>& perm) {
  Tensor out(t.shape);
  const int B = t.dim(0), C = t.dim(1), L = t.dim(2);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int l = 0; l < L; ++l) out.at3(b, c, l) = t.at3(b, perm[static_cast<std::size_t>(c)], l);
  t = std::move(out);
}

// Permute the trailing axis of a rank-3 tensor.
void permute_last_axis(Tensor& t, const std::vector<int>& perm) {
  Tensor out(t.shape);
  const int B = t.dim(0), C = t.dim(1), L = t.dim(2);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int l = 0; l < L; ++l) out.at3(b, c, l) = t.at3(b, c, perm[static_cast<std::size_t>(l)]);
  t = std::move(out);
}

}  // namespace

InspectionProbe::InspectionProbe(const InspectionConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
  cfg_.validate();
  const InspectMethod method = cfg_.method;

  if (cfg_.target == InspectTarget::dyrelu) {
    hooks_.dyrelu_coef = [this, method](int block, int /*pos*/, Tensor& coef) {
      if (!block_selected(block)) return;
      const int B = coef.dim(0), C = coef.dim(2);
      switch (method) {
        case InspectMethod::identity:
          permute_batch_axis(coef, identity_perm(B));
          break;
        case InspectMethod::context_shuffle:
          permute_batch_axis(coef, derangement(B, rng_));
          break;
        case InspectMethod::channel_shuffle: {
          // one channel permutation shared across samples and mappings
          const std::vector<int> perm = shuffled(C, rng_);
          Tensor out(coef.shape);
          for (int b = 0; b < B; ++b)
            for (int r = 0; r < coef.dim(1); ++r)
              for (int c = 0; c < C; ++c)
                out.at3(b, r, c) = coef.at3(b, r, perm[static_cast<std::size_t>(c)]);
          coef = std::move(out);
          break;
        }
        default:
          break;
      }
    };
  }

  if (cfg_.target == InspectTarget::dyconv) {
    hooks_.dyconv_alpha = [this, method](int block, int /*pos*/, Tensor& alpha) {
      if (!block_selected(block)) return;
      const int B = alpha.dim(0), K = alpha.dim(1);
      switch (method) {
        case InspectMethod::identity:
          permute_batch_axis(alpha, identity_perm(B));
          break;
        case InspectMethod::context_shuffle:
          permute_batch_axis(alpha, derangement(B, rng_));
          break;
        case InspectMethod::attention_shuffle:
          for (int b = 0; b < B; ++b) {
            const std::vector<int> perm = shuffled(K, rng_);
            std::vector<float> row(static_cast<std::size_t>(K));
            for (int k = 0; k < K; ++k) row[static_cast<std::size_t>(k)] =
                alpha.at2(b, perm[static_cast<std::size_t>(k)]);
            for (int k = 0; k < K; ++k) alpha.at2(b, k) = row[static_cast<std::size_t>(k)];
          }
          break;
        case InspectMethod::uniform_attention:
          for (auto& v : alpha.data) v = 1.0f / static_cast<float>(K);
          break;
        case InspectMethod::max_attention:
          for (int b = 0; b < B; ++b) {
            int arg = 0;
            for (int k = 1; k < K; ++k)
              if (alpha.at2(b, k) > alpha.at2(b, arg)) arg = k;
            for (int k = 0; k < K; ++k) alpha.at2(b, k) = (k == arg) ? 1.0f : 0.0f;
          }
          break;
        default:
          break;
      }
    };
  }

  if (cfg_.target == InspectTarget::ca) {
    hooks_.ca_weights = [this, method](int block, Tensor& s_f, Tensor& s_t,
                                       std::optional<Tensor>& joint) {
      if (!block_selected(block)) return;
      const int B = s_f.dim(0), C = s_f.dim(1), F = s_f.dim(2), L = s_t.dim(2);
      switch (method) {
        case InspectMethod::identity: {
          permute_batch_axis(s_f, identity_perm(B));
          permute_batch_axis(s_t, identity_perm(B));
          break;
        }
        case InspectMethod::context_shuffle: {
          const std::vector<int> perm = derangement(B, rng_);
          permute_batch_axis(s_f, perm);
          permute_batch_axis(s_t, perm);
          break;
        }
        case InspectMethod::channel_shuffle: {
          const std::vector<int> perm = shuffled(C, rng_);
          permute_channel_axis(s_f, perm);
          permute_channel_axis(s_t, perm);
          break;
        }
        case InspectMethod::time_shuffle:
          permute_last_axis(s_t, shuffled(L, rng_));
          break;
        case InspectMethod::frequency_shuffle:
          permute_last_axis(s_f, shuffled(F, rng_));
          break;
        case InspectMethod::spatial_shuffle: {
          // materialize the factorized map and permute the joint (f, t) grid
          Tensor map({B, C, F, L});
          for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
              for (int f = 0; f < F; ++f)
                for (int t = 0; t < L; ++t)
                  map.at4(b, c, f, t) = s_f.at3(b, c, f) * s_t.at3(b, c, t);
          const std::vector<int> perm = shuffled(F * L, rng_);
          Tensor out(map.shape);
          for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
              for (int i = 0; i < F * L; ++i) {
                const int j = perm[static_cast<std::size_t>(i)];
                out.at4(b, c, i / L, i % L) = map.at4(b, c, j / L, j % L);
              }
          joint = std::move(out);
          break;
        }
        default:
          break;
      }
    };
  }
}

bool InspectionProbe::block_selected(int block) const {
  if (cfg_.blocks.empty()) return true;
  return std::find(cfg_.blocks.begin(), cfg_.blocks.end(), block) != cfg_.blocks.end();
}

PerturbedEval perturbed_eval(Model<float>& model, const std::vector<ClipExample>& data,
                             const MelConfig& mel_cfg, const InspectionConfig& cfg,
                             int batch_size) {
  cfg.validate();
  const Tensor labels = labels_tensor(data, model.cfg.n_classes);
  const Tensor base = score_dataset(model, data, mel_cfg, batch_size);
  InspectionProbe probe(cfg);
  const Tensor pert = score_dataset(model, data, mel_cfg, batch_size, probe.hooks());
  PerturbedEval out;
  out.baseline_accuracy = accuracy(base, labels);
  out.baseline_map = mean_average_precision(base, labels);
  out.perturbed_accuracy = accuracy(pert, labels);
  out.perturbed_map = mean_average_precision(pert, labels);
  return out;
}

std::vector<MappingSample> capture_dyrelu_mappings(Model<float>& model,
                                                   const std::vector<ClipExample>& data,
                                                   const MelConfig& mel_cfg,
                                                   const std::vector<int>& blocks,
                                                   int n_samples, unsigned seed) {
  for (int b : blocks) {
    if (b < 1 || b > 15) throw ConfigError("block index must be in 1..15");
    const BlockSpec& spec = model.cfg.blocks[static_cast<std::size_t>(b - 1)];
    if (!spec.any_dyrelu())
      throw ConfigError("block " + std::to_string(b) + " has no Dy-ReLU");
  }

  std::mt19937 rng(seed);
  std::vector<MappingSample> samples;
  ForwardHooks<float> hooks;
  hooks.dyrelu_capture = [&](int block, int /*pos*/, const Tensor& pre, const Tensor& post,
                             const Tensor& /*coef*/) {
    if (std::find(blocks.begin(), blocks.end(), block) == blocks.end()) return;
    // thin the stream so every block contributes about n_samples pairs total
    const double keep =
        std::min(1.0, static_cast<double>(n_samples) /
                          (static_cast<double>(pre.size()) *
                           std::max<std::size_t>(1, data.size() / 16)));
    std::bernoulli_distribution take(keep);
    for (std::int64_t i = 0; i < pre.size(); ++i)
      if (take(rng)) samples.push_back({block, pre[i], post[i]});
  };
  score_dataset(model, data, mel_cfg, 16, &hooks);
  return samples;
}

std::string mappings_csv(const std::vector<MappingSample>& samples) {
  std::ostringstream os;
  os << "block,input,output\n";
  for (const auto& s : samples) os << s.block << "," << s.input << "," << s.output << "\n";
  return os.str();
}

}  // namespace dymn
