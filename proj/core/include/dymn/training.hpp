#pragma once

// Knowledge-distillation training at desk scale: the Eq.-style weighted BCE
// loss against labels and file-provided teacher logits, two-level mixup,
// exponential-warmup/linear-rampdown learning rate, linearly annealed kernel
// temperature, Adam with decoupled weight decay.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dymn/frontend.hpp"
#include "dymn/model.hpp"
#include "dymn/serialize.hpp"

namespace dymn {

struct ScheduleConfig {
  int warmup_epochs = 8;       // exponential ramp from 1% of peak
  int constant_epochs = 72;    // remainder of the 200-epoch recipe
  int rampdown_epochs = 95;    // linear to 1% of peak
  int tail_epochs = 25;        // constant at 1% of peak
  double peak_lr = 1e-3;
  double tau_start = 30.0;
  double tau_end = 1.0;
  int tau_anneal_epochs = 30;
  double lambda = 0.1;  // weight on the label loss; 1 - lambda on distillation
  double mixup_coef = 0.3;
  double weight_decay = 0.0;

  // augmentation switches (fine-tuning recipe)
  bool spectrogram_mixup = true;
  bool waveform_mixup = false;
  double waveform_roll_ms = 0.0;  // up to 125
  double gain_db = 0.0;           // up to 7
  bool perturb_mel = true;

  int batch_size = 16;
  int epochs = 5;
  int loader_threads = 0;  // 0 = synchronous; 1 = bounded-queue producer

  void validate() const {
    if (warmup_epochs < 0 || constant_epochs < 0 || rampdown_epochs < 0 || tail_epochs < 0)
      throw ConfigError("schedule epoch counts must be >= 0");
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lambda must be in [0, 1]");
    if (peak_lr <= 0) throw ConfigError("peak_lr must be positive");
    if (tau_start < tau_end || tau_end < 1.0)
      throw ConfigError("temperature must anneal downward and stay >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  }
};

// Piecewise learning rate over fractional epochs.
double lr_at(int epoch, double frac_within_epoch, const ScheduleConfig& s);
// Kernel-attention temperature, linearly annealed from tau_start to tau_end.
double tau_at(double epoch, const ScheduleConfig& s);

// Loss = lambda * BCE(sigmoid(z_s), y) + (1 - lambda) * BCE(sigmoid(z_s), sigmoid(z_t)).
template <typename T>
Var kd_loss(Tape<T>& tape, Var z_s, const TensorT<T>& labels,
            const std::type_identity_t<TensorT<T>>* teacher_logits, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lambda must be in [0, 1]");
  if (lambda < 1.0 && !teacher_logits)
    throw ConfigError("distillation weight lambda < 1 requires teacher logits");
  check_shape(tape.value(z_s).shape == labels.shape, "kd_loss: label shape mismatch");
  Var label_loss = tape.bce_logits_mean(z_s, labels);
  if (!teacher_logits || lambda >= 1.0) return label_loss;
  check_shape(teacher_logits->shape == labels.shape, "kd_loss: teacher shape mismatch");
  TensorT<T> targets(teacher_logits->shape);
  for (std::int64_t i = 0; i < targets.size(); ++i)
    targets[i] = act_eval(ActKind::sigmoid, (*teacher_logits)[i]);
  Var kd = tape.bce_logits_mean(z_s, targets);
  return tape.add(tape.scale(label_loss, static_cast<T>(lambda)),
                  tape.scale(kd, static_cast<T>(1.0 - lambda)));
}

// Beta(coef, coef) draw folded onto [0.5, 1].
double draw_mixup_lambda(double coef, std::mt19937& rng);

struct KdBatch {
  Tensor x;                       // B x 1 x F x T
  Tensor y;                       // B x n_classes
  std::optional<Tensor> teacher;  // B x n_classes logits
};

// Mixes a batch with a permuted copy of itself; inputs, labels and teacher
// logits share the same coefficient.
KdBatch mixup(const KdBatch& a, const KdBatch& b, double lam);

template <typename T>
struct AdamState {
  struct Slot {
    TensorT<T> m, v;
  };
  std::map<std::string, Slot> slots;
  std::int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// Bias-corrected Adam; weight decay is decoupled (applied directly to the
// parameter, scaled by lr) and skipped when zero.
template <typename T>
void adam_step(ParamStore<T>& store, AdamState<T>& st, double lr, double weight_decay) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (auto& [name, e] : store) {
    if (!e.trainable) continue;
    auto [it, inserted] = st.slots.try_emplace(name);
    if (inserted) {
      it->second.m = TensorT<T>(e.value.shape);
      it->second.v = TensorT<T>(e.value.shape);
    }
    auto& slot = it->second;
    check_shape(slot.m.shape == e.value.shape, "adam state shape mismatch for " + name);
    for (std::int64_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      const double m = st.beta1 * slot.m[i] + (1.0 - st.beta1) * g;
      const double v = st.beta2 * slot.v[i] + (1.0 - st.beta2) * g * g;
      slot.m[i] = static_cast<T>(m);
      slot.v[i] = static_cast<T>(v);
      double upd = lr * (m / bc1) / (std::sqrt(v / bc2) + st.eps);
      if (weight_decay > 0) upd += lr * weight_decay * e.value[i];
      e.value[i] = static_cast<T>(e.value[i] - upd);
    }
  }
}

struct ClipExample {
  std::string id;
  Waveform wav;
  std::vector<float> labels;  // multi-hot over n_classes
  std::optional<std::vector<float>> teacher_logits;
};

// Epoch ordering policy. The importance-sampling strategy from the AudioSet
// recipe would plug in here; the default draws a uniform shuffle.
class Sampler {
 public:
  virtual ~Sampler() = default;
  virtual std::vector<int> epoch_order(int n, std::mt19937& rng) const;
};

struct StepRecord {
  int epoch = 0;
  int step = 0;  // global step
  double lr = 0, tau = 0, loss = 0;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_loss;
};

// Deterministic under a fixed seed (batch contents derive from per-batch
// seeds, so the bounded-queue loader produces identical traces).
TrainResult train_loop(Model<float>& model, const std::vector<ClipExample>& data,
                       const MelConfig& mel_cfg, const ScheduleConfig& s, int epochs,
                       std::mt19937& rng, const Sampler* sampler = nullptr,
                       const std::function<void(int)>& on_epoch_end = {});

// Synthetic 2-class task: low-band tones (200-800 Hz) vs high-band tones
// (3-8 kHz) with additive noise.
std::vector<ClipExample> make_synthetic_dataset(int n, unsigned seed, double seconds = 1.0,
                                                double noise = 0.1);

// Teacher-logit container: one N x n_classes array plus the aligned clip ids.
void save_teacher_logits(const std::string& path, const std::vector<std::string>& ids,
                         const Tensor& logits);
struct TeacherLogits {
  std::vector<std::string> ids;
  Tensor logits;
};
TeacherLogits load_teacher_logits(const std::string& path);

// Attaches teacher rows to dataset items by id; throws on missing ids.
void attach_teacher_logits(std::vector<ClipExample>& data, const TeacherLogits& tl);

// Batched eval-mode scoring of a dataset (mel + forward, sigmoid applied).
Tensor score_dataset(Model<float>& model, const std::vector<ClipExample>& data,
                     const MelConfig& mel_cfg, int batch_size = 16,
                     ForwardHooks<float>* hooks = nullptr);
Tensor labels_tensor(const std::vector<ClipExample>& data, int n_classes);

}  // namespace dymn
