#include "dymn/training.hpp"

#include <cmath>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <sstream>
#include <thread>

namespace dymn {

double lr_at(int epoch, double frac_within_epoch, const ScheduleConfig& s) {
  if (epoch < 0) throw ConfigError("epoch must be >= 0");
  const double e = epoch + std::clamp(frac_within_epoch, 0.0, 1.0);
  const double floor_lr = 0.01 * s.peak_lr;
  const double w = s.warmup_epochs, c = s.constant_epochs, r = s.rampdown_epochs;
  if (e < w) return s.peak_lr * std::pow(0.01, 1.0 - e / w);
  if (e < w + c) return s.peak_lr;
  if (e < w + c + r) {
    const double u = (e - w - c) / r;
    return s.peak_lr * (1.0 - u) + floor_lr * u;
  }
  return floor_lr;
}

double tau_at(double epoch, const ScheduleConfig& s) {
  if (epoch < 0) throw ConfigError("epoch must be >= 0");
  if (s.tau_anneal_epochs <= 0) return s.tau_end;
  const double u = std::min(epoch, static_cast<double>(s.tau_anneal_epochs)) /
                   s.tau_anneal_epochs;
  return s.tau_start - (s.tau_start - s.tau_end) * u;
}

double draw_mixup_lambda(double coef, std::mt19937& rng) {
  if (coef <= 0) return 1.0;
  std::gamma_distribution<double> g(coef, 1.0);
  const double a = g(rng), b = g(rng);
  const double lam = (a + b) > 0 ? a / (a + b) : 0.5;
  return std::max(lam, 1.0 - lam);
}

KdBatch mixup(const KdBatch& a, const KdBatch& b, double lam) {
  check_shape(a.x.shape == b.x.shape && a.y.shape == b.y.shape, "mixup: shape mismatch");
  check_shape(a.teacher.has_value() == b.teacher.has_value(),
              "mixup: one batch has teacher logits, the other does not");
  const auto mix = [lam](const Tensor& u, const Tensor& v) {
    Tensor out(u.shape);
    const auto l = static_cast<float>(lam);
    for (std::int64_t i = 0; i < u.size(); ++i) out[i] = l * u[i] + (1.0f - l) * v[i];
    return out;
  };
  KdBatch out;
  out.x = mix(a.x, b.x);
  out.y = mix(a.y, b.y);
  if (a.teacher) out.teacher = mix(*a.teacher, *b.teacher);
  return out;
}

std::vector<int> Sampler::epoch_order(int n, std::mt19937& rng) const {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

namespace {

// Permutes a batch in place (used to pair samples for mixup).
KdBatch permute_batch(const KdBatch& b, const std::vector<int>& perm) {
  KdBatch out;
  out.x = Tensor(b.x.shape);
  out.y = Tensor(b.y.shape);
  const std::int64_t xs = b.x.size() / b.x.dim(0);
  const std::int64_t ys = b.y.size() / b.y.dim(0);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    std::copy(b.x.data.begin() + perm[i] * xs, b.x.data.begin() + (perm[i] + 1) * xs,
              out.x.data.begin() + static_cast<std::int64_t>(i) * xs);
    std::copy(b.y.data.begin() + perm[i] * ys, b.y.data.begin() + (perm[i] + 1) * ys,
              out.y.data.begin() + static_cast<std::int64_t>(i) * ys);
  }
  if (b.teacher) {
    Tensor t(b.teacher->shape);
    for (std::size_t i = 0; i < perm.size(); ++i)
      std::copy(b.teacher->data.begin() + perm[i] * ys,
                b.teacher->data.begin() + (perm[i] + 1) * ys,
                t.data.begin() + static_cast<std::int64_t>(i) * ys);
    out.teacher = std::move(t);
  }
  return out;
}

int n_classes_of(const std::vector<ClipExample>& data) {
  return static_cast<int>(data.front().labels.size());
}

// Assembles one training batch; every random draw comes from `brng`, so the
// batch content is a pure function of (data, indices, configs, batch seed).
KdBatch make_batch(const std::vector<ClipExample>& data, const std::vector<int>& idx,
                   const MelConfig& mel_cfg, const ScheduleConfig& s, std::mt19937& brng) {
  const int B = static_cast<int>(idx.size());
  const int n_classes = n_classes_of(data);
  const bool has_teacher = data.front().teacher_logits.has_value();

  std::vector<Waveform> wavs(static_cast<std::size_t>(B));
  KdBatch batch;
  batch.y = Tensor({B, n_classes});
  if (has_teacher) batch.teacher = Tensor({B, n_classes});
  for (int i = 0; i < B; ++i) {
    const ClipExample& ex = data[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
    wavs[static_cast<std::size_t>(i)] =
        (s.waveform_roll_ms > 0 || s.gain_db > 0)
            ? waveform_augment(ex.wav, s.waveform_roll_ms, s.gain_db, brng)
            : ex.wav;
    for (int c = 0; c < n_classes; ++c) batch.y.at2(i, c) = ex.labels[static_cast<std::size_t>(c)];
    if (has_teacher)
      for (int c = 0; c < n_classes; ++c)
        batch.teacher->at2(i, c) = (*ex.teacher_logits)[static_cast<std::size_t>(c)];
  }

  // waveform-level mixup: mix raw audio, labels and teacher rows together
  if (s.waveform_mixup && B > 1) {
    const double lam = draw_mixup_lambda(s.mixup_coef, brng);
    std::vector<int> perm(static_cast<std::size_t>(B));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), brng);
    std::vector<Waveform> mixed = wavs;
    for (int i = 0; i < B; ++i) {
      const Waveform& other = wavs[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
      auto& m = mixed[static_cast<std::size_t>(i)].samples;
      for (std::size_t j = 0; j < m.size(); ++j)
        m[j] = static_cast<float>(lam * m[j] + (1.0 - lam) * other.samples[j]);
    }
    wavs = std::move(mixed);
    KdBatch labels_only;
    labels_only.x = Tensor({1, 1, 1, 1});
    labels_only.y = batch.y;
    labels_only.teacher = batch.teacher;
    KdBatch partner = permute_batch(labels_only, perm);
    KdBatch blended = mixup(labels_only, partner, lam);
    batch.y = std::move(blended.y);
    batch.teacher = std::move(blended.teacher);
  }

  // mel, with per-item filter-range perturbation
  std::vector<Tensor> mels;
  mels.reserve(static_cast<std::size_t>(B));
  int min_frames = 1 << 30;
  for (int i = 0; i < B; ++i) {
    MelConfig cfg = s.perturb_mel ? perturb_mel_range(mel_cfg, brng) : mel_cfg;
    mels.push_back(mel_spectrogram(wavs[static_cast<std::size_t>(i)], cfg));
    min_frames = std::min(min_frames, mels.back().dim(3));
  }
  batch.x = Tensor({B, 1, mel_cfg.n_mels, min_frames});
  for (int i = 0; i < B; ++i)
    for (int f = 0; f < mel_cfg.n_mels; ++f)
      for (int t = 0; t < min_frames; ++t)
        batch.x.at4(i, 0, f, t) = mels[static_cast<std::size_t>(i)].at4(0, 0, f, t);

  if (s.spectrogram_mixup && B > 1) {
    const double lam = draw_mixup_lambda(s.mixup_coef, brng);
    std::vector<int> perm(static_cast<std::size_t>(B));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), brng);
    batch = mixup(batch, permute_batch(batch, perm), lam);
  }
  return batch;
}

struct BatchPlan {
  int epoch = 0;
  int step_in_epoch = 0;
  int global_step = 0;
  std::vector<int> indices;
  std::uint32_t seed = 0;
};

class BoundedBatchQueue {
 public:
  explicit BoundedBatchQueue(std::size_t cap) : cap_(cap) {}

  // returns false once cancelled so the producer can stop early
  bool push(KdBatch b) {
    std::unique_lock lk(m_);
    cv_push_.wait(lk, [&] { return q_.size() < cap_ || cancelled_; });
    if (cancelled_) return false;
    q_.push_back(std::move(b));
    cv_pop_.notify_one();
    return true;
  }

  KdBatch pop() {
    std::unique_lock lk(m_);
    cv_pop_.wait(lk, [&] { return !q_.empty(); });
    KdBatch b = std::move(q_.front());
    q_.pop_front();
    cv_push_.notify_one();
    return b;
  }

  void cancel() {
    std::lock_guard lk(m_);
    cancelled_ = true;
    cv_push_.notify_all();
  }

 private:
  std::size_t cap_;
  std::deque<KdBatch> q_;
  std::mutex m_;
  std::condition_variable cv_push_, cv_pop_;
  bool cancelled_ = false;
};

}  // namespace

TrainResult train_loop(Model<float>& model, const std::vector<ClipExample>& data,
                       const MelConfig& mel_cfg, const ScheduleConfig& s, int epochs,
                       std::mt19937& rng, const Sampler* sampler,
                       const std::function<void(int)>& on_epoch_end) {
  s.validate();
  if (data.empty()) throw ConfigError("train_loop: dataset is empty");
  if (s.lambda < 1.0)
    for (const auto& ex : data)
      if (!ex.teacher_logits)
        throw ConfigError("lambda < 1 but item '" + ex.id + "' has no teacher logits");

  const Sampler default_sampler;
  const Sampler& smp = sampler ? *sampler : default_sampler;
  const std::uint32_t master_seed = rng();

  // plan all batches up front; contents derive from per-batch seeds only
  std::vector<BatchPlan> plans;
  {
    std::mt19937 order_rng(master_seed);
    int global = 0;
    for (int e = 0; e < epochs; ++e) {
      std::vector<int> order = smp.epoch_order(static_cast<int>(data.size()), order_rng);
      for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(s.batch_size)) {
        BatchPlan p;
        p.epoch = e;
        p.step_in_epoch = static_cast<int>(off / static_cast<std::size_t>(s.batch_size));
        p.global_step = global++;
        const std::size_t end = std::min(order.size(), off + static_cast<std::size_t>(s.batch_size));
        p.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(off),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
        p.seed = master_seed ^ (static_cast<std::uint32_t>(p.global_step) * 0x9e3779b9u + 1u);
        plans.push_back(std::move(p));
      }
    }
  }

  BoundedBatchQueue queue(4);
  std::thread producer;
  auto produce_one = [&](const BatchPlan& p) {
    std::mt19937 brng(p.seed);
    return make_batch(data, p.indices, mel_cfg, s, brng);
  };
  if (s.loader_threads > 0) {
    producer = std::thread([&]() {
      for (const auto& p : plans)
        if (!queue.push(produce_one(p))) return;
    });
  }
  auto shutdown_producer = [&]() {
    if (producer.joinable()) {
      queue.cancel();
      producer.join();
    }
  };

  AdamState<float> adam;
  TrainResult result;
  const int steps_per_epoch = static_cast<int>((data.size() + s.batch_size - 1) /
                                               static_cast<std::size_t>(s.batch_size));
  double epoch_acc = 0;
  int epoch_count = 0;
  std::mt19937 dropout_rng(master_seed ^ 0xabcdef01u);

  try {
  for (const auto& p : plans) {
    KdBatch batch = s.loader_threads > 0 ? queue.pop() : produce_one(p);

    const double tau = tau_at(p.epoch, s);
    const double lr = lr_at(p.epoch, static_cast<double>(p.step_in_epoch) / steps_per_epoch, s);

    model.store.zero_grad();
    double loss_value = 0;
    {
      Tape<float> tape;
      RunContext<float> ctx{tape, Mode::train, tau, nullptr, &dropout_rng, 0};
      Var out = model.forward(ctx, tape.input(batch.x));
      Var loss = kd_loss(tape, out, batch.y, batch.teacher ? &*batch.teacher : nullptr,
                         s.lambda);
      loss_value = tape.value(loss).item();
      if (!std::isfinite(loss_value)) {
        std::ostringstream os;
        os << "non-finite loss " << loss_value << " at epoch " << p.epoch << " step "
           << p.step_in_epoch << " (lr " << lr << ", tau " << tau << ")";
        throw NumericError(os.str());
      }
      tape.backward(loss);
    }
    adam_step(model.store, adam, lr, s.weight_decay);

    result.steps.push_back({p.epoch, p.global_step, lr, tau, loss_value});
    epoch_acc += loss_value;
    ++epoch_count;
    const bool epoch_end = (p.step_in_epoch == steps_per_epoch - 1);
    if (epoch_end) {
      result.epoch_loss.push_back(epoch_acc / epoch_count);
      epoch_acc = 0;
      epoch_count = 0;
      if (on_epoch_end) on_epoch_end(p.epoch);
    }
  }
  } catch (...) {
    shutdown_producer();
    throw;
  }
  shutdown_producer();
  return result;
}

std::vector<ClipExample> make_synthetic_dataset(int n, unsigned seed, double seconds,
                                                double noise) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> low(200.0, 800.0);
  std::uniform_real_distribution<double> high(3000.0, 8000.0);
  std::uniform_real_distribution<double> phase(0.0, 6.28318530717958);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> coin(0, 1);

  const int sr = 32000;
  const auto len = static_cast<std::size_t>(seconds * sr);
  std::vector<ClipExample> data;
  data.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int cls = coin(rng);
    const double f0 = cls == 0 ? low(rng) : high(rng);
    const double ph = phase(rng);
    ClipExample ex;
    ex.id = "synth" + std::to_string(i);
    ex.wav.sample_rate = sr;
    ex.wav.samples.resize(len);
    for (std::size_t j = 0; j < len; ++j) {
      const double t = static_cast<double>(j) / sr;
      double v = 0.4 * std::sin(2.0 * 3.14159265358979 * f0 * t + ph) +
                 0.1 * std::sin(2.0 * 3.14159265358979 * 2.0 * f0 * t + 2.0 * ph);
      v += noise * gauss(rng);
      ex.wav.samples[j] = static_cast<float>(v);
    }
    ex.labels.assign(2, 0.0f);
    ex.labels[static_cast<std::size_t>(cls)] = 1.0f;
    data.push_back(std::move(ex));
  }
  return data;
}

void save_teacher_logits(const std::string& path, const std::vector<std::string>& ids,
                         const Tensor& logits) {
  check_shape(logits.rank() == 2 &&
                  logits.dim(0) == static_cast<int>(ids.size()),
              "teacher logits must be N x n_classes with one id per row");
  Container c;
  ContainerArray arr;
  arr.name = "logits";
  arr.shape = logits.shape;
  arr.data = logits.data;
  c.arrays.push_back(std::move(arr));
  std::string joined;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) joined += "\n";
    joined += ids[i];
  }
  c.meta["ids"] = joined;
  c.meta["kind"] = "teacher-logits";
  save_container(path, c);
}

TeacherLogits load_teacher_logits(const std::string& path) {
  Container c = load_container(path);
  const ContainerArray* arr = c.find("logits");
  if (!arr) throw IoError("teacher logit file has no 'logits' array: " + path);
  TeacherLogits tl;
  tl.logits = Tensor(arr->shape, arr->data);
  auto it = c.meta.find("ids");
  if (it == c.meta.end()) throw IoError("teacher logit file has no id list: " + path);
  std::istringstream is(it->second);
  std::string line;
  while (std::getline(is, line)) tl.ids.push_back(line);
  if (static_cast<int>(tl.ids.size()) != tl.logits.dim(0))
    throw IoError("teacher logit id list does not match row count");
  return tl;
}

void attach_teacher_logits(std::vector<ClipExample>& data, const TeacherLogits& tl) {
  std::map<std::string, int> row;
  for (std::size_t i = 0; i < tl.ids.size(); ++i) row[tl.ids[i]] = static_cast<int>(i);
  const int C = tl.logits.dim(1);
  for (auto& ex : data) {
    auto it = row.find(ex.id);
    if (it == row.end()) throw ConfigError("no teacher logits for item '" + ex.id + "'");
    std::vector<float> z(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) z[static_cast<std::size_t>(c)] = tl.logits.at2(it->second, c);
    ex.teacher_logits = std::move(z);
  }
}

Tensor score_dataset(Model<float>& model, const std::vector<ClipExample>& data,
                     const MelConfig& mel_cfg, int batch_size, ForwardHooks<float>* hooks) {
  if (data.empty()) throw ConfigError("score_dataset: dataset is empty");
  const int n_classes = model.cfg.n_classes;
  Tensor scores({static_cast<int>(data.size()), n_classes});
  for (std::size_t off = 0; off < data.size(); off += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), off + static_cast<std::size_t>(batch_size));
    const int B = static_cast<int>(end - off);
    int min_frames = 1 << 30;
    std::vector<Tensor> mels;
    mels.reserve(static_cast<std::size_t>(B));
    for (std::size_t i = off; i < end; ++i) {
      mels.push_back(mel_spectrogram(data[i].wav, mel_cfg));
      min_frames = std::min(min_frames, mels.back().dim(3));
    }
    Tensor x({B, 1, mel_cfg.n_mels, min_frames});
    for (int b = 0; b < B; ++b)
      for (int f = 0; f < mel_cfg.n_mels; ++f)
        for (int t = 0; t < min_frames; ++t)
          x.at4(b, 0, f, t) = mels[static_cast<std::size_t>(b)].at4(0, 0, f, t);
    Tensor logits = model.logits(x, Mode::eval, 1.0, hooks);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < n_classes; ++c)
        scores.at2(static_cast<int>(off) + b, c) = act_eval(ActKind::sigmoid, logits.at2(b, c));
  }
  return scores;
}

Tensor labels_tensor(const std::vector<ClipExample>& data, int n_classes) {
  Tensor y({static_cast<int>(data.size()), n_classes});
  for (std::size_t i = 0; i < data.size(); ++i)
    for (int c = 0; c < n_classes; ++c)
      y.at2(static_cast<int>(i), c) = data[i].labels[static_cast<std::size_t>(c)];
  return y;
}

}  // namespace dymn
