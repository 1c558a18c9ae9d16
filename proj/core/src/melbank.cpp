#include "dymn/frontend.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

namespace dymn {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Slaney mel scale: linear below 1 kHz, logarithmic above.
double hz_to_mel(double hz) {
  const double f_sp = 200.0 / 3.0;
  const double min_log_hz = 1000.0;
  const double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return hz < min_log_hz ? hz / f_sp : min_log_mel + std::log(hz / min_log_hz) / logstep;
}

double mel_to_hz(double mel) {
  const double f_sp = 200.0 / 3.0;
  const double min_log_hz = 1000.0;
  const double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return mel < min_log_mel ? mel * f_sp : min_log_hz * std::exp(logstep * (mel - min_log_mel));
}

// In-place iterative radix-2 FFT.
void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

}  // namespace

void MelConfig::validate() const {
  if (sample_rate != 32000)
    throw ConfigError("frontend requires 32 kHz input, got " + std::to_string(sample_rate));
  if (n_mels < 1) throw ConfigError("n_mels must be >= 1");
  if (!(0.0 <= f_min && f_min < f_max && f_max <= sample_rate / 2.0))
    throw ConfigError("mel range must satisfy 0 <= f_min < f_max <= Nyquist");
  if (n_fft < win_samples() || (n_fft & (n_fft - 1)) != 0)
    throw ConfigError("n_fft must be a power of two >= window length");
  if (log_floor <= 0) throw ConfigError("log_floor must be positive");
}

MelBank build_mel_bank(const MelConfig& cfg) {
  cfg.validate();
  const int n_bins = cfg.n_fft / 2 + 1;
  const int n = cfg.n_mels;
  const double mel_lo = hz_to_mel(cfg.f_min);
  const double mel_hi = hz_to_mel(cfg.f_max);

  std::vector<double> edges(static_cast<std::size_t>(n) + 2);
  for (int i = 0; i < n + 2; ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / static_cast<double>(n + 1));

  MelBank bank;
  bank.n_bins = n_bins;
  bank.weights.assign(static_cast<std::size_t>(n) * n_bins, 0.0);
  bank.center_hz.resize(n);
  for (int m = 0; m < n; ++m) {
    bank.center_hz[m] = edges[m + 1];
    const double enorm = 2.0 / (edges[m + 2] - edges[m]);  // Slaney area normalization
    for (int k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.n_fft;
      const double lower = (f - edges[m]) / (edges[m + 1] - edges[m]);
      const double upper = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1]);
      const double w = std::max(0.0, std::min(lower, upper));
      bank.weights[static_cast<std::size_t>(m) * n_bins + k] = w * enorm;
    }
  }
  return bank;
}

Tensor mel_spectrogram(const Waveform& w, const MelConfig& cfg) {
  cfg.validate();
  if (w.sample_rate != cfg.sample_rate)
    throw ConfigError("waveform sample rate " + std::to_string(w.sample_rate) +
                      " does not match config " + std::to_string(cfg.sample_rate));
  const int win = cfg.win_samples();
  const int hop = cfg.hop_samples();
  const auto n = static_cast<std::int64_t>(w.samples.size());
  if (n < win)
    throw ConfigError("waveform shorter than one window (" + std::to_string(n) + " < " +
                      std::to_string(win) + " samples)");
  const int frames = static_cast<int>(1 + (n - win) / hop);
  const MelBank bank = build_mel_bank(cfg);

  std::vector<double> hann(static_cast<std::size_t>(win));
  for (int i = 0; i < win; ++i)
    hann[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / static_cast<double>(win)));

  Tensor out({1, 1, cfg.n_mels, frames});
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(cfg.n_fft));
  std::vector<double> mag(static_cast<std::size_t>(bank.n_bins));
  for (int t = 0; t < frames; ++t) {
    const float* src = w.samples.data() + static_cast<std::size_t>(t) * hop;
    for (int i = 0; i < win; ++i) buf[i] = {src[i] * hann[i], 0.0};
    std::fill(buf.begin() + win, buf.end(), std::complex<double>(0.0, 0.0));
    fft_radix2(buf);
    for (int k = 0; k < bank.n_bins; ++k) mag[k] = std::abs(buf[k]);
    for (int m = 0; m < cfg.n_mels; ++m) {
      const double* row = &bank.weights[static_cast<std::size_t>(m) * bank.n_bins];
      double acc = 0.0;
      for (int k = 0; k < bank.n_bins; ++k) acc += row[k] * mag[k];
      out.at4(0, 0, m, t) = static_cast<float>(std::log(acc + cfg.log_floor));
    }
  }
  return out;
}

MelConfig perturb_mel_range(const MelConfig& cfg, std::mt19937& rng) {
  MelConfig out = cfg;
  std::uniform_real_distribution<double> dmin(0.0, cfg.f_min_jitter);
  std::uniform_real_distribution<double> dmax(0.0, cfg.f_max_jitter);
  if (cfg.f_min_jitter > 0) out.f_min = cfg.f_min + dmin(rng);
  if (cfg.f_max_jitter > 0) out.f_max = cfg.f_max + dmax(rng);
  out.validate();
  return out;
}

Waveform roll_waveform(const Waveform& w, std::int64_t shift) {
  const auto n = static_cast<std::int64_t>(w.samples.size());
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples.resize(w.samples.size());
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t j = (i - shift) % n;
    if (j < 0) j += n;
    out.samples[i] = w.samples[j];
  }
  return out;
}

Waveform waveform_augment(const Waveform& w, double roll_ms, double gain_db, std::mt19937& rng) {
  const auto max_shift =
      static_cast<std::int64_t>(roll_ms * w.sample_rate / 1000.0 + 0.5);
  std::int64_t shift = 0;
  if (max_shift > 0) {
    std::uniform_int_distribution<std::int64_t> dshift(-max_shift, max_shift);
    shift = dshift(rng);
  }
  double gain = 1.0;
  if (gain_db > 0) {
    std::uniform_real_distribution<double> dgain(-gain_db, gain_db);
    gain = std::pow(10.0, dgain(rng) / 20.0);
  }
  Waveform out = shift != 0 ? roll_waveform(w, shift) : w;
  if (gain != 1.0)
    for (auto& s : out.samples) s = static_cast<float>(s * gain);
  return out;
}

}  // namespace dymn
