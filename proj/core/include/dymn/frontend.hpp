#pragma once

// Waveform -> log-mel spectrogram. Hann-windowed magnitude STFT (no frame
// centering, window zero-padded to n_fft), Slaney-style area-normalized
// triangular mel filters, natural log with an additive floor.

#include <random>
#include <vector>

#include "dymn/tensor.hpp"
#include "dymn/wav.hpp"

namespace dymn {

struct MelConfig {
  int sample_rate = 32000;
  int n_mels = 128;
  double win_ms = 25.0;
  double hop_ms = 10.0;
  int n_fft = 1024;           // power of two >= window length
  double f_min = 0.0;
  double f_max = 14000.0;     // Nyquist minus the f_max perturbation window
  double f_min_jitter = 10.0;   // perturbation window above f_min
  double f_max_jitter = 2000.0; // perturbation window up to Nyquist
  double log_floor = 1e-5;

  int win_samples() const { return static_cast<int>(win_ms * sample_rate / 1000.0 + 0.5); }
  int hop_samples() const { return static_cast<int>(hop_ms * sample_rate / 1000.0 + 0.5); }
  void validate() const;
};

struct MelBank {
  int n_bins = 0;                  // n_fft/2 + 1
  std::vector<double> weights;     // n_mels x n_bins, row major
  std::vector<double> center_hz;   // per mel row
};

MelBank build_mel_bank(const MelConfig& cfg);

// Output 1 x 1 x n_mels x T with T = 1 + floor((N - win) / hop).
Tensor mel_spectrogram(const Waveform& w, const MelConfig& cfg);

// Jitters f_min within [f_min, f_min + f_min_jitter] and f_max within
// [f_max, f_max + f_max_jitter]; draws f_min first.
MelConfig perturb_mel_range(const MelConfig& cfg, std::mt19937& rng);

Waveform roll_waveform(const Waveform& w, std::int64_t shift);

// Circular roll by a uniform shift in +-(roll_ms) and gain scaling by a
// uniform draw in +-(gain_db) decibels; roll is drawn first.
Waveform waveform_augment(const Waveform& w, double roll_ms, double gain_db, std::mt19937& rng);

}  // namespace dymn
