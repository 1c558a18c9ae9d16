#!/usr/bin/env python3
"""Golden log-mel spectrogram, computed with numpy only.

Pins the frontend's STFT/filterbank conventions: frames at t*hop with no
centering, periodic Hann window of win_samples zero-padded (right) to n_fft,
magnitude spectrum, Slaney-scale area-normalized triangular mel filters,
natural log with an additive floor.

Writes data/golden_input.wav (PCM16) and data/golden_mel.bin.
"""

import os
import struct

import numpy as np

SR = 32000
N_MELS = 128
WIN = 800   # 25 ms
HOP = 320   # 10 ms
N_FFT = 1024
F_MIN = 0.0
F_MAX = 14000.0
LOG_FLOOR = 1e-5


def hz_to_mel(hz):
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    hz = np.asarray(hz, dtype=np.float64)
    return np.where(hz < min_log_hz, hz / f_sp,
                    min_log_mel + np.log(np.maximum(hz, 1e-12) / min_log_hz) / logstep)


def mel_to_hz(mel):
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    mel = np.asarray(mel, dtype=np.float64)
    return np.where(mel < min_log_mel, mel * f_sp,
                    min_log_hz * np.exp(logstep * (mel - min_log_mel)))


def mel_bank():
    edges = mel_to_hz(np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), N_MELS + 2))
    bins = np.arange(N_FFT // 2 + 1) * SR / N_FFT
    bank = np.zeros((N_MELS, len(bins)))
    for m in range(N_MELS):
        lower = (bins - edges[m]) / (edges[m + 1] - edges[m])
        upper = (edges[m + 2] - bins) / (edges[m + 2] - edges[m + 1])
        bank[m] = np.maximum(0.0, np.minimum(lower, upper)) * 2.0 / (edges[m + 2] - edges[m])
    return bank


def log_mel(x):
    frames = 1 + (len(x) - WIN) // HOP
    window = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(WIN) / WIN))  # periodic Hann
    bank = mel_bank()
    out = np.zeros((N_MELS, frames))
    for t in range(frames):
        frame = np.zeros(N_FFT)
        frame[:WIN] = x[t * HOP:t * HOP + WIN] * window
        mag = np.abs(np.fft.rfft(frame))
        out[:, t] = np.log(bank @ mag + LOG_FLOOR)
    return out


def write_wav_pcm16(path, samples):
    pcm = np.clip(samples, -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype(np.int16)
    data = pcm.tobytes()
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 36 + len(data)))
        fh.write(b"WAVEfmt ")
        fh.write(struct.pack("<IHHIIHH", 16, 1, 1, SR, SR * 2, 2, 16))
        fh.write(b"data")
        fh.write(struct.pack("<I", len(data)))
        fh.write(data)
    return pcm


def main():
    here = os.path.dirname(os.path.abspath(__file__))
    data = os.path.join(here, "..", "data")
    os.makedirs(data, exist_ok=True)

    n = int(0.6 * SR)
    t = np.arange(n) / SR
    rng = np.random.default_rng(20240817)
    x = (0.35 * np.sin(2 * np.pi * 440.0 * t)
         + 0.25 * np.sin(2 * np.pi * 2750.0 * t + 0.3)
         + 0.2 * np.sin(2 * np.pi * (500.0 + 4000.0 * t) * t)   # chirp
         + 0.05 * rng.standard_normal(n))

    pcm = write_wav_pcm16(os.path.join(data, "golden_input.wav"), x)
    # the C++ reader maps int16 -> value / 32768; feed the same floats in
    quantized = (pcm.astype(np.float32) / 32768.0).astype(np.float64)

    mel = log_mel(quantized).astype(np.float32)
    with open(os.path.join(data, "golden_mel.bin"), "wb") as fh:
        fh.write(b"DYMNMEL1")
        fh.write(struct.pack("<ii", mel.shape[0], mel.shape[1]))
        fh.write(mel.tobytes())
    print(f"golden mel: {mel.shape[0]} x {mel.shape[1]}, "
          f"range [{mel.min():.3f}, {mel.max():.3f}]")


if __name__ == "__main__":
    main()
