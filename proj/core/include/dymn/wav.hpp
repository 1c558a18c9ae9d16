#pragma once

// RIFF/WAVE reading and writing. Accepted input: mono, 32 kHz, 16-bit PCM or
// 32-bit IEEE float. Anything else is rejected with a descriptive error.

#include <string>
#include <vector>

namespace dymn {

struct Waveform {
  std::vector<float> samples;
  int sample_rate = 0;
};

Waveform read_wav(const std::string& path);
void write_wav_f32(const std::string& path, const Waveform& w);
void write_wav_pcm16(const std::string& path, const Waveform& w);

}  // namespace dymn
