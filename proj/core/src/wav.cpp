#include "dymn/wav.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "dymn/tensor.hpp"

namespace dymn {

namespace {

std::uint32_t rd_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t rd_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void wr_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<char*>(b), 4);
}
void wr_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff)};
  os.write(reinterpret_cast<char*>(b), 2);
}

void write_header(std::ostream& os, std::uint16_t format, std::uint16_t bits, int sample_rate,
                  std::uint32_t data_bytes) {
  os.write("RIFF", 4);
  wr_u32(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  wr_u32(os, 16);
  wr_u16(os, format);
  wr_u16(os, 1);  // mono
  wr_u32(os, static_cast<std::uint32_t>(sample_rate));
  wr_u32(os, static_cast<std::uint32_t>(sample_rate) * bits / 8);
  wr_u16(os, static_cast<std::uint16_t>(bits / 8));
  wr_u16(os, bits);
  os.write("data", 4);
  wr_u32(os, data_bytes);
}

}  // namespace

Waveform read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open WAV file: " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw IoError(path + ": not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t sample_rate = 0;
  std::size_t data_off = 0, data_len = 0;
  bool have_fmt = false;

  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::uint32_t chunk_len = rd_u32(buf.data() + pos + 4);
    if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0) {
      if (pos + 8 + 16 > buf.size()) throw IoError(path + ": truncated fmt chunk");
      format = rd_u16(buf.data() + pos + 8);
      channels = rd_u16(buf.data() + pos + 10);
      sample_rate = rd_u32(buf.data() + pos + 12);
      bits = rd_u16(buf.data() + pos + 22);
      have_fmt = true;
    } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
      data_off = pos + 8;
      data_len = std::min<std::size_t>(chunk_len, buf.size() - data_off);
    }
    pos += 8 + chunk_len + (chunk_len & 1);  // chunks are word aligned
  }

  if (!have_fmt || data_off == 0) throw IoError(path + ": missing fmt or data chunk");
  if (channels != 1)
    throw IoError(path + ": expected mono audio, got " + std::to_string(channels) + " channels");
  if (sample_rate != 32000)
    throw IoError(path + ": expected 32000 Hz sample rate, got " + std::to_string(sample_rate));

  Waveform w;
  w.sample_rate = static_cast<int>(sample_rate);
  if (format == 1 && bits == 16) {
    const std::size_t n = data_len / 2;
    w.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::int16_t s =
          static_cast<std::int16_t>(rd_u16(buf.data() + data_off + 2 * i));
      w.samples[i] = static_cast<float>(s) / 32768.0f;
    }
  } else if (format == 3 && bits == 32) {
    const std::size_t n = data_len / 4;
    w.samples.resize(n);
    std::memcpy(w.samples.data(), buf.data() + data_off, n * 4);
  } else {
    throw IoError(path + ": unsupported format (want 16-bit PCM or 32-bit float, got format=" +
                  std::to_string(format) + " bits=" + std::to_string(bits) + ")");
  }
  if (w.samples.empty()) throw IoError(path + ": empty data chunk");
  return w;
}

void write_wav_f32(const std::string& path, const Waveform& w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_header(os, 3, 32, w.sample_rate, static_cast<std::uint32_t>(w.samples.size() * 4));
  os.write(reinterpret_cast<const char*>(w.samples.data()),
           static_cast<std::streamsize>(w.samples.size() * 4));
}

void write_wav_pcm16(const std::string& path, const Waveform& w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_header(os, 1, 16, w.sample_rate, static_cast<std::uint32_t>(w.samples.size() * 2));
  for (float s : w.samples) {
    const float c = std::clamp(s, -1.0f, 1.0f);
    const auto v = static_cast<std::int16_t>(std::lround(c * 32767.0f));
    wr_u16(os, static_cast<std::uint16_t>(v));
  }
}

}  // namespace dymn
