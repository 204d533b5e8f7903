#include "stagesim/wav.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace stagesim {
namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint32_t read_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}
std::uint16_t read_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_tag(std::vector<std::uint8_t>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

}  // namespace

WavData read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open WAV file " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw ValidationError(path.string() + ": not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const std::uint8_t* data = nullptr;
  std::size_t data_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* chunk = bytes.data() + pos;
    const std::size_t size = read_u32(chunk + 4);
    const std::size_t avail = std::min(size, bytes.size() - pos - 8);
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (avail < 16) throw ValidationError(path.string() + ": short fmt chunk");
      format = read_u16(chunk + 8);
      channels = read_u16(chunk + 10);
      rate = read_u32(chunk + 12);
      bits = read_u16(chunk + 22);
      if (format == kFormatExtensible) {
        if (avail < 40) throw ValidationError(path.string() + ": short extensible fmt chunk");
        format = read_u16(chunk + 32);
      }
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_size = avail;
    }
    pos += 8 + size + (size & 1);
  }
  if (channels == 0 || rate == 0) throw ValidationError(path.string() + ": missing fmt chunk");
  if (!data) throw ValidationError(path.string() + ": missing data chunk");

  WavData out;
  out.sample_rate = rate;
  if (format == kFormatPcm && bits == 16) out.format = WavFormat::pcm16;
  else if (format == kFormatPcm && bits == 24) out.format = WavFormat::pcm24;
  else if (format == kFormatFloat && bits == 32) out.format = WavFormat::float32;
  else
    throw ValidationError(path.string() + ": unsupported sample format (" +
                          std::to_string(format) + ", " + std::to_string(bits) + " bit)");

  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t frames = data_size / (bytes_per_sample * channels);
  out.samples.resize(static_cast<Eigen::Index>(frames), channels);
  const std::uint8_t* p = data;
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::uint16_t c = 0; c < channels; ++c, p += bytes_per_sample) {
      double v = 0.0;
      switch (out.format) {
        case WavFormat::pcm16:
          v = static_cast<std::int16_t>(read_u16(p)) / 32768.0;
          break;
        case WavFormat::pcm24: {
          std::int32_t s = std::int32_t(p[0]) | (std::int32_t(p[1]) << 8) | (std::int32_t(p[2]) << 16);
          if (s & 0x800000) s -= 0x1000000;
          v = s / 8388608.0;
          break;
        }
        case WavFormat::float32: {
          const std::uint32_t u = read_u32(p);
          float fv;
          std::memcpy(&fv, &u, 4);
          v = fv;
          break;
        }
      }
      out.samples(static_cast<Eigen::Index>(f), c) = v;
    }
  }
  if (!out.samples.allFinite()) throw ValidationError(path.string() + ": non-finite samples");
  return out;
}

void write_wav(const std::filesystem::path& path, const Eigen::Ref<const Eigen::MatrixXd>& samples,
               double sample_rate, WavFormat format) {
  if (samples.cols() < 1) throw ValidationError("write_wav: no channels");
  const std::uint32_t rate = static_cast<std::uint32_t>(std::lround(sample_rate));
  if (rate == 0 || std::abs(rate - sample_rate) > 1e-9)
    throw ValidationError("write_wav: sample rate must be a positive integer");
  const std::uint16_t channels = static_cast<std::uint16_t>(samples.cols());
  const std::uint16_t bits = format == WavFormat::pcm16 ? 16 : format == WavFormat::pcm24 ? 24 : 32;
  const std::uint16_t tag = format == WavFormat::float32 ? kFormatFloat : kFormatPcm;
  const std::uint32_t block_align = channels * bits / 8;
  const std::uint32_t data_size = static_cast<std::uint32_t>(samples.rows()) * block_align;

  std::vector<std::uint8_t> out;
  out.reserve(44 + data_size + 1);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_size + (data_size & 1));
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, tag);
  put_u16(out, channels);
  put_u32(out, rate);
  put_u32(out, rate * block_align);
  put_u16(out, static_cast<std::uint16_t>(block_align));
  put_u16(out, bits);
  put_tag(out, "data");
  put_u32(out, data_size);
  for (Eigen::Index f = 0; f < samples.rows(); ++f) {
    for (Eigen::Index c = 0; c < samples.cols(); ++c) {
      const double v = samples(f, c);
      switch (format) {
        case WavFormat::pcm16: {
          const long q = std::clamp(std::lround(v * 32768.0), -32768L, 32767L);
          put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
          break;
        }
        case WavFormat::pcm24: {
          const long q = std::clamp(std::lround(v * 8388608.0), -8388608L, 8388607L);
          const std::uint32_t u = static_cast<std::uint32_t>(q) & 0xFFFFFF;
          out.push_back(static_cast<std::uint8_t>(u));
          out.push_back(static_cast<std::uint8_t>(u >> 8));
          out.push_back(static_cast<std::uint8_t>(u >> 16));
          break;
        }
        case WavFormat::float32: {
          const float fv = static_cast<float>(v);
          std::uint32_t u;
          std::memcpy(&u, &fv, 4);
          put_u32(out, u);
          break;
        }
      }
    }
  }
  if (data_size & 1) out.push_back(0);

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw ValidationError("cannot write WAV file " + path.string());
  file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!file) throw ValidationError("write failed for " + path.string());
}

SampledSignal read_signal(const std::filesystem::path& path) {
  WavData w = read_wav(path);
  if (w.samples.cols() > 2)
    throw ValidationError(path.string() + ": expected a mono or stereo file");
  return SampledSignal(std::move(w.samples), w.sample_rate);
}

void write_signal(const std::filesystem::path& path, const SampledSignal& signal, WavFormat format) {
  write_wav(path, signal.samples(), signal.sample_rate(), format);
}

}  // namespace stagesim
