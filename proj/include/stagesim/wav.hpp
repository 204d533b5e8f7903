#pragma once

#include <filesystem>

#include <Eigen/Core>

#include "stagesim/signal.hpp"

namespace stagesim {

enum class WavFormat { pcm16, pcm24, float32 };

// Interleaved RIFF/WAVE audio as a frames x channels matrix in [-1, 1) full
// scale. The sample rate comes from the file header.
struct WavData {
  Eigen::MatrixXd samples;
  double sample_rate = 0.0;
  WavFormat format = WavFormat::float32;
};

// Reads PCM 16/24-bit and IEEE float 32-bit files (plain or extensible fmt
// chunk), any channel count.
WavData read_wav(const std::filesystem::path& path);

// PCM output is clipped to full scale and rounded to nearest.
void write_wav(const std::filesystem::path& path, const Eigen::Ref<const Eigen::MatrixXd>& samples,
               double sample_rate, WavFormat format = WavFormat::float32);

SampledSignal read_signal(const std::filesystem::path& path);
void write_signal(const std::filesystem::path& path, const SampledSignal& signal,
                  WavFormat format = WavFormat::float32);

}  // namespace stagesim
