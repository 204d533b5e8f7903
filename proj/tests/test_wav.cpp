#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "stagesim/wav.hpp"

using namespace stagesim;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "stagesim_test_wav";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("float32 round trip is exact for float-representable samples") {
  std::mt19937 rng(20);
  Eigen::MatrixXd x(257, 2);
  x.col(0) = oracle::uniform(rng, 257).cast<float>().cast<double>();
  x.col(1) = oracle::uniform(rng, 257).cast<float>().cast<double>();
  write_wav(scratch("f32.wav"), x, 44100.0);
  const WavData w = read_wav(scratch("f32.wav"));
  CHECK(w.sample_rate == 44100.0);
  CHECK(w.format == WavFormat::float32);
  CHECK((w.samples - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("pcm16 and pcm24 quantize to nearest") {
  std::mt19937 rng(21);
  Eigen::MatrixXd x = oracle::uniform(rng, 100, -0.99, 0.99);
  write_wav(scratch("p16.wav"), x, 48000.0, WavFormat::pcm16);
  write_wav(scratch("p24.wav"), x, 48000.0, WavFormat::pcm24);
  CHECK((read_wav(scratch("p16.wav")).samples - x).cwiseAbs().maxCoeff() <= 0.5 / 32768.0 + 1e-12);
  CHECK((read_wav(scratch("p24.wav")).samples - x).cwiseAbs().maxCoeff() <= 0.5 / 8388608.0 + 1e-12);
  CHECK(read_wav(scratch("p24.wav")).format == WavFormat::pcm24);
}

TEST_CASE("pcm output clips at full scale") {
  Eigen::MatrixXd x(2, 1);
  x << 2.0, -2.0;
  write_wav(scratch("clip.wav"), x, 44100.0, WavFormat::pcm16);
  const WavData w = read_wav(scratch("clip.wav"));
  CHECK(w.samples(0, 0) == doctest::Approx(32767.0 / 32768.0));
  CHECK(w.samples(1, 0) == -1.0);
}

TEST_CASE("signal helpers refuse more than two channels") {
  write_wav(scratch("quad.wav"), Eigen::MatrixXd::Zero(10, 4), 44100.0);
  CHECK(read_wav(scratch("quad.wav")).samples.cols() == 4);
  CHECK_THROWS_AS(read_signal(scratch("quad.wav")), ValidationError);
  write_signal(scratch("mono.wav"), SampledSignal::mono(Eigen::VectorXd::LinSpaced(5, 0, 0.5), 22050.0));
  const SampledSignal s = read_signal(scratch("mono.wav"));
  CHECK(s.sample_rate() == 22050.0);
  CHECK(s.channels() == 1);
}

TEST_CASE("malformed files are rejected") {
  std::ofstream(scratch("junk.wav")) << "not a wav";
  CHECK_THROWS_AS(read_wav(scratch("junk.wav")), ValidationError);
  CHECK_THROWS_AS(read_wav(scratch("missing.wav")), ValidationError);
  CHECK_THROWS_AS(write_wav(scratch("bad.wav"), Eigen::MatrixXd::Zero(3, 1), 44100.5), ValidationError);
}
