#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "stagesim/partitioned_convolver.hpp"
#include "stagesim/signal.hpp"

using namespace stagesim;

namespace {

Eigen::VectorXd stream(PartitionedConvolver<double>& conv, const Eigen::VectorXd& x, Eigen::Index blocks) {
  const Eigen::Index B = conv.block_size();
  Eigen::VectorXd in = Eigen::VectorXd::Zero(blocks * B), out(blocks * B);
  in.head(std::min(x.size(), in.size())) = x.head(std::min(x.size(), in.size()));
  for (Eigen::Index b = 0; b < blocks; ++b) conv.process(in.data() + b * B, out.data() + b * B);
  return out;
}

}  // namespace

TEST_CASE("impulse in, impulse response out") {
  std::mt19937 rng(10);
  const Eigen::VectorXd h = oracle::uniform(rng, 300);
  PartitionedConvolver<double> conv(h, 64);
  CHECK(conv.partitions() == 5);
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(1);
  delta(0) = 1.0;
  const Eigen::VectorXd y = stream(conv, delta, 6);
  CHECK((y.head(300) - h).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(y.tail(84).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("zero in, zero out") {
  std::mt19937 rng(11);
  PartitionedConvolver<double> conv(oracle::uniform(rng, 100), 32);
  const Eigen::VectorXd y = stream(conv, Eigen::VectorXd::Zero(0), 10);
  CHECK(y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("eight random blocks match offline convolution") {
  std::mt19937 rng(12);
  const Eigen::VectorXd h = oracle::uniform(rng, 200);
  const Eigen::VectorXd x = oracle::uniform(rng, 8 * 64);
  PartitionedConvolver<double> conv(h, 64);
  const Eigen::VectorXd y = stream(conv, x, 8);
  const Eigen::VectorXd ref = oracle::direct_convolution(x, h);
  for (int b = 0; b < 8; ++b)
    CHECK(oracle::rel(y.segment(b * 64, 64), ref.segment(b * 64, 64)) < 1e-6);
}

TEST_CASE("streaming equals offline for every supported block size") {
  std::mt19937 rng(13);
  for (Eigen::Index B : {32, 48, 64, 128, 256}) {
    for (Eigen::Index taps : {1, 47, 1000, 4096}) {
      const Eigen::VectorXd h = oracle::uniform(rng, taps);
      const Eigen::VectorXd x = oracle::uniform(rng, 3000);
      PartitionedConvolver<double> conv(h, B);
      const Eigen::Index blocks = (x.size() + taps - 1 + B - 1) / B;
      const Eigen::VectorXd y = stream(conv, x, blocks);
      const Eigen::VectorXd ref = convolve(x, h);
      CHECK(oracle::rel(y.head(ref.size()), ref) < 1e-6);
    }
  }
}

TEST_CASE("single precision streaming path") {
  std::mt19937 rng(14);
  const Eigen::VectorXd h = oracle::uniform(rng, 4096);
  const Eigen::VectorXd x = oracle::uniform(rng, 48 * 20);
  PartitionedConvolver<float> conv(h.cast<float>(), 48);
  Eigen::VectorXf in = x.cast<float>(), out(x.size());
  for (Eigen::Index b = 0; b < 20; ++b) conv.process(in.data() + b * 48, out.data() + b * 48);
  const Eigen::VectorXd ref = oracle::direct_convolution(x, h).head(x.size());
  // float32 accumulation over 86 partitions; bounded well below audibility.
  CHECK(oracle::rel(out.cast<double>(), ref) < 1e-5);
}

TEST_CASE("block length is checked") {
  PartitionedConvolver<double> conv(Eigen::VectorXd::Ones(10), 16);
  Eigen::VectorXd in = Eigen::VectorXd::Zero(15), out(16);
  CHECK_THROWS_AS(conv.process(in, out), ValidationError);
  Eigen::VectorXd good = Eigen::VectorXd::Zero(16);
  CHECK_NOTHROW(conv.process(good, out));
  CHECK_THROWS_AS(PartitionedConvolver<double>(Eigen::VectorXd::Ones(10), 0), ValidationError);
}

TEST_CASE("shared history feeds several filters") {
  std::mt19937 rng(15);
  const Eigen::Index B = 64;
  const Eigen::VectorXd h1 = oracle::uniform(rng, 500), h2 = oracle::uniform(rng, 130);
  PartitionedFilter<double> f1(h1, B), f2(h2, B);
  SpectralHistory<double> hist(B, std::max(f1.partitions(), f2.partitions()));
  OverlapSaveOutput<double> ifft(B);
  const Eigen::VectorXd x = oracle::uniform(rng, 10 * B);
  Eigen::VectorXd y(10 * B);
  Eigen::VectorXcd acc(ifft.bins());
  for (Eigen::Index b = 0; b < 10; ++b) {
    hist.push(x.data() + b * B);
    acc.setZero();
    accumulate(hist, f1, acc);
    accumulate(hist, f2, acc);
    ifft.emit(acc, y.data() + b * B);
  }
  const Eigen::VectorXd ref = oracle::direct_convolution(x, h1).head(10 * B) +
                              oracle::direct_convolution(x, h2).head(10 * B);
  CHECK(oracle::rel(y, ref) < 1e-9);
}
