#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "stagesim/signal.hpp"

using namespace stagesim;

TEST_CASE("SampledSignal rejects bad construction") {
  CHECK_THROWS_AS(SampledSignal(Eigen::MatrixXd::Zero(4, 3), 44100.0), ValidationError);
  CHECK_THROWS_AS(SampledSignal(Eigen::MatrixXd::Zero(4, 1), 0.0), ValidationError);
  Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(4, 1);
  bad(2, 0) = std::nan("");
  CHECK_THROWS_AS(SampledSignal(bad, 48000.0), ValidationError);
  SampledSignal ok(Eigen::MatrixXd::Zero(441, 2), 44100.0);
  CHECK(ok.duration() == doctest::Approx(0.01));
}

TEST_CASE("adapted impulse responses need provenance") {
  SampledSignal s = SampledSignal::mono(Eigen::VectorXd::Ones(4), 48000.0);
  CHECK_THROWS_AS(ImpulseResponse(s, IrKind::adapted), ValidationError);
  CHECK_NOTHROW(ImpulseResponse(s, IrKind::adapted, 1, 2, false, AdaptationRecord{}));
  CHECK(ir_kind_from_string(to_string(IrKind::anechoic)) == IrKind::anechoic);
}

TEST_CASE("convolve: identity and sifting") {
  std::mt19937 rng(1);
  const Eigen::VectorXd x = oracle::uniform(rng, 37);
  const Eigen::VectorXd h = oracle::uniform(rng, 11);
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(1);
  delta(0) = 1.0;
  CHECK(oracle::rel(convolve(x, delta), x) < 1e-12);
  CHECK(oracle::rel(convolve(delta, h), h) < 1e-12);
}

TEST_CASE("convolve matches the direct sum") {
  std::mt19937 rng(2);
  const Eigen::VectorXd x = oracle::uniform(rng, 64, 0.0, 1.0);
  const Eigen::VectorXd h = oracle::uniform(rng, 16);
  const Eigen::VectorXd y = convolve(x, h);
  CHECK(y.size() == 64 + 16 - 1);
  CHECK(oracle::rel(y, oracle::direct_convolution(x, h)) < 1e-9);
}

TEST_CASE("convolve is linear") {
  std::mt19937 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::VectorXd x = oracle::uniform(rng, 200), y = oracle::uniform(rng, 200);
    const Eigen::VectorXd h = oracle::uniform(rng, 57);
    const double a = oracle::uniform(rng, 1)(0) * 3.0, b = oracle::uniform(rng, 1)(0) * 3.0;
    const Eigen::VectorXd lhs = convolve(Eigen::VectorXd(a * x + b * y), h);
    const Eigen::VectorXd rhs = a * convolve(x, h) + b * convolve(y, h);
    CHECK(oracle::rel(lhs, rhs) < 1e-9);
  }
}

TEST_CASE("signal convolve checks rates and broadcasts mono") {
  SampledSignal x = SampledSignal::mono(Eigen::VectorXd::Ones(8), 44100.0);
  SampledSignal h(Eigen::MatrixXd::Ones(3, 2), 44100.0);
  SampledSignal y = convolve(x, h);
  CHECK(y.channels() == 2);
  CHECK(y.frames() == 10);
  CHECK(y.samples()(4, 1) == doctest::Approx(3.0));
  CHECK_THROWS_AS(convolve(x, SampledSignal(Eigen::MatrixXd::Ones(3, 2), 48000.0)), ValidationError);
}

TEST_CASE("spectrum basics") {
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(16);
  delta(0) = 1.0;
  const Eigen::VectorXcd D = spectrum(delta, 16);
  CHECK((D.array() - std::complex<double>(1.0, 0.0)).abs().maxCoeff() < 1e-12);

  const Eigen::Index n = 64, k = 5;
  Eigen::VectorXd c(n);
  for (Eigen::Index i = 0; i < n; ++i) c(i) = std::cos(2.0 * M_PI * k * i / double(n));
  const Eigen::VectorXcd C = spectrum(c, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (i == k || i == n - k) CHECK(std::abs(C(i)) == doctest::Approx(n / 2.0));
    else CHECK(std::abs(C(i)) < 1e-9);
  }
  CHECK_THROWS_AS(spectrum(c, 32), ValidationError);
}

TEST_CASE("spectrum round trip, naive DFT and Parseval") {
  std::mt19937 rng(4);
  const Eigen::VectorXd x = oracle::uniform(rng, 128);
  const Eigen::VectorXcd X = spectrum(x, 200);
  CHECK(oracle::rel(inverse_spectrum(X).head(128), x) < 1e-9);
  CHECK(inverse_spectrum(X).tail(72).cwiseAbs().maxCoeff() < 1e-12);

  const auto ref = oracle::naive_dft(x, 200);
  double err = 0.0, norm = 0.0;
  for (Eigen::Index k = 0; k < 200; ++k) {
    err += std::norm(X(k) - ref[k]);
    norm += std::norm(ref[k]);
  }
  CHECK(std::sqrt(err / norm) < 1e-9);
  CHECK(X.squaredNorm() == doctest::Approx(200.0 * x.squaredNorm()).epsilon(1e-9));
}

TEST_CASE("fractional delay: integer shifts are exact") {
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(4);
  delta(0) = 1.0;
  const DelayedChannels d = delay_channels(delta, 10.0);
  CHECK(d.samples.rows() == 14);
  CHECK(d.samples(10, 0) == 1.0);
  CHECK(d.samples.cwiseAbs().sum() == 1.0);

  std::mt19937 rng(5);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(50);
  x.tail(30) = oracle::uniform(rng, 30);
  const DelayedChannels adv = delay_channels(x, -20.0);
  CHECK(adv.samples.rows() == 30);
  CHECK((adv.samples.col(0) - x.tail(30)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("fractional delay: half-sample matches the oversampled oracle") {
  FractionalDelayOptions opt;
  opt.crop_negative_time = false;
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(1);
  delta(0) = 1.0;
  const DelayedChannels d = delay_channels(delta, 0.5, opt);
  const Eigen::VectorXd got = d.samples.col(0);
  CHECK(d.first_index == -opt.half_width + 1);
  CHECK(got.size() == 2 * opt.half_width);
  const Eigen::VectorXd want =
      oracle::oversampled_delay(delta, 0.5, opt.half_width, opt.kaiser_beta, d.first_index, got.size());
  CHECK(oracle::rel(got, want) < 1e-4);
  // Symmetric about t = 0.5.
  for (Eigen::Index k = 0; k < got.size(); ++k)
    CHECK(got(k) == doctest::Approx(got(got.size() - 1 - k)).epsilon(1e-12));

  // Cropped form refuses: half the kernel lies before t = 0.
  CHECK_THROWS_AS(delay_channels(delta, 0.5), InfeasibleLatency);

  std::mt19937 rng(6);
  const Eigen::VectorXd x = oracle::bandlimited_burst(rng, 200, 0.8);
  for (double s : {3.25, 17.75, -0.5, -6.125}) {
    const DelayedChannels y = delay_channels(x, s, opt);
    const Eigen::VectorXd ref = oracle::oversampled_delay(x, s, opt.half_width, opt.kaiser_beta,
                                                          y.first_index, y.samples.rows());
    CHECK(oracle::rel(y.samples.col(0), ref) < 1e-4);
  }
}

TEST_CASE("fractional delay composes additively for band-limited input") {
  std::mt19937 rng(7);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(600);
  x.segment(200, 300) = oracle::bandlimited_burst(rng, 300, 0.7);
  for (auto [s1, s2] : {std::pair{2.3, 4.45}, {-10.4, 3.9}, {0.5, 0.5}, {-50.25, -30.6}}) {
    const Eigen::VectorXd twice = delay_channels(delay_channels(x, s1).samples, s2).samples.col(0);
    const Eigen::VectorXd once = delay_channels(x, s1 + s2).samples.col(0);
    CHECK(oracle::rel(twice, once) < 1e-4);
  }
}

TEST_CASE("fractional delay refuses energy-cropping advances") {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(50);
  x(10) = 1.0;
  CHECK_THROWS_AS(delay_channels(x, -11.0), InfeasibleLatency);
  try {
    delay_channels(x, -20.0);
    FAIL("expected InfeasibleLatency");
  } catch (const InfeasibleLatency& e) {
    CHECK(e.dropped_energy_db() == doctest::Approx(0.0));
  }
  // Tail energy far below the tolerance may be dropped.
  x(0) = 1e-4;
  CHECK_NOTHROW(delay_channels(x, -5.0));
  FractionalDelayOptions strict;
  strict.energy_loss_tolerance_db = 100.0;
  CHECK_THROWS_AS(delay_channels(x, -5.0, strict), InfeasibleLatency);
}

TEST_CASE("fractional delay on an impulse response keeps metadata") {
  Eigen::MatrixXd st = Eigen::MatrixXd::Zero(10, 2);
  st(0, 0) = 1.0;
  st(1, 1) = -1.0;
  ImpulseResponse h(SampledSignal(st, 44100.0), IrKind::raw_simulated, 2, 1, true);
  const ImpulseResponse d = fractional_delay(h, 10.0 / 44100.0);
  CHECK(d.channels() == 2);
  CHECK(d.source_id() == 2);
  CHECK(d.direct_sound_skipped());
  CHECK(d.data().samples()(10, 0) == doctest::Approx(1.0));
  CHECK(d.data().samples()(11, 1) == doctest::Approx(-1.0));
}

TEST_CASE("latency advance for a 4 ms interface and 1 m pickup") {
  const double fs = 44100.0, c = 343.0;
  const double advance = (0.004 + 1.0 / c) * fs;
  CHECK(advance == doctest::Approx(305.0).epsilon(1e-3));
  // An impulse placed well after the advance moves to the expected position.
  Eigen::VectorXd x = Eigen::VectorXd::Zero(800);
  x(600) = 1.0;
  const Eigen::VectorXd y = delay_channels(x, -advance).samples.col(0);
  Eigen::Index peak;
  y.maxCoeff(&peak);
  CHECK(peak == std::lround(600 - advance));
}
