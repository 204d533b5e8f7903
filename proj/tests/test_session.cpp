#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "session_fixtures.hpp"
#include "stagesim/filters.hpp"
#include "stagesim/transport.hpp"
#include "stagesim/wav.hpp"

using namespace stagesim;
using namespace fixture;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

using Grid = std::vector<std::vector<std::vector<MatrixXd>>>;

Grid random_grid(std::mt19937& rng, int scenarios, int M, int N, Index max_len) {
  std::uniform_int_distribution<Index> len(1, max_len);
  Grid g(scenarios);
  for (auto& s : g) {
    s.resize(M);
    for (auto& row : s)
      for (int n = 0; n < N; ++n) row.push_back(random_stereo_ir(rng, len(rng)));
  }
  return g;
}

Grid delta_grid(int scenarios, int M, int N, double gain = 1.0) {
  Grid g(scenarios, std::vector<std::vector<MatrixXd>>(M, std::vector<MatrixXd>(N, stereo_delta(1, 0, gain))));
  return g;
}

MatrixXd random_input(std::mt19937& rng, Index frames, int channels) {
  MatrixXd x(frames, channels);
  for (int c = 0; c < channels; ++c) x.col(c) = oracle::uniform(rng, frames, -0.5, 0.5);
  return x;
}

VectorXd sine(Index n, double f, double fs, double amp) {
  VectorXd x(n);
  for (Index i = 0; i < n; ++i) x(i) = amp * std::sin(2.0 * M_PI * f * i / fs);
  return x;
}

int count_type(const std::vector<nlohmann::json>& ev, const std::string& type) {
  int n = 0;
  for (const auto& e : ev) n += e.at("type") == type;
  return n;
}

}  // namespace

TEST_CASE("single player with a delta BRIR passes input to both ears") {
  const SessionConfig c = grid_config(1, 1, {"A"}, 64);
  Engine e(grid_session(c, delta_grid(1, 1, 1)));
  std::mt19937 rng(1);
  const MatrixXd x = random_input(rng, 64 * 10, 1);
  const MatrixXd y = run_blocks(e, x);
  CHECK((y.col(0) - x.col(0)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((y.col(1) - x.col(0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("2x2 streamed mix equals the offline two-term convolution sum") {
  for (Index B : {48, 64, 256}) {
    CAPTURE(B);
    std::mt19937 rng(100 + B);
    const SessionConfig c = grid_config(2, 2, {"A"}, B);
    const Grid g = random_grid(rng, 1, 2, 2, 4096);
    Engine e(grid_session(c, g));
    const Index frames = 8 * B;
    const MatrixXd x = random_input(rng, frames, 2);
    const MatrixXd y = run_blocks(e, x);
    for (int n = 0; n < 2; ++n)
      for (int ear = 0; ear < 2; ++ear) {
        VectorXd ref = VectorXd::Zero(frames);
        for (int m = 0; m < 2; ++m) ref += oracle::direct_convolution(x.col(m), g[0][m][n].col(ear)).head(frames);
        VectorXd got = y.col(2 * n + ear);
        for (Index k = 0; k < 8; ++k) {
          CAPTURE(k);
          CHECK(oracle::rel(got.segment(k * B, B), ref.segment(k * B, B)) < 1e-6);
        }
      }
  }
}

TEST_CASE("all-zero inputs give all-zero outputs") {
  std::mt19937 rng(3);
  const SessionConfig c = grid_config(2, 2, {"A"}, 64);
  Engine e(grid_session(c, random_grid(rng, 1, 2, 2, 2000)));
  const MatrixXd y = run_blocks(e, MatrixXd::Zero(64 * 40, 2));
  CHECK(y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("superposition over single-player sessions") {
  std::mt19937 rng(4);
  const Index B = 64;
  const Grid g = random_grid(rng, 1, 2, 2, 1500);
  const MatrixXd x = random_input(rng, 30 * B, 2);
  Engine full(grid_session(grid_config(2, 2, {"A"}, B), g));
  const MatrixXd y = run_blocks(full, x);

  MatrixXd sum = MatrixXd::Zero(y.rows(), y.cols());
  for (int m = 0; m < 2; ++m) {
    // Same routing with only player m left on the stage.
    SessionConfig c = grid_config(2, 2, {"A"}, B);
    c.players.erase(c.players.begin() + (1 - m));
    for (auto& s : c.scenarios)
      s.brirs.erase(std::remove_if(s.brirs.begin(), s.brirs.end(), [&](const BrirRef& b) { return b.source != m + 1; }),
                    s.brirs.end());
    Grid single(1, {g[0][m]});
    Engine one(grid_session(c, single));
    MatrixXd xin = MatrixXd::Zero(x.rows(), one.input_channels());
    xin.col(m) = x.col(m);
    sum += run_blocks(one, xin);
  }
  for (int ch = 0; ch < 4; ++ch) CHECK(oracle::rel(y.col(ch), sum.col(ch)) < 1e-6);
}

TEST_CASE("switching to the active scenario is a logged no-op") {
  const SessionConfig c = grid_config(1, 1, {"A", "B"}, 64);
  Engine e(grid_session(c, delta_grid(2, 1, 1)));
  drain(e);
  e.switch_scenario("A");
  const auto ev = drain(e);
  REQUIRE(ev.size() == 1);
  CHECK(ev[0]["type"] == "scenario_noop");
  CHECK(ev[0]["scenario"] == "A");
  CHECK(e.state().active_scenario == "A");
  CHECK_FALSE(e.state().crossfading);
  CHECK_THROWS_AS(e.switch_scenario("nope"), ValidationError);
}

TEST_CASE("switch during silence keeps the output silent") {
  std::mt19937 rng(5);
  const SessionConfig c = grid_config(2, 2, {"A", "B"}, 64);
  Engine e(grid_session(c, random_grid(rng, 2, 2, 2, 3000)));
  const MatrixXd y = run_blocks(e, MatrixXd::Zero(64 * 100, 2), [](Engine& en, Index k) {
    if (k == 10) en.switch_scenario("B");
  });
  CHECK(y.cwiseAbs().maxCoeff() == 0.0);
  CHECK(e.state().active_scenario == "B");
}

TEST_CASE("crossfade schedule and deferred switches") {
  const double fs = 44100.0;
  const Index B = 64;
  SessionConfig c = grid_config(1, 1, {"A", "B", "C"}, B, fs);
  Grid g = delta_grid(3, 1, 1);
  g[1][0][0] *= 0.0;  // B silent
  g[2][0][0] *= 0.5;
  Engine e(grid_session(c, g));
  const Index L = std::llround(0.05 * fs);

  SUBCASE("raised-cosine 50 ms fade from A to silence") {
    const MatrixXd x = MatrixXd::Ones(B * 60, 1);
    const MatrixXd y = run_blocks(e, x, [](Engine& en, Index k) {
      if (k == 4) en.switch_scenario("B");
    });
    for (Index i = 0; i < 4 * B; ++i) REQUIRE(y(i, 0) == doctest::Approx(1.0).epsilon(1e-12));
    for (Index t = 0; t < L; ++t) {
      const double expect = 0.5 + 0.5 * std::cos(M_PI * t / L);
      REQUIRE(y(4 * B + t, 0) == doctest::Approx(expect).epsilon(1e-12));
    }
    CHECK(y.col(0).tail(y.rows() - 4 * B - L).cwiseAbs().maxCoeff() < 1e-15);
  }

  SUBCASE("a request during a fade waits for it to end") {
    const MatrixXd x = MatrixXd::Ones(B * 120, 1);
    Index fade_end_block = 4 + (L + B - 1) / B;
    const MatrixXd y = run_blocks(e, x, [](Engine& en, Index k) {
      if (k == 4) en.switch_scenario("B");
      if (k == 6) en.switch_scenario("C");
    });
    CHECK(e.state().active_scenario == "C");
    // While A -> B runs the output follows that fade only.
    const Index t = 6 * B + 10 - 4 * B;
    CHECK(y(6 * B + 10, 0) == doctest::Approx(0.5 + 0.5 * std::cos(M_PI * t / L)));
    // B -> C starts at the first boundary after the first fade.
    CHECK(std::abs(y(fade_end_block * B, 0)) < 1e-12);
    CHECK(y(y.rows() - 1, 0) == doctest::Approx(0.5));
    const auto ev = drain(e);
    REQUIRE(count_type(ev, "scenario_switch") == 2);
    std::vector<nlohmann::json> sw;
    for (const auto& j : ev)
      if (j["type"] == "scenario_switch") sw.push_back(j);
    CHECK(sw[0]["from"] == "A");
    CHECK(sw[0]["to"] == "B");
    CHECK(sw[1]["from"] == "B");
    CHECK(sw[1]["to"] == "C");
    CHECK(sw[1]["sample"].get<Index>() == fade_end_block * B);
  }
}

namespace {

// Largest 10 ms RMS, in dBFS, of the output above 5 kHz after the switch.
double click_level_db(const VectorXd& y, double fs, Index from) {
  BiquadCascade hp = butterworth_bandpass(5000.0, 12000.0, fs, 4);
  const VectorXd f = hp.filter(y);
  const Index w = std::llround(0.01 * fs);
  double worst = 0.0;
  for (Index i = from; i + w <= f.size(); i += w / 2) worst = std::max(worst, f.segment(i, w).squaredNorm() / w);
  return 10.0 * std::log10(std::max(worst, 1e-300));
}

}  // namespace

TEST_CASE("switch mid-tone stays below -60 dBFS click energy") {
  const double fs = 44100.0;
  const Index B = 64;
  const SessionConfig c = grid_config(1, 1, {"A", "B"}, B, fs);
  Grid g = delta_grid(2, 1, 1);
  g[1][0][0] *= -1.0;  // polarity flip: the worst case for a hard cut
  const MatrixXd x = sine(Index(fs), 1000.0, fs, 0.5);
  const Index switch_block = Index(0.5 * fs) / B;
  auto run = [&](double crossfade) {
    SessionConfig cc = c;
    cc.crossfade_s = crossfade;
    Engine e(grid_session(cc, g));
    return run_blocks(e, x, [&](Engine& en, Index k) {
      if (k == switch_block) en.switch_scenario("B");
    }).col(0).eval();
  };
  const Index from = Index(0.25 * fs);
  const double faded = click_level_db(run(0.05), fs, from);
  const double hard = click_level_db(run(0.0), fs, from);
  MESSAGE("click level, 50 ms fade: " << faded << " dBFS, hard cut: " << hard << " dBFS");
  CHECK(faded < -60.0);
  CHECK(hard > -60.0);  // the measure does see a click
}

TEST_CASE("output before the switch block is bit-identical to the no-switch run") {
  std::mt19937 rng(6);
  const SessionConfig c = grid_config(2, 2, {"A", "B"}, 64);
  const Grid g = random_grid(rng, 2, 2, 2, 2500);
  const MatrixXd x = random_input(rng, 64 * 50, 2);
  Engine e1(grid_session(c, g)), e2(grid_session(c, g));
  const MatrixXd ref = run_blocks(e1, x);
  const MatrixXd sw = run_blocks(e2, x, [](Engine& en, Index k) {
    if (k == 20) en.switch_scenario("B");
  });
  CHECK((ref.topRows(20 * 64).array() == sw.topRows(20 * 64).array()).all());
  CHECK_FALSE((ref.middleRows(20 * 64, 64).array() == sw.middleRows(20 * 64, 64).array()).all());
}

TEST_CASE("missing input channel is silenced and logged as an xrun") {
  const SessionConfig c = grid_config(2, 1, {"A"}, 32);
  Engine e(grid_session(c, delta_grid(1, 2, 1)));
  drain(e);
  MatrixXd in(32, 2);
  in.col(0).setConstant(0.25);
  in.col(1).setConstant(0.5);
  MatrixXd out(32, 2);
  e.process(in, out, 0b10);
  CHECK((out.col(0).array() - 0.25).abs().maxCoeff() < 1e-12);
  e.process(in, out, 0);
  CHECK((out.col(0).array() - 0.75).abs().maxCoeff() < 1e-12);
  const auto ev = drain(e);
  REQUIRE(ev.size() == 1);
  CHECK(ev[0]["type"] == "xrun");
  CHECK(ev[0]["kind"] == "underrun");
  CHECK(ev[0]["missing_channels"] == nlohmann::json::array({1}));
  CHECK(e.state().xruns == 1);
}

TEST_CASE("talkback adds the other players' microphones") {
  SessionConfig c = grid_config(2, 2, {"A"}, 32);
  c.talkback_gain = 0.5;
  Grid g = delta_grid(1, 2, 2, 0.0);
  Engine e(grid_session(c, g));
  MatrixXd in(32, 2);
  in.col(0).setConstant(0.2);
  in.col(1).setConstant(0.4);
  MatrixXd out(32, 4);
  e.process(in, out);
  CHECK(out.cwiseAbs().maxCoeff() == 0.0);
  e.set_talkback(true);
  e.process(in, out);
  CHECK(out(5, 0) == doctest::Approx(0.2));  // listener 1 hears player 2
  CHECK(out(5, 1) == doctest::Approx(0.2));
  CHECK(out(5, 2) == doctest::Approx(0.1));  // listener 2 hears player 1
  CHECK(e.state().talkback);
  const auto ev = drain(e);
  REQUIRE(count_type(ev, "talkback") == 1);
}

TEST_CASE("meter ballistics: 300 ms RMS window and 1.5 s peak hold") {
  const double fs = 48000.0;
  const Index B = 48;  // 1 ms blocks
  const SessionConfig c = grid_config(1, 1, {"A"}, B, fs);
  Engine e(grid_session(c, delta_grid(1, 1, 1)));
  MatrixXd in = MatrixXd::Zero(B, 1), out(B, 2);

  // 0.6 s of a 0.8 amplitude sine: RMS settles at 0.8 / sqrt 2.
  for (Index k = 0; k < 600; ++k) {
    for (Index i = 0; i < B; ++i) in(i, 0) = 0.8 * std::sin(2.0 * M_PI * 1000.0 * (k * B + i) / fs);
    e.process(in, out);
    if (k == 149) CHECK(e.meters().input_rms[0] == doctest::Approx(0.8 / std::sqrt(2.0) * std::sqrt(0.5)).epsilon(1e-3));
  }
  MeterFrame f = e.meters();
  CHECK(f.input_rms[0] == doctest::Approx(0.8 / std::sqrt(2.0)).epsilon(1e-9));
  CHECK(f.output_rms[0] == doctest::Approx(0.8 / std::sqrt(2.0)).epsilon(1e-9));
  CHECK(f.input_peak[0] == doctest::Approx(0.8).epsilon(1e-9));
  CHECK(f.sample == 600 * B);

  // Silence: RMS decays monotonically to zero within 300 ms, the peak holds
  // for 1.5 s then drops.
  in.setZero();
  double last_rms = f.input_rms[0];
  for (Index k = 1; k <= 1600; ++k) {
    e.process(in, out);
    f = e.meters();
    REQUIRE(f.input_rms[0] <= last_rms);
    last_rms = f.input_rms[0];
    if (k == 300) CHECK(f.input_rms[0] == 0.0);
    if (k == 1500) CHECK(f.input_peak[0] == doctest::Approx(0.8).epsilon(1e-9));
    if (k == 1501) CHECK(f.input_peak[0] == 0.0);
  }
}

TEST_CASE("commands issued while processing apply at the next block boundary") {
  const SessionConfig c = grid_config(1, 1, {"A", "B"}, 64);
  Engine e(grid_session(c, delta_grid(2, 1, 1)));
  e.begin_processing();
  e.switch_scenario("B");
  e.log_marker("questionnaire start");
  CHECK(e.state().active_scenario == "A");
  MatrixXd in = MatrixXd::Zero(64, 1), out(64, 2);
  e.process(in, out);
  CHECK(e.state().active_scenario == "B");
  e.end_processing();
  const auto ev = drain(e);
  REQUIRE(ev.size() == 4);
  CHECK(ev[0]["type"] == "transport_start");
  CHECK(ev[1]["type"] == "scenario_switch");
  CHECK(ev[1]["sample"] == 0);
  CHECK(ev[2]["type"] == "marker");
  CHECK(ev[2]["text"] == "questionnaire start");
  CHECK(ev[3]["type"] == "transport_stop");
  for (std::size_t i = 0; i < ev.size(); ++i) {
    CHECK(ev[i]["seq"] == i + 1);
    if (i) CHECK(ev[i]["t_mono_s"].get<double>() >= ev[i - 1]["t_mono_s"].get<double>());
  }
}

TEST_CASE("session validation") {
  const SessionConfig good = grid_config(2, 2, {"A"}, 64);
  SUBCASE("hearing-oneself BRIR must skip the direct sound") {
    std::vector<LoadedScenario> sc{{"A", "A", {}}};
    sc[0].ir.resize(2);
    for (int m = 0; m < 2; ++m)
      for (int n = 0; n < 2; ++n)
        sc[0].ir[m].push_back(ImpulseResponse(SampledSignal(stereo_delta(4), 44100.0), IrKind::adapted, m + 1, n + 1,
                                              false, AdaptationRecord{}));
    CHECK_THROWS_AS(make_session(good, sc), ValidationError);
  }
  SUBCASE("raw BRIRs are refused") {
    std::vector<LoadedScenario> sc{{"A", "A", {}}};
    sc[0].ir.resize(2);
    for (int m = 0; m < 2; ++m)
      for (int n = 0; n < 2; ++n)
        sc[0].ir[m].push_back(
            ImpulseResponse(SampledSignal(stereo_delta(4), 44100.0), IrKind::raw_simulated, m + 1, n + 1, m == n));
    CHECK_THROWS_AS(make_session(good, sc), ValidationError);
  }
  SUBCASE("missing pair") {
    SessionConfig c = good;
    c.scenarios[0].brirs.pop_back();
    CHECK_THROWS_AS(make_session(c, {}), ValidationError);
  }
  SUBCASE("duplicate pair") {
    SessionConfig c = good;
    c.scenarios[0].brirs.back() = c.scenarios[0].brirs.front();
    CHECK_THROWS_AS(make_session(c, {}), ValidationError);
  }
  SUBCASE("infeasible latency needs an override") {
    SessionConfig c = good;
    c.latency_s = 0.017;
    try {
      grid_session(c, delta_grid(1, 2, 2));
      FAIL("expected InfeasibleLatency");
    } catch (const InfeasibleLatency& e) {
      CHECK(e.min_feasible_distance_m() == doctest::Approx(343.0 * 0.017));
    }
    c.feasibility_override = FeasibilityOverride{"pilot run", "operator A"};
    LoadedSession s = grid_session(c, delta_grid(1, 2, 2));
    CHECK(s.override_used);
    Engine e(std::move(s));
    const auto ev = drain(e);
    REQUIRE(ev.size() == 1);
    CHECK(ev[0]["type"] == "feasibility_override");
    CHECK(ev[0]["reason"] == "pilot run");
    CHECK(ev[0]["operator"] == "operator A");
    CHECK(ev[0]["min_feasible_distance_m"].get<double>() == doctest::Approx(343.0 * 0.017 - 1.0));
  }
}

TEST_CASE("session config JSON round trip and presentation order") {
  SessionConfig c = grid_config(2, 2, {"S", "M", "L"}, 64);
  c.scenario_order = {"M", "S", "M", "L"};
  c.geometry = StageGeometry{};
  const nlohmann::json j = to_json(c);
  const SessionConfig back = parse_session_config(j, {});
  CHECK(to_json(back) == j);
  CHECK(presentation_order(back, std::nullopt) == c.scenario_order);
  const auto o1 = presentation_order(back, 42u), o2 = presentation_order(back, 42u);
  CHECK(o1 == o2);
  auto sorted = o1;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<std::string>{"L", "M", "M", "S"});

  nlohmann::json bad = j;
  bad["schema_version"] = 2;
  CHECK_THROWS_AS(parse_session_config(bad, {}), ValidationError);
  bad = j;
  bad["scenario_order"] = {"X"};
  CHECK_THROWS_AS(parse_session_config(bad, {}), ValidationError);
  bad = j;
  bad.erase("block_size");
  CHECK_THROWS_AS(parse_session_config(bad, {}), ValidationError);
}

TEST_CASE("session files load from disk with sidecars") {
  const auto dir = std::filesystem::temp_directory_path() / "stagesim_session_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  SessionConfig c = grid_config(2, 1, {"A"}, 64);
  std::mt19937 rng(9);
  for (auto& b : c.scenarios[0].brirs) {
    AdaptationPlan plan;
    plan.source = b.source;
    plan.listener = b.listener;
    const ImpulseResponse h = adapted_ir(random_stereo_ir(rng, 300), 44100.0, b.source, b.listener);
    write_wav(dir / b.path, h.data().samples(), 44100.0);
    write_adaptation_sidecar(sidecar_path(dir / b.path), h, plan, "raw.wav");
  }
  std::ofstream(dir / "session.json") << to_json(c).dump(2);
  const SessionConfig cfg = read_session_config(dir / "session.json");
  const LoadedSession s = load_session(cfg);
  CHECK(s.scenarios[0].ir[1][0].frames() == 300);
  CHECK(s.scenarios[0].ir[0][0].direct_sound_skipped());
  std::filesystem::remove(dir / c.scenarios[0].brirs[0].path);
  CHECK_THROWS_AS(read_session_config(dir / "session.json"), ValidationError);
  std::filesystem::remove_all(dir);
}
