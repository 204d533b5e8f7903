// stagesim command-line entry points.
//
// Exit codes: 0 ok, 1 other failure, 2 validation error, 3 infeasible
// latency, 4 unreliable calibration.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stagesim/adapt.hpp"
#include "stagesim/analysis.hpp"
#include "stagesim/calibration.hpp"
#include "stagesim/control.hpp"
#include "stagesim/host.hpp"
#include "stagesim/latency.hpp"
#include "stagesim/session.hpp"
#include "stagesim/transport.hpp"
#include "stagesim/wav.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stagesim;

namespace {

enum Exit { kOk = 0, kFailure = 1, kValidation = 2, kInfeasible = 3, kUnreliable = 4 };

struct Common {
  fs::path config;
  fs::path out;
  bool json_out = false;
  bool allow_unreliable = false;
  std::optional<unsigned> seed;
  bool simulated_device = false;
};

// Replaces the directory of a manifest output when --out is given.
fs::path output_path(const fs::path& manifest_out, const Common& c) {
  const fs::path p = c.out.empty() ? manifest_out : c.out / manifest_out.filename();
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  return p;
}

void print(const Common& c, const json& j, const std::string& text) {
  if (c.json_out)
    std::cout << j.dump(2) << '\n';
  else
    std::cout << text;
  std::cout.flush();
}

json bands_json(const std::vector<FrequencyBand>& bands) {
  json a = json::array();
  for (const FrequencyBand& b : bands) a.push_back({{"lo_hz", b.lo_hz}, {"hi_hz", b.hi_hz}});
  return a;
}

json feasibility_json(const FeasibilityReport& f) {
  return {{"t_l_s", f.t_l},
          {"c", f.c},
          {"e_d_m", f.equivalent_distance_m},
          {"others_budget_s", f.others_budget_s},
          {"self_budget_s", f.self_budget_s},
          {"hearing_others_feasible", f.hearing_others_feasible},
          {"hearing_self_feasible", f.hearing_self_feasible},
          {"min_feasible_distance_m", f.min_feasible_distance_m},
          {"feasible", f.feasible()}};
}

std::string fmt(double v, int digits = 3) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

SessionConfig load_config(const Common& c) {
  if (c.config.empty()) throw ValidationError("--config is required");
  SessionConfig cfg = read_session_config(c.config);
  if (c.seed) cfg.scenario_order = presentation_order(cfg, c.seed);
  return cfg;
}

// ---------------------------------------------------------------------------

int cmd_calibrate(const Common& c) {
  if (c.config.empty()) throw ValidationError("--config is required");
  const std::vector<CalibrationItem> items = read_calibration_manifest(c.config);
  json report = {{"items", json::array()}};
  std::string text;
  bool unreliable = false;
  for (const CalibrationItem& item : items) {
    const CalibrationFilter k = synthesize_k(item.spec, item.options);
    const bool write = k.reliable() || c.allow_unreliable;
    fs::path out;
    if (write) {
      out = output_path(item.out, c);
      write_calibration_json(out, k);
    }
    unreliable = unreliable || !k.reliable();
    report["items"].push_back({{"id", k.id},
                               {"source", k.source},
                               {"listener", k.listener},
                               {"file", write ? json(out.string()) : json(nullptr)},
                               {"sample_rate", k.sample_rate},
                               {"fir_length", k.fir.size()},
                               {"bulk_delay_samples", k.bulk_delay_samples},
                               {"bulk_delay_s", k.bulk_delay_samples / k.sample_rate},
                               {"broadband_offset_db", k.broadband_offset_db()},
                               {"fir_max_deviation_db", k.fir_max_deviation_db()},
                               {"reliable", k.reliable()},
                               {"unreliable_bands", bands_json(k.unreliable_bands)}});
    text += k.id + ": offset " + fmt(k.broadband_offset_db(), 2) + " dB, bulk delay " +
            std::to_string(k.bulk_delay_samples) + " samples";
    if (!k.reliable()) {
      text += ", UNRELIABLE bands:";
      for (const FrequencyBand& b : k.unreliable_bands) text += " " + fmt(b.lo_hz, 0) + "-" + fmt(b.hi_hz, 0) + " Hz";
    }
    text += write ? " -> " + out.string() + "\n" : " (not written)\n";
  }
  const bool fail = unreliable && !c.allow_unreliable;
  report["ok"] = !fail;
  if (fail) text += "unreliable calibration; fix the responses or pass --allow-unreliable\n";
  print(c, report, text);
  return fail ? kUnreliable : kOk;
}

int cmd_adapt(const Common& c) {
  if (c.config.empty()) throw ValidationError("--config is required");
  const std::vector<AdaptItem> items = read_adapt_manifest(c.config);
  json report = {{"items", json::array()}};
  std::string text;
  for (const AdaptItem& item : items) {
    AdaptationPlan plan = item.plan;
    const SampledSignal raw = read_signal(item.brir_in);
    plan.calibration =
        item.calibration_path.empty() ? identity_calibration(raw.sample_rate()) : read_calibration_json(item.calibration_path);
    const ImpulseResponse h_prime(raw, IrKind::raw_simulated, plan.source, plan.listener,
                                  item.direct_sound_excluded && plan.skip_direct());
    const ImpulseResponse h = adapt(h_prime, plan);
    const fs::path out = output_path(item.brir_out, c);
    write_signal(out, h.data());
    write_adaptation_sidecar(sidecar_path(out), h, plan, item.brir_in);
    const AdaptationRecord& r = *h.adaptation();
    report["items"].push_back({{"source", plan.source},
                               {"listener", plan.listener},
                               {"brir_in", item.brir_in.string()},
                               {"brir_out", out.string()},
                               {"sidecar", sidecar_path(out).string()},
                               {"frames", h.frames()},
                               {"shift_s", r.shift_seconds},
                               {"advance_samples", r.advance_samples},
                               {"dropped_energy_db", r.dropped_energy_db},
                               {"direct_sound_skipped", h.direct_sound_skipped()},
                               {"calibration_id", r.calibration_id}});
    text += "(" + std::to_string(plan.source) + ", " + std::to_string(plan.listener) + ") advanced " +
            fmt(r.advance_samples, 2) + " samples -> " + out.string() + "\n";
  }
  report["ok"] = true;
  print(c, report, text);
  return kOk;
}

int cmd_validate(const Common& c) {
  const SessionConfig cfg = load_config(c);
  const FeasibilityReport f = session_feasibility(cfg);
  json report = {{"players", cfg.players.size()},
                 {"listeners", cfg.listeners.size()},
                 {"scenarios", cfg.scenarios.size()},
                 {"sample_rate", cfg.sample_rate},
                 {"block_size", cfg.block_size},
                 {"presentation_order", presentation_order(cfg, std::nullopt)},
                 {"feasibility", feasibility_json(f)},
                 {"override", cfg.feasibility_override.has_value()}};
  std::string text = std::to_string(cfg.players.size()) + " players, " + std::to_string(cfg.listeners.size()) +
                     " listeners, " + std::to_string(cfg.scenarios.size()) + " scenarios\nlatency " +
                     fmt(cfg.latency_s * 1e3, 2) + " ms, e_d = c t_l = " + fmt(f.equivalent_distance_m, 3) + " m: " +
                     (f.feasible() ? "feasible" : "INFEASIBLE") + "\n";
  if (!f.feasible()) {
    text += "minimum musician spacing for this latency: " + fmt(f.min_feasible_distance_m, 3) + " m\n";
    if (!cfg.feasibility_override) {
      report["ok"] = false;
      print(c, report, text);
      return kInfeasible;
    }
    text += "override recorded: " + cfg.feasibility_override->reason + "\n";
  }
  // Loads every BRIR and checks the adaptation metadata.
  load_session(cfg);
  report["ok"] = true;
  print(c, report, text + "session valid\n");
  return kOk;
}

Eigen::MatrixXd render_input(const SessionConfig& cfg, const std::vector<fs::path>& inputs, std::optional<double> duration) {
  if (inputs.empty()) throw ValidationError("render: --input is required");
  const int channels = cfg.input_channels();
  Eigen::MatrixXd x;
  auto check_rate = [&](const WavData& w, const fs::path& p) {
    if (w.sample_rate != cfg.sample_rate)
      throw ValidationError("render: " + p.string() + " is at " + fmt(w.sample_rate, 0) + " Hz, session runs at " +
                            fmt(cfg.sample_rate, 0) + " Hz");
  };
  if (inputs.size() == 1) {
    WavData w = read_wav(inputs[0]);
    check_rate(w, inputs[0]);
    if (w.samples.cols() != channels)
      throw ValidationError("render: " + inputs[0].string() + " has " + std::to_string(w.samples.cols()) +
                            " channels, session needs " + std::to_string(channels));
    x = std::move(w.samples);
  } else {
    // One mono file per player, in player order.
    if (inputs.size() != cfg.players.size())
      throw ValidationError("render: give one multichannel WAV or one mono WAV per player");
    std::vector<WavData> w;
    Eigen::Index frames = 0;
    for (const fs::path& p : inputs) {
      w.push_back(read_wav(p));
      check_rate(w.back(), p);
      if (w.back().samples.cols() != 1) throw ValidationError("render: " + p.string() + " is not mono");
      frames = std::max(frames, w.back().samples.rows());
    }
    x = Eigen::MatrixXd::Zero(frames, channels);
    for (std::size_t i = 0; i < w.size(); ++i)
      x.col(cfg.players[i].mic_channel).head(w[i].samples.rows()) = w[i].samples.col(0);
  }
  if (duration) {
    if (!(*duration > 0.0)) throw ValidationError("render: --duration must be positive");
    const auto frames = static_cast<Eigen::Index>(std::llround(*duration * cfg.sample_rate));
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(frames, channels);
    const Eigen::Index n = std::min(frames, x.rows());
    y.topRows(n) = x.topRows(n);
    x = std::move(y);
  }
  return x;
}

int cmd_render(const Common& c, const std::vector<fs::path>& inputs, const std::string& scenario,
               std::optional<double> duration) {
  SessionConfig cfg = load_config(c);
  if (c.out.empty()) throw ValidationError("render: --out is required");
  if (!scenario.empty()) {
    cfg.scenario_index(scenario);
    cfg.scenario_order = {scenario};
  }
  const Eigen::MatrixXd x = render_input(cfg, inputs, duration);
  LoadedSession session = load_session(cfg);
  Engine engine(std::move(session));
  const std::vector<Eigen::MatrixXd> y = render_offline(engine, x);
  fs::create_directories(c.out);
  json report = {{"scenario", engine.state().active_scenario},
                 {"frames", y.empty() ? 0 : y.front().rows()},
                 {"outputs", json::array()}};
  std::string text;
  for (std::size_t n = 0; n < y.size(); ++n) {
    const int id = engine.session().config.listeners[n].id;
    const fs::path p = c.out / ("listener_" + std::to_string(id) + ".wav");
    write_wav(p, y[n], cfg.sample_rate, WavFormat::float32);
    report["outputs"].push_back({{"listener", id}, {"file", p.string()}, {"peak", y[n].cwiseAbs().maxCoeff()}});
    text += "listener " + std::to_string(id) + " -> " + p.string() + "\n";
  }
  report["ok"] = true;
  print(c, report, text);
  return kOk;
}

int cmd_analyze(const Common& c, const std::vector<fs::path>& inputs, const std::vector<double>& bands,
                const std::vector<double>& envelope_band) {
  if (inputs.size() != 1) throw ValidationError("analyze: give exactly one --input IR");
  const fs::path& path = inputs[0];
  const ImpulseResponse h(read_signal(path), IrKind::raw_simulated);
  json report = {{"file", path.string()},
                 {"sample_rate", h.sample_rate()},
                 {"channels", h.channels()},
                 {"frames", h.frames()}};
  std::string text = path.string() + ": " + std::to_string(h.channels()) + " ch, " + fmt(h.data().duration(), 3) + " s\n";

  auto rt = [&](std::optional<double> band) -> json {
    try {
      return reverberation_time(h, band);
    } catch (const InsufficientSnr& e) {
      return nullptr;
    }
  };
  report["rt_s"] = rt(std::nullopt);
  text += "T20 broadband: " + (report["rt_s"].is_null() ? std::string("n/a (decay range too small)")
                                                        : fmt(report["rt_s"].get<double>(), 3) + " s") + "\n";
  report["rt_bands"] = json::array();
  for (double b : bands) {
    const json v = rt(b);
    report["rt_bands"].push_back({{"centre_hz", b}, {"rt_s", v}});
    text += "T20 " + fmt(b, 0) + " Hz: " + (v.is_null() ? std::string("n/a") : fmt(v.get<double>(), 3) + " s") + "\n";
  }

  try {
    const StageMetrics m = stage_support(h);
    report["stage_support"] = to_json(m);
    text += "ST_E " + fmt(m.st_early_db, 2) + " dB, ST_L " + fmt(m.st_late_db, 2) + " dB\n";
  } catch (const ValidationError& e) {
    report["stage_support"] = nullptr;
    text += std::string("stage support: ") + e.what() + "\n";
  }

  if (!envelope_band.empty()) {
    if (envelope_band.size() != 2) throw ValidationError("analyze: --envelope needs LO HI");
    const EnvelopeResult e = hilbert_envelope(h, envelope_band[0], envelope_band[1]);
    json je = to_json(e);
    if (!c.out.empty()) {
      fs::create_directories(c.out);
      const fs::path p = c.out / (path.stem().string() + "_envelope.csv");
      write_envelope_csv(p, e);
      je["file"] = p.string();
      text += "envelope -> " + p.string() + "\n";
    }
    report["envelope"] = je;
  }
  report["ok"] = true;
  print(c, report, text);
  return kOk;
}

void require_simulated_backend(const Common& c) {
  if (c.simulated_device) return;
  const char* env = std::getenv("STAGESIM_DEVICE");
  const std::string backend = env ? env : "simulated";
  if (backend != "simulated")
    throw ValidationError("audio backend '" + backend +
                          "' is not available in this build; use --simulated-device or STAGESIM_DEVICE=simulated");
  if (!env) std::cerr << "no audio hardware backend configured; using the simulated device\n";
}

int cmd_measure_latency(const Common& c, double fs, Eigen::Index block, Eigen::Index delay) {
  require_simulated_backend(c);
  LatencyResult r;
  json report;
  std::optional<FeasibilityReport> f;
  if (!c.config.empty()) {
    const SessionConfig cfg = load_config(c);
    const SimulatedDeviceConfig& sd = cfg.simulated_device;
    SimulatedDeviceOptions o = simulated_device_options(cfg);
    o.paced = false;
    o.loopback = Loopback{sd.loopback_output, sd.loopback_input, sd.loopback_delay_samples};
    SimulatedDevice dev(o);
    LatencyOptions lo;
    lo.c = cfg.c;
    r = measure_latency(dev, sd.loopback_output, sd.loopback_input, lo);
    SessionConfig measured = cfg;
    measured.latency_s = r.t_l_s;
    f = session_feasibility(measured);
  } else {
    SimulatedDeviceOptions o;
    o.sample_rate = fs;
    o.block_size = block;
    o.input_channels = 1;
    o.output_channels = 1;
    o.paced = false;
    o.loopback = Loopback{0, 0, delay};
    SimulatedDevice dev(o);
    r = measure_latency(dev, 0, 0);
  }
  report = to_json(r);
  std::string text = "t_l = " + fmt(r.t_l_s * 1e3, 3) + " ms (" + std::to_string(r.samples) +
                     " samples), e_d = c t_l = " + fmt(r.e_d_m, 3) + " m, SNR " + fmt(r.snr_db, 1) + " dB\n";
  if (f) {
    report["feasibility"] = feasibility_json(*f);
    text += std::string("measured latency is ") + (f->feasible() ? "feasible" : "INFEASIBLE") +
            " for the session geometry";
    text += f->feasible() ? "\n" : "; musicians must be at least " + fmt(f->min_feasible_distance_m, 3) + " m apart\n";
  }
  report["ok"] = !f || f->feasible();
  print(c, report, text);
  return (f && !f->feasible()) ? kInfeasible : kOk;
}

std::atomic<bool> g_stop{false};
void on_signal(int) { g_stop.store(true); }

int cmd_serve(const Common& c, const std::string& address, int port, const fs::path& static_dir,
              std::optional<double> duration) {
  require_simulated_backend(c);
  const SessionConfig cfg = load_config(c);
  SessionHost host(load_session(cfg));
  ControlServerOptions so;
  so.address = address;
  if (port < 0 || port > 65535) throw ValidationError("serve: port out of range");
  so.port = static_cast<std::uint16_t>(port);
  so.static_dir = static_dir;
  ControlServer server(host, so);
  server.start();
  const json hello = {{"listening", true},
                      {"address", address},
                      {"port", server.port()},
                      {"endpoint", "ws://" + address + ":" + std::to_string(server.port()) + "/ws"},
                      {"device", "simulated"},
                      {"schema_version", kControlSchemaVersion}};
  print(c, hello, "serving " + hello["endpoint"].get<std::string>() + " (simulated device)\n");

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  const auto t0 = std::chrono::steady_clock::now();
  while (!g_stop.load()) {
    if (duration && std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() >= *duration) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  server.stop();
  host.stop();
  host.flush_events();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stagesim: calibrated, latency-compensated real-time auralization"};
  app.require_subcommand(1);
  Common c;
  std::vector<fs::path> inputs;
  std::string scenario;
  std::optional<double> duration;
  std::vector<double> bands;
  std::vector<double> envelope_band;
  double sample_rate = 44100.0;
  Eigen::Index block = 64;
  Eigen::Index delay = 0;
  std::string address = "127.0.0.1";
  int port = 8088;
  fs::path static_dir;
  unsigned seed = 0;

  auto common = [&](CLI::App* s, bool config_required) {
    auto* o = s->add_option("--config", c.config, "Session config or command manifest (JSON)");
    if (config_required) o->required();
    s->add_flag("--json", c.json_out, "Machine-readable JSON on standard output");
  };

  auto* cal = app.add_subcommand("calibrate", "Synthesize calibration filters from a calibration manifest");
  common(cal, true);
  cal->add_option("--out", c.out, "Output directory (default: paths in the manifest)");
  cal->add_flag("--allow-unreliable", c.allow_unreliable, "Write filters even when bands could not be inverted");

  auto* ad = app.add_subcommand("adapt", "Adapt simulated BRIRs per an adapt manifest");
  common(ad, true);
  ad->add_option("--out", c.out, "Output directory (default: paths in the manifest)");

  auto* val = app.add_subcommand("validate", "Check a session config, its BRIRs and latency feasibility");
  common(val, true);
  val->add_option("--seed", seed, "Shuffle the scenario order with this seed");

  auto* ren = app.add_subcommand("render", "Offline render of a session to one stereo WAV per listener");
  common(ren, true);
  ren->add_option("--out", c.out, "Output directory")->required();
  ren->add_option("--input", inputs, "Multichannel mic WAV, or one mono WAV per player")->required();
  ren->add_option("--scenario", scenario, "Scenario id (default: first in presentation order)");
  ren->add_option("--duration", duration, "Input length in seconds (truncate or pad)");
  ren->add_option("--seed", seed, "Shuffle the scenario order with this seed");

  auto* an = app.add_subcommand("analyze", "Reverberation time, stage support and envelope of an IR");
  an->add_flag("--json", c.json_out, "Machine-readable JSON on standard output");
  an->add_option("--input", inputs, "IR WAV")->required();
  an->add_option("--band", bands, "Octave band centre for T20 (repeatable)");
  an->add_option("--envelope", envelope_band, "Hilbert envelope band LO HI in Hz")->expected(2);
  an->add_option("--out", c.out, "Directory for the envelope CSV");

  auto* ml = app.add_subcommand("measure-latency", "Sweep loopback measurement of the interface round trip");
  common(ml, false);
  ml->add_flag("--simulated-device", c.simulated_device, "Use the simulated device");
  ml->add_option("--sample-rate", sample_rate, "Simulated device rate without --config");
  ml->add_option("--block-size", block, "Simulated device block size without --config");
  ml->add_option("--loopback-delay", delay, "Extra simulated loopback delay in samples without --config");

  auto* sv = app.add_subcommand("serve", "Run the engine with the WebSocket control API");
  common(sv, true);
  sv->add_flag("--simulated-device", c.simulated_device, "Use the simulated device");
  sv->add_option("--address", address, "Bind address");
  sv->add_option("--port", port, "TCP port (0 picks a free one)");
  sv->add_option("--static", static_dir, "Directory served over HTTP GET");
  sv->add_option("--duration", duration, "Stop after this many seconds");
  sv->add_option("--seed", seed, "Shuffle the scenario order with this seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }
  for (CLI::App* s : {val, ren, sv})
    if (s->parsed() && s->count("--seed")) c.seed = seed;

  try {
    if (cal->parsed()) return cmd_calibrate(c);
    if (ad->parsed()) return cmd_adapt(c);
    if (val->parsed()) return cmd_validate(c);
    if (ren->parsed()) return cmd_render(c, inputs, scenario, duration);
    if (an->parsed()) return cmd_analyze(c, inputs, bands, envelope_band);
    if (ml->parsed()) return cmd_measure_latency(c, sample_rate, block, delay);
    if (sv->parsed()) return cmd_serve(c, address, port, static_dir, duration);
  } catch (const InfeasibleLatency& e) {
    std::cerr << "infeasible latency: " << e.what() << '\n';
    if (e.min_feasible_distance_m() > 0.0)
      std::cerr << "equivalent distance c t_l = " << e.min_feasible_distance_m() << " m\n";
    return kInfeasible;
  } catch (const UnreliableCalibration& e) {
    std::cerr << "unreliable calibration: " << e.what() << '\n';
    return kUnreliable;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
