#include "stagesim/adapt.hpp"

#include <cmath>

#include "json_io.hpp"
#include "stagesim/wav.hpp"

namespace stagesim {
namespace {

void check_plan(const AdaptationPlan& p) {
  if (!(p.t_l >= 0.0)) throw ValidationError("adapt: t_l must be >= 0");
  if (!(p.d_ms >= 0.0)) throw ValidationError("adapt: d_ms must be >= 0");
  if (!(p.c > 0.0)) throw ValidationError("adapt: c must be positive");
  if (!(p.energy_loss_tolerance_db > 0.0)) throw ValidationError("adapt: tolerance must be positive");
  if (p.calibration.fir.size() == 0) throw ValidationError("adapt: empty calibration filter");
}

void check_rate(const ImpulseResponse& h, const CalibrationFilter& k) {
  // A single-tap K is a gain and fits every rate.
  if (k.fir.size() > 1 && h.sample_rate() != k.sample_rate)
    throw ValidationError("adapt: BRIR and calibration filter sample rates differ");
}

Eigen::MatrixXd filter_channels(const Eigen::MatrixXd& x, const Eigen::VectorXd& fir) {
  if (fir.size() == 1) return x * fir(0);
  Eigen::MatrixXd y(x.rows() + fir.size() - 1, x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) y.col(c) = convolve(x.col(c), fir);
  return y;
}

DelayedChannels shift_or_report(const Eigen::MatrixXd& y, double shift, const AdaptationPlan& plan) {
  FractionalDelayOptions o;
  o.energy_loss_tolerance_db = plan.energy_loss_tolerance_db;
  try {
    return delay_channels(y, shift, o);
  } catch (const InfeasibleLatency& e) {
    const double e_d = plan.c * plan.t_l;
    throw InfeasibleLatency("adapt: advancing BRIR (" + std::to_string(plan.source) + ", " +
                                std::to_string(plan.listener) + ") by " + std::to_string(-shift) +
                                " samples drops " + std::to_string(e.dropped_energy_db()) +
                                " dB of its energy; distances below c t_l = " + std::to_string(e_d) +
                                " m cannot be rendered",
                            e.dropped_energy_db(), e_d);
  }
}

}  // namespace

ImpulseResponse remove_direct_sound(const ImpulseResponse& h, const DirectSoundWindow& window) {
  if (!(window.edge_s > 0.0) || !(window.first_reflection_s >= window.edge_s))
    throw ValidationError("direct sound window: need first_reflection_s >= edge_s > 0");
  const double fs = h.sample_rate();
  const double t0 = window.first_reflection_s - window.edge_s;
  Eigen::MatrixXd x = h.data().samples();
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double t = i / fs;
    if (t >= window.first_reflection_s) break;
    const double w = t < t0 ? 0.0 : 0.5 * (1.0 - std::cos(M_PI * (t - t0) / window.edge_s));
    x.row(i) *= w;
  }
  return ImpulseResponse(SampledSignal(std::move(x), fs), h.kind(), h.source_id(), h.listener_id(), true,
                         h.adaptation());
}

double AdaptationPlan::advance_samples(double fs) const {
  return (t_l + d_ms / c) * fs + (compensate_bulk_delay ? extra_bulk_delay() : 0);
}

double AdaptationPlan::net_shift_seconds() const {
  const double fs = calibration.sample_rate;
  return -(t_l + d_ms / c) + (compensate_bulk_delay ? 0.0 : extra_bulk_delay() / fs);
}

ImpulseResponse adapt(const ImpulseResponse& h_prime, const AdaptationPlan& plan) {
  check_plan(plan);
  if (h_prime.kind() != IrKind::raw_simulated) throw ValidationError("adapt: input must be a raw simulated BRIR");
  if ((h_prime.source_id() != 0 && h_prime.source_id() != plan.source) ||
      (h_prime.listener_id() != 0 && h_prime.listener_id() != plan.listener))
    throw ValidationError("adapt: BRIR pair differs from the plan's pair");
  check_rate(h_prime, plan.calibration);

  ImpulseResponse h = h_prime;
  if (plan.skip_direct()) {
    if (!h.direct_sound_skipped()) {
      if (!plan.direct_window)
        throw ValidationError("adapt: hearing-oneself BRIR must be simulated without direct sound");
      h = remove_direct_sound(h, *plan.direct_window);
    }
  } else {
    if (h.direct_sound_skipped()) throw ValidationError("adapt: direct sound may only be skipped when source == listener");
    if (plan.direct_window) throw ValidationError("adapt: direct sound window given for a hearing-others pair");
  }

  const double fs = h.sample_rate();
  const Eigen::MatrixXd y = filter_channels(h.data().samples(), plan.calibration.fir);
  const double advance = plan.advance_samples(fs);
  const DelayedChannels out = shift_or_report(y, -advance, plan);

  AdaptationRecord rec;
  rec.shift_seconds = -(plan.t_l + plan.d_ms / plan.c) +
                      (plan.compensate_bulk_delay ? 0.0 : plan.extra_bulk_delay() / fs);
  rec.advance_samples = advance;
  rec.calibration_id = plan.calibration.id;
  rec.bulk_delay_samples = plan.extra_bulk_delay();
  rec.bulk_delay_compensated = plan.compensate_bulk_delay;
  rec.dropped_energy_db = out.dropped_energy_db;
  rec.energy_loss_tolerance_db = plan.energy_loss_tolerance_db;
  return ImpulseResponse(SampledSignal(out.samples, fs), IrKind::adapted, plan.source, plan.listener,
                         plan.skip_direct(), rec);
}

ImpulseResponse adapt_inverse(const ImpulseResponse& h, const AdaptationPlan& plan) {
  check_plan(plan);
  if (h.kind() != IrKind::adapted) throw ValidationError("adapt_inverse: input must be an adapted BRIR");
  check_rate(h, plan.calibration);
  const CalibrationFilter k_inv = invert(plan.calibration);
  const double fs = h.sample_rate();
  const Eigen::MatrixXd y = filter_channels(h.data().samples(), k_inv.fir);
  const double shift = (plan.t_l + plan.d_ms / plan.c) * fs - k_inv.bulk_delay_samples -
                       (plan.compensate_bulk_delay ? 0 : plan.extra_bulk_delay());
  const DelayedChannels out = shift_or_report(y, shift, plan);
  return ImpulseResponse(SampledSignal(out.samples, fs), IrKind::raw_simulated, plan.source, plan.listener,
                         h.direct_sound_skipped());
}

FeasibilityReport check_feasibility(double t_l, const StageGeometry& g, double c) {
  if (!(t_l >= 0.0)) throw ValidationError("check_feasibility: t_l must be >= 0");
  if (!(c > 0.0) || !(g.min_distance_m > 0.0) || !(g.receiver_height_m > 0.0) || !(g.d_ms >= 0.0) ||
      !(g.self_horizontal_m >= 0.0) || (g.self_source_height_m && !(*g.self_source_height_m >= 0.0)))
    throw ValidationError("check_feasibility: geometry must be positive");
  FeasibilityReport r;
  r.t_l = t_l;
  r.c = c;
  r.equivalent_distance_m = c * t_l;
  r.others_budget_s = (g.min_distance_m + g.d_ms) / c;
  const double hs = g.self_source_height_m.value_or(g.receiver_height_m);
  // Image source below the floor.
  r.self_direct_path_m = std::hypot(g.self_horizontal_m, g.receiver_height_m - hs);
  r.self_floor_path_m = std::hypot(g.self_horizontal_m, g.receiver_height_m + hs);
  r.self_budget_s = (r.self_floor_path_m - r.self_direct_path_m + g.d_ms) / c;
  r.hearing_others_feasible = t_l <= r.others_budget_s;
  r.hearing_self_feasible = t_l <= r.self_budget_s;
  r.min_feasible_distance_m = std::max(0.0, c * t_l - g.d_ms);
  return r;
}

std::vector<AdaptItem> read_adapt_manifest(const std::filesystem::path& path) {
  const nlohmann::json j = detail::load_json(path, "adapt manifest");
  detail::require_schema(j, 1, path.string());
  const std::filesystem::path base = path.parent_path();
  std::vector<AdaptItem> items;
  try {
    for (const auto& it : j.at("items")) {
      AdaptItem item;
      item.brir_in = base / it.at("brir_in").get<std::string>();
      item.brir_out = base / it.at("brir_out").get<std::string>();
      const auto& p = it.at("plan");
      AdaptationPlan& plan = item.plan;
      plan.source = p.at("source").get<int>();
      plan.listener = p.at("listener").get<int>();
      plan.t_l = p.at("t_l_s").get<double>();
      plan.d_ms = p.value("d_ms_m", 0.0);
      plan.c = p.value("c", 343.0);
      plan.compensate_bulk_delay = p.value("compensate_bulk_delay", true);
      plan.energy_loss_tolerance_db = p.value("energy_loss_tolerance_db", 60.0);
      item.direct_sound_excluded = p.value("direct_sound_excluded", false);
      if (p.contains("direct_window") && !p.at("direct_window").is_null()) {
        DirectSoundWindow w;
        w.first_reflection_s = p.at("direct_window").at("first_reflection_s").get<double>();
        w.edge_s = p.at("direct_window").value("edge_s", w.edge_s);
        plan.direct_window = w;
      }
      if (p.contains("calibration") && !p.at("calibration").is_null()) {
        item.calibration_path = base / p.at("calibration").get<std::string>();
        if (!std::filesystem::exists(item.calibration_path))
          throw ValidationError(path.string() + ": missing calibration file " + item.calibration_path.string());
      }
      if (!std::filesystem::exists(item.brir_in))
        throw ValidationError(path.string() + ": missing BRIR " + item.brir_in.string());
      items.push_back(std::move(item));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return items;
}

std::filesystem::path sidecar_path(const std::filesystem::path& wav_path) {
  std::filesystem::path p = wav_path;
  p += ".json";
  return p;
}

void write_adaptation_sidecar(const std::filesystem::path& path, const ImpulseResponse& h,
                              const AdaptationPlan& plan, const std::filesystem::path& brir_in) {
  if (!h.adaptation()) throw ValidationError("sidecar: IR carries no adaptation record");
  const AdaptationRecord& r = *h.adaptation();
  nlohmann::json j;
  j["schema_version"] = 1;
  j["kind"] = to_string(h.kind());
  j["source"] = h.source_id();
  j["listener"] = h.listener_id();
  j["direct_sound_skipped"] = h.direct_sound_skipped();
  j["direct_window_applied"] = plan.direct_window.has_value() && plan.skip_direct();
  j["brir_in"] = brir_in.string();
  j["t_l_s"] = plan.t_l;
  j["d_ms_m"] = plan.d_ms;
  j["c"] = plan.c;
  j["shift_seconds"] = r.shift_seconds;
  j["advance_samples"] = r.advance_samples;
  j["calibration_id"] = r.calibration_id;
  j["bulk_delay_samples"] = r.bulk_delay_samples;
  j["bulk_delay_compensated"] = r.bulk_delay_compensated;
  j["dropped_energy_db"] = r.dropped_energy_db;
  j["energy_loss_tolerance_db"] = r.energy_loss_tolerance_db;
  j["sample_rate"] = h.sample_rate();
  detail::save_json(path, j, "sidecar");
}

ImpulseResponse read_adapted_ir(const std::filesystem::path& wav_path) {
  const SampledSignal s = read_signal(wav_path);
  const std::filesystem::path side = sidecar_path(wav_path);
  const nlohmann::json j = detail::load_json(side, "sidecar");
  detail::require_schema(j, 1, side.string());
  try {
    AdaptationRecord r;
    r.shift_seconds = j.at("shift_seconds").get<double>();
    r.advance_samples = j.value("advance_samples", 0.0);
    r.calibration_id = j.value("calibration_id", "");
    r.bulk_delay_samples = j.value("bulk_delay_samples", 0);
    r.bulk_delay_compensated = j.value("bulk_delay_compensated", true);
    r.dropped_energy_db = j.value("dropped_energy_db", -300.0);
    r.energy_loss_tolerance_db = j.value("energy_loss_tolerance_db", 60.0);
    return ImpulseResponse(s, ir_kind_from_string(j.at("kind").get<std::string>()), j.at("source").get<int>(),
                           j.at("listener").get<int>(), j.value("direct_sound_skipped", false), r);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(side.string() + ": " + e.what());
  }
}

}  // namespace stagesim
