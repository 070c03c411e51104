#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fablink/telemetry.hpp"

namespace fablink::telemetry {

void MachineProfile::validate() const {
    auto nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (machine_id.empty()) throw std::invalid_argument("machine_id must not be empty");
    if (!nonneg(feed_mm_per_s) || feed_mm_per_s == 0.0) throw std::invalid_argument("feed_mm_per_s must be > 0");
    if (!nonneg(setup_time_s) || !nonneg(pierce_time_s) || !nonneg(idle_power_w) ||
        !nonneg(processing_extra_power_w) || !nonneg(wear_per_mm)) {
        throw std::invalid_argument("machine rates and powers must be >= 0");
    }
    if (status_interval_ms == 0) throw std::invalid_argument("status_interval_ms must be > 0");
    if (!(noise_sigma >= 0.0 && noise_sigma <= 0.5)) throw std::invalid_argument("noise_sigma must be in [0, 0.5]");
    if (!(error_probability >= 0.0 && error_probability <= 1.0)) {
        throw std::invalid_argument("error_probability must be in [0, 1]");
    }
}

NominalOutcome nominal_outcome(const MachineProfile& p, const brep::FeatureVector& f) {
    const double cut = f.total_edge_length / p.feed_mm_per_s;
    const double pierce = p.pierce_time_s * f.hole_count;
    NominalOutcome o;
    o.production_time_s = p.setup_time_s + cut + pierce;
    o.energy_wh = (p.idle_power_w * o.production_time_s + p.processing_extra_power_w * (cut + pierce)) / 3600.0;
    o.wear_delta = p.wear_per_mm * f.total_edge_length;
    return o;
}

MachineSimulator::MachineSimulator(MachineProfile profile) : profile_(std::move(profile)), rng_(profile_.rng_seed) {
    profile_.validate();
}

WireMessage MachineSimulator::hello(std::uint64_t ts_ms) const { return WireMessage::hello(profile_.machine_id, ts_ms); }

std::vector<WireMessage> MachineSimulator::simulate_job(const std::string& article_id,
                                                        const brep::FeatureVector& features, std::uint64_t t0_ms) {
    const auto& p = profile_;
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const auto nominal = nominal_outcome(p, features);
    const double processing_s = nominal.production_time_s - p.setup_time_s;
    // One time factor per job, bounded away from zero so phases keep their order.
    const double time_factor = std::max(0.1, 1.0 + p.noise_sigma * gauss(rng_));
    const auto setup_ms = static_cast<std::uint64_t>(std::llround(p.setup_time_s * time_factor * 1000.0));
    const auto process_ms = static_cast<std::uint64_t>(std::llround(processing_s * time_factor * 1000.0));
    const std::uint64_t switch_ts = t0_ms + setup_ms;
    const std::uint64_t end_ts = switch_ts + process_ms;

    std::vector<WireMessage> out;
    auto event = [&](std::uint64_t ts, EventType type, std::optional<std::string> code = std::nullopt,
                     std::optional<std::string> message = std::nullopt) {
        out.push_back(WireMessage::event(p.machine_id, next_seq_++, ts, article_id,
                                         {type, std::move(code), std::move(message)}));
    };

    if (tool_wear_ + nominal.wear_delta > 1.0) {
        event(t0_ms, EventType::tool_change);
        tool_wear_ = 0.0;
    }
    const double wear_start = tool_wear_;
    const double wear_end = std::min(1.0, wear_start + nominal.wear_delta);

    std::optional<std::uint64_t> error_ts;
    if (p.error_probability > 0.0 && unit(rng_) < p.error_probability) {
        const std::uint64_t lo = process_ms > 0 ? switch_ts : t0_ms;
        const std::uint64_t span = end_ts - lo;
        error_ts = lo + static_cast<std::uint64_t>(unit(rng_) * static_cast<double>(span));
    }

    auto power_noise = [&] { return std::max(0.0, 1.0 + p.noise_sigma * gauss(rng_)); };
    auto status = [&](std::uint64_t ts, MachineState state) {
        const bool busy = state == MachineState::processing;
        const double level = p.idle_power_w + (busy ? p.processing_extra_power_w : 0.0);
        double wear = wear_start;
        if (busy && process_ms > 0) {
            wear = wear_start + (wear_end - wear_start) * static_cast<double>(ts - switch_ts) /
                                    static_cast<double>(process_ms);
        }
        out.push_back(WireMessage::status(p.machine_id, next_seq_++, ts, article_id,
                                          {level * power_noise(), std::clamp(wear, 0.0, 1.0), state}));
    };
    auto maybe_error = [&](std::uint64_t before_ts) {
        if (error_ts && *error_ts < before_ts) {
            event(*error_ts, EventType::error, "E_SIM", "simulated process fault");
            error_ts.reset();
        }
    };

    event(t0_ms, EventType::job_start);
    // Regular samples, plus a duplicated sample at the phase switch so the
    // step in power is represented exactly.
    bool switched = false;
    auto switch_pair = [&] {
        status(switch_ts, MachineState::idle);
        status(switch_ts, MachineState::processing);
        switched = true;
    };
    for (std::uint64_t ts = t0_ms; ts < end_ts; ts += p.status_interval_ms) {
        if (!switched && ts > switch_ts) switch_pair();
        maybe_error(ts);
        if (ts < switch_ts) {
            status(ts, MachineState::idle);
        } else if (ts == switch_ts) {
            switch_pair();
        } else {
            status(ts, MachineState::processing);
        }
    }
    if (!switched && process_ms > 0) switch_pair();
    maybe_error(end_ts + 1);
    status(end_ts, process_ms > 0 ? MachineState::processing : MachineState::idle);
    event(end_ts, EventType::job_end);
    tool_wear_ = wear_end;
    return out;
}

std::vector<WireMessage> simulate_job(const MachineProfile& profile, const std::string& article_id,
                                      const brep::FeatureVector& features, std::uint64_t t0_ms) {
    MachineSimulator machine(profile);
    return machine.simulate_job(article_id, features, t0_ms);
}

}  // namespace fablink::telemetry
