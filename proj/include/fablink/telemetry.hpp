// Machine-data wire protocol (one JSON object per line) and the synthetic
// machine that publishes it.

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fablink/brep.hpp"

namespace fablink::telemetry {

inline constexpr int kProtocolVersion = 1;

class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class MessageType { hello, event, status };
enum class EventType { job_start, job_end, error, tool_change };
enum class MachineState { idle, processing };

std::string_view to_string(MessageType t);
std::string_view to_string(EventType t);
std::string_view to_string(MachineState s);
std::optional<EventType> parse_event_type(std::string_view s);
std::optional<MachineState> parse_machine_state(std::string_view s);

/// `[A-Za-z0-9_-]{1,64}`
bool valid_article_id(std::string_view id);

struct EventPayload {
    EventType event_type = EventType::job_start;
    std::optional<std::string> code;
    std::optional<std::string> message;
    bool operator==(const EventPayload&) const = default;
};

struct StatusPayload {
    double power_w = 0.0;
    double tool_wear = 0.0;
    MachineState state = MachineState::idle;
    bool operator==(const StatusPayload&) const = default;
};

struct WireMessage {
    int v = kProtocolVersion;
    MessageType type = MessageType::hello;
    std::string machine_id;
    std::uint64_t seq = 0;
    std::uint64_t ts_ms = 0;
    std::optional<std::string> article_id;
    std::variant<std::monostate, EventPayload, StatusPayload> payload;

    bool operator==(const WireMessage&) const = default;

    static WireMessage hello(std::string machine_id, std::uint64_t ts_ms);
    static WireMessage event(std::string machine_id, std::uint64_t seq, std::uint64_t ts_ms, std::string article_id,
                             EventPayload payload);
    static WireMessage status(std::string machine_id, std::uint64_t seq, std::uint64_t ts_ms, std::string article_id,
                              StatusPayload payload);
};

/// Single JSON line terminated by '\n'.
std::string encode_message(const WireMessage& msg);

/// Accepts an optional trailing "\n" or "\r\n". Throws ProtocolError.
WireMessage decode_message(std::string_view line);

struct MachineProfile {
    std::string machine_id = "m1";
    double feed_mm_per_s = 50.0;
    double setup_time_s = 30.0;
    double pierce_time_s = 1.5;
    double idle_power_w = 800.0;
    double processing_extra_power_w = 3200.0;
    double wear_per_mm = 1e-5;
    std::uint64_t status_interval_ms = 100;
    double noise_sigma = 0.02;
    double error_probability = 0.0;
    std::uint64_t rng_seed = 0;

    /// Throws std::invalid_argument.
    void validate() const;
};

struct NominalOutcome {
    double production_time_s = 0.0;
    double energy_wh = 0.0;
    double wear_delta = 0.0;
};

NominalOutcome nominal_outcome(const MachineProfile& profile, const brep::FeatureVector& features);

/// Stateful machine: sequence numbers, tool wear and the RNG carry over
/// between jobs. Output is a pure function of the profile (incl. seed) and
/// the call history.
class MachineSimulator {
public:
    explicit MachineSimulator(MachineProfile profile);

    WireMessage hello(std::uint64_t ts_ms) const;

    /// Messages for one job starting at `t0_ms`, in timestamp order.
    std::vector<WireMessage> simulate_job(const std::string& article_id, const brep::FeatureVector& features,
                                          std::uint64_t t0_ms);

    const MachineProfile& profile() const { return profile_; }
    std::uint64_t next_seq() const { return next_seq_; }
    double tool_wear() const { return tool_wear_; }

private:
    MachineProfile profile_;
    std::mt19937_64 rng_;
    std::uint64_t next_seq_ = 1;
    double tool_wear_ = 0.0;
};

/// One job on a fresh machine.
std::vector<WireMessage> simulate_job(const MachineProfile& profile, const std::string& article_id,
                                      const brep::FeatureVector& features, std::uint64_t t0_ms);

}  // namespace fablink::telemetry
