#include <cmath>
#include <set>

#include "fablink/telemetry.hpp"
#include "json.hpp"

namespace fablink::telemetry {

namespace {

using ordered = nlohmann::ordered_json;
using nlohmann::json;

[[noreturn]] void reject(const std::string& reason) { throw ProtocolError(reason); }

void check_fields(const json& obj, const std::set<std::string>& required, const std::set<std::string>& optional,
                  const char* where) {
    for (const auto& name : required) {
        if (!obj.contains(name)) reject(std::string("missing field '") + name + "' in " + where);
    }
    for (const auto& [key, _] : obj.items()) {
        if (!required.count(key) && !optional.count(key)) reject("unexpected field '" + key + "' in " + where);
    }
}

std::uint64_t unsigned_field(const json& obj, const char* name) {
    const auto& v = obj.at(name);
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
    reject(std::string("field '") + name + "' must be a non-negative integer");
}

std::string string_field(const json& obj, const char* name) {
    const auto& v = obj.at(name);
    if (!v.is_string()) reject(std::string("field '") + name + "' must be a string");
    return v.get<std::string>();
}

double number_field(const json& obj, const char* name) {
    const auto& v = obj.at(name);
    if (!v.is_number()) reject(std::string("field '") + name + "' must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) reject(std::string("field '") + name + "' must be finite");
    return d;
}

}  // namespace

std::string_view to_string(MessageType t) {
    switch (t) {
        case MessageType::hello: return "hello";
        case MessageType::event: return "event";
        case MessageType::status: return "status";
    }
    return "";
}

std::string_view to_string(EventType t) {
    switch (t) {
        case EventType::job_start: return "job_start";
        case EventType::job_end: return "job_end";
        case EventType::error: return "error";
        case EventType::tool_change: return "tool_change";
    }
    return "";
}

std::string_view to_string(MachineState s) { return s == MachineState::idle ? "idle" : "processing"; }

std::optional<EventType> parse_event_type(std::string_view s) {
    if (s == "job_start") return EventType::job_start;
    if (s == "job_end") return EventType::job_end;
    if (s == "error") return EventType::error;
    if (s == "tool_change") return EventType::tool_change;
    return std::nullopt;
}

std::optional<MachineState> parse_machine_state(std::string_view s) {
    if (s == "idle") return MachineState::idle;
    if (s == "processing") return MachineState::processing;
    return std::nullopt;
}

bool valid_article_id(std::string_view id) {
    if (id.empty() || id.size() > 64) return false;
    for (char c : id) {
        const bool ok = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' ||
                        c == '-';
        if (!ok) return false;
    }
    return true;
}

WireMessage WireMessage::hello(std::string machine_id, std::uint64_t ts_ms) {
    WireMessage m;
    m.type = MessageType::hello;
    m.machine_id = std::move(machine_id);
    m.ts_ms = ts_ms;
    return m;
}

WireMessage WireMessage::event(std::string machine_id, std::uint64_t seq, std::uint64_t ts_ms, std::string article_id,
                               EventPayload payload) {
    WireMessage m;
    m.type = MessageType::event;
    m.machine_id = std::move(machine_id);
    m.seq = seq;
    m.ts_ms = ts_ms;
    m.article_id = std::move(article_id);
    m.payload = std::move(payload);
    return m;
}

WireMessage WireMessage::status(std::string machine_id, std::uint64_t seq, std::uint64_t ts_ms,
                                std::string article_id, StatusPayload payload) {
    WireMessage m;
    m.type = MessageType::status;
    m.machine_id = std::move(machine_id);
    m.seq = seq;
    m.ts_ms = ts_ms;
    m.article_id = std::move(article_id);
    m.payload = payload;
    return m;
}

std::string encode_message(const WireMessage& msg) {
    ordered j;
    j["v"] = msg.v;
    j["type"] = to_string(msg.type);
    j["machine_id"] = msg.machine_id;
    j["seq"] = msg.seq;
    j["ts_ms"] = msg.ts_ms;
    if (msg.type != MessageType::hello) {
        j["article_id"] = msg.article_id.value_or("");
        ordered p;
        if (const auto* e = std::get_if<EventPayload>(&msg.payload)) {
            p["event_type"] = to_string(e->event_type);
            if (e->code) p["code"] = *e->code;
            if (e->message) p["message"] = *e->message;
        } else if (const auto* s = std::get_if<StatusPayload>(&msg.payload)) {
            p["power_w"] = s->power_w;
            p["tool_wear"] = s->tool_wear;
            p["state"] = to_string(s->state);
        }
        j["payload"] = std::move(p);
    }
    // Replace invalid UTF-8 rather than throw; a line must always be produced.
    return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
}

WireMessage decode_message(std::string_view line) {
    if (!line.empty() && line.back() == '\n') line.remove_suffix(1);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find('\n') != std::string_view::npos) reject("interior newline");

    const json j = json::parse(line.begin(), line.end(), nullptr, false);
    if (j.is_discarded()) reject("malformed JSON");
    if (!j.is_object()) reject("message must be a JSON object");
    if (!j.contains("v")) reject("missing field 'v'");
    if (!j.at("v").is_number_integer() || j.at("v").get<std::int64_t>() != kProtocolVersion) {
        reject("unsupported version");
    }
    if (!j.contains("type") || !j.at("type").is_string()) reject("missing field 'type'");

    WireMessage m;
    const auto type = j.at("type").get<std::string>();
    if (type == "hello") {
        m.type = MessageType::hello;
        check_fields(j, {"v", "type", "machine_id", "seq", "ts_ms"}, {}, "hello");
    } else if (type == "event" || type == "status") {
        m.type = type == "event" ? MessageType::event : MessageType::status;
        check_fields(j, {"v", "type", "machine_id", "seq", "ts_ms", "article_id", "payload"}, {}, type.c_str());
    } else {
        reject("unknown message type '" + type + "'");
    }

    m.machine_id = string_field(j, "machine_id");
    if (m.machine_id.empty()) reject("machine_id must not be empty");
    m.seq = unsigned_field(j, "seq");
    m.ts_ms = unsigned_field(j, "ts_ms");
    if (m.type == MessageType::hello) {
        if (m.seq != 0) reject("hello must carry seq 0");
        return m;
    }
    if (m.seq == 0) reject("seq must start at 1");
    m.article_id = string_field(j, "article_id");
    if (!valid_article_id(*m.article_id)) reject("invalid article_id");

    const auto& p = j.at("payload");
    if (!p.is_object()) reject("payload must be an object");
    if (m.type == MessageType::event) {
        check_fields(p, {"event_type"}, {"code", "message"}, "event payload");
        EventPayload e;
        const auto et = parse_event_type(string_field(p, "event_type"));
        if (!et) reject("unknown event_type");
        e.event_type = *et;
        if (p.contains("code")) e.code = string_field(p, "code");
        if (p.contains("message")) e.message = string_field(p, "message");
        m.payload = std::move(e);
    } else {
        check_fields(p, {"power_w", "tool_wear", "state"}, {}, "status payload");
        StatusPayload s;
        s.power_w = number_field(p, "power_w");
        if (s.power_w < 0.0) reject("power_w must be >= 0");
        s.tool_wear = number_field(p, "tool_wear");
        if (s.tool_wear < 0.0 || s.tool_wear > 1.0) reject("tool_wear must be within [0, 1]");
        const auto st = parse_machine_state(string_field(p, "state"));
        if (!st) reject("unknown state");
        s.state = *st;
        m.payload = s;
    }
    return m;
}

}  // namespace fablink::telemetry
