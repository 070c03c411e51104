#include "fablink/store.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <mutex>
#include <sstream>

#include "fablink/hash.hpp"
#include "json.hpp"

namespace fablink::store {

namespace fs = std::filesystem;
using nlohmann::json;

// Append-only newline-delimited file. A trailing partial line (torn write)
// is dropped and truncated away on open.
class AppendLog {
public:
    explicit AppendLog(fs::path path) : path_(std::move(path)) {}

    ~AppendLog() {
        if (file_) std::fclose(file_);
    }

    std::vector<std::string> read_all() {
        std::vector<std::string> lines;
        if (!fs::exists(path_)) return lines;
        std::ifstream in(path_, std::ios::binary);
        std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::size_t start = 0;
        while (start < content.size()) {
            const auto nl = content.find('\n', start);
            if (nl == std::string::npos) {
                fs::resize_file(path_, start);
                break;
            }
            if (nl > start) lines.emplace_back(content, start, nl - start);
            start = nl + 1;
        }
        return lines;
    }

    void append(const std::string& line) {
        if (!file_) {
            file_ = std::fopen(path_.c_str(), "ab");
            if (!file_) throw StoreError("cannot open " + path_.string() + " for append");
        }
        if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() || std::fputc('\n', file_) == EOF ||
            std::fflush(file_) != 0) {
            throw StoreError("write failed on " + path_.string());
        }
    }

private:
    fs::path path_;
    std::FILE* file_ = nullptr;
};

namespace {

template <typename T>
T required_enum(std::optional<T> v, const char* what) {
    if (!v) throw StoreError(std::string("invalid ") + what + " in stored record");
    return *v;
}

User user_from(const json& j) {
    return {j.at("user_id").get<std::string>(), required_enum(parse_role(j.at("role").get<std::string>()), "role"),
            j.at("token_sha256").get<std::string>()};
}

Article article_from(const json& j) {
    return {j.at("article_id").get<std::string>(), j.at("name").get<std::string>(), j.at("material").get<std::string>(),
            j.at("created_ts_ms").get<std::int64_t>()};
}

DesignVariant variant_from(const json& j) {
    DesignVariant v;
    v.variant_id = j.at("variant_id").get<std::string>();
    v.article_id = j.at("article_id").get<std::string>();
    v.step_blob_hash = j.at("step_blob_hash").get<std::string>();
    v.features = brep::feature_vector_from_json(j.at("features"));
    if (!j.at("thickness_override").is_null()) v.thickness_override = j.at("thickness_override").get<double>();
    v.created_ts_ms = j.at("created_ts_ms").get<std::int64_t>();
    v.uploaded_by = j.at("uploaded_by").get<std::string>();
    v.label = j.value("label", "");
    return v;
}

MachineEvent event_from(const json& j) {
    MachineEvent e;
    e.machine_id = j.at("machine_id").get<std::string>();
    e.seq = j.at("seq").get<std::uint64_t>();
    e.ts_ms = j.at("ts_ms").get<std::uint64_t>();
    e.article_id = j.at("article_id").get<std::string>();
    const auto& p = j.at("payload");
    e.payload.event_type =
        required_enum(telemetry::parse_event_type(p.at("event_type").get<std::string>()), "event_type");
    if (p.contains("code")) e.payload.code = p.at("code").get<std::string>();
    if (p.contains("message")) e.payload.message = p.at("message").get<std::string>();
    e.ingest_ts_ms = j.at("ingest_ts_ms").get<std::int64_t>();
    e.article_known = j.at("article_known").get<bool>();
    return e;
}

MachineStatus status_from(const json& j) {
    MachineStatus s;
    s.machine_id = j.at("machine_id").get<std::string>();
    s.seq = j.at("seq").get<std::uint64_t>();
    s.ts_ms = j.at("ts_ms").get<std::uint64_t>();
    s.article_id = j.at("article_id").get<std::string>();
    const auto& p = j.at("payload");
    s.payload.power_w = p.at("power_w").get<double>();
    s.payload.tool_wear = p.at("tool_wear").get<double>();
    s.payload.state = required_enum(telemetry::parse_machine_state(p.at("state").get<std::string>()), "state");
    s.ingest_ts_ms = j.at("ingest_ts_ms").get<std::int64_t>();
    s.article_known = j.at("article_known").get<bool>();
    return s;
}

Feedback feedback_from(const json& j) {
    Feedback f;
    f.feedback_id = j.at("feedback_id").get<std::string>();
    f.article_id = j.at("article_id").get<std::string>();
    f.reporter = j.at("reporter").get<std::string>();
    f.category = required_enum(parse_feedback_category(j.at("category").get<std::string>()), "category");
    f.severity = required_enum(parse_severity(j.at("severity").get<std::string>()), "severity");
    f.text = j.at("text").get<std::string>();
    f.created_ts_ms = j.at("created_ts_ms").get<std::int64_t>();
    return f;
}

std::string line_of(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

bool same_content(const Article& a, const Article& b) { return a.name == b.name && a.material == b.material; }

bool same_content(const DesignVariant& a, const DesignVariant& b) {
    return a.article_id == b.article_id && a.step_blob_hash == b.step_blob_hash && a.features == b.features &&
           a.thickness_override == b.thickness_override;
}

template <typename R>
bool same_wire_content(const R& a, const R& b) {
    return a.machine_id == b.machine_id && a.seq == b.seq && a.ts_ms == b.ts_ms && a.article_id == b.article_id &&
           a.payload == b.payload;
}

std::string key_string(const MachineKey& k) { return k.machine_id + "#" + std::to_string(k.seq); }

}  // namespace

json to_json(const User& u) {
    return {{"schema", "user.v1"}, {"user_id", u.user_id}, {"role", to_string(u.role)}, {"token_sha256", u.token_sha256}};
}

json to_json(const Article& a) {
    return {{"schema", "article.v1"},
            {"article_id", a.article_id},
            {"name", a.name},
            {"material", a.material},
            {"created_ts_ms", a.created_ts_ms}};
}

json to_json(const DesignVariant& v) {
    return {{"schema", "variant.v1"},
            {"variant_id", v.variant_id},
            {"article_id", v.article_id},
            {"step_blob_hash", v.step_blob_hash},
            {"features", brep::to_json(v.features)},
            {"thickness_override", v.thickness_override ? json(*v.thickness_override) : json(nullptr)},
            {"created_ts_ms", v.created_ts_ms},
            {"uploaded_by", v.uploaded_by},
            {"label", v.label}};
}

static json event_payload_json(const telemetry::EventPayload& p) {
    json j = {{"event_type", telemetry::to_string(p.event_type)}};
    if (p.code) j["code"] = *p.code;
    if (p.message) j["message"] = *p.message;
    return j;
}

json to_json(const MachineEvent& e) {
    return {{"schema", "event.v1"},
            {"machine_id", e.machine_id},
            {"seq", e.seq},
            {"ts_ms", e.ts_ms},
            {"article_id", e.article_id},
            {"payload", event_payload_json(e.payload)},
            {"ingest_ts_ms", e.ingest_ts_ms},
            {"article_known", e.article_known}};
}

json to_json(const MachineStatus& s) {
    return {{"schema", "status.v1"},
            {"machine_id", s.machine_id},
            {"seq", s.seq},
            {"ts_ms", s.ts_ms},
            {"article_id", s.article_id},
            {"payload",
             {{"power_w", s.payload.power_w},
              {"tool_wear", s.payload.tool_wear},
              {"state", telemetry::to_string(s.payload.state)}}},
            {"ingest_ts_ms", s.ingest_ts_ms},
            {"article_known", s.article_known}};
}

json to_json(const Feedback& f) {
    return {{"schema", "feedback.v1"},
            {"feedback_id", f.feedback_id},
            {"article_id", f.article_id},
            {"reporter", f.reporter},
            {"category", to_string(f.category)},
            {"severity", to_string(f.severity)},
            {"text", f.text},
            {"created_ts_ms", f.created_ts_ms}};
}

json to_json(const ProcessOutcome& o) {
    return {{"article_id", o.article_id},
            {"job_index", o.job_index},
            {"machine_id", o.machine_id},
            {"start_ts_ms", o.start_ts_ms},
            {"end_ts_ms", o.end_ts_ms ? json(*o.end_ts_ms) : json(nullptr)},
            {"production_time_s", o.production_time_s},
            {"energy_wh", o.energy_wh},
            {"tool_wear_delta", o.tool_wear_delta},
            {"error_count", o.error_count},
            {"complete", o.complete}};
}

json to_json(const ArticleView& v) {
    json j = {{"article", to_json(v.article)}};
    auto list = [](const auto& items) {
        json a = json::array();
        for (const auto& item : items) a.push_back(to_json(item));
        return a;
    };
    j["variants"] = list(v.variants);
    j["events"] = list(v.events);
    j["statuses"] = list(v.statuses);
    j["feedback"] = list(v.feedback);
    j["outcomes"] = list(v.outcomes);
    return j;
}

std::string_view to_string(Role r) {
    switch (r) {
        case Role::designer: return "designer";
        case Role::manufacturer: return "manufacturer";
        case Role::admin: return "admin";
    }
    return "";
}

std::optional<Role> parse_role(std::string_view s) {
    if (s == "designer") return Role::designer;
    if (s == "manufacturer") return Role::manufacturer;
    if (s == "admin") return Role::admin;
    return std::nullopt;
}

std::string_view to_string(FeedbackCategory c) {
    switch (c) {
        case FeedbackCategory::dimensional: return "dimensional";
        case FeedbackCategory::surface: return "surface";
        case FeedbackCategory::material: return "material";
        case FeedbackCategory::process: return "process";
        case FeedbackCategory::other: return "other";
    }
    return "";
}

std::string_view to_string(Severity s) {
    switch (s) {
        case Severity::minor: return "minor";
        case Severity::major: return "major";
        case Severity::scrap: return "scrap";
    }
    return "";
}

std::optional<FeedbackCategory> parse_feedback_category(std::string_view s) {
    for (auto c : {FeedbackCategory::dimensional, FeedbackCategory::surface, FeedbackCategory::material,
                   FeedbackCategory::process, FeedbackCategory::other}) {
        if (to_string(c) == s) return c;
    }
    return std::nullopt;
}

std::optional<Severity> parse_severity(std::string_view s) {
    for (auto v : {Severity::minor, Severity::major, Severity::scrap}) {
        if (to_string(v) == s) return v;
    }
    return std::nullopt;
}

brep::FeatureVector DesignVariant::effective_features() const {
    auto f = features;
    if (thickness_override) f.material_thickness = *thickness_override;
    return f;
}

std::int64_t now_ms() {
    using namespace std::chrono;
    return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

double integrate_power(std::span<const PowerSample> samples, std::uint64_t t0_ms, std::uint64_t t1_ms) {
    if (t1_ms <= t0_ms) throw InsufficientData("integration window is empty");
    auto first = std::lower_bound(samples.begin(), samples.end(), t0_ms,
                                  [](const PowerSample& s, std::uint64_t t) { return s.ts_ms < t; });
    auto last = std::upper_bound(samples.begin(), samples.end(), t1_ms,
                                 [](std::uint64_t t, const PowerSample& s) { return t < s.ts_ms; });
    if (std::distance(first, last) < 2) throw InsufficientData("fewer than two samples in window");

    auto boundary_value = [&](std::uint64_t t, auto inside, bool at_start) {
        // `inside` is the nearest in-window sample; the outside neighbour, if
        // any, is adjacent to it.
        const bool has_outside = at_start ? inside != samples.begin() : std::next(inside) != samples.end();
        if (!has_outside) return inside->power_w;
        const auto outside = at_start ? std::prev(inside) : std::next(inside);
        const double span = static_cast<double>(inside->ts_ms) - static_cast<double>(outside->ts_ms);
        const double frac = (static_cast<double>(t) - static_cast<double>(outside->ts_ms)) / span;
        return outside->power_w + frac * (inside->power_w - outside->power_w);
    };

    double watt_ms = 0.0;
    const auto last_inside = std::prev(last);
    if (first->ts_ms > t0_ms) {
        const double v0 = boundary_value(t0_ms, first, true);
        watt_ms += 0.5 * (v0 + first->power_w) * static_cast<double>(first->ts_ms - t0_ms);
    }
    for (auto it = first; it != last_inside; ++it) {
        const auto next = std::next(it);
        watt_ms += 0.5 * (it->power_w + next->power_w) * static_cast<double>(next->ts_ms - it->ts_ms);
    }
    if (last_inside->ts_ms < t1_ms) {
        const double v1 = boundary_value(t1_ms, last_inside, false);
        watt_ms += 0.5 * (last_inside->power_w + v1) * static_cast<double>(t1_ms - last_inside->ts_ms);
    }
    return watt_ms / 1000.0 / 3600.0;
}

Store::Store(const fs::path& data_dir) : dir_(data_dir) {
    fs::create_directories(dir_ / "users");
    fs::create_directories(dir_ / "cad" / "blobs");
    fs::create_directories(dir_ / "process");
    users_log_ = std::make_unique<AppendLog>(dir_ / "users" / "users.ndjson");
    cad_log_ = std::make_unique<AppendLog>(dir_ / "cad" / "records.ndjson");
    events_log_ = std::make_unique<AppendLog>(dir_ / "process" / "events.ndjson");
    status_log_ = std::make_unique<AppendLog>(dir_ / "process" / "status.ndjson");
    feedback_log_ = std::make_unique<AppendLog>(dir_ / "process" / "feedback.ndjson");
    load();
}

Store::~Store() = default;

void Store::load() {
    auto each = [](AppendLog& log, const fs::path& where, auto&& apply) {
        std::size_t n = 0;
        for (const auto& line : log.read_all()) {
            ++n;
            try {
                apply(json::parse(line));
            } catch (const json::exception& e) {
                throw StoreError(where.string() + ": record " + std::to_string(n) + " is corrupt: " + e.what());
            } catch (const std::invalid_argument& e) {
                throw StoreError(where.string() + ": record " + std::to_string(n) + " is corrupt: " + e.what());
            }
        }
    };
    each(*users_log_, "users/users.ndjson", [&](const json& j) {
        auto u = user_from(j);
        user_by_token_[u.token_sha256] = u.user_id;
        users_[u.user_id] = std::move(u);
    });
    each(*cad_log_, "cad/records.ndjson", [&](const json& j) {
        const auto schema = j.at("schema").get<std::string>();
        if (schema == "article.v1") {
            auto a = article_from(j);
            articles_[a.article_id] = std::move(a);
        } else if (schema == "variant.v1") {
            auto v = variant_from(j);
            variants_by_article_[v.article_id].push_back(v.variant_id);
            variants_[v.variant_id] = std::move(v);
        } else {
            throw StoreError("unknown cad record schema '" + schema + "'");
        }
    });
    each(*events_log_, "process/events.ndjson", [&](const json& j) {
        auto e = event_from(j);
        events_by_article_[e.article_id].push_back(e.key());
        events_[e.key()] = std::move(e);
    });
    each(*status_log_, "process/status.ndjson", [&](const json& j) {
        auto s = status_from(j);
        statuses_by_article_[s.article_id].push_back(s.key());
        auto [it, fresh] = latest_status_by_machine_.try_emplace(s.machine_id, s.key());
        if (!fresh) {
            const auto& cur = statuses_.at(it->second);
            if (std::tie(s.ts_ms, s.seq) > std::tie(cur.ts_ms, cur.seq)) it->second = s.key();
        }
        statuses_[s.key()] = std::move(s);
    });
    each(*feedback_log_, "process/feedback.ndjson", [&](const json& j) {
        auto f = feedback_from(j);
        feedback_by_article_[f.article_id].push_back(f.feedback_id);
        feedback_[f.feedback_id] = std::move(f);
    });
}

AppendResult Store::append(const User& user) {
    if (user.user_id.empty()) throw std::invalid_argument("user_id must not be empty");
    std::unique_lock lock(mu_);
    if (auto it = users_.find(user.user_id); it != users_.end()) {
        if (it->second == user) return {user.user_id, false};
        throw ConflictError("user '" + user.user_id + "' already exists");
    }
    if (user_by_token_.count(user.token_sha256)) throw ConflictError("token already assigned to another user");
    users_log_->append(line_of(to_json(user)));
    users_[user.user_id] = user;
    user_by_token_[user.token_sha256] = user.user_id;
    return {user.user_id, true};
}

AppendResult Store::append(const Article& article) {
    if (!telemetry::valid_article_id(article.article_id)) {
        throw std::invalid_argument("article_id must match [A-Za-z0-9_-]{1,64}");
    }
    std::unique_lock lock(mu_);
    if (auto it = articles_.find(article.article_id); it != articles_.end()) {
        if (same_content(it->second, article)) return {article.article_id, false};
        throw ConflictError("article '" + article.article_id + "' already exists with different content");
    }
    cad_log_->append(line_of(to_json(article)));
    articles_[article.article_id] = article;
    return {article.article_id, true};
}

AppendResult Store::append(const DesignVariant& variant) {
    if (variant.variant_id.empty()) throw std::invalid_argument("variant_id must not be empty");
    std::unique_lock lock(mu_);
    if (!articles_.count(variant.article_id)) throw IntegrityError("unknown article_id '" + variant.article_id + "'");
    if (!fs::exists(dir_ / "cad" / "blobs" / (variant.step_blob_hash + ".step"))) {
        throw IntegrityError("step blob " + variant.step_blob_hash + " is not stored");
    }
    if (auto it = variants_.find(variant.variant_id); it != variants_.end()) {
        if (same_content(it->second, variant)) return {variant.variant_id, false};
        throw ConflictError("variant '" + variant.variant_id + "' already exists with different content");
    }
    cad_log_->append(line_of(to_json(variant)));
    variants_[variant.variant_id] = variant;
    variants_by_article_[variant.article_id].push_back(variant.variant_id);
    return {variant.variant_id, true};
}

AppendResult Store::append(const MachineEvent& event) {
    std::unique_lock lock(mu_);
    const auto key = event.key();
    if (auto it = events_.find(key); it != events_.end()) {
        if (same_wire_content(it->second, event)) return {key_string(key), false};
        throw ConflictError("machine record " + key_string(key) + " already exists with different content");
    }
    if (statuses_.count(key)) throw ConflictError("machine record " + key_string(key) + " is already a status");
    MachineEvent stored = event;
    stored.article_known = articles_.count(event.article_id) > 0;
    events_log_->append(line_of(to_json(stored)));
    events_by_article_[stored.article_id].push_back(key);
    events_[key] = std::move(stored);
    return {key_string(key), true};
}

AppendResult Store::append(const MachineStatus& status) {
    std::unique_lock lock(mu_);
    const auto key = status.key();
    if (auto it = statuses_.find(key); it != statuses_.end()) {
        if (same_wire_content(it->second, status)) return {key_string(key), false};
        throw ConflictError("machine record " + key_string(key) + " already exists with different content");
    }
    if (events_.count(key)) throw ConflictError("machine record " + key_string(key) + " is already an event");
    MachineStatus stored = status;
    stored.article_known = articles_.count(status.article_id) > 0;
    status_log_->append(line_of(to_json(stored)));
    statuses_by_article_[stored.article_id].push_back(key);
    auto [it, fresh] = latest_status_by_machine_.try_emplace(stored.machine_id, key);
    if (!fresh) {
        const auto& cur = statuses_.at(it->second);
        if (std::tie(stored.ts_ms, stored.seq) > std::tie(cur.ts_ms, cur.seq)) it->second = key;
    }
    statuses_[key] = std::move(stored);
    return {key_string(key), true};
}

AppendResult Store::append(Feedback feedback) {
    if (feedback.feedback_id.empty()) {
        std::ostringstream os;
        os << feedback.article_id << '\x1f' << feedback.reporter << '\x1f' << to_string(feedback.category) << '\x1f'
           << to_string(feedback.severity) << '\x1f' << feedback.text << '\x1f' << feedback.created_ts_ms;
        feedback.feedback_id = "fb-" + sha256_hex(os.str()).substr(0, 16);
    }
    std::unique_lock lock(mu_);
    if (!articles_.count(feedback.article_id)) throw IntegrityError("unknown article_id '" + feedback.article_id + "'");
    if (auto it = feedback_.find(feedback.feedback_id); it != feedback_.end()) {
        if (it->second == feedback) return {feedback.feedback_id, false};
        throw ConflictError("feedback '" + feedback.feedback_id + "' already exists with different content");
    }
    feedback_log_->append(line_of(to_json(feedback)));
    feedback_by_article_[feedback.article_id].push_back(feedback.feedback_id);
    const auto id = feedback.feedback_id;
    feedback_[id] = std::move(feedback);
    return {id, true};
}

std::string Store::put_blob(std::string_view bytes) {
    const auto hash = sha256_hex(bytes);
    const auto path = dir_ / "cad" / "blobs" / (hash + ".step");
    std::unique_lock lock(mu_);
    if (fs::exists(path)) return hash;
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw StoreError("cannot write blob " + hash);
    }
    fs::rename(tmp, path);
    return hash;
}

bool Store::has_blob(const std::string& sha256) const {
    return fs::exists(dir_ / "cad" / "blobs" / (sha256 + ".step"));
}

std::string Store::read_blob(const std::string& sha256) const {
    std::ifstream in(dir_ / "cad" / "blobs" / (sha256 + ".step"), std::ios::binary);
    if (!in) throw NotFound("blob " + sha256 + " not found");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool Store::has_article(const std::string& article_id) const {
    std::shared_lock lock(mu_);
    return articles_.count(article_id) > 0;
}

std::optional<Article> Store::find_article(const std::string& article_id) const {
    std::shared_lock lock(mu_);
    auto it = articles_.find(article_id);
    if (it == articles_.end()) return std::nullopt;
    return it->second;
}

std::optional<DesignVariant> Store::find_variant(const std::string& variant_id) const {
    std::shared_lock lock(mu_);
    auto it = variants_.find(variant_id);
    if (it == variants_.end()) return std::nullopt;
    return it->second;
}

std::vector<Article> Store::articles() const {
    std::shared_lock lock(mu_);
    std::vector<Article> out;
    out.reserve(articles_.size());
    for (const auto& [id, a] : articles_) out.push_back(a);
    return out;
}

std::vector<User> Store::users() const {
    std::shared_lock lock(mu_);
    std::vector<User> out;
    for (const auto& [id, u] : users_) out.push_back(u);
    return out;
}

std::optional<User> Store::find_user_by_token_hash(const std::string& token_sha256) const {
    std::shared_lock lock(mu_);
    auto it = user_by_token_.find(token_sha256);
    if (it == user_by_token_.end()) return std::nullopt;
    return users_.at(it->second);
}

bool Store::has_machine_record(const MachineKey& key) const {
    std::shared_lock lock(mu_);
    return events_.count(key) > 0 || statuses_.count(key) > 0;
}

std::optional<MachineStatus> Store::latest_status(const std::string& machine_id) const {
    std::shared_lock lock(mu_);
    auto it = latest_status_by_machine_.find(machine_id);
    if (it == latest_status_by_machine_.end()) return std::nullopt;
    return statuses_.at(it->second);
}

std::int64_t Store::latest_variant_ts() const {
    std::shared_lock lock(mu_);
    std::int64_t latest = 0;
    for (const auto& [id, v] : variants_) latest = std::max(latest, v.created_ts_ms);
    return latest;
}

ArticleView Store::query_by_article(const std::string& article_id) const {
    std::shared_lock lock(mu_);
    auto it = articles_.find(article_id);
    if (it == articles_.end()) throw NotFound("article '" + article_id + "' not found");
    ArticleView view;
    view.article = it->second;
    if (auto v = variants_by_article_.find(article_id); v != variants_by_article_.end()) {
        for (const auto& id : v->second) view.variants.push_back(variants_.at(id));
    }
    if (auto e = events_by_article_.find(article_id); e != events_by_article_.end()) {
        for (const auto& k : e->second) view.events.push_back(events_.at(k));
    }
    if (auto s = statuses_by_article_.find(article_id); s != statuses_by_article_.end()) {
        for (const auto& k : s->second) view.statuses.push_back(statuses_.at(k));
    }
    if (auto f = feedback_by_article_.find(article_id); f != feedback_by_article_.end()) {
        for (const auto& id : f->second) view.feedback.push_back(feedback_.at(id));
    }
    std::sort(view.variants.begin(), view.variants.end(), [](const auto& a, const auto& b) {
        return std::tie(a.created_ts_ms, a.variant_id) < std::tie(b.created_ts_ms, b.variant_id);
    });
    auto by_ts_key = [](const auto& a, const auto& b) {
        return std::tie(a.ts_ms, a.machine_id, a.seq) < std::tie(b.ts_ms, b.machine_id, b.seq);
    };
    std::sort(view.events.begin(), view.events.end(), by_ts_key);
    std::sort(view.statuses.begin(), view.statuses.end(), by_ts_key);
    std::sort(view.feedback.begin(), view.feedback.end(), [](const auto& a, const auto& b) {
        return std::tie(a.created_ts_ms, a.feedback_id) < std::tie(b.created_ts_ms, b.feedback_id);
    });
    view.outcomes = outcomes_locked(article_id);
    return view;
}

std::vector<ProcessOutcome> Store::assemble_outcomes(const std::string& article_id) const {
    std::shared_lock lock(mu_);
    if (!articles_.count(article_id)) throw NotFound("article '" + article_id + "' not found");
    return outcomes_locked(article_id);
}

std::vector<ProcessOutcome> Store::outcomes_locked(const std::string& article_id) const {
    std::map<std::string, std::vector<const MachineEvent*>> events_by_machine;
    if (auto e = events_by_article_.find(article_id); e != events_by_article_.end()) {
        for (const auto& k : e->second) {
            const auto& ev = events_.at(k);
            events_by_machine[ev.machine_id].push_back(&ev);
        }
    }
    std::map<std::string, std::vector<const MachineStatus*>> statuses_by_machine;
    if (auto s = statuses_by_article_.find(article_id); s != statuses_by_article_.end()) {
        for (const auto& k : s->second) {
            const auto& st = statuses_.at(k);
            statuses_by_machine[st.machine_id].push_back(&st);
        }
    }
    std::vector<const Feedback*> severe_feedback;
    if (auto f = feedback_by_article_.find(article_id); f != feedback_by_article_.end()) {
        for (const auto& id : f->second) {
            const auto& fb = feedback_.at(id);
            if (fb.severity != Severity::minor) severe_feedback.push_back(&fb);
        }
    }

    auto by_time = [](const auto* a, const auto* b) { return std::tie(a->ts_ms, a->seq) < std::tie(b->ts_ms, b->seq); };

    std::vector<ProcessOutcome> outcomes;
    for (auto& [machine, events] : events_by_machine) {
        std::sort(events.begin(), events.end(), by_time);
        auto& statuses = statuses_by_machine[machine];
        std::sort(statuses.begin(), statuses.end(), by_time);
        std::vector<PowerSample> power;
        power.reserve(statuses.size());
        for (const auto* s : statuses) power.push_back({s->ts_ms, s->payload.power_w});

        auto close = [&](std::uint64_t start, std::optional<std::uint64_t> end) {
            ProcessOutcome o;
            o.article_id = article_id;
            o.machine_id = machine;
            o.start_ts_ms = start;
            o.end_ts_ms = end;
            if (!end) {
                outcomes.push_back(o);
                return;
            }
            o.production_time_s = static_cast<double>(*end - start) / 1000.0;
            std::vector<const MachineStatus*> inside;
            for (const auto* s : statuses) {
                if (s->ts_ms >= start && s->ts_ms <= *end) inside.push_back(s);
            }
            if (inside.size() >= 2) {
                o.tool_wear_delta = inside.back()->payload.tool_wear - inside.front()->payload.tool_wear;
            }
            for (const auto* e : events) {
                if (e->payload.event_type == telemetry::EventType::error && e->ts_ms >= start && e->ts_ms <= *end) {
                    ++o.error_count;
                }
            }
            for (const auto* f : severe_feedback) {
                const auto ts = static_cast<std::uint64_t>(std::max<std::int64_t>(0, f->created_ts_ms));
                if (ts >= start && ts <= *end) ++o.error_count;
            }
            try {
                o.energy_wh = integrate_power(power, start, *end);
                o.complete = o.production_time_s > 0.0;
            } catch (const InsufficientData&) {
                o.complete = false;
            }
            outcomes.push_back(o);
        };

        std::optional<std::uint64_t> open;
        for (const auto* e : events) {
            if (e->payload.event_type == telemetry::EventType::job_start) {
                if (open) close(*open, std::nullopt);
                open = e->ts_ms;
            } else if (e->payload.event_type == telemetry::EventType::job_end && open) {
                close(*open, e->ts_ms);
                open.reset();
            }
        }
        if (open) close(*open, std::nullopt);
    }
    std::sort(outcomes.begin(), outcomes.end(), [](const auto& a, const auto& b) {
        return std::tie(a.start_ts_ms, a.machine_id) < std::tie(b.start_ts_ms, b.machine_id);
    });
    for (std::size_t i = 0; i < outcomes.size(); ++i) outcomes[i].job_index = i;
    return outcomes;
}

std::vector<TrainingPair> Store::build_dataset() const {
    std::shared_lock lock(mu_);
    std::vector<TrainingPair> pairs;
    for (const auto& [article_id, article] : articles_) {
        auto vit = variants_by_article_.find(article_id);
        if (vit == variants_by_article_.end() || vit->second.empty()) continue;
        std::vector<const DesignVariant*> variants;
        for (const auto& id : vit->second) variants.push_back(&variants_.at(id));
        std::sort(variants.begin(), variants.end(), [](const auto* a, const auto* b) {
            return std::tie(a->created_ts_ms, a->variant_id) < std::tie(b->created_ts_ms, b->variant_id);
        });
        for (const auto& o : outcomes_locked(article_id)) {
            if (!o.complete) continue;
            const DesignVariant* chosen = variants.front();
            for (const auto* v : variants) {
                if (v->created_ts_ms <= static_cast<std::int64_t>(o.start_ts_ms)) chosen = v;
            }
            pairs.push_back({article_id, o.job_index, chosen->effective_features(), o.energy_wh, o.production_time_s});
        }
    }
    if (pairs.empty()) throw EmptyDataset("no complete outcome is linked to a design variant");
    return pairs;
}

RecordCounts Store::counts() const {
    std::shared_lock lock(mu_);
    RecordCounts c;
    c.users = users_.size();
    c.articles = articles_.size();
    c.variants = variants_.size();
    c.events = events_.size();
    c.statuses = statuses_.size();
    c.feedback = feedback_.size();
    for (const auto& entry : fs::directory_iterator(dir_ / "cad" / "blobs")) {
        if (entry.path().extension() == ".step") ++c.blobs;
    }
    return c;
}

}  // namespace fablink::store
