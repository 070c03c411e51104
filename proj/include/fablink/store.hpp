// Article-keyed record store.
//
// Three on-disk areas under the data directory:
//   users/users.ndjson
//   cad/blobs/<sha256>.step, cad/records.ndjson     (articles, design variants)
//   process/{events,status,feedback}.ndjson
// Every file is append-only, one JSON record per line, each carrying a
// "schema" tag. The in-memory index is rebuilt from the files on open.
//
// Writers are serialized; readers take a shared lock and therefore always
// observe a record set that is complete up to some append.

#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fablink/brep.hpp"
#include "fablink/telemetry.hpp"

namespace fablink::store {

class StoreError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
/// A record references an article that does not exist.
class IntegrityError : public StoreError {
public:
    using StoreError::StoreError;
};
/// Same natural key, different content.
class ConflictError : public StoreError {
public:
    using StoreError::StoreError;
};
class NotFound : public StoreError {
public:
    using StoreError::StoreError;
};
class InsufficientData : public StoreError {
public:
    using StoreError::StoreError;
};
class EmptyDataset : public StoreError {
public:
    using StoreError::StoreError;
};

enum class Role { designer, manufacturer, admin };
std::string_view to_string(Role r);
std::optional<Role> parse_role(std::string_view s);

struct User {
    std::string user_id;
    Role role = Role::designer;
    std::string token_sha256;
    bool operator==(const User&) const = default;
};

struct Article {
    std::string article_id;
    std::string name;
    std::string material;
    std::int64_t created_ts_ms = 0;
    bool operator==(const Article&) const = default;
};

struct DesignVariant {
    std::string variant_id;
    std::string article_id;
    std::string step_blob_hash;
    brep::FeatureVector features;
    std::optional<double> thickness_override;
    std::int64_t created_ts_ms = 0;
    std::string uploaded_by;
    std::string label;
    bool operator==(const DesignVariant&) const = default;

    /// Features with thickness_override applied.
    brep::FeatureVector effective_features() const;
};

struct MachineKey {
    std::string machine_id;
    std::uint64_t seq = 0;
    auto operator<=>(const MachineKey&) const = default;
};

struct MachineEvent {
    std::string machine_id;
    std::uint64_t seq = 0;
    std::uint64_t ts_ms = 0;
    std::string article_id;
    telemetry::EventPayload payload;
    std::int64_t ingest_ts_ms = 0;
    /// False when the article did not exist at ingest time.
    bool article_known = true;
    bool operator==(const MachineEvent&) const = default;
    MachineKey key() const { return {machine_id, seq}; }
};

struct MachineStatus {
    std::string machine_id;
    std::uint64_t seq = 0;
    std::uint64_t ts_ms = 0;
    std::string article_id;
    telemetry::StatusPayload payload;
    std::int64_t ingest_ts_ms = 0;
    bool article_known = true;
    bool operator==(const MachineStatus&) const = default;
    MachineKey key() const { return {machine_id, seq}; }
};

enum class FeedbackCategory { dimensional, surface, material, process, other };
enum class Severity { minor, major, scrap };
std::string_view to_string(FeedbackCategory c);
std::string_view to_string(Severity s);
std::optional<FeedbackCategory> parse_feedback_category(std::string_view s);
std::optional<Severity> parse_severity(std::string_view s);

struct Feedback {
    /// Derived from the content when left empty.
    std::string feedback_id;
    std::string article_id;
    std::string reporter;
    FeedbackCategory category = FeedbackCategory::other;
    Severity severity = Severity::minor;
    std::string text;
    std::int64_t created_ts_ms = 0;
    bool operator==(const Feedback&) const = default;
};

struct ProcessOutcome {
    std::string article_id;
    std::size_t job_index = 0;
    std::string machine_id;
    std::uint64_t start_ts_ms = 0;
    std::optional<std::uint64_t> end_ts_ms;
    double production_time_s = 0.0;
    double energy_wh = 0.0;
    double tool_wear_delta = 0.0;
    std::size_t error_count = 0;
    bool complete = false;
    bool operator==(const ProcessOutcome&) const = default;
};

struct TrainingPair {
    std::string article_id;
    std::size_t job_index = 0;
    brep::FeatureVector features;
    double energy_wh = 0.0;
    double production_time_s = 0.0;
};

struct ArticleView {
    Article article;
    std::vector<DesignVariant> variants;
    std::vector<MachineEvent> events;
    std::vector<MachineStatus> statuses;
    std::vector<Feedback> feedback;
    std::vector<ProcessOutcome> outcomes;
    bool operator==(const ArticleView&) const = default;
};

struct AppendResult {
    std::string id;
    bool inserted = false;
};

struct RecordCounts {
    std::size_t users = 0;
    std::size_t articles = 0;
    std::size_t variants = 0;
    std::size_t events = 0;
    std::size_t statuses = 0;
    std::size_t feedback = 0;
    std::size_t blobs = 0;
    bool operator==(const RecordCounts&) const = default;
};

struct PowerSample {
    std::uint64_t ts_ms = 0;
    double power_w = 0.0;
};

/// Trapezoidal energy in Wh over [t0_ms, t1_ms]. Samples must be sorted by
/// time. Window ends are linearly interpolated from the neighbouring samples
/// when both exist, otherwise the nearest sample is held. Throws
/// InsufficientData when fewer than two samples fall inside the window.
double integrate_power(std::span<const PowerSample> samples, std::uint64_t t0_ms, std::uint64_t t1_ms);

std::int64_t now_ms();

/// Record documents as persisted (with "schema" tag); also used for API output.
nlohmann::json to_json(const User& u);
nlohmann::json to_json(const Article& a);
nlohmann::json to_json(const DesignVariant& v);
nlohmann::json to_json(const MachineEvent& e);
nlohmann::json to_json(const MachineStatus& s);
nlohmann::json to_json(const Feedback& f);
nlohmann::json to_json(const ProcessOutcome& o);
nlohmann::json to_json(const ArticleView& v);

class AppendLog;

class Store {
public:
    explicit Store(const std::filesystem::path& data_dir);
    ~Store();
    Store(const Store&) = delete;
    Store& operator=(const Store&) = delete;

    const std::filesystem::path& data_dir() const { return dir_; }

    AppendResult append(const User& user);
    AppendResult append(const Article& article);
    /// The blob must already be stored (put_blob).
    AppendResult append(const DesignVariant& variant);
    AppendResult append(const MachineEvent& event);
    AppendResult append(const MachineStatus& status);
    AppendResult append(Feedback feedback);

    /// Content-addressed; returns the SHA-256 hex.
    std::string put_blob(std::string_view bytes);
    bool has_blob(const std::string& sha256) const;
    std::string read_blob(const std::string& sha256) const;

    bool has_article(const std::string& article_id) const;
    std::optional<Article> find_article(const std::string& article_id) const;
    std::optional<DesignVariant> find_variant(const std::string& variant_id) const;
    std::vector<Article> articles() const;
    std::vector<User> users() const;
    std::optional<User> find_user_by_token_hash(const std::string& token_sha256) const;
    bool has_machine_record(const MachineKey& key) const;
    std::optional<MachineStatus> latest_status(const std::string& machine_id) const;
    /// Latest variant timestamp over all articles, 0 when there are none.
    std::int64_t latest_variant_ts() const;

    ArticleView query_by_article(const std::string& article_id) const;
    std::vector<ProcessOutcome> assemble_outcomes(const std::string& article_id) const;
    std::vector<TrainingPair> build_dataset() const;

    RecordCounts counts() const;

private:
    void load();
    std::vector<ProcessOutcome> outcomes_locked(const std::string& article_id) const;

    std::filesystem::path dir_;
    mutable std::shared_mutex mu_;
    std::unique_ptr<AppendLog> users_log_, cad_log_, events_log_, status_log_, feedback_log_;

    std::map<std::string, User> users_;
    std::map<std::string, std::string> user_by_token_;
    std::map<std::string, Article> articles_;
    std::map<std::string, DesignVariant> variants_;
    std::map<std::string, std::vector<std::string>> variants_by_article_;
    std::map<MachineKey, MachineEvent> events_;
    std::map<std::string, std::vector<MachineKey>> events_by_article_;
    std::map<MachineKey, MachineStatus> statuses_;
    std::map<std::string, std::vector<MachineKey>> statuses_by_article_;
    std::map<std::string, MachineKey> latest_status_by_machine_;
    std::map<std::string, Feedback> feedback_;
    std::map<std::string, std::vector<std::string>> feedback_by_article_;
};

}  // namespace fablink::store
