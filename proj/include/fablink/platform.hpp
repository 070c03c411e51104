// Central server: configuration, users and roles, design uploads, the
// active-model registry, background training and the PDM drop folder.
// The HTTP layer (http_api.hpp) is a thin mapping onto this class.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fablink/predictor.hpp"
#include "fablink/store.hpp"

namespace fablink::platform {

/// An error with an HTTP status attached.
class ApiError : public std::runtime_error {
public:
    ApiError(int status, std::string code, const std::string& message)
        : std::runtime_error(message), status_(status), code_(std::move(code)) {}
    int status() const noexcept { return status_; }
    const std::string& code() const noexcept { return code_; }

private:
    int status_;
    std::string code_;
};

class NoActiveModel : public std::runtime_error {
public:
    NoActiveModel() : std::runtime_error("no model has been trained yet") {}
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct Config {
    std::filesystem::path data_dir = "fablink-data";
    std::string http_host = "127.0.0.1";
    std::uint16_t http_port = 7700;
    std::string telemetry_host = "127.0.0.1";
    std::uint16_t telemetry_port = 7701;
    std::optional<std::filesystem::path> drop_folder;
    double poll_interval_s = 5.0;
    double emission_factor_kg_per_kwh = 0.4;
    predictor::TrainConfig train;

    /// Unknown keys are rejected (ConfigError). Relative paths resolve against `base_dir`.
    static Config from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
    /// Throws ConfigError naming the file; std::runtime_error when unreadable.
    static Config load_file(const std::filesystem::path& path);
    /// From $FABLINK_CONFIG when set, defaults otherwise.
    static Config from_env();
};

enum class Action { read, create_article, upload_variant, post_feedback, train, manage_users, predict };

bool allowed(store::Role role, Action action);

std::string hash_token(std::string_view token);
/// 32 random bytes, hex.
std::string generate_token();

struct ModelInfo {
    std::string model_id;
    predictor::TrainMetadata metadata;
    bool active = false;
};

/// Models on disk under <data_dir>/models, one active at a time. The active
/// artifact is immutable and swapped as a whole.
class ModelRegistry {
public:
    explicit ModelRegistry(std::filesystem::path dir);

    /// Persists and activates; returns the model id.
    std::string install(const predictor::ModelArtifact& model);
    /// Null before the first model.
    std::shared_ptr<const predictor::ModelArtifact> active() const;
    std::optional<std::string> active_id() const;
    std::vector<ModelInfo> list() const;

private:
    std::filesystem::path dir_;
    mutable std::mutex mu_;
    std::shared_ptr<const predictor::ModelArtifact> active_;
    std::string active_id_;
    std::map<std::string, predictor::TrainMetadata> models_;
};

enum class JobState { queued, running, succeeded, failed };
std::string_view to_string(JobState s);

struct TrainJob {
    std::string job_id;
    JobState state = JobState::queued;
    std::int64_t started_ts_ms = 0;
    std::optional<std::int64_t> finished_ts_ms;
    std::optional<std::string> result;
    std::optional<std::string> error;
};

nlohmann::json to_json(const TrainJob& job);
nlohmann::json to_json(const ModelInfo& m);

struct DropEntry {
    std::string file;
    bool ok = false;
    std::string article_id;
    std::string variant_id;
    std::string error;
};

struct DropReport {
    std::vector<DropEntry> entries;
};

nlohmann::json to_json(const DropReport& report);

struct UploadResult {
    store::DesignVariant variant;
    bool created = false;
};

struct PredictResult {
    predictor::Prediction prediction;
    brep::FeatureVector features;
    std::string model_id;
    double emission_factor = 0.0;
};

nlohmann::json to_json(const PredictResult& r);

class Platform {
public:
    explicit Platform(Config config);
    ~Platform();
    Platform(const Platform&) = delete;
    Platform& operator=(const Platform&) = delete;

    const Config& config() const { return config_; }
    store::Store& store() { return store_; }
    ModelRegistry& models() { return models_; }

    /// Creates an admin with a fresh token when no user exists yet and
    /// returns the token; nullopt otherwise.
    std::optional<std::string> bootstrap_admin();
    /// Returns the plain token (only its hash is stored).
    std::string add_user(const std::string& user_id, store::Role role);

    /// `Authorization` header value -> user. Throws ApiError 401.
    store::User authenticate(const std::optional<std::string>& header) const;
    /// Throws ApiError 403.
    static void authorize(const store::User& user, Action action);

    /// Parses, featurizes and stores. Throws step/brep errors, store::NotFound,
    /// store::ConflictError.
    UploadResult upload_variant(const std::string& article_id, std::string_view step_bytes,
                                const std::string& uploaded_by, const std::string& label = "",
                                std::optional<double> thickness_override = std::nullopt);

    /// Throws NoActiveModel.
    PredictResult predict(const brep::FeatureVector& features, std::optional<double> emission_factor) const;
    PredictResult predict_step(std::string_view step_bytes, std::optional<double> emission_factor) const;

    /// Starts a background job. Throws ApiError 409 when one is running.
    TrainJob start_training(std::optional<predictor::TrainConfig> cfg = std::nullopt);
    std::optional<TrainJob> train_job(const std::string& job_id) const;
    /// Blocks until the job is finished.
    TrainJob wait_for_job(const std::string& job_id);
    /// Synchronous training; throws store::EmptyDataset, predictor errors.
    std::string train_now(std::optional<predictor::TrainConfig> cfg = std::nullopt);

    DropReport poll_drop_folder();

private:
    void run_job(std::string job_id, predictor::TrainConfig cfg);
    UploadResult upload_impl(const std::string& article_id, std::string_view step_bytes,
                             const std::string& uploaded_by, const std::string& label,
                             std::optional<double> thickness_override, bool create_article);

    Config config_;
    store::Store store_;
    ModelRegistry models_;

    mutable std::mutex jobs_mu_;
    std::condition_variable jobs_cv_;
    std::map<std::string, TrainJob> jobs_;
    std::size_t job_counter_ = 0;
    bool job_active_ = false;
    std::thread worker_;
    std::mutex drop_mu_;
};

/// parse_step + build_brep + extract_features.
brep::FeatureVector featurize(std::string_view step_bytes);

/// Drop-folder naming rule: "<article_id>__<label>.step" or ".stp".
struct DropName {
    std::string article_id;
    std::string label;
};
/// Throws std::invalid_argument with the naming-rule message.
DropName parse_drop_name(const std::string& filename);

inline constexpr const char* kDropUser = "system:pdm";

}  // namespace fablink::platform
