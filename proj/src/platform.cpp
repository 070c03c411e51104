#include "fablink/platform.hpp"

#include <openssl/rand.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>

#include "fablink/hash.hpp"
#include "fablink/step.hpp"
#include "json.hpp"

namespace fablink::platform {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_atomic(const fs::path& p, const std::string& bytes) {
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << bytes;
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
    }
    fs::rename(tmp, p);
}

std::uint16_t port_of(const json& v) {
    const auto p = v.get<std::int64_t>();
    if (p < 0 || p > 65535) throw std::invalid_argument("port out of range");
    return static_cast<std::uint16_t>(p);
}

}  // namespace

Config Config::from_json(const json& j, const fs::path& base_dir) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    Config c;
    auto path = [&](const json& v) {
        fs::path p = v.get<std::string>();
        return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    for (const auto& [key, v] : j.items()) {
        if (key == "data_dir") {
            c.data_dir = path(v);
        } else if (key == "http_host") {
            c.http_host = v.get<std::string>();
        } else if (key == "http_port") {
            c.http_port = port_of(v);
        } else if (key == "telemetry_host") {
            c.telemetry_host = v.get<std::string>();
        } else if (key == "telemetry_port") {
            c.telemetry_port = port_of(v);
        } else if (key == "drop_folder") {
            if (!v.is_null()) c.drop_folder = path(v);
        } else if (key == "poll_interval_s") {
            c.poll_interval_s = v.get<double>();
            if (!(c.poll_interval_s > 0.0)) throw ConfigError("poll_interval_s must be > 0");
        } else if (key == "emission_factor_kg_per_kwh") {
            c.emission_factor_kg_per_kwh = v.get<double>();
            if (!(c.emission_factor_kg_per_kwh >= 0.0)) throw ConfigError("emission factor must be >= 0");
        } else if (key == "train") {
            for (const auto& [tk, tv] : v.items()) {
                if (tk == "epochs") {
                    c.train.epochs = tv.get<std::size_t>();
                } else if (tk == "batch_size") {
                    c.train.batch_size = tv.get<std::size_t>();
                } else if (tk == "learning_rate") {
                    c.train.learning_rate = tv.get<double>();
                } else if (tk == "seed") {
                    c.train.seed = tv.get<std::uint64_t>();
                } else if (tk == "validation_fraction") {
                    c.train.validation_fraction = tv.get<double>();
                } else if (tk == "hidden") {
                    c.train.dims = {brep::FeatureVector::kSize};
                    for (auto h : tv.get<std::vector<std::size_t>>()) c.train.dims.push_back(h);
                    c.train.dims.push_back(predictor::kTargets);
                } else if (tk == "target_space") {
                    const auto s = tv.get<std::string>();
                    if (s == "log1p") {
                        c.train.target_space = predictor::TargetSpace::log1p;
                    } else if (s == "linear") {
                        c.train.target_space = predictor::TargetSpace::linear;
                    } else {
                        throw ConfigError("train.target_space must be linear or log1p");
                    }
                } else {
                    throw ConfigError("unknown config key 'train." + tk + "'");
                }
            }
            c.train.validate();
        } else {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    return c;
}

Config Config::load_file(const fs::path& p) {
    const auto text = read_file(p);
    try {
        return from_json(json::parse(text), p.parent_path());
    } catch (const std::exception& e) {
        throw ConfigError(p.string() + ": " + e.what());
    }
}

Config Config::from_env() {
    const char* p = std::getenv("FABLINK_CONFIG");
    if (!p || !*p) return {};
    return load_file(p);
}

bool allowed(store::Role role, Action action) {
    using store::Role;
    switch (action) {
        case Action::read:
        case Action::predict: return true;
        case Action::create_article:
        case Action::upload_variant: return role == Role::designer || role == Role::admin;
        case Action::post_feedback: return role == Role::manufacturer || role == Role::admin;
        case Action::train:
        case Action::manage_users: return role == Role::admin;
    }
    return false;
}

std::string hash_token(std::string_view token) { return sha256_hex(token); }

std::string generate_token() {
    unsigned char buf[32];
    if (RAND_bytes(buf, sizeof buf) != 1) throw std::runtime_error("no system randomness available");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned char b : buf) {
        out += hex[b >> 4];
        out += hex[b & 15];
    }
    return out;
}

ModelRegistry::ModelRegistry(fs::path dir) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    const std::string suffix = ".fablink-model.json";
    for (const auto& entry : fs::directory_iterator(dir_)) {
        const auto name = entry.path().filename().string();
        if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
            continue;
        }
        const auto id = name.substr(0, name.size() - suffix.size());
        models_[id] = predictor::load_model(read_file(entry.path())).metadata;
    }
    const auto pointer = dir_ / "active.json";
    if (fs::exists(pointer)) {
        const auto id = json::parse(read_file(pointer)).at("model_id").get<std::string>();
        active_ = std::make_shared<const predictor::ModelArtifact>(
            predictor::load_model(read_file(dir_ / (id + suffix))));
        active_id_ = id;
    }
}

std::string ModelRegistry::install(const predictor::ModelArtifact& model) {
    const auto bytes = predictor::save_model(model);
    const auto id = "model-" + sha256_hex(bytes).substr(0, 16);
    // Reload from bytes so the served artifact is exactly what is on disk.
    auto artifact = std::make_shared<const predictor::ModelArtifact>(predictor::load_model(bytes));
    std::lock_guard lock(mu_);
    write_atomic(dir_ / (id + ".fablink-model.json"), bytes);
    write_atomic(dir_ / "active.json", json{{"model_id", id}}.dump() + "\n");
    models_[id] = artifact->metadata;
    active_ = std::move(artifact);
    active_id_ = id;
    return id;
}

std::shared_ptr<const predictor::ModelArtifact> ModelRegistry::active() const {
    std::lock_guard lock(mu_);
    return active_;
}

std::optional<std::string> ModelRegistry::active_id() const {
    std::lock_guard lock(mu_);
    if (!active_) return std::nullopt;
    return active_id_;
}

std::vector<ModelInfo> ModelRegistry::list() const {
    std::lock_guard lock(mu_);
    std::vector<ModelInfo> out;
    for (const auto& [id, md] : models_) out.push_back({id, md, active_ && id == active_id_});
    std::sort(out.begin(), out.end(), [](const ModelInfo& a, const ModelInfo& b) {
        return std::tie(a.metadata.created_ts_ms, a.model_id) < std::tie(b.metadata.created_ts_ms, b.model_id);
    });
    return out;
}

std::string_view to_string(JobState s) {
    switch (s) {
        case JobState::queued: return "queued";
        case JobState::running: return "running";
        case JobState::succeeded: return "succeeded";
        case JobState::failed: return "failed";
    }
    return "";
}

json to_json(const TrainJob& job) {
    json j = {{"job_id", job.job_id}, {"state", to_string(job.state)}, {"started_ts_ms", job.started_ts_ms}};
    j["finished_ts_ms"] = job.finished_ts_ms ? json(*job.finished_ts_ms) : json(nullptr);
    j["result"] = job.result ? json(*job.result) : json(nullptr);
    j["error"] = job.error ? json(*job.error) : json(nullptr);
    return j;
}

json to_json(const ModelInfo& m) {
    const auto& md = m.metadata;
    return {{"model_id", m.model_id},
            {"active", m.active},
            {"created_ts_ms", md.created_ts_ms},
            {"dataset_size", md.dataset_size},
            {"epochs", md.epochs},
            {"seed", md.seed},
            {"final_train_loss", md.final_train_loss},
            {"final_validation_loss", md.final_validation_loss},
            {"r2_energy", md.r2_energy},
            {"r2_time", md.r2_time}};
}

json to_json(const PredictResult& r) {
    json p = {{"energy_wh", r.prediction.energy_wh}, {"production_time_s", r.prediction.production_time_s}};
    if (r.prediction.co2_kg) p["co2_kg"] = *r.prediction.co2_kg;
    return {{"prediction", p},
            {"features", brep::to_json(r.features)},
            {"model_id", r.model_id},
            {"emission_factor", r.emission_factor}};
}

json to_json(const DropReport& report) {
    json a = json::array();
    for (const auto& e : report.entries) {
        json j = {{"file", e.file}, {"ok", e.ok}, {"article_id", e.article_id}};
        if (e.ok) {
            j["variant_id"] = e.variant_id;
        } else {
            j["error"] = e.error;
        }
        a.push_back(std::move(j));
    }
    return {{"entries", a}};
}

brep::FeatureVector featurize(std::string_view step_bytes) {
    return brep::extract_features(brep::build_brep(step::parse_step(step_bytes)));
}

DropName parse_drop_name(const std::string& filename) {
    const auto rule = "file name must be <article_id>__<label>.step (or .stp): ";
    const auto dot = filename.rfind('.');
    std::string ext = dot == std::string::npos ? "" : filename.substr(dot + 1);
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext != "step" && ext != "stp") throw std::invalid_argument(rule + std::string("unsupported extension"));
    const auto stem = filename.substr(0, dot);
    const auto sep = stem.find("__");
    if (sep == std::string::npos) throw std::invalid_argument(rule + std::string("missing '__' separator"));
    DropName n{stem.substr(0, sep), stem.substr(sep + 2)};
    if (!telemetry::valid_article_id(n.article_id)) throw std::invalid_argument(rule + std::string("bad article id"));
    if (n.label.empty()) throw std::invalid_argument(rule + std::string("empty label"));
    return n;
}

Platform::Platform(Config config)
    : config_(std::move(config)), store_(config_.data_dir), models_(config_.data_dir / "models") {}

Platform::~Platform() {
    if (worker_.joinable()) worker_.join();
}

std::optional<std::string> Platform::bootstrap_admin() {
    if (!store_.users().empty()) return std::nullopt;
    return add_user("admin", store::Role::admin);
}

std::string Platform::add_user(const std::string& user_id, store::Role role) {
    if (user_id.empty() || user_id.size() > 64) throw std::invalid_argument("user_id must be 1-64 characters");
    for (const auto& u : store_.users()) {
        if (u.user_id == user_id) throw store::ConflictError("user '" + user_id + "' already exists");
    }
    auto token = generate_token();
    store_.append(store::User{user_id, role, hash_token(token)});
    return token;
}

store::User Platform::authenticate(const std::optional<std::string>& header) const {
    if (!header || header->empty()) throw ApiError(401, "unauthorized", "missing bearer token");
    const std::string& h = *header;
    if (h.size() < 7 || !std::equal(h.begin(), h.begin() + 7, "bearer ", [](char a, char b) {
            return std::tolower(static_cast<unsigned char>(a)) == b;
        })) {
        throw ApiError(401, "unauthorized", "authorization must use the Bearer scheme");
    }
    auto token = h.substr(7);
    while (!token.empty() && std::isspace(static_cast<unsigned char>(token.back()))) token.pop_back();
    while (!token.empty() && std::isspace(static_cast<unsigned char>(token.front()))) token.erase(0, 1);
    if (token.empty()) throw ApiError(401, "unauthorized", "missing bearer token");
    auto user = store_.find_user_by_token_hash(hash_token(token));
    if (!user) throw ApiError(401, "unauthorized", "unknown token");
    return *user;
}

void Platform::authorize(const store::User& user, Action action) {
    if (!allowed(user.role, action)) {
        throw ApiError(403, "forbidden", "role " + std::string(store::to_string(user.role)) + " may not do this");
    }
}

UploadResult Platform::upload_variant(const std::string& article_id, std::string_view step_bytes,
                                      const std::string& uploaded_by, const std::string& label,
                                      std::optional<double> thickness_override) {
    return upload_impl(article_id, step_bytes, uploaded_by, label, thickness_override, false);
}

UploadResult Platform::upload_impl(const std::string& article_id, std::string_view step_bytes,
                                   const std::string& uploaded_by, const std::string& label,
                                   std::optional<double> thickness_override, bool create_article) {
    if (!create_article && !store_.has_article(article_id)) {
        throw store::NotFound("article '" + article_id + "' not found");
    }
    if (thickness_override && !(std::isfinite(*thickness_override) && *thickness_override > 0.0)) {
        throw std::invalid_argument("thickness_override must be a positive number");
    }
    const auto features = featurize(step_bytes);
    const auto blob = store_.put_blob(step_bytes);
    store::DesignVariant v;
    v.variant_id = "v-" + blob.substr(0, 16);
    if (auto existing = store_.find_variant(v.variant_id); existing && existing->article_id != article_id) {
        throw store::ConflictError("this STEP content is already variant " + v.variant_id + " of article '" +
                                   existing->article_id + "'");
    }
    if (create_article && !store_.has_article(article_id)) {
        store_.append(store::Article{article_id, article_id, "", store::now_ms()});
    }
    v.article_id = article_id;
    v.step_blob_hash = blob;
    v.features = features;
    v.thickness_override = thickness_override;
    v.created_ts_ms = store::now_ms();
    v.uploaded_by = uploaded_by;
    v.label = label;
    const auto r = store_.append(v);
    if (!r.inserted) return {*store_.find_variant(v.variant_id), false};
    return {v, true};
}

PredictResult Platform::predict(const brep::FeatureVector& features, std::optional<double> emission_factor) const {
    auto model = models_.active();
    auto id = models_.active_id();
    if (!model || !id) throw NoActiveModel();
    const double factor = emission_factor.value_or(config_.emission_factor_kg_per_kwh);
    return {predictor::predict(*model, features, factor), features, *id, factor};
}

PredictResult Platform::predict_step(std::string_view step_bytes, std::optional<double> emission_factor) const {
    if (!models_.active()) throw NoActiveModel();
    return predict(featurize(step_bytes), emission_factor);
}

TrainJob Platform::start_training(std::optional<predictor::TrainConfig> cfg) {
    auto config = cfg.value_or(config_.train);
    config.validate();
    std::unique_lock lock(jobs_mu_);
    if (job_active_) throw ApiError(409, "conflict", "a training job is already running");
    if (worker_.joinable()) {
        // The previous job has published its result; only thread teardown remains.
        lock.unlock();
        worker_.join();
        lock.lock();
    }
    TrainJob job;
    job.job_id = "job-" + std::to_string(++job_counter_);
    job.started_ts_ms = store::now_ms();
    jobs_[job.job_id] = job;
    job_active_ = true;
    worker_ = std::thread([this, id = job.job_id, config] { run_job(id, config); });
    return job;
}

void Platform::run_job(std::string job_id, predictor::TrainConfig cfg) {
    {
        std::lock_guard lock(jobs_mu_);
        jobs_[job_id].state = JobState::running;
    }
    std::optional<std::string> result, error;
    try {
        const auto data = store_.build_dataset();
        result = models_.install(predictor::train(data, cfg));
    } catch (const store::EmptyDataset& e) {
        error = std::string("EmptyDataset: ") + e.what();
    } catch (const predictor::DatasetTooSmall& e) {
        error = std::string("DatasetTooSmall: ") + e.what();
    } catch (const predictor::NonFiniteLoss& e) {
        error = std::string("NonFiniteLoss: ") + e.what();
    } catch (const std::exception& e) {
        error = e.what();
    }
    std::lock_guard lock(jobs_mu_);
    auto& job = jobs_[job_id];
    job.finished_ts_ms = store::now_ms();
    job.result = result;
    job.error = error;
    job.state = result ? JobState::succeeded : JobState::failed;
    job_active_ = false;
    jobs_cv_.notify_all();
}

std::optional<TrainJob> Platform::train_job(const std::string& job_id) const {
    std::lock_guard lock(jobs_mu_);
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) return std::nullopt;
    return it->second;
}

TrainJob Platform::wait_for_job(const std::string& job_id) {
    std::unique_lock lock(jobs_mu_);
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) throw store::NotFound("train job '" + job_id + "' not found");
    jobs_cv_.wait(lock, [&] {
        return it->second.state == JobState::succeeded || it->second.state == JobState::failed;
    });
    return it->second;
}

std::string Platform::train_now(std::optional<predictor::TrainConfig> cfg) {
    const auto data = store_.build_dataset();
    return models_.install(predictor::train(data, cfg.value_or(config_.train)));
}

DropReport Platform::poll_drop_folder() {
    DropReport report;
    if (!config_.drop_folder) return report;
    std::lock_guard lock(drop_mu_);
    const auto& dir = *config_.drop_folder;
    fs::create_directories(dir / "processed");
    fs::create_directories(dir / "rejected");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (!entry.is_regular_file() || name.empty() || name.front() == '.') continue;
        files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& path : files) {
        DropEntry e;
        e.file = path.filename().string();
        try {
            const auto name = parse_drop_name(e.file);
            e.article_id = name.article_id;
            const auto r = upload_impl(name.article_id, read_file(path), kDropUser, name.label, std::nullopt, true);
            e.variant_id = r.variant.variant_id;
            e.ok = true;
            fs::rename(path, dir / "processed" / e.file);
        } catch (const std::exception& ex) {
            e.error = ex.what();
            std::error_code ec;
            fs::rename(path, dir / "rejected" / e.file, ec);
            std::ofstream(dir / "rejected" / (e.file + ".error.txt")) << e.error << "\n";
        }
        report.entries.push_back(std::move(e));
    }
    return report;
}

}  // namespace fablink::platform
