#include "fablink/http_api.hpp"

#include <algorithm>
#include <functional>

#include "fablink/step.hpp"
#include "httplib.h"
#include "json.hpp"

namespace fablink::platform {

using nlohmann::json;

json error_body(const std::string& code, const std::string& message) {
    return {{"error", {{"code", code}, {"message", message}}}};
}

namespace {

void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(-1, ' ', false, json::error_handler_t::replace), "application/json");
}

void reply_error(httplib::Response& res, std::exception_ptr ep) {
    try {
        std::rethrow_exception(ep);
    } catch (const ApiError& e) {
        reply(res, e.status(), error_body(e.code(), e.what()));
    } catch (const step::SyntaxError& e) {
        auto body = error_body("step_syntax", e.detail());
        body["error"]["line"] = e.line();
        body["error"]["column"] = e.column();
        reply(res, 422, body);
    } catch (const step::StepError& e) {
        reply(res, 422, error_body("step_invalid", e.what()));
    } catch (const brep::GeometryError& e) {
        auto body = error_body("geometry", e.what());
        body["error"]["instance"] = e.id();
        reply(res, 422, body);
    } catch (const store::NotFound& e) {
        reply(res, 404, error_body("not_found", e.what()));
    } catch (const store::IntegrityError& e) {
        reply(res, 404, error_body("not_found", e.what()));
    } catch (const store::ConflictError& e) {
        reply(res, 409, error_body("conflict", e.what()));
    } catch (const NoActiveModel& e) {
        reply(res, 503, error_body("no_active_model", e.what()));
    } catch (const predictor::SchemaMismatch& e) {
        reply(res, 422, error_body("schema_mismatch", e.what()));
    } catch (const json::exception& e) {
        reply(res, 422, error_body("invalid_request", e.what()));
    } catch (const std::invalid_argument& e) {
        reply(res, 422, error_body("invalid_request", e.what()));
    } catch (const std::exception& e) {
        reply(res, 500, error_body("internal", e.what()));
    }
}

json parse_object(const httplib::Request& req) {
    const json j = json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ApiError(422, "invalid_json", "request body must be a JSON object");
    return j;
}

bool is_json(const httplib::Request& req) {
    return req.get_header_value("Content-Type").find("application/json") != std::string::npos;
}

std::optional<double> number_param(const httplib::Request& req, const std::string& name) {
    if (!req.has_param(name)) return std::nullopt;
    const auto v = req.get_param_value(name);
    std::size_t used = 0;
    double d = 0;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty()) throw ApiError(422, "invalid_request", "query parameter " + name + " is not a number");
    return d;
}

std::optional<double> optional_number(const json& j, const char* name) {
    if (!j.contains(name) || j.at(name).is_null()) return std::nullopt;
    if (!j.at(name).is_number()) throw ApiError(422, "invalid_request", std::string(name) + " must be a number");
    return j.at(name).get<double>();
}

json user_json(const store::User& u) { return {{"user_id", u.user_id}, {"role", store::to_string(u.role)}}; }

}  // namespace

struct ApiServer::Impl {
    explicit Impl(Platform& p) : platform(p) {}

    using Handler = std::function<void(const httplib::Request&, httplib::Response&, const store::User&)>;

    httplib::Server::Handler guarded(Action action, Handler h) {
        return [this, action, h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
            try {
                std::optional<std::string> header;
                if (req.has_header("Authorization")) header = req.get_header_value("Authorization");
                const auto user = platform.authenticate(header);
                Platform::authorize(user, action);
                h(req, res, user);
            } catch (...) {
                reply_error(res, std::current_exception());
            }
        };
    }

    void routes() {
        const std::string article = "([A-Za-z0-9_-]{1,64})";
        server.set_payload_max_length(64u << 20);

        server.Get("/api/v1/me", guarded(Action::read, [](const auto&, auto& res, const auto& user) {
                       reply(res, 200, user_json(user));
                   }));

        server.Get("/api/v1/articles", guarded(Action::read, [this](const auto&, auto& res, const auto&) {
                       json a = json::array();
                       for (const auto& art : platform.store().articles()) a.push_back(store::to_json(art));
                       reply(res, 200, {{"articles", a}});
                   }));

        server.Post("/api/v1/articles", guarded(Action::create_article, [this](const auto& req, auto& res, const auto&) {
                        const auto j = parse_object(req);
                        store::Article a;
                        a.article_id = j.at("article_id").template get<std::string>();
                        a.name = j.value("name", a.article_id);
                        a.material = j.value("material", "");
                        a.created_ts_ms = store::now_ms();
                        const auto r = platform.store().append(a);
                        reply(res, r.inserted ? 201 : 200, store::to_json(*platform.store().find_article(a.article_id)));
                    }));

        server.Get("/api/v1/articles/" + article, guarded(Action::read, [this](const auto& req, auto& res, const auto&) {
                       reply(res, 200, store::to_json(platform.store().query_by_article(req.matches[1])));
                   }));

        server.Post("/api/v1/articles/" + article + "/variants",
                    guarded(Action::upload_variant, [this](const auto& req, auto& res, const auto& user) {
                        std::string step_text, label;
                        std::optional<double> thickness;
                        if (is_json(req)) {
                            const auto j = parse_object(req);
                            step_text = j.at("step").template get<std::string>();
                            label = j.value("label", "");
                            thickness = optional_number(j, "thickness_override");
                        } else {
                            step_text = req.body;
                            label = req.get_param_value("label");
                            thickness = number_param(req, "thickness_override");
                        }
                        const auto r = platform.upload_variant(req.matches[1], step_text, user.user_id, label, thickness);
                        reply(res, r.created ? 201 : 200, store::to_json(r.variant));
                    }));

        server.Post("/api/v1/feedback",
                    guarded(Action::post_feedback, [this](const auto& req, auto& res, const auto& user) {
                        const auto j = parse_object(req);
                        store::Feedback f;
                        f.article_id = j.at("article_id").template get<std::string>();
                        f.reporter = user.user_id;
                        const auto cat = store::parse_feedback_category(j.value("category", "other"));
                        const auto sev = store::parse_severity(j.value("severity", "minor"));
                        if (!cat) throw ApiError(422, "invalid_request", "unknown feedback category");
                        if (!sev) throw ApiError(422, "invalid_request", "unknown severity");
                        f.category = *cat;
                        f.severity = *sev;
                        f.text = j.value("text", "");
                        f.created_ts_ms = j.contains("created_ts_ms") ? j.at("created_ts_ms").template get<std::int64_t>()
                                                                      : store::now_ms();
                        const auto r = platform.store().append(f);
                        f.feedback_id = r.id;
                        reply(res, r.inserted ? 201 : 200, store::to_json(f));
                    }));

        server.Post("/api/v1/train", guarded(Action::train, [this](const auto& req, auto& res, const auto&) {
                        auto cfg = platform.config().train;
                        if (!req.body.empty()) {
                            const auto j = parse_object(req);
                            if (j.contains("epochs")) cfg.epochs = j.at("epochs").template get<std::size_t>();
                            if (j.contains("seed")) cfg.seed = j.at("seed").template get<std::uint64_t>();
                            cfg.validate();
                        }
                        reply(res, 202, to_json(platform.start_training(cfg)));
                    }));

        server.Get("/api/v1/train/([^/]+)", guarded(Action::read, [this](const auto& req, auto& res, const auto&) {
                       const auto job = platform.train_job(req.matches[1]);
                       if (!job) throw ApiError(404, "not_found", "train job not found");
                       reply(res, 200, to_json(*job));
                   }));

        server.Get("/api/v1/models", guarded(Action::read, [this](const auto&, auto& res, const auto&) {
                       json models = json::array();
                       for (const auto& m : platform.models().list()) {
                           models.push_back(to_json(m));
                       }
                       const auto active = platform.models().active_id();
                       reply(res, 200, {{"active", active ? json(*active) : json(nullptr)}, {"models", models}});
                   }));

        server.Post("/api/v1/predict", guarded(Action::predict, [this](const auto& req, auto& res, const auto&) {
                        auto factor = number_param(req, "emission_factor");
                        if (is_json(req)) {
                            const auto j = parse_object(req);
                            if (auto f = optional_number(j, "emission_factor")) factor = f;
                            if (j.contains("features")) {
                                reply(res, 200, to_json(platform.predict(
                                                    brep::feature_vector_from_json(j.at("features")), factor)));
                            } else if (j.contains("step")) {
                                reply(res, 200, to_json(platform.predict_step(
                                                    j.at("step").template get<std::string>(), factor)));
                            } else {
                                throw ApiError(422, "invalid_request", "body needs 'features' or 'step'");
                            }
                        } else {
                            reply(res, 200, to_json(platform.predict_step(req.body, factor)));
                        }
                    }));

        server.Get("/api/v1/machines/([^/]+)/status",
                   guarded(Action::read, [this](const auto& req, auto& res, const auto&) {
                       const auto s = platform.store().latest_status(req.matches[1]);
                       if (!s) throw ApiError(404, "not_found", "no status received from this machine");
                       reply(res, 200, store::to_json(*s));
                   }));

        server.Post("/api/v1/users", guarded(Action::manage_users, [this](const auto& req, auto& res, const auto&) {
                        const auto j = parse_object(req);
                        const auto id = j.at("user_id").template get<std::string>();
                        const auto role = store::parse_role(j.at("role").template get<std::string>());
                        if (!role) throw ApiError(422, "invalid_request", "role must be designer, manufacturer or admin");
                        const auto token = platform.add_user(id, *role);
                        reply(res, 201, {{"user_id", id}, {"role", store::to_string(*role)}, {"token", token}});
                    }));

        server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (res.body.empty()) {
                const auto code = res.status == 404 ? "not_found" : "http_error";
                reply(res, res.status, error_body(code, httplib::status_message(res.status)));
            }
        });
        server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            reply_error(res, ep);
        });
    }

    Platform& platform;
    httplib::Server server;
};

ApiServer::ApiServer(Platform& platform) : impl_(std::make_unique<Impl>(platform)) { impl_->routes(); }

ApiServer::~ApiServer() { stop(); }

std::uint16_t ApiServer::bind(const std::string& host, std::uint16_t port) {
    if (port == 0) {
        const int p = impl_->server.bind_to_any_port(host);
        if (p <= 0) throw std::runtime_error("cannot bind HTTP server on " + host);
        return static_cast<std::uint16_t>(p);
    }
    if (!impl_->server.bind_to_port(host, port)) {
        throw std::runtime_error("cannot bind HTTP server on " + host + ":" + std::to_string(port));
    }
    return port;
}

void ApiServer::run() { impl_->server.listen_after_bind(); }

void ApiServer::start() {
    thread_ = std::thread([this] { run(); });
    impl_->server.wait_until_ready();
}

void ApiServer::stop() {
    impl_->server.stop();
    if (thread_.joinable()) thread_.join();
}

}  // namespace fablink::platform
