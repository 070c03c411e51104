#include <atomic>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "fablink/http_api.hpp"
#include "httplib.h"
#include "world.hpp"

using namespace fablink;
using namespace fablink::platform;
using nlohmann::json;
using testing::World;

namespace {

const fixtures::PlateSpec kFourHole{100, 100, 2, {{25, 25, 10}, {75, 25, 10}, {25, 75, 10}, {75, 75, 10}}};

fixtures::PlateSpec plain_plate(double length) { return {length, 80, 2, {}}; }

struct Http {
    explicit Http(World& w) : server(w.platform) {
        port = server.bind("127.0.0.1", 0);
        server.start();
    }
    ~Http() { server.stop(); }

    httplib::Result send(const std::string& method, const std::string& path, const std::string& token,
                         const std::string& body = "", const std::string& type = "application/json") {
        httplib::Client c("127.0.0.1", port);
        httplib::Headers h;
        if (!token.empty()) h.emplace("Authorization", "Bearer " + token);
        if (method == "GET") return c.Get(path, h);
        return c.Post(path, h, body, type);
    }

    ApiServer server;
    std::uint16_t port = 0;
};

int status_of(const httplib::Result& r) { return r ? r->status : -1; }

json body_of(const httplib::Result& r) { return json::parse(r->body); }

}  // namespace

TEST_CASE("role by endpoint policy matrix") {
    World w;
    w.platform.store().append(store::Article{"A1", "bracket", "S235", 1});
    Http http(w);

    const std::vector<std::string> roles = {"none", "bogus", "designer", "manufacturer", "admin"};
    auto token = [&](const std::string& role) -> std::string {
        if (role == "none") return "";
        if (role == "bogus") return "not-a-token";
        return w.tokens.at(role);
    };
    struct Row {
        std::string method, path;
        std::function<std::string(const std::string&)> body;
        std::string type;
        std::map<std::string, int> expect;  // by role; none/bogus are always 401
    };
    const json features = brep::to_json(testing::plate_features(kFourHole));
    int serial = 0;
    const std::vector<Row> rows = {
        {"GET", "/api/v1/articles", nullptr, "", {{"designer", 200}, {"manufacturer", 200}, {"admin", 200}}},
        {"GET", "/api/v1/articles/A1", nullptr, "", {{"designer", 200}, {"manufacturer", 200}, {"admin", 200}}},
        {"POST", "/api/v1/articles",
         [](const std::string& role) { return json{{"article_id", "N-" + role}}.dump(); }, "application/json",
         {{"designer", 201}, {"manufacturer", 403}, {"admin", 201}}},
        {"POST", "/api/v1/articles/A1/variants",
         [&](const std::string&) { return fixtures::generate_plate_step(plain_plate(100 + ++serial)); },
         "application/step", {{"designer", 201}, {"manufacturer", 403}, {"admin", 201}}},
        {"POST", "/api/v1/feedback",
         [](const std::string& role) {
             return json{{"article_id", "A1"}, {"category", "surface"}, {"severity", "minor"}, {"text", role}}.dump();
         },
         "application/json", {{"designer", 403}, {"manufacturer", 201}, {"admin", 201}}},
        {"POST", "/api/v1/predict", [&](const std::string&) { return json{{"features", features}}.dump(); },
         "application/json", {{"designer", 503}, {"manufacturer", 503}, {"admin", 503}}},
        {"GET", "/api/v1/models", nullptr, "", {{"designer", 200}, {"manufacturer", 200}, {"admin", 200}}},
        {"GET", "/api/v1/machines/m1/status", nullptr, "", {{"designer", 404}, {"manufacturer", 404}, {"admin", 404}}},
        {"POST", "/api/v1/users",
         [](const std::string& role) { return json{{"user_id", "u-" + role}, {"role", "designer"}}.dump(); },
         "application/json", {{"designer", 403}, {"manufacturer", 403}, {"admin", 201}}},
        {"POST", "/api/v1/train", nullptr, "application/json", {{"designer", 403}, {"manufacturer", 403}, {"admin", 202}}},
        {"GET", "/api/v1/train/job-1", nullptr, "", {{"designer", 200}, {"manufacturer", 200}, {"admin", 200}}},
        {"GET", "/api/v1/train/job-99", nullptr, "", {{"designer", 404}, {"manufacturer", 404}, {"admin", 404}}},
    };
    for (const auto& row : rows) {
        for (const auto& role : roles) {
            const auto body = row.body ? row.body(role) : std::string();
            const auto r = http.send(row.method, row.path, token(role), body, row.type.empty() ? "text/plain" : row.type);
            const int want = row.expect.count(role) ? row.expect.at(role) : 401;
            INFO(row.method << " " << row.path << " as " << role);
            CHECK(status_of(r) == want);
            if (r && r->status >= 400) CHECK(body_of(r).contains("error"));
        }
    }
    // Authorization is checked before anything touches the store.
    CHECK(w.platform.store().counts().variants == 2);
    CHECK_FALSE(w.platform.store().has_article("N-manufacturer"));
    CHECK(w.platform.wait_for_job("job-1").state == JobState::failed);
    CHECK(w.platform.train_job("job-1")->error->find("EmptyDataset") == 0);
}

TEST_CASE("variant upload error mapping") {
    World w;
    w.platform.store().append(store::Article{"A1", "bracket", "S235", 1});
    w.platform.store().append(store::Article{"A2", "other", "S235", 1});
    Http http(w);
    const auto& t = w.tokens.at("designer");
    const auto plate = fixtures::generate_plate_step(kFourHole);

    auto r = http.send("POST", "/api/v1/articles/A1/variants?label=first", t, plate, "application/step");
    REQUIRE(status_of(r) == 201);
    const auto v = body_of(r);
    CHECK(v["features"]["hole_count"] == 4);
    CHECK(v["features"]["material_thickness"] == 2.0);
    CHECK(v["label"] == "first");

    CHECK(status_of(http.send("POST", "/api/v1/articles/A1/variants", t, plate, "application/step")) == 200);
    CHECK(status_of(http.send("POST", "/api/v1/articles/A2/variants", t, plate, "application/step")) == 409);
    CHECK(status_of(http.send("POST", "/api/v1/articles/ZZ/variants", t, plate, "application/step")) == 404);

    r = http.send("POST", "/api/v1/articles/A1/variants", t, "ISO-10303-21;\nHEADER;\nFILE_DESCRIPTION((''),'2;1')\n",
                  "application/step");
    REQUIRE(status_of(r) == 422);
    const auto err = body_of(r)["error"];
    CHECK(err["code"] == "step_syntax");
    CHECK(err["line"].get<int>() >= 3);
    CHECK(err["column"].get<int>() >= 1);

    const json as_json = {{"step", fixtures::generate_plate_step(plain_plate(150))}, {"thickness_override", 5.0}};
    r = http.send("POST", "/api/v1/articles/A1/variants", t, as_json.dump());
    REQUIRE(status_of(r) == 201);
    CHECK(body_of(r)["thickness_override"] == 5.0);

    CHECK(status_of(http.send("POST", "/api/v1/articles", t, "{not json")) == 422);
    CHECK(status_of(http.send("POST", "/api/v1/articles", t, R"({"article_id":"has space"})")) == 422);
    CHECK(status_of(http.send("POST", "/api/v1/articles", t, R"({"article_id":"A1","name":"changed"})")) == 409);
    CHECK(status_of(http.send("GET", "/api/v1/articles/ZZ", t)) == 404);
    CHECK(status_of(http.send("GET", "/api/v1/nothing-here", t)) == 404);

    const auto m = w.tokens.at("manufacturer");
    CHECK(status_of(http.send("POST", "/api/v1/feedback", m, R"({"article_id":"ZZ","text":"x"})")) == 404);
    CHECK(status_of(http.send("POST", "/api/v1/feedback", m, R"({"article_id":"A1","severity":"huge"})")) == 422);
    const auto fb = R"({"article_id":"A1","severity":"scrap","text":"cracked","created_ts_ms":5})";
    CHECK(status_of(http.send("POST", "/api/v1/feedback", m, fb)) == 201);
    CHECK(status_of(http.send("POST", "/api/v1/feedback", m, fb)) == 200);

    const auto a = w.tokens.at("admin");
    CHECK(status_of(http.send("POST", "/api/v1/users", a, R"({"user_id":"dana","role":"designer"})")) == 409);
    CHECK(status_of(http.send("POST", "/api/v1/users", a, R"({"user_id":"eve","role":"boss"})")) == 422);
    r = http.send("POST", "/api/v1/users", a, R"({"user_id":"eve","role":"manufacturer"})");
    REQUIRE(status_of(r) == 201);
    const auto eve = body_of(r)["token"].get<std::string>();
    r = http.send("GET", "/api/v1/me", eve);
    CHECK(body_of(r)["role"] == "manufacturer");
}

TEST_CASE("article view lists records in order") {
    World w;
    testing::populate(w.platform, 3, 0.0, 5);
    Http http(w);
    const auto r = http.send("GET", "/api/v1/articles/P1", w.tokens.at("designer"));
    REQUIRE(status_of(r) == 200);
    const auto j = body_of(r);
    CHECK(j["variants"].size() == 1);
    CHECK(j["outcomes"].size() == 1);
    CHECK(j["outcomes"][0]["complete"] == true);
    const auto& st = j["statuses"];
    for (std::size_t i = 1; i < st.size(); ++i) CHECK(st[i]["ts_ms"] >= st[i - 1]["ts_ms"]);
    CHECK(http.send("GET", "/api/v1/articles/P1", w.tokens.at("admin"))->body == r->body);
    CHECK(status_of(http.send("GET", "/api/v1/machines/m1/status", w.tokens.at("admin"))) == 200);
}

TEST_CASE("training job lifecycle, single flight and prediction") {
    World w;
    testing::populate(w.platform, 40, 0.0, 6);
    Http http(w);
    const auto& a = w.tokens.at("admin");

    auto r = http.send("POST", "/api/v1/train", a, R"({"epochs":3000,"seed":1})");
    REQUIRE(status_of(r) == 202);
    const auto job = body_of(r)["job_id"].get<std::string>();
    CHECK(status_of(http.send("POST", "/api/v1/train", a, "")) == 409);
    const auto done = w.platform.wait_for_job(job);
    REQUIRE(done.state == JobState::succeeded);

    r = http.send("GET", "/api/v1/train/" + job, w.tokens.at("designer"));
    CHECK(body_of(r)["state"] == "succeeded");
    r = http.send("GET", "/api/v1/models", a);
    const auto models = body_of(r);
    CHECK(models["active"] == *done.result);
    CHECK(models["models"].size() == 1);

    const auto plate = fixtures::generate_plate_step(kFourHole);
    r = http.send("POST", "/api/v1/predict?emission_factor=0.5", w.tokens.at("manufacturer"), plate, "application/step");
    REQUIRE(status_of(r) == 200);
    auto p = body_of(r);
    CHECK(p["features"]["hole_count"] == 4);
    CHECK(p["prediction"]["co2_kg"].get<double>() ==
          doctest::Approx(p["prediction"]["energy_wh"].get<double>() / 1000.0 * 0.5));
    r = http.send("POST", "/api/v1/predict", a, json{{"features", p["features"]}}.dump());
    p = body_of(r);
    CHECK(p["emission_factor"] == 0.4);
    CHECK(status_of(http.send("POST", "/api/v1/predict", a, R"({"features":{"schema":"f9"}})")) == 422);
    CHECK(status_of(http.send("POST", "/api/v1/predict", a, R"({"nothing":1})")) == 422);
    CHECK(status_of(http.send("POST", "/api/v1/predict", a, "garbage", "application/step")) == 422);
}

TEST_CASE("model swap is atomic for concurrent predictions") {
    World w;
    testing::populate(w.platform, 30, 0.0, 7);
    const auto first = w.platform.train_now();
    const auto features = testing::plate_features(kFourHole);
    const auto models_dir = w.platform.config().data_dir / "models";
    auto expected = [&](const std::string& id) {
        std::ifstream in(models_dir / (id + ".fablink-model.json"));
        const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return predictor::predict(predictor::load_model(text), features).energy_wh;
    };

    predictor::TrainConfig cfg;
    cfg.seed = 42;
    cfg.epochs = 800;
    const auto job = w.platform.start_training(cfg);
    std::atomic<bool> stop{false};
    std::vector<std::pair<std::string, double>> seen;
    std::mutex mu;
    std::vector<std::thread> readers;
    for (int i = 0; i < 3; ++i) {
        readers.emplace_back([&] {
            while (!stop) {
                const auto r = w.platform.predict(features, std::nullopt);
                std::lock_guard lock(mu);
                seen.emplace_back(r.model_id, r.prediction.energy_wh);
            }
        });
    }
    const auto done = w.platform.wait_for_job(job.job_id);
    for (int i = 0; i < 50; ++i) w.platform.predict(features, std::nullopt);
    stop = true;
    for (auto& t : readers) t.join();
    REQUIRE(done.state == JobState::succeeded);
    const auto second = *done.result;
    CHECK(second != first);
    const double e1 = expected(first), e2 = expected(second);
    for (const auto& [id, energy] : seen) {
        const bool ok = (id == first && energy == e1) || (id == second && energy == e2);
        CHECK(ok);
    }
}

TEST_CASE("registry reloads the active model") {
    testing::TempDir dir("reg");
    predictor::ModelArtifact art;
    art.mlp = predictor::Mlp::xavier({14, 32, 16, 2}, 1);
    art.standardizer.x_mean.assign(14, 0.0);
    art.standardizer.x_std.assign(14, 1.0);
    art.standardizer.y_mean = {0, 0};
    art.standardizer.y_std = {1, 1};
    std::string id;
    {
        ModelRegistry reg(dir.path());
        CHECK(reg.active() == nullptr);
        id = reg.install(art);
    }
    ModelRegistry reg(dir.path());
    REQUIRE(reg.active() != nullptr);
    CHECK(reg.active_id() == id);
    CHECK(reg.active()->mlp == art.mlp);
    CHECK(reg.list().size() == 1);
}

TEST_CASE("drop folder ingestion") {
    World w;
    const auto drop = *w.platform.config().drop_folder;
    std::filesystem::create_directories(drop);
    auto put = [&](const std::string& name, const std::string& text) { std::ofstream(drop / name) << text; };
    const auto plate = fixtures::generate_plate_step(kFourHole);
    put("A7__v1.step", plate);
    put("badname.step", plate);
    put("A8__broken.stp", "ISO-10303-21;\nDATA;\n#1=FOO(;\n");
    put(".partial__x.step", "ignored");

    auto report = w.platform.poll_drop_folder();
    REQUIRE(report.entries.size() == 3);
    std::map<std::string, DropEntry> by_file;
    for (const auto& e : report.entries) by_file[e.file] = e;
    CHECK(by_file["A7__v1.step"].ok);
    CHECK_FALSE(by_file["badname.step"].ok);
    CHECK(by_file["badname.step"].error.find("__") != std::string::npos);
    CHECK_FALSE(by_file["A8__broken.stp"].ok);
    CHECK(std::filesystem::exists(drop / "processed" / "A7__v1.step"));
    CHECK(std::filesystem::exists(drop / "rejected" / "badname.step"));
    CHECK(std::filesystem::exists(drop / "rejected" / "badname.step.error.txt"));
    CHECK(std::filesystem::exists(drop / "rejected" / "A8__broken.stp.error.txt"));
    CHECK(std::filesystem::exists(drop / ".partial__x.step"));

    const auto a7 = w.platform.store().find_article("A7");
    REQUIRE(a7.has_value());
    CHECK(a7->name == "A7");
    CHECK_FALSE(w.platform.store().has_article("A8"));
    const auto view = w.platform.store().query_by_article("A7");
    REQUIRE(view.variants.size() == 1);
    CHECK(view.variants[0].label == "v1");
    CHECK(view.variants[0].uploaded_by == kDropUser);
    CHECK(view.variants[0].features.hole_count == 4);

    CHECK(w.platform.poll_drop_folder().entries.empty());
    put("A7__again.step", plate);
    report = w.platform.poll_drop_folder();
    REQUIRE(report.entries.size() == 1);
    CHECK(report.entries[0].ok);
    CHECK(w.platform.store().counts().variants == 1);
}

TEST_CASE("drop names") {
    CHECK(parse_drop_name("A7__v1.step").article_id == "A7");
    CHECK(parse_drop_name("A7__v1__x.STP").label == "v1__x");
    CHECK_THROWS_AS(parse_drop_name("A7.step"), std::invalid_argument);
    CHECK_THROWS_AS(parse_drop_name("A7__v1.txt"), std::invalid_argument);
    CHECK_THROWS_AS(parse_drop_name("__v1.step"), std::invalid_argument);
    CHECK_THROWS_AS(parse_drop_name("A7__.step"), std::invalid_argument);
}

TEST_CASE("config parsing") {
    const auto c = Config::from_json(json::parse(R"({"data_dir":"d","http_port":8000,"drop_folder":"in",
        "emission_factor_kg_per_kwh":0.3,"train":{"epochs":20,"seed":4}})"),
                                     "/base");
    CHECK(c.data_dir == "/base/d");
    CHECK(c.http_port == 8000);
    CHECK(*c.drop_folder == "/base/in");
    CHECK(c.train.epochs == 20);
    CHECK(c.telemetry_port == 7701);
    CHECK_THROWS(Config::from_json(json::parse(R"({"colour":"red"})")));
    CHECK_THROWS(Config::from_json(json::parse(R"({"train":{"validation_fraction":1.5}})")));
}

TEST_CASE("bootstrap happens once") {
    World w;
    CHECK_FALSE(w.platform.bootstrap_admin().has_value());
    const auto u = w.platform.authenticate("Bearer " + w.tokens.at("admin"));
    CHECK(u.role == store::Role::admin);
    CHECK_THROWS_AS(w.platform.authenticate(std::nullopt), ApiError);
    CHECK_THROWS_AS(w.platform.authenticate("Basic abc"), ApiError);
}
