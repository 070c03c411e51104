// Python extension: thin wrappers that exchange JSON text; fablink/__init__.py
// decodes it into dicts.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "fablink/cli.hpp"
#include "fablink/fixtures.hpp"
#include "fablink/ingest.hpp"
#include "fablink/platform.hpp"
#include "fablink/predictor.hpp"
#include "fablink/step.hpp"
#include "fablink/telemetry.hpp"

namespace py = pybind11;
using namespace fablink;
using nlohmann::json;

namespace {

platform::Config config_for(const std::string& data_dir) {
    platform::Config c;
    c.data_dir = data_dir;
    return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "fablink native core";

    auto base = py::register_exception<std::runtime_error>(m, "FablinkError");
    py::register_exception<step::StepError>(m, "StepError", base.ptr());
    py::register_exception<brep::GeometryError>(m, "GeometryError", base.ptr());
    py::register_exception<store::StoreError>(m, "StoreError", base.ptr());
    py::register_exception<platform::NoActiveModel>(m, "NoActiveModel", base.ptr());
    py::register_exception<telemetry::ProtocolError>(m, "ProtocolError", base.ptr());

    m.def("parse_step", [](const std::string& text) { return step::to_json(step::parse_step(text)).dump(); },
          py::arg("text"));

    m.def("extract_features", [](const std::string& text) { return brep::to_json(platform::featurize(text)).dump(); },
          py::arg("text"));

    m.def(
        "generate_plate",
        [](double length, double width, double thickness, const std::vector<std::tuple<double, double, double>>& holes) {
            fixtures::PlateSpec spec{length, width, thickness, {}};
            for (const auto& [cx, cy, d] : holes) spec.holes.push_back({cx, cy, d});
            return fixtures::generate_plate_step(spec);
        },
        py::arg("length"), py::arg("width"), py::arg("thickness"), py::arg("holes") = std::vector<std::tuple<double, double, double>>{});

    m.def(
        "nominal_outcome",
        [](const std::string& features_json) {
            const auto o = telemetry::nominal_outcome({}, brep::feature_vector_from_json(json::parse(features_json)));
            return json{{"production_time_s", o.production_time_s}, {"energy_wh", o.energy_wh}, {"wear_delta", o.wear_delta}}
                .dump();
        },
        py::arg("features_json"));

    m.def(
        "simulate_job",
        [](const std::string& article_id, const std::string& features_json, std::uint64_t t0_ms, double noise,
           std::uint64_t seed, const std::string& machine_id) {
            telemetry::MachineProfile p;
            p.machine_id = machine_id;
            p.noise_sigma = noise;
            p.rng_seed = seed;
            telemetry::MachineSimulator sim(p);
            std::string out = telemetry::encode_message(sim.hello(t0_ms));
            for (const auto& msg :
                 sim.simulate_job(article_id, brep::feature_vector_from_json(json::parse(features_json)), t0_ms)) {
                out += telemetry::encode_message(msg);
            }
            return out;
        },
        py::arg("article_id"), py::arg("features_json"), py::arg("t0_ms") = 0, py::arg("noise") = 0.02,
        py::arg("seed") = 0, py::arg("machine_id") = "m1");

    m.def(
        "integrate_power",
        [](const std::vector<std::pair<std::uint64_t, double>>& samples, std::uint64_t t0, std::uint64_t t1) {
            std::vector<store::PowerSample> s;
            for (const auto& [t, w] : samples) s.push_back({t, w});
            return store::integrate_power(s, t0, t1);
        },
        py::arg("samples"), py::arg("t0_ms"), py::arg("t1_ms"));

    m.def(
        "upload_variant",
        [](const std::string& data_dir, const std::string& article_id, const std::string& step_text,
           const std::string& label, bool create_article) {
            platform::Platform p(config_for(data_dir));
            if (create_article && !p.store().has_article(article_id)) {
                p.store().append(store::Article{article_id, article_id, "", store::now_ms()});
            }
            const auto r = p.upload_variant(article_id, step_text, "python", label);
            auto j = store::to_json(r.variant);
            j["created"] = r.created;
            return j.dump();
        },
        py::arg("data_dir"), py::arg("article_id"), py::arg("step_text"), py::arg("label") = "",
        py::arg("create_article") = true);

    m.def(
        "ingest_ndjson",
        [](const std::string& data_dir, const std::string& text) {
            store::Store st(data_dir);
            std::istringstream in(text);
            const auto s = ingest::ingest_replay(in, st);
            return json{{"accepted", s.accepted}, {"duplicates", s.duplicates}, {"rejected", s.rejected}, {"errors", s.errors}}
                .dump();
        },
        py::arg("data_dir"), py::arg("text"));

    m.def(
        "article_view",
        [](const std::string& data_dir, const std::string& article_id) {
            store::Store st(data_dir);
            return store::to_json(st.query_by_article(article_id)).dump();
        },
        py::arg("data_dir"), py::arg("article_id"));

    m.def(
        "train",
        [](const std::string& data_dir, std::size_t epochs, std::uint64_t seed) {
            platform::Platform p(config_for(data_dir));
            auto cfg = p.config().train;
            cfg.epochs = epochs;
            cfg.seed = seed;
            std::string id;
            {
                py::gil_scoped_release release;
                id = p.train_now(cfg);
            }
            for (const auto& info : p.models().list()) {
                if (info.model_id == id) return platform::to_json(info).dump();
            }
            return json{{"model_id", id}}.dump();
        },
        py::arg("data_dir"), py::arg("epochs") = 500, py::arg("seed") = 0);

    m.def(
        "predict",
        [](const std::string& data_dir, const std::string& step_text, std::optional<double> co2_factor) {
            platform::Platform p(config_for(data_dir));
            return platform::to_json(p.predict_step(step_text, co2_factor)).dump();
        },
        py::arg("data_dir"), py::arg("step_text"), py::arg("co2_factor") = py::none());

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = cli::run(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"));
}
