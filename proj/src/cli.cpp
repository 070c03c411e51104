#include "fablink/cli.hpp"

#include <netdb.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "fablink/fixtures.hpp"
#include "fablink/http_api.hpp"
#include "fablink/ingest.hpp"
#include "fablink/platform.hpp"
#include "fablink/step.hpp"
#include "fablink/telemetry.hpp"

namespace fablink::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string() + ": " + std::strerror(errno));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << bytes)) throw std::runtime_error("cannot write " + path.string());
}

// "cx,cy,d"
fixtures::HoleSpec parse_hole(const std::string& s) {
    std::vector<double> v;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            std::size_t used = 0;
            v.push_back(std::stod(part, &used));
            if (used != part.size()) throw std::invalid_argument(part);
        } catch (const std::exception&) {
            throw UsageError("--hole expects cx,cy,d; got '" + s + "'");
        }
    }
    if (v.size() != 3) throw UsageError("--hole expects cx,cy,d; got '" + s + "'");
    return {v[0], v[1], v[2]};
}

std::pair<std::string, std::uint16_t> parse_host_port(const std::string& s) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos || colon == 0) throw UsageError("expected host:port, got '" + s + "'");
    int port = 0;
    try {
        port = std::stoi(s.substr(colon + 1));
    } catch (const std::exception&) {
        port = -1;
    }
    if (port <= 0 || port > 65535) throw UsageError("bad port in '" + s + "'");
    return {s.substr(0, colon), static_cast<std::uint16_t>(port)};
}

// Sends one connection worth of lines, then waits for the peer to close so
// the listener has finished with it. Returns whatever the peer wrote back.
std::string send_lines(const std::string& host, std::uint16_t port, const std::string& payload) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const auto service = std::to_string(port);
    if (int rc = getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0) {
        throw std::runtime_error("cannot resolve " + host + ": " + gai_strerror(rc));
    }
    int fd = -1;
    for (auto* ai = res; ai; ai = ai->ai_next) {
        fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
        ::close(fd);
        fd = -1;
    }
    freeaddrinfo(res);
    if (fd < 0) throw std::runtime_error("cannot connect to " + host + ":" + service);

    std::size_t off = 0;
    while (off < payload.size()) {
        const auto n = ::send(fd, payload.data() + off, payload.size() - off, MSG_NOSIGNAL);
        if (n <= 0) {
            ::close(fd);
            throw std::runtime_error("connection to " + host + ":" + service + " lost");
        }
        off += static_cast<std::size_t>(n);
    }
    ::shutdown(fd, SHUT_WR);
    std::string reply;
    char buf[4096];
    for (;;) {
        const auto n = ::recv(fd, buf, sizeof buf, 0);
        if (n <= 0) break;
        reply.append(buf, static_cast<std::size_t>(n));
    }
    ::close(fd);
    return reply;
}

json summary_json(const ingest::IngestSummary& s) {
    return {{"accepted", s.accepted}, {"duplicates", s.duplicates}, {"rejected", s.rejected}, {"errors", s.errors}};
}

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

struct Globals {
    std::string config_path;
    std::string data_dir;
    bool json = false;

    platform::Config config() const {
        auto c = config_path.empty() ? platform::Config::from_env() : platform::Config::load_file(config_path);
        if (!data_dir.empty()) c.data_dir = data_dir;
        return c;
    }
};

void print_kv(std::ostream& out, const json& j) {
    for (const auto& [k, v] : j.items()) out << k << ": " << (v.is_string() ? v.get<std::string>() : v.dump()) << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"fablink: CAD features, machine telemetry and outcome prediction", "fablink"};
    app.require_subcommand(1);
    app.fallthrough();
    app.failure_message(CLI::FailureMessage::help);
    Globals g;
    app.add_option("--config", g.config_path, "JSON config (default: $FABLINK_CONFIG)");
    app.add_option("--data-dir", g.data_dir, "Override the config's data_dir");
    app.add_flag("--json", g.json, "Machine-readable output");

    std::function<void()> action;

    // serve
    auto* serve = app.add_subcommand("serve", "HTTP API, telemetry listener and drop-folder poller");
    serve->callback([&] {
        action = [&] {
            platform::Platform p(g.config());
            const auto& c = p.config();
            if (auto token = p.bootstrap_admin()) {
                out << (g.json ? json{{"bootstrap_admin_token", *token}}.dump() : "admin token: " + *token) << "\n";
                out.flush();
            }
            ingest::TelemetryListener listener(p.store(), c.telemetry_host, c.telemetry_port);
            listener.start();
            platform::ApiServer api(p);
            const auto port = api.bind(c.http_host, c.http_port);
            api.start();
            err << "http on " << c.http_host << ":" << port << ", telemetry on " << c.telemetry_host << ":"
                << listener.port() << "\n";

            g_stop = false;
            auto old_int = std::signal(SIGINT, on_signal);
            auto old_term = std::signal(SIGTERM, on_signal);
            auto next_poll = std::chrono::steady_clock::now();
            while (!g_stop) {
                if (c.drop_folder && std::chrono::steady_clock::now() >= next_poll) {
                    try {
                        const auto report = p.poll_drop_folder();
                        for (const auto& e : report.entries) {
                            err << "drop " << e.file << ": " << (e.ok ? "ok " + e.variant_id : e.error) << "\n";
                        }
                    } catch (const std::exception& e) {
                        err << "drop folder: " << e.what() << "\n";
                    }
                    next_poll += std::chrono::milliseconds(static_cast<long>(c.poll_interval_s * 1000));
                }
                std::this_thread::sleep_for(std::chrono::milliseconds(100));
            }
            std::signal(SIGINT, old_int);
            std::signal(SIGTERM, old_term);
            api.stop();
            listener.stop();
        };
    });

    // parse
    std::string parse_file;
    bool dump_json = false;
    auto* parse = app.add_subcommand("parse", "Parse a STEP file");
    parse->add_option("file", parse_file)->required();
    parse->add_flag("--dump-json", dump_json, "Print every instance as tagged JSON");
    parse->callback([&] {
        action = [&] {
            const auto file = step::parse_step(read_file(parse_file));
            if (dump_json) {
                out << step::to_json(file).dump() << "\n";
                return;
            }
            json j = {{"file", parse_file}, {"instances", file.instances.size()}, {"source_hash", file.source_hash}};
            g.json ? void(out << j.dump() << "\n") : print_kv(out, j);
        };
    });

    // extract
    std::string extract_file;
    auto* extract = app.add_subcommand("extract", "Print the feature vector of a STEP file");
    extract->add_option("file", extract_file)->required();
    extract->callback([&] {
        action = [&] {
            const auto j = brep::to_json(platform::featurize(read_file(extract_file)));
            g.json ? void(out << j.dump() << "\n") : print_kv(out, j);
        };
    });

    // genplate
    fixtures::PlateSpec plate;
    std::vector<std::string> holes;
    std::string plate_out;
    auto* genplate = app.add_subcommand("genplate", "Write a rectangular plate with through holes as STEP");
    genplate->add_option("--length", plate.length)->required();
    genplate->add_option("--width", plate.width)->required();
    genplate->add_option("--thickness", plate.thickness)->required();
    genplate->add_option("--hole", holes, "cx,cy,d (repeatable)");
    genplate->add_option("-o,--out", plate_out, "Output file (default: stdout)");
    genplate->callback([&] {
        action = [&] {
            for (const auto& h : holes) plate.holes.push_back(parse_hole(h));
            const auto bytes = fixtures::generate_plate_step(plate);
            if (plate_out.empty()) {
                out << bytes;
                return;
            }
            write_file(plate_out, bytes);
            if (g.json) out << json{{"file", plate_out}, {"bytes", bytes.size()}}.dump() << "\n";
        };
    });

    // simulate
    int machines = 1;
    std::string articles_arg = "all";
    double noise = 0.02;
    std::uint64_t sim_seed = 0;
    int jobs_per_article = 1;
    double error_prob = 0.0;
    std::string connect, sim_out;
    auto* simulate = app.add_subcommand("simulate", "Run simulated machines over stored articles");
    simulate->add_option("--machines", machines)->check(CLI::Range(1, 1000));
    simulate->add_option("--articles", articles_arg, "Comma list of article ids, or 'all'");
    simulate->add_option("--noise", noise)->check(CLI::Range(0.0, 1.0));
    simulate->add_option("--seed", sim_seed);
    simulate->add_option("--jobs", jobs_per_article, "Jobs per article")->check(CLI::Range(1, 1000));
    simulate->add_option("--error-prob", error_prob)->check(CLI::Range(0.0, 1.0));
    auto* connect_opt = simulate->add_option("--connect", connect, "host:port of a telemetry listener");
    auto* out_opt = simulate->add_option("--out", sim_out, "NDJSON file");
    connect_opt->excludes(out_opt);
    simulate->callback([&] {
        action = [&] {
            if (connect.empty() && sim_out.empty()) throw UsageError("simulate needs --connect or --out");
            const auto cfg = g.config();
            store::Store st(cfg.data_dir);
            std::vector<std::string> ids;
            if (articles_arg == "all") {
                for (const auto& a : st.articles()) ids.push_back(a.article_id);
            } else {
                std::stringstream ss(articles_arg);
                for (std::string id; std::getline(ss, id, ',');) {
                    if (!id.empty()) ids.push_back(id);
                }
            }
            // Latest variant per article; articles without one are skipped.
            std::vector<std::pair<std::string, brep::FeatureVector>> parts;
            for (const auto& id : ids) {
                const auto view = st.query_by_article(id);
                if (view.variants.empty()) {
                    if (articles_arg != "all") throw store::NotFound("article " + id + " has no design variant");
                    continue;
                }
                const auto* latest = &view.variants.front();
                for (const auto& v : view.variants) {
                    if (v.created_ts_ms >= latest->created_ts_ms) latest = &v;
                }
                parts.emplace_back(id, latest->effective_features());
            }
            if (parts.empty()) throw store::EmptyDataset("no articles with design variants to simulate");

            const auto t0 = static_cast<std::uint64_t>(st.latest_variant_ts()) + 60'000;
            std::vector<telemetry::MachineSimulator> sims;
            std::vector<std::string> streams(machines);
            std::vector<std::uint64_t> clock(machines, t0);
            for (int m = 0; m < machines; ++m) {
                telemetry::MachineProfile prof;
                prof.machine_id = "m" + std::to_string(m + 1);
                prof.noise_sigma = noise;
                prof.error_probability = error_prob;
                prof.rng_seed = sim_seed + static_cast<std::uint64_t>(m);
                sims.emplace_back(prof);
                streams[m] = telemetry::encode_message(sims.back().hello(t0));
            }
            std::size_t jobs = 0, messages = 0;
            for (int rep = 0; rep < jobs_per_article; ++rep) {
                for (std::size_t i = 0; i < parts.size(); ++i) {
                    const auto m = jobs % static_cast<std::size_t>(machines);
                    const auto msgs = sims[m].simulate_job(parts[i].first, parts[i].second, clock[m]);
                    for (const auto& msg : msgs) streams[m] += telemetry::encode_message(msg);
                    clock[m] = msgs.back().ts_ms + 60'000;
                    messages += msgs.size();
                    ++jobs;
                }
            }
            json j = {{"machines", machines}, {"articles", parts.size()}, {"jobs", jobs}, {"messages", messages}};
            if (!sim_out.empty()) {
                std::string all;
                for (const auto& s : streams) all += s;
                write_file(sim_out, all);
                j["out"] = sim_out;
            } else {
                const auto [host, port] = parse_host_port(connect);
                for (const auto& s : streams) {
                    const auto reply = send_lines(host, port, s);
                    if (!reply.empty()) throw std::runtime_error("listener refused stream: " + reply);
                }
                j["connect"] = connect;
            }
            g.json ? void(out << j.dump() << "\n") : print_kv(out, j);
        };
    });

    // ingest-ndjson
    std::string ndjson_file;
    auto* ingest_cmd = app.add_subcommand("ingest-ndjson", "Replay recorded telemetry into the store");
    ingest_cmd->add_option("file", ndjson_file)->required();
    ingest_cmd->callback([&] {
        action = [&] {
            std::ifstream in(ndjson_file, std::ios::binary);
            if (!in) throw std::runtime_error("cannot read " + ndjson_file + ": " + std::strerror(errno));
            store::Store st(g.config().data_dir);
            const auto summary = ingest::ingest_replay(in, st);
            const auto j = summary_json(summary);
            if (g.json) {
                out << j.dump() << "\n";
            } else {
                out << "accepted: " << summary.accepted << "\nduplicates: " << summary.duplicates
                    << "\nrejected: " << summary.rejected << "\n";
                for (const auto& e : summary.errors) err << e << "\n";
            }
        };
    });

    // train
    std::optional<std::size_t> epochs;
    std::optional<std::uint64_t> train_seed;
    auto* train = app.add_subcommand("train", "Train on the stored dataset and activate the model");
    train->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
    train->add_option("--seed", train_seed);
    train->callback([&] {
        action = [&] {
            platform::Platform p(g.config());
            auto cfg = p.config().train;
            if (epochs) cfg.epochs = *epochs;
            if (train_seed) cfg.seed = *train_seed;
            const auto id = p.train_now(cfg);
            platform::ModelInfo info;
            for (const auto& m : p.models().list()) {
                if (m.model_id == id) info = m;
            }
            const auto j = platform::to_json(info);
            g.json ? void(out << j.dump() << "\n") : print_kv(out, j);
        };
    });

    // predict
    std::string predict_file;
    std::optional<double> co2_factor;
    auto* predict = app.add_subcommand("predict", "Predict energy, time and CO2 for a STEP file");
    predict->add_option("file", predict_file)->required();
    predict->add_option("--co2-factor", co2_factor, "kg CO2 per kWh (default from config)");
    predict->callback([&] {
        action = [&] {
            const auto bytes = read_file(predict_file);
            platform::Platform p(g.config());
            const auto r = p.predict_step(bytes, co2_factor);
            if (g.json) {
                out << platform::to_json(r).dump() << "\n";
                return;
            }
            out << "energy_wh: " << r.prediction.energy_wh << "\nproduction_time_s: " << r.prediction.production_time_s
                << "\n";
            if (r.prediction.co2_kg) out << "co2_kg: " << *r.prediction.co2_kg << "\n";
            out << "model_id: " << r.model_id << "\n";
        };
    });

    // users
    std::string user_id, role_name;
    auto* users = app.add_subcommand("users", "User management");
    users->require_subcommand(1);
    users->fallthrough();
    auto* users_add = users->add_subcommand("add", "Create a user and print its token");
    users_add->add_option("id", user_id)->required();
    users_add->add_option("--role", role_name)->required()->check(CLI::IsMember({"designer", "manufacturer", "admin"}));
    users_add->callback([&] {
        action = [&] {
            platform::Platform p(g.config());
            const auto role = *store::parse_role(role_name);
            const auto token = p.add_user(user_id, role);
            if (g.json) {
                out << json{{"user_id", user_id}, {"role", role_name}, {"token", token}}.dump() << "\n";
            } else {
                out << token << "\n";
            }
        };
    });
    auto* users_list = users->add_subcommand("list", "List users");
    users_list->callback([&] {
        action = [&] {
            store::Store st(g.config().data_dir);
            json a = json::array();
            for (const auto& u : st.users()) a.push_back({{"user_id", u.user_id}, {"role", std::string(store::to_string(u.role))}});
            if (g.json) {
                out << a.dump() << "\n";
            } else {
                for (const auto& u : a) out << u["user_id"].get<std::string>() << " " << u["role"].get<std::string>() << "\n";
            }
        };
    });

    // poll-drop
    auto* poll = app.add_subcommand("poll-drop", "Process the drop folder once");
    poll->callback([&] {
        action = [&] {
            const auto cfg = g.config();
            if (!cfg.drop_folder) throw UsageError("no drop_folder configured");
            platform::Platform p(cfg);
            const auto report = p.poll_drop_folder();
            if (g.json) {
                out << platform::to_json(report).dump() << "\n";
                return;
            }
            for (const auto& e : report.entries) out << e.file << ": " << (e.ok ? "ok " + e.variant_id : e.error) << "\n";
        };
    });

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kOk : kUsage;
    }

    try {
        action();
        return kOk;
    } catch (const UsageError& e) {
        err << "fablink: " << e.what() << "\n";
        return kUsage;
    } catch (const store::EmptyDataset& e) {
        err << "fablink: " << e.what() << "\n";
        return kRuntime;
    } catch (const store::InsufficientData& e) {
        err << "fablink: " << e.what() << "\n";
        return kRuntime;
    } catch (const step::StepError& e) {
        err << "fablink: invalid STEP: " << e.what() << "\n";
        return kValidation;
    } catch (const brep::GeometryError& e) {
        err << "fablink: geometry: " << e.what() << "\n";
        return kValidation;
    } catch (const store::StoreError& e) {
        err << "fablink: " << e.what() << "\n";
        return kValidation;
    } catch (const telemetry::ProtocolError& e) {
        err << "fablink: " << e.what() << "\n";
        return kValidation;
    } catch (const ingest::HandshakeError& e) {
        err << "fablink: " << e.what() << "\n";
        return kValidation;
    } catch (const predictor::SchemaMismatch& e) {
        err << "fablink: " << e.what() << "\n";
        return kValidation;
    } catch (const predictor::FormatError& e) {
        err << "fablink: " << e.what() << "\n";
        return kValidation;
    } catch (const nlohmann::json::exception& e) {
        err << "fablink: " << e.what() << "\n";
        return kValidation;
    } catch (const std::invalid_argument& e) {
        err << "fablink: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        err << "fablink: " << e.what() << "\n";
        return kRuntime;
    }
}

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace fablink::cli
