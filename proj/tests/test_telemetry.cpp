#include <sstream>

#include "doctest.h"
#include "fablink/fixtures.hpp"
#include "fablink/ingest.hpp"
#include "fablink/telemetry.hpp"
#include "temp_dir.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

using namespace fablink;
using namespace fablink::telemetry;
using ingest::IngestSummary;
using testing::TempDir;

namespace {

brep::FeatureVector edge_length_only(double length, double holes = 0) {
    brep::FeatureVector f;
    f.total_edge_length = length;
    f.hole_count = holes;
    return f;
}

WireMessage random_message(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> kind(0, 2);
    std::uniform_int_distribution<std::uint64_t> big(1, std::uint64_t{1} << 53);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::string machine = "m" + std::to_string(rng() % 100);
    switch (kind(rng)) {
        case 0: return WireMessage::hello(machine, big(rng));
        case 1: {
            EventPayload p{static_cast<EventType>(rng() % 4), std::nullopt, std::nullopt};
            if (rng() % 2) p.code = "C" + std::to_string(rng() % 1000);
            if (rng() % 2) p.message = "line \"quoted\"\n\ttab \xc3\xa9";
            return WireMessage::event(machine, big(rng), big(rng), "A-" + std::to_string(rng() % 1000), p);
        }
        default: {
            StatusPayload p{unit(rng) * 5000.0, unit(rng), rng() % 2 ? MachineState::idle : MachineState::processing};
            return WireMessage::status(machine, big(rng), big(rng), "art_" + std::to_string(rng() % 1000), p);
        }
    }
}

std::string event_line(const std::string& machine, std::uint64_t seq, std::uint64_t ts = 1000) {
    return encode_message(WireMessage::event(machine, seq, ts, "A1", {EventType::error, std::nullopt, std::nullopt}));
}

IngestSummary ingest_text(const std::string& text, store::Store& s) {
    std::istringstream in(text);
    ingest::StreamLineReader reader(in);
    return ingest::subscriber_ingest(reader, s);
}

store::Article article(const std::string& id) { return {id, "part " + id, "S235", 1}; }

}  // namespace

TEST_CASE("encode hello is byte exact") {
    CHECK(encode_message(WireMessage::hello("m1", 0)) ==
          "{\"v\":1,\"type\":\"hello\",\"machine_id\":\"m1\",\"seq\":0,\"ts_ms\":0}\n");
}

TEST_CASE("encode status keeps the decimal point on whole watts") {
    const auto line = encode_message(WireMessage::status("m1", 1, 5, "A1", {1000.0, 0.25, MachineState::processing}));
    CHECK(line.find("\"power_w\":1000.0") != std::string::npos);
    CHECK(line.find("\"type\":\"status\"") != std::string::npos);
    CHECK(line.back() == '\n');
    CHECK(line.find('\n') == line.size() - 1);
}

TEST_CASE("decode inverts encode for random messages") {
    std::mt19937_64 rng(7);
    for (int i = 0; i < 1000; ++i) {
        const auto m = random_message(rng);
        const auto line = encode_message(m);
        REQUIRE(line.find('\n') == line.size() - 1);
        CHECK(decode_message(line) == m);
    }
}

TEST_CASE("decode rejects protocol violations") {
    auto reason = [](const std::string& line) -> std::string {
        try {
            decode_message(line);
        } catch (const ProtocolError& e) {
            return e.what();
        }
        return "";
    };
    CHECK(reason(R"({"v":2,"type":"hello","machine_id":"m1","seq":0,"ts_ms":0})") == "unsupported version");
    const std::string status_head = R"({"v":1,"type":"status","machine_id":"m1","seq":3,"ts_ms":9,"article_id":"A1",)";
    CHECK_FALSE(reason(status_head + R"("payload":{"power_w":10.0,"tool_wear":1.5,"state":"idle"}})").empty());
    CHECK_FALSE(reason(status_head + R"("payload":{"power_w":-1.0,"tool_wear":0.5,"state":"idle"}})").empty());
    CHECK_FALSE(reason(status_head + R"("payload":{"power_w":1.0,"tool_wear":0.5,"state":"busy"}})").empty());
    CHECK_FALSE(reason(status_head + R"("payload":{"power_w":1.0,"tool_wear":0.5}})").empty());
    CHECK_FALSE(reason(status_head + R"("payload":{"power_w":1.0,"tool_wear":0.5,"state":"idle","x":1}})").empty());
    CHECK_FALSE(reason(R"({"v":1,"type":"hello","machine_id":"m1","seq":0,"ts_ms":0,"extra":true})").empty());
    CHECK_FALSE(reason(R"({"v":1,"type":"hello","machine_id":"m1","seq":0})").empty());
    CHECK_FALSE(reason(R"({"v":1,"type":"hello","machine_id":"m1","seq":4,"ts_ms":0})").empty());
    CHECK_FALSE(reason(R"({"v":1,"type":"ping","machine_id":"m1","seq":1,"ts_ms":0})").empty());
    CHECK_FALSE(reason(R"({"v":1,"type":"event","machine_id":"m1","seq":1,"ts_ms":0,"article_id":"bad id",)"
                       R"("payload":{"event_type":"error"}})")
                    .empty());
    CHECK_FALSE(reason(R"({"v":1,"type":"event","machine_id":"m1","seq":-1,"ts_ms":0,"article_id":"A",)"
                       R"("payload":{"event_type":"error"}})")
                    .empty());
    CHECK_FALSE(reason("{not json").empty());
    CHECK_FALSE(reason("[1,2]").empty());
}

TEST_CASE("nominal outcome worked values") {
    const MachineProfile p;
    auto o = nominal_outcome(p, edge_length_only(500));
    CHECK(o.production_time_s == doctest::Approx(40.0).epsilon(1e-12));
    CHECK(o.energy_wh == doctest::Approx((800.0 * 40 + 3200.0 * 10) / 3600.0).epsilon(1e-12));
    CHECK(o.wear_delta == doctest::Approx(0.005).epsilon(1e-12));

    o = nominal_outcome(p, edge_length_only(0));
    CHECK(o.production_time_s == 30.0);
    CHECK(o.energy_wh == doctest::Approx(20.0 / 3.0).epsilon(1e-12));
    CHECK(o.wear_delta == 0.0);

    const fixtures::PlateSpec plate{100, 100, 2, {{25, 25, 10}, {75, 25, 10}, {25, 75, 10}, {75, 75, 10}}};
    const auto f = brep::extract_features(brep::build_brep(step::parse_step(fixtures::generate_plate_step(plate))));
    o = nominal_outcome(p, f);
    CHECK(o.production_time_s == doctest::Approx(57.19).epsilon(5e-4));
    CHECK(o.energy_wh == doctest::Approx(36.9).epsilon(2e-3));
}

TEST_CASE("profile validation") {
    MachineProfile p;
    p.noise_sigma = 0.6;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = {};
    p.idle_power_w = -1;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = {};
    p.status_interval_ms = 0;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("simulator output is ordered, framed and deterministic") {
    MachineProfile p;
    p.rng_seed = 99;
    p.error_probability = 0.3;
    MachineSimulator a(p), b(p);
    for (int job = 0; job < 20; ++job) {
        const auto f = edge_length_only(200.0 + 37.0 * job, job % 4);
        const auto sa = a.simulate_job("A1", f, 1'000'000 + job * 200'000);
        const auto sb = b.simulate_job("A1", f, 1'000'000 + job * 200'000);
        REQUIRE(sa == sb);
        std::string bytes_a, bytes_b;
        for (const auto& m : sa) bytes_a += encode_message(m);
        for (const auto& m : sb) bytes_b += encode_message(m);
        CHECK(bytes_a == bytes_b);
        for (std::size_t i = 1; i < sa.size(); ++i) {
            CHECK(sa[i].seq > sa[i - 1].seq);
            CHECK(sa[i].ts_ms >= sa[i - 1].ts_ms);
        }
        CHECK(std::get<EventPayload>(sa.front().payload).event_type != EventType::job_end);
        CHECK(std::get<EventPayload>(sa.back().payload).event_type == EventType::job_end);
    }
}

TEST_CASE("error probability one always yields an error event") {
    MachineProfile p;
    p.error_probability = 1.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        p.rng_seed = seed;
        const auto msgs = simulate_job(p, "A1", edge_length_only(500), 0);
        const auto errors = std::count_if(msgs.begin(), msgs.end(), [](const WireMessage& m) {
            const auto* e = std::get_if<EventPayload>(&m.payload);
            return e && e->event_type == EventType::error;
        });
        CHECK(errors >= 1);
    }
}

TEST_CASE("simulator closes against the aggregation pipeline at zero noise") {
    TempDir dir("sim");
    store::Store s(dir.path());
    s.append(article("A1"));
    MachineProfile p;
    p.noise_sigma = 0.0;
    MachineSimulator machine(p);
    const std::vector<brep::FeatureVector> jobs = {edge_length_only(500), edge_length_only(0),
                                                   edge_length_only(1059.327, 4), edge_length_only(2345.6, 7)};
    std::string stream = encode_message(machine.hello(0));
    std::uint64_t t0 = 10'000;
    for (const auto& f : jobs) {
        for (const auto& m : machine.simulate_job("A1", f, t0)) stream += encode_message(m);
        t0 += 1'000'000;
    }
    const auto sum = ingest_text(stream, s);
    CHECK(sum.rejected == 0);
    CHECK(sum.duplicates == 0);
    const auto outcomes = s.assemble_outcomes("A1");
    REQUIRE(outcomes.size() == jobs.size());
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        const auto nominal = nominal_outcome(p, jobs[i]);
        CHECK(outcomes[i].complete);
        CHECK(std::abs(outcomes[i].production_time_s - nominal.production_time_s) <= 0.1);
        CHECK(std::abs(outcomes[i].energy_wh - nominal.energy_wh) / nominal.energy_wh <= 0.01);
        CHECK(outcomes[i].tool_wear_delta == doctest::Approx(nominal.wear_delta).epsilon(1e-9));
    }
    CHECK(outcomes[0].production_time_s == doctest::Approx(40.0).epsilon(0.01));
    CHECK(outcomes[0].energy_wh == doctest::Approx(17.78).epsilon(0.01));
}

TEST_CASE("tool change resets wear when the tool would exceed its life") {
    MachineProfile p;
    p.noise_sigma = 0;
    p.wear_per_mm = 1e-3;
    MachineSimulator machine(p);
    machine.simulate_job("A1", edge_length_only(600), 0);
    CHECK(machine.tool_wear() == doctest::Approx(0.6));
    const auto msgs = machine.simulate_job("A1", edge_length_only(600), 1'000'000);
    CHECK(std::get<EventPayload>(msgs.front().payload).event_type == EventType::tool_change);
    CHECK(machine.tool_wear() == doctest::Approx(0.6));
}

TEST_CASE("ingest counts accepted, duplicates, reorders and stale lines") {
    TempDir dir("ing");
    store::Store s(dir.path());
    s.append(article("A1"));
    const std::string hello = encode_message(WireMessage::hello("m1", 0));

    std::string ten = hello;
    for (int i = 1; i <= 10; ++i) ten += event_line("m1", i);
    CHECK(ingest_text(ten, s) == IngestSummary{10, 0, 0, {}});

    TempDir dir2("ing2");
    store::Store s2(dir2.path());
    std::string dup = hello;
    for (int i = 1; i <= 10; ++i) {
        dup += event_line("m1", i);
        if (i == 5) dup += event_line("m1", 5);
    }
    CHECK(ingest_text(dup, s2) == IngestSummary{10, 1, 0, {}});

    TempDir dir3("ing3");
    store::Store s3(dir3.path());
    CHECK(ingest_text(hello + event_line("m1", 1) + event_line("m1", 3) + event_line("m1", 2), s3) ==
          IngestSummary{3, 0, 0, {}});

    TempDir dir4("ing4");
    store::Store s4(dir4.path());
    const auto stale = ingest_text(hello + event_line("m1", 2000) + event_line("m1", 1000) + event_line("m1", 999) +
                                       "not json\n\n" + event_line("m2", 7) + event_line("m1", 2001),
                                   s4);
    CHECK(stale == IngestSummary{3, 0, 3, {}});
    CHECK(stale.errors.size() == 3);
}

TEST_CASE("handshake is required") {
    TempDir dir("hs");
    store::Store s(dir.path());
    CHECK_THROWS_AS(ingest_text(event_line("m1", 1), s), ingest::HandshakeError);
    CHECK_THROWS_AS(ingest_text("garbage\n" + encode_message(WireMessage::hello("m1", 0)), s), ingest::HandshakeError);
    CHECK_THROWS_AS(ingest_text("", s), ingest::HandshakeError);
    CHECK(s.counts().events == 0);
}

TEST_CASE("conflicting content under an existing key is rejected") {
    TempDir dir("cf");
    store::Store s(dir.path());
    const std::string hello = encode_message(WireMessage::hello("m1", 0));
    CHECK(ingest_text(hello + event_line("m1", 1, 10), s) == IngestSummary{1, 0, 0, {}});
    CHECK(ingest_text(hello + event_line("m1", 1, 11), s) == IngestSummary{0, 0, 1, {}});
}

TEST_CASE("replaying a recording twice changes nothing") {
    TempDir dir("rp");
    store::Store s(dir.path());
    s.append(article("A1"));
    s.append(article("A2"));
    MachineProfile p1, p2;
    p1.machine_id = "m1";
    p2.machine_id = "m2";
    p2.rng_seed = 5;
    MachineSimulator a(p1), b(p2);
    std::string rec = encode_message(a.hello(0));
    for (const auto& m : a.simulate_job("A1", edge_length_only(300), 0)) rec += encode_message(m);
    rec += encode_message(b.hello(0));
    for (const auto& m : b.simulate_job("A2", edge_length_only(700, 2), 0)) rec += encode_message(m);

    std::istringstream first(rec);
    const auto s1 = ingest::ingest_replay(first, s);
    const auto counts = s.counts();
    const auto view = s.query_by_article("A2");
    std::istringstream second(rec);
    const auto s2 = ingest::ingest_replay(second, s);
    CHECK(s1.rejected == 0);
    CHECK(s1.duplicates == 0);
    CHECK(s2 == IngestSummary{0, s1.accepted, 0, {}});
    CHECK(s.counts() == counts);
    CHECK(s.query_by_article("A2") == view);
}

TEST_CASE("records for unknown articles are kept and flagged") {
    TempDir dir("uk");
    store::Store s(dir.path());
    ingest_text(encode_message(WireMessage::hello("m1", 0)) + event_line("m1", 1), s);
    s.append(article("A1"));
    const auto view = s.query_by_article("A1");
    REQUIRE(view.events.size() == 1);
    CHECK_FALSE(view.events[0].article_known);
}

TEST_CASE("tcp listener ingests a connection") {
    TempDir dir("tcp");
    store::Store s(dir.path());
    ingest::TelemetryListener listener(s, "127.0.0.1", 0);
    listener.start();
    REQUIRE(listener.port() != 0);

    auto send_all = [&](const std::string& text) {
        const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(listener.port());
        ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
        REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
        ::send(fd, text.data(), text.size(), 0);
        ::shutdown(fd, SHUT_WR);
        char buf[256];
        while (::recv(fd, buf, sizeof buf, 0) > 0) {
        }
        ::close(fd);
    };
    std::string text = encode_message(WireMessage::hello("m9", 0));
    for (int i = 1; i <= 5; ++i) text += event_line("m9", i);
    send_all(text);
    send_all(event_line("m9", 6));
    listener.stop();
    CHECK(listener.totals() == IngestSummary{5, 0, 0, {}});
    CHECK(listener.handshake_failures() == 1);
    CHECK(s.counts().events == 5);
}
