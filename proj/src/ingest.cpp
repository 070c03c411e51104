#include "fablink/ingest.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <string_view>

#include "fablink/telemetry.hpp"

namespace fablink::ingest {

namespace {

constexpr std::size_t kKeptErrors = 20;

bool blank(std::string_view s) { return s.find_first_not_of(" \t\r") == std::string_view::npos; }

class Session {
public:
    Session(store::Store& store, std::string machine_id) : store_(store), machine_id_(std::move(machine_id)) {}

    void handle(const telemetry::WireMessage& m, std::size_t line_no, IngestSummary& sum) {
        if (m.type == telemetry::MessageType::hello) return reject(sum, line_no, "unexpected hello");
        if (m.machine_id != machine_id_) return reject(sum, line_no, "machine_id differs from hello");
        if (max_seen_ > m.seq && max_seen_ - m.seq > kStaleWindow) {
            return reject(sum, line_no, "stale seq " + std::to_string(m.seq));
        }
        const auto now = store::now_ms();
        store::AppendResult r;
        try {
            if (m.type == telemetry::MessageType::event) {
                store::MachineEvent e{m.machine_id, m.seq, m.ts_ms, *m.article_id,
                                      std::get<telemetry::EventPayload>(m.payload), now, true};
                r = store_.append(e);
            } else {
                store::MachineStatus s{m.machine_id, m.seq, m.ts_ms, *m.article_id,
                                       std::get<telemetry::StatusPayload>(m.payload), now, true};
                r = store_.append(s);
            }
        } catch (const store::ConflictError& e) {
            return reject(sum, line_no, e.what());
        }
        if (r.inserted) {
            ++sum.accepted;
        } else {
            ++sum.duplicates;
        }
        if (m.seq > max_seen_) max_seen_ = m.seq;
    }

    static void reject(IngestSummary& sum, std::size_t line_no, const std::string& why) {
        ++sum.rejected;
        if (sum.errors.size() < kKeptErrors) sum.errors.push_back("line " + std::to_string(line_no) + ": " + why);
    }

private:
    store::Store& store_;
    std::string machine_id_;
    std::uint64_t max_seen_ = 0;
};

telemetry::WireMessage expect_hello(const std::string& line, std::size_t line_no) {
    telemetry::WireMessage m;
    try {
        m = telemetry::decode_message(line);
    } catch (const telemetry::ProtocolError& e) {
        throw HandshakeError("line " + std::to_string(line_no) + ": expected hello: " + e.what());
    }
    if (m.type != telemetry::MessageType::hello) {
        throw HandshakeError("line " + std::to_string(line_no) + ": expected hello, got " +
                             std::string(telemetry::to_string(m.type)));
    }
    return m;
}

// `rehello` lets a hello line open a new session (recorded files).
IngestSummary run(LineReader& conn, store::Store& store, bool rehello) {
    IngestSummary sum;
    std::optional<Session> session;
    std::size_t line_no = 0;
    while (auto line = conn.next_line()) {
        ++line_no;
        if (blank(*line)) continue;
        if (!session) {
            session.emplace(store, expect_hello(*line, line_no).machine_id);
            continue;
        }
        if (line->size() > kMaxLineBytes) {
            Session::reject(sum, line_no, "line too long");
            continue;
        }
        telemetry::WireMessage m;
        try {
            m = telemetry::decode_message(*line);
        } catch (const telemetry::ProtocolError& e) {
            Session::reject(sum, line_no, e.what());
            continue;
        }
        if (rehello && m.type == telemetry::MessageType::hello) {
            session.emplace(store, m.machine_id);
            continue;
        }
        session->handle(m, line_no, sum);
    }
    if (!session) throw HandshakeError("stream ended before hello");
    return sum;
}

}  // namespace

IngestSummary& IngestSummary::operator+=(const IngestSummary& o) {
    accepted += o.accepted;
    duplicates += o.duplicates;
    rejected += o.rejected;
    for (const auto& e : o.errors) {
        if (errors.size() >= kKeptErrors) break;
        errors.push_back(e);
    }
    return *this;
}

std::optional<std::string> StreamLineReader::next_line() {
    std::string line;
    if (!std::getline(in_, line)) return std::nullopt;
    return line;
}

std::optional<std::string> FdLineReader::next_line() {
    for (;;) {
        if (auto nl = buf_.find('\n'); nl != std::string::npos) {
            std::string line = buf_.substr(0, nl);
            buf_.erase(0, nl + 1);
            return line;
        }
        if (eof_) {
            if (buf_.empty()) return std::nullopt;
            return std::exchange(buf_, {});
        }
        if (buf_.size() > kMaxLineBytes) {
            // Oversized line: hand it over so it gets rejected, keep framing.
            return std::exchange(buf_, {});
        }
        char chunk[8192];
        const auto n = ::recv(fd_, chunk, sizeof chunk, 0);
        if (n < 0 && errno == EINTR) continue;
        if (n < 0 && errno == ENOTSOCK) {
            const auto r = ::read(fd_, chunk, sizeof chunk);
            if (r <= 0) {
                eof_ = true;
            } else {
                buf_.append(chunk, static_cast<std::size_t>(r));
            }
            continue;
        }
        if (n <= 0) {
            eof_ = true;
            continue;
        }
        buf_.append(chunk, static_cast<std::size_t>(n));
    }
}

IngestSummary subscriber_ingest(LineReader& conn, store::Store& store) { return run(conn, store, false); }

IngestSummary ingest_replay(std::istream& in, store::Store& store) {
    StreamLineReader reader(in);
    return run(reader, store, true);
}

TelemetryListener::TelemetryListener(store::Store& store, std::string host, std::uint16_t port)
    : store_(store), host_(std::move(host)), port_(port) {}

TelemetryListener::~TelemetryListener() { stop(); }

void TelemetryListener::start() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port_);
    if (::inet_pton(AF_INET, host_.c_str(), &addr.sin_addr) != 1) {
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw std::runtime_error("invalid listen address '" + host_ + "'");
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 16) < 0) {
        const std::string why = std::strerror(errno);
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw std::runtime_error("telemetry listener on " + host_ + ":" + std::to_string(port_) + ": " + why);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
}

void TelemetryListener::stop() {
    if (!running_.exchange(false)) return;
    if (acceptor_.joinable()) acceptor_.join();
    ::close(listen_fd_);
    listen_fd_ = -1;
    std::vector<std::thread> workers;
    {
        std::lock_guard lock(mu_);
        for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
        workers.swap(workers_);
    }
    for (auto& t : workers) t.join();
}

IngestSummary TelemetryListener::totals() const {
    std::lock_guard lock(mu_);
    return totals_;
}

void TelemetryListener::accept_loop() {
    while (running_) {
        pollfd p{listen_fd_, POLLIN, 0};
        if (::poll(&p, 1, 100) <= 0) continue;
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) continue;
        std::lock_guard lock(mu_);
        open_fds_.push_back(fd);
        workers_.emplace_back([this, fd] { serve(fd); });
    }
}

void TelemetryListener::serve(int fd) {
    FdLineReader reader(fd);
    try {
        auto sum = subscriber_ingest(reader, store_);
        std::lock_guard lock(mu_);
        totals_ += sum;
    } catch (const HandshakeError& e) {
        ++handshake_failures_;
        const std::string msg = std::string("{\"error\":\"handshake\",\"message\":") + "\"" + "expected hello" + "\"}\n";
        ::send(fd, msg.data(), msg.size(), MSG_NOSIGNAL);
    } catch (const std::exception&) {
        // Store failure: drop the connection, the publisher may resend.
    }
    std::lock_guard lock(mu_);
    std::erase(open_fds_, fd);
    ::close(fd);
}

}  // namespace fablink::ingest
