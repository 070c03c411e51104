// Subscriber side of the machine-data protocol: reads lines from a
// connection (or a recorded file) and persists them into the store.

#pragma once

#include <atomic>
#include <cstdint>
#include <istream>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fablink/store.hpp"

namespace fablink::ingest {

class HandshakeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct IngestSummary {
    std::size_t accepted = 0;
    std::size_t duplicates = 0;
    std::size_t rejected = 0;
    /// First few rejection reasons, "line N: reason".
    std::vector<std::string> errors;

    IngestSummary& operator+=(const IngestSummary& o);
    bool operator==(const IngestSummary& o) const {
        return accepted == o.accepted && duplicates == o.duplicates && rejected == o.rejected;
    }
};

inline constexpr std::uint64_t kStaleWindow = 1000;
inline constexpr std::size_t kMaxLineBytes = 1 << 20;

class LineReader {
public:
    virtual ~LineReader() = default;
    /// Next line without its terminator; nullopt at end of stream.
    virtual std::optional<std::string> next_line() = 0;
};

class StreamLineReader : public LineReader {
public:
    explicit StreamLineReader(std::istream& in) : in_(in) {}
    std::optional<std::string> next_line() override;

private:
    std::istream& in_;
};

/// Reads from a socket / pipe descriptor. Does not own it.
class FdLineReader : public LineReader {
public:
    explicit FdLineReader(int fd) : fd_(fd) {}
    std::optional<std::string> next_line() override;

private:
    int fd_;
    std::string buf_;
    bool eof_ = false;
};

/// One connection. Blank lines are ignored. Throws HandshakeError when the
/// first line is not a valid hello; nothing is stored in that case.
IngestSummary subscriber_ingest(LineReader& conn, store::Store& store);

/// A recorded file: a concatenation of connections, each starting with its
/// own hello line.
IngestSummary ingest_replay(std::istream& in, store::Store& store);

/// TCP listener, one thread per connection.
class TelemetryListener {
public:
    TelemetryListener(store::Store& store, std::string host, std::uint16_t port);
    ~TelemetryListener();
    TelemetryListener(const TelemetryListener&) = delete;
    TelemetryListener& operator=(const TelemetryListener&) = delete;

    /// Binds and starts accepting. Throws std::runtime_error on bind failure.
    void start();
    void stop();
    /// Actual bound port (useful with port 0).
    std::uint16_t port() const { return port_; }
    IngestSummary totals() const;
    std::size_t handshake_failures() const { return handshake_failures_; }

private:
    void accept_loop();
    void serve(int fd);

    store::Store& store_;
    std::string host_;
    std::uint16_t port_;
    int listen_fd_ = -1;
    std::atomic<bool> running_{false};
    std::thread acceptor_;
    mutable std::mutex mu_;
    std::vector<std::thread> workers_;
    std::vector<int> open_fds_;
    IngestSummary totals_;
    std::atomic<std::size_t> handshake_failures_{0};
};

}  // namespace fablink::ingest
