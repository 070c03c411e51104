// HTTP/JSON surface of the platform (routes under /api/v1).

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <thread>

#include "fablink/platform.hpp"

namespace fablink::platform {

class ApiServer {
public:
    explicit ApiServer(Platform& platform);
    ~ApiServer();
    ApiServer(const ApiServer&) = delete;
    ApiServer& operator=(const ApiServer&) = delete;

    /// Port 0 picks a free port. Returns the bound port; throws on failure.
    std::uint16_t bind(const std::string& host, std::uint16_t port);
    /// Blocks until stop().
    void run();
    /// run() on a background thread.
    void start();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    std::thread thread_;
};

/// Error body used by every non-2xx response.
nlohmann::json error_body(const std::string& code, const std::string& message);

}  // namespace fablink::platform
