#include "bdmesh/service.hpp"

#include <spdlog/spdlog.h>

namespace bdmesh::io {

CoordinatorService::CoordinatorService(EventLoop& loop, Coordinator::Options options)
    : loop_(loop),
      server_(loop, kMaxLineBytes),
      coord_(options, [&loop] { return loop.now(); },
             [this](int listener, const Endpoint& to, const std::string& payload) {
                 loop_.send(udp_[static_cast<std::size_t>(listener)], to, to_bytes(payload));
             }) {}

bool CoordinatorService::start(const Endpoint& primary, const Endpoint& secondary) {
    for (int i = 0; i < 2; ++i) {
        auto s = loop_.open_socket_at(i == 0 ? primary : secondary,
                                      [this, i](SocketId, const Endpoint& from, ByteView payload) {
                                          coord_.on_datagram(i, from, payload);
                                      });
        if (!s) return false;
        udp_[static_cast<std::size_t>(i)] = *s;
    }
    // The stream shares the primary UDP port when that was left ephemeral.
    Endpoint stream = primary;
    if (stream.port == 0) stream.port = loop_.local_endpoint(udp_[0]).port;
    return server_.listen(stream, [this](std::unique_ptr<LineConnection> conn) {
        LineConnection* raw = conn.get();
        const auto id = coord_.on_connect(raw->peer(), [raw](const std::string& line) { raw->send_line(line); });
        spdlog::debug("connection {} from {}", id, raw->peer().to_string());
        raw->on_line([this, id](const std::string& line) { coord_.on_line(id, line); });
        raw->on_close([this, id] {
            spdlog::debug("connection {} closed", id);
            coord_.on_disconnect(id);
            // The connection is still on the call stack.
            loop_.call_later(0, [this, id] { conns_.erase(id); });
        });
        conns_.emplace(id, std::move(conn));
    });
}

NodeService::NodeService(EventLoop& loop, const Identity& identity, Options options)
    : loop_(loop), identity_(identity), options_(std::move(options)) {}

NodeService::~NodeService() { agent_.reset(); }

bool NodeService::start() {
    for (int attempt = 1; attempt <= options_.connect_attempts && !line_; ++attempt) {
        line_ = LineConnection::connect(loop_, options_.coord, options_.connect_timeout, kMaxLineBytes);
        if (line_) break;
        spdlog::warn("coordinator {} unreachable (attempt {}/{})", options_.coord.to_string(), attempt,
                     options_.connect_attempts);
        if (attempt < options_.connect_attempts) loop_.run_until(nullptr, options_.retry_wait);
    }
    if (!line_) {
        status_ = Status::coord_unreachable;
        return false;
    }

    AgentConfig cfg;
    cfg.node_id = options_.node_id;
    cfg.observers = {options_.coord, options_.coord_secondary};
    cfg.seed = options_.seed;
    agent_ = std::make_unique<NodeAgent>(loop_, *line_, identity_, cfg);
    agent_->on_error([this](const std::string& code, const std::string& detail) {
        spdlog::warn("coordinator error {}: {}", code, detail);
        if (code == wire::kIdentityConflict) {
            status_ = Status::identity_conflict;
            loop_.stop();
        }
    });
    line_->on_line([this](const std::string& line) { agent_->on_line(line); });
    line_->on_close([this] {
        spdlog::warn("control channel closed");
        if (status_ == Status::running) status_ = Status::control_lost;
        agent_->on_control_down();
    });
    agent_->start();
    return true;
}

}  // namespace bdmesh::io
