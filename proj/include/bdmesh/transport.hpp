#pragma once

#include "bdmesh/address.hpp"
#include "bdmesh/common.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>

namespace bdmesh {

using SocketId = std::uint32_t;
using TimerHandle = std::uint64_t;
using DatagramHandler = std::function<void(SocketId, const Endpoint& from, ByteView payload)>;

/// What the traversal and agent state machines need from the outside world:
/// a clock, one-shot timers and UDP sockets. Implemented over the simulator
/// and over real sockets; all callbacks run on one thread.
class Transport {
public:
    virtual ~Transport() = default;

    virtual Micros now() const = 0;
    virtual TimerHandle call_later(Micros delay, std::function<void()> fn) = 0;
    virtual void cancel(TimerHandle timer) = 0;

    virtual std::optional<SocketId> open_socket(DatagramHandler handler) = 0;
    virtual void close_socket(SocketId socket) = 0;
    virtual Endpoint local_endpoint(SocketId socket) const = 0;
    virtual void send(SocketId socket, const Endpoint& to, ByteView payload) = 0;
};

/// Reliable, ordered line channel to the coordinator.
class ControlChannel {
public:
    virtual ~ControlChannel() = default;
    virtual bool connected() const = 0;
    virtual void send_line(const std::string& line) = 0;
};

/// Weak token for callbacks that may fire after their owner is gone.
class Lifetime {
public:
    template <typename F>
    auto guard(F fn) const {
        return [token = std::weak_ptr<char>(token_), fn = std::move(fn)](auto&&... args) mutable {
            if (token.lock()) fn(std::forward<decltype(args)>(args)...);
        };
    }

private:
    std::shared_ptr<char> token_ = std::make_shared<char>(0);
};

}  // namespace bdmesh
