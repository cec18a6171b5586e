#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

namespace bdmesh {

/// Opaque 32-bit address printed as a dotted quad. Used for both simulated
/// underlay addresses and overlay addresses.
struct Ipv4 {
    std::uint32_t value = 0;

    auto operator<=>(const Ipv4&) const = default;

    std::string to_string() const;
    static std::optional<Ipv4> parse(std::string_view text);
};

struct Endpoint {
    Ipv4 ip;
    std::uint16_t port = 0;

    auto operator<=>(const Endpoint&) const = default;

    std::string to_string() const;
    /// Parses "a.b.c.d:port".
    static std::optional<Endpoint> parse(std::string_view text);
};

/// IPv4 prefix, network bits are normalized on construction.
class Cidr {
public:
    Cidr() = default;
    Cidr(Ipv4 network, int prefix_len);

    static std::optional<Cidr> parse(std::string_view text);

    Ipv4 network() const { return network_; }
    int prefix_len() const { return prefix_len_; }
    std::uint32_t mask() const;

    bool contains(Ipv4 addr) const;
    bool overlaps(const Cidr& other) const;
    /// First usable host address (network + 1 unless /31 or /32).
    Ipv4 first_host() const;

    std::string to_string() const;

    auto operator<=>(const Cidr&) const = default;

private:
    Ipv4 network_{};
    int prefix_len_ = 32;
};

}  // namespace bdmesh

template <>
struct std::hash<bdmesh::Ipv4> {
    std::size_t operator()(const bdmesh::Ipv4& ip) const noexcept { return std::hash<std::uint32_t>{}(ip.value); }
};

template <>
struct std::hash<bdmesh::Endpoint> {
    std::size_t operator()(const bdmesh::Endpoint& ep) const noexcept {
        return std::hash<std::uint64_t>{}((static_cast<std::uint64_t>(ep.ip.value) << 16) | ep.port);
    }
};
