#include "bdmesh/cli.hpp"

#include "bdmesh/experiment.hpp"
#include "bdmesh/probability.hpp"
#include "bdmesh/scenario.hpp"
#include "bdmesh/service.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <atomic>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

namespace bdmesh::cli {

namespace {

std::atomic<bool> g_interrupted{false};

extern "C" void on_signal(int) { g_interrupted = true; }

std::string fixed7(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.7f", v);
    return buf;
}

std::string number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

PortSpace port_space(std::int64_t lo, std::int64_t hi) { return PortSpace(lo, hi); }

struct SpaceArgs {
    std::int64_t lo = 1025;
    std::int64_t hi = 65535;

    void add(CLI::App* app) {
        app->add_option("--port-lo", lo, "Lowest port of the hard NAT allocation range")->capture_default_str();
        app->add_option("--port-hi", hi, "Highest port of the hard NAT allocation range")->capture_default_str();
    }
};

int cmd_table(std::int64_t open_ports, double rate, const std::vector<double>& durations, const SpaceArgs& sa,
              std::ostream& out) {
    const PortSpace space = port_space(sa.lo, sa.hi);
    if (rate <= 0 || rate > PunchConfig::kMaxProbeRate) throw Error(ErrorCode::invalid_parameters, "rate out of range");
    std::vector<std::string> rows;
    for (double d : durations) {
        if (!(d >= 0)) throw Error(ErrorCode::invalid_parameters, "durations must be non-negative");
        const std::int64_t probes = ProbePlan::from_rate(open_ports, rate, d).budget;
        const double p = success_probability(space, open_ports, probes).value;
        rows.push_back(number(d) + "," + std::to_string(probes) + "," + fixed7(p) + "," + fixed7(1.0 - p));
    }
    out << "seconds,probes,probability,failure\n";
    for (const auto& r : rows) out << r << "\n";
    return kOk;
}

int cmd_curve(const std::vector<std::int64_t>& open_ports, std::int64_t max_probes, std::int64_t step,
              const SpaceArgs& sa, std::ostream& out, std::ostream& err) {
    const PortSpace space = port_space(sa.lo, sa.hi);
    const auto rows = probability_curve(space, open_ports, max_probes, step);
    out << "open_ports,probes,probability\n";
    for (const auto& r : rows)
        out << r.open_ports << "," << r.probes << "," << fixed7(r.probability) << "\n";
    for (auto b : open_ports) {
        err << "open_ports=" << b << " probes_to_0.99=";
        if (b == 0)
            err << "unreachable\n";
        else
            err << min_probes(space, b, 0.99) << "\n";
    }
    return kOk;
}

struct TraversalArgs {
    std::int64_t open_ports = 256;
    double rate = 100;
    double max_seconds = 10;
    std::int64_t trials = 1000;
    std::uint64_t seed = 42;
    double loss = 0.0;
    unsigned workers = 0;
};

int cmd_traversal(const TraversalArgs& a, std::ostream& out, std::ostream& err) {
    if (a.trials < 1) throw Error(ErrorCode::invalid_parameters, "trials must be at least 1");
    if (!(a.loss >= 0.0 && a.loss < 1.0)) throw Error(ErrorCode::invalid_parameters, "loss must be in [0, 1)");
    PunchConfig cfg;
    cfg.open_ports = a.open_ports;
    cfg.probe_rate = a.rate;
    cfg.max_duration = a.max_seconds;
    cfg.validate();

    BirthdayTrialParams params;
    params.open_ports = a.open_ports;
    params.probe_rate = a.rate;
    params.max_seconds = a.max_seconds;
    params.loss = a.loss;
    MonteCarloSummary summary;
    try {
        summary = run_monte_carlo(a.trials, a.seed, a.workers, [&](std::uint64_t seed) {
            const auto o = run_birthday_trial(params, seed);
            return o.prober_established && o.opener_established;
        });
    } catch (const Error& e) {
        err << "simulation failed: " << e.what() << "\n";
        return kSimFailure;
    }
    const std::int64_t probes = cfg.budget();
    const double analytic = a.loss > 0 ? lossy_success_probability(params.space, a.open_ports, probes, a.loss)
                                       : success_probability(params.space, a.open_ports, probes).value;
    const double delta = summary.rate() - analytic;
    out << "trials,successes,empirical_rate,analytic_rate,delta\n";
    out << summary.trials << "," << summary.successes << "," << fixed7(summary.rate()) << "," << fixed7(analytic)
        << "," << fixed7(delta) << "\n";
    if (a.trials < 100) {
        err << "note: 3-sigma check skipped below 100 trials\n";
        return kOk;
    }
    const double bound = three_sigma(analytic, a.trials);
    err << "3-sigma bound " << fixed7(bound) << (std::abs(delta) <= bound ? " (within)" : " (OUTSIDE)") << "\n";
    return std::abs(delta) <= bound ? kOk : kSimFailure;
}

struct ScenarioArgs {
    std::string path;
    std::string out_path;
    std::string trace_path;
    std::optional<std::int64_t> trials;
    std::optional<std::uint64_t> seed;
    unsigned workers = 0;
};

int cmd_scenario(const ScenarioArgs& a, std::ostream& out, std::ostream& err) {
    Scenario s;
    try {
        s = load_scenario(a.path);
    } catch (const ScenarioError& e) {
        err << "invalid scenario: " << e.what() << "\n";
        return kInvalidInput;
    }
    const std::uint64_t seed = a.seed.value_or(s.seed);
    const std::int64_t trials = a.trials.value_or(s.trials);
    try {
        classify_scheme(s.scheme);
    } catch (const Error& e) {
        err << e.what() << "\n";
        return e.code() == ErrorCode::unsupported_combination ? kUnsupportedScheme : kInvalidInput;
    }
    if (scheme_params(classify_scheme(s.scheme)).theta == 0)
        err << "warning: scheme has theta=0; overlay links carry plaintext\n";

    Realization r;
    RealizeOptions options;
    options.trace = true;
    options.keep_trace_events = !a.trace_path.empty();
    try {
        r = realize(s, seed, options);
    } catch (const Error& e) {
        err << e.what() << "\n";
        switch (e.code()) {
            case ErrorCode::node_kind_mismatch:
            case ErrorCode::overlapping_subnets:
            case ErrorCode::invalid_parameters:
                return kInvalidInput;
            default:
                return kSimFailure;
        }
    }
    nlohmann::ordered_json report = report_json(r, seed);
    if (trials > 1) {
        const ScenarioSummary sum = realize_trials(s, trials, seed, a.workers);
        report["summary"] = {{"trials", sum.trials},
                             {"connected", sum.connected},
                             {"fully_direct", sum.fully_direct},
                             {"fully_direct_rate", static_cast<double>(sum.fully_direct) / static_cast<double>(trials)}};
        err << "trials=" << sum.trials << " connected=" << sum.connected << " fully_direct=" << sum.fully_direct
            << "\n";
    }
    const std::string text = report.dump(2) + "\n";
    if (a.out_path.empty()) {
        out << text;
    } else {
        std::ofstream f(a.out_path, std::ios::binary);
        if (!f) {
            err << "cannot write " << a.out_path << "\n";
            return kInvalidInput;
        }
        f << text;
    }
    if (!a.trace_path.empty()) {
        std::ofstream f(a.trace_path, std::ios::binary);
        if (!f) {
            err << "cannot write " << a.trace_path << "\n";
            return kInvalidInput;
        }
        sim::write_trace_events(f, r.trace);
    }
    if (!r.connected) {
        err << "overlay not connected\n";
        return kSimFailure;
    }
    return kOk;
}

Endpoint parse_endpoint(const std::string& text, const std::string& what) {
    auto ep = Endpoint::parse(text);
    if (!ep) throw Error(ErrorCode::invalid_parameters, what + " must be a.b.c.d:port, got " + text);
    return *ep;
}

void install_signal_handlers() {
    g_interrupted = false;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
}

/// Stops the loop once a signal arrives.
void watch_signals(io::EventLoop& loop) {
    loop.call_later(100 * kMicrosPerMilli, [&loop] {
        if (g_interrupted) {
            loop.stop();
            return;
        }
        watch_signals(loop);
    });
}

struct CoordArgs {
    std::string listen = "0.0.0.0:3478";
    std::string listen2;
    wire::PunchParams punch;
};

int cmd_coord(const CoordArgs& a, std::ostream& err) {
    const Endpoint primary = parse_endpoint(a.listen, "--listen");
    Endpoint secondary = primary;
    secondary.port = primary.port == 0 ? 0 : static_cast<std::uint16_t>(primary.port + 1);
    if (!a.listen2.empty()) secondary = parse_endpoint(a.listen2, "--listen2");

    io::EventLoop loop;
    Coordinator::Options options;
    options.punch = a.punch;
    options.seed = std::random_device{}();
    io::CoordinatorService service(loop, options);
    if (!service.start(primary, secondary)) {
        err << "cannot bind " << primary.to_string() << " / " << secondary.to_string() << "\n";
        return kBindFailure;
    }
    spdlog::info("coordinator on {} (observers {} and {})", service.stream_endpoint().to_string(),
                 service.observer(0).to_string(), service.observer(1).to_string());
    install_signal_handlers();
    watch_signals(loop);
    loop.run_until(nullptr, std::numeric_limits<Micros>::max() / 2);
    spdlog::info("coordinator stopped");
    return kOk;
}

Identity load_or_create_identity(const std::string& path) {
    namespace fs = std::filesystem;
    if (fs::exists(path)) {
        std::ifstream in(path);
        std::string hex;
        in >> hex;
        Bytes seed;
        try {
            seed = from_hex(hex);
        } catch (const Error&) {
        }
        if (seed.size() != 32) throw Error(ErrorCode::invalid_parameters, path + " does not hold a 32-byte hex key");
        return Identity::from_seed_bytes(seed);
    }
    const Identity id = Identity::generate();
    {
        std::ofstream out(path);
        if (!out) throw Error(ErrorCode::invalid_parameters, "cannot create key file " + path);
        out << to_hex(id.seed_bytes()) << "\n";
    }
    fs::permissions(path, fs::perms::owner_read | fs::perms::owner_write, fs::perm_options::replace);
    spdlog::info("created key file {}", path);
    return id;
}

struct NodeArgs {
    std::string coord;
    std::string coord2;
    std::string id;
    std::string key;
    std::string bind = "0.0.0.0";
    std::vector<std::string> connect;
    bool plain = false;
    std::string send;
    bool echo = false;
    double duration = 0;
};

int cmd_node(const NodeArgs& a, std::ostream& out, std::ostream& err) {
    if (a.id.empty() || a.id.size() > kMaxNodeIdBytes) throw Error(ErrorCode::invalid_parameters, "--id must be 1 to 64 bytes");
    const Endpoint coord = parse_endpoint(a.coord, "--coord");
    Endpoint coord2 = coord;
    coord2.port = static_cast<std::uint16_t>(coord.port + 1);
    if (!a.coord2.empty()) coord2 = parse_endpoint(a.coord2, "--coord2");
    const auto bind_ip = Ipv4::parse(a.bind);
    if (!bind_ip) throw Error(ErrorCode::invalid_parameters, "--bind must be a dotted quad");
    const Identity identity = load_or_create_identity(a.key);

    io::EventLoop loop(*bind_ip);
    io::NodeService::Options options;
    options.node_id = a.id;
    options.coord = coord;
    options.coord_secondary = coord2;
    options.seed = std::random_device{}();
    io::NodeService node(loop, identity, options);
    install_signal_handlers();
    if (!node.start()) {
        err << "coordinator " << coord.to_string() << " unreachable\n";
        return kCoordUnreachable;
    }
    NodeAgent& agent = node.agent();
    agent.on_message([&](const std::string& peer, const Bytes& msg) {
        out << peer << ": " << to_string(msg) << std::endl;
        if (a.echo) agent.send(peer, msg);
    });
    agent.on_link([&](const LinkStatus& s) {
        spdlog::info("link {} {} path={} secure={} failure={}", s.peer, to_string(s.state), to_string(s.path),
                     s.secure, to_string(s.failure));
        if (s.ready && !a.send.empty()) agent.send(s.peer, to_bytes(a.send));
    });
    agent.on_ready([&] {
        spdlog::info("registered as {} ({})", a.id, to_string(agent.nat_class()));
        for (const auto& peer : a.connect) agent.connect(peer, !a.plain);
    });
    watch_signals(loop);
    const Micros limit = a.duration > 0 ? seconds_to_micros(a.duration) : std::numeric_limits<Micros>::max() / 2;
    loop.run_until(nullptr, limit);
    if (node.status() == io::NodeService::Status::identity_conflict) {
        err << "node id " << a.id << " is registered with another key\n";
        return kIdentityConflict;
    }
    return kOk;
}

}  // namespace

void configure_logging() {
    auto logger = spdlog::get("bdmesh");
    if (!logger) logger = spdlog::stderr_color_mt("bdmesh");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::warn);
    if (const char* env = std::getenv("BDMESH_LOG")) {
        const std::string v = env;
        if (v == "error" || v == "warn" || v == "info" || v == "debug" || v == "trace")
            spdlog::set_level(spdlog::level::from_str(v));
    }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Birthday-paradox NAT traversal toolkit and mesh overlay simulator", "bdmesh"};
    app.require_subcommand(1);

    auto* analyze = app.add_subcommand("analyze", "Closed-form success probabilities");
    analyze->require_subcommand(1);

    std::int64_t table_ports = 256;
    double table_rate = 100;
    std::vector<double> durations{5, 10, 15, 20};
    std::string durations_text;
    SpaceArgs table_space;
    auto* table = analyze->add_subcommand("table", "Probability per punch duration");
    table->add_option("--open-ports,-B", table_ports, "Mappings held open by the hard side")->capture_default_str();
    table->add_option("--rate,-R", table_rate, "Probes per second")->capture_default_str();
    table->add_option("--durations", durations_text, "Comma-separated durations in seconds (default 5,10,15,20)");
    table_space.add(table);

    std::vector<std::int64_t> curve_ports{128, 256, 512};
    std::int64_t curve_max = 3000;
    std::int64_t curve_step = 50;
    SpaceArgs curve_space;
    auto* curve = analyze->add_subcommand("curve", "Probability against probe count");
    curve->add_option("--open-ports,-B", curve_ports, "Open-port counts")->delimiter(',')->capture_default_str();
    curve->add_option("--max-probes", curve_max, "Largest probe count")->capture_default_str();
    curve->add_option("--step", curve_step, "Probe count step")->capture_default_str();
    curve_space.add(curve);

    auto* simulate = app.add_subcommand("simulate", "Monte Carlo runs over the network simulator");
    simulate->require_subcommand(1);
    TraversalArgs ta;
    auto* traversal = simulate->add_subcommand("traversal", "Seeded birthday punches against the formula");
    traversal->add_option("--open-ports,-B", ta.open_ports)->capture_default_str();
    traversal->add_option("--rate,-R", ta.rate)->capture_default_str();
    traversal->add_option("--max-seconds", ta.max_seconds)->capture_default_str();
    traversal->add_option("--trials", ta.trials)->capture_default_str();
    traversal->add_option("--seed", ta.seed)->capture_default_str();
    traversal->add_option("--loss", ta.loss, "Independent loss per datagram on the prober's link")->capture_default_str();
    traversal->add_option("--workers", ta.workers, "Worker threads, 0 for all cores")->capture_default_str();

    ScenarioArgs sa;
    auto* scenario = app.add_subcommand("scenario", "Plan and realize a scenario file in simulation");
    scenario->add_option("file", sa.path, "Scenario JSON")->required();
    scenario->add_option("--out", sa.out_path, "Write the report here instead of stdout");
    scenario->add_option("--trace", sa.trace_path, "Write the event trace as JSON lines");
    scenario->add_option("--trials", sa.trials, "Override experiment.trials");
    scenario->add_option("--seed", sa.seed, "Override experiment.seed");
    scenario->add_option("--workers", sa.workers, "Worker threads for repeated trials")->capture_default_str();

    CoordArgs ca;
    auto* coord = app.add_subcommand("coord", "Run the rendezvous coordinator");
    coord->add_option("--listen", ca.listen, "Stream and first observer address")->capture_default_str();
    coord->add_option("--listen2", ca.listen2, "Second observer address (default: next port)");
    coord->add_option("--open-ports", ca.punch.open_ports)->capture_default_str();
    coord->add_option("--rate", ca.punch.rate)->capture_default_str();
    coord->add_option("--max-seconds", ca.punch.max_seconds)->capture_default_str();

    NodeArgs na;
    auto* node = app.add_subcommand("node", "Run a node agent");
    node->add_option("--coord", na.coord, "Coordinator address a.b.c.d:port")->required();
    node->add_option("--coord2", na.coord2, "Second observer (default: next port)");
    node->add_option("--id", na.id, "Node id")->required();
    node->add_option("--key", na.key, "Identity key file, created when missing")->required();
    node->add_option("--bind", na.bind, "Local address for UDP sockets")->capture_default_str();
    node->add_option("--connect", na.connect, "Peers to link with once registered");
    node->add_flag("--plain", na.plain, "Request unencrypted links");
    node->add_option("--send", na.send, "Message to send on every new link");
    node->add_flag("--echo", na.echo, "Send every received message back");
    node->add_option("--duration", na.duration, "Exit after this many seconds (0 runs until interrupted)");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n";
        if (const auto* leaf = [&]() -> const CLI::App* {
                for (auto* s : {table, curve, traversal}) if (s->parsed()) return s;
                for (auto* s : {scenario, coord, node}) if (s->parsed()) return s;
                return nullptr;
            }())
            err << leaf->help();
        return kInvalidInput;
    }

    try {
        if (table->parsed()) {
            if (table->count("--durations")) {
                durations.clear();
                std::stringstream ss(durations_text);
                std::string item;
                while (std::getline(ss, item, ',')) {
                    if (item.empty()) continue;
                    std::size_t used = 0;
                    double d = 0;
                    try {
                        d = std::stod(item, &used);
                    } catch (const std::exception&) {
                        used = 0;
                    }
                    if (used != item.size()) throw Error(ErrorCode::invalid_parameters, "bad duration '" + item + "'");
                    durations.push_back(d);
                }
            }
            return cmd_table(table_ports, table_rate, durations, table_space, out);
        }
        if (curve->parsed()) return cmd_curve(curve_ports, curve_max, curve_step, curve_space, out, err);
        if (traversal->parsed()) return cmd_traversal(ta, out, err);
        if (scenario->parsed()) return cmd_scenario(sa, out, err);
        if (coord->parsed()) return cmd_coord(ca, err);
        if (node->parsed()) return cmd_node(na, out, err);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kInvalidInput;
    }
    return kInvalidInput;
}

}  // namespace bdmesh::cli
