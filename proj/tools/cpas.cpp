// cpas: run, replay and serve alarm-system scenarios.
//
//   cpas run <scenario.json> [--seed N] [--report out.json] [--trace out.bin]
//   cpas replay <trace.bin> [--report out.json]
//   cpas serve <scenario.json> [--speed X] [--api-port 8080] [--te-port 7001]
//   cpas report <report.json>
//
// Exit status: 0 when every scenario assertion passes, 1 when one fails,
// 2 on usage, parse or I/O errors.

#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>

#include "CLI11.hpp"

#include "cpas/live.hpp"
#include "cpas/sim/report.hpp"
#include "cpas/sim/scenario.hpp"
#include "cpas/sim/trace.hpp"

namespace {

using namespace cpas;

constexpr int kExitFailed = 1;
constexpr int kExitError = 2;

std::atomic<bool> g_quit{false};

void on_signal(int) { g_quit = true; }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

int finish(const sim::RunOutput& out, const std::string& report_path) {
  if (!report_path.empty()) write_text(report_path, sim::report_text(out.report));
  std::cout << sim::render_report_table(out.report);
  return out.report.at("passed").get<bool>() ? 0 : kExitFailed;
}

int cmd_run(const std::string& scenario_path, std::optional<std::uint64_t> seed, const std::string& report_path,
            const std::string& trace_path) {
  auto sc = sim::load_scenario(scenario_path);
  if (seed) {
    sc.seed = *seed;
    sc.source["seed"] = *seed;
  }
  const auto out = sim::run_scenario(std::move(sc));
  if (!trace_path.empty()) sim::write_trace_file(trace_path, out.trace);
  return finish(out, report_path);
}

int cmd_replay(const std::string& trace_path, const std::string& report_path) {
  const auto file = sim::read_trace_file(trace_path);
  const auto out = sim::replay_trace(file);
  std::cout << "replay matched " << file.records.size() << " trace records (seed " << file.seed << ")\n";
  return finish(out, report_path);
}

int cmd_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  const auto r = sim::ReportJson::parse(in);
  if (r.value("schema", std::string()) != sim::kReportSchema) throw std::runtime_error(path + ": not a cpas report");
  std::cout << sim::render_report_table(r);
  return r.at("passed").get<bool>() ? 0 : kExitFailed;
}

// One line per command on stdin: kill <id> | revive <id> |
// alarm <id> <zone> <IR|SMOKE|TEMP> | burst <id> <count> | tes | quit
void handle_line(live::LiveServer& server, const std::string& line) {
  std::istringstream in(line);
  std::string verb;
  in >> verb;
  if (verb.empty()) return;
  if (verb == "quit" || verb == "exit") {
    g_quit = true;
    return;
  }
  TeId id = 0;
  if (verb == "kill" && in >> id) {
    const bool ok = server.call([id](sim::World& w) { return w.kill(id); });
    std::cout << (ok ? "killed " : "no powered TE ") << id << std::endl;
  } else if (verb == "revive" && in >> id) {
    const bool ok = server.call([id](sim::World& w) { return w.revive(id); });
    std::cout << (ok ? "revived " : "no dead TE ") << id << std::endl;
  } else if (verb == "alarm" && in >> id) {
    int zone = 1;
    std::string type = "IR";
    in >> zone >> type;
    const auto t = protocol::alarm_type_from_name(type);
    if (!t || zone < 0 || zone > 255) {
      std::cout << "usage: alarm <id> <zone> <IR|SMOKE|TEMP>" << std::endl;
      return;
    }
    const bool ok = server.call(
        [id, zone, t](sim::World& w) { return w.inject_alarm(id, static_cast<std::uint8_t>(zone), *t); });
    std::cout << (ok ? "alarm injected on " : "no TE ") << id << std::endl;
  } else if (verb == "burst" && in >> id) {
    int count = 4;
    in >> count;
    server.post([id, count](sim::World& w) { w.force_burst(id, count); });
    std::cout << "burst of " << count << " queued on " << id << std::endl;
  } else if (verb == "tes") {
    const auto s = server.call([](sim::World& w) {
      return std::make_pair(w.hmi().online_count(), w.hmi().session_count());
    });
    std::cout << s.first << "/" << s.second << " online at " << server.virtual_now() << " ms" << std::endl;
  } else {
    std::cout << "commands: kill <id> | revive <id> | alarm <id> <zone> <type> | burst <id> <n> | tes | quit"
              << std::endl;
  }
}

int cmd_serve(const std::string& scenario_path, std::optional<std::uint64_t> seed, live::LiveOptions opts) {
  auto sc = sim::load_scenario(scenario_path);
  if (seed) sc.seed = *seed;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  live::LiveServer server(std::move(sc), opts);
  server.start();
  std::cout << "serving api on http://" << opts.host << ":" << server.api_port() << "  te listener on "
            << opts.host << ":" << server.te_port() << "  speed x" << opts.speed << std::endl;

  std::thread input([&server] {
    std::string line;
    while (!g_quit && std::getline(std::cin, line)) handle_line(server, line);
  });
  input.detach();
  while (!g_quit) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  server.stop();
  std::cout << "stopped" << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cpas: alarm-system simulator and HMI server"};
  app.require_subcommand(1);

  std::string scenario_path, trace_path, report_path, input_path;
  std::optional<std::uint64_t> seed;

  auto* run = app.add_subcommand("run", "run a scenario in virtual time");
  run->add_option("scenario", scenario_path, "scenario JSON")->required();
  run->add_option("--seed", seed, "override the scenario seed");
  run->add_option("--report", report_path, "write the JSON report here");
  run->add_option("--trace", trace_path, "write the binary event trace here");

  auto* replay = app.add_subcommand("replay", "re-run a trace and verify it record by record");
  replay->add_option("trace", input_path, "trace file")->required();
  replay->add_option("--report", report_path, "write the JSON report here");
  std::optional<std::uint64_t> replay_seed;
  replay->add_option("--seed", replay_seed, "rejected: the seed comes from the trace");

  auto* serve = app.add_subcommand("serve", "run a scenario against the wall clock with the operator API");
  live::LiveOptions opts;
  serve->add_option("scenario", scenario_path, "scenario JSON")->required();
  serve->add_option("--seed", seed, "override the scenario seed");
  serve->add_option("--speed", opts.speed, "virtual ms per wall ms")->check(CLI::PositiveNumber);
  serve->add_option("--api-port", opts.api_port, "operator HTTP port (0 = any)")->check(CLI::Range(0, 65535));
  serve->add_option("--te-port", opts.te_port, "TE TCP port (0 = any)")->check(CLI::Range(0, 65535));
  serve->add_option("--host", opts.host, "listen address");

  auto* report = app.add_subcommand("report", "print a report as a table");
  report->add_option("report", input_path, "report JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and friends exit 0; everything else is a usage error.
    return app.exit(e) == 0 ? 0 : kExitError;
  }

  try {
    if (run->parsed()) return cmd_run(scenario_path, seed, report_path, trace_path);
    if (replay->parsed()) {
      if (replay_seed) {
        std::cerr << "cpas replay: --seed is not accepted; the trace embeds its seed\n";
        return kExitError;
      }
      return cmd_replay(input_path, report_path);
    }
    if (serve->parsed()) return cmd_serve(scenario_path, seed, opts);
    if (report->parsed()) return cmd_report(input_path);
  } catch (const sim::ScenarioParseError& e) {
    std::cerr << "cpas: " << e.what() << "\n";
    return kExitError;
  } catch (const sim::TraceParseError& e) {
    std::cerr << "cpas: trace: " << e.what() << "\n";
    return kExitError;
  } catch (const sim::DivergedTrace& e) {
    std::cerr << "cpas: " << e.what() << "\n";
    return kExitFailed;
  } catch (const live::PortBindError& e) {
    std::cerr << "cpas: " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "cpas: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
