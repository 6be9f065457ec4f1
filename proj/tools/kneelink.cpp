// kneelink: simulated wearable, ingestion service and dump replay.
//
//   kneelink simulate --reps 5 --trial-s 10 --peak-deg 120 --drop-prob 0 --seed 1
//                     --dest 127.0.0.1:4747 [--realtime|--fast] [--dump frames.bin]
//   kneelink serve --listen 127.0.0.1:4747 --http-port 8080 --data-dir data
//   kneelink replay --file frames.bin --dest 127.0.0.1:4747 [--realtime]

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <iterator>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kneelink/kneelink.hpp"

namespace {

using namespace kneelink;

std::string default_dest() {
  if (const char* env = std::getenv("KNEELINK_DEST"); env && *env) return env;
  return "127.0.0.1:" + std::to_string(transport::default_port());
}

int cmd_simulate(const sim::SquatProfile& profile, const std::string& noise_name, double alpha,
                 double drop_prob, double jitter_ms, const std::string& dest, bool realtime,
                 const std::string& dump, bool no_send) {
  sim::NoiseModel noise = noise_name == "none" ? sim::NoiseModel::noiseless() : sim::NoiseModel{};
  sim::DeviceConfig dev;
  dev.alpha = alpha;
  dev.realtime = realtime;

  transport::LinkConfig link;
  link.drop_prob = drop_prob;
  link.jitter_bound = std::chrono::microseconds(static_cast<long>(jitter_ms * 1000.0));
  link.seed = profile.rng_seed;

  std::unique_ptr<transport::DatagramSink> sink;
  if (no_send) {
    sink = std::make_unique<transport::LoopbackLink>(link);
  } else {
    sink = std::make_unique<transport::UdpSink>(transport::parse_endpoint(dest), link);
  }
  const auto run = sim::run_device(profile, noise, *sink, dev);

  if (!dump.empty()) {
    std::ofstream out(dump, std::ios::binary);
    out.write(reinterpret_cast<const char*>(run.frames.data()),
              static_cast<std::streamsize>(run.frames.size()));
    if (!out) throw Error(ErrorCode::Export, "cannot write " + dump);
  }
  nlohmann::json j{{"sent", run.stats.sent},
                   {"delivered", run.stats.received},
                   {"dropped", run.stats.dropped},
                   {"observed_rate_hz", run.stats.observed_rate_hz},
                   {"dest", no_send ? "none" : dest}};
  if (run.aborted) j["aborted"] = run.abort_reason;
  std::cout << j.dump() << std::endl;
  return run.aborted ? 1 : 0;
}

int cmd_serve(const std::string& listen, const std::string& http_host, int http_port,
              const std::string& data_dir) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  transport::UdpSource source(transport::parse_endpoint(listen));
  service::ServiceConfig cfg;
  cfg.data_dir = data_dir;
  service::IngestService svc(cfg, &source);
  service::HttpApi api(svc);
  const int port = api.start(http_host, http_port);
  std::cerr << "kneelink: datagrams on " << listen << " (port " << source.bound_port()
            << "), http on " << http_host << ":" << port << ", data in " << data_dir << std::endl;

  int sig = 0;
  sigwait(&set, &sig);
  std::cerr << "kneelink: shutting down" << std::endl;
  api.stop();
  source.close();
  svc.shutdown();
  return 0;
}

int cmd_replay(const std::string& file, const std::string& dest, bool realtime) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorCode::Input, "cannot open " + file);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  transport::UdpSink sink(transport::parse_endpoint(dest));
  const auto period = std::chrono::microseconds(15000);
  const auto start = std::chrono::steady_clock::now();
  std::size_t n = 0;
  for (std::size_t off = 0; off < bytes.size(); off += protocol::kFrameSize, ++n) {
    if (realtime) std::this_thread::sleep_until(start + period * static_cast<long>(n));
    const std::size_t len = std::min(protocol::kFrameSize, bytes.size() - off);
    sink.send(std::span<const std::uint8_t>(bytes.data() + off, len));
    // Unpaced replays still need to leave the receiver a little headroom.
    if (!realtime && n % 64 == 63) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  std::cout << nlohmann::json{{"datagrams", n}, {"bytes", bytes.size()}, {"dest", dest}}.dump()
            << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kneelink: wearable knee-kinematics and EMG telemetry toolkit"};
  app.require_subcommand(1);

  sim::SquatProfile profile;
  std::string noise_name = "default";
  double alpha = 0.98, drop_prob = 0.0, jitter_ms = 0.0;
  std::string dest = default_dest(), dump;
  bool realtime_flag = false, fast_flag = false, no_send = false;
  auto* simulate = app.add_subcommand("simulate", "run the simulated wearable and stream frames");
  simulate->add_option("--reps", profile.n_reps, "squat repetitions")->capture_default_str();
  simulate->add_option("--trial-s", profile.trial_s, "trial length, s")->capture_default_str();
  simulate->add_option("--peak-deg", profile.peak_flexion_deg, "peak knee flexion, deg")
      ->capture_default_str();
  simulate->add_option("--standing-s", profile.standing_s, "standing lead-in, s")
      ->capture_default_str();
  simulate->add_option("--rep-s", profile.rep_s, "duration of one repetition, s")
      ->capture_default_str();
  simulate->add_option("--seed", profile.rng_seed, "RNG seed")->capture_default_str();
  simulate->add_option("--drop-prob", drop_prob, "link drop probability")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  simulate->add_option("--jitter-ms", jitter_ms, "link jitter bound, ms")->capture_default_str();
  simulate->add_option("--alpha", alpha, "complementary filter gyro weight")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  simulate->add_option("--noise", noise_name, "sensor noise model")
      ->check(CLI::IsMember({"default", "none"}))
      ->capture_default_str();
  simulate->add_option("--dest", dest, "datagram destination host:port")
      ->envname("KNEELINK_DEST")
      ->capture_default_str();
  auto* rt = simulate->add_flag("--realtime", realtime_flag, "pace the loop at 15 ms (default)");
  simulate->add_flag("--fast", fast_flag, "run faster than real time")->excludes(rt);
  simulate->add_option("--dump", dump, "write the raw frame stream to this file");
  simulate->add_flag("--no-send", no_send, "do not open a socket (use with --dump)");

  std::string listen = "127.0.0.1:" + std::to_string(transport::kDefaultPort);
  std::string http_host = "127.0.0.1", data_dir = "data";
  int http_port = 8080;
  auto* serve = app.add_subcommand("serve", "run the ingestion service");
  serve->add_option("--listen", listen, "datagram listen host:port")
      ->envname("KNEELINK_LISTEN")
      ->capture_default_str();
  serve->add_option("--http-host", http_host, "HTTP bind address")
      ->envname("KNEELINK_HTTP_HOST")
      ->capture_default_str();
  serve->add_option("--http-port", http_port, "HTTP port")
      ->envname("KNEELINK_HTTP_PORT")
      ->capture_default_str();
  serve->add_option("--data-dir", data_dir, "export directory")
      ->envname("KNEELINK_DATA_DIR")
      ->capture_default_str();

  std::string replay_file;
  std::string replay_dest = default_dest();
  bool replay_realtime = false;
  auto* replay = app.add_subcommand("replay", "send a --dump file to a running service");
  replay->add_option("--file", replay_file, "frame dump")->required();
  replay->add_option("--dest", replay_dest, "datagram destination host:port")
      ->envname("KNEELINK_DEST")
      ->capture_default_str();
  replay->add_flag("--realtime", replay_realtime, "pace at one frame per 15 ms");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*simulate) {
      return cmd_simulate(profile, noise_name, alpha, drop_prob, jitter_ms, dest, !fast_flag,
                          dump, no_send);
    }
    if (*serve) {
      if (std::getenv("KNEELINK_LISTEN") == nullptr && std::getenv("KNEELINK_PORT") != nullptr &&
          serve->count("--listen") == 0) {
        listen = "127.0.0.1:" + std::to_string(transport::default_port());
      }
      return cmd_serve(listen, http_host, http_port, data_dir);
    }
    if (*replay) return cmd_replay(replay_file, replay_dest, replay_realtime);
  } catch (const Error& e) {
    std::cerr << "kneelink: " << to_string(e.code()) << ": " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
