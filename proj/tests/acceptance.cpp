// Acceptance suite. Prints one PASS/FAIL line per criterion. With no
// arguments every criterion runs; a criterion name runs that one only.
// Exit status is the number of failures.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "kneelink/kneelink.hpp"
#include "oracles.hpp"

using namespace kneelink;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

session::SessionMetadata meta(const std::string& id) {
  return session::SessionMetadata{id, "20-29", "F", session::DominantLeg::Right,
                                  "2024-01-01T00:00:00Z"};
}

/// Full host path: device trace -> frames -> parser -> session record.
session::SessionRecord record_trial(const sim::SquatProfile& p, const sim::NoiseModel& n,
                                    const std::string& subject = "ACC") {
  transport::LoopbackLink link;
  const auto run = sim::run_device(p, n, link);
  protocol::FrameParser parser;
  session::SessionConfig cfg;
  cfg.dt_s = p.dt_s;
  cfg.auto_record = true;
  session::SessionRecord rec(meta(subject), cfg);
  rec.start_calibration();
  for (const auto& f : parser.feed(run.frames)) rec.append(f.seq, f.packet);
  rec.stop();
  return rec;
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("kneelink_acceptance_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  return d;
}

// ---- criteria ------------------------------------------------------------

Outcome codec_round_trip() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1001);
  std::uniform_real_distribution<float> angle(-180.0f, 180.0f);
  std::uniform_int_distribution<int> counts(0, 4095);
  std::uniform_int_distribution<std::uint32_t> bits;
  std::size_t failures = 0;
  constexpr std::size_t kN = 1'000'000;
  for (std::size_t i = 0; i < kN; ++i) {
    protocol::TelemetryPacket p;
    if (i % 4 == 0) {
      // Any finite float bit pattern, not just the physiological range.
      float f;
      do {
        const std::uint32_t b = bits(rng);
        std::memcpy(&f, &b, sizeof f);
      } while (!std::isfinite(f));
      p.knee_angle_deg = f;
    } else {
      p.knee_angle_deg = angle(rng);
    }
    p.emg1_counts = static_cast<std::uint16_t>(counts(rng));
    p.emg2_counts = static_cast<std::uint16_t>(counts(rng));
    const auto d = protocol::decode_packet(protocol::encode_packet(p));
    if (!(d.packet == p) || d.suspect != protocol::kSuspectNone) ++failures;
  }
  using B = std::array<std::uint8_t, 8>;
  const bool v1 = protocol::encode_packet({0.0f, 0, 0}) == B{0, 0, 0, 0, 0, 0, 0, 0};
  const bool v2 = protocol::encode_packet({1.0f, 1, 256}) == B{0x00, 0x00, 0x80, 0x3F, 0x01, 0x00, 0x00, 0x01};
  const protocol::TelemetryPacket deep{125.5f, 1986, 512};
  const bool v3 = protocol::decode_packet(protocol::encode_packet(deep)).packet == deep &&
                  protocol::encode_packet(deep) == B{0x00, 0x00, 0xFB, 0x42, 0xC2, 0x07, 0x00, 0x02};
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {failures == 0 && v1 && v2 && v3 && secs < 10.0,
          fmt("%zu/%zu round-trip failures, fixed vectors %s/%s/%s, %.2f s", failures, kN,
              v1 ? "ok" : "BAD", v2 ? "ok" : "BAD", v3 ? "ok" : "BAD", secs)};
}

Outcome packet_cadence() {
  transport::LoopbackLink link;
  const auto run = sim::run_device(sim::SquatProfile{}, sim::NoiseModel{}, link);
  protocol::FrameParser parser;
  std::uint64_t parsed = 0;
  while (auto d = link.recv(std::chrono::milliseconds(0))) parsed += parser.feed(*d).size();
  const bool ok = run.stats.sent >= 666 && run.stats.sent <= 668 && run.stats.received == run.stats.sent &&
                  parsed == run.stats.sent && parser.totals().dropped == 0;
  return {ok, fmt("sent=%llu received=%llu parsed=%llu dropped=%llu",
                  static_cast<unsigned long long>(run.stats.sent),
                  static_cast<unsigned long long>(run.stats.received),
                  static_cast<unsigned long long>(parsed),
                  static_cast<unsigned long long>(parser.totals().dropped))};
}

Outcome fusion_oracle() {
  auto errors = [](const sim::NoiseModel& n) {
    const auto tr = sim::simulate_device(sim::SquatProfile{}, n);
    std::vector<double> est;
    for (const auto& p : tr.packets) est.push_back(p.knee_angle_deg);
    const double rmse = oracle::rmse(est, tr.truth.knee_deg);
    // Terminal drift: mean error over the final second.
    const std::size_t tail = static_cast<std::size_t>(std::lround(1.0 / sim::kLoopPeriodS));
    double bias = 0.0;
    for (std::size_t i = est.size() - tail; i < est.size(); ++i) bias += est[i] - tr.truth.knee_deg[i];
    return std::pair{rmse, std::abs(bias / static_cast<double>(tail))};
  };
  const double rmse0 = errors(sim::NoiseModel::noiseless()).first;
  const auto [rmse1, drift1] = errors(sim::NoiseModel{});
  return {rmse0 < 0.5 && rmse1 < 3.0 && drift1 < 2.0,
          fmt("zero-noise RMSE %.4f deg; default noise RMSE %.3f deg, terminal drift %.3f deg",
              rmse0, rmse1, drift1)};
}

Outcome trajectory_reproduction() {
  const auto rec = record_trial(sim::SquatProfile{}, sim::NoiseModel{});
  const auto s = rec.summarize();
  return {s.peak_flexion_deg >= 115.0 && s.peak_flexion_deg <= 135.0 && s.rep_count == 5,
          fmt("peak_flexion %.2f deg, rep_count %zu", s.peak_flexion_deg, s.rep_count)};
}

Outcome velocity_sign_morphology() {
  const auto rec = record_trial(sim::SquatProfile{}, sim::NoiseModel{});
  std::vector<double> angle, vel;
  for (const auto& k : rec.derived()) {
    angle.push_back(k.angle_deg);
    vel.push_back(k.velocity_dps);
  }
  const auto reps = session::detect_repetitions(angle, 60.0, 20.0);
  std::size_t good = 0;
  std::string first_bad;
  for (const auto& r : reps.spans) {
    const auto b = angle.begin() + static_cast<long>(r.begin);
    const auto e = angle.begin() + static_cast<long>(r.end) + 1;
    const auto peak = static_cast<std::size_t>(std::max_element(b, e) - angle.begin());
    const auto vb = vel.begin() + static_cast<long>(r.begin);
    const auto ve = vel.begin() + static_cast<long>(r.end) + 1;
    const auto vmin = static_cast<std::size_t>(std::min_element(vb, ve) - vel.begin());
    const auto vmax = static_cast<std::size_t>(std::max_element(vb, ve) - vel.begin());
    if (vmin < peak && vmax > peak) {
      ++good;
    } else if (first_bad.empty()) {
      first_bad = fmt("; rep at %zu: v_min idx %zu (%.0f dps), peak idx %zu, v_max idx %zu (%.0f dps)",
                      r.begin, vmin, vel[vmin], peak, vmax, vel[vmax]);
    }
  }
  return {!reps.spans.empty() && good == reps.spans.size(),
          fmt("%zu/%zu reps with velocity minimum before and maximum after the angle peak",
              good, reps.spans.size()) + first_bad};
}

Outcome emg_envelope() {
  const double dt = sim::kLoopPeriodS;
  const double alpha = sim::DeviceConfig{}.alpha_emg;
  auto ch = emg::make_channel(emg::Channel::VastusLateralis, alpha, 0.0);
  int k = 0;
  while (ch.envelope_counts < 0.632 * 4095.0) {
    ch = emg::emg_update(ch, 4095);
    ++k;
  }
  const double expected_s = -dt / std::log(1.0 - alpha);
  const double rise_err = std::abs(k * dt - expected_s);

  const auto tr = sim::simulate_device(sim::SquatProfile{}, sim::NoiseModel{});
  int peak = 0, lo = std::numeric_limits<int>::max(), hi = 0;
  for (const auto& p : tr.packets) {
    peak = std::max({peak, int{p.emg1_counts}, int{p.emg2_counts}});
    lo = std::min({lo, int{p.emg1_counts}, int{p.emg2_counts}});
    hi = std::max({hi, int{p.emg1_counts}, int{p.emg2_counts}});
  }
  const double peak_v = emg::counts_to_volts(peak);
  return {rise_err <= dt && peak_v >= 1.55 && peak_v <= 1.65 && lo >= 0 && hi <= 4095,
          fmt("63.2%% rise %d samples vs %.3f expected; peak %.4f V; envelope range [%d, %d]", k,
              expected_s / dt, peak_v, lo, hi)};
}

Outcome rep_detection_equivalence() {
  std::mt19937_64 rng(2002);
  std::size_t disagreements = 0, total_reps = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto x = oracle::random_piecewise_linear(rng);
    const auto got = session::detect_repetitions(x, 60.0, 20.0).rep_count;
    const auto want = oracle::rep_count_by_crossings(x, 60.0, 20.0);
    total_reps += want;
    if (got != want) ++disagreements;
  }
  return {disagreements == 0,
          fmt("%zu disagreements over 1000 traces (%zu reps total)", disagreements, total_reps)};
}

Outcome export_consistency() {
  const auto dir = scratch("export");
  session::TrialStore store(dir);
  std::mt19937_64 rng(3003);
  std::uniform_int_distribution<int> reps(0, 5);
  std::uniform_real_distribution<double> peak(70.0, 140.0);
  std::size_t mismatches = 0, row_mismatches = 0;
  std::string first_bad;
  for (int trial = 0; trial < 100; ++trial) {
    sim::SquatProfile p;
    p.rng_seed = rng();
    p.n_reps = reps(rng);
    p.peak_flexion_deg = peak(rng);
    const auto rec = record_trial(p, sim::NoiseModel{}, "EXP");
    const auto res = store.save(rec);
    const auto csv = session::read_trial_csv(res.csv_path);
    if (csv.size() != rec.samples().size() || res.rows != rec.samples().size()) ++row_mismatches;
    const auto s = rec.summarize();
    const auto b = oracle::batch_summary(csv.knee_angle_deg, csv.knee_vel_dps, csv.knee_acc_dps2,
                                         csv.emg1_counts, csv.emg2_counts, 60.0, 20.0);
    // CSV reals carry six significant digits.
    const double rel = 1e-5;
    const bool same = s.rep_count == b.rep_count &&
                      oracle::close(s.rom_deg, b.rom_deg, rel, 1e-4) &&
                      oracle::close(s.peak_flexion_deg, b.peak_flexion_deg, rel, 1e-4) &&
                      oracle::close(s.peak_velocity_dps, b.peak_velocity_dps, rel, 1e-4) &&
                      oracle::close(s.peak_accel_dps2, b.peak_accel_dps2, rel, 1e-4) &&
                      oracle::close(s.emg1_peak_v, b.emg1_peak_v, 1e-12) &&
                      oracle::close(s.emg1_mean_v, b.emg1_mean_v, 1e-12) &&
                      oracle::close(s.emg2_peak_v, b.emg2_peak_v, 1e-12) &&
                      oracle::close(s.emg2_mean_v, b.emg2_mean_v, 1e-12);
    if (!same) {
      ++mismatches;
      if (first_bad.empty()) first_bad = fmt("; first mismatch at trial %d", trial);
    }
  }
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "EXP")) files += e.path().extension() == ".csv";

  // Five sequential trials of one subject land in five distinct files.
  session::TrialStore five(dir / "five");
  std::vector<fs::path> paths;
  for (int i = 0; i < 5; ++i) {
    sim::SquatProfile p;
    p.rng_seed = 100 + static_cast<std::uint64_t>(i);
    paths.push_back(five.save(record_trial(p, sim::NoiseModel{}, "S05")).csv_path);
  }
  std::sort(paths.begin(), paths.end());
  const bool distinct = std::unique(paths.begin(), paths.end()) == paths.end();
  std::size_t five_files = 0;
  for (const auto& e : fs::directory_iterator(dir / "five" / "S05")) {
    five_files += e.path().extension() == ".csv";
  }
  fs::remove_all(dir);
  return {mismatches == 0 && row_mismatches == 0 && files == 100 && distinct && five_files == 5,
          fmt("%zu/100 summary mismatches, %zu row-count mismatches, %zu files; five trials -> %zu files",
              mismatches, row_mismatches, files, five_files) + first_bad};
}

Outcome lossy_link_robustness() {
  constexpr std::size_t kFrames = 10'000;
  transport::LoopbackLink link(transport::LinkConfig{0.1, {}, 4004});
  for (std::size_t i = 0; i < kFrames; ++i) {
    link.send(protocol::encode_frame(static_cast<std::uint16_t>(i), {0.0f, 0, 0}));
  }
  protocol::FrameParser parser;
  std::uint64_t received = 0;
  while (auto d = link.recv(std::chrono::milliseconds(0))) received += parser.feed(*d).size();
  const double mean = 0.9 * kFrames;
  const double sigma = std::sqrt(kFrames * 0.1 * 0.9);
  const bool binomial = std::abs(static_cast<double>(received) - mean) <= 3.0 * sigma;

  // A reference stream and its parse.
  std::mt19937_64 rng(4005);
  std::uniform_real_distribution<float> angle(-10.0f, 130.0f);
  std::uniform_int_distribution<int> counts(0, 4095);
  std::vector<std::uint8_t> stream;
  std::vector<protocol::ParsedFrame> want;
  for (std::uint16_t s = 0; s < 200; ++s) {
    protocol::TelemetryPacket p{angle(rng), static_cast<std::uint16_t>(counts(rng)),
                                static_cast<std::uint16_t>(counts(rng))};
    const auto f = protocol::encode_frame(s, p);
    stream.insert(stream.end(), f.begin(), f.end());
    want.push_back({s, p, protocol::kSuspectNone});
  }

  std::uniform_int_distribution<int> byte(0, 255);
  std::uniform_int_distribution<int> prefix_len(0, 64);
  std::size_t prefix_failures = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::uint8_t> junk(static_cast<std::size_t>(prefix_len(rng)));
    for (auto& b : junk) b = static_cast<std::uint8_t>(byte(rng));
    if (trial % 3 == 0) junk.insert(junk.end(), {0xAA, 0x55});  // false sync right before the stream
    junk.insert(junk.end(), stream.begin(), stream.end());
    protocol::FrameParser p;
    if (p.feed(junk) != want) ++prefix_failures;
  }

  std::size_t split_failures = 0;
  std::uniform_int_distribution<std::size_t> cut(1, 40);
  for (int trial = 0; trial < 1000; ++trial) {
    protocol::FrameParser p;
    std::vector<protocol::ParsedFrame> got;
    std::size_t pos = 0;
    while (pos < stream.size()) {
      const std::size_t n = std::min(cut(rng), stream.size() - pos);
      const auto part = p.feed(std::span(stream).subspan(pos, n));
      got.insert(got.end(), part.begin(), part.end());
      pos += n;
    }
    if (got != want) ++split_failures;
  }
  return {binomial && prefix_failures == 0 && split_failures == 0,
          fmt("received %llu of %zu (mean %.0f, 3 sigma %.1f); garbage-prefix failures %zu/1000; "
              "chunk-split failures %zu/1000",
              static_cast<unsigned long long>(received), kFrames, mean, 3.0 * sigma,
              prefix_failures, split_failures)};
}

struct Criterion {
  const char* name;
  const char* title;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {"codec", "Codec round-trip", codec_round_trip},
      {"cadence", "Packet cadence", packet_cadence},
      {"fusion", "Fusion oracle", fusion_oracle},
      {"trajectory", "Squat trajectory reproduction", trajectory_reproduction},
      {"velocity_sign", "Velocity-sign morphology", velocity_sign_morphology},
      {"emg", "EMG envelope", emg_envelope},
      {"reps", "Rep detection equivalence", rep_detection_equivalence},
      {"export", "Export consistency", export_consistency},
      {"lossy_link", "Lossy-link robustness", lossy_link_robustness},
  };
  const std::string only = argc > 1 ? argv[1] : "";
  int failures = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && only != c.name) continue;
    ++ran;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s  %-30s %s\n", o.pass ? "PASS" : "FAIL", c.title, o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  if (ran == 0) {
    std::fprintf(stderr, "unknown criterion '%s'\n", only.c_str());
    return 2;
  }
  return failures;
}
