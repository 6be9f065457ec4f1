#ifndef KNEELINK_SIMULATOR_HPP
#define KNEELINK_SIMULATOR_HPP

// Software stand-in for the wearable: a ground-truth squat trajectory, IMU
// and EMG streams synthesized from it, and the device loop that fuses,
// smooths, packetizes and transmits one frame every 15 ms.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "kneelink/emg.hpp"
#include "kneelink/error.hpp"
#include "kneelink/fusion.hpp"
#include "kneelink/protocol.hpp"
#include "kneelink/transport.hpp"

namespace kneelink::sim {

inline constexpr double kGravity = 9.81;
inline constexpr double kLoopPeriodS = 0.015;

struct SquatProfile {
  int n_reps = 5;
  double trial_s = 10.0;
  double peak_flexion_deg = 120.0;
  double thigh_share = 0.6;
  double standing_s = 2.0;
  double rep_s = 1.5;   // one full descent-hold-ascent cycle
  double hold_s = 0.2;  // near-peak plateau inside each cycle
  // Sensor mounting misalignment, added to each segment's true tilt.
  double thigh_mount_deg = 3.0;
  double shank_mount_deg = -5.0;
  double dt_s = kLoopPeriodS;
  std::uint64_t rng_seed = 1;
};

struct NoiseModel {
  double accel_sigma = 0.2;  // m/s^2
  double gyro_sigma = 0.5;   // deg/s
  // deg/s; applied as +bias on the thigh gyro and -bias on the shank gyro so
  // the two errors add in the knee angle instead of cancelling.
  double gyro_bias = 0.5;
  double emg_baseline_counts = 120.0;
  double emg_noise_sigma_counts = 15.0;
  // Tangential acceleration artifact: lever arm (m) times segment angular
  // acceleration is added to ax. Zero keeps the accelerometer quasi-static.
  double linear_accel_lever_m = 0.0;

  static NoiseModel noiseless() {
    NoiseModel n;
    n.accel_sigma = n.gyro_sigma = n.gyro_bias = n.emg_noise_sigma_counts = 0.0;
    return n;
  }
};

// Burst gains in counts per deg/s of knee angular speed, split by phase.
struct EmgModel {
  double ch1_descent_gain = 18.0;
  double ch1_ascent_gain = 22.0;
  double ch2_descent_gain = 8.0;
  double ch2_ascent_gain = 6.0;
  double ceiling_counts = 1986.0;  // ~1.6 V at the ADC input
};

inline void validate(const SquatProfile& p) {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::Configuration, m); };
  if (p.n_reps < 0) fail("n_reps must be non-negative");
  if (!(p.dt_s > 0.0)) fail("dt_s must be positive");
  if (!(p.trial_s > 0.0)) fail("trial_s must be positive");
  if (!(p.thigh_share > 0.0 && p.thigh_share < 1.0)) fail("thigh_share must lie in (0, 1)");
  if (!(p.peak_flexion_deg > 0.0 && p.peak_flexion_deg < 180.0)) {
    fail("peak_flexion_deg must lie in (0, 180)");
  }
  if (p.standing_s < 0.0) fail("standing_s must be non-negative");
  if (!(p.rep_s > 0.0) || p.hold_s < 0.0 || p.hold_s >= p.rep_s) {
    fail("need rep_s > hold_s >= 0");
  }
  if (p.standing_s + p.n_reps * p.rep_s > p.trial_s + 1e-9) {
    fail("n_reps * rep_s does not fit in trial_s - standing_s");
  }
  if (std::abs(p.thigh_mount_deg) > 45.0 || std::abs(p.shank_mount_deg) > 45.0) {
    fail("mounting misalignment beyond 45 degrees");
  }
}

/// Loop iterations in a trial.
inline std::size_t tick_count(const SquatProfile& p) {
  return static_cast<std::size_t>(std::lround(p.trial_s / p.dt_s));
}

/// Ground-truth knee flexion at time t: raised-cosine descent, flat hold,
/// raised-cosine ascent, repeated n_reps times after the standing lead-in.
inline double knee_at(const SquatProfile& p, double t) {
  if (p.n_reps == 0 || t < p.standing_s) return 0.0;
  const double since = t - p.standing_s;
  const auto rep = static_cast<int>(std::floor(since / p.rep_s));
  if (rep >= p.n_reps) return 0.0;
  const double tau = since - rep * p.rep_s;
  const double ramp = (p.rep_s - p.hold_s) / 2.0;
  const double peak = p.peak_flexion_deg;
  if (tau < ramp) return peak * 0.5 * (1.0 - std::cos(std::numbers::pi * tau / ramp));
  if (tau < ramp + p.hold_s) return peak;
  const double up = tau - ramp - p.hold_s;
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * up / ramp));
}

struct Truth {
  std::vector<double> t;
  std::vector<double> knee_deg;
  std::vector<double> thigh_deg;  // segment tilts, mounting excluded
  std::vector<double> shank_deg;
};

/// Segment split: thigh tilts back by thigh_share of the knee angle, shank
/// forward by the rest, so shank - thigh equals the knee angle exactly.
inline Truth generate_truth(const SquatProfile& p) {
  validate(p);
  const std::size_t n = tick_count(p);
  Truth tr;
  tr.t.resize(n);
  tr.knee_deg.resize(n);
  tr.thigh_deg.resize(n);
  tr.shank_deg.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) * p.dt_s;
    const double knee = knee_at(p, t);
    tr.t[i] = t;
    tr.knee_deg[i] = knee;
    tr.thigh_deg[i] = -p.thigh_share * knee;
    tr.shank_deg[i] = tr.thigh_deg[i] + knee;
  }
  return tr;
}

struct ImuStreams {
  std::vector<fusion::ImuSample> thigh;
  std::vector<fusion::ImuSample> shank;
};

namespace detail {

inline std::vector<fusion::ImuSample> synthesize_segment(const std::vector<double>& angle_deg,
                                                         double mount_deg, double bias_dps,
                                                         double dt, const NoiseModel& noise,
                                                         std::mt19937_64& rng) {
  std::normal_distribution<double> unit(0.0, 1.0);
  const std::size_t n = angle_deg.size();
  std::vector<fusion::ImuSample> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double theta = (angle_deg[k] + mount_deg) * fusion::kDegToRad;
    // Backward difference: the rate a gyro integrates over the previous tick.
    const double rate = k == 0 ? 0.0 : (angle_deg[k] - angle_deg[k - 1]) / dt;
    double ang_acc_rad = 0.0;
    if (noise.linear_accel_lever_m != 0.0 && k >= 1 && k + 1 < n) {
      ang_acc_rad = (angle_deg[k + 1] - 2.0 * angle_deg[k] + angle_deg[k - 1]) / (dt * dt) *
                    fusion::kDegToRad;
    }
    fusion::ImuSample s;
    s.t = static_cast<double>(k) * dt;
    s.ax = kGravity * std::sin(theta) + noise.linear_accel_lever_m * ang_acc_rad +
           noise.accel_sigma * unit(rng);
    s.ay = noise.accel_sigma * unit(rng);
    s.az = kGravity * std::cos(theta) + noise.accel_sigma * unit(rng);
    s.gx = rate + bias_dps + noise.gyro_sigma * unit(rng);
    s.gy = noise.gyro_sigma * unit(rng);
    s.gz = noise.gyro_sigma * unit(rng);
    out[k] = s;
  }
  return out;
}

}  // namespace detail

inline ImuStreams synthesize_imu(const Truth& truth, const SquatProfile& p,
                                 const NoiseModel& noise, std::mt19937_64& rng) {
  if (noise.accel_sigma < 0.0 || noise.gyro_sigma < 0.0) {
    throw Error(ErrorCode::Configuration, "noise sigmas must be non-negative");
  }
  ImuStreams s;
  s.thigh = detail::synthesize_segment(truth.thigh_deg, p.thigh_mount_deg, noise.gyro_bias,
                                       p.dt_s, noise, rng);
  s.shank = detail::synthesize_segment(truth.shank_deg, p.shank_mount_deg, -noise.gyro_bias,
                                       p.dt_s, noise, rng);
  return s;
}

struct EmgStreams {
  std::vector<std::uint16_t> ch1;  // vastus lateralis
  std::vector<std::uint16_t> ch2;  // semitendinosus
};

/// Rectified-envelope-like raw ADC streams: baseline plus a burst
/// proportional to knee angular speed, capped at the ceiling, then noise.
inline EmgStreams synthesize_emg(const Truth& truth, double dt_s, const NoiseModel& noise,
                                 std::mt19937_64& rng, const EmgModel& model = {}) {
  if (noise.emg_noise_sigma_counts < 0.0 || noise.emg_baseline_counts < 0.0) {
    throw Error(ErrorCode::Configuration, "EMG baseline and noise must be non-negative");
  }
  std::normal_distribution<double> unit(0.0, 1.0);
  const auto& knee = truth.knee_deg;
  const std::size_t n = knee.size();
  EmgStreams out;
  out.ch1.resize(n);
  out.ch2.resize(n);
  auto to_counts = [](double v) {
    return static_cast<std::uint16_t>(std::clamp(std::round(v), 0.0, double{emg::kAdcMaxCounts}));
  };
  for (std::size_t k = 0; k < n; ++k) {
    double vel = 0.0;
    if (n >= 2) {
      const std::size_t lo = k == 0 ? 0 : k - 1;
      const std::size_t hi = k + 1 < n ? k + 1 : n - 1;
      vel = (knee[hi] - knee[lo]) / (static_cast<double>(hi - lo) * dt_s);
    }
    const bool descent = vel > 0.0;
    const double speed = std::abs(vel);
    const double g1 = descent ? model.ch1_descent_gain : model.ch1_ascent_gain;
    const double g2 = descent ? model.ch2_descent_gain : model.ch2_ascent_gain;
    const double ceiling = std::max(model.ceiling_counts, noise.emg_baseline_counts);
    const double e1 = std::min(noise.emg_baseline_counts + g1 * speed, ceiling);
    const double e2 = std::min(noise.emg_baseline_counts + g2 * speed, ceiling);
    const double n1 = noise.emg_noise_sigma_counts * unit(rng);
    const double n2 = noise.emg_noise_sigma_counts * unit(rng);
    out.ch1[k] = to_counts(e1 + n1);
    out.ch2[k] = to_counts(e2 + n2);
  }
  return out;
}

struct DeviceConfig {
  double alpha = 0.98;
  double alpha_emg = 0.2;
  double calibration_s = 2.0;
  bool calibrate = true;
  bool realtime = false;  // pace ticks against the wall clock
};

struct DeviceRun {
  protocol::LinkStats stats;
  Truth truth;
  std::vector<protocol::TelemetryPacket> packets;  // in send order
  std::vector<std::uint8_t> frames;                // every emitted frame, pre-loss
  bool aborted = false;
  std::string abort_reason;
};

/// Everything the device would transmit, without a link.
struct DeviceTrace {
  Truth truth;
  ImuStreams imu;
  EmgStreams emg_raw;
  std::vector<double> raw_knee_deg;  // fused, before calibration
  std::vector<protocol::TelemetryPacket> packets;
};

inline DeviceTrace simulate_device(const SquatProfile& p, const NoiseModel& noise,
                                   const DeviceConfig& cfg = {}, const EmgModel& emg_model = {}) {
  DeviceTrace tr;
  tr.truth = generate_truth(p);
  std::mt19937_64 imu_rng(p.rng_seed);
  std::mt19937_64 emg_rng(p.rng_seed ^ 0x9E3779B97F4A7C15ULL);
  tr.imu = synthesize_imu(tr.truth, p, noise, imu_rng);
  tr.emg_raw = synthesize_emg(tr.truth, p.dt_s, noise, emg_rng, emg_model);

  fusion::KneeAngleEstimator est(
      fusion::KneeAngleEstimator::Config{cfg.alpha, p.dt_s, cfg.calibration_s, cfg.calibrate});
  const std::size_t n = tr.truth.t.size();
  tr.raw_knee_deg.reserve(n);
  tr.packets.reserve(n);
  emg::EmgChannelState ch1, ch2;
  for (std::size_t k = 0; k < n; ++k) {
    const double knee = est.update(tr.imu.thigh[k], tr.imu.shank[k]);
    tr.raw_knee_deg.push_back(est.raw_angle());
    if (k == 0) {
      ch1 = emg::make_channel(emg::Channel::VastusLateralis, cfg.alpha_emg, tr.emg_raw.ch1[0]);
      ch2 = emg::make_channel(emg::Channel::Semitendinosus, cfg.alpha_emg, tr.emg_raw.ch2[0]);
    }
    ch1 = emg::emg_update(ch1, tr.emg_raw.ch1[k]);
    ch2 = emg::emg_update(ch2, tr.emg_raw.ch2[k]);
    protocol::TelemetryPacket pkt;
    pkt.knee_angle_deg = static_cast<float>(knee);
    pkt.emg1_counts = static_cast<std::uint16_t>(std::lround(ch1.envelope_counts));
    pkt.emg2_counts = static_cast<std::uint16_t>(std::lround(ch2.envelope_counts));
    tr.packets.push_back(pkt);
  }
  return tr;
}

/// Device loop: one frame per tick, sent over `sink`. Sequence numbers
/// start at 0 and wrap at 2^16.
inline DeviceRun run_device(const SquatProfile& p, const NoiseModel& noise,
                            transport::DatagramSink& sink, const DeviceConfig& cfg = {},
                            const EmgModel& emg_model = {}) {
  DeviceTrace trace = simulate_device(p, noise, cfg, emg_model);
  DeviceRun run;
  run.truth = std::move(trace.truth);
  run.packets = std::move(trace.packets);
  run.frames.reserve(run.packets.size() * protocol::kFrameSize);

  const auto start = std::chrono::steady_clock::now();
  const auto period = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
      std::chrono::duration<double>(p.dt_s));
  const auto before = sink.stats();
  for (std::size_t k = 0; k < run.packets.size(); ++k) {
    if (cfg.realtime) std::this_thread::sleep_until(start + period * static_cast<long>(k));
    const auto frame = protocol::encode_frame(static_cast<std::uint16_t>(k), run.packets[k]);
    run.frames.insert(run.frames.end(), frame.begin(), frame.end());
    try {
      sink.send(frame);
    } catch (const Error& e) {
      run.aborted = true;
      run.abort_reason = e.what();
      break;
    }
  }
  const auto after = sink.stats();
  run.stats.sent = after.sent - before.sent;
  run.stats.received = after.delivered - before.delivered;
  run.stats.dropped = after.dropped - before.dropped;
  const double elapsed =
      cfg.realtime ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()
                   : static_cast<double>(run.stats.sent) * p.dt_s;
  run.stats.observed_rate_hz = elapsed > 0.0 ? static_cast<double>(run.stats.received) / elapsed
                                             : 0.0;
  return run;
}

}  // namespace kneelink::sim

#endif  // KNEELINK_SIMULATOR_HPP
