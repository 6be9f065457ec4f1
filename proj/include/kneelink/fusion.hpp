#ifndef KNEELINK_FUSION_HPP
#define KNEELINK_FUSION_HPP

// Sagittal-plane knee kinematics from a thigh IMU and a shank IMU.
//
// Axis convention: ax points anterior, az runs along the segment (gravity
// reads +g on az when the segment is vertical), gx is the sagittal rate.
// Segment tilt is the atan2 of the two accelerometer components. Knee
// flexion is positive and equals the shank tilt minus the thigh tilt, less
// a standing calibration offset.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kneelink/error.hpp"

namespace kneelink::fusion {

inline constexpr double kRadToDeg = 180.0 / std::numbers::pi;
inline constexpr double kDegToRad = std::numbers::pi / 180.0;

struct ImuSample {
  double ax = 0.0, ay = 0.0, az = 0.0;  // m/s^2
  double gx = 0.0, gy = 0.0, gz = 0.0;  // deg/s
  double t = 0.0;                       // s since stream start

  bool finite() const noexcept {
    return std::isfinite(ax) && std::isfinite(ay) && std::isfinite(az) &&
           std::isfinite(gx) && std::isfinite(gy) && std::isfinite(gz) &&
           std::isfinite(t);
  }
};

enum class Segment { Thigh, Shank };

struct SegmentTilt {
  double angle_deg = 0.0;
  Segment segment = Segment::Thigh;
};

struct ComplementaryFilterState {
  double fused_angle_deg = 0.0;
  double alpha = 0.98;  // gyro weight
  double last_update_t = 0.0;
};

struct KneeState {
  double angle_deg = 0.0;
  double velocity_dps = 0.0;
  double accel_dps2 = 0.0;
  double t = 0.0;
};

struct CalibrationOffset {
  double offset_deg = 0.0;
  std::size_t n_samples = 0;
  double window_s = 0.0;
};

/// Wraps an angle in degrees into (-180, 180].
inline double wrap_deg(double deg) noexcept {
  double r = std::fmod(deg, 360.0);
  if (r <= -180.0) r += 360.0;
  if (r > 180.0) r -= 360.0;
  return r;
}

/// Segment tilt from the two sagittal accelerometer components.
inline double tilt_from_accel(double ax, double az) {
  if (!std::isfinite(ax) || !std::isfinite(az)) {
    throw Error(ErrorCode::Input, "tilt_from_accel: non-finite acceleration");
  }
  if (ax == 0.0 && az == 0.0) {
    throw Error(ErrorCode::DegenerateOrientation,
                "tilt_from_accel: gravity vector unobservable (ax = az = 0)");
  }
  return wrap_deg(std::atan2(ax, az) * kRadToDeg);
}

inline SegmentTilt tilt_from_accel(const ImuSample& s, Segment segment) {
  return SegmentTilt{tilt_from_accel(s.ax, s.az), segment};
}

inline void validate(const ComplementaryFilterState& s) {
  if (!(s.alpha >= 0.0 && s.alpha <= 1.0)) {
    throw Error(ErrorCode::Configuration, "complementary filter alpha outside [0, 1]");
  }
  if (!std::isfinite(s.fused_angle_deg) || !std::isfinite(s.last_update_t)) {
    throw Error(ErrorCode::Input, "complementary filter state is not finite");
  }
}

/// One complementary-filter step: alpha * (fused + rate * dt) + (1 - alpha) * tilt.
inline ComplementaryFilterState complementary_update(const ComplementaryFilterState& state,
                                                     double gyro_rate_dps,
                                                     double accel_tilt_deg, double dt) {
  validate(state);
  if (!std::isfinite(dt) || dt <= 0.0) {
    throw Error(ErrorCode::Timing, "complementary_update: dt must be positive");
  }
  if (!std::isfinite(gyro_rate_dps) || !std::isfinite(accel_tilt_deg)) {
    throw Error(ErrorCode::Input, "complementary_update: non-finite input");
  }
  ComplementaryFilterState next = state;
  const double integrated = state.fused_angle_deg + gyro_rate_dps * dt;
  next.fused_angle_deg =
      wrap_deg(state.alpha * integrated + (1.0 - state.alpha) * accel_tilt_deg);
  next.last_update_t = state.last_update_t + dt;
  return next;
}

inline double knee_angle(const SegmentTilt& shank, const SegmentTilt& thigh,
                         const CalibrationOffset& offset) {
  if (shank.segment != Segment::Shank || thigh.segment != Segment::Thigh) {
    throw Error(ErrorCode::Usage, "knee_angle: segment roles swapped");
  }
  return shank.angle_deg - thigh.angle_deg - offset.offset_deg;
}

/// Number of samples a calibration window of `window_s` seconds spans at `dt_s`.
inline std::size_t calibration_sample_count(double window_s, double dt_s) {
  if (!(window_s > 0.0) || !(dt_s > 0.0)) {
    throw Error(ErrorCode::Configuration, "calibration window and dt must be positive");
  }
  const auto n = static_cast<std::size_t>(std::floor(window_s / dt_s + 1e-9));
  return n == 0 ? 1 : n;
}

/// Mean of the raw (un-offset) knee angles over the first `window_s` seconds.
inline CalibrationOffset calibrate_offset(std::span<const double> raw_knee_deg, double window_s,
                                          double dt_s = 0.015) {
  const std::size_t n = calibration_sample_count(window_s, dt_s);
  if (raw_knee_deg.size() < n) {
    throw Error(ErrorCode::InsufficientData,
                "calibrate_offset: need " + std::to_string(n) + " samples, got " +
                    std::to_string(raw_knee_deg.size()));
  }
  // Mean as first sample plus mean deviation, exact for a constant series.
  const double ref = raw_knee_deg[0];
  double dev = 0.0;
  for (std::size_t i = 0; i < n; ++i) dev += raw_knee_deg[i] - ref;
  return CalibrationOffset{ref + dev / static_cast<double>(n), n, window_s};
}

struct DerivativeOptions {
  // Centered moving-average width applied to velocity and acceleration.
  // 1 disables smoothing; must be odd.
  std::size_t smoothing_width = 1;
};

namespace detail {

// First derivative: central differences inside, second-order one-sided at the ends.
inline std::vector<double> differentiate(std::span<const double> x, double dt) {
  const std::size_t n = x.size();
  std::vector<double> d(n);
  d[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * dt);
  for (std::size_t i = 1; i + 1 < n; ++i) d[i] = (x[i + 1] - x[i - 1]) / (2.0 * dt);
  d[n - 1] = (3.0 * x[n - 1] - 4.0 * x[n - 2] + x[n - 3]) / (2.0 * dt);
  return d;
}

inline std::vector<double> moving_average(const std::vector<double>& x, std::size_t width) {
  if (width <= 1) return x;
  const std::size_t half = width / 2;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(x.size() - 1, i + half);
    double s = 0.0;
    for (std::size_t j = lo; j <= hi; ++j) s += x[j];
    out[i] = s / static_cast<double>(hi - lo + 1);
  }
  return out;
}

}  // namespace detail

/// Velocity and acceleration for a uniformly sampled angle trace starting at t = 0.
inline std::vector<KneeState> derive_kinematics(std::span<const double> angles_deg, double dt,
                                                const DerivativeOptions& opts = {}) {
  if (angles_deg.size() < 3) {
    throw Error(ErrorCode::InsufficientData, "derive_kinematics: need at least 3 samples");
  }
  if (!std::isfinite(dt) || dt <= 0.0) {
    throw Error(ErrorCode::Timing, "derive_kinematics: dt must be positive");
  }
  if (opts.smoothing_width % 2 == 0) {
    throw Error(ErrorCode::Configuration, "derive_kinematics: smoothing width must be odd");
  }
  auto vel = detail::moving_average(detail::differentiate(angles_deg, dt), opts.smoothing_width);
  auto acc = detail::moving_average(detail::differentiate(vel, dt), opts.smoothing_width);

  std::vector<KneeState> out(angles_deg.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = KneeState{angles_deg[i], vel[i], acc[i], static_cast<double>(i) * dt};
  }
  return out;
}

/// Streaming two-segment estimator as run on the wearable: one complementary
/// filter per segment, knee differencing, and a standing calibration that
/// freezes after the configured window. Until then the running mean is used
/// as a provisional offset.
class KneeAngleEstimator {
 public:
  struct Config {
    double alpha = 0.98;
    double dt_s = 0.015;
    double calibration_s = 2.0;
    bool calibrate = true;
  };

  KneeAngleEstimator() : KneeAngleEstimator(Config{}) {}
  explicit KneeAngleEstimator(Config cfg)
      : cfg_(cfg), window_n_(calibration_sample_count(cfg.calibration_s, cfg.dt_s)) {
    thigh_.alpha = shank_.alpha = cfg_.alpha;
    validate(thigh_);
  }

  /// Feeds one synchronous pair of samples; returns the calibrated knee angle.
  double update(const ImuSample& thigh, const ImuSample& shank) {
    if (!thigh.finite() || !shank.finite()) {
      throw Error(ErrorCode::Input, "KneeAngleEstimator: non-finite IMU sample");
    }
    const double thigh_tilt = tilt_from_accel(thigh.ax, thigh.az);
    const double shank_tilt = tilt_from_accel(shank.ax, shank.az);
    if (!initialized_) {
      thigh_.fused_angle_deg = thigh_tilt;
      shank_.fused_angle_deg = shank_tilt;
      thigh_.last_update_t = thigh.t;
      shank_.last_update_t = shank.t;
      initialized_ = true;
    } else {
      // gx carries the sagittal rate; ay, gy and gz are not used.
      thigh_ = complementary_update(thigh_, thigh.gx, thigh_tilt, cfg_.dt_s);
      shank_ = complementary_update(shank_, shank.gx, shank_tilt, cfg_.dt_s);
    }

    raw_ = knee_angle(SegmentTilt{shank_.fused_angle_deg, Segment::Shank},
                      SegmentTilt{thigh_.fused_angle_deg, Segment::Thigh}, CalibrationOffset{});
    if (cfg_.calibrate && !offset_) {
      calib_.push_back(raw_);
      if (calib_.size() == window_n_) {
        offset_ = calibrate_offset(calib_, cfg_.calibration_s, cfg_.dt_s);
        calib_.clear();
        calib_.shrink_to_fit();
        return raw_ - offset_->offset_deg;
      }
      double sum = 0.0;
      for (double v : calib_) sum += v;
      return raw_ - sum / static_cast<double>(calib_.size());
    }
    return raw_ - (offset_ ? offset_->offset_deg : 0.0);
  }

  double raw_angle() const noexcept { return raw_; }
  const std::optional<CalibrationOffset>& offset() const noexcept { return offset_; }
  const ComplementaryFilterState& thigh_state() const noexcept { return thigh_; }
  const ComplementaryFilterState& shank_state() const noexcept { return shank_; }

 private:
  Config cfg_;
  std::size_t window_n_;
  ComplementaryFilterState thigh_{}, shank_{};
  bool initialized_ = false;
  double raw_ = 0.0;
  std::vector<double> calib_;
  std::optional<CalibrationOffset> offset_;
};

}  // namespace kneelink::fusion

#endif  // KNEELINK_FUSION_HPP
