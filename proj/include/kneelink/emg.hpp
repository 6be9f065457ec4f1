#ifndef KNEELINK_EMG_HPP
#define KNEELINK_EMG_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string_view>

#include "kneelink/error.hpp"

namespace kneelink::emg {

// 12-bit converter over a 3.3 V range.
inline constexpr int kAdcMaxCounts = 4095;
inline constexpr double kAdcFullScaleV = 3.3;

enum class Channel { VastusLateralis, Semitendinosus };

inline std::string_view to_string(Channel c) noexcept {
  return c == Channel::VastusLateralis ? "vastus_lateralis" : "semitendinosus";
}

inline double counts_to_volts(double counts) {
  if (!(counts >= 0.0 && counts <= kAdcMaxCounts)) {
    throw Error(ErrorCode::Input, "counts_to_volts: counts outside [0, 4095]");
  }
  return counts * kAdcFullScaleV / kAdcMaxCounts;
}

/// Nearest ADC code for a voltage, clamped to the converter range.
inline std::uint16_t volts_to_counts(double volts) {
  const double c = std::round(volts * kAdcMaxCounts / kAdcFullScaleV);
  return static_cast<std::uint16_t>(std::clamp(c, 0.0, double{kAdcMaxCounts}));
}

struct ChannelSummary {
  double peak_volts = 0.0;
  double mean_volts = 0.0;
};

/// First-order IIR envelope of one channel plus running peak and mean of
/// the smoothed output.
struct EmgChannelState {
  Channel channel = Channel::VastusLateralis;
  double envelope_counts = 0.0;
  double alpha_emg = 0.2;
  double peak_counts = 0.0;
  double sum_counts = 0.0;
  std::uint64_t n = 0;

  double mean_counts() const noexcept { return n ? sum_counts / static_cast<double>(n) : 0.0; }
};

inline EmgChannelState make_channel(Channel channel, double alpha_emg = 0.2,
                                    double initial_envelope = 0.0) {
  if (!(alpha_emg > 0.0 && alpha_emg <= 1.0)) {
    throw Error(ErrorCode::Configuration, "EMG smoothing coefficient must lie in (0, 1]");
  }
  EmgChannelState s;
  s.channel = channel;
  s.alpha_emg = alpha_emg;
  s.envelope_counts = initial_envelope;
  return s;
}

inline EmgChannelState emg_update(const EmgChannelState& state, int raw_counts) {
  if (raw_counts < 0 || raw_counts > kAdcMaxCounts) {
    throw Error(ErrorCode::Input, "emg_update: raw sample outside ADC range");
  }
  if (!(state.alpha_emg > 0.0 && state.alpha_emg <= 1.0)) {
    throw Error(ErrorCode::Configuration, "EMG smoothing coefficient must lie in (0, 1]");
  }
  EmgChannelState next = state;
  next.envelope_counts += state.alpha_emg * (raw_counts - state.envelope_counts);
  next.peak_counts = state.n == 0 ? next.envelope_counts
                                  : std::max(state.peak_counts, next.envelope_counts);
  next.sum_counts += next.envelope_counts;
  ++next.n;
  return next;
}

inline ChannelSummary channel_summary(const EmgChannelState& state) {
  if (state.n == 0) {
    throw Error(ErrorCode::InsufficientData, "channel_summary: no samples");
  }
  return ChannelSummary{counts_to_volts(state.peak_counts), counts_to_volts(state.mean_counts())};
}

/// Samples needed for a step response to reach 1 - 1/e of its final value.
inline double time_constant_samples(double alpha_emg) { return -1.0 / std::log(1.0 - alpha_emg); }

}  // namespace kneelink::emg

#endif  // KNEELINK_EMG_HPP
