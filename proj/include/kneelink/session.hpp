#ifndef KNEELINK_SESSION_HPP
#define KNEELINK_SESSION_HPP

// Host-side trial record: lifecycle, time reconstruction, repetition
// counting, summary metrics and CSV export with a JSON sidecar.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kneelink/emg.hpp"
#include "kneelink/error.hpp"
#include "kneelink/fusion.hpp"
#include "kneelink/protocol.hpp"

namespace kneelink::session {

enum class DominantLeg { Left, Right };

inline std::string to_string(DominantLeg leg) { return leg == DominantLeg::Left ? "left" : "right"; }

inline DominantLeg parse_leg(const std::string& s) {
  if (s == "left" || s == "Left" || s == "L") return DominantLeg::Left;
  if (s == "right" || s == "Right" || s == "R") return DominantLeg::Right;
  throw Error(ErrorCode::Input, "dominant_leg must be 'left' or 'right'");
}

struct SessionMetadata {
  std::string subject_id;
  std::string age_range;
  std::string sex;
  DominantLeg dominant_leg = DominantLeg::Right;
  std::string created_at;  // ISO-8601 UTC
};

inline std::string utc_now_iso8601() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  ::gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Subject ids double as directory names, so only [A-Za-z0-9_-] is allowed.
inline void validate(const SessionMetadata& m) {
  if (m.subject_id.empty()) throw Error(ErrorCode::Input, "subject_id must not be empty");
  for (char c : m.subject_id) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '_' || c == '-';
    if (!ok) throw Error(ErrorCode::Input, "subject_id may only contain [A-Za-z0-9_-]");
  }
  if (m.subject_id.size() > 64) throw Error(ErrorCode::Input, "subject_id longer than 64");
  if (m.age_range.size() > 32 || m.sex.size() > 32) {
    throw Error(ErrorCode::Input, "age_range and sex are short codes, not free text");
  }
}

enum class SessionState { Created, Calibrating, Recording, Stopped };

inline std::string to_string(SessionState s) {
  switch (s) {
    case SessionState::Created: return "created";
    case SessionState::Calibrating: return "calibrating";
    case SessionState::Recording: return "recording";
    case SessionState::Stopped: return "stopped";
  }
  return "unknown";
}

struct SessionSummary {
  std::size_t rep_count = 0;
  double rom_deg = 0.0;
  double peak_flexion_deg = 0.0;
  double peak_velocity_dps = 0.0;  // largest |velocity|
  double peak_accel_dps2 = 0.0;    // largest |acceleration|
  double emg1_peak_v = 0.0, emg1_mean_v = 0.0;
  double emg2_peak_v = 0.0, emg2_mean_v = 0.0;
};

struct SessionConfig {
  double dt_s = 0.015;
  double calibration_s = 2.0;
  double rep_high_deg = 60.0;
  double rep_low_deg = 20.0;
  // Move to Recording on our own once the calibration window is full.
  bool auto_record = false;
  fusion::DerivativeOptions derivatives{};
};

inline double reconstruct_time(std::size_t sample_index, double dt_s) {
  return static_cast<double>(sample_index) * dt_s;
}

struct RepSpan {
  std::size_t begin = 0;  // first sample at or above low on the way up
  std::size_t end = 0;    // first sample back below low

  friend bool operator==(const RepSpan&, const RepSpan&) = default;
};

struct RepDetection {
  std::size_t rep_count = 0;
  std::vector<RepSpan> spans;
};

/// Hysteresis counter: a rep is armed when the angle goes above `high_deg`
/// and completes when it next drops below `low_deg`.
inline RepDetection detect_repetitions(std::span<const double> angles, double high_deg,
                                       double low_deg) {
  if (!(high_deg > low_deg)) {
    throw Error(ErrorCode::Configuration, "rep detection needs high threshold > low threshold");
  }
  if (angles.empty()) throw Error(ErrorCode::InsufficientData, "rep detection on empty series");
  RepDetection out;
  bool up = false;
  std::size_t rise = 0;
  for (std::size_t i = 0; i < angles.size(); ++i) {
    const double a = angles[i];
    if (a >= low_deg && (i == 0 || angles[i - 1] < low_deg)) rise = i;
    if (!up && a > high_deg) {
      up = true;
    } else if (up && a < low_deg) {
      up = false;
      out.spans.push_back(RepSpan{rise, i});
    }
  }
  out.rep_count = out.spans.size();
  return out;
}

struct Sample {
  std::uint16_t seq = 0;
  protocol::TelemetryPacket packet;
  double angle_deg = 0.0;  // packet angle less the host offset, if frozen
  bool suspect = false;
};

class SessionRecord {
 public:
  explicit SessionRecord(SessionMetadata metadata, SessionConfig cfg = {})
      : meta_(std::move(metadata)), cfg_(cfg) {
    validate(meta_);
    if (!(cfg_.dt_s > 0.0)) throw Error(ErrorCode::Configuration, "dt_s must be positive");
    if (!(cfg_.rep_high_deg > cfg_.rep_low_deg)) {
      throw Error(ErrorCode::Configuration, "rep_high_deg must exceed rep_low_deg");
    }
    calib_n_ = fusion::calibration_sample_count(cfg_.calibration_s, cfg_.dt_s);
    if (meta_.created_at.empty()) meta_.created_at = utc_now_iso8601();
  }

  SessionState state() const noexcept { return state_; }
  const SessionMetadata& metadata() const noexcept { return meta_; }
  const SessionConfig& config() const noexcept { return cfg_; }
  const std::vector<Sample>& samples() const noexcept { return samples_; }
  const std::optional<fusion::CalibrationOffset>& offset() const noexcept { return offset_; }
  std::size_t suspect_count() const noexcept { return suspect_; }

  /// Causal (backward-difference) kinematics while live; central after stop().
  const std::vector<fusion::KneeState>& derived() const noexcept { return derived_; }

  void start_calibration() {
    require(SessionState::Created, "start_calibration");
    state_ = SessionState::Calibrating;
  }

  /// Freezes the offset over the first calibration window, then records.
  void start_recording() {
    require(SessionState::Calibrating, "start_recording");
    std::vector<double> raw;
    raw.reserve(samples_.size());
    for (const auto& s : samples_) raw.push_back(s.packet.knee_angle_deg);
    offset_ = fusion::calibrate_offset(raw, cfg_.calibration_s, cfg_.dt_s);
    state_ = SessionState::Recording;
  }

  void stop() {
    require(SessionState::Recording, "stop");
    state_ = SessionState::Stopped;
    if (samples_.size() >= 3) {
      std::vector<double> angles;
      angles.reserve(samples_.size());
      for (const auto& s : samples_) angles.push_back(s.angle_deg);
      derived_ = fusion::derive_kinematics(angles, cfg_.dt_s, cfg_.derivatives);
    }
  }

  /// Adds one received packet and returns its live kinematic state.
  fusion::KneeState append(std::uint16_t seq, const protocol::TelemetryPacket& pkt) {
    if (state_ != SessionState::Calibrating && state_ != SessionState::Recording) {
      throw Error(ErrorCode::State, "append: session is " + to_string(state_));
    }
    Sample s;
    s.seq = seq;
    s.packet = pkt;
    s.suspect = !protocol::conforming(pkt);
    double angle = pkt.knee_angle_deg;
    if (!std::isfinite(angle)) {
      // Hold the last good value so derivatives stay finite.
      angle = samples_.empty() ? 0.0 : samples_.back().packet.knee_angle_deg;
      s.packet.knee_angle_deg = static_cast<float>(angle);
    }
    s.angle_deg = state_ == SessionState::Recording ? angle - offset_->offset_deg : angle;
    if (s.suspect) ++suspect_;

    fusion::KneeState ks;
    ks.t = reconstruct_time(samples_.size(), cfg_.dt_s);
    ks.angle_deg = s.angle_deg;
    if (!derived_.empty()) {
      const auto& prev = derived_.back();
      ks.velocity_dps = (ks.angle_deg - prev.angle_deg) / cfg_.dt_s;
      ks.accel_dps2 = derived_.size() >= 2 ? (ks.velocity_dps - prev.velocity_dps) / cfg_.dt_s : 0.0;
    }
    samples_.push_back(s);
    derived_.push_back(ks);

    if (cfg_.auto_record && state_ == SessionState::Calibrating && samples_.size() >= calib_n_) {
      start_recording();
    }
    return ks;
  }

  SessionSummary summarize() const {
    require(SessionState::Stopped, "summarize");
    if (samples_.size() < 3) {
      throw Error(ErrorCode::InsufficientData, "summarize: need at least 3 samples");
    }
    SessionSummary s;
    std::vector<double> angles;
    angles.reserve(derived_.size());
    double vmax = 0.0, amax = 0.0;
    for (const auto& k : derived_) {
      angles.push_back(k.angle_deg);
      vmax = std::max(vmax, std::abs(k.velocity_dps));
      amax = std::max(amax, std::abs(k.accel_dps2));
    }
    const auto [lo, hi] = std::minmax_element(angles.begin(), angles.end());
    s.peak_flexion_deg = *hi;
    s.rom_deg = *hi - *lo;
    s.peak_velocity_dps = vmax;
    s.peak_accel_dps2 = amax;
    s.rep_count = detect_repetitions(angles, cfg_.rep_high_deg, cfg_.rep_low_deg).rep_count;

    // Packets already carry the device envelope; accumulate without re-smoothing.
    auto ch1 = emg::make_channel(emg::Channel::VastusLateralis, 1.0);
    auto ch2 = emg::make_channel(emg::Channel::Semitendinosus, 1.0);
    for (const auto& smp : samples_) {
      ch1 = emg::emg_update(ch1, std::min<int>(smp.packet.emg1_counts, emg::kAdcMaxCounts));
      ch2 = emg::emg_update(ch2, std::min<int>(smp.packet.emg2_counts, emg::kAdcMaxCounts));
    }
    const auto e1 = emg::channel_summary(ch1);
    const auto e2 = emg::channel_summary(ch2);
    s.emg1_peak_v = e1.peak_volts;
    s.emg1_mean_v = e1.mean_volts;
    s.emg2_peak_v = e2.peak_volts;
    s.emg2_mean_v = e2.mean_volts;
    return s;
  }

 private:
  void require(SessionState expected, const char* op) const {
    if (state_ != expected) {
      throw Error(ErrorCode::State, std::string(op) + ": session is " + to_string(state_) +
                                        ", expected " + to_string(expected));
    }
  }

  SessionMetadata meta_;
  SessionConfig cfg_;
  std::size_t calib_n_ = 1;
  SessionState state_ = SessionState::Created;
  std::vector<Sample> samples_;
  std::vector<fusion::KneeState> derived_;
  std::optional<fusion::CalibrationOffset> offset_;
  std::size_t suspect_ = 0;
};

// ---- JSON ---------------------------------------------------------------

inline nlohmann::json to_json(const SessionMetadata& m) {
  return {{"subject_id", m.subject_id},
          {"age_range", m.age_range},
          {"sex", m.sex},
          {"dominant_leg", to_string(m.dominant_leg)},
          {"created_at", m.created_at}};
}

inline SessionMetadata metadata_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::Input, "metadata must be a JSON object");
  SessionMetadata m;
  try {
    m.subject_id = j.value("subject_id", "");
    m.age_range = j.value("age_range", "");
    m.sex = j.value("sex", "");
    m.dominant_leg = parse_leg(j.value("dominant_leg", "right"));
    m.created_at = j.value("created_at", "");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Input, std::string("bad metadata: ") + e.what());
  }
  validate(m);
  return m;
}

inline nlohmann::json to_json(const SessionSummary& s) {
  return {{"rep_count", s.rep_count},
          {"rom_deg", s.rom_deg},
          {"peak_flexion_deg", s.peak_flexion_deg},
          {"peak_velocity_dps", s.peak_velocity_dps},
          {"peak_accel_dps2", s.peak_accel_dps2},
          {"emg1_peak_v", s.emg1_peak_v},
          {"emg1_mean_v", s.emg1_mean_v},
          {"emg2_peak_v", s.emg2_peak_v},
          {"emg2_mean_v", s.emg2_mean_v}};
}

inline SessionSummary summary_from_json(const nlohmann::json& j) {
  SessionSummary s;
  s.rep_count = j.at("rep_count").get<std::size_t>();
  s.rom_deg = j.at("rom_deg").get<double>();
  s.peak_flexion_deg = j.at("peak_flexion_deg").get<double>();
  s.peak_velocity_dps = j.at("peak_velocity_dps").get<double>();
  s.peak_accel_dps2 = j.at("peak_accel_dps2").get<double>();
  s.emg1_peak_v = j.at("emg1_peak_v").get<double>();
  s.emg1_mean_v = j.at("emg1_mean_v").get<double>();
  s.emg2_peak_v = j.at("emg2_peak_v").get<double>();
  s.emg2_mean_v = j.at("emg2_mean_v").get<double>();
  return s;
}

// ---- CSV ----------------------------------------------------------------

inline constexpr const char* kCsvHeader =
    "t_s,knee_angle_deg,knee_vel_dps,knee_acc_dps2,emg1_counts,emg2_counts,seq";

/// Six significant digits, '.' decimal separator regardless of locale.
inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  std::string s(buf);
  std::replace(s.begin(), s.end(), ',', '.');
  return s;
}

struct ExportResult {
  std::filesystem::path csv_path;
  std::filesystem::path metadata_path;
  std::size_t rows = 0;
};

/// Writes `csv_path` and a sidecar `<stem>.json` next to it. Refuses to
/// overwrite either file.
inline ExportResult export_csv(const SessionRecord& record, const std::filesystem::path& csv_path) {
  if (record.state() != SessionState::Stopped) {
    throw Error(ErrorCode::State, "export_csv: session is " + to_string(record.state()));
  }
  validate(record.metadata());
  const SessionSummary summary = record.summarize();

  ExportResult res;
  res.csv_path = csv_path;
  res.metadata_path = std::filesystem::path(csv_path).replace_extension(".json");
  std::error_code ec;
  if (std::filesystem::exists(res.csv_path, ec) || std::filesystem::exists(res.metadata_path, ec)) {
    throw Error(ErrorCode::Export, "export_csv: refusing to overwrite " + res.csv_path.string());
  }
  if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path(), ec);

  {
    std::ofstream out(res.csv_path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Export, "cannot open " + res.csv_path.string());
    out << kCsvHeader << '\n';
    const auto& samples = record.samples();
    const auto& derived = record.derived();
    for (std::size_t i = 0; i < samples.size(); ++i) {
      out << format_real(derived[i].t) << ',' << format_real(derived[i].angle_deg) << ','
          << format_real(derived[i].velocity_dps) << ',' << format_real(derived[i].accel_dps2)
          << ',' << samples[i].packet.emg1_counts << ',' << samples[i].packet.emg2_counts << ','
          << samples[i].seq << '\n';
    }
    res.rows = samples.size();
    if (!out.flush()) throw Error(ErrorCode::Export, "write failed: " + res.csv_path.string());
  }

  nlohmann::json side;
  side["metadata"] = to_json(record.metadata());
  side["summary"] = to_json(summary);
  side["dt_s"] = record.config().dt_s;
  side["packet_count"] = record.samples().size();
  side["suspect_count"] = record.suspect_count();
  side["calibration_offset_deg"] = record.offset() ? record.offset()->offset_deg : 0.0;
  side["rep_high_deg"] = record.config().rep_high_deg;
  side["rep_low_deg"] = record.config().rep_low_deg;
  side["csv"] = res.csv_path.filename().string();
  std::ofstream meta(res.metadata_path, std::ios::binary);
  if (!meta) throw Error(ErrorCode::Export, "cannot open " + res.metadata_path.string());
  meta << side.dump(2) << '\n';
  if (!meta.flush()) throw Error(ErrorCode::Export, "write failed: " + res.metadata_path.string());
  return res;
}

/// One CSV+sidecar pair per trial under `<root>/<subject_id>/`; never overwrites.
class TrialStore {
 public:
  explicit TrialStore(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const noexcept { return root_; }

  std::filesystem::path next_trial_path(const std::string& subject_id) const {
    const auto dir = root_ / subject_id;
    for (int i = 1; i < 100000; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "trial_%03d.csv", i);
      const auto p = dir / name;
      if (!std::filesystem::exists(p) &&
          !std::filesystem::exists(std::filesystem::path(p).replace_extension(".json"))) {
        return p;
      }
    }
    throw Error(ErrorCode::Export, "no free trial slot for " + subject_id);
  }

  ExportResult save(const SessionRecord& record) const {
    validate(record.metadata());
    return export_csv(record, next_trial_path(record.metadata().subject_id));
  }

 private:
  std::filesystem::path root_;
};

struct CsvTrial {
  std::vector<double> t_s, knee_angle_deg, knee_vel_dps, knee_acc_dps2;
  std::vector<int> emg1_counts, emg2_counts;
  std::vector<std::uint16_t> seq;

  std::size_t size() const noexcept { return t_s.size(); }
};

inline CsvTrial read_trial_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Input, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw Error(ErrorCode::Input, "unexpected CSV header in " + path.string());
  }
  CsvTrial out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) {
      throw Error(ErrorCode::Input, path.string() + ":" + std::to_string(lineno) + ": need 7 fields");
    }
    try {
      out.t_s.push_back(std::stod(f[0]));
      out.knee_angle_deg.push_back(std::stod(f[1]));
      out.knee_vel_dps.push_back(std::stod(f[2]));
      out.knee_acc_dps2.push_back(std::stod(f[3]));
      out.emg1_counts.push_back(std::stoi(f[4]));
      out.emg2_counts.push_back(std::stoi(f[5]));
      out.seq.push_back(static_cast<std::uint16_t>(std::stoul(f[6])));
    } catch (const std::exception&) {
      throw Error(ErrorCode::Input, path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  return out;
}

}  // namespace kneelink::session

#endif  // KNEELINK_SESSION_HPP
