#ifndef KNEELINK_SERVICE_HPP
#define KNEELINK_SERVICE_HPP

// Ingestion service: receives frames, drives the live session and fans out
// one LiveFeedEvent per valid frame. A single loop thread owns every
// session; control calls are posted to it as tasks and awaited.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "kneelink/emg.hpp"
#include "kneelink/error.hpp"
#include "kneelink/protocol.hpp"
#include "kneelink/session.hpp"
#include "kneelink/transport.hpp"

namespace kneelink::service {

struct LiveFeedEvent {
  std::uint16_t seq = 0;
  double t_s = 0.0;
  double knee_angle_deg = 0.0;
  double knee_vel_dps = 0.0;
  double knee_acc_dps2 = 0.0;
  double emg1_v = 0.0;
  double emg2_v = 0.0;
  std::string session_id;

  friend bool operator==(const LiveFeedEvent&, const LiveFeedEvent&) = default;
};

inline nlohmann::json to_json(const LiveFeedEvent& e) {
  return {{"seq", e.seq},
          {"t_s", e.t_s},
          {"knee_angle_deg", e.knee_angle_deg},
          {"knee_vel_dps", e.knee_vel_dps},
          {"knee_acc_dps2", e.knee_acc_dps2},
          {"emg1_v", e.emg1_v},
          {"emg2_v", e.emg2_v},
          {"session_id", e.session_id}};
}

/// Bounded per-subscriber queue. On overflow the oldest event is discarded
/// and counted.
class Subscription {
 public:
  explicit Subscription(std::size_t capacity) : capacity_(capacity ? capacity : 1) {}

  void push(const LiveFeedEvent& e) {
    {
      std::lock_guard lock(mu_);
      if (closed_) return;
      if (queue_.size() == capacity_) {
        queue_.pop_front();
        ++dropped_;
      }
      queue_.push_back(e);
    }
    cv_.notify_one();
  }

  std::optional<LiveFeedEvent> pop(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    if (!cv_.wait_for(lock, timeout, [&] { return !queue_.empty() || closed_; })) {
      return std::nullopt;
    }
    if (queue_.empty()) return std::nullopt;
    LiveFeedEvent e = std::move(queue_.front());
    queue_.pop_front();
    return e;
  }

  std::uint64_t dropped() const {
    std::lock_guard lock(mu_);
    return dropped_;
  }

  std::size_t pending() const {
    std::lock_guard lock(mu_);
    return queue_.size();
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  bool closed() const {
    std::lock_guard lock(mu_);
    return closed_;
  }

 private:
  const std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<LiveFeedEvent> queue_;
  std::uint64_t dropped_ = 0;
  bool closed_ = false;
};

class LiveFeedHub {
 public:
  std::shared_ptr<Subscription> subscribe(std::size_t capacity) {
    auto sub = std::make_shared<Subscription>(capacity);
    std::lock_guard lock(mu_);
    subs_.push_back(sub);
    return sub;
  }

  void publish(const LiveFeedEvent& e) {
    std::lock_guard lock(mu_);
    prune();
    for (const auto& w : subs_) {
      if (auto s = w.lock()) s->push(e);
    }
  }

  void close_all() {
    std::lock_guard lock(mu_);
    for (const auto& w : subs_) {
      if (auto s = w.lock()) s->close();
    }
    subs_.clear();
  }

  std::size_t subscriber_count() {
    std::lock_guard lock(mu_);
    prune();
    return subs_.size();
  }

 private:
  void prune() {
    std::erase_if(subs_, [](const auto& w) {
      auto s = w.lock();
      return !s || s->closed();
    });
  }

  std::mutex mu_;
  std::vector<std::weak_ptr<Subscription>> subs_;
};

struct SessionInfo {
  std::string session_id;
  session::SessionState state = session::SessionState::Created;
  std::size_t packet_count = 0;
  session::SessionMetadata metadata;
  std::optional<double> calibration_offset_deg;
};

inline nlohmann::json to_json(const SessionInfo& s) {
  nlohmann::json j{{"session_id", s.session_id},
                   {"state", session::to_string(s.state)},
                   {"packet_count", s.packet_count},
                   {"metadata", session::to_json(s.metadata)}};
  j["calibration_offset_deg"] =
      s.calibration_offset_deg ? nlohmann::json(*s.calibration_offset_deg) : nlohmann::json();
  return j;
}

struct ServiceStats {
  protocol::LinkStats link;
  std::uint64_t events = 0;
  std::uint64_t orphaned = 0;
  std::uint64_t datagrams = 0;
};

inline nlohmann::json to_json(const ServiceStats& s) {
  return {{"received", s.link.received},
          {"dropped", s.link.dropped},
          {"crc_failures", s.link.crc_failures},
          {"observed_rate_hz", s.link.observed_rate_hz},
          {"events", s.events},
          {"orphaned", s.orphaned},
          {"datagrams", s.datagrams}};
}

struct ServiceConfig {
  std::filesystem::path data_dir = "data";
  session::SessionConfig session{};
  std::size_t subscriber_capacity = 4096;
  std::chrono::milliseconds poll_interval{2};
};

class IngestService {
 public:
  /// `source` may be null; frames then arrive only through ingest_bytes().
  explicit IngestService(ServiceConfig cfg, transport::DatagramSource* source = nullptr)
      : cfg_(std::move(cfg)), source_(source), store_(cfg_.data_dir) {
    loop_ = std::thread([this] { run(); });
  }

  IngestService(const IngestService&) = delete;
  IngestService& operator=(const IngestService&) = delete;

  ~IngestService() { shutdown(); }

  void shutdown() {
    if (stopping_.exchange(true)) return;
    tasks_cv_.notify_all();
    if (loop_.joinable()) loop_.join();
    hub_.close_all();
  }

  // ---- control API ------------------------------------------------------

  SessionInfo create_session(session::SessionMetadata meta, std::optional<bool> auto_record = {}) {
    return call([this, meta = std::move(meta), auto_record]() mutable {
      session::SessionConfig sc = cfg_.session;
      if (auto_record) sc.auto_record = *auto_record;
      const std::string id = meta.subject_id + "-" + std::to_string(++session_counter_);
      auto [it, ok] = sessions_.emplace(id, Entry{session::SessionRecord(std::move(meta), sc), {}});
      return info(it->first, it->second);
    });
  }

  SessionInfo start_calibration(const std::string& id) {
    return call([this, id] {
      auto& e = find(id);
      if (active_ && *active_ != id) {
        throw Error(ErrorCode::State, "session " + *active_ + " is already live");
      }
      e.record.start_calibration();
      active_ = id;
      return info(id, e);
    });
  }

  SessionInfo start_recording(const std::string& id) {
    return call([this, id] {
      auto& e = find(id);
      e.record.start_recording();
      return info(id, e);
    });
  }

  SessionInfo stop(const std::string& id) {
    return call([this, id] {
      auto& e = find(id);
      e.record.stop();
      if (active_ == id) active_.reset();
      return info(id, e);
    });
  }

  SessionInfo get_session(const std::string& id) {
    return call([this, id] { return info(id, find(id)); });
  }

  std::vector<SessionInfo> list_sessions() {
    return call([this] {
      std::vector<SessionInfo> out;
      for (auto& [id, e] : sessions_) out.push_back(info(id, e));
      return out;
    });
  }

  session::SessionSummary get_summary(const std::string& id) {
    return call([this, id] { return find(id).record.summarize(); });
  }

  /// Saves the trial under data_dir; repeated calls return the first export.
  session::ExportResult export_session(const std::string& id) {
    return call([this, id] {
      auto& e = find(id);
      if (!e.exported) e.exported = store_.save(e.record);
      return *e.exported;
    });
  }

  /// Copy of a session's record, for inspection once it is stopped.
  session::SessionRecord snapshot(const std::string& id) {
    return call([this, id] { return find(id).record; });
  }

  std::shared_ptr<Subscription> live_subscribe(std::size_t capacity = 0) {
    return hub_.subscribe(capacity ? capacity : cfg_.subscriber_capacity);
  }

  std::size_t live_subscriber_count() { return hub_.subscriber_count(); }

  ServiceStats stats() {
    return call([this] {
      ServiceStats s = counters_;
      s.link = parser_.totals();
      if (first_frame_ && s.link.received > 1) {
        const double el =
            std::chrono::duration<double>(last_frame_ - *first_frame_).count();
        s.link.observed_rate_hz = el > 0.0 ? static_cast<double>(s.link.received - 1) / el : 0.0;
      }
      return s;
    });
  }

  /// Feeds raw frame-stream bytes (e.g. a dump file) through the same path
  /// datagrams take.
  void ingest_bytes(std::vector<std::uint8_t> bytes) {
    call([this, b = std::move(bytes)] {
      process(b);
      return 0;
    });
  }

  /// Waits until every previously posted task has run.
  void flush() {
    call([] { return 0; });
  }

  const ServiceConfig& config() const noexcept { return cfg_; }

 private:
  struct Entry {
    session::SessionRecord record;
    std::optional<session::ExportResult> exported;
  };

  template <class F>
  auto call(F&& f) -> decltype(f()) {
    using R = decltype(f());
    auto task = std::make_shared<std::packaged_task<R()>>(std::forward<F>(f));
    auto fut = task->get_future();
    {
      std::lock_guard lock(tasks_mu_);
      if (stopping_) throw Error(ErrorCode::Shutdown, "service is shutting down");
      tasks_.emplace_back([task] { (*task)(); });
    }
    tasks_cv_.notify_one();
    return fut.get();
  }

  Entry& find(const std::string& id) {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw Error(ErrorCode::NotFound, "no session '" + id + "'");
    return it->second;
  }

  static SessionInfo info(const std::string& id, const Entry& e) {
    SessionInfo s;
    s.session_id = id;
    s.state = e.record.state();
    s.packet_count = e.record.samples().size();
    s.metadata = e.record.metadata();
    if (e.record.offset()) s.calibration_offset_deg = e.record.offset()->offset_deg;
    return s;
  }

  void process(std::span<const std::uint8_t> bytes) {
    const auto frames = parser_.feed(bytes);
    parser_.take_stats();
    for (const auto& f : frames) {
      const auto now = std::chrono::steady_clock::now();
      if (!first_frame_) first_frame_ = now;
      last_frame_ = now;
      if (!active_) {
        ++counters_.orphaned;
        continue;
      }
      auto& rec = sessions_.at(*active_).record;
      const auto ks = rec.append(f.seq, f.packet);
      const auto& stored = rec.samples().back().packet;
      LiveFeedEvent ev;
      ev.seq = f.seq;
      ev.t_s = ks.t;
      ev.knee_angle_deg = ks.angle_deg;
      ev.knee_vel_dps = ks.velocity_dps;
      ev.knee_acc_dps2 = ks.accel_dps2;
      ev.emg1_v = emg::counts_to_volts(std::min<int>(stored.emg1_counts, emg::kAdcMaxCounts));
      ev.emg2_v = emg::counts_to_volts(std::min<int>(stored.emg2_counts, emg::kAdcMaxCounts));
      ev.session_id = *active_;
      ++counters_.events;
      hub_.publish(ev);
    }
  }

  void drain_tasks() {
    std::deque<std::function<void()>> batch;
    {
      std::lock_guard lock(tasks_mu_);
      batch.swap(tasks_);
    }
    for (auto& t : batch) t();
  }

  void run() {
    while (true) {
      drain_tasks();
      if (stopping_) break;
      if (source_) {
        try {
          // Drain whatever is queued before servicing control calls again.
          for (int i = 0; i < 256; ++i) {
            auto d = source_->recv(i == 0 ? cfg_.poll_interval : std::chrono::milliseconds{0});
            if (!d) break;
            ++counters_.datagrams;
            process(*d);
          }
        } catch (const Error& e) {
          if (e.code() != ErrorCode::Shutdown) throw;
          source_ = nullptr;
        }
      } else {
        std::unique_lock lock(tasks_mu_);
        tasks_cv_.wait(lock, [&] { return !tasks_.empty() || stopping_.load(); });
      }
    }
    drain_tasks();
  }

  ServiceConfig cfg_;
  transport::DatagramSource* source_;
  session::TrialStore store_;

  // Owned by the loop thread.
  std::map<std::string, Entry> sessions_;
  std::optional<std::string> active_;
  std::uint64_t session_counter_ = 0;
  protocol::FrameParser parser_;
  ServiceStats counters_;
  std::optional<std::chrono::steady_clock::time_point> first_frame_;
  std::chrono::steady_clock::time_point last_frame_{};

  LiveFeedHub hub_;
  std::mutex tasks_mu_;
  std::condition_variable tasks_cv_;
  std::deque<std::function<void()>> tasks_;
  std::atomic<bool> stopping_{false};
  std::thread loop_;
};

}  // namespace kneelink::service

#endif  // KNEELINK_SERVICE_HPP
