#ifndef KNEELINK_HTTP_API_HPP
#define KNEELINK_HTTP_API_HPP

// JSON control plane and server-sent-events live feed over local HTTP.
//
//   POST /api/sessions                     create (body: SessionMetadata [+ auto_record])
//   GET  /api/sessions                     list
//   GET  /api/sessions/{id}                state
//   POST /api/sessions/{id}/calibrate
//   POST /api/sessions/{id}/record
//   POST /api/sessions/{id}/stop
//   GET  /api/sessions/{id}/summary
//   POST /api/sessions/{id}/export
//   GET  /api/stats
//   GET  /api/live                         text/event-stream, one LiveFeedEvent per message
//
// Errors: {"error": {"code": "<machine code>", "message": "..."}}.

#include <chrono>
#include <memory>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "kneelink/error.hpp"
#include "kneelink/service.hpp"

namespace kneelink::service {

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::State: return 409;
    case ErrorCode::NotFound: return 404;
    case ErrorCode::InsufficientData: return 422;
    case ErrorCode::Export:
    case ErrorCode::Shutdown: return 500;
    default: return 400;
  }
}

class HttpApi {
 public:
  explicit HttpApi(IngestService& svc) : svc_(svc) { routes(); }

  HttpApi(const HttpApi&) = delete;
  HttpApi& operator=(const HttpApi&) = delete;

  ~HttpApi() { stop(); }

  /// Binds and serves on a background thread; port 0 picks a free port.
  int start(const std::string& host, int port) {
    bound_port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound_port_ < 0) {
      throw Error(ErrorCode::Configuration, "cannot bind HTTP " + host + ":" + std::to_string(port));
    }
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound_port_;
  }

  void stop() {
    closing_ = true;
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const noexcept { return bound_port_; }

 private:
  static void reply(httplib::Response& res, const nlohmann::json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void reply_error(httplib::Response& res, ErrorCode code, const std::string& msg) {
    reply(res, {{"error", {{"code", std::string(to_string(code))}, {"message", msg}}}},
          http_status(code));
  }

  template <class F>
  void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const Error& e) {
      reply_error(res, e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
      reply_error(res, ErrorCode::Input, e.what());
    }
  }

  void routes() {
    server_.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server_.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });

    server_.Post("/api/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
        auto meta = session::metadata_from_json(body);
        std::optional<bool> auto_record;
        if (body.contains("auto_record")) auto_record = body.at("auto_record").get<bool>();
        reply(res, to_json(svc_.create_session(std::move(meta), auto_record)), 201);
      });
    });

    server_.Get("/api/sessions", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& s : svc_.list_sessions()) arr.push_back(to_json(s));
        reply(res, {{"sessions", arr}});
      });
    });

    server_.Get(R"(/api/sessions/([A-Za-z0-9_-]+))",
                [this](const httplib::Request& req, httplib::Response& res) {
                  guarded(res, [&] { reply(res, to_json(svc_.get_session(req.matches[1]))); });
                });

    auto transition = [this](const char* pattern, auto op) {
      server_.Post(pattern, [this, op](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { reply(res, to_json((svc_.*op)(req.matches[1]))); });
      });
    };
    transition(R"(/api/sessions/([A-Za-z0-9_-]+)/calibrate)", &IngestService::start_calibration);
    transition(R"(/api/sessions/([A-Za-z0-9_-]+)/record)", &IngestService::start_recording);
    transition(R"(/api/sessions/([A-Za-z0-9_-]+)/stop)", &IngestService::stop);

    server_.Get(R"(/api/sessions/([A-Za-z0-9_-]+)/summary)",
                [this](const httplib::Request& req, httplib::Response& res) {
                  guarded(res, [&] {
                    reply(res, {{"session_id", req.matches[1].str()},
                                {"summary", session::to_json(svc_.get_summary(req.matches[1]))}});
                  });
                });

    server_.Post(R"(/api/sessions/([A-Za-z0-9_-]+)/export)",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   guarded(res, [&] {
                     const auto r = svc_.export_session(req.matches[1]);
                     reply(res, {{"session_id", req.matches[1].str()},
                                 {"csv_path", r.csv_path.string()},
                                 {"metadata_path", r.metadata_path.string()},
                                 {"rows", r.rows}});
                   });
                 });

    server_.Get("/api/stats", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { reply(res, to_json(svc_.stats())); });
    });

    server_.Get("/api/live", [this](const httplib::Request&, httplib::Response& res) {
      auto sub = svc_.live_subscribe();
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider(
          "text/event-stream",
          [this, sub](std::size_t, httplib::DataSink& sink) {
            if (closing_) return false;
            if (auto ev = sub->pop(std::chrono::milliseconds(250))) {
              const std::string msg = "data: " + to_json(*ev).dump() + "\n\n";
              return sink.write(msg.data(), msg.size());
            }
            if (sub->closed()) return false;
            static constexpr char kKeepAlive[] = ": keep-alive\n\n";
            return sink.write(kKeepAlive, sizeof kKeepAlive - 1);
          },
          [sub](bool) { sub->close(); });
    });
  }

  IngestService& svc_;
  httplib::Server server_;
  std::thread thread_;
  int bound_port_ = -1;
  std::atomic<bool> closing_{false};
};

}  // namespace kneelink::service

#endif  // KNEELINK_HTTP_API_HPP
