#pragma once

#include <atomic>
#include <cstdlib>
#include <memory>
#include <string>

#include <httplib.h>

#include "ctrlkit/api.hpp"

namespace ctrlkit::service {

using api::json;

/// Counts requests in flight and refuses new ones beyond a fixed capacity.
class AdmissionLimiter {
 public:
  explicit AdmissionLimiter(std::size_t capacity) : capacity_(capacity) {}

  bool try_acquire() {
    std::size_t cur = in_flight_.load();
    while (cur < capacity_)
      if (in_flight_.compare_exchange_weak(cur, cur + 1)) return true;
    return false;
  }
  void release() { in_flight_.fetch_sub(1); }
  std::size_t in_flight() const { return in_flight_.load(); }
  std::size_t capacity() const { return capacity_; }

 private:
  std::size_t capacity_;
  std::atomic<std::size_t> in_flight_{0};
};

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8787;
  std::string static_dir;          // served at "/" when set
  std::size_t max_in_flight = 32;  // beyond this, 429
  std::size_t threads = 16;
};

/// Reads CTRLKIT_PORT and CTRLKIT_STATIC_DIR over the given defaults.
inline ServerOptions options_from_env(ServerOptions o = {}) {
  if (const char* p = std::getenv("CTRLKIT_PORT")) {
    try {
      o.port = std::stoi(p);
    } catch (const std::exception&) {
      throw ParameterError(std::string("CTRLKIT_PORT is not a port number: ") + p);
    }
  }
  if (const char* s = std::getenv("CTRLKIT_STATIC_DIR")) o.static_dir = s;
  return o;
}

inline std::string sse_event(const std::string& event, const json& data) {
  return "event: " + event + "\ndata: " + data.dump() + "\n\n";
}

/// Single-model HTTP service over a read-only bundle. A null bundle makes
/// every model endpoint answer 503.
class Server {
 public:
  Server(std::shared_ptr<const api::ModelBundle> bundle, ServerOptions options)
      : bundle_(std::move(bundle)), options_(std::move(options)), limiter_(options_.max_in_flight) {
    const std::size_t threads = options_.threads;
    server_.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    routes();
  }

  /// Binds and serves until stop(); returns false if binding failed.
  bool listen() { return server_.listen(options_.host, options_.port); }

  /// Binds to a free port and returns it; call run() afterwards.
  int bind_any_port() {
    const int port = server_.bind_to_any_port(options_.host);
    if (port < 0) throw std::runtime_error("could not bind a port on " + options_.host);
    options_.port = port;
    return port;
  }
  bool bind(int port) {
    options_.port = port;
    return server_.bind_to_port(options_.host, port);
  }
  bool run() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() { server_.wait_until_ready(); }

  int port() const { return options_.port; }
  AdmissionLimiter& limiter() { return limiter_; }

 private:
  static void send(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    send(res, status, api::error_body(code, message));
  }

  static json parse_body(const httplib::Request& req) {
    const auto type = req.get_header_value("Content-Type");
    if (type.rfind("application/json", 0) != 0)
      throw api::ApiError(400, "unsupported_media_type", "Content-Type must be application/json");
    try {
      return json::parse(req.body);
    } catch (const json::parse_error& e) {
      throw api::bad_request(std::string("malformed JSON: ") + e.what());
    }
  }

  using Bundle = std::shared_ptr<const api::ModelBundle>;
  using Slot = std::shared_ptr<void>;  // holds one admission slot until released

  // Wraps a handler with admission control, model presence and error mapping.
  template <typename F>
  httplib::Server::Handler guarded(F handler) {
    return [this, handler](const httplib::Request& req, httplib::Response& res) {
      if (!limiter_.try_acquire()) {
        send_error(res, 429, "too_many_requests", "server is at capacity, retry later");
        return;
      }
      Slot slot(nullptr, [this](void*) { limiter_.release(); });
      const Bundle bundle = bundle_;
      if (!bundle) {
        send_error(res, 503, "model_not_loaded", "no model checkpoint is loaded");
        return;
      }
      try {
        handler(bundle, slot, req, res);
      } catch (const api::ApiError& e) {
        send_error(res, e.status, e.code, e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "internal_error", e.what());
      }
    };
  }

  void routes() {
    server_.Get("/v1/codes", guarded([](const Bundle& b, const Slot&, const httplib::Request&, httplib::Response& res) {
      send(res, 200, api::codes_body(*b));
    }));
    server_.Get("/v1/model", guarded([](const Bundle& b, const Slot&, const httplib::Request&, httplib::Response& res) {
      send(res, 200, api::model_info(*b));
    }));
    server_.Post("/v1/attribute",
                 guarded([](const Bundle& b, const Slot&, const httplib::Request& req, httplib::Response& res) {
                   send(res, 200, api::attribute(*b, api::parse_attribute_request(parse_body(req))));
                 }));
    server_.Post("/v1/generate",
                 guarded([](const Bundle& b, const Slot& slot, const httplib::Request& req, httplib::Response& res) {
                   auto request = api::parse_generate_request(parse_body(req));
                   api::resolve_code(b->tokenizer, request.control_code);
                   if (!request.stream) {
                     send(res, 200, api::generate(*b, request));
                     return;
                   }
                   // One "token" event per step, then "done" with the full body.
                   res.set_chunked_content_provider(
                       "text/event-stream", [b, slot, request](std::size_t, httplib::DataSink& sink) {
                         try {
                           const auto body = api::generate(*b, request, [&](const json& step) {
                             const auto ev = sse_event("token", step);
                             sink.write(ev.data(), ev.size());
                           });
                           const auto done = sse_event("done", body);
                           sink.write(done.data(), done.size());
                         } catch (const std::exception& e) {
                           const auto ev = sse_event("error", api::error_body("internal_error", e.what()));
                           sink.write(ev.data(), ev.size());
                         }
                         sink.done();
                         return true;
                       });
                 }));
    if (!options_.static_dir.empty() && !server_.set_mount_point("/", options_.static_dir))
      throw std::runtime_error("static directory not found: " + options_.static_dir);
    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.status == 404 && res.body.empty()) send_error(res, 404, "not_found", "no such endpoint");
    });
  }

  std::shared_ptr<const api::ModelBundle> bundle_;
  ServerOptions options_;
  AdmissionLimiter limiter_;
  httplib::Server server_;
};

}  // namespace ctrlkit::service
