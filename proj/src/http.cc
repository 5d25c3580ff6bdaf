#include "lymphdet/service.h"

// After Eigen: <resolv.h> defines a _res macro.
#include <httplib.h>
#include <spdlog/spdlog.h>

namespace lymphdet {

namespace {

constexpr const char* kId = "([A-Za-z0-9_-]+)";

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_png(httplib::Response& res, const std::vector<uint8_t>& bytes) {
  res.set_content(reinterpret_cast<const char*>(bytes.data()), bytes.size(), "image/png");
}

// Runs `fn`, mapping service exceptions to HTTP statuses.
template <typename F>
httplib::Server::Handler guarded(F fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const AnnotationFormatError& e) {
      send_json(res, 400, {{"error", e.what()}, {"fields", e.fields}});
    } catch (const nlohmann::json::exception& e) {
      send_json(res, 400, {{"error", std::string("invalid JSON: ") + e.what()}});
    } catch (const InvalidInput& e) {
      send_json(res, 400, {{"error", e.what()}});
    } catch (const NotFoundError& e) {
      send_json(res, 404, {{"error", e.what()}});
    } catch (const NoModelError& e) {
      send_json(res, 409, {{"error", e.what()}});
    } catch (const std::exception& e) {
      spdlog::error("{} {}: {}", req.method, req.path, e.what());
      send_json(res, 500, {{"error", e.what()}});
    }
  };
}

std::string route(const std::string& suffix) { return std::string("/images/") + kId + suffix; }

}  // namespace

struct HttpServer::Impl {
  Service& service;
  httplib::Server server;
  std::thread thread;

  explicit Impl(Service& s) : service(s) {
    server.Get("/images", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, {{"images", service.store().image_ids()}});
    }));
    server.Post("/images", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::optional<std::string> id;
      if (req.has_param("id")) id = req.get_param_value("id");
      const std::vector<uint8_t> bytes(req.body.begin(), req.body.end());
      const RgbImage image = decode_rgb(bytes);
      const std::string out = service.upload(image, id);
      send_json(res, 201, {{"id", out}, {"height", image.height()}, {"width", image.width()}});
    }));
    server.Get(route(""), guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_png(res, service.image_png(req.matches[1]));
    }));
    server.Post(route("/detect"),
                guarded([this](const httplib::Request& req, httplib::Response& res) {
                  send_json(res, 200, to_json(service.detect(req.matches[1])));
                }));
    server.Get(route("/overlay"),
               guarded([this](const httplib::Request& req, httplib::Response& res) {
                 send_png(res, service.overlay_png(req.matches[1]));
               }));
    server.Get(route("/probability"),
               guarded([this](const httplib::Request& req, httplib::Response& res) {
                 send_png(res, service.probability_png(req.matches[1]));
               }));
    server.Get(route("/annotations"),
               guarded([this](const httplib::Request& req, httplib::Response& res) {
                 nlohmann::json out = nlohmann::json::array();
                 for (const auto& c : service.annotations(req.matches[1])) {
                   nlohmann::json j = to_json(c.record);
                   j["seq"] = c.seq;
                   j["consumed_by_model_id"] =
                       c.consumed_by.empty() ? nlohmann::json() : nlohmann::json(c.consumed_by);
                   out.push_back(std::move(j));
                 }
                 send_json(res, 200, {{"records", out}});
               }));
    server.Post(route("/annotations"),
                guarded([this](const httplib::Request& req, httplib::Response& res) {
                  const AnnotateResult r =
                      service.annotate(req.matches[1], nlohmann::json::parse(req.body));
                  send_json(res, 200,
                            {{"accepted", r.accepted},
                             {"unconsumed", r.unconsumed},
                             {"finetune_triggered", r.finetune_triggered}});
                }));
    server.Post("/finetune", guarded([this](const httplib::Request&, httplib::Response& res) {
      service.request_finetune();
      send_json(res, 202, {{"queued", true}, {"unconsumed", service.store().unconsumed_count()}});
    }));
    server.Get("/models", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, service.models());
    }));
  }
};

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>(service)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host)
                              : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void HttpServer::listen(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) {
    throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
  }
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace lymphdet
