// Eigen must come before httplib: <resolv.h> defines a `_res` macro.
#include "aline/service.hpp"

#include "httplib.h"

namespace aline::service {

namespace {

void reply(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  nlohmann::ordered_json e;
  e["code"] = code;
  e["message"] = message;
  reply(res, status, e);
}

template <class F>
httplib::Server::Handler guarded(F&& f) {
  return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const ServiceError& e) {
      reply_error(res, e.status, e.code, e.what());
    } catch (const nlohmann::json::exception& e) {
      reply_error(res, 400, "bad_request", e.what());
    } catch (const InvalidArgument& e) {
      reply_error(res, 400, "bad_request", e.what());
    } catch (const std::exception& e) {
      reply_error(res, 500, "internal", e.what());
    }
  };
}

nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::exception&) {
    throw ServiceError(400, "bad_request", "request body is not valid JSON");
  }
}

std::optional<bool> sample_flag(const httplib::Request& req) {
  if (!req.has_param("sample")) return std::nullopt;
  const std::string v = req.get_param_value("sample");
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ServiceError(400, "bad_request", "sample must be true or false");
}

}  // namespace

void mount_routes(httplib::Server& server, SessionManager& m, const std::optional<std::filesystem::path>& console) {
  server.Get("/v1/health", guarded([&m](const httplib::Request&, httplib::Response& res) {
               nlohmann::ordered_json j;
               j["status"] = "ok";
               j["tasks"] = m.tasks();
               j["sessions"] = m.size();
               reply(res, 200, j);
             }));
  server.Post("/v1/sessions", guarded([&m](const httplib::Request& req, httplib::Response& res) {
                reply(res, 201, m.create(parse_body(req)));
              }));
  server.Get("/v1/sessions/:id/proposal", guarded([&m](const httplib::Request& req, httplib::Response& res) {
               reply(res, 200, m.propose(req.path_params.at("id"), sample_flag(req)));
             }));
  server.Post("/v1/sessions/:id/observations", guarded([&m](const httplib::Request& req, httplib::Response& res) {
                reply(res, 200, m.observe(req.path_params.at("id"), parse_body(req)));
              }));
  server.Get("/v1/sessions/:id", guarded([&m](const httplib::Request& req, httplib::Response& res) {
               reply(res, 200, m.state(req.path_params.at("id")));
             }));
  server.Delete("/v1/sessions/:id", guarded([&m](const httplib::Request& req, httplib::Response& res) {
                  const std::string id = req.path_params.at("id");
                  m.remove(id);
                  reply(res, 200, {{"id", id}, {"deleted", true}});
                }));
  if (console) server.set_mount_point("/console", console->string());
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) reply_error(res, res.status, res.status == 404 ? "not_found" : "http_error", "no such route");
  });
}

}  // namespace aline::service
