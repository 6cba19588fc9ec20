// Eigen must be seen before httplib: <resolv.h> defines a `_res` macro.
#include "idinv/service.hpp"

#include <httplib.h>

#include <chrono>
#include <iostream>
#include <thread>

namespace idinv::frontends {

void run_server(Service& service, const std::string& host, int port, const std::atomic<bool>* stop,
                std::function<void(int)> on_bound) {
  httplib::Server server;
  auto route = [&service](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    const auto reply = service.handle(req.method, req.path, req.body, query);
    res.status = reply.status;
    res.set_content(reply.body.dump(), "application/json");
  };
  server.Post("/reload", [&service](const httplib::Request& req, httplib::Response& res) {
    try {
      const auto body = json::parse(req.body.empty() ? "{}" : req.body);
      const std::string id = body.value("checkpoint", service.config().default_checkpoint);
      service.reload(id);
      res.set_content(json{{"reloaded", id}}.dump(), "application/json");
    } catch (const std::exception& e) {
      const auto reply = error_reply(e);
      res.status = reply.status;
      res.set_content(reply.body.dump(), "application/json");
    }
  });
  server.Get(R"(/.*)", route);
  server.Post(R"(/.*)", route);
  const int bound = port == 0 ? server.bind_to_any_port(host) : (server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw Error(ErrorKind::kInvalidArgument, "cannot listen on " + host + ":" + std::to_string(port));
  std::thread watcher;
  if (stop)
    watcher = std::thread([&] {
      while (!stop->load()) std::this_thread::sleep_for(std::chrono::milliseconds(20));
      server.stop();
    });
  std::cerr << "serving on " << host << ":" << bound << "\n";
  if (on_bound) on_bound(bound);
  server.listen_after_bind();
  if (watcher.joinable()) watcher.join();
}

}  // namespace idinv::frontends
