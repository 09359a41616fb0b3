// Serves the offline mock model over HTTP so the live transport can be
// exercised end to end: POST /v1/chat/completions.
#include <CLI11.hpp>
#include <httplib.h>

#include <iostream>

#include "tforge/mock_llm.hpp"
#include "tforge/prompt_pools.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Mock chat-completions server", "mock_llm_server"};
  std::string host = "127.0.0.1";
  int port = 8089;
  std::string pools_file = TFORGE_DEFAULT_POOLS;
  std::uint64_t seed = 0;
  double rate_limit = 0.0;
  app.add_option("--host", host, "Bind address");
  app.add_option("--port", port, "Port");
  app.add_option("--pools", pools_file, "Pool file whose topics and genres the mock recognizes");
  app.add_option("--seed", seed, "Mock seed");
  app.add_option("--rate-limit", rate_limit, "Probability of a 429 on a body's first attempt");
  CLI11_PARSE(app, argc, argv);

  tforge::mock::MockOptions o;
  try {
    o = tforge::mock::options_for(tforge::pools::load_pools(pools_file));
  } catch (const std::exception& e) {
    std::cerr << "mock_llm_server: " << e.what() << "\n";
    return 2;
  }
  o.seed = seed;
  o.rate_limit_rate = rate_limit;
  tforge::mock::MockTransport mock(o);

  httplib::Server server;
  server.Post(R"(/.*)", [&](const httplib::Request& req, httplib::Response& res) {
    auto reply = mock.handle(req.path, req.body);
    res.status = reply.status;
    res.set_content(reply.body, "application/json");
  });
  std::cout << "listening on http://" << host << ":" << port << std::endl;
  if (!server.listen(host, port)) {
    std::cerr << "mock_llm_server: cannot bind " << host << ":" << port << "\n";
    return 2;
  }
  return 0;
}
