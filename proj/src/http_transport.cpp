#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "tforge/error.hpp"
#include "tforge/llm_gateway.hpp"

namespace tforge::llm {

namespace {

// Splits "https://host:port/prefix" into the scheme-host-port part and an
// optional path prefix.
std::pair<std::string, std::string> split_base_url(std::string url) {
  while (!url.empty() && url.back() == '/') url.pop_back();
  auto scheme = url.find("://");
  auto path_start = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (path_start == std::string::npos) return {url, ""};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

HttpTransport::HttpTransport(HttpTransportOptions options) : options_(std::move(options)) {
  if (options_.base_url.empty()) throw ConfigError("base URL must be nonempty");
}

HttpReply HttpTransport::post(const std::string& path, const std::string& body) {
  auto [origin, prefix] = split_base_url(options_.base_url);
  httplib::Client client(origin);
  if (!client.is_valid()) throw ConfigError("invalid base URL '" + options_.base_url + "'");
  client.set_connection_timeout(options_.connect_timeout);
  client.set_read_timeout(options_.read_timeout);
  httplib::Headers headers;
  if (!options_.api_key.empty())
    headers.emplace("Authorization", "Bearer " + options_.api_key);
  auto res = client.Post(prefix + path, headers, body, "application/json");
  if (!res)
    throw TransportError("POST " + options_.base_url + path + " failed: " +
                         httplib::to_string(res.error()));
  return HttpReply{res->status, res->body};
}

}  // namespace tforge::llm
