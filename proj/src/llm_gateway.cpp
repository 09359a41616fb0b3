#include "tforge/llm_gateway.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "tforge/error.hpp"
#include "tforge/hash.hpp"
#include "tforge/text.hpp"

namespace tforge::llm {

using nlohmann::json;

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::unlabeled: return "unlabeled";
    case Stage::positive: return "positive";
    case Stage::hard_negative: return "hard_negative";
  }
  return "?";
}

Stage parse_stage(std::string_view s) {
  for (Stage st : kAllStages)
    if (to_string(st) == s) return st;
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

std::string_view to_string(BackendMode mode) {
  switch (mode) {
    case BackendMode::live: return "live";
    case BackendMode::record: return "record";
    case BackendMode::replay: return "replay";
  }
  return "?";
}

BackendMode parse_backend_mode(std::string_view s) {
  if (s == "live") return BackendMode::live;
  if (s == "record") return BackendMode::record;
  if (s == "replay") return BackendMode::replay;
  throw ConfigError("unknown backend mode '" + std::string(s) +
                    "' (expected live, record or replay)");
}

// --- GenerationConfig -------------------------------------------------------

void GenerationConfig::validate() const {
  if (model.empty()) throw ConfigError("model must be nonempty");
  if (!std::isfinite(temperature) || temperature < 0.0)
    throw ConfigError("temperature must be >= 0");
  if (!std::isfinite(top_p) || top_p <= 0.0 || top_p > 1.0)
    throw ConfigError("top_p must be in (0, 1]");
  if (!std::isfinite(presence_penalty) || !std::isfinite(frequency_penalty))
    throw ConfigError("penalties must be finite");
  if (max_tokens && *max_tokens <= 0) throw ConfigError("max_tokens must be positive");
}

json GenerationConfig::to_json() const {
  json j{{"model", model},
         {"temperature", temperature},
         {"top_p", top_p},
         {"presence_penalty", presence_penalty},
         {"frequency_penalty", frequency_penalty}};
  if (max_tokens) j["max_tokens"] = *max_tokens;
  return j;
}

GenerationConfig GenerationConfig::from_json(const json& j, const GenerationConfig& base,
                                             std::string_view path) {
  std::string where(path);
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  GenerationConfig c = base;
  for (const auto& [key, value] : j.items()) {
    std::string field = where + "." + key;
    auto number = [&]() {
      if (!value.is_number()) throw ConfigError(field + ": expected a number");
      return value.get<double>();
    };
    if (key == "model") {
      if (!value.is_string()) throw ConfigError(field + ": expected a string");
      c.model = value.get<std::string>();
    } else if (key == "temperature") {
      c.temperature = number();
    } else if (key == "top_p") {
      c.top_p = number();
    } else if (key == "presence_penalty") {
      c.presence_penalty = number();
    } else if (key == "frequency_penalty") {
      c.frequency_penalty = number();
    } else if (key == "max_tokens") {
      if (value.is_null()) {
        c.max_tokens.reset();
      } else {
        if (!value.is_number_integer()) throw ConfigError(field + ": expected an integer");
        c.max_tokens = value.get<int>();
      }
    } else {
      throw ConfigError(field + ": unknown field");
    }
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return c;
}

GenerationConfig default_config(Stage stage) {
  GenerationConfig c;
  switch (stage) {
    case Stage::unlabeled:
      c.temperature = 1.3;
      c.top_p = 1.0;
      c.presence_penalty = 0.3;
      c.frequency_penalty = 0.3;
      break;
    case Stage::positive:
      c.temperature = 1.0;
      c.top_p = 0.9;
      break;
    case Stage::hard_negative:
      c.temperature = 1.0;
      c.top_p = 0.95;
      break;
  }
  return c;
}

// --- Money ------------------------------------------------------------------

Money Money::from_dollars(double dollars) {
  return Money(static_cast<std::int64_t>(std::llround(dollars * 1e12)));
}

std::string Money::to_string(int decimals) const {
  if (decimals < 0 || decimals > 12) throw UsageError("decimals must be in [0, 12]");
  std::int64_t unit = 1;
  for (int i = 0; i < 12 - decimals; ++i) unit *= 10;
  bool negative = pico_ < 0;
  // Magnitude as unsigned so that INT64_MIN does not overflow.
  std::uint64_t mag = negative ? 0 - static_cast<std::uint64_t>(pico_)
                               : static_cast<std::uint64_t>(pico_);
  std::uint64_t u = static_cast<std::uint64_t>(unit);
  std::uint64_t scaled = mag / u + ((mag % u) * 2 >= u ? 1 : 0);
  std::uint64_t denom = 1;
  for (int i = 0; i < decimals; ++i) denom *= 10;
  std::string whole = std::to_string(scaled / denom);
  std::string out = (negative && scaled != 0 ? "-" : "") + whole;
  if (decimals > 0) {
    std::string frac = std::to_string(scaled % denom);
    out += "." + std::string(decimals - frac.size(), '0') + frac;
  }
  return out;
}

PriceTable PriceTable::from_dollars(double input_per_1k, double output_per_1k) {
  if (!(input_per_1k >= 0.0) || !(output_per_1k >= 0.0))
    throw ConfigError("prices must be nonnegative");
  PriceTable p;
  p.input_nanodollars_per_1k = std::llround(input_per_1k * 1e9);
  p.output_nanodollars_per_1k = std::llround(output_per_1k * 1e9);
  return p;
}

json PriceTable::to_json() const {
  return json{{"input_per_1k", static_cast<double>(input_nanodollars_per_1k) * 1e-9},
              {"output_per_1k", static_cast<double>(output_nanodollars_per_1k) * 1e-9},
              {"input_nanodollars_per_1k", input_nanodollars_per_1k},
              {"output_nanodollars_per_1k", output_nanodollars_per_1k}};
}

Money estimate_cost(const Usage& usage, const PriceTable& prices) {
  // tokens/1000 * (nano/1e9 dollars) = tokens * nano picodollars.
  return Money::from_picodollars(usage.prompt_tokens * prices.input_nanodollars_per_1k +
                                 usage.completion_tokens * prices.output_nanodollars_per_1k);
}

// --- CostLedger ---------------------------------------------------------------

CostLedger::CostLedger(PriceTable prices, std::filesystem::path event_log)
    : prices_(prices), event_log_(std::move(event_log)) {
  for (Stage s : kAllStages) totals_[s] = {};
}

CostLedger::CostLedger(const CostLedger& other) {
  std::lock_guard lock(other.mu_);
  prices_ = other.prices_;
  event_log_ = other.event_log_;
  totals_ = other.totals_;
}

void CostLedger::record(Stage stage, const Usage& usage, bool ok) {
  if (usage.prompt_tokens < 0 || usage.completion_tokens < 0)
    throw UsageError("usage counts must be nonnegative");
  Money cost = estimate_cost(usage, prices_);
  std::lock_guard lock(mu_);
  StageTotals& t = totals_[stage];
  t.usage += usage;
  t.cost += cost;
  ++t.requests;
  if (!ok) ++t.failures;
  if (!event_log_.empty()) {
    json e{{"stage", to_string(stage)},
           {"ok", ok},
           {"prompt_tokens", usage.prompt_tokens},
           {"completion_tokens", usage.completion_tokens},
           {"cost_pico", cost.picodollars()},
           {"input_nanodollars_per_1k", prices_.input_nanodollars_per_1k},
           {"output_nanodollars_per_1k", prices_.output_nanodollars_per_1k}};
    append_line(event_log_, e.dump());
  }
}

StageTotals CostLedger::totals(Stage stage) const {
  std::lock_guard lock(mu_);
  return totals_.at(stage);
}

StageTotals CostLedger::overall() const {
  std::lock_guard lock(mu_);
  StageTotals all;
  for (const auto& [stage, t] : totals_) {
    all.usage += t.usage;
    all.cost += t.cost;
    all.requests += t.requests;
    all.failures += t.failures;
  }
  return all;
}

namespace {

json totals_json(const StageTotals& t) {
  return json{{"requests", t.requests},
              {"failures", t.failures},
              {"prompt_tokens", t.usage.prompt_tokens},
              {"completion_tokens", t.usage.completion_tokens},
              {"cost_pico", t.cost.picodollars()},
              {"cost_usd", t.cost.to_string(6)}};
}

}  // namespace

json CostLedger::summary_json() const {
  json stages = json::object();
  for (Stage s : kAllStages) stages[std::string(to_string(s))] = totals_json(totals(s));
  return json{{"prices", prices_.to_json()}, {"stages", stages}, {"total", totals_json(overall())}};
}

CostLedger CostLedger::fold_event_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open event log");
  std::optional<CostLedger> ledger;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::string where = path.string() + ":" + std::to_string(lineno);
    try {
      json e = json::parse(line);
      PriceTable prices{e.at("input_nanodollars_per_1k").get<std::int64_t>(),
                        e.at("output_nanodollars_per_1k").get<std::int64_t>()};
      if (!ledger) ledger.emplace(prices);
      if (!(ledger->prices_ == prices)) throw IoError(where + ": price table changes mid-log");
      Usage u{e.at("prompt_tokens").get<std::int64_t>(),
              e.at("completion_tokens").get<std::int64_t>()};
      if (estimate_cost(u, prices).picodollars() != e.at("cost_pico").get<std::int64_t>())
        throw IoError(where + ": recorded cost does not match usage");
      ledger->record(parse_stage(e.at("stage").get<std::string>()), u, e.at("ok").get<bool>());
    } catch (const json::exception& ex) {
      throw IoError(where + ": malformed event: " + ex.what());
    }
  }
  if (!ledger) return CostLedger{};
  return *ledger;
}

// --- request encoding -------------------------------------------------------

json request_body(const pools::ChatTranscript& transcript, const GenerationConfig& config) {
  json body = config.to_json();
  body["messages"] = transcript.to_json();
  return body;
}

std::string canonical_request_key(const pools::ChatTranscript& transcript,
                                  const GenerationConfig& config) {
  // json objects keep keys sorted, and doubles print as their shortest
  // round-trip form, so the dump is canonical.
  return sha256_hex(request_body(transcript, config).dump());
}

Completion parse_completion_body(std::string_view body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw ResponseFormatError(std::string("response is not JSON: ") + e.what());
  }
  if (!j.is_object()) throw ResponseFormatError("response is not a JSON object");
  auto choices = j.find("choices");
  if (choices == j.end() || !choices->is_array() || choices->empty())
    throw ResponseFormatError("response has no choices");
  const json& first = (*choices)[0];
  if (!first.is_object() || !first.contains("message") || !first["message"].is_object())
    throw ResponseFormatError("first choice has no message");
  const json& msg = first["message"];
  if (!msg.contains("content") || !msg["content"].is_string())
    throw ResponseFormatError("message content is not a string");
  Completion c;
  c.text = msg["content"].get<std::string>();
  if (auto u = j.find("usage"); u != j.end() && u->is_object()) {
    auto count = [&](const char* name) -> std::int64_t {
      auto it = u->find(name);
      if (it == u->end() || it->is_null()) return 0;
      if (!it->is_number_integer() || it->get<std::int64_t>() < 0)
        throw ResponseFormatError(std::string("usage.") + name + " is not a count");
      return it->get<std::int64_t>();
    };
    c.usage.prompt_tokens = count("prompt_tokens");
    c.usage.completion_tokens = count("completion_tokens");
  }
  return c;
}

HttpTransportOptions http_options_from_env(std::optional<std::string> base_url_override) {
  HttpTransportOptions o;
  if (const char* url = std::getenv("SYNCSE_BASE_URL"); url && *url) o.base_url = url;
  if (base_url_override && !base_url_override->empty()) o.base_url = *base_url_override;
  if (const char* key = std::getenv("SYNCSE_API_KEY"); key) o.api_key = key;
  return o;
}

// --- FixtureStore -----------------------------------------------------------

FixtureStore::FixtureStore(std::filesystem::path path) : path_(std::move(path)) {
  if (!std::filesystem::exists(path_)) return;
  std::ifstream in(path_);
  if (!in) throw IoError(path_.string() + ": cannot open fixture store");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      json e = json::parse(line);
      Completion c;
      c.text = e.at("response").get<std::string>();
      if (e.contains("usage")) {
        c.usage.prompt_tokens = e["usage"].value("prompt_tokens", std::int64_t{0});
        c.usage.completion_tokens = e["usage"].value("completion_tokens", std::int64_t{0});
      }
      entries_.try_emplace({e.at("key").get<std::string>(), e.value("occurrence", std::size_t{0})},
                           std::move(c));
    } catch (const json::exception& ex) {
      throw IoError(path_.string() + ":" + std::to_string(lineno) +
                    ": malformed fixture: " + ex.what());
    }
  }
}

std::optional<Completion> FixtureStore::lookup(const std::string& key,
                                               std::size_t occurrence) const {
  std::lock_guard lock(mu_);
  auto it = entries_.find({key, occurrence});
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void FixtureStore::append(const std::string& key, std::size_t occurrence, const json& request,
                          const Completion& completion) {
  std::lock_guard lock(mu_);
  if (!entries_.try_emplace({key, occurrence}, completion).second) return;
  if (path_.empty()) return;
  json e{{"key", key},
         {"occurrence", occurrence},
         {"request", request},
         {"response", completion.text},
         {"usage",
          {{"prompt_tokens", completion.usage.prompt_tokens},
           {"completion_tokens", completion.usage.completion_tokens}}}};
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  append_line(path_, e.dump());
}

std::size_t FixtureStore::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

// --- Gateway ----------------------------------------------------------------

std::chrono::milliseconds RetryPolicy::ceiling(int retry) const {
  auto d = base_delay;
  for (int i = 0; i < retry && d < max_delay; ++i) d *= 2;
  return std::min(d, max_delay);
}

Gateway::Gateway(BackendMode mode, std::shared_ptr<Transport> transport,
                 std::shared_ptr<FixtureStore> store, RetryPolicy retry)
    : mode_(mode),
      transport_(std::move(transport)),
      store_(std::move(store)),
      retry_(std::move(retry)),
      jitter_rng_(retry_.jitter_seed) {
  if (mode_ != BackendMode::replay && !transport_)
    throw ConfigError("backend mode '" + std::string(to_string(mode_)) + "' needs a transport");
  if (mode_ != BackendMode::live && !store_)
    throw ConfigError("backend mode '" + std::string(to_string(mode_)) +
                      "' needs a fixture store");
  if (retry_.max_attempts < 1) throw ConfigError("max_attempts must be at least 1");
  if (!retry_.sleep) retry_.sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::chrono::milliseconds Gateway::jittered_delay(int retry) {
  auto cap = retry_.ceiling(retry).count();
  std::lock_guard lock(jitter_mu_);
  return std::chrono::milliseconds(
      static_cast<std::int64_t>(jitter_rng_.uniform_index(static_cast<std::uint64_t>(cap) + 1)));
}

Completion Gateway::complete(const CompletionRequest& request) {
  request.transcript.validate();
  request.config.validate();
  json body = request_body(request.transcript, request.config);
  std::string key = sha256_hex(body.dump());

  if (mode_ == BackendMode::replay) {
    if (auto hit = store_->lookup(key, request.occurrence)) return *hit;
    throw ReplayMissError("no recorded completion for request " + key.substr(0, 16) +
                          " (occurrence " + std::to_string(request.occurrence) + ")");
  }
  Completion c = call_live(request, body.dump());
  if (mode_ == BackendMode::record) store_->append(key, request.occurrence, body, c);
  return c;
}

Completion Gateway::call_live(const CompletionRequest& /*request*/, const std::string& body) {
  const std::string path(kCompletionsPath);
  for (int attempt = 1;; ++attempt) {
    bool last = attempt == retry_.max_attempts;
    std::string reason;
    try {
      HttpReply reply = transport_->post(path, body);
      if (reply.status >= 200 && reply.status < 300) return parse_completion_body(reply.body);
      if (reply.status == 429) {
        if (last)
          throw RateLimitError("rate limited after " + std::to_string(attempt) + " attempts");
        reason = "429";
      } else if (reply.status >= 500) {
        if (last)
          throw HttpStatusError(reply.status, "HTTP " + std::to_string(reply.status) +
                                                  " after " + std::to_string(attempt) +
                                                  " attempts");
        reason = std::to_string(reply.status);
      } else {
        throw HttpStatusError(reply.status, "HTTP " + std::to_string(reply.status) + ": " +
                                                reply.body.substr(0, 200));
      }
    } catch (const RateLimitError&) {
      throw;
    } catch (const TransportError& e) {
      if (last)
        throw TransportError(std::string(e.what()) + " (after " + std::to_string(attempt) +
                             " attempts)");
    }
    retry_.sleep(jittered_delay(attempt - 1));
  }
}

}  // namespace tforge::llm
