#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "tforge/prompt_pools.hpp"
#include "tforge/rng.hpp"

namespace tforge::llm {

enum class Stage { unlabeled, positive, hard_negative };
std::string_view to_string(Stage stage);
Stage parse_stage(std::string_view s);
inline constexpr Stage kAllStages[] = {Stage::unlabeled, Stage::positive, Stage::hard_negative};

struct GenerationConfig {
  std::string model = "gpt-3.5-turbo-0301";
  double temperature = 1.0;
  double top_p = 1.0;
  double presence_penalty = 0.0;
  double frequency_penalty = 0.0;
  std::optional<int> max_tokens;

  // Throws ConfigError (temperature >= 0, 0 < top_p <= 1, max_tokens > 0).
  void validate() const;
  nlohmann::json to_json() const;
  static GenerationConfig from_json(const nlohmann::json& j, const GenerationConfig& base,
                                    std::string_view path);
  bool operator==(const GenerationConfig&) const = default;
};

// Sampling settings used for each synthesis stage by default.
GenerationConfig default_config(Stage stage);

struct Usage {
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;

  Usage& operator+=(const Usage& o) {
    prompt_tokens += o.prompt_tokens;
    completion_tokens += o.completion_tokens;
    return *this;
  }
  bool operator==(const Usage&) const = default;
};

// Exact currency amount in picodollars.
class Money {
 public:
  constexpr Money() = default;
  static constexpr Money from_picodollars(std::int64_t p) { return Money(p); }
  // Rounds to the nearest picodollar.
  static Money from_dollars(double dollars);

  constexpr std::int64_t picodollars() const { return pico_; }
  double dollars() const { return static_cast<double>(pico_) * 1e-12; }
  // Fixed-point dollars, rounded half away from zero.
  std::string to_string(int decimals = 6) const;

  Money& operator+=(Money o) {
    pico_ += o.pico_;
    return *this;
  }
  friend Money operator+(Money a, Money b) { return a += b; }
  auto operator<=>(const Money&) const = default;

 private:
  constexpr explicit Money(std::int64_t p) : pico_(p) {}
  std::int64_t pico_ = 0;
};

// Prices per 1,000 tokens, stored in nanodollars so that
// tokens * price_per_1k is exactly the cost in picodollars.
struct PriceTable {
  std::int64_t input_nanodollars_per_1k = 1'500'000;   // $0.0015
  std::int64_t output_nanodollars_per_1k = 2'000'000;  // $0.002

  static PriceTable from_dollars(double input_per_1k, double output_per_1k);
  nlohmann::json to_json() const;
  bool operator==(const PriceTable&) const = default;
};

Money estimate_cost(const Usage& usage, const PriceTable& prices);

struct StageTotals {
  Usage usage;
  Money cost;
  std::int64_t requests = 0;
  std::int64_t failures = 0;
  bool operator==(const StageTotals&) const = default;
};

// Per-stage accounting of requests, failures, tokens and money. Every
// recorded event is optionally appended to a JSONL event log, so the totals
// can always be recomputed by folding that log.
class CostLedger {
 public:
  explicit CostLedger(PriceTable prices = {}, std::filesystem::path event_log = {});
  CostLedger(const CostLedger& other);
  CostLedger& operator=(const CostLedger&) = delete;

  void record(Stage stage, const Usage& usage, bool ok);

  StageTotals totals(Stage stage) const;
  StageTotals overall() const;
  const PriceTable& prices() const { return prices_; }

  nlohmann::json summary_json() const;
  // Rebuilds a ledger from an event log.
  static CostLedger fold_event_log(const std::filesystem::path& path);

 private:
  PriceTable prices_;
  std::filesystem::path event_log_;
  mutable std::mutex mu_;
  std::map<Stage, StageTotals> totals_;
};

// A logical chat-completion request. Requests with equal content share a
// request key; `occurrence` tells apart the 0th, 1st, ... such request in a
// run so that replaying identical prompts can still return distinct samples.
struct CompletionRequest {
  pools::ChatTranscript transcript;
  GenerationConfig config;
  std::size_t occurrence = 0;
};

struct Completion {
  std::string text;
  Usage usage;
  bool operator==(const Completion&) const = default;
};

// JSON body of POST /v1/chat/completions.
nlohmann::json request_body(const pools::ChatTranscript& transcript, const GenerationConfig& config);

// SHA-256 over a canonical serialization of
// (model, temperature, top_p, penalties, max_tokens, messages).
std::string canonical_request_key(const pools::ChatTranscript& transcript,
                                  const GenerationConfig& config);

// Parses an OpenAI-compatible response body: choices[0].message.content and
// the usage block. Throws ResponseFormatError.
Completion parse_completion_body(std::string_view body);

struct HttpReply {
  int status = 0;
  std::string body;
};

// POSTs a JSON body to a path; throws TransportError when no HTTP response
// arrives at all.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpReply post(const std::string& path, const std::string& body) = 0;
};

struct HttpTransportOptions {
  std::string base_url = "https://api.openai.com";
  std::string api_key;  // sent as a bearer token when nonempty
  std::chrono::seconds connect_timeout{10};
  std::chrono::seconds read_timeout{120};
};

// The environment variables SYNCSE_BASE_URL and SYNCSE_API_KEY fill in the
// options for a live backend.
HttpTransportOptions http_options_from_env(std::optional<std::string> base_url_override = {});

class HttpTransport : public Transport {
 public:
  explicit HttpTransport(HttpTransportOptions options);
  HttpReply post(const std::string& path, const std::string& body) override;

 private:
  HttpTransportOptions options_;
};

// Append-only JSONL store of recorded completions, keyed by
// (request key, occurrence).
class FixtureStore {
 public:
  FixtureStore() = default;
  explicit FixtureStore(std::filesystem::path path);

  std::optional<Completion> lookup(const std::string& key, std::size_t occurrence) const;
  void append(const std::string& key, std::size_t occurrence, const nlohmann::json& request,
              const Completion& completion);
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::map<std::pair<std::string, std::size_t>, Completion> entries_;
};

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds base_delay{1000};
  std::chrono::milliseconds max_delay{32000};
  std::uint64_t jitter_seed = 0;
  // Replaced in tests to avoid real waiting.
  std::function<void(std::chrono::milliseconds)> sleep;

  // Upper bound of the full-jitter delay before retry number `retry`
  // (0-based): min(max_delay, base_delay * 2^retry).
  std::chrono::milliseconds ceiling(int retry) const;
};

enum class BackendMode { live, record, replay };
std::string_view to_string(BackendMode mode);
BackendMode parse_backend_mode(std::string_view s);

inline constexpr std::string_view kCompletionsPath = "/v1/chat/completions";

// Speaks the chat-completion protocol to a live transport or a fixture
// store. Thread-safe.
class Gateway {
 public:
  // Live: transport required. Record: transport and store. Replay: store.
  Gateway(BackendMode mode, std::shared_ptr<Transport> transport,
          std::shared_ptr<FixtureStore> store, RetryPolicy retry = {});

  Completion complete(const CompletionRequest& request);
  Completion complete(const pools::ChatTranscript& transcript, const GenerationConfig& config) {
    return complete(CompletionRequest{transcript, config, 0});
  }

  BackendMode mode() const { return mode_; }

 private:
  Completion call_live(const CompletionRequest& request, const std::string& body);
  std::chrono::milliseconds jittered_delay(int retry);

  BackendMode mode_;
  std::shared_ptr<Transport> transport_;
  std::shared_ptr<FixtureStore> store_;
  RetryPolicy retry_;
  std::mutex jitter_mu_;
  Rng jitter_rng_;
};

// Assigns occurrence numbers to requests in a fixed (input) order.
class OccurrenceCounter {
 public:
  std::size_t next(const std::string& key) { return counts_[key]++; }

 private:
  std::unordered_map<std::string, std::size_t> counts_;
};

}  // namespace tforge::llm
