#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <deque>
#include <fstream>
#include <set>
#include <thread>

#include "test_support.hpp"
#include "tforge/error.hpp"
#include "tforge/hash.hpp"
#include "tforge/llm_gateway.hpp"
#include "tforge/text.hpp"
#include "tforge/throttle.hpp"

using namespace tforge;
using namespace tforge::llm;
using nlohmann::json;
using tforge::testing::TempDir;

namespace {

pools::ChatTranscript chat(const std::string& user) {
  return pools::ChatTranscript{{{pools::Role::system, "You are a helpful assistant."},
                                {pools::Role::user, user}}};
}

std::string ok_body(const std::string& text, int prompt = 10, int completion = 5) {
  return json{{"choices", json::array({{{"index", 0},
                                        {"message", {{"role", "assistant"}, {"content", text}}},
                                        {"finish_reason", "stop"}}})},
              {"usage", {{"prompt_tokens", prompt}, {"completion_tokens", completion}}}}
      .dump();
}

// Replays a fixed list of replies and remembers every body it saw.
class ScriptedTransport : public Transport {
 public:
  struct Step {
    int status = 200;
    std::string body;
    bool fail = false;  // throw TransportError instead of replying
  };
  explicit ScriptedTransport(std::deque<Step> steps, Step fallback = Step{200, ok_body("ok"), false})
      : steps_(std::move(steps)), fallback_(std::move(fallback)) {}

  HttpReply post(const std::string& path, const std::string& body) override {
    std::lock_guard lock(mu_);
    paths.push_back(path);
    bodies.push_back(body);
    Step s = fallback_;
    if (!steps_.empty()) {
      s = steps_.front();
      steps_.pop_front();
    }
    if (s.fail) throw TransportError("connection refused");
    return {s.status, s.body};
  }

  std::vector<std::string> paths;
  std::vector<std::string> bodies;

 private:
  std::mutex mu_;
  std::deque<Step> steps_;
  Step fallback_;
};

struct SleepLog {
  std::vector<std::chrono::milliseconds> delays;
  RetryPolicy policy(std::uint64_t seed = 1) {
    RetryPolicy p;
    p.jitter_seed = seed;
    p.sleep = [this](std::chrono::milliseconds d) { delays.push_back(d); };
    return p;
  }
};

}  // namespace

TEST(GenerationConfig, DefaultsPerStage) {
  auto u = default_config(Stage::unlabeled);
  EXPECT_EQ(u.temperature, 1.3);
  EXPECT_EQ(u.top_p, 1.0);
  EXPECT_EQ(u.presence_penalty, 0.3);
  EXPECT_EQ(u.frequency_penalty, 0.3);
  auto p = default_config(Stage::positive);
  EXPECT_EQ(p.temperature, 1.0);
  EXPECT_EQ(p.top_p, 0.9);
  EXPECT_EQ(p.presence_penalty, 0.0);
  auto n = default_config(Stage::hard_negative);
  EXPECT_EQ(n.top_p, 0.95);
  EXPECT_EQ(u.model, "gpt-3.5-turbo-0301");
}

TEST(GenerationConfig, Validation) {
  GenerationConfig c;
  c.temperature = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.top_p = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.top_p = 1.0000001;
  EXPECT_THROW(c.validate(), ConfigError);
  c.top_p = 1.0;
  c.max_tokens = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.max_tokens = 64;
  EXPECT_NO_THROW(c.validate());
}

TEST(GenerationConfig, FromJsonOverlaysAndRejectsUnknown) {
  auto c = GenerationConfig::from_json(json{{"temperature", 0.7}}, default_config(Stage::positive),
                                       "configs.positive");
  EXPECT_EQ(c.temperature, 0.7);
  EXPECT_EQ(c.top_p, 0.9);
  try {
    GenerationConfig::from_json(json{{"temprature", 0.7}}, {}, "configs.positive");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("configs.positive.temprature"), std::string::npos);
  }
  EXPECT_THROW(GenerationConfig::from_json(json{{"top_p", 2}}, {}, "x"), ConfigError);
}

TEST(RequestKey, StableAndSensitive) {
  GenerationConfig c;
  auto a = canonical_request_key(chat("hello"), c);
  EXPECT_EQ(a, canonical_request_key(chat("hello"), c));
  EXPECT_EQ(a.size(), 64u);
  EXPECT_NE(a, canonical_request_key(chat("hellp"), c));
  GenerationConfig hot = c;
  hot.temperature = 1.3;
  EXPECT_NE(a, canonical_request_key(chat("hello"), hot));
  GenerationConfig capped = c;
  capped.max_tokens = 100;
  EXPECT_NE(a, canonical_request_key(chat("hello"), capped));
  // Message order is part of the identity.
  pools::ChatTranscript t1{{{pools::Role::system, "s"},
                            {pools::Role::user, "a"},
                            {pools::Role::assistant, "b"},
                            {pools::Role::user, "c"}}};
  pools::ChatTranscript t2{{{pools::Role::system, "s"},
                            {pools::Role::user, "c"},
                            {pools::Role::assistant, "b"},
                            {pools::Role::user, "a"}}};
  EXPECT_NE(canonical_request_key(t1, c), canonical_request_key(t2, c));
}

TEST(RequestKey, InsensitiveToSerializedFieldOrder) {
  GenerationConfig c;
  json body = request_body(chat("hello"), c);
  // Re-encode with the fields inserted in reverse order; the canonical dump
  // must not change.
  std::string reordered = "{";
  std::vector<std::string> keys;
  for (auto& [k, v] : body.items()) keys.push_back(k);
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) {
    if (reordered.size() > 1) reordered += ",";
    reordered += json(*it).dump() + ":" + body[*it].dump();
  }
  reordered += "}";
  EXPECT_EQ(json::parse(reordered).dump(), body.dump());
}

TEST(RequestKey, FrozenValue) {
  // Pins the canonical encoding; a change here invalidates recorded fixtures.
  GenerationConfig c;
  json body = request_body(chat("hello"), c);
  EXPECT_EQ(body.dump(),
            R"({"frequency_penalty":0.0,"messages":[{"content":"You are a helpful assistant.",)"
            R"("role":"system"},{"content":"hello","role":"user"}],"model":"gpt-3.5-turbo-0301",)"
            R"("presence_penalty":0.0,"temperature":1.0,"top_p":1.0})");
  EXPECT_EQ(canonical_request_key(chat("hello"), c), sha256_hex(body.dump()));
}

TEST(Cost, PaperPrices) {
  PriceTable prices;
  EXPECT_EQ(estimate_cost({0, 0}, prices).picodollars(), 0);
  EXPECT_EQ(estimate_cost({1000, 0}, prices).to_string(), "0.001500");
  EXPECT_EQ(estimate_cost({0, 1000}, prices).to_string(), "0.002000");
  EXPECT_EQ(estimate_cost({1, 0}, prices).picodollars(), 1'500'000);
  EXPECT_EQ(PriceTable::from_dollars(0.0015, 0.002), prices);
}

TEST(Cost, PerSentenceAveragesSumToTriplet) {
  PriceTable prices;
  Money pos = estimate_cost({420, 20}, prices);
  Money neg = estimate_cost({480, 20}, prices);
  Money unl_call = estimate_cost({600, 250}, prices);  // one call yields 20 sentences
  EXPECT_EQ(pos.to_string(), "0.000670");
  EXPECT_EQ(neg.to_string(), "0.000760");
  EXPECT_EQ(Money::from_picodollars(unl_call.picodollars() / 20).to_string(), "0.000070");
  Money triplet = pos + neg + Money::from_picodollars(unl_call.picodollars() / 20);
  EXPECT_EQ(triplet.to_string(), "0.001500");
}

TEST(Money, Rounding) {
  EXPECT_EQ(Money::from_picodollars(500'000).to_string(6), "0.000001");
  EXPECT_EQ(Money::from_picodollars(499'999).to_string(6), "0.000000");
  EXPECT_EQ(Money::from_picodollars(-500'000).to_string(6), "-0.000001");
  EXPECT_EQ(Money::from_picodollars(1'500'000'000'000).to_string(2), "1.50");
  EXPECT_EQ(Money::from_picodollars(7).to_string(12), "0.000000000007");
  EXPECT_EQ(Money::from_dollars(1.5).picodollars(), 1'500'000'000'000);
}

TEST(Ledger, ConservationAgainstEventLog) {
  TempDir dir;
  auto log = dir / "ledger.jsonl";
  CostLedger ledger(PriceTable{}, log);
  Rng rng(3);
  std::map<Stage, StageTotals> expect;
  for (int i = 0; i < 300; ++i) {
    Stage s = kAllStages[rng.uniform_index(3)];
    Usage u{static_cast<std::int64_t>(rng.uniform_index(2000)),
            static_cast<std::int64_t>(rng.uniform_index(500))};
    bool ok = rng.bernoulli(0.9);
    ledger.record(s, u, ok);
    auto& e = expect[s];
    e.usage += u;
    e.cost += estimate_cost(u, ledger.prices());
    ++e.requests;
    if (!ok) ++e.failures;
  }
  CostLedger folded = CostLedger::fold_event_log(log);
  for (Stage s : kAllStages) {
    EXPECT_EQ(ledger.totals(s), expect[s]);
    EXPECT_EQ(folded.totals(s), ledger.totals(s));
  }
  EXPECT_EQ(folded.summary_json(), ledger.summary_json());
}

TEST(Ledger, FoldRejectsTamperedCost) {
  TempDir dir;
  auto log = dir / "ledger.jsonl";
  {
    CostLedger ledger(PriceTable{}, log);
    ledger.record(Stage::positive, {100, 10}, true);
  }
  json e = json::parse(read_nonempty_lines(log).at(0));
  e["cost_pico"] = 1;
  write_file_atomic(log, e.dump() + "\n");
  EXPECT_THROW(CostLedger::fold_event_log(log), IoError);
}

TEST(Parse, CompletionBody) {
  auto c = parse_completion_body(ok_body("A room in the hotel.", 12, 7));
  EXPECT_EQ(c.text, "A room in the hotel.");
  EXPECT_EQ(c.usage, (Usage{12, 7}));
  auto no_usage = parse_completion_body(
      R"({"choices":[{"message":{"role":"assistant","content":"x"}}]})");
  EXPECT_EQ(no_usage.usage, (Usage{0, 0}));
  EXPECT_THROW(parse_completion_body("not json"), ResponseFormatError);
  EXPECT_THROW(parse_completion_body(R"({"choices":[]})"), ResponseFormatError);
  EXPECT_THROW(parse_completion_body(R"({"choices":[{"message":{"content":3}}]})"),
               ResponseFormatError);
  EXPECT_THROW(parse_completion_body(
                   R"({"choices":[{"message":{"content":"x"}}],"usage":{"prompt_tokens":-1}})"),
               ResponseFormatError);
}

TEST(Gateway, RecordThenReplayIsByteIdentical) {
  TempDir dir;
  auto path = dir / "fx.jsonl";
  const std::string paraphrase =
      "One person from our group will execute your instructions with great attention to detail.";
  auto transport = std::make_shared<ScriptedTransport>(
      std::deque<ScriptedTransport::Step>{{200, ok_body(paraphrase, 50, 18)}});
  GenerationConfig cfg = default_config(Stage::positive);
  auto t = chat("The input sentence is: One of our number will carry out your instructions "
                "minutely.\nWhat is your generated sentence?");
  {
    Gateway rec(BackendMode::record, transport, std::make_shared<FixtureStore>(path));
    EXPECT_EQ(rec.complete(t, cfg).text, paraphrase);
  }
  ASSERT_EQ(transport->paths.size(), 1u);
  EXPECT_EQ(transport->paths[0], "/v1/chat/completions");
  Gateway replay(BackendMode::replay, nullptr, std::make_shared<FixtureStore>(path));
  auto c = replay.complete(t, cfg);
  EXPECT_EQ(c.text, paraphrase);
  EXPECT_EQ(c.usage, (Usage{50, 18}));
  // Nothing matches a different config.
  GenerationConfig other = cfg;
  other.top_p = 0.95;
  EXPECT_THROW(replay.complete(t, other), ReplayMissError);
  // Or a later occurrence that was never recorded.
  EXPECT_THROW(replay.complete(CompletionRequest{t, cfg, 1}), ReplayMissError);
}

TEST(Gateway, OccurrencesKeepIdenticalRequestsApart) {
  auto store = std::make_shared<FixtureStore>();
  auto transport = std::make_shared<ScriptedTransport>(std::deque<ScriptedTransport::Step>{
      {200, ok_body("first")}, {200, ok_body("second")}});
  Gateway rec(BackendMode::record, transport, store);
  auto t = chat("same");
  OccurrenceCounter occ;
  std::string key = canonical_request_key(t, {});
  EXPECT_EQ(rec.complete({t, {}, occ.next(key)}).text, "first");
  EXPECT_EQ(rec.complete({t, {}, occ.next(key)}).text, "second");
  Gateway replay(BackendMode::replay, nullptr, store);
  EXPECT_EQ(replay.complete({t, {}, 1}).text, "second");
  EXPECT_EQ(replay.complete({t, {}, 0}).text, "first");
}

TEST(FixtureStore, FirstWriteWinsAndSurvivesReload) {
  TempDir dir;
  auto path = dir / "fx.jsonl";
  {
    FixtureStore s(path);
    s.append("k", 0, json::object(), {"a", {1, 2}});
    s.append("k", 0, json::object(), {"b", {1, 2}});
    s.append("k", 1, json::object(), {"c", {3, 4}});
  }
  FixtureStore s(path);
  EXPECT_EQ(s.size(), 2u);
  EXPECT_EQ(s.lookup("k", 0)->text, "a");
  EXPECT_EQ(s.lookup("k", 1)->usage, (Usage{3, 4}));
  EXPECT_FALSE(s.lookup("k", 2));
  append_line(path, "{broken");
  try {
    FixtureStore bad(path);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos);
  }
}

TEST(Gateway, UnreachableEndpointFailsAfterFiveAttempts) {
  SleepLog sleeps;
  auto transport = std::make_shared<ScriptedTransport>(
      std::deque<ScriptedTransport::Step>{}, ScriptedTransport::Step{0, "", true});
  Gateway g(BackendMode::live, transport, nullptr, sleeps.policy());
  try {
    g.complete(chat("x"), {});
    FAIL();
  } catch (const TransportError& e) {
    EXPECT_NE(std::string(e.what()).find("after 5 attempts"), std::string::npos);
  }
  EXPECT_EQ(transport->bodies.size(), 5u);
  EXPECT_EQ(sleeps.delays.size(), 4u);
}

TEST(Gateway, RealSocketUnreachable) {
  SleepLog sleeps;
  HttpTransportOptions o;
  o.base_url = "http://127.0.0.1:1";
  o.connect_timeout = std::chrono::seconds(2);
  Gateway g(BackendMode::live, std::make_shared<HttpTransport>(o), nullptr, sleeps.policy());
  EXPECT_THROW(g.complete(chat("x"), {}), TransportError);
  EXPECT_EQ(sleeps.delays.size(), 4u);
}

TEST(Gateway, RateLimitIsRetried) {
  SleepLog sleeps;
  auto transport = std::make_shared<ScriptedTransport>(std::deque<ScriptedTransport::Step>{
      {429, "{}"}, {429, "{}"}, {503, "busy"}, {200, ok_body("done")}});
  Gateway g(BackendMode::live, transport, nullptr, sleeps.policy());
  EXPECT_EQ(g.complete(chat("x"), {}).text, "done");
  EXPECT_EQ(sleeps.delays.size(), 3u);
}

TEST(Gateway, PersistentRateLimitRaises) {
  SleepLog sleeps;
  auto transport = std::make_shared<ScriptedTransport>(std::deque<ScriptedTransport::Step>{},
                                                       ScriptedTransport::Step{429, "{}"});
  Gateway g(BackendMode::live, transport, nullptr, sleeps.policy());
  EXPECT_THROW(g.complete(chat("x"), {}), RateLimitError);
  EXPECT_EQ(transport->bodies.size(), 5u);
}

TEST(Gateway, ClientErrorsAndBadBodiesAreNotRetried) {
  SleepLog sleeps;
  auto t400 = std::make_shared<ScriptedTransport>(
      std::deque<ScriptedTransport::Step>{{400, "bad request"}});
  Gateway g(BackendMode::live, t400, nullptr, sleeps.policy());
  try {
    g.complete(chat("x"), {});
    FAIL();
  } catch (const HttpStatusError& e) {
    EXPECT_EQ(e.status(), 400);
  }
  auto tbad = std::make_shared<ScriptedTransport>(
      std::deque<ScriptedTransport::Step>{{200, "<html>"}});
  Gateway g2(BackendMode::live, tbad, nullptr, sleeps.policy());
  EXPECT_THROW(g2.complete(chat("x"), {}), ResponseFormatError);
  EXPECT_TRUE(sleeps.delays.empty());
}

TEST(Gateway, RejectsInvalidTranscript) {
  auto transport = std::make_shared<ScriptedTransport>(std::deque<ScriptedTransport::Step>{});
  Gateway g(BackendMode::live, transport, nullptr);
  pools::ChatTranscript bad{{{pools::Role::user, "no system"}}};
  EXPECT_THROW(g.complete(bad, {}), PoolError);
  EXPECT_TRUE(transport->bodies.empty());
}

TEST(Gateway, ModeRequirements) {
  EXPECT_THROW(Gateway(BackendMode::replay, nullptr, nullptr), ConfigError);
  EXPECT_THROW(Gateway(BackendMode::live, nullptr, nullptr), ConfigError);
  auto t = std::make_shared<ScriptedTransport>(std::deque<ScriptedTransport::Step>{});
  EXPECT_THROW(Gateway(BackendMode::record, t, nullptr), ConfigError);
  EXPECT_EQ(parse_backend_mode("replay"), BackendMode::replay);
  EXPECT_THROW(parse_backend_mode("offline"), ConfigError);
}

TEST(Backoff, CeilingsAreMonotoneAndCapped) {
  RetryPolicy p;
  std::vector<long> expect{1000, 2000, 4000, 8000, 16000, 32000, 32000, 32000};
  for (int r = 0; r < 8; ++r) EXPECT_EQ(p.ceiling(r).count(), expect[r]) << r;
  for (int r = 1; r < 64; ++r) EXPECT_GE(p.ceiling(r), p.ceiling(r - 1));
}

TEST(Backoff, JitterStaysUnderCeiling) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    SleepLog sleeps;
    auto transport = std::make_shared<ScriptedTransport>(
        std::deque<ScriptedTransport::Step>{}, ScriptedTransport::Step{0, "", true});
    auto policy = sleeps.policy(seed);
    Gateway g(BackendMode::live, transport, nullptr, policy);
    EXPECT_THROW(g.complete(chat("x"), {}), TransportError);
    for (std::size_t i = 0; i < sleeps.delays.size(); ++i) {
      EXPECT_GE(sleeps.delays[i].count(), 0);
      EXPECT_LE(sleeps.delays[i], policy.ceiling(static_cast<int>(i)));
    }
  }
}

// --- throttled_map -----------------------------------------------------------

TEST(Throttle, SingleSlotIsSequential) {
  std::atomic<int> active{0};
  std::atomic<int> peak{0};
  std::vector<std::size_t> order;
  std::mutex mu;
  auto out = throttled_map<std::size_t>(
      20,
      [&](std::size_t i) {
        int now = ++active;
        peak = std::max(peak.load(), now);
        {
          std::lock_guard lock(mu);
          order.push_back(i);
        }
        std::this_thread::sleep_for(std::chrono::microseconds(200));
        --active;
        return i * 2;
      },
      {1});
  EXPECT_EQ(peak.load(), 1);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(order[i], i);
    EXPECT_EQ(out[i], i * 2);
  }
}

TEST(Throttle, OutputsInInputOrderUnderConcurrency) {
  std::atomic<int> active{0};
  std::atomic<int> peak{0};
  std::vector<std::size_t> commits;
  auto out = throttled_map<std::string>(
      100,
      [&](std::size_t i) {
        int now = ++active;
        int prev = peak.load();
        while (now > prev && !peak.compare_exchange_weak(prev, now)) {
        }
        // Later indices finish sooner, so completion order is scrambled.
        std::this_thread::sleep_for(std::chrono::microseconds(50 * ((i * 37) % 11)));
        --active;
        return "r" + std::to_string(i);
      },
      {8}, [&](std::size_t i, const std::string&) { commits.push_back(i); });
  ASSERT_EQ(out.size(), 100u);
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_EQ(out[i], "r" + std::to_string(i));
    EXPECT_EQ(commits[i], i);
  }
  EXPECT_LE(peak.load(), 8);
}

TEST(Throttle, RateLimitSpacesStarts) {
  auto t0 = std::chrono::steady_clock::now();
  throttled_map<int>(11, [](std::size_t) { return 0; }, {4, 100.0});
  auto elapsed = std::chrono::steady_clock::now() - t0;
  // 11 starts at 100/s need at least 10 intervals of 10 ms.
  EXPECT_GE(elapsed, std::chrono::milliseconds(99));
}

TEST(Throttle, PropagatesLowestErrorAfterDraining) {
  std::atomic<int> finished{0};
  std::vector<std::size_t> commits;
  try {
    throttled_map<int>(
        50,
        [&](std::size_t i) {
          std::this_thread::sleep_for(std::chrono::microseconds(100));
          if (i == 7 || i == 9) throw DatasetError("boom " + std::to_string(i));
          ++finished;
          return 1;
        },
        {4}, [&](std::size_t i, const int&) { commits.push_back(i); });
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_STREQ(e.what(), "boom 7");
  }
  EXPECT_LT(finished.load(), 50);
  ASSERT_EQ(commits.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(commits[i], i);
}

TEST(Throttle, CancelFlagStopsNewWork) {
  std::atomic<bool> cancel{false};
  std::atomic<int> started{0};
  ThrottleOptions opts{2, 0.0, &cancel};
  EXPECT_THROW(throttled_map<int>(
                   100,
                   [&](std::size_t i) {
                     ++started;
                     if (i == 3) cancel = true;
                     return 0;
                   },
                   opts),
               CancelledError);
  EXPECT_LT(started.load(), 100);
}

TEST(Throttle, RateLimitedBackendRecoversThroughRetry) {
  // Every request sees a 429 on its first attempt.
  class FirstAttempt429 : public Transport {
   public:
    HttpReply post(const std::string&, const std::string& body) override {
      std::lock_guard lock(mu_);
      if (seen_.insert(body).second) return {429, "{}"};
      return {200, ok_body("ok:" + std::to_string(body.size()))};
    }

   private:
    std::mutex mu_;
    std::set<std::string> seen_;
  };
  RetryPolicy policy;
  std::atomic<int> retries{0};
  policy.sleep = [&](std::chrono::milliseconds) { ++retries; };
  Gateway g(BackendMode::live, std::make_shared<FirstAttempt429>(), nullptr, policy);
  auto out = throttled_map<std::string>(
      40, [&](std::size_t i) { return g.complete(chat("q" + std::to_string(i)), {}).text; }, {8});
  EXPECT_EQ(out.size(), 40u);
  EXPECT_EQ(retries.load(), 40);
  for (auto& s : out) EXPECT_EQ(s.rfind("ok:", 0), 0u);
}
