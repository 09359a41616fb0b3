#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "tforge/llm_gateway.hpp"
#include "tforge/prompt_pools.hpp"

namespace tforge::mock {

// Offline stand-in for a chat-completion model.
//
// Unlabeled-generation requests are answered with numbered sentences whose
// vocabulary is keyed to the topic and genre strings found in the prompt;
// without any topic the generator falls back to a small generic vocabulary.
// Annotation requests are answered by rule: a handful of known sentence pairs,
// otherwise synonym substitution (positive) or antonym swap / negation
// (hard negative). The stage of an annotation is read from the system
// message: one mentioning "paraphras" is positive.
struct MockOptions {
  std::uint64_t seed = 0;
  std::vector<std::string> topics;
  std::vector<std::string> genres;
  // Fraction of generated sentences padded past 32 words.
  double overlong_rate = 0.03;
  // Probability that the first attempt of a request body gets HTTP 429.
  double rate_limit_rate = 0.0;
  // Fixed usage to report per stage instead of the chars/4 estimate.
  std::optional<llm::Usage> unlabeled_usage;
  std::optional<llm::Usage> positive_usage;
  std::optional<llm::Usage> hard_negative_usage;
  // When set and returning a value, that text replaces the reply.
  // Arguments: stage, annotated input sentence (empty for unlabeled), and the
  // 0-based count of earlier requests with the same body.
  std::function<std::optional<std::string>(llm::Stage, std::string_view, std::size_t)>
      override_reply;
};

// Options that recognize the topics and genres of a pool set.
MockOptions options_for(const pools::PoolSet& pools);

class MockLlm {
 public:
  explicit MockLlm(MockOptions options);

  // Answers an OpenAI-style request body. Thread-safe.
  llm::Completion respond(const nlohmann::json& request_body);

  static llm::Stage detect_stage(const nlohmann::json& messages);

  const MockOptions& options() const { return options_; }

 private:
  std::string unlabeled_reply(std::string_view prompt, Rng& rng) const;

  MockOptions options_;
  std::mutex mu_;
  std::map<std::string, std::size_t> seen_;
};

// OpenAI-shaped response body around a completion.
std::string completion_body(const llm::Completion& completion);

// A Transport backed by a MockLlm, with optional 429 injection.
class MockTransport : public llm::Transport {
 public:
  explicit MockTransport(MockOptions options) : llm_(std::move(options)) {}

  llm::HttpReply post(const std::string& path, const std::string& body) override;
  // Handles a request the way an HTTP server would.
  llm::HttpReply handle(const std::string& path, const std::string& body);

  std::size_t requests() const;
  std::size_t rate_limited() const;

 private:
  MockLlm llm_;
  mutable std::mutex mu_;
  std::set<std::string> attempted_;
  std::size_t requests_ = 0;
  std::size_t rate_limited_ = 0;
};

// Rule-based rewrites used for annotation replies.
std::string paraphrase(std::string_view sentence, Rng& rng);
std::string contradict(std::string_view sentence, Rng& rng);

}  // namespace tforge::mock
