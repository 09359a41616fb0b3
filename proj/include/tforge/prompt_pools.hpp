#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "tforge/rng.hpp"

namespace tforge::pools {

enum class PromptKind { positive, hard_negative, unlabeled, image_caption };
enum class ExemplarKind { positive, hard_negative, unlabeled };

std::string_view to_string(PromptKind kind);
std::string_view to_string(ExemplarKind kind);

struct PromptTemplate {
  std::string id;
  PromptKind kind = PromptKind::positive;
  // Single-brace named placeholders, "{{" and "}}" for literal braces.
  std::string text;
  double weight = 1.0;
};

struct Exemplar {
  std::string id;
  ExemplarKind kind = ExemplarKind::positive;
  std::string input;
  std::string output;
  // Unlabeled exemplars may be tied to the genre they demonstrate.
  std::optional<int> genre_id;
};

struct Genre {
  int id = 0;
  std::string description;
  // Caption-style genres draw their template from the image-caption pool.
  bool caption_style = false;
};

struct TopicList {
  std::vector<std::string> topics;
};

struct SystemMessages {
  std::string positive =
      "You are a helpful assistant that generates a paraphrased sentence of the input.";
  std::string hard_negative =
      "You are a helpful assistant that generates a sentence with a different "
      "meaning from the input.";
  std::string unlabeled =
      "You are a helpful assistant that generates diverse sentences.";
};

// Immutable after load; safe to share between workers.
struct PoolSet {
  std::vector<PromptTemplate> positive_prompts;
  std::vector<PromptTemplate> hard_negative_prompts;
  std::vector<PromptTemplate> unlabeled_prompts;
  std::vector<PromptTemplate> caption_prompts;
  std::vector<Exemplar> positive_exemplars;
  std::vector<Exemplar> hard_negative_exemplars;
  std::vector<Exemplar> unlabeled_exemplars;
  std::vector<Genre> genres;
  TopicList topics;
  SystemMessages system;
  // Fixed template for the no-genre/no-topic ablation; only {number} is used.
  std::optional<PromptTemplate> naive_prompt;

  std::string source_path;
  std::string source_sha256;

  const std::vector<Exemplar>& exemplars(ExemplarKind kind) const;
  const PromptTemplate* find_prompt(std::string_view id) const;
  const Exemplar* find_exemplar(std::string_view id) const;
  const Genre* find_genre(int id) const;
};

enum class Role { system, user, assistant };
std::string_view to_string(Role role);

struct ChatMessage {
  Role role = Role::user;
  std::string content;
  bool operator==(const ChatMessage&) const = default;
};

// First message is the system prompt, then user/assistant strictly
// alternate, ending on a user turn.
struct ChatTranscript {
  std::vector<ChatMessage> messages;

  // Throws PoolError when the shape is wrong or a "{name}" placeholder
  // survives in any message.
  void validate() const;
  nlohmann::json to_json() const;
};

// Placeholder handling.
std::vector<std::string> placeholders(std::string_view text);
std::string render(std::string_view text,
                   const std::map<std::string, std::string, std::less<>>& values);
bool contains_placeholder(std::string_view text);

constexpr std::size_t kTopicsPerPrompt = 6;
constexpr std::string_view kInputMarker = "The input sentence is: ";
constexpr std::string_view kOutputQuestion = "What is your generated sentence?";

PoolSet load_pools(const std::filesystem::path& path);
PoolSet parse_pools(const nlohmann::json& doc, std::string_view origin = "<memory>");
// Checks every type invariant, throwing PoolError naming the offending entry.
void validate_pools(const PoolSet& pools, std::size_t few_shot_k = 0);

const PromptTemplate& sample_prompt(std::span<const PromptTemplate> pool, Rng& rng);
std::vector<Exemplar> sample_exemplars(std::span<const Exemplar> pool, std::size_t k,
                                       Rng& rng);

ChatTranscript build_annotation_chat(const PromptTemplate& prompt,
                                     std::span<const Exemplar> exemplars,
                                     std::string_view input_sentence,
                                     std::string_view system_message);
ChatTranscript build_annotation_chat(const PromptTemplate& prompt,
                                     std::span<const Exemplar> exemplars,
                                     std::string_view input_sentence);

struct GenreTopics {
  Genre genre;
  std::vector<std::string> topics;
};
GenreTopics sample_genre_and_topics(const PoolSet& pools, Rng& rng);

// Fills an unlabeled or image-caption template. caption_examples feeds the
// {example_i} slots some caption templates carry.
std::string fill_unlabeled_template(const PromptTemplate& prompt, const Genre& genre,
                                    std::span<const std::string> topics,
                                    std::size_t count,
                                    std::span<const std::string> caption_examples = {});

ChatTranscript build_unlabeled_prompt(const PromptTemplate& prompt, const Genre& genre,
                                      std::span<const std::string> topics,
                                      std::size_t count, const Exemplar& exemplar,
                                      std::string_view system_message,
                                      std::span<const std::string> caption_examples = {});

// Number of {example_i} slots in a caption template.
std::size_t caption_example_slots(const PromptTemplate& prompt);

}  // namespace tforge::pools
