#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "tforge/llm_gateway.hpp"
#include "tforge/prompt_pools.hpp"

namespace tforge::synth {

enum class Mode { pooled, naive };
enum class Source { scratch, partial };
std::string_view to_string(Mode mode);
std::string_view to_string(Source source);
Mode parse_mode(std::string_view s);
Source parse_source(std::string_view s);

inline constexpr std::size_t kMaxWords = 32;
inline constexpr std::size_t kSentencesPerCall = 20;
inline constexpr std::size_t kFewShot = 5;

struct UnlabeledSentence {
  std::string text;
  int genre_id = 0;  // 0 in naive mode
  std::vector<std::string> topics;
  std::string prompt_id;
  std::size_t batch_index = 0;
  std::string exemplar_id;

  nlohmann::json to_json() const;
  static UnlabeledSentence from_json(const nlohmann::json& j);
};

struct StageConfigs {
  llm::GenerationConfig unlabeled = llm::default_config(llm::Stage::unlabeled);
  llm::GenerationConfig positive = llm::default_config(llm::Stage::positive);
  llm::GenerationConfig hard_negative = llm::default_config(llm::Stage::hard_negative);

  const llm::GenerationConfig& for_stage(llm::Stage s) const;
  nlohmann::json to_json() const;
};

// Everything a synthesis run needs. The gateway and ledger are shared; the
// ledger may be null.
struct SynthContext {
  const pools::PoolSet* pools = nullptr;
  llm::Gateway* gateway = nullptr;
  llm::CostLedger* ledger = nullptr;
  std::uint64_t seed = 0;
  Mode mode = Mode::pooled;
  StageConfigs configs;
  std::size_t few_shot_k = kFewShot;
  std::size_t max_in_flight = 1;
  double rate = 0.0;
  const std::atomic<bool>* cancel = nullptr;
  // Extra unlabeled calls allowed to make up for parse shortfalls.
  std::size_t shortfall_budget = 4;
};

struct ParsedList {
  std::vector<std::string> items;
  bool shortfall = false;
};

// Splits a numbered/bulleted model reply into sentences.
ParsedList parse_sentence_list(std::string_view raw, std::size_t expected);

// First nonempty line of an annotation reply, trimmed and unquoted.
std::string clean_single_sentence(std::string_view raw);

// Normal form used by dedup and the Triplet invariant.
std::string normalize_sentence(std::string_view s);

std::vector<std::string> filter_max_words(const std::vector<std::string>& sentences,
                                          std::size_t limit = kMaxWords);
std::vector<std::string> dedup(const std::vector<std::string>& sentences);

double distinct_ngram_ratio(const std::vector<std::string>& sentences, std::size_t n);

// Issues ceil(n/20) calls of 20 sentences (plus makeup calls for
// shortfalls) and returns exactly n sentences in batch order.
std::vector<UnlabeledSentence> generate_unlabeled(std::size_t n, const SynthContext& ctx);

struct Annotation {
  llm::Stage stage = llm::Stage::positive;
  std::string text;  // empty when the attempt failed
  std::string prompt_id;
  std::vector<std::string> exemplar_ids;
  int attempts = 0;
  std::string failure;  // "empty completion", "echoes input"
  bool ok() const { return failure.empty(); }
};

// The chat for one annotation attempt. Sampling uses the stream for
// (stage, attempt, index), so it does not depend on any other sentence.
struct AnnotationRequest {
  pools::ChatTranscript transcript;
  std::string prompt_id;
  std::vector<std::string> exemplar_ids;
};
AnnotationRequest build_annotation_request(llm::Stage stage, std::string_view sentence,
                                           std::size_t index, int attempt,
                                           const SynthContext& ctx);

// One annotation call: builds the chat, completes it and checks the reply.
// Content failures come back in Annotation::failure; gateway errors throw.
Annotation annotate_once(llm::Stage stage, std::string_view sentence, std::size_t index,
                         int attempt, const SynthContext& ctx, std::size_t occurrence = 0);

// Single-sentence forms: one attempt plus one resample. Throw
// EmptyCompletionError or DatasetError when both attempts fail.
Annotation annotate_positive(std::string_view sentence, const SynthContext& ctx,
                             std::size_t index = 0);
Annotation annotate_hard_negative(std::string_view sentence, const SynthContext& ctx,
                                  std::size_t index = 0);

struct SentenceAnnotations {
  Annotation positive;
  Annotation hard_negative;
};

// Annotates every sentence with a positive and a hard negative: all first
// attempts, then a single resample of the failed ones. Requests run through
// throttled_map; ledger entries are recorded in input order.
std::vector<SentenceAnnotations> annotate_all(const std::vector<std::string>& sentences,
                                              const SynthContext& ctx);

struct Triplet {
  std::string sent0;
  std::string sent1;
  std::string hard_neg;
  nlohmann::json provenance = nlohmann::json::object();

  // Throws DatasetError when a text is empty or equals sent0 after
  // normalization.
  void validate() const;
  nlohmann::json to_json() const;
  static Triplet from_json(const nlohmann::json& j);
};

struct InputSentence {
  std::string text;
  std::optional<UnlabeledSentence> origin;  // set for scratch inputs
};

struct AssembleOptions {
  Source source = Source::partial;
  bool dedup = false;
  bool filter = true;
};

struct DatasetManifest {
  std::size_t n = 0;
  nlohmann::json doc;  // full manifest.json contents
};

inline constexpr std::string_view kDataFile = "data.jsonl";
inline constexpr std::string_view kManifestFile = "manifest.json";
inline constexpr std::string_view kSkippedFile = "skipped.jsonl";

// Filters and dedups the inputs, annotates them, and writes data.jsonl,
// skipped.jsonl and manifest.json into out_dir.
DatasetManifest assemble_dataset(const std::vector<InputSentence>& inputs, const SynthContext& ctx,
                                 const AssembleOptions& options,
                                 const std::filesystem::path& out_dir);

// Reads data JSONL or headerless three-column CSV, chosen by extension.
std::vector<Triplet> read_triplets(const std::filesystem::path& path);
void write_triplets(const std::filesystem::path& path, const std::vector<Triplet>& triplets);

std::string csv_field(std::string_view s);
std::vector<std::vector<std::string>> parse_csv(std::string_view text);
void export_csv(const std::vector<Triplet>& triplets, const std::filesystem::path& path);

std::vector<InputSentence> read_partial_input(const std::filesystem::path& path);
std::vector<InputSentence> read_scratch_input(const std::filesystem::path& path);

struct ValidationReport {
  std::size_t records = 0;
  std::vector<std::string> problems;
  bool ok() const { return problems.empty(); }
};

// Checks a dataset directory: manifest N and data hash, Triplet invariants,
// the word limit, and that provenance ids resolve against the pool file.
ValidationReport validate_dataset(const std::filesystem::path& dir,
                                  const pools::PoolSet* pools_override = nullptr);

}  // namespace tforge::synth
