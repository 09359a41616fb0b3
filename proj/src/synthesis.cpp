#include "tforge/synthesis.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <unordered_set>

#include "tforge/error.hpp"
#include "tforge/hash.hpp"
#include "tforge/text.hpp"
#include "tforge/throttle.hpp"

namespace tforge::synth {

using nlohmann::json;
using llm::Stage;

std::string_view to_string(Mode mode) { return mode == Mode::pooled ? "pooled" : "naive"; }
std::string_view to_string(Source source) {
  return source == Source::scratch ? "scratch" : "partial";
}

Mode parse_mode(std::string_view s) {
  if (s == "pooled") return Mode::pooled;
  if (s == "naive") return Mode::naive;
  throw ConfigError("unknown mode '" + std::string(s) + "' (expected pooled or naive)");
}

Source parse_source(std::string_view s) {
  if (s == "scratch") return Source::scratch;
  if (s == "partial") return Source::partial;
  throw DatasetError("unknown source '" + std::string(s) + "'");
}

json UnlabeledSentence::to_json() const {
  return json{{"text", text},           {"genre_id", genre_id},
              {"topics", topics},       {"prompt_id", prompt_id},
              {"batch_index", batch_index}, {"exemplar_id", exemplar_id}};
}

UnlabeledSentence UnlabeledSentence::from_json(const json& j) {
  UnlabeledSentence u;
  u.text = j.at("text").get<std::string>();
  u.genre_id = j.value("genre_id", 0);
  u.topics = j.value("topics", std::vector<std::string>{});
  u.prompt_id = j.value("prompt_id", "");
  u.batch_index = j.value("batch_index", std::size_t{0});
  u.exemplar_id = j.value("exemplar_id", "");
  return u;
}

const llm::GenerationConfig& StageConfigs::for_stage(Stage s) const {
  switch (s) {
    case Stage::unlabeled: return unlabeled;
    case Stage::positive: return positive;
    case Stage::hard_negative: return hard_negative;
  }
  return positive;
}

json StageConfigs::to_json() const {
  return json{{"unlabeled", unlabeled.to_json()},
              {"positive", positive.to_json()},
              {"hard_negative", hard_negative.to_json()}};
}

// --- text rules -------------------------------------------------------------

namespace {

std::string_view strip_enumeration(std::string_view line) {
  std::size_t i = 0;
  while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i;
  if (i > 0 && i < line.size() && (line[i] == '.' || line[i] == ')')) return line.substr(i + 1);
  if (!line.empty() && (line[0] == '-' || line[0] == '*')) return line.substr(1);
  return line;
}

std::string strip_quotes(std::string_view s) {
  s = trim(s);
  static const std::pair<std::string_view, std::string_view> kPairs[] = {
      {"\"", "\""}, {"'", "'"}, {"\xE2\x80\x9C", "\xE2\x80\x9D"}, {"`", "`"}};
  for (const auto& [open, close] : kPairs) {
    if (s.size() >= open.size() + close.size() && s.starts_with(open) && s.ends_with(close)) {
      s = trim(s.substr(open.size(), s.size() - open.size() - close.size()));
      break;
    }
  }
  return std::string(s);
}

const pools::PoolSet& pools_of(const SynthContext& ctx) {
  if (!ctx.pools) throw UsageError("synthesis context has no pool set");
  return *ctx.pools;
}

llm::Gateway& gateway_of(const SynthContext& ctx) {
  if (!ctx.gateway) throw UsageError("synthesis context has no gateway");
  return *ctx.gateway;
}

llm::ThrottleOptions throttle_of(const SynthContext& ctx) {
  return {std::max<std::size_t>(ctx.max_in_flight, 1), ctx.rate, ctx.cancel};
}

}  // namespace

ParsedList parse_sentence_list(std::string_view raw, std::size_t expected) {
  ParsedList out;
  for (const std::string& line : split_lines(raw)) {
    std::string text = strip_quotes(strip_enumeration(trim(line)));
    if (text.empty()) continue;
    if (out.items.size() < expected) out.items.push_back(std::move(text));
  }
  out.shortfall = out.items.size() < expected;
  return out;
}

std::string clean_single_sentence(std::string_view raw) {
  for (const std::string& line : split_lines(raw)) {
    std::string text = strip_quotes(line);
    if (!text.empty()) return text;
  }
  return {};
}

std::string normalize_sentence(std::string_view s) {
  std::string out = collapse_whitespace(to_lower_ascii(s));
  while (!out.empty() && (out.back() == '.' || out.back() == '!' || out.back() == '?' ||
                          out.back() == ' '))
    out.pop_back();
  return out;
}

std::vector<std::string> filter_max_words(const std::vector<std::string>& sentences,
                                          std::size_t limit) {
  if (limit < 1) throw UsageError("word limit must be at least 1");
  std::vector<std::string> kept;
  for (const auto& s : sentences)
    if (word_count(s) <= limit) kept.push_back(s);
  return kept;
}

std::vector<std::string> dedup(const std::vector<std::string>& sentences) {
  std::unordered_set<std::string> seen;
  std::vector<std::string> out;
  for (const auto& s : sentences)
    if (seen.insert(normalize_sentence(s)).second) out.push_back(s);
  return out;
}

double distinct_ngram_ratio(const std::vector<std::string>& sentences, std::size_t n) {
  if (n < 1) throw UsageError("n-gram order must be at least 1");
  if (sentences.empty()) throw DatasetError("distinct_ngram_ratio: empty corpus");
  std::set<std::vector<std::string_view>> unique;
  std::size_t total = 0;
  for (const auto& s : sentences) {
    auto words = split_words(s);
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
      unique.emplace(words.begin() + static_cast<std::ptrdiff_t>(i),
                     words.begin() + static_cast<std::ptrdiff_t>(i + n));
      ++total;
    }
  }
  if (total == 0) throw DatasetError("distinct_ngram_ratio: no sentence has " +
                                     std::to_string(n) + " words");
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

// --- unlabeled generation ---------------------------------------------------

namespace {

struct UnlabeledCall {
  pools::ChatTranscript transcript;
  UnlabeledSentence meta;  // everything but text
};

std::size_t listed_count(const pools::Exemplar& e) {
  return parse_sentence_list(e.output, 1000).items.size();
}

UnlabeledCall build_unlabeled_call(std::size_t batch, const SynthContext& ctx) {
  const pools::PoolSet& pools = pools_of(ctx);
  if (pools.unlabeled_exemplars.empty()) throw PoolError("pool has no unlabeled exemplars");
  UnlabeledCall call;
  call.meta.batch_index = batch;

  if (ctx.mode == Mode::naive) {
    if (!pools.naive_prompt) throw PoolError("pool file has no naive_prompt for naive mode");
    const pools::PromptTemplate& prompt = *pools.naive_prompt;
    const pools::Exemplar& ex = pools.unlabeled_exemplars.front();
    auto fill = [&](std::size_t count) {
      return pools::render(prompt.text, {{"number", std::to_string(count)}});
    };
    call.transcript.messages = {{pools::Role::system, pools.system.unlabeled},
                                {pools::Role::user, fill(listed_count(ex))},
                                {pools::Role::assistant, ex.output},
                                {pools::Role::user, fill(kSentencesPerCall)}};
    call.transcript.validate();
    call.meta.prompt_id = prompt.id;
    call.meta.exemplar_id = ex.id;
    return call;
  }

  Rng rng = derive_stream(ctx.seed, "unlabeled", batch);
  pools::GenreTopics gt = pools::sample_genre_and_topics(pools, rng);
  const auto& prompt_pool = gt.genre.caption_style && !pools.caption_prompts.empty()
                                ? pools.caption_prompts
                                : pools.unlabeled_prompts;
  const pools::PromptTemplate& prompt = pools::sample_prompt(prompt_pool, rng);

  // One-shot exemplar: same genre if possible, then same style.
  std::vector<const pools::Exemplar*> candidates;
  for (const auto& e : pools.unlabeled_exemplars)
    if (e.genre_id && *e.genre_id == gt.genre.id) candidates.push_back(&e);
  if (candidates.empty()) {
    for (const auto& e : pools.unlabeled_exemplars) {
      const pools::Genre* g = e.genre_id ? pools.find_genre(*e.genre_id) : nullptr;
      if ((g && g->caption_style) == gt.genre.caption_style) candidates.push_back(&e);
    }
  }
  if (candidates.empty())
    for (const auto& e : pools.unlabeled_exemplars) candidates.push_back(&e);
  const pools::Exemplar& ex = *candidates[rng.uniform_index(candidates.size())];

  std::vector<std::string> examples;
  if (std::size_t slots = pools::caption_example_slots(prompt); slots > 0) {
    std::vector<std::string> bank;
    for (const auto& e : pools.unlabeled_exemplars) {
      const pools::Genre* g = e.genre_id ? pools.find_genre(*e.genre_id) : nullptr;
      if (g && g->caption_style)
        for (auto& s : parse_sentence_list(e.output, 1000).items) bank.push_back(s);
    }
    if (bank.size() < slots)
      throw PoolError("template '" + prompt.id + "' needs " + std::to_string(slots) +
                      " caption examples, pool has " + std::to_string(bank.size()));
    for (std::size_t i = 0; i < slots; ++i) {
      std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(bank.size() - i));
      std::swap(bank[i], bank[j]);
      examples.push_back("\"" + bank[i] + "\"");
    }
  }

  call.transcript = pools::build_unlabeled_prompt(prompt, gt.genre, gt.topics, kSentencesPerCall,
                                                  ex, pools.system.unlabeled, examples);
  call.meta.genre_id = gt.genre.id;
  call.meta.topics = gt.topics;
  call.meta.prompt_id = prompt.id;
  call.meta.exemplar_id = ex.id;
  return call;
}

}  // namespace

std::vector<UnlabeledSentence> generate_unlabeled(std::size_t n, const SynthContext& ctx) {
  if (n < 1) throw UsageError("generate_unlabeled: n must be at least 1");
  llm::Gateway& gateway = gateway_of(ctx);
  const llm::GenerationConfig& config = ctx.configs.unlabeled;
  llm::OccurrenceCounter occurrences;

  std::vector<UnlabeledSentence> out;
  std::size_t next_batch = 0;
  std::size_t makeup_calls = 0;
  bool first_round = true;
  while (out.size() < n) {
    std::size_t calls = (n - out.size() + kSentencesPerCall - 1) / kSentencesPerCall;
    if (!first_round) {
      if (makeup_calls + calls > ctx.shortfall_budget) {
        throw DatasetError("unlabeled generation fell short: " + std::to_string(out.size()) +
                           " of " + std::to_string(n) + " sentences after " +
                           std::to_string(makeup_calls) + " makeup calls");
      }
      makeup_calls += calls;
    }
    first_round = false;

    std::vector<UnlabeledCall> batch;
    std::vector<llm::CompletionRequest> requests;
    for (std::size_t c = 0; c < calls; ++c) {
      batch.push_back(build_unlabeled_call(next_batch++, ctx));
      std::string key = llm::canonical_request_key(batch.back().transcript, config);
      requests.push_back({batch.back().transcript, config, occurrences.next(key)});
    }
    auto parsed = llm::throttled_map<std::pair<ParsedList, llm::Usage>>(
        calls,
        [&](std::size_t i) {
          llm::Completion c = gateway.complete(requests[i]);
          return std::pair{parse_sentence_list(c.text, kSentencesPerCall), c.usage};
        },
        throttle_of(ctx),
        [&](std::size_t, const std::pair<ParsedList, llm::Usage>& r) {
          if (ctx.ledger) ctx.ledger->record(Stage::unlabeled, r.second, !r.first.shortfall);
        });
    for (std::size_t c = 0; c < calls; ++c) {
      for (auto& text : parsed[c].first.items) {
        if (out.size() == n) break;
        UnlabeledSentence s = batch[c].meta;
        s.text = std::move(text);
        out.push_back(std::move(s));
      }
    }
  }
  return out;
}

// --- annotation -------------------------------------------------------------

AnnotationRequest build_annotation_request(Stage stage, std::string_view sentence,
                                           std::size_t index, int attempt,
                                           const SynthContext& ctx) {
  if (stage == Stage::unlabeled) throw UsageError("annotation stage must be positive or negative");
  if (trim(sentence).empty()) throw UsageError("cannot annotate an empty sentence");
  const pools::PoolSet& pools = pools_of(ctx);
  bool positive = stage == Stage::positive;
  const auto& prompts = positive ? pools.positive_prompts : pools.hard_negative_prompts;
  const auto& exemplars = positive ? pools.positive_exemplars : pools.hard_negative_exemplars;
  if (prompts.empty()) throw PoolError("pool has no " + std::string(llm::to_string(stage)) +
                                       " prompts");
  if (exemplars.size() < ctx.few_shot_k)
    throw PoolError("pool has " + std::to_string(exemplars.size()) + " " +
                    std::string(llm::to_string(stage)) + " exemplars, need " +
                    std::to_string(ctx.few_shot_k));

  const pools::PromptTemplate* prompt;
  std::vector<pools::Exemplar> shots;
  if (ctx.mode == Mode::naive) {
    prompt = &prompts.front();
    shots.assign(exemplars.begin(),
                 exemplars.begin() + static_cast<std::ptrdiff_t>(ctx.few_shot_k));
  } else {
    std::string stream = "annotate/" + std::string(llm::to_string(stage)) + "/" +
                         std::to_string(attempt);
    Rng rng = derive_stream(ctx.seed, stream, index);
    prompt = &pools::sample_prompt(prompts, rng);
    shots = pools::sample_exemplars(exemplars, ctx.few_shot_k, rng);
  }
  AnnotationRequest r;
  r.transcript = pools::build_annotation_chat(
      *prompt, shots, trim(sentence), positive ? pools.system.positive : pools.system.hard_negative);
  r.prompt_id = prompt->id;
  for (const auto& e : shots) r.exemplar_ids.push_back(e.id);
  return r;
}

namespace {

struct AttemptResult {
  Annotation annotation;
  llm::Usage usage;
};

AttemptResult run_attempt(Stage stage, std::string_view sentence, const AnnotationRequest& req,
                          int attempt, std::size_t occurrence, const SynthContext& ctx) {
  const llm::GenerationConfig& config = ctx.configs.for_stage(stage);
  llm::Completion c = gateway_of(ctx).complete({req.transcript, config, occurrence});
  AttemptResult r;
  r.usage = c.usage;
  Annotation& a = r.annotation;
  a.stage = stage;
  a.prompt_id = req.prompt_id;
  a.exemplar_ids = req.exemplar_ids;
  a.attempts = attempt + 1;
  std::string text = clean_single_sentence(c.text);
  if (text.empty()) {
    a.failure = "empty completion";
  } else if (normalize_sentence(text) == normalize_sentence(sentence)) {
    a.failure = "echoes input";
  } else {
    a.text = std::move(text);
  }
  return r;
}

Annotation annotate_with_resample(Stage stage, std::string_view sentence, std::size_t index,
                                  const SynthContext& ctx) {
  llm::OccurrenceCounter occurrences;
  Annotation last;
  for (int attempt = 0; attempt < 2; ++attempt) {
    AnnotationRequest req = build_annotation_request(stage, sentence, index, attempt, ctx);
    std::size_t occ = occurrences.next(
        llm::canonical_request_key(req.transcript, ctx.configs.for_stage(stage)));
    AttemptResult r = run_attempt(stage, sentence, req, attempt, occ, ctx);
    if (ctx.ledger) ctx.ledger->record(stage, r.usage, r.annotation.ok());
    if (r.annotation.ok()) return r.annotation;
    last = r.annotation;
  }
  if (last.failure == "empty completion")
    throw EmptyCompletionError("empty completion for \"" + std::string(sentence) +
                               "\" after one resample");
  throw DatasetError("annotation of \"" + std::string(sentence) + "\" failed: " + last.failure);
}

}  // namespace

Annotation annotate_once(Stage stage, std::string_view sentence, std::size_t index, int attempt,
                         const SynthContext& ctx, std::size_t occurrence) {
  AnnotationRequest req = build_annotation_request(stage, sentence, index, attempt, ctx);
  AttemptResult r = run_attempt(stage, sentence, req, attempt, occurrence, ctx);
  if (ctx.ledger) ctx.ledger->record(stage, r.usage, r.annotation.ok());
  return r.annotation;
}

Annotation annotate_positive(std::string_view sentence, const SynthContext& ctx,
                             std::size_t index) {
  return annotate_with_resample(Stage::positive, sentence, index, ctx);
}

Annotation annotate_hard_negative(std::string_view sentence, const SynthContext& ctx,
                                  std::size_t index) {
  return annotate_with_resample(Stage::hard_negative, sentence, index, ctx);
}

std::vector<SentenceAnnotations> annotate_all(const std::vector<std::string>& sentences,
                                              const SynthContext& ctx) {
  std::vector<SentenceAnnotations> out(sentences.size());
  llm::OccurrenceCounter occurrences;

  struct Job {
    std::size_t sentence;
    Stage stage;
    AnnotationRequest request;
    std::size_t occurrence;
  };
  auto run_phase = [&](int attempt, const std::vector<std::pair<std::size_t, Stage>>& todo) {
    // Requests and occurrence numbers are fixed in input order before any
    // are sent, so the replay keys do not depend on completion order.
    std::vector<Job> jobs;
    jobs.reserve(todo.size());
    for (const auto& [i, stage] : todo) {
      AnnotationRequest req = build_annotation_request(stage, sentences[i], i, attempt, ctx);
      std::size_t occ = occurrences.next(
          llm::canonical_request_key(req.transcript, ctx.configs.for_stage(stage)));
      jobs.push_back({i, stage, std::move(req), occ});
    }
    auto results = llm::throttled_map<AttemptResult>(
        jobs.size(),
        [&](std::size_t j) {
          const Job& job = jobs[j];
          return run_attempt(job.stage, sentences[job.sentence], job.request, attempt,
                             job.occurrence, ctx);
        },
        throttle_of(ctx),
        [&](std::size_t j, const AttemptResult& r) {
          if (ctx.ledger) ctx.ledger->record(jobs[j].stage, r.usage, r.annotation.ok());
        });
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      auto& slot = jobs[j].stage == Stage::positive ? out[jobs[j].sentence].positive
                                                    : out[jobs[j].sentence].hard_negative;
      slot = std::move(results[j].annotation);
    }
  };

  std::vector<std::pair<std::size_t, Stage>> first;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (trim(sentences[i]).empty()) throw UsageError("cannot annotate an empty sentence");
    first.emplace_back(i, Stage::positive);
    first.emplace_back(i, Stage::hard_negative);
  }
  run_phase(0, first);

  std::vector<std::pair<std::size_t, Stage>> retry;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (!out[i].positive.ok()) retry.emplace_back(i, Stage::positive);
    if (!out[i].hard_negative.ok()) retry.emplace_back(i, Stage::hard_negative);
  }
  if (!retry.empty()) run_phase(1, retry);
  return out;
}

// --- triplets and datasets --------------------------------------------------

void Triplet::validate() const {
  if (trim(sent0).empty()) throw DatasetError("triplet has an empty sent0");
  if (trim(sent1).empty()) throw DatasetError("triplet has an empty sent1");
  if (trim(hard_neg).empty()) throw DatasetError("triplet has an empty hard_neg");
  std::string anchor = normalize_sentence(sent0);
  if (normalize_sentence(sent1) == anchor)
    throw DatasetError("sent1 equals sent0 after normalization: \"" + sent0 + "\"");
  if (normalize_sentence(hard_neg) == anchor)
    throw DatasetError("hard_neg equals sent0 after normalization: \"" + sent0 + "\"");
}

json Triplet::to_json() const {
  return json{{"sent0", sent0}, {"sent1", sent1}, {"hard_neg", hard_neg},
              {"provenance", provenance}};
}

Triplet Triplet::from_json(const json& j) {
  Triplet t;
  t.sent0 = j.at("sent0").get<std::string>();
  t.sent1 = j.at("sent1").get<std::string>();
  t.hard_neg = j.at("hard_neg").get<std::string>();
  if (j.contains("provenance")) t.provenance = j["provenance"];
  return t;
}

DatasetManifest assemble_dataset(const std::vector<InputSentence>& inputs, const SynthContext& ctx,
                                 const AssembleOptions& options,
                                 const std::filesystem::path& out_dir) {
  const pools::PoolSet& pools = pools_of(ctx);
  std::filesystem::create_directories(out_dir);

  std::vector<const InputSentence*> kept;
  std::vector<json> skipped;
  std::size_t filtered_inputs = 0;
  std::size_t deduped = 0;
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const InputSentence& in = inputs[i];
    if (trim(in.text).empty()) continue;
    if (options.filter && word_count(in.text) > kMaxWords) {
      ++filtered_inputs;
      continue;
    }
    if (options.dedup && !seen.insert(normalize_sentence(in.text)).second) {
      ++deduped;
      continue;
    }
    kept.push_back(&in);
  }

  std::vector<std::string> texts;
  for (const auto* in : kept) texts.emplace_back(trim(in->text));
  std::vector<SentenceAnnotations> ann = annotate_all(texts, ctx);

  std::vector<Triplet> triplets;
  std::size_t skip_count = 0;
  std::size_t filtered_outputs = 0;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto& a = ann[i];
    if (!a.positive.ok() || !a.hard_negative.ok()) {
      ++skip_count;
      json reasons = json::object();
      if (!a.positive.ok()) reasons["positive"] = a.positive.failure;
      if (!a.hard_negative.ok()) reasons["hard_negative"] = a.hard_negative.failure;
      skipped.push_back({{"index", i}, {"sentence", texts[i]}, {"reasons", reasons}});
      continue;
    }
    Triplet t{texts[i], a.positive.text, a.hard_negative.text, json::object()};
    if (options.filter && (word_count(t.sent1) > kMaxWords || word_count(t.hard_neg) > kMaxWords)) {
      ++filtered_outputs;
      skipped.push_back(
          {{"index", i}, {"sentence", texts[i]}, {"reasons", {{"filter", "over word limit"}}}});
      continue;
    }
    json prov{{"source", to_string(options.source)},
              {"mode", to_string(ctx.mode)},
              {"positive_prompt_id", a.positive.prompt_id},
              {"negative_prompt_id", a.hard_negative.prompt_id},
              {"exemplar_ids",
               {{"positive", a.positive.exemplar_ids},
                {"hard_negative", a.hard_negative.exemplar_ids}}},
              {"attempts", {{"positive", a.positive.attempts},
                            {"hard_negative", a.hard_negative.attempts}}},
              {"model", ctx.configs.positive.model},
              {"configs",
               {{"positive", ctx.configs.positive.to_json()},
                {"hard_negative", ctx.configs.hard_negative.to_json()}}}};
    if (const auto& origin = kept[i]->origin) {
      prov["unlabeled"] = {{"prompt_id", origin->prompt_id},
                           {"genre_id", origin->genre_id},
                           {"topics", origin->topics},
                           {"batch_index", origin->batch_index},
                           {"exemplar_id", origin->exemplar_id}};
      prov["configs"]["unlabeled"] = ctx.configs.unlabeled.to_json();
    }
    t.provenance = std::move(prov);
    t.validate();
    triplets.push_back(std::move(t));
  }

  const auto data_path = out_dir / kDataFile;
  write_triplets(data_path, triplets);
  std::string skipped_text;
  for (const auto& s : skipped) skipped_text += s.dump() + "\n";
  write_file_atomic(out_dir / kSkippedFile, skipped_text);

  DatasetManifest m;
  m.n = triplets.size();
  m.doc = json{{"format_version", 1},
               {"N", triplets.size()},
               {"seed", ctx.seed},
               {"mode", to_string(ctx.mode)},
               {"source", to_string(options.source)},
               {"pool_file", pools.source_path},
               {"pool_sha256", pools.source_sha256},
               {"configs", ctx.configs.to_json()},
               {"few_shot_k", ctx.few_shot_k},
               {"filter", options.filter},
               {"max_words", kMaxWords},
               {"dedup", options.dedup},
               {"inputs", inputs.size()},
               {"filtered_inputs", filtered_inputs},
               {"deduped", deduped},
               {"skipped", skip_count},
               {"filtered_outputs", filtered_outputs},
               {"data_file", kDataFile},
               {"data_sha256", sha256_file(data_path)},
               {"created_at", utc_timestamp()}};
  write_file_atomic(out_dir / kManifestFile, m.doc.dump(2) + "\n");
  return m;
}

void write_triplets(const std::filesystem::path& path, const std::vector<Triplet>& triplets) {
  std::string text;
  for (const auto& t : triplets) text += t.to_json().dump() + "\n";
  write_file_atomic(path, text);
}

std::string csv_field(std::string_view s) {
  bool quote = s.find_first_of(",\"\r\n") != std::string_view::npos ||
               (!s.empty() && (s.front() == ' ' || s.back() == ' '));
  if (!quote) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"' && field.empty()) {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw DatasetError("CSV ends inside a quoted field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

void export_csv(const std::vector<Triplet>& triplets, const std::filesystem::path& path) {
  std::string text;
  for (const auto& t : triplets)
    text += csv_field(t.sent0) + "," + csv_field(t.sent1) + "," + csv_field(t.hard_neg) + "\n";
  write_file_atomic(path, text);
}

std::vector<Triplet> read_triplets(const std::filesystem::path& path) {
  std::string text = read_file(path);
  std::vector<Triplet> out;
  if (path.extension() == ".csv") {
    auto rows = parse_csv(text);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto& row = rows[r];
      if (r == 0 && row.size() == 3 && row[0] == "sent0" && row[1] == "sent1" &&
          row[2] == "hard_neg")
        continue;
      if (row.size() != 3)
        throw DatasetError(path.string() + ": CSV row " + std::to_string(r + 1) + " has " +
                           std::to_string(row.size()) + " fields, expected 3");
      out.push_back({row[0], row[1], row[2], json::object()});
    }
    return out;
  }
  std::size_t lineno = 0;
  for (const std::string& line : split_lines(text)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(Triplet::from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<InputSentence> read_partial_input(const std::filesystem::path& path) {
  std::vector<InputSentence> out;
  for (const std::string& line : read_nonempty_lines(path))
    out.push_back({std::string(trim(line)), std::nullopt});
  return out;
}

std::vector<InputSentence> read_scratch_input(const std::filesystem::path& path) {
  std::vector<InputSentence> out;
  std::size_t lineno = 0;
  for (const std::string& line : split_lines(read_file(path))) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      UnlabeledSentence u = UnlabeledSentence::from_json(json::parse(line));
      out.push_back({u.text, u});
    } catch (const json::exception& e) {
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

ValidationReport validate_dataset(const std::filesystem::path& dir,
                                  const pools::PoolSet* pools_override) {
  ValidationReport rep;
  auto problem = [&](std::string p) { rep.problems.push_back(std::move(p)); };
  json manifest;
  try {
    manifest = json::parse(read_file(dir / kManifestFile));
  } catch (const json::exception& e) {
    throw DatasetError((dir / kManifestFile).string() + ": " + e.what());
  }
  auto data_path = dir / manifest.value("data_file", std::string(kDataFile));
  std::vector<Triplet> triplets = read_triplets(data_path);
  rep.records = triplets.size();
  if (manifest.value("N", std::size_t{0}) != triplets.size())
    problem("manifest N = " + std::to_string(manifest.value("N", std::size_t{0})) + " but " +
            data_path.filename().string() + " has " + std::to_string(triplets.size()) +
            " records");
  if (manifest.contains("data_sha256") && manifest["data_sha256"] != sha256_file(data_path))
    problem("data_sha256 does not match " + data_path.filename().string());

  std::optional<pools::PoolSet> loaded;
  const pools::PoolSet* pools = pools_override;
  if (!pools) {
    std::string pool_file = manifest.value("pool_file", "");
    if (pool_file.empty() || !std::filesystem::exists(pool_file)) {
      problem("pool file '" + pool_file + "' recorded in the manifest is not available");
    } else {
      loaded = pools::load_pools(pool_file);
      pools = &*loaded;
      if (manifest.value("pool_sha256", "") != loaded->source_sha256)
        problem("pool file '" + pool_file + "' has changed since the dataset was written");
    }
  }

  bool filtered = manifest.value("filter", true);
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    const Triplet& t = triplets[i];
    std::string where = "record " + std::to_string(i + 1) + ": ";
    try {
      t.validate();
    } catch (const DatasetError& e) {
      problem(where + e.what());
    }
    if (filtered)
      for (const std::string* s : {&t.sent0, &t.sent1, &t.hard_neg})
        if (word_count(*s) > kMaxWords) problem(where + "more than 32 words: \"" + *s + "\"");
    if (!pools) continue;
    const json& p = t.provenance;
    auto check_prompt = [&](const char* field, pools::PromptKind kind) {
      std::string id = p.value(field, "");
      const pools::PromptTemplate* tpl = pools->find_prompt(id);
      if (!tpl || tpl->kind != kind)
        problem(where + field + " '" + id + "' does not resolve to a " +
                std::string(pools::to_string(kind)) + " prompt");
    };
    check_prompt("positive_prompt_id", pools::PromptKind::positive);
    check_prompt("negative_prompt_id", pools::PromptKind::hard_negative);
    auto ids = p.value("exemplar_ids", json::object());
    for (auto [field, kind] : {std::pair{"positive", pools::ExemplarKind::positive},
                               std::pair{"hard_negative", pools::ExemplarKind::hard_negative}}) {
      for (const auto& id : ids.value(field, json::array())) {
        const pools::Exemplar* e = pools->find_exemplar(id.get<std::string>());
        if (!e || e->kind != kind)
          problem(where + "exemplar '" + id.get<std::string>() + "' does not resolve to a " +
                  std::string(pools::to_string(kind)) + " exemplar");
      }
    }
    if (p.contains("unlabeled")) {
      const json& u = p["unlabeled"];
      std::string id = u.value("prompt_id", "");
      const pools::PromptTemplate* tpl = pools->find_prompt(id);
      if (!tpl && !(pools->naive_prompt && pools->naive_prompt->id == id))
        problem(where + "unlabeled prompt '" + id + "' does not resolve");
      int genre = u.value("genre_id", 0);
      if (genre != 0 && !pools->find_genre(genre))
        problem(where + "genre " + std::to_string(genre) + " does not resolve");
      std::string ex = u.value("exemplar_id", "");
      if (!ex.empty() && !pools->find_exemplar(ex))
        problem(where + "exemplar '" + ex + "' does not resolve");
    }
  }
  return rep;
}

}  // namespace tforge::synth
