#include "tforge/prompt_pools.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "tforge/error.hpp"
#include "tforge/hash.hpp"
#include "tforge/text.hpp"

namespace tforge::pools {
namespace {

using json = nlohmann::json;

bool is_ident_start(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_';
}
bool is_ident_char(char c) { return is_ident_start(c) || (c >= '0' && c <= '9'); }

// Length of "{name}" at text[pos], or 0 when text[pos] does not start one.
std::size_t placeholder_length(std::string_view text, std::size_t pos) {
  if (pos >= text.size() || text[pos] != '{') return 0;
  std::size_t i = pos + 1;
  if (i >= text.size() || !is_ident_start(text[i])) return 0;
  while (i < text.size() && is_ident_char(text[i])) ++i;
  if (i >= text.size() || text[i] != '}') return 0;
  return i - pos + 1;
}

// Walks a template, calling on_literal / on_placeholder in order.
template <class Literal, class Placeholder>
void scan_template(std::string_view text, Literal on_literal, Placeholder on_placeholder) {
  std::size_t i = 0;
  while (i < text.size()) {
    if (text.compare(i, 2, "{{") == 0) {
      on_literal('{');
      i += 2;
    } else if (text.compare(i, 2, "}}") == 0) {
      on_literal('}');
      i += 2;
    } else if (std::size_t len = placeholder_length(text, i); len > 0) {
      on_placeholder(text.substr(i + 1, len - 2));
      i += len;
    } else {
      on_literal(text[i]);
      ++i;
    }
  }
}

std::string topic_slot(std::size_t i) { return "topic_" + std::to_string(i + 1); }
std::string example_slot(std::size_t i) { return "example_" + std::to_string(i + 1); }

std::string entry_label(std::string_view array, std::size_t index, const json& entry) {
  std::string label = std::string(array) + "[" + std::to_string(index) + "]";
  if (entry.is_object() && entry.contains("id")) {
    label += " (id " + entry["id"].dump() + ")";
  }
  return label;
}

std::string require_string(const json& entry, std::string_view key, const std::string& label) {
  auto it = entry.find(std::string(key));
  if (it == entry.end() || !it->is_string()) {
    throw PoolError(label + ": missing string field '" + std::string(key) + "'");
  }
  return it->get<std::string>();
}

const json& require_array(const json& doc, std::string_view key) {
  auto it = doc.find(std::string(key));
  if (it == doc.end() || !it->is_array()) {
    throw PoolError("pool file: missing top-level array '" + std::string(key) + "'");
  }
  return *it;
}

PromptTemplate parse_prompt(const json& entry, PromptKind kind, const std::string& label) {
  if (!entry.is_object()) throw PoolError(label + ": expected an object");
  PromptTemplate p;
  p.id = require_string(entry, "id", label);
  p.text = require_string(entry, "text", label);
  p.kind = kind;
  if (auto it = entry.find("kind"); it != entry.end()) {
    if (!it->is_string() || it->get<std::string>() != to_string(kind)) {
      throw PoolError(label + ": kind " + it->dump() + " does not match its pool");
    }
  }
  if (auto it = entry.find("weight"); it != entry.end()) {
    if (!it->is_number()) throw PoolError(label + ": weight must be a number");
    p.weight = it->get<double>();
  }
  return p;
}

ExemplarKind parse_exemplar_kind(const std::string& s, const std::string& label) {
  if (s == "positive") return ExemplarKind::positive;
  if (s == "hard_negative") return ExemplarKind::hard_negative;
  if (s == "unlabeled") return ExemplarKind::unlabeled;
  throw PoolError(label + ": unknown exemplar kind '" + s + "'");
}

// Lines of an unlabeled exemplar output that look like list items.
std::size_t count_list_items(std::string_view block) {
  std::size_t n = 0;
  for (const std::string& raw : split_lines(block)) {
    std::string_view line = trim(raw);
    if (line.empty()) continue;
    std::size_t i = 0;
    while (i < line.size() && line[i] >= '0' && line[i] <= '9') ++i;
    const bool numbered = i > 0 && i < line.size() && (line[i] == '.' || line[i] == ')');
    const bool bulleted = line[0] == '-' || line[0] == '*';
    if (numbered || bulleted) ++n;
  }
  return n;
}

void check_prompt_placeholders(const PromptTemplate& p, bool naive) {
  const std::vector<std::string> names = placeholders(p.text);
  const std::set<std::string, std::less<>> present(names.begin(), names.end());
  const std::string where = "prompt '" + p.id + "'";
  auto require = [&](const std::string& name) {
    if (!present.contains(name)) {
      throw PoolError(where + " (" + std::string(to_string(p.kind)) +
                      "): missing placeholder {" + name + "}");
    }
  };
  std::set<std::string, std::less<>> allowed;
  if (naive) {
    require("number");
    allowed = {"number"};
  } else {
    switch (p.kind) {
      case PromptKind::positive:
      case PromptKind::hard_negative:
        break;
      case PromptKind::unlabeled:
        require("number");
        require("genre_description");
        allowed = {"number", "genre_description"};
        for (std::size_t i = 0; i < kTopicsPerPrompt; ++i) {
          require(topic_slot(i));
          allowed.insert(topic_slot(i));
        }
        break;
      case PromptKind::image_caption: {
        require("number");
        require("genre_description");
        allowed = {"number", "genre_description"};
        const std::size_t slots = caption_example_slots(p);
        for (std::size_t i = 0; i < slots; ++i) allowed.insert(example_slot(i));
        break;
      }
    }
  }
  for (const std::string& name : names) {
    if (!allowed.contains(name)) {
      throw PoolError(where + " (" + std::string(to_string(p.kind)) +
                      "): placeholder {" + name + "} is not allowed here");
    }
  }
}

void check_prompt_list(const std::vector<PromptTemplate>& list, std::string_view name,
                       std::set<std::string, std::less<>>& ids) {
  if (list.empty()) throw PoolError("pool file: '" + std::string(name) + "' is empty");
  for (const PromptTemplate& p : list) {
    if (trim(p.id).empty()) throw PoolError(std::string(name) + ": empty prompt id");
    if (!ids.insert(p.id).second) throw PoolError("duplicate prompt id '" + p.id + "'");
    if (trim(p.text).empty()) throw PoolError("prompt '" + p.id + "': empty text");
    if (!(p.weight > 0.0) || !std::isfinite(p.weight)) {
      throw PoolError("prompt '" + p.id + "': weight must be positive and finite");
    }
    check_prompt_placeholders(p, false);
  }
}

}  // namespace

std::string_view to_string(PromptKind kind) {
  switch (kind) {
    case PromptKind::positive: return "positive";
    case PromptKind::hard_negative: return "hard_negative";
    case PromptKind::unlabeled: return "unlabeled";
    case PromptKind::image_caption: return "image_caption";
  }
  return "?";
}

std::string_view to_string(ExemplarKind kind) {
  switch (kind) {
    case ExemplarKind::positive: return "positive";
    case ExemplarKind::hard_negative: return "hard_negative";
    case ExemplarKind::unlabeled: return "unlabeled";
  }
  return "?";
}

std::string_view to_string(Role role) {
  switch (role) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "?";
}

const std::vector<Exemplar>& PoolSet::exemplars(ExemplarKind kind) const {
  switch (kind) {
    case ExemplarKind::positive: return positive_exemplars;
    case ExemplarKind::hard_negative: return hard_negative_exemplars;
    case ExemplarKind::unlabeled: break;
  }
  return unlabeled_exemplars;
}

const PromptTemplate* PoolSet::find_prompt(std::string_view id) const {
  for (const auto* list : {&positive_prompts, &hard_negative_prompts, &unlabeled_prompts,
                           &caption_prompts}) {
    for (const PromptTemplate& p : *list) {
      if (p.id == id) return &p;
    }
  }
  if (naive_prompt && naive_prompt->id == id) return &*naive_prompt;
  return nullptr;
}

const Exemplar* PoolSet::find_exemplar(std::string_view id) const {
  for (const auto* list : {&positive_exemplars, &hard_negative_exemplars, &unlabeled_exemplars}) {
    for (const Exemplar& e : *list) {
      if (e.id == id) return &e;
    }
  }
  return nullptr;
}

const Genre* PoolSet::find_genre(int id) const {
  for (const Genre& g : genres) {
    if (g.id == id) return &g;
  }
  return nullptr;
}

void ChatTranscript::validate() const {
  if (messages.empty() || messages.front().role != Role::system) {
    throw PoolError("transcript: first message must be the system prompt");
  }
  if (messages.size() < 2) throw PoolError("transcript: no user message");
  for (std::size_t i = 1; i < messages.size(); ++i) {
    const Role expected = (i % 2 == 1) ? Role::user : Role::assistant;
    if (messages[i].role != expected) {
      throw PoolError("transcript: message " + std::to_string(i) + " should be " +
                      std::string(to_string(expected)));
    }
  }
  if (messages.back().role != Role::user) {
    throw PoolError("transcript: last message must come from the user");
  }
  for (std::size_t i = 0; i < messages.size(); ++i) {
    if (contains_placeholder(messages[i].content)) {
      throw PoolError("transcript: unfilled placeholder in message " + std::to_string(i));
    }
  }
}

nlohmann::json ChatTranscript::to_json() const {
  json out = json::array();
  for (const ChatMessage& m : messages) {
    out.push_back({{"role", to_string(m.role)}, {"content", m.content}});
  }
  return out;
}

std::vector<std::string> placeholders(std::string_view text) {
  std::vector<std::string> names;
  scan_template(text, [](char) {}, [&](std::string_view name) { names.emplace_back(name); });
  return names;
}

std::string render(std::string_view text,
                   const std::map<std::string, std::string, std::less<>>& values) {
  std::string out;
  out.reserve(text.size());
  scan_template(
      text, [&](char c) { out.push_back(c); },
      [&](std::string_view name) {
        auto it = values.find(name);
        if (it == values.end()) {
          throw PoolError("unfilled placeholder {" + std::string(name) + "}");
        }
        out += it->second;
      });
  return out;
}

bool contains_placeholder(std::string_view text) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (placeholder_length(text, i) > 0) return true;
  }
  return false;
}

std::size_t caption_example_slots(const PromptTemplate& prompt) {
  std::size_t slots = 0;
  for (const std::string& name : placeholders(prompt.text)) {
    if (name.rfind("example_", 0) == 0) {
      const std::string digits = name.substr(8);
      if (!digits.empty() && std::all_of(digits.begin(), digits.end(),
                                         [](char c) { return c >= '0' && c <= '9'; })) {
        slots = std::max<std::size_t>(slots, std::stoul(digits));
      }
    }
  }
  return slots;
}

PoolSet parse_pools(const nlohmann::json& doc, std::string_view origin) {
  if (!doc.is_object()) throw PoolError(std::string(origin) + ": pool file must be a JSON object");
  PoolSet pools;
  pools.source_path = std::string(origin);

  auto read_prompts = [&](std::string_view key, PromptKind kind) {
    std::vector<PromptTemplate> out;
    const json& arr = require_array(doc, key);
    for (std::size_t i = 0; i < arr.size(); ++i) {
      out.push_back(parse_prompt(arr[i], kind, entry_label(key, i, arr[i])));
    }
    return out;
  };
  pools.positive_prompts = read_prompts("positive_prompts", PromptKind::positive);
  pools.hard_negative_prompts = read_prompts("hard_negative_prompts", PromptKind::hard_negative);
  pools.unlabeled_prompts = read_prompts("unlabeled_prompts", PromptKind::unlabeled);
  pools.caption_prompts = read_prompts("caption_prompts", PromptKind::image_caption);

  if (auto it = doc.find("naive_prompt"); it != doc.end()) {
    pools.naive_prompt = parse_prompt(*it, PromptKind::unlabeled, "naive_prompt");
  }

  if (auto it = doc.find("system_messages"); it != doc.end()) {
    if (!it->is_object()) throw PoolError("system_messages: expected an object");
    pools.system.positive = it->value("positive", pools.system.positive);
    pools.system.hard_negative = it->value("hard_negative", pools.system.hard_negative);
    pools.system.unlabeled = it->value("unlabeled", pools.system.unlabeled);
  }

  const json& exemplars = require_array(doc, "exemplars");
  for (std::size_t i = 0; i < exemplars.size(); ++i) {
    const json& e = exemplars[i];
    const std::string label = entry_label("exemplars", i, e);
    if (!e.is_object()) throw PoolError(label + ": expected an object");
    Exemplar ex;
    ex.id = require_string(e, "id", label);
    ex.kind = parse_exemplar_kind(require_string(e, "kind", label), label);
    ex.input = require_string(e, "input", label);
    ex.output = require_string(e, "output", label);
    if (auto g = e.find("genre_id"); g != e.end() && !g->is_null()) {
      if (!g->is_number_integer()) throw PoolError(label + ": genre_id must be an integer");
      ex.genre_id = g->get<int>();
    }
    switch (ex.kind) {
      case ExemplarKind::positive: pools.positive_exemplars.push_back(std::move(ex)); break;
      case ExemplarKind::hard_negative: pools.hard_negative_exemplars.push_back(std::move(ex)); break;
      case ExemplarKind::unlabeled: pools.unlabeled_exemplars.push_back(std::move(ex)); break;
    }
  }

  const json& genres = require_array(doc, "genres");
  for (std::size_t i = 0; i < genres.size(); ++i) {
    const json& g = genres[i];
    const std::string label = entry_label("genres", i, g);
    if (!g.is_object()) throw PoolError(label + ": expected an object");
    auto id = g.find("id");
    if (id == g.end() || !id->is_number_integer()) throw PoolError(label + ": missing integer id");
    Genre genre;
    genre.id = id->get<int>();
    genre.description = require_string(g, "description", label);
    genre.caption_style = g.value("caption_style", false);
    pools.genres.push_back(std::move(genre));
  }

  const json& topics = require_array(doc, "topics");
  for (std::size_t i = 0; i < topics.size(); ++i) {
    if (!topics[i].is_string()) {
      throw PoolError("topics[" + std::to_string(i) + "]: expected a string");
    }
    pools.topics.topics.push_back(topics[i].get<std::string>());
  }

  validate_pools(pools);
  return pools;
}

void validate_pools(const PoolSet& pools, std::size_t few_shot_k) {
  std::set<std::string, std::less<>> prompt_ids;
  check_prompt_list(pools.positive_prompts, "positive_prompts", prompt_ids);
  check_prompt_list(pools.hard_negative_prompts, "hard_negative_prompts", prompt_ids);
  check_prompt_list(pools.unlabeled_prompts, "unlabeled_prompts", prompt_ids);
  check_prompt_list(pools.caption_prompts, "caption_prompts", prompt_ids);
  if (pools.naive_prompt) {
    if (!prompt_ids.insert(pools.naive_prompt->id).second) {
      throw PoolError("duplicate prompt id '" + pools.naive_prompt->id + "'");
    }
    check_prompt_placeholders(*pools.naive_prompt, true);
  }

  std::set<int> genre_ids;
  std::set<std::string, std::less<>> descriptions;
  if (pools.genres.empty()) throw PoolError("pool file: 'genres' is empty");
  for (const Genre& g : pools.genres) {
    if (!genre_ids.insert(g.id).second) {
      throw PoolError("duplicate genre id " + std::to_string(g.id));
    }
    if (trim(g.description).empty()) {
      throw PoolError("genre " + std::to_string(g.id) + ": empty description");
    }
    if (!descriptions.insert(g.description).second) {
      throw PoolError("duplicate genre description '" + g.description + "'");
    }
  }

  std::set<std::string, std::less<>> seen_topics;
  for (const std::string& t : pools.topics.topics) {
    if (trim(t).empty()) throw PoolError("topics: empty entry");
    if (!seen_topics.insert(t).second) throw PoolError("duplicate topic '" + t + "'");
  }
  if (pools.topics.topics.size() < kTopicsPerPrompt) {
    throw PoolError("topics: need at least 6 entries, found " +
                    std::to_string(pools.topics.topics.size()));
  }

  std::set<std::string, std::less<>> exemplar_ids;
  for (ExemplarKind kind :
       {ExemplarKind::positive, ExemplarKind::hard_negative, ExemplarKind::unlabeled}) {
    const auto& list = pools.exemplars(kind);
    if (list.empty()) {
      throw PoolError("exemplars: no " + std::string(to_string(kind)) + " exemplar");
    }
    for (const Exemplar& e : list) {
      const std::string where = "exemplar '" + e.id + "'";
      if (trim(e.id).empty()) throw PoolError("exemplars: empty id");
      if (!exemplar_ids.insert(e.id).second) throw PoolError("duplicate exemplar id '" + e.id + "'");
      if (e.kind != kind) throw PoolError(where + ": kind mismatch");
      if (trim(e.input).empty() || trim(e.output).empty()) {
        throw PoolError(where + ": input and output must be nonempty");
      }
      if (contains_placeholder(e.input) || contains_placeholder(e.output)) {
        throw PoolError(where + ": exemplar text must not contain placeholders");
      }
      if (kind == ExemplarKind::unlabeled && count_list_items(e.output) == 0) {
        throw PoolError(where + ": output must be a list of sentences");
      }
      if (e.genre_id && !genre_ids.contains(*e.genre_id)) {
        throw PoolError(where + ": unknown genre_id " + std::to_string(*e.genre_id));
      }
    }
  }
  if (few_shot_k > 0) {
    for (ExemplarKind kind : {ExemplarKind::positive, ExemplarKind::hard_negative}) {
      if (pools.exemplars(kind).size() < few_shot_k) {
        throw PoolError("exemplars: " + std::string(to_string(kind)) + " pool has " +
                        std::to_string(pools.exemplars(kind).size()) + " entries, fewer than k=" +
                        std::to_string(few_shot_k));
      }
    }
  }
}

PoolSet load_pools(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw PoolError("pool file not found: " + path.string());
  const std::string text = read_file(path);
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<long>(upto), '\n');
    throw PoolError(path.string() + ":" + std::to_string(line) + ": malformed JSON: " + e.what());
  }
  PoolSet pools = parse_pools(doc, path.string());
  pools.source_sha256 = sha256_hex(text);
  return pools;
}

const PromptTemplate& sample_prompt(std::span<const PromptTemplate> pool, Rng& rng) {
  if (pool.empty()) throw PoolError("sample_prompt: empty pool");
  const bool uniform = std::all_of(pool.begin(), pool.end(),
                                   [&](const PromptTemplate& p) { return p.weight == pool[0].weight; });
  if (uniform) return pool[rng.uniform_index(pool.size())];
  std::vector<double> weights;
  weights.reserve(pool.size());
  for (const PromptTemplate& p : pool) weights.push_back(p.weight);
  return pool[rng.weighted_index(weights)];
}

std::vector<Exemplar> sample_exemplars(std::span<const Exemplar> pool, std::size_t k, Rng& rng) {
  if (k > pool.size()) {
    throw PoolError("sample_exemplars: k=" + std::to_string(k) + " exceeds pool size " +
                    std::to_string(pool.size()));
  }
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<Exemplar> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(order.size() - i));
    std::swap(order[i], order[j]);
    out.push_back(pool[order[i]]);
  }
  return out;
}

ChatTranscript build_annotation_chat(const PromptTemplate& prompt,
                                     std::span<const Exemplar> exemplars,
                                     std::string_view input_sentence,
                                     std::string_view system_message) {
  ExemplarKind expected{};
  if (prompt.kind == PromptKind::positive) {
    expected = ExemplarKind::positive;
  } else if (prompt.kind == PromptKind::hard_negative) {
    expected = ExemplarKind::hard_negative;
  } else {
    throw PoolError("build_annotation_chat: prompt '" + prompt.id + "' is not an annotation prompt");
  }
  const std::string instruction = render(prompt.text, {});
  auto user_turn = [&](std::string_view sentence) {
    std::string s = instruction;
    s += "\n\n";
    s += kInputMarker;
    s += sentence;
    s += "\n";
    s += kOutputQuestion;
    return s;
  };

  ChatTranscript t;
  t.messages.push_back({Role::system, std::string(system_message)});
  for (const Exemplar& e : exemplars) {
    if (e.kind != expected) {
      throw PoolError("build_annotation_chat: exemplar '" + e.id + "' is " +
                      std::string(to_string(e.kind)) + ", expected " +
                      std::string(to_string(expected)));
    }
    t.messages.push_back({Role::user, user_turn(e.input)});
    t.messages.push_back({Role::assistant, e.output});
  }
  t.messages.push_back({Role::user, user_turn(input_sentence)});
  t.validate();
  return t;
}

ChatTranscript build_annotation_chat(const PromptTemplate& prompt,
                                     std::span<const Exemplar> exemplars,
                                     std::string_view input_sentence) {
  const SystemMessages defaults;
  return build_annotation_chat(
      prompt, exemplars, input_sentence,
      prompt.kind == PromptKind::hard_negative ? defaults.hard_negative : defaults.positive);
}

GenreTopics sample_genre_and_topics(const PoolSet& pools, Rng& rng) {
  if (pools.genres.empty()) throw PoolError("sample_genre_and_topics: no genres");
  const auto& topics = pools.topics.topics;
  if (topics.size() < kTopicsPerPrompt) {
    throw PoolError("sample_genre_and_topics: need 6 topics, pool has " +
                    std::to_string(topics.size()));
  }
  GenreTopics out;
  out.genre = pools.genres[rng.uniform_index(pools.genres.size())];
  std::vector<std::size_t> order(topics.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; i < kTopicsPerPrompt; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(order.size() - i));
    std::swap(order[i], order[j]);
    out.topics.push_back(topics[order[i]]);
  }
  return out;
}

std::string fill_unlabeled_template(const PromptTemplate& prompt, const Genre& genre,
                                    std::span<const std::string> topics, std::size_t count,
                                    std::span<const std::string> caption_examples) {
  if (count == 0) throw PoolError("unlabeled prompt: count must be at least 1");
  std::map<std::string, std::string, std::less<>> values;
  values["number"] = std::to_string(count);
  values["genre_description"] = genre.description;
  for (std::size_t i = 0; i < topics.size(); ++i) values[topic_slot(i)] = topics[i];
  for (std::size_t i = 0; i < caption_examples.size(); ++i) {
    values[example_slot(i)] = caption_examples[i];
  }
  return render(prompt.text, values);
}

ChatTranscript build_unlabeled_prompt(const PromptTemplate& prompt, const Genre& genre,
                                      std::span<const std::string> topics, std::size_t count,
                                      const Exemplar& exemplar, std::string_view system_message,
                                      std::span<const std::string> caption_examples) {
  if (prompt.kind != PromptKind::unlabeled && prompt.kind != PromptKind::image_caption) {
    throw PoolError("build_unlabeled_prompt: prompt '" + prompt.id + "' has kind " +
                    std::string(to_string(prompt.kind)));
  }
  if (exemplar.kind != ExemplarKind::unlabeled) {
    throw PoolError("build_unlabeled_prompt: exemplar '" + exemplar.id + "' is not unlabeled");
  }
  ChatTranscript t;
  t.messages.push_back({Role::system, std::string(system_message)});
  t.messages.push_back({Role::user, exemplar.input});
  t.messages.push_back({Role::assistant, exemplar.output});
  t.messages.push_back(
      {Role::user, fill_unlabeled_template(prompt, genre, topics, count, caption_examples)});
  t.validate();
  return t;
}

}  // namespace tforge::pools
