#include "tforge/mock_llm.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>

#include "tforge/error.hpp"
#include "tforge/hash.hpp"
#include "tforge/text.hpp"

namespace tforge::mock {

using nlohmann::json;

namespace {

struct Adjective {
  const char* word;
  const char* synonym;
  const char* antonym;
};

constexpr Adjective kAdjectives[] = {
    {"quiet", "silent", "noisy"},        {"bright", "vivid", "dim"},
    {"large", "huge", "tiny"},           {"small", "little", "enormous"},
    {"ancient", "old", "modern"},        {"rapid", "fast", "slow"},
    {"happy", "cheerful", "sad"},        {"careful", "cautious", "reckless"},
    {"wealthy", "rich", "poor"},         {"strong", "powerful", "weak"},
    {"clean", "spotless", "dirty"},      {"warm", "mild", "cold"},
    {"difficult", "hard", "easy"},       {"honest", "truthful", "dishonest"},
    {"famous", "renowned", "unknown"},   {"fragile", "delicate", "sturdy"},
    {"hidden", "concealed", "visible"},  {"local", "nearby", "foreign"},
    {"generous", "giving", "selfish"},   {"narrow", "slim", "wide"},
    {"brave", "courageous", "cowardly"}, {"calm", "peaceful", "turbulent"},
    {"empty", "vacant", "full"},         {"fresh", "new", "stale"},
    {"gentle", "kind", "harsh"},         {"heavy", "weighty", "light"},
    {"loud", "booming", "soft"},         {"public", "open", "private"},
    {"rare", "uncommon", "common"},      {"safe", "secure", "dangerous"},
    {"simple", "plain", "complex"},      {"tall", "high", "short"},
    {"early", "premature", "late"},      {"friendly", "amiable", "hostile"},
    {"curious", "inquisitive", "indifferent"},
    {"successful", "thriving", "failing"},
    {"accurate", "precise", "inaccurate"},
    {"popular", "beloved", "unpopular"}, {"ordinary", "usual", "unusual"},
    {"sharp", "keen", "dull"},           {"deep", "profound", "shallow"},
    {"busy", "hectic", "idle"},          {"polite", "courteous", "rude"},
    {"smooth", "sleek", "rough"},        {"humble", "modest", "arrogant"},
    {"crowded", "packed", "deserted"},   {"expensive", "costly", "cheap"},
    {"patient", "tolerant", "impatient"},
};

struct Noun {
  const char* word;
  const char* synonym;  // may be empty
};

constexpr Noun kNouns[] = {
    {"river", "stream"},      {"mountain", "peak"},      {"forest", "woodland"},
    {"city", "town"},         {"village", "hamlet"},     {"teacher", "instructor"},
    {"student", "pupil"},     {"doctor", "physician"},   {"child", "kid"},
    {"car", "automobile"},    {"house", "home"},         {"road", "street"},
    {"shop", "store"},        {"film", "movie"},         {"book", "novel"},
    {"journey", "trip"},      {"meal", "dish"},          {"gift", "present"},
    {"friend", "companion"},  {"story", "tale"},         {"picture", "photo"},
    {"garden", "yard"},       {"ocean", "sea"},          {"boat", "vessel"},
    {"answer", "reply"},      {"idea", "notion"},        {"problem", "issue"},
    {"task", "job"},          {"rule", "regulation"},    {"leader", "chief"},
    {"soldier", "warrior"},   {"judge", "magistrate"},   {"engine", "motor"},
    {"song", "tune"},         {"market", "bazaar"},      {"lesson", "class"},
    {"hill", "slope"},        {"path", "trail"},         {"plan", "scheme"},
    {"worker", "employee"},   {"robot", ""},             {"satellite", ""},
    {"telescope", ""},        {"galaxy", ""},            {"planet", ""},
    {"comet", ""},            {"circuit", ""},           {"resistor", ""},
    {"equation", ""},         {"theorem", ""},           {"algorithm", ""},
    {"database", ""},         {"laptop", ""},            {"server", ""},
    {"network", ""},          {"browser", ""},           {"recipe", ""},
    {"oven", ""},             {"spice", ""},             {"noodle", ""},
    {"bakery", ""},           {"harvest", ""},           {"stadium", ""},
    {"referee", ""},          {"marathon", ""},          {"goalkeeper", ""},
    {"tournament", ""},       {"museum", ""},            {"painting", ""},
    {"sculpture", ""},        {"festival", ""},          {"orchestra", ""},
    {"theater", ""},          {"empire", ""},            {"castle", ""},
    {"manuscript", ""},       {"treaty", ""},            {"dynasty", ""},
    {"tiger", ""},            {"dolphin", ""},           {"falcon", ""},
    {"elephant", ""},         {"beetle", ""},            {"glacier", ""},
    {"wetland", ""},          {"coral", ""},             {"drought", ""},
    {"senator", ""},          {"ballot", ""},            {"parliament", ""},
    {"campaign", ""},         {"budget", ""},            {"investor", ""},
    {"loan", ""},             {"stock", ""},             {"bank", ""},
    {"classroom", ""},        {"textbook", ""},          {"exam", ""},
    {"clinic", ""},           {"nurse", ""},             {"vaccine", ""},
    {"patient", ""},          {"border", ""},            {"refugee", ""},
    {"dragon", ""},           {"wizard", ""},            {"potion", ""},
    {"courtroom", ""},        {"lawyer", ""},            {"verdict", ""},
    {"detective", ""},        {"witness", ""},           {"startup", ""},
    {"merger", ""},           {"therapist", ""},         {"comedian", ""},
};

struct Verb {
  const char* base;
  const char* third;
  const char* synonym_third;  // may be empty
};

constexpr Verb kVerbs[] = {
    {"build", "builds", "constructs"},   {"find", "finds", "discovers"},
    {"watch", "watches", "observes"},    {"repair", "repairs", "fixes"},
    {"visit", "visits", "tours"},        {"carry", "carries", "transports"},
    {"praise", "praises", "compliments"}, {"study", "studies", "examines"},
    {"protect", "protects", "guards"},    {"reach", "reaches", "arrives at"},
    {"describe", "describes", "portrays"}, {"buy", "buys", "purchases"},
    {"help", "helps", "assists"},         {"begin", "begins", "starts"},
    {"choose", "chooses", "selects"},     {"explain", "explains", "clarifies"},
    {"follow", "follows", "tracks"},      {"hide", "hides", "conceals"},
    {"join", "joins", "enters"},          {"paint", "paints", "depicts"},
    {"measure", "measures", ""},          {"cook", "cooks", ""},
    {"sell", "sells", ""},                {"question", "questions", ""},
    {"ignore", "ignores", ""},            {"cross", "crosses", ""},
    {"map", "maps", ""},                  {"launch", "launches", ""},
    {"train", "trains", ""},              {"celebrate", "celebrates", ""},
    {"defend", "defends", ""},            {"fund", "funds", ""},
    {"test", "tests", ""},                {"record", "records", ""},
    {"design", "designs", ""},            {"teach", "teaches", ""},
    {"heal", "heals", ""},                {"judge", "judges", ""},
    {"share", "shares", ""},              {"review", "reviews", ""},
};

// Vocabulary used when the prompt names no topic.
constexpr std::array<const char*, 8> kNaiveNouns{"day", "person", "place", "world",
                                                  "house", "friend", "city", "story"};
constexpr std::array<std::size_t, 4> kNaiveAdjectives{0, 1, 6, 29};
constexpr std::array<std::size_t, 4> kNaiveVerbs{1, 2, 4, 12};

const std::map<std::string, std::string, std::less<>> kKnownPositives{
    {"You have access to the facts.", "The facts are accessible to you."},
    {"A young man is getting ready to release a red kite.",
     "A young man is preparing to let go of a red kite."},
    {"One of our number will carry out your instructions minutely.",
     "One person from our group will execute your instructions with great attention to detail."},
    {"One of the hotel's rooms", "A room in the hotel."},
};

const std::map<std::string, std::string, std::less<>> kKnownNegatives{
    {"A young man is getting ready to release a red kite.",
     "A young man getting ready to release a blue kite."},
    {"One of the hotel's rooms", "None of the hotel's rooms."},
};

struct Vocabulary {
  std::vector<std::string> nouns;
  std::vector<std::size_t> adjectives;  // indices into kAdjectives
  std::vector<std::size_t> verbs;       // indices into kVerbs
  std::vector<std::string> anchors;     // topic words
};

std::vector<std::size_t> pick_indices(std::size_t pool, std::size_t k, Rng& rng) {
  std::vector<std::size_t> all(pool);
  for (std::size_t i = 0; i < pool; ++i) all[i] = i;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k && i < pool; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(pool - i));
    std::swap(all[i], all[j]);
    out.push_back(all[i]);
  }
  return out;
}

// A fixed slice of the banks for each topic string.
Vocabulary topic_vocabulary(std::string_view topic) {
  Rng rng(fnv1a64(topic, fnv1a64("mock-topic")));
  Vocabulary v;
  for (std::size_t i : pick_indices(std::size(kNouns), 14, rng)) v.nouns.emplace_back(kNouns[i].word);
  v.adjectives = pick_indices(std::size(kAdjectives), 8, rng);
  v.verbs = pick_indices(std::size(kVerbs), 6, rng);
  static const std::set<std::string, std::less<>> stop{"and", "of", "the", "various", "forms",
                                                       "past", "notable", "their"};
  for (auto w : split_words(topic)) {
    std::string lw = to_lower_ascii(w);
    if (!stop.contains(lw)) v.anchors.push_back(w == "COVID-19" ? std::string(w) : lw);
  }
  if (v.anchors.empty()) v.anchors.emplace_back(topic);
  return v;
}

Vocabulary naive_vocabulary() {
  Vocabulary v;
  for (auto* n : kNaiveNouns) v.nouns.emplace_back(n);
  v.adjectives.assign(kNaiveAdjectives.begin(), kNaiveAdjectives.end());
  v.verbs.assign(kNaiveVerbs.begin(), kNaiveVerbs.end());
  v.anchors = {"life", "time"};
  return v;
}

template <class T>
const T& pick(const std::vector<T>& xs, Rng& rng) {
  return xs[static_cast<std::size_t>(rng.uniform_index(xs.size()))];
}

std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

std::string lower_first(std::string_view s) {
  std::string out(s);
  // Keep acronyms and "I" as they are.
  if (out.size() > 1 && std::isupper(static_cast<unsigned char>(out[0])) &&
      !std::isupper(static_cast<unsigned char>(out[1])) && out[1] != ' ')
    out[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(out[0])));
  return out;
}

std::string make_sentence(const Vocabulary& v, int style, Rng& rng) {
  const std::string& n1 = pick(v.nouns, rng);
  std::string n2 = pick(v.nouns, rng);
  const Adjective& a = kAdjectives[pick(v.adjectives, rng)];
  const Adjective& a2 = kAdjectives[pick(v.adjectives, rng)];
  const Verb& vb = kVerbs[pick(v.verbs, rng)];
  const std::string& anchor = pick(v.anchors, rng);
  switch ((style + static_cast<int>(rng.uniform_index(3))) % 8) {
    case 0: return "The " + std::string(a.word) + " " + n1 + " " + vb.third + " the " + n2 +
                   " near the " + anchor + " center.";
    case 1: return "Why does every " + n1 + " " + vb.base + " the " + a.word + " " + n2 + "?";
    case 2: return capitalize(anchor) + " matters because a " + a.word + " " + n1 + " can " +
                   vb.base + " any " + n2 + ".";
    case 3: return "Have you seen how the " + n1 + " " + vb.third + " that " + a2.word + " " +
                   n2 + " today?";
    case 4: return "Our " + std::string(a.word) + " " + n1 + " " + vb.third + " a " + n2 +
                   " during the " + anchor + " debate.";
    case 5: return capitalize(vb.base) + " the " + a.word + " " + n1 + " before the " + n2 +
                   " closes!";
    case 6: return "A " + std::string(a2.word) + " " + n1 + " " + vb.third + " the " + n2 + ".";
    default: return "Nobody expected the " + n1 + " to " + vb.base + " a " + a.word + " " + n2 +
                    " about " + anchor + ".";
  }
}

std::string pad_overlong(std::string s, const Vocabulary& v, Rng& rng) {
  if (!s.empty() && (s.back() == '.' || s.back() == '?' || s.back() == '!')) s.pop_back();
  while (word_count(s) <= 34) {
    s += ", and then the " + std::string(kAdjectives[pick(v.adjectives, rng)].word) + " " +
         pick(v.nouns, rng) + " " + kVerbs[pick(v.verbs, rng)].third + " another " +
         pick(v.nouns, rng);
  }
  return s + ".";
}

std::string strip_punct(std::string_view w, std::string& trailing) {
  std::size_t end = w.size();
  while (end > 0 && std::ispunct(static_cast<unsigned char>(w[end - 1])) && w[end - 1] != '\'')
    --end;
  trailing.assign(w.substr(end));
  return std::string(w.substr(0, end));
}

// Replaces words through a lookup that sees the lowercased word; case of the
// first letter is preserved.
template <class F>
std::pair<std::string, int> rewrite_words(std::string_view sentence, F&& lookup, int limit) {
  std::string out;
  int changed = 0;
  for (auto w : split_words(sentence)) {
    std::string trailing;
    std::string core = strip_punct(w, trailing);
    std::string lower = to_lower_ascii(core);
    std::string repl = core;
    if (changed < limit) {
      if (auto r = lookup(lower); !r.empty()) {
        repl = r;
        if (!core.empty() && std::isupper(static_cast<unsigned char>(core[0])))
          repl = capitalize(repl);
        ++changed;
      }
    }
    if (!out.empty()) out += ' ';
    out += repl + trailing;
  }
  return {out, changed};
}

std::string first_integer(std::string_view s) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (std::isdigit(static_cast<unsigned char>(s[i])) &&
        (i == 0 || !std::isalnum(static_cast<unsigned char>(s[i - 1])))) {
      std::size_t j = i;
      while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
      return std::string(s.substr(i, j - i));
    }
  }
  return {};
}

std::string last_user_message(const json& messages) {
  for (auto it = messages.rbegin(); it != messages.rend(); ++it)
    if (it->value("role", "") == "user") return it->value("content", "");
  return {};
}

std::int64_t approx_tokens(std::size_t chars) {
  return static_cast<std::int64_t>((chars + 3) / 4);
}

}  // namespace

std::string paraphrase(std::string_view sentence, Rng& rng) {
  std::string s(trim(sentence));
  if (auto it = kKnownPositives.find(s); it != kKnownPositives.end()) return it->second;
  auto lookup = [&](const std::string& w) -> std::string {
    for (const auto& a : kAdjectives)
      if (w == a.word) return a.synonym;
    for (const auto& n : kNouns)
      if (w == n.word && *n.synonym) return n.synonym;
    for (const auto& v : kVerbs)
      if (w == v.third && *v.synonym_third) return v.synonym_third;
    return {};
  };
  auto [out, changed] = rewrite_words(s, lookup, 99);
  if (changed > 0) return out;
  static constexpr std::array<const char*, 3> kLeads{"In other words, ", "Put simply, ",
                                                      "That is to say, "};
  return kLeads[rng.uniform_index(kLeads.size())] + lower_first(s);
}

std::string contradict(std::string_view sentence, Rng& rng) {
  std::string s(trim(sentence));
  if (auto it = kKnownNegatives.find(s); it != kKnownNegatives.end()) return it->second;
  auto antonym = [&](const std::string& w) -> std::string {
    for (const auto& a : kAdjectives)
      if (w == a.word || w == a.synonym) return a.antonym;
    return {};
  };
  auto [out, changed] = rewrite_words(s, antonym, 1);
  if (changed > 0) return out;
  static const std::map<std::string, std::string, std::less<>> kNegated{
      {"is", "is not"},   {"are", "are not"},   {"was", "was not"}, {"were", "were not"},
      {"can", "cannot"},  {"will", "will not"}, {"has", "has not"}, {"have", "have not"},
      {"should", "should not"}, {"does", "does not"}, {"did", "did not"}};
  auto neg = [&](const std::string& w) -> std::string {
    if (auto it = kNegated.find(w); it != kNegated.end()) return it->second;
    for (const auto& v : kVerbs)
      if (w == v.third) return std::string("never ") + v.third;
    return {};
  };
  std::tie(out, changed) = rewrite_words(s, neg, 1);
  if (changed > 0) return out;
  (void)rng;
  return "It is not true that " + lower_first(s);
}

MockOptions options_for(const pools::PoolSet& pools) {
  MockOptions o;
  o.topics = pools.topics.topics;
  for (const auto& g : pools.genres) o.genres.push_back(g.description);
  return o;
}

MockLlm::MockLlm(MockOptions options) : options_(std::move(options)) {}

llm::Stage MockLlm::detect_stage(const json& messages) {
  std::string user = last_user_message(messages);
  if (user.find(pools::kInputMarker) == std::string::npos) return llm::Stage::unlabeled;
  std::string system;
  if (!messages.empty() && messages[0].value("role", "") == "system")
    system = to_lower_ascii(messages[0].value("content", ""));
  return system.find("paraphras") != std::string::npos ? llm::Stage::positive
                                                       : llm::Stage::hard_negative;
}

std::string MockLlm::unlabeled_reply(std::string_view prompt, Rng& rng) const {
  std::string count_text = first_integer(prompt);
  std::size_t count = count_text.empty() ? 20 : std::stoul(count_text);
  count = std::clamp<std::size_t>(count, 1, 100);

  // Topics named in the prompt, in prompt order; longer names first so that
  // "mental health" does not shadow "fitness and mental health".
  std::vector<std::pair<std::size_t, std::string>> found;
  std::vector<std::string> sorted = options_.topics;
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.size() > b.size(); });
  std::string masked(prompt);
  for (const auto& t : sorted) {
    auto pos = masked.find(t);
    if (pos == std::string::npos) continue;
    found.emplace_back(pos, t);
    masked.replace(pos, t.size(), std::string(t.size(), '#'));
  }
  std::sort(found.begin(), found.end());
  int style = 0;
  for (const auto& g : options_.genres)
    if (prompt.find(g) != std::string_view::npos)
      style = std::max(style, static_cast<int>(fnv1a64(g) % 8));

  std::vector<Vocabulary> vocabs;
  for (const auto& [pos, t] : found) vocabs.push_back(topic_vocabulary(t));
  if (vocabs.empty()) vocabs.push_back(naive_vocabulary());

  std::string out;
  for (std::size_t i = 0; i < count; ++i) {
    const Vocabulary& v = vocabs[i % vocabs.size()];
    std::string s = make_sentence(v, style, rng);
    if (rng.bernoulli(options_.overlong_rate)) s = pad_overlong(s, v, rng);
    out += std::to_string(i + 1) + ". " + s + "\n";
  }
  out.pop_back();
  return out;
}

llm::Completion MockLlm::respond(const json& body) {
  if (!body.is_object() || !body.contains("messages") || !body["messages"].is_array() ||
      body["messages"].empty())
    throw ResponseFormatError("mock: request has no messages");
  const json& messages = body["messages"];
  std::string key = body.dump();
  std::size_t repeat;
  {
    std::lock_guard lock(mu_);
    repeat = seen_[key]++;
  }
  Rng rng(splitmix64(fnv1a64(key) ^ splitmix64(options_.seed) ^ splitmix64(repeat + 1)));
  llm::Stage stage = detect_stage(messages);
  std::string user = last_user_message(messages);
  std::string input;
  if (stage != llm::Stage::unlabeled) {
    auto pos = user.rfind(pools::kInputMarker);
    input = user.substr(pos + pools::kInputMarker.size());
    input = std::string(trim(input.substr(0, input.find('\n'))));
  }

  llm::Completion c;
  std::optional<std::string> forced;
  if (options_.override_reply) forced = options_.override_reply(stage, input, repeat);
  if (forced) {
    c.text = *forced;
  } else if (stage == llm::Stage::unlabeled) {
    c.text = unlabeled_reply(user, rng);
  } else if (stage == llm::Stage::positive) {
    c.text = paraphrase(input, rng);
  } else {
    c.text = contradict(input, rng);
  }

  std::size_t prompt_chars = 0;
  for (const auto& m : messages) prompt_chars += m.value("content", "").size();
  c.usage = {approx_tokens(prompt_chars), approx_tokens(c.text.size())};
  const std::optional<llm::Usage>* fixed = stage == llm::Stage::unlabeled ? &options_.unlabeled_usage
                                           : stage == llm::Stage::positive
                                               ? &options_.positive_usage
                                               : &options_.hard_negative_usage;
  if (*fixed) c.usage = **fixed;
  return c;
}

std::string completion_body(const llm::Completion& completion) {
  return json{{"id", "mock-" + sha256_hex(completion.text).substr(0, 12)},
              {"object", "chat.completion"},
              {"choices", json::array({{{"index", 0},
                                        {"message",
                                         {{"role", "assistant"}, {"content", completion.text}}},
                                        {"finish_reason", "stop"}}})},
              {"usage",
               {{"prompt_tokens", completion.usage.prompt_tokens},
                {"completion_tokens", completion.usage.completion_tokens},
                {"total_tokens",
                 completion.usage.prompt_tokens + completion.usage.completion_tokens}}}}
      .dump();
}

llm::HttpReply MockTransport::post(const std::string& path, const std::string& body) {
  return handle(path, body);
}

llm::HttpReply MockTransport::handle(const std::string& path, const std::string& body) {
  if (path != llm::kCompletionsPath) return {404, R"({"error":"not found"})"};
  json request;
  try {
    request = json::parse(body);
  } catch (const json::exception&) {
    return {400, R"({"error":"body is not JSON"})"};
  }
  {
    std::lock_guard lock(mu_);
    ++requests_;
    if (llm_.options().rate_limit_rate > 0.0 && attempted_.insert(body).second) {
      Rng coin(fnv1a64(body, llm_.options().seed));
      if (coin.bernoulli(llm_.options().rate_limit_rate)) {
        ++rate_limited_;
        return {429, R"({"error":"rate limited"})"};
      }
    }
  }
  try {
    return {200, completion_body(llm_.respond(request))};
  } catch (const ResponseFormatError& e) {
    return {400, json{{"error", e.what()}}.dump()};
  }
}

std::size_t MockTransport::requests() const {
  std::lock_guard lock(mu_);
  return requests_;
}

std::size_t MockTransport::rate_limited() const {
  std::lock_guard lock(mu_);
  return rate_limited_;
}

}  // namespace tforge::mock
