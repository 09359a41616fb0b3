#include "tforge/prompt_pools.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "test_support.hpp"
#include "tforge/error.hpp"
#include "tforge/text.hpp"

namespace tforge::pools {
namespace {

using nlohmann::json;
using tforge::testing::TempDir;

std::filesystem::path write_json(const TempDir& dir, const json& doc,
                                 const std::string& name = "pools.json") {
  const auto path = dir / name;
  std::ofstream(path) << doc.dump(2);
  return path;
}

std::string load_error(const std::filesystem::path& path) {
  try {
    load_pools(path);
  } catch (const PoolError& e) {
    return e.what();
  }
  return "";
}

// Count-within-4-sigma check for uniform sampling over `pool_size` items.
void expect_uniform_counts(const std::vector<int>& counts, int draws) {
  const double p = 1.0 / static_cast<double>(counts.size());
  const double mean = draws * p;
  const double bound = 4.0 * std::sqrt(draws * p * (1 - p));
  for (std::size_t i = 0; i < counts.size(); ++i) {
    EXPECT_LE(std::abs(counts[i] - mean), bound) << "item " << i;
  }
}

TEST(LoadPools, BundledDefaultFile) {
  const PoolSet pools = load_pools(tforge::testing::default_pools_path());
  EXPECT_EQ(pools.positive_prompts.size(), 4u);
  EXPECT_EQ(pools.hard_negative_prompts.size(), 4u);
  EXPECT_EQ(pools.unlabeled_prompts.size(), 4u);
  EXPECT_EQ(pools.caption_prompts.size(), 4u);
  EXPECT_EQ(pools.genres.size(), 21u);
  EXPECT_EQ(pools.topics.topics.size(), 37u);
  EXPECT_EQ(pools.positive_exemplars.size(), 6u);
  EXPECT_EQ(pools.hard_negative_exemplars.size(), 6u);
  EXPECT_GE(pools.unlabeled_exemplars.size(), 1u);
  ASSERT_TRUE(pools.naive_prompt.has_value());
  EXPECT_EQ(pools.source_sha256.size(), 64u);
  EXPECT_NO_THROW(validate_pools(pools, 5));

  EXPECT_EQ(pools.hard_negative_prompts[0].text.rfind("Revise the provided sentence by swapping", 0), 0u);
  EXPECT_EQ(pools.genres[4].description, "image descriptions");
  EXPECT_TRUE(pools.genres[4].caption_style);
  EXPECT_EQ(pools.topics.topics.back(), "mental health");
}

TEST(LoadPools, MinimalPoolIsValid) {
  TempDir dir;
  const PoolSet pools = load_pools(write_json(dir, tforge::testing::minimal_pool_json()));
  EXPECT_EQ(pools.positive_prompts.size(), 1u);
  EXPECT_EQ(pools.exemplars(ExemplarKind::unlabeled).size(), 1u);
  EXPECT_THROW(validate_pools(pools, 5), PoolError);
}

TEST(LoadPools, UnlabeledTemplateMissingTopicNamesTemplate) {
  TempDir dir;
  json doc = tforge::testing::minimal_pool_json();
  doc["unlabeled_prompts"][0]["id"] = "broken-topics";
  doc["unlabeled_prompts"][0]["text"] =
      "Write {number} sentences for {genre_description} about {topic_1}, {topic_2}, "
      "{topic_4}, {topic_5}, {topic_6}.";
  const std::string err = load_error(write_json(dir, doc));
  EXPECT_NE(err.find("broken-topics"), std::string::npos) << err;
  EXPECT_NE(err.find("{topic_3}"), std::string::npos) << err;
}

TEST(LoadPools, MissingFileAndMalformedJson) {
  TempDir dir;
  EXPECT_NE(load_error(dir / "nope.json").find("not found"), std::string::npos);

  const auto bad = dir / "bad.json";
  std::ofstream(bad) << "{\n  \"positive_prompts\": [\n    {\"id\": \"p1\",, }\n  ]\n}\n";
  const std::string err = load_error(bad);
  EXPECT_NE(err.find("bad.json:3:"), std::string::npos) << err;
}

TEST(LoadPools, InvariantViolationsAreRejected) {
  TempDir dir;
  {
    json doc = tforge::testing::minimal_pool_json();
    doc["positive_prompts"].push_back({{"id", "p1"}, {"text", "Again."}});
    EXPECT_NE(load_error(write_json(dir, doc)).find("duplicate prompt id"), std::string::npos);
  }
  {
    json doc = tforge::testing::minimal_pool_json();
    doc["positive_prompts"][0]["text"] = "Paraphrase {number} sentences.";
    EXPECT_NE(load_error(write_json(dir, doc)).find("not allowed"), std::string::npos);
  }
  {
    json doc = tforge::testing::minimal_pool_json();
    doc["topics"] = json::array({"a", "b", "c", "d", "e"});
    EXPECT_NE(load_error(write_json(dir, doc)).find("at least 6"), std::string::npos);
  }
  {
    json doc = tforge::testing::minimal_pool_json();
    doc["topics"] = json::array({"a", "b", "c", "d", "e", "a"});
    EXPECT_NE(load_error(write_json(dir, doc)).find("duplicate topic"), std::string::npos);
  }
  {
    json doc = tforge::testing::minimal_pool_json();
    doc["genres"].push_back({{"id", 2}, {"description", "letters"}});
    EXPECT_NE(load_error(write_json(dir, doc)).find("duplicate genre"), std::string::npos);
  }
  {
    json doc = tforge::testing::minimal_pool_json();
    doc["exemplars"][2]["output"] = "Birds fly in the sky.";
    EXPECT_NE(load_error(write_json(dir, doc)).find("list of sentences"), std::string::npos);
  }
  {
    json doc = tforge::testing::minimal_pool_json();
    doc["caption_prompts"] = json::array();
    EXPECT_NE(load_error(write_json(dir, doc)).find("caption_prompts"), std::string::npos);
  }
}

TEST(Render, EscapesAndMissingValues) {
  EXPECT_EQ(render("{{literal}} {x}", {{"x", "1"}}), "{literal} 1");
  EXPECT_THROW(render("{x} {y}", {{"x", "1"}}), PoolError);
  EXPECT_EQ(placeholders("a {b} {{c}} {d_1}"), (std::vector<std::string>{"b", "d_1"}));
  EXPECT_TRUE(contains_placeholder("left {topic_1} over"));
  EXPECT_FALSE(contains_placeholder("no { placeholder } here {1}"));
}

TEST(SamplePrompt, SingletonAndDeterminism) {
  const PoolSet pools = load_pools(tforge::testing::default_pools_path());
  std::vector<PromptTemplate> one = {pools.positive_prompts[2]};
  Rng rng(123);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sample_prompt(one, rng).id, "pos-3");

  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(sample_prompt(pools.hard_negative_prompts, a).id,
              sample_prompt(pools.hard_negative_prompts, b).id);
  }
  std::vector<PromptTemplate> empty;
  EXPECT_THROW(sample_prompt(empty, a), PoolError);
}

TEST(SamplePrompt, UniformMarginalsOver40000Draws) {
  const PoolSet pools = load_pools(tforge::testing::default_pools_path());
  for (std::uint64_t seed : {1ULL, 7ULL, 2024ULL}) {
    Rng rng(seed);
    std::map<std::string, int> counts;
    for (int i = 0; i < 40000; ++i) ++counts[sample_prompt(pools.positive_prompts, rng).id];
    std::vector<int> values;
    for (const auto& [id, c] : counts) {
      values.push_back(c);
      EXPECT_NEAR(c, 10000, 500) << id << " seed " << seed;
    }
    ASSERT_EQ(values.size(), 4u);
    expect_uniform_counts(values, 40000);
  }
}

TEST(SamplePrompt, WeightsShiftTheDistribution) {
  std::vector<PromptTemplate> pool = {{"heavy", PromptKind::positive, "a", 3.0},
                                      {"light", PromptKind::positive, "b", 1.0}};
  Rng rng(5);
  int heavy = 0;
  for (int i = 0; i < 40000; ++i) heavy += sample_prompt(pool, rng).id == "heavy";
  EXPECT_NEAR(heavy, 30000, 4 * std::sqrt(40000 * 0.75 * 0.25));
}

TEST(SampleExemplars, WithoutReplacement) {
  std::vector<Exemplar> pool;
  for (int i = 0; i < 18; ++i) {
    pool.push_back({"e" + std::to_string(i), ExemplarKind::positive, "in", "out", std::nullopt});
  }
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    auto five = sample_exemplars(pool, 5, rng);
    std::set<std::string> ids;
    for (const auto& e : five) ids.insert(e.id);
    EXPECT_EQ(ids.size(), 5u);
  }
  auto all = sample_exemplars(pool, pool.size(), rng);
  std::set<std::string> ids;
  for (const auto& e : all) ids.insert(e.id);
  EXPECT_EQ(ids.size(), pool.size());
  EXPECT_TRUE(sample_exemplars(pool, 0, rng).empty());
  EXPECT_THROW(sample_exemplars(pool, 19, rng), PoolError);
}

TEST(BuildAnnotationChat, ShapeAndMarkers) {
  const PoolSet pools = load_pools(tforge::testing::default_pools_path());
  const PromptTemplate& prompt = pools.positive_prompts[0];

  auto zero = build_annotation_chat(prompt, {}, "You have access to the facts.");
  ASSERT_EQ(zero.messages.size(), 2u);
  EXPECT_EQ(zero.messages[0].role, Role::system);

  Rng rng(3);
  auto five = sample_exemplars(pools.positive_exemplars, 5, rng);
  auto chat = build_annotation_chat(prompt, five, "You have access to the facts.",
                                    pools.system.positive);
  ASSERT_EQ(chat.messages.size(), 12u);
  EXPECT_EQ(chat.messages[0].content,
            "You are a helpful assistant that generates a paraphrased sentence of the input.");
  for (std::size_t i = 1; i < chat.messages.size(); ++i) {
    const auto& m = chat.messages[i];
    EXPECT_EQ(m.role, i % 2 == 1 ? Role::user : Role::assistant);
    if (m.role == Role::user) {
      EXPECT_EQ(m.content.rfind(prompt.text, 0), 0u);
      EXPECT_NE(m.content.find("\nThe input sentence is: "), std::string::npos);
      EXPECT_NE(m.content.find("What is your generated sentence?"), std::string::npos);
    } else {
      EXPECT_EQ(m.content, five[(i - 2) / 2].output);
    }
  }
  EXPECT_NE(chat.messages.back().content.find("The input sentence is: You have access to the facts.\n"),
            std::string::npos);

  auto negatives = sample_exemplars(pools.hard_negative_exemplars, 2, rng);
  EXPECT_THROW(build_annotation_chat(prompt, negatives, "x"), PoolError);
  EXPECT_THROW(build_annotation_chat(pools.unlabeled_prompts[0], {}, "x"), PoolError);
}

TEST(SampleGenreAndTopics, ExactlySixTopics) {
  TempDir dir;
  const PoolSet pools = load_pools(write_json(dir, tforge::testing::minimal_pool_json()));
  Rng rng(17);
  auto gt = sample_genre_and_topics(pools, rng);
  std::vector<std::string> sorted = gt.topics;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, pools.topics.topics);

  Rng a(4), b(4);
  auto x = sample_genre_and_topics(pools, a);
  auto y = sample_genre_and_topics(pools, b);
  EXPECT_EQ(x.genre.id, y.genre.id);
  EXPECT_EQ(x.topics, y.topics);

  PoolSet few = pools;
  few.topics.topics.pop_back();
  EXPECT_THROW(sample_genre_and_topics(few, rng), PoolError);
}

TEST(SampleGenreAndTopics, GenreMarginals) {
  const PoolSet pools = load_pools(tforge::testing::default_pools_path());
  Rng rng(7);
  std::map<int, int> counts;
  const int draws = 37000;
  for (int i = 0; i < draws; ++i) {
    auto gt = sample_genre_and_topics(pools, rng);
    std::set<std::string> distinct(gt.topics.begin(), gt.topics.end());
    ASSERT_EQ(distinct.size(), 6u);
    ++counts[gt.genre.id];
  }
  ASSERT_EQ(counts.size(), 21u);
  // A relative 5% band is only ~2.15 sigma at this n, so an exact uniform
  // sampler would miss it for some genre about half the time; the 4 sigma
  // band is the meaningful check.
  std::vector<int> values;
  for (const auto& [id, c] : counts) values.push_back(c);
  expect_uniform_counts(values, draws);
}

TEST(BuildUnlabeledPrompt, FillsEverySlot) {
  const PoolSet pools = load_pools(tforge::testing::default_pools_path());
  Rng rng(21);
  const Exemplar& ex = pools.unlabeled_exemplars[0];
  for (const PromptTemplate& prompt : pools.unlabeled_prompts) {
    auto gt = sample_genre_and_topics(pools, rng);
    auto chat = build_unlabeled_prompt(prompt, gt.genre, gt.topics, 10, ex, pools.system.unlabeled);
    ASSERT_EQ(chat.messages.size(), 4u);
    EXPECT_EQ(chat.messages[1].content, ex.input);
    EXPECT_EQ(chat.messages[2].content, ex.output);
    const std::string& filled = chat.messages[3].content;
    EXPECT_NE(filled.find("10"), std::string::npos);
    EXPECT_NE(filled.find(gt.genre.description), std::string::npos);
    for (const auto& t : gt.topics) EXPECT_NE(filled.find(t), std::string::npos) << t;
    EXPECT_FALSE(contains_placeholder(filled));
  }
  const Genre& genre = pools.genres[0];
  const std::vector<std::string> topics(pools.topics.topics.begin(), pools.topics.topics.begin() + 6);
  EXPECT_THROW(build_unlabeled_prompt(pools.unlabeled_prompts[0], genre, topics, 0, ex, "s"),
               PoolError);
  // Missing topics leave slots unfilled.
  EXPECT_THROW(build_unlabeled_prompt(pools.unlabeled_prompts[0], genre, {}, 20, ex, "s"), PoolError);
  EXPECT_THROW(build_unlabeled_prompt(pools.positive_prompts[0], genre, topics, 20, ex, "s"),
               PoolError);
}

TEST(BuildUnlabeledPrompt, CaptionTemplateWithExamples) {
  const PoolSet pools = load_pools(tforge::testing::default_pools_path());
  const PromptTemplate& cap4 = pools.caption_prompts[3];
  ASSERT_EQ(caption_example_slots(cap4), 4u);
  const Genre* images = pools.find_genre(5);
  ASSERT_NE(images, nullptr);
  const std::vector<std::string> examples = {"A dog runs.", "A boy swims.", "A cat naps.",
                                             "A girl sings."};
  auto chat = build_unlabeled_prompt(cap4, *images, {}, 20, pools.unlabeled_exemplars[0],
                                     pools.system.unlabeled, examples);
  const std::string& filled = chat.messages.back().content;
  EXPECT_NE(filled.find("image descriptions"), std::string::npos);
  EXPECT_NE(filled.find("A girl sings."), std::string::npos);
  EXPECT_NE(filled.find("20"), std::string::npos);
}

TEST(Transcript, ValidateRejectsBadShapes) {
  ChatTranscript t;
  EXPECT_THROW(t.validate(), PoolError);
  t.messages = {{Role::user, "hi"}};
  EXPECT_THROW(t.validate(), PoolError);
  t.messages = {{Role::system, "s"}, {Role::user, "u"}, {Role::assistant, "a"}};
  EXPECT_THROW(t.validate(), PoolError);
  t.messages = {{Role::system, "s"}, {Role::user, "fill {topic_1}"}};
  EXPECT_THROW(t.validate(), PoolError);
  t.messages = {{Role::system, "s"}, {Role::user, "u"}};
  EXPECT_NO_THROW(t.validate());
}

// Property: random builds over the bundled pools never leak a placeholder and
// always have 2 + 2k messages.
TEST(TranscriptProperties, RandomBuildsAreWellFormed) {
  const PoolSet pools = load_pools(tforge::testing::default_pools_path());
  Rng rng(2718);
  for (int trial = 0; trial < 500; ++trial) {
    const bool negative = rng.bernoulli(0.5);
    const auto& prompts = negative ? pools.hard_negative_prompts : pools.positive_prompts;
    const auto& exemplars = negative ? pools.hard_negative_exemplars : pools.positive_exemplars;
    const std::size_t k = rng.uniform_index(exemplars.size() + 1);
    auto chosen = sample_exemplars(exemplars, k, rng);
    auto chat = build_annotation_chat(sample_prompt(prompts, rng), chosen, "A sentence.");
    ASSERT_EQ(chat.messages.size(), 2 + 2 * k);
    for (const auto& m : chat.messages) ASSERT_FALSE(contains_placeholder(m.content));
  }
}

}  // namespace
}  // namespace tforge::pools
