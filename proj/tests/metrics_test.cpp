#include "tforge/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "test_support.hpp"
#include "tforge/error.hpp"
#include "tforge/text.hpp"

namespace tforge::eval {
namespace {

using testing::TempDir;

// Reference rank: 1 + #smaller + (#equal - 1) / 2, computed pairwise.
std::vector<double> brute_ranks(const std::vector<double>& xs) {
  std::vector<double> r;
  for (double x : xs) {
    double less = 0, equal = 0;
    for (double y : xs) {
      if (y < x) less += 1;
      if (y == x) equal += 1;
    }
    r.push_back(1 + less + (equal - 1) / 2);
  }
  return r;
}

double brute_spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  auto a = brute_ranks(xs), b = brute_ranks(ys);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    da += (a[i] - ma) * (a[i] - ma);
    db += (b[i] - mb) * (b[i] - mb);
  }
  return num / std::sqrt(da * db);
}

// Reference AP straight from the definition: precision at each relevant cut.
double brute_ap(const std::vector<bool>& r) {
  std::vector<double> precisions;
  for (std::size_t k = 0; k < r.size(); ++k) {
    if (!r[k]) continue;
    double rel = 0;
    for (std::size_t j = 0; j <= k; ++j) rel += r[j] ? 1 : 0;
    precisions.push_back(rel / static_cast<double>(k + 1));
  }
  if (precisions.empty()) return 0.0;
  double s = 0;
  for (double p : precisions) s += p;
  return s / static_cast<double>(precisions.size());
}

// Text -> fixed vector lookup, for planting rankings.
class TableEmbedder : public Embedder {
 public:
  std::map<std::string, std::vector<double>> table;
  std::vector<double> embed(std::string_view t) const override { return table.at(std::string(t)); }
};

TEST(Spearman, HandValues) {
  std::vector<double> a{1, 2, 3}, b{1, 3, 2}, c{3, 2, 1};
  EXPECT_NEAR(spearman(a, b), 0.5, 1e-12);
  EXPECT_DOUBLE_EQ(spearman(a, a), 1.0);
  EXPECT_DOUBLE_EQ(spearman(a, c), -1.0);
  EXPECT_NEAR(brute_spearman(a, b), 0.5, 1e-12);
}

TEST(Spearman, TiesGetAverageRanks) {
  std::vector<double> x{10, 20, 20, 30};
  auto r = fractional_ranks(x);
  EXPECT_EQ(r, (std::vector<double>{1, 2.5, 2.5, 4}));
}

TEST(Spearman, Errors) {
  std::vector<double> a{1, 2, 3}, b{1, 2}, k{4, 4, 4}, one{1};
  EXPECT_THROW(spearman(a, b), DatasetError);
  EXPECT_THROW(spearman(a, k), DatasetError);
  EXPECT_THROW(spearman(one, one), DatasetError);
}

TEST(Spearman, MatchesBruteForce) {
  Rng rng(101);
  double worst = 0.0;
  int done = 0;
  while (done < 1000) {
    std::size_t n = 2 + rng.uniform_index(9);
    std::vector<double> x, y;
    for (std::size_t i = 0; i < n; ++i) {
      // Small integer grid so ties are common.
      x.push_back(static_cast<double>(rng.uniform_index(5)));
      y.push_back(static_cast<double>(rng.uniform_index(5)));
    }
    auto constant = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [&](double e) { return e == v[0]; });
    };
    if (constant(x) || constant(y)) continue;
    worst = std::max(worst, std::abs(spearman(x, y) - brute_spearman(x, y)));
    ++done;
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(Spearman, MonotoneTransformInvariance) {
  Rng rng(102);
  for (int t = 0; t < 200; ++t) {
    std::size_t n = 2 + rng.uniform_index(20);
    std::vector<double> x, y;
    for (std::size_t i = 0; i < n; ++i) {
      x.push_back(0.1 + rng.uniform01());
      y.push_back(0.1 + rng.uniform01());
    }
    double base = spearman(x, y);
    std::vector<double> lin, cube;
    for (double v : x) {
      lin.push_back(2 * v + 3);
      cube.push_back(v * v * v);
    }
    EXPECT_NEAR(spearman(lin, y), base, 1e-12);
    EXPECT_NEAR(spearman(cube, y), base, 1e-12);
    std::vector<double> ycube;
    for (double v : y) ycube.push_back(v * v * v);
    EXPECT_NEAR(spearman(x, ycube), base, 1e-12);
  }
}

TEST(Spearman, RecordOrderInvariance) {
  Rng rng(103);
  for (int t = 0; t < 200; ++t) {
    std::size_t n = 2 + rng.uniform_index(15);
    std::vector<double> x, y;
    for (std::size_t i = 0; i < n; ++i) {
      x.push_back(rng.uniform01());
      y.push_back(rng.uniform01());
    }
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    rng.shuffle(p);
    std::vector<double> xp, yp;
    for (std::size_t i : p) {
      xp.push_back(x[i]);
      yp.push_back(y[i]);
    }
    EXPECT_NEAR(spearman(x, y), spearman(xp, yp), 1e-12);
  }
}

TEST(AveragePrecision, HandValues) {
  EXPECT_DOUBLE_EQ(average_precision({true}), 1.0);
  EXPECT_DOUBLE_EQ(average_precision({false, false}), 0.0);
  EXPECT_NEAR(average_precision({true, false, true}), 5.0 / 6.0, 1e-12);
  EXPECT_THROW(average_precision({}), DatasetError);
}

TEST(AveragePrecision, ExhaustiveUpToSix) {
  for (std::size_t n = 1; n <= 6; ++n) {
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
      std::vector<bool> r;
      for (std::size_t k = 0; k < n; ++k) r.push_back((mask >> k) & 1u);
      EXPECT_NEAR(average_precision(r), brute_ap(r), 1e-12);
    }
  }
}

TEST(AveragePrecision, MatchesBruteForce) {
  Rng rng(104);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    std::size_t n = 1 + rng.uniform_index(10);
    std::vector<bool> r;
    for (std::size_t k = 0; k < n; ++k) r.push_back(rng.bernoulli(0.4));
    worst = std::max(worst, std::abs(average_precision(r) - brute_ap(r)));
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(AveragePrecision, TrailingIrrelevantItemsDoNotMatter) {
  Rng rng(105);
  for (int t = 0; t < 200; ++t) {
    std::vector<bool> r;
    std::size_t n = 1 + rng.uniform_index(8);
    for (std::size_t k = 0; k < n; ++k) r.push_back(rng.bernoulli(0.5));
    r.push_back(true);
    double base = average_precision(r);
    for (int k = 0; k < 4; ++k) r.push_back(false);
    EXPECT_DOUBLE_EQ(average_precision(r), base);
  }
}

TEST(Ranking, StableTieBreak) {
  std::vector<double> s{0.5, 0.9, 0.5, 0.9, 0.1};
  EXPECT_EQ(rank_by_score(s), (std::vector<std::size_t>{1, 3, 0, 2, 4}));
}

TEST(EvalCosine, ZeroVectorScoresZero) {
  std::vector<double> a{1, 0}, z{0, 0};
  EXPECT_EQ(eval_cosine(a, z), 0.0);
  EXPECT_DOUBLE_EQ(eval_cosine(a, a), 1.0);
}

TEST(Rerank, VerbatimDuplicateGivesMapOne) {
  TableEmbedder e;
  Rng rng(106);
  std::vector<RerankQuery> qs;
  for (int i = 0; i < 20; ++i) {
    RerankQuery q;
    q.query = "q" + std::to_string(i);
    std::vector<double> v{rng.normal(), rng.normal(), rng.normal()};
    e.table[q.query] = v;
    q.candidates.push_back({q.query, true});
    for (int k = 0; k < 4; ++k) {
      std::string t = q.query + "_n" + std::to_string(k);
      e.table[t] = {rng.normal(), rng.normal(), rng.normal()};
      q.candidates.push_back({t, false});
    }
    qs.push_back(q);
  }
  EXPECT_DOUBLE_EQ(mean_average_precision(e, qs), 1.0);
}

TEST(Rerank, AllIrrelevantGivesZero) {
  TableEmbedder e;
  e.table["q"] = {1, 0};
  e.table["a"] = {1, 1};
  e.table["b"] = {0, 1};
  RerankQuery q{"q", {{"a", false}, {"b", false}}};
  EXPECT_EQ(mean_average_precision(e, {q, q}), 0.0);
}

TEST(Rerank, PlantedFixtureMatchesOracle) {
  // 50 queries in 2-d: candidate k sits at angle theta_k from the query, so
  // the ranking is known in advance.
  TableEmbedder e;
  Rng rng(107);
  std::vector<RerankQuery> qs;
  double oracle = 0.0;
  for (int i = 0; i < 50; ++i) {
    RerankQuery q;
    q.query = "q" + std::to_string(i);
    e.table[q.query] = {1.0, 0.0};
    std::size_t n = 2 + rng.uniform_index(8);
    std::vector<std::pair<double, bool>> planted;
    for (std::size_t k = 0; k < n; ++k) {
      double theta = 0.05 + 3.0 * rng.uniform01();
      bool rel = rng.bernoulli(0.4);
      std::string t = q.query + "_" + std::to_string(k);
      e.table[t] = {std::cos(theta), std::sin(theta)};
      q.candidates.push_back({t, rel});
      planted.push_back({theta, rel});
    }
    std::stable_sort(planted.begin(), planted.end());
    std::vector<bool> r;
    for (auto& [th, rel] : planted) r.push_back(rel);
    oracle += brute_ap(r) / 50.0;
    qs.push_back(q);
  }
  EXPECT_NEAR(mean_average_precision(e, qs), oracle, 1e-12);
  // Record order does not matter.
  std::reverse(qs.begin(), qs.end());
  EXPECT_NEAR(mean_average_precision(e, qs), oracle, 1e-12);
}

TEST(Sts, SelfConsistentFileGivesOne) {
  TempDir tmp;
  Rng rng(108);
  auto params = train::ProjectionParams::random(4096, 16, rng);
  auto features = std::make_shared<train::HashedNgramFeatures>();
  ProjectionEmbedder e(features, params);
  const std::vector<std::string> texts{"a red kite", "a blue kite", "the hotel", "a room in the hotel",
                                       "dogs run", "cats sleep", "the red hotel", "kites fly high"};
  std::vector<ScoredPair> pairs;
  for (std::size_t i = 0; i + 1 < texts.size(); ++i)
    for (std::size_t j = i + 1; j < texts.size(); ++j)
      pairs.push_back({texts[i], texts[j], eval_cosine(e.embed(texts[i]), e.embed(texts[j]))});
  write_sts_file(tmp.path() / "a.jsonl", pairs);
  std::reverse(pairs.begin(), pairs.end());
  write_sts_file(tmp.path() / "b.jsonl", pairs);
  auto r = eval_sts(e, {tmp.path() / "a.jsonl", tmp.path() / "b.jsonl"});
  ASSERT_EQ(r.files.size(), 2u);
  EXPECT_DOUBLE_EQ(r.files[0].value, 1.0);
  EXPECT_EQ(r.files[0].value, r.files[1].value);
  EXPECT_DOUBLE_EQ(r.average, 1.0);
  EXPECT_EQ(r.to_json()["files"][0]["spearman"], 1.0);
}

TEST(Sts, AverageIsUnweightedMean) {
  TempDir tmp;
  TableEmbedder e;
  e.table = {{"a", {1, 0}}, {"b", {1, 0.2}}, {"c", {1, 0.5}}, {"d", {0, 1}}};
  write_sts_file(tmp.path() / "up.jsonl", {{"a", "b", 3}, {"a", "c", 2}, {"a", "d", 1}});
  write_sts_file(tmp.path() / "down.jsonl",
                 {{"a", "b", 1}, {"a", "c", 2}, {"a", "d", 3}, {"a", "a", 0}, {"b", "b", 0.5}});
  auto r = eval_sts(e, {tmp.path() / "up.jsonl", tmp.path() / "down.jsonl"});
  EXPECT_DOUBLE_EQ(r.files[0].value, 1.0);
  EXPECT_DOUBLE_EQ(r.average, (r.files[0].value + r.files[1].value) / 2.0);
}

TEST(Sts, ConstantGoldFails) {
  TempDir tmp;
  TableEmbedder e;
  e.table = {{"a", {1, 0}}, {"b", {0, 1}}};
  write_sts_file(tmp.path() / "k.jsonl", {{"a", "b", 2}, {"b", "a", 2}});
  EXPECT_THROW(eval_sts(e, {tmp.path() / "k.jsonl"}), DatasetError);
}

TEST(Files, ParseErrorsCarryLineNumbers) {
  TempDir tmp;
  write_file_atomic(tmp.path() / "s.jsonl", "{\"text_a\":\"x\",\"text_b\":\"y\",\"score\":1}\n{\"text_a\":\"x\"}\n");
  try {
    read_sts_file(tmp.path() / "s.jsonl");
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("s.jsonl:2"), std::string::npos);
  }
  write_file_atomic(tmp.path() / "r.jsonl", "{\"query\":\"x\",\"positives\":[],\"negatives\":[]}\n");
  EXPECT_THROW(read_rerank_file(tmp.path() / "r.jsonl"), DatasetError);
  EXPECT_THROW(read_sts_file(tmp.path() / "missing.jsonl"), IoError);
}

TEST(Files, RerankRoundTripKeepsCandidateOrder) {
  TempDir tmp;
  RerankQuery q{"q", {{"p1", true}, {"p2", true}, {"n1", false}}};
  write_rerank_file(tmp.path() / "r.jsonl", {q});
  auto back = read_rerank_file(tmp.path() / "r.jsonl");
  ASSERT_EQ(back.size(), 1u);
  ASSERT_EQ(back[0].candidates.size(), 3u);
  EXPECT_EQ(back[0].candidates[1].text, "p2");
  EXPECT_FALSE(back[0].candidates[2].relevant);
}

TEST(Embedder, LoadsFromCheckpoint) {
  TempDir tmp;
  Rng rng(109);
  auto p = train::ProjectionParams::random(512, 8, rng);
  train::HashedNgramFeatures f({512, 3, 5});
  train::save_checkpoint(tmp.path() / "m.ckpt", p, {{"featurizer", f.describe()}});
  auto e = load_embedder(tmp.path() / "m.ckpt");
  EXPECT_EQ(e.embed("a red kite"), train::encode(f.features("a red kite"), p));
}

}  // namespace
}  // namespace tforge::eval
