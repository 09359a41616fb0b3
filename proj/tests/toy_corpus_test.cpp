#include "tforge/toy_corpus.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <set>

#include "test_support.hpp"
#include "tforge/text.hpp"

namespace tforge::toy {
namespace {

using testing::TempDir;

TEST(ToyCorpus, ShapeAndDeterminism) {
  auto a = make_toy_corpus();
  EXPECT_EQ(a.train.size(), 400u);
  EXPECT_EQ(a.heldout.size(), 100u);
  EXPECT_EQ(a.sts.size(), 400u);
  EXPECT_EQ(a.rerank.size(), 50u);
  auto b = make_toy_corpus();
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].to_json(), b.train[i].to_json());
  std::set<std::string> anchors;
  for (const auto& t : a.train) anchors.insert(t.sent0);
  for (const auto& t : a.heldout) EXPECT_FALSE(anchors.count(t.sent0)) << t.sent0;
  for (const auto& t : a.train) EXPECT_NO_THROW(t.validate());
}

TEST(ToyCorpus, FilesRoundTrip) {
  TempDir tmp;
  auto c = make_toy_corpus();
  write_toy_corpus(tmp.path(), c);
  EXPECT_EQ(synth::read_triplets(tmp.path() / "toy_train.jsonl").size(), 400u);
  EXPECT_EQ(eval::read_sts_file(tmp.path() / "toy_sts.jsonl").size(), 400u);
  EXPECT_EQ(eval::read_rerank_file(tmp.path() / "toy_rerank.jsonl").size(), 50u);
}

struct ToyRun {
  double acc_before, acc_after, rho_before, rho_after, map_before, map_after, seconds;
  std::vector<train::StepLog> log;
};

ToyRun run_toy(std::size_t epochs) {
  auto c = make_toy_corpus();
  auto features = std::make_shared<train::HashedNgramFeatures>();
  train::TrainConfig cfg;
  cfg.seed = 7;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.max_seconds = 60.0;
  auto t0 = std::chrono::steady_clock::now();
  Rng init = derive_stream(cfg.seed, "init");
  auto start = train::ProjectionParams::random(features->dim(), cfg.dim_out, init);
  auto r = train::train(as_train_texts(c.train), *features, cfg, {}, &start);
  ToyRun out;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  eval::ProjectionEmbedder before(features, start), after(features, r.params);
  auto held = as_train_texts(c.heldout);
  out.acc_before = eval::triplet_accuracy(before, held);
  out.acc_after = eval::triplet_accuracy(after, held);
  out.rho_before = eval::spearman_of(before, c.sts);
  out.rho_after = eval::spearman_of(after, c.sts);
  out.map_before = eval::mean_average_precision(before, c.rerank);
  out.map_after = eval::mean_average_precision(after, c.rerank);
  out.log = r.log;
  return out;
}

TEST(ToyCorpus, TrainingLearnsTheTemplates) {
  auto r = run_toy(10);
  std::printf("toy: %.1fs acc %.3f -> %.3f, rho %.3f -> %.3f, map %.3f -> %.3f\n", r.seconds,
              r.acc_before, r.acc_after, r.rho_before, r.rho_after, r.map_before, r.map_after);
  EXPECT_GE(r.acc_after, 0.9);
  EXPECT_GE(r.rho_after - r.rho_before, 0.2);
}

TEST(ToyCorpus, SmoothedLossDecreasesOverFirst200Steps) {
  auto c = make_toy_corpus();
  train::HashedNgramFeatures features;
  train::TrainConfig cfg;
  cfg.seed = 7;
  cfg.batch_size = 16;
  cfg.epochs = 8;  // 25 steps per epoch
  auto r = train::train(as_train_texts(c.train), features, cfg);
  ASSERT_GE(r.log.size(), 200u);
  // Means over consecutive windows of 25 steps (one epoch each).
  std::vector<double> windows;
  for (std::size_t w = 0; w < 8; ++w) {
    double s = 0;
    for (std::size_t k = 0; k < 25; ++k) s += r.log[w * 25 + k].loss;
    windows.push_back(s / 25);
  }
  for (std::size_t w = 1; w < windows.size(); ++w)
    EXPECT_LT(windows[w], windows[w - 1]) << "window " << w;
}

}  // namespace
}  // namespace tforge::toy
