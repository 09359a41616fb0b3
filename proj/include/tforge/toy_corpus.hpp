#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "tforge/metrics.hpp"
#include "tforge/synthesis.hpp"

namespace tforge::toy {

// Templated sentences "the <adj> <noun> <verb> <prep> the <place>" over
// synonym clusters. Positives resample every slot from its cluster;
// hard negatives swap the adjective for an antonym or negate the verb and
// keep every other word.
struct ToyOptions {
  std::uint64_t seed = 7;
  std::size_t triplets = 500;
  std::size_t heldout = 100;  // taken out of `triplets`
  std::size_t sts_pairs = 400;
  std::size_t rerank_queries = 50;
};

struct ToyCorpus {
  std::vector<synth::Triplet> train;
  std::vector<synth::Triplet> heldout;
  // Gold: 5 paraphrase, 3 one slot changed, 2 two slots changed,
  // 1 contradiction, 0 unrelated.
  std::vector<eval::ScoredPair> sts;
  std::vector<eval::RerankQuery> rerank;
};

ToyCorpus make_toy_corpus(const ToyOptions& options = {});

// toy_train.jsonl, toy_heldout.jsonl, toy_sts.jsonl, toy_rerank.jsonl.
void write_toy_corpus(const std::filesystem::path& dir, const ToyCorpus& corpus);

std::vector<train::TrainText> as_train_texts(const std::vector<synth::Triplet>& triplets);

}  // namespace tforge::toy
