#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "tforge/trainer.hpp"

namespace tforge::eval {

// Fractional ranks (1-based, ties get the average of the ranks they span).
std::vector<double> fractional_ranks(std::span<const double> xs);

// Pearson correlation of fractional ranks. Throws DatasetError on length
// mismatch, fewer than two items, or a constant sequence.
double spearman(std::span<const double> xs, std::span<const double> ys);

// Mean over relevant positions k of precision@k; 0 when nothing is relevant.
// Throws DatasetError on an empty list.
double average_precision(const std::vector<bool>& ranked);

struct ScoredPair {
  std::string text_a;
  std::string text_b;
  double gold = 0.0;
  nlohmann::json to_json() const;
};

struct Candidate {
  std::string text;
  bool relevant = false;
};

// Candidates keep file order: positives first, then negatives.
struct RerankQuery {
  std::string query;
  std::vector<Candidate> candidates;
  nlohmann::json to_json() const;
};

std::vector<ScoredPair> read_sts_file(const std::filesystem::path& path);
std::vector<RerankQuery> read_rerank_file(const std::filesystem::path& path);
void write_sts_file(const std::filesystem::path& path, const std::vector<ScoredPair>& pairs);
void write_rerank_file(const std::filesystem::path& path, const std::vector<RerankQuery>& queries);

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<double> embed(std::string_view text) const = 0;
};

// Evaluation-mode encoder: featurize, then project without masking.
class ProjectionEmbedder : public Embedder {
 public:
  ProjectionEmbedder(std::shared_ptr<const train::FeatureSource> features,
                     train::ProjectionParams params);
  std::vector<double> embed(std::string_view text) const override;
  const train::ProjectionParams& params() const { return params_; }

 private:
  std::shared_ptr<const train::FeatureSource> features_;
  train::ProjectionParams params_;
};

// Loads a checkpoint and the feature source its header describes.
ProjectionEmbedder load_embedder(const std::filesystem::path& checkpoint,
                                 const std::filesystem::path& features_override = {});

// Cosine that scores a zero vector as 0 instead of throwing, so a text with
// no features ranks neutrally.
double eval_cosine(std::span<const double> a, std::span<const double> b);

// Candidate indices by descending score; ties keep original order.
std::vector<std::size_t> rank_by_score(std::span<const double> scores);

// Fraction of triplets with cos(x, x+) > cos(x, x-).
double triplet_accuracy(const Embedder& embedder,
                        const std::vector<train::TrainText>& triplets);

struct FileResult {
  std::string file;
  std::size_t items = 0;
  double value = 0.0;
};

struct EvalReport {
  std::string task;    // "sts" or "rerank"
  std::string metric;  // "spearman" or "map"
  std::string checkpoint;
  std::string checkpoint_sha256;
  std::vector<FileResult> files;
  double average = 0.0;  // unweighted mean over files

  nlohmann::json to_json() const;
};

double spearman_of(const Embedder& embedder, const std::vector<ScoredPair>& pairs);
double mean_average_precision(const Embedder& embedder, const std::vector<RerankQuery>& queries);

EvalReport eval_sts(const Embedder& embedder, const std::vector<std::filesystem::path>& files);
EvalReport eval_rerank(const Embedder& embedder, const std::vector<std::filesystem::path>& files);

}  // namespace tforge::eval
