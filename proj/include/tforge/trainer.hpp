#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "tforge/rng.hpp"

namespace tforge::train {

// L2-normalized feature vector stored as sorted (index, value) pairs.
struct SparseVector {
  std::size_t dim = 0;
  std::vector<std::uint32_t> index;
  std::vector<double> value;

  bool empty() const { return index.empty(); }
  double norm() const;
  std::vector<double> dense() const;
  static SparseVector from_dense(std::span<const double> v);
};

double dot(const SparseVector& a, const SparseVector& b);

struct FeaturizerConfig {
  std::size_t dim = 4096;
  int min_n = 3;
  int max_n = 5;
  nlohmann::json to_json() const;
};

// Signed-hash counts of the character n-grams of " lowercased text ",
// L2-normalized. Whitespace-only text maps to the zero vector.
SparseVector featurize(std::string_view text, const FeaturizerConfig& config = {});

// Bucket and sign a single n-gram hashes to.
std::pair<std::uint32_t, double> hash_gram(std::string_view gram, std::size_t dim);

class FeatureSource {
 public:
  virtual ~FeatureSource() = default;
  virtual SparseVector features(std::string_view text) const = 0;
  virtual std::size_t dim() const = 0;
  // Recorded in checkpoint headers.
  virtual nlohmann::json describe() const = 0;
};

class HashedNgramFeatures : public FeatureSource {
 public:
  explicit HashedNgramFeatures(FeaturizerConfig config = {}) : config_(config) {}
  SparseVector features(std::string_view text) const override { return featurize(text, config_); }
  std::size_t dim() const override { return config_.dim; }
  nlohmann::json describe() const override;

 private:
  FeaturizerConfig config_;
};

// Vectors from an external encoder: JSONL lines {"id": text, "vector": [...]}.
// Vectors are L2-normalized on load; looking up an unknown text throws
// DatasetError.
class PrecomputedFeatures : public FeatureSource {
 public:
  explicit PrecomputedFeatures(const std::filesystem::path& path);
  SparseVector features(std::string_view text) const override;
  std::size_t dim() const override { return dim_; }
  nlohmann::json describe() const override;

 private:
  std::string source_;
  std::size_t dim_ = 0;
  std::unordered_map<std::string, SparseVector> table_;
};

// Builds a feature source from a checkpoint header entry.
std::unique_ptr<FeatureSource> make_feature_source(const nlohmann::json& description,
                                                   const std::filesystem::path& features_override = {});

// h = W^T x + b with W stored row-major, D x d.
struct ProjectionParams {
  std::size_t D = 0;
  std::size_t d = 0;
  std::vector<double> W;
  std::vector<double> b;

  static ProjectionParams zeros(std::size_t D, std::size_t d);
  // Gaussian weights with std 1/sqrt(d), zero bias.
  static ProjectionParams random(std::size_t D, std::size_t d, Rng& rng);

  double& w(std::size_t i, std::size_t j) { return W[i * d + j]; }
  double w(std::size_t i, std::size_t j) const { return W[i * d + j]; }
  bool finite() const;
  std::size_t size() const { return W.size() + b.size(); }
  bool operator==(const ProjectionParams&) const = default;
};

// Encodes with an inverted-dropout mask drawn from `mask` (keep probability
// keep_prob, survivors scaled by 1/keep_prob). Without a mask stream, or with
// keep_prob = 1, this is the deterministic evaluation encoder.
std::vector<double> encode(const SparseVector& features, const ProjectionParams& params,
                           double keep_prob = 1.0, Rng* mask = nullptr);

// Throws NumericError on a zero-norm input.
double cosine_sim(std::span<const double> a, std::span<const double> b);

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}
  double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
};

// Per-row losses -log(exp(S_ii/tau) / sum_j exp(S_ij/tau)), stabilized by
// subtracting the row maximum.
std::vector<double> info_nce_unsup_rows(const Matrix& S, double tau);
double info_nce_unsup(const Matrix& S, double tau);
// Same with the hard-negative similarities added to every denominator.
std::vector<double> info_nce_sup_rows(const Matrix& S_pos, const Matrix& S_neg, double tau);
double info_nce_sup(const Matrix& S_pos, const Matrix& S_neg, double tau);

// Gradients of the mean losses with respect to the similarity matrices.
Matrix info_nce_unsup_grad(const Matrix& S, double tau);
std::pair<Matrix, Matrix> info_nce_sup_grad(const Matrix& S_pos, const Matrix& S_neg, double tau);

enum class Objective { unsupervised, supervised };

struct LossConfig {
  double tau = 0.05;
  double keep_prob = 0.9;
  Objective objective = Objective::supervised;
};

// Sentences of one mini-batch. Unsupervised batches use only `anchors`:
// the positive is a second masked encoding of the same sentence.
struct TripletBatch {
  std::vector<const SparseVector*> anchors;
  std::vector<const SparseVector*> positives;
  std::vector<const SparseVector*> negatives;
  std::size_t size() const { return anchors.size(); }
};

struct LossAndGrad {
  double loss = 0.0;
  ProjectionParams grad;  // same shape as the params
};

// Masks are drawn from `mask` in the order anchors, positives, negatives.
LossAndGrad loss_and_grad(const ProjectionParams& params, const TripletBatch& batch,
                          const LossConfig& config, Rng& mask);
double batch_loss(const ProjectionParams& params, const TripletBatch& batch,
                  const LossConfig& config, Rng& mask);

struct TrainConfig {
  double tau = 0.05;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::size_t epochs = 1;
  double keep_prob = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t dim_out = 128;
  Objective objective = Objective::supervised;
  // Stop early after this many updates (0 = no limit).
  std::size_t max_steps = 0;
  // Wall-clock budget in seconds (0 = none). Runs cut short by the clock
  // are not reproducible.
  double max_seconds = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
};

struct TrainText {
  std::string sent0;
  std::string sent1;
  std::string hard_neg;
};

struct StepLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  ProjectionParams params;
  std::vector<StepLog> log;
  std::size_t steps = 0;
  bool stopped_by_budget = false;
};

struct TrainOutput {
  // When set, epoch_N.ckpt, final.ckpt and train_log.jsonl are written here.
  std::optional<std::filesystem::path> dir;
  // Called after every update.
  std::function<void(const StepLog&)> on_step;
};

// Seeded shuffle per epoch, masks per step, Adam updates. Aborts with
// NumericError (after dumping state to the output directory) when a loss
// is not finite. `init` overrides the random start.
TrainResult train(const std::vector<TrainText>& data, const FeatureSource& features,
                  const TrainConfig& config, const TrainOutput& output = {},
                  const ProjectionParams* init = nullptr);

// --- checkpoints ------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'T', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ProjectionParams params;
  nlohmann::json header;  // dims, featurizer, train config, step
};

// Layout: "TFCK", u32 version, u32 header length, header JSON, then D*d
// weights and d biases as little-endian IEEE doubles.
void save_checkpoint(const std::filesystem::path& path, const ProjectionParams& params,
                     const nlohmann::json& header);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tforge::train
