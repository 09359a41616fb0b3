#include "tforge/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "tforge/error.hpp"
#include "tforge/hash.hpp"
#include "tforge/text.hpp"

namespace tforge::train {

using nlohmann::json;

// --- features ---------------------------------------------------------------

double SparseVector::norm() const {
  double s = 0.0;
  for (double v : value) s += v * v;
  return std::sqrt(s);
}

std::vector<double> SparseVector::dense() const {
  std::vector<double> out(dim, 0.0);
  for (std::size_t k = 0; k < index.size(); ++k) out[index[k]] = value[k];
  return out;
}

SparseVector SparseVector::from_dense(std::span<const double> v) {
  SparseVector s;
  s.dim = v.size();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] != 0.0) {
      s.index.push_back(static_cast<std::uint32_t>(i));
      s.value.push_back(v[i]);
    }
  }
  return s;
}

double dot(const SparseVector& a, const SparseVector& b) {
  double s = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.index.size() && j < b.index.size()) {
    if (a.index[i] == b.index[j]) {
      s += a.value[i++] * b.value[j++];
    } else if (a.index[i] < b.index[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return s;
}

json FeaturizerConfig::to_json() const {
  return json{{"dim", dim}, {"min_n", min_n}, {"max_n", max_n}};
}

std::pair<std::uint32_t, double> hash_gram(std::string_view gram, std::size_t dim) {
  std::uint64_t h = splitmix64(fnv1a64(gram));
  return {static_cast<std::uint32_t>(h % dim), (h >> 63) ? -1.0 : 1.0};
}

SparseVector featurize(std::string_view text, const FeaturizerConfig& config) {
  if (config.dim == 0 || config.min_n < 1 || config.max_n < config.min_n)
    throw ConfigError("invalid featurizer configuration");
  SparseVector out;
  out.dim = config.dim;
  std::string body = collapse_whitespace(to_lower_ascii(text));
  if (body.empty()) return out;
  std::string padded = " " + body + " ";
  std::map<std::uint32_t, double> acc;
  for (int n = config.min_n; n <= config.max_n; ++n) {
    const std::size_t len = static_cast<std::size_t>(n);
    for (std::size_t i = 0; i + len <= padded.size(); ++i) {
      auto [bucket, sign] = hash_gram(std::string_view(padded).substr(i, len), config.dim);
      acc[bucket] += sign;
    }
  }
  double norm2 = 0.0;
  for (const auto& [k, v] : acc) norm2 += v * v;
  if (norm2 == 0.0) return out;
  const double inv = 1.0 / std::sqrt(norm2);
  for (const auto& [k, v] : acc) {
    if (v == 0.0) continue;
    out.index.push_back(k);
    out.value.push_back(v * inv);
  }
  return out;
}

json HashedNgramFeatures::describe() const {
  json j = config_.to_json();
  j["kind"] = "hashed_ngram";
  return j;
}

PrecomputedFeatures::PrecomputedFeatures(const std::filesystem::path& path)
    : source_(path.string()) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open feature file");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::string where = path.string() + ":" + std::to_string(lineno);
    json e;
    try {
      e = json::parse(line);
    } catch (const json::exception& ex) {
      throw DatasetError(where + ": " + ex.what());
    }
    if (!e.contains("id") || !e["id"].is_string() || !e.contains("vector") ||
        !e["vector"].is_array())
      throw DatasetError(where + ": expected {\"id\": string, \"vector\": [numbers]}");
    std::vector<double> v;
    for (const auto& x : e["vector"]) {
      if (!x.is_number()) throw DatasetError(where + ": vector entries must be numbers");
      v.push_back(x.get<double>());
    }
    if (dim_ == 0) dim_ = v.size();
    if (v.size() != dim_ || dim_ == 0)
      throw DatasetError(where + ": vector has " + std::to_string(v.size()) +
                         " entries, expected " + std::to_string(dim_));
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    if (!std::isfinite(n2)) throw DatasetError(where + ": vector is not finite");
    if (n2 > 0.0)
      for (double& x : v) x /= std::sqrt(n2);
    table_.emplace(e["id"].get<std::string>(), SparseVector::from_dense(v));
  }
  if (table_.empty()) throw DatasetError(path.string() + ": no vectors");
}

SparseVector PrecomputedFeatures::features(std::string_view text) const {
  auto it = table_.find(std::string(text));
  if (it == table_.end())
    throw DatasetError("no precomputed vector for \"" + std::string(text.substr(0, 80)) + "\"");
  return it->second;
}

json PrecomputedFeatures::describe() const {
  return json{{"kind", "precomputed"}, {"dim", dim_}, {"file", source_}};
}

std::unique_ptr<FeatureSource> make_feature_source(const json& d,
                                                   const std::filesystem::path& features_override) {
  std::string kind = d.value("kind", "hashed_ngram");
  if (kind == "hashed_ngram") {
    FeaturizerConfig c;
    c.dim = d.value("dim", c.dim);
    c.min_n = d.value("min_n", c.min_n);
    c.max_n = d.value("max_n", c.max_n);
    return std::make_unique<HashedNgramFeatures>(c);
  }
  if (kind == "precomputed") {
    std::filesystem::path p = features_override.empty()
                                  ? std::filesystem::path(d.value("file", ""))
                                  : features_override;
    return std::make_unique<PrecomputedFeatures>(p);
  }
  throw ConfigError("unknown feature source kind '" + kind + "'");
}

// --- projection -------------------------------------------------------------

ProjectionParams ProjectionParams::zeros(std::size_t D, std::size_t d) {
  if (D == 0 || d == 0) throw ConfigError("projection dimensions must be positive");
  ProjectionParams p;
  p.D = D;
  p.d = d;
  p.W.assign(D * d, 0.0);
  p.b.assign(d, 0.0);
  return p;
}

ProjectionParams ProjectionParams::random(std::size_t D, std::size_t d, Rng& rng) {
  ProjectionParams p = zeros(D, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& w : p.W) w = rng.normal() * scale;
  return p;
}

bool ProjectionParams::finite() const {
  return std::all_of(W.begin(), W.end(), [](double x) { return std::isfinite(x); }) &&
         std::all_of(b.begin(), b.end(), [](double x) { return std::isfinite(x); });
}

namespace {

// Masked and rescaled copy of the features.
SparseVector apply_mask(const SparseVector& f, double keep_prob, Rng* mask) {
  if (!mask || keep_prob >= 1.0) return f;
  SparseVector g;
  g.dim = f.dim;
  const double scale = 1.0 / keep_prob;
  for (std::size_t k = 0; k < f.index.size(); ++k) {
    if (mask->bernoulli(keep_prob)) {
      g.index.push_back(f.index[k]);
      g.value.push_back(f.value[k] * scale);
    }
  }
  return g;
}

std::vector<double> project(const SparseVector& g, const ProjectionParams& p) {
  if (g.dim != p.D)
    throw DatasetError("feature dimension " + std::to_string(g.dim) +
                       " does not match projection input " + std::to_string(p.D));
  std::vector<double> h = p.b;
  for (std::size_t k = 0; k < g.index.size(); ++k) {
    const double x = g.value[k];
    const double* row = &p.W[static_cast<std::size_t>(g.index[k]) * p.d];
    for (std::size_t j = 0; j < p.d; ++j) h[j] += x * row[j];
  }
  return h;
}

double norm2(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return s;
}

double dense_dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

std::vector<double> encode(const SparseVector& features, const ProjectionParams& params,
                           double keep_prob, Rng* mask) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) throw ConfigError("keep_prob must be in (0, 1]");
  return project(apply_mask(features, keep_prob, mask), params);
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw NumericError("cosine_sim: dimension mismatch");
  const double na = std::sqrt(norm2(a));
  const double nb = std::sqrt(norm2(b));
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine_sim: zero-norm vector");
  return std::clamp(dense_dot(a, b) / (na * nb), -1.0, 1.0);
}

// --- losses -----------------------------------------------------------------

namespace {

void check_loss_inputs(const Matrix& S, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw NumericError("temperature must be positive");
  if (S.rows == 0 || S.rows != S.cols) throw NumericError("similarity matrix must be square, M >= 1");
  for (double x : S.a)
    if (!std::isfinite(x)) throw NumericError("similarity matrix has a non-finite entry");
}

// Row i softmax over the concatenation of the given matrices' rows.
std::vector<double> row_softmax(std::span<const Matrix* const> parts, std::size_t i, double tau,
                                double& log_denominator) {
  double mx = -INFINITY;
  for (const Matrix* m : parts)
    for (std::size_t j = 0; j < m->cols; ++j) mx = std::max(mx, (*m)(i, j) / tau);
  double sum = 0.0;
  std::vector<double> e;
  for (const Matrix* m : parts) {
    for (std::size_t j = 0; j < m->cols; ++j) {
      e.push_back(std::exp((*m)(i, j) / tau - mx));
      sum += e.back();
    }
  }
  log_denominator = mx + std::log(sum);
  for (double& x : e) x /= sum;
  return e;
}

// -log softmax of the diagonal term. When the diagonal is the row maximum the
// loss is log1p of the remaining terms, which keeps tiny losses accurate.
double row_loss(std::span<const Matrix* const> parts, std::size_t i, double diag, double tau) {
  const double zd = diag / tau;
  double mx = -INFINITY;
  for (const Matrix* m : parts)
    for (std::size_t j = 0; j < m->cols; ++j) mx = std::max(mx, (*m)(i, j) / tau);
  double rest = 0.0;
  bool skipped = false;
  for (const Matrix* m : parts) {
    for (std::size_t j = 0; j < m->cols; ++j) {
      if (!skipped && m == parts[0] && j == i) {
        skipped = true;
        continue;
      }
      rest += std::exp((*m)(i, j) / tau - mx);
    }
  }
  if (zd == mx) return std::log1p(rest);
  return mx - zd + std::log(std::exp(zd - mx) + rest);
}

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

}  // namespace

std::vector<double> info_nce_unsup_rows(const Matrix& S, double tau) {
  check_loss_inputs(S, tau);
  std::vector<double> out(S.rows);
  const Matrix* parts[] = {&S};
  for (std::size_t i = 0; i < S.rows; ++i) {
    out[i] = row_loss(parts, i, S(i, i), tau);
  }
  return out;
}

double info_nce_unsup(const Matrix& S, double tau) { return mean(info_nce_unsup_rows(S, tau)); }

std::vector<double> info_nce_sup_rows(const Matrix& S_pos, const Matrix& S_neg, double tau) {
  check_loss_inputs(S_pos, tau);
  check_loss_inputs(S_neg, tau);
  if (S_pos.rows != S_neg.rows) throw NumericError("S_pos and S_neg shapes differ");
  std::vector<double> out(S_pos.rows);
  const Matrix* parts[] = {&S_pos, &S_neg};
  for (std::size_t i = 0; i < S_pos.rows; ++i) {
    out[i] = row_loss(parts, i, S_pos(i, i), tau);
  }
  return out;
}

double info_nce_sup(const Matrix& S_pos, const Matrix& S_neg, double tau) {
  return mean(info_nce_sup_rows(S_pos, S_neg, tau));
}

Matrix info_nce_unsup_grad(const Matrix& S, double tau) {
  check_loss_inputs(S, tau);
  const std::size_t M = S.rows;
  Matrix G(M, M);
  const Matrix* parts[] = {&S};
  const double scale = 1.0 / (static_cast<double>(M) * tau);
  for (std::size_t i = 0; i < M; ++i) {
    double lse;
    auto p = row_softmax(parts, i, tau, lse);
    for (std::size_t j = 0; j < M; ++j) G(i, j) = (p[j] - (i == j ? 1.0 : 0.0)) * scale;
  }
  return G;
}

std::pair<Matrix, Matrix> info_nce_sup_grad(const Matrix& S_pos, const Matrix& S_neg, double tau) {
  check_loss_inputs(S_pos, tau);
  check_loss_inputs(S_neg, tau);
  if (S_pos.rows != S_neg.rows) throw NumericError("S_pos and S_neg shapes differ");
  const std::size_t M = S_pos.rows;
  Matrix Gp(M, M), Gn(M, M);
  const Matrix* parts[] = {&S_pos, &S_neg};
  const double scale = 1.0 / (static_cast<double>(M) * tau);
  for (std::size_t i = 0; i < M; ++i) {
    double lse;
    auto p = row_softmax(parts, i, tau, lse);
    for (std::size_t j = 0; j < M; ++j) {
      Gp(i, j) = (p[j] - (i == j ? 1.0 : 0.0)) * scale;
      Gn(i, j) = p[M + j] * scale;
    }
  }
  return {Gp, Gn};
}

// --- batch loss and backprop ------------------------------------------------

namespace {

struct Encoded {
  SparseVector input;  // masked, rescaled features
  std::vector<double> h;
  double norm = 0.0;
};

Encoded encode_item(const SparseVector& f, const ProjectionParams& p, double keep, Rng& mask,
                    std::size_t batch_index) {
  Encoded e;
  e.input = apply_mask(f, keep, &mask);
  e.h = project(e.input, p);
  e.norm = std::sqrt(norm2(e.h));
  if (e.norm == 0.0 || !std::isfinite(e.norm))
    throw NumericError("embedding of batch item " + std::to_string(batch_index) +
                       " has zero or non-finite norm");
  return e;
}

struct Forward {
  std::vector<Encoded> A, P, N;
  Matrix Sp, Sn;
  bool supervised = false;
};

Forward forward(const ProjectionParams& params, const TripletBatch& batch,
                const LossConfig& config, Rng& mask) {
  const std::size_t M = batch.size();
  if (M == 0) throw DatasetError("empty batch");
  if (!(config.keep_prob > 0.0 && config.keep_prob <= 1.0))
    throw ConfigError("keep_prob must be in (0, 1]");
  Forward f;
  f.supervised = config.objective == Objective::supervised;
  if (f.supervised && (batch.positives.size() != M || batch.negatives.size() != M))
    throw DatasetError("supervised batch needs positives and hard negatives for every anchor");
  for (std::size_t i = 0; i < M; ++i)
    f.A.push_back(encode_item(*batch.anchors[i], params, config.keep_prob, mask, i));
  for (std::size_t i = 0; i < M; ++i) {
    const SparseVector* src = f.supervised ? batch.positives[i] : batch.anchors[i];
    f.P.push_back(encode_item(*src, params, config.keep_prob, mask, i));
  }
  if (f.supervised)
    for (std::size_t i = 0; i < M; ++i)
      f.N.push_back(encode_item(*batch.negatives[i], params, config.keep_prob, mask, i));
  auto sims = [&](const std::vector<Encoded>& B) {
    Matrix S(M, M);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < M; ++j)
        S(i, j) = dense_dot(f.A[i].h, B[j].h) / (f.A[i].norm * B[j].norm);
    return S;
  };
  f.Sp = sims(f.P);
  if (f.supervised) f.Sn = sims(f.N);
  return f;
}

double forward_loss(const Forward& f, double tau) {
  return f.supervised ? info_nce_sup(f.Sp, f.Sn, tau) : info_nce_unsup(f.Sp, tau);
}

// Adds g * d cos(a, b) / d a to da.
void add_cos_grad(double g, const Encoded& a, const Encoded& b, double c, std::vector<double>& da) {
  if (g == 0.0) return;
  const double k1 = g / (a.norm * b.norm);
  const double k2 = g * c / (a.norm * a.norm);
  for (std::size_t j = 0; j < da.size(); ++j) da[j] += k1 * b.h[j] - k2 * a.h[j];
}

void accumulate(const Encoded& e, const std::vector<double>& dh, ProjectionParams& grad) {
  const std::size_t d = grad.d;
  for (std::size_t k = 0; k < e.input.index.size(); ++k) {
    const double x = e.input.value[k];
    double* row = &grad.W[static_cast<std::size_t>(e.input.index[k]) * d];
    for (std::size_t j = 0; j < d; ++j) row[j] += x * dh[j];
  }
  for (std::size_t j = 0; j < d; ++j) grad.b[j] += dh[j];
}

}  // namespace

double batch_loss(const ProjectionParams& params, const TripletBatch& batch,
                  const LossConfig& config, Rng& mask) {
  return forward_loss(forward(params, batch, config, mask), config.tau);
}

LossAndGrad loss_and_grad(const ProjectionParams& params, const TripletBatch& batch,
                          const LossConfig& config, Rng& mask) {
  Forward f = forward(params, batch, config, mask);
  const std::size_t M = batch.size();
  LossAndGrad out;
  out.loss = forward_loss(f, config.tau);
  if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");
  out.grad = ProjectionParams::zeros(params.D, params.d);

  Matrix Gp, Gn;
  if (f.supervised) {
    std::tie(Gp, Gn) = info_nce_sup_grad(f.Sp, f.Sn, config.tau);
  } else {
    Gp = info_nce_unsup_grad(f.Sp, config.tau);
  }
  const std::size_t d = params.d;
  std::vector<std::vector<double>> dA(M, std::vector<double>(d, 0.0));
  std::vector<std::vector<double>> dP(M, std::vector<double>(d, 0.0));
  std::vector<std::vector<double>> dN(f.supervised ? M : 0, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < M; ++j) {
      add_cos_grad(Gp(i, j), f.A[i], f.P[j], f.Sp(i, j), dA[i]);
      add_cos_grad(Gp(i, j), f.P[j], f.A[i], f.Sp(i, j), dP[j]);
      if (f.supervised) {
        add_cos_grad(Gn(i, j), f.A[i], f.N[j], f.Sn(i, j), dA[i]);
        add_cos_grad(Gn(i, j), f.N[j], f.A[i], f.Sn(i, j), dN[j]);
      }
    }
  }
  for (std::size_t i = 0; i < M; ++i) {
    accumulate(f.A[i], dA[i], out.grad);
    accumulate(f.P[i], dP[i], out.grad);
    if (f.supervised) accumulate(f.N[i], dN[i], out.grad);
  }
  return out;
}

// --- training loop ----------------------------------------------------------

void TrainConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("train.tau must be positive");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be >= 0");
  if (epochs < 1) throw ConfigError("train.epochs must be at least 1");
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) throw ConfigError("train.keep_prob must be in (0, 1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("train.beta1 and train.beta2 must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("train.eps must be positive");
  if (dim_out < 1) throw ConfigError("train.dim must be at least 1");
  if (max_seconds < 0.0) throw ConfigError("train.max_seconds must be >= 0");
}

json TrainConfig::to_json() const {
  return json{{"tau", tau},
              {"batch_size", batch_size},
              {"lr", lr},
              {"epochs", epochs},
              {"keep_prob", keep_prob},
              {"beta1", beta1},
              {"beta2", beta2},
              {"eps", eps},
              {"seed", seed},
              {"dim", dim_out},
              {"objective", objective == Objective::supervised ? "supervised" : "unsupervised"},
              {"max_steps", max_steps},
              {"max_seconds", max_seconds}};
}

namespace {

json checkpoint_header(const ProjectionParams& p, const FeatureSource& features,
                       const TrainConfig& config, std::size_t epoch, std::size_t step) {
  return json{{"format", "tforge-projection"},
              {"D", p.D},
              {"d", p.d},
              {"featurizer", features.describe()},
              {"train", config.to_json()},
              {"epoch", epoch},
              {"step", step}};
}

}  // namespace

TrainResult train(const std::vector<TrainText>& data, const FeatureSource& features,
                  const TrainConfig& config, const TrainOutput& output,
                  const ProjectionParams* init) {
  config.validate();
  if (data.empty()) throw DatasetError("training set is empty");
  const bool supervised = config.objective == Objective::supervised;
  const std::size_t D = features.dim();

  std::vector<SparseVector> X, Xp, Xn;
  for (const auto& t : data) {
    X.push_back(features.features(t.sent0));
    if (supervised) {
      Xp.push_back(features.features(t.sent1));
      Xn.push_back(features.features(t.hard_neg));
    }
  }

  TrainResult result;
  if (init) {
    if (init->D != D) throw ConfigError("initial parameters do not match the feature dimension");
    result.params = *init;
  } else {
    Rng init_rng = derive_stream(config.seed, "init");
    result.params = ProjectionParams::random(D, config.dim_out, init_rng);
  }
  ProjectionParams& p = result.params;
  std::vector<double> mW(p.W.size(), 0.0), vW(p.W.size(), 0.0);
  std::vector<double> mb(p.b.size(), 0.0), vb(p.b.size(), 0.0);
  LossConfig lc{config.tau, config.keep_prob, config.objective};

  if (output.dir) std::filesystem::create_directories(*output.dir);
  std::string log_text;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t step = 0;
  double b1t = 1.0, b2t = 1.0;
  bool stop = false;

  for (std::size_t epoch = 1; epoch <= config.epochs && !stop; ++epoch) {
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle = derive_stream(config.seed, "shuffle", epoch);
    shuffle.shuffle(order);

    for (std::size_t start = 0; start < order.size() && !stop; start += config.batch_size) {
      std::size_t end = std::min(order.size(), start + config.batch_size);
      TripletBatch batch;
      for (std::size_t k = start; k < end; ++k) {
        batch.anchors.push_back(&X[order[k]]);
        if (supervised) {
          batch.positives.push_back(&Xp[order[k]]);
          batch.negatives.push_back(&Xn[order[k]]);
        }
      }
      Rng mask = derive_stream(config.seed, "mask", step);
      LossAndGrad lg;
      try {
        lg = loss_and_grad(p, batch, lc, mask);
      } catch (const NumericError& e) {
        std::string msg = std::string(e.what()) + " at step " + std::to_string(step + 1) +
                          " (epoch " + std::to_string(epoch) + ", batch starting at " +
                          std::to_string(start) + ")";
        if (output.dir) {
          json dump{{"error", msg},
                    {"epoch", epoch},
                    {"step", step + 1},
                    {"batch_records", std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                               order.begin() + static_cast<std::ptrdiff_t>(end))}};
          write_file_atomic(*output.dir / "nonfinite_state.json", dump.dump(2) + "\n");
          save_checkpoint(*output.dir / "nonfinite.ckpt", p,
                          checkpoint_header(p, features, config, epoch, step));
        }
        throw NumericError(msg);
      }

      ++step;
      b1t *= config.beta1;
      b2t *= config.beta2;
      auto adam = [&](std::vector<double>& theta, const std::vector<double>& g,
                      std::vector<double>& m, std::vector<double>& v) {
        const double c1 = 1.0 - b1t, c2 = 1.0 - b2t;
        for (std::size_t i = 0; i < theta.size(); ++i) {
          m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
          v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
          theta[i] -= config.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
        }
      };
      adam(p.W, lg.grad.W, mW, vW);
      adam(p.b, lg.grad.b, mb, vb);

      StepLog entry{epoch, step, lg.loss};
      result.log.push_back(entry);
      log_text += json{{"epoch", epoch}, {"step", step}, {"loss", lg.loss}}.dump() + "\n";
      if (output.on_step) output.on_step(entry);

      if (config.max_steps && step >= config.max_steps) stop = true;
      if (config.max_seconds > 0.0 &&
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() >=
              config.max_seconds) {
        stop = true;
        result.stopped_by_budget = true;
      }
    }
    if (output.dir)
      save_checkpoint(*output.dir / ("epoch_" + std::to_string(epoch) + ".ckpt"), p,
                      checkpoint_header(p, features, config, epoch, step));
  }
  result.steps = step;
  if (output.dir) {
    save_checkpoint(*output.dir / "final.ckpt", p,
                    checkpoint_header(p, features, config, config.epochs, step));
    write_file_atomic(*output.dir / "train_log.jsonl", log_text);
  }
  return result;
}

// --- checkpoints ------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ProjectionParams& params,
                     const json& header) {
  if (params.W.size() != params.D * params.d || params.b.size() != params.d)
    throw UsageError("projection parameters have inconsistent shape");
  json h = header;
  h["D"] = params.D;
  h["d"] = params.d;
  std::string head = h.dump();
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(head.size()));
  out += head;
  out.append(reinterpret_cast<const char*>(params.W.data()), params.W.size() * sizeof(double));
  out.append(reinterpret_cast<const char*>(params.b.data()), params.b.size() * sizeof(double));
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string in = read_file(path);
  const std::string where = path.string();
  if (in.size() < 12 || std::memcmp(in.data(), kCheckpointMagic, 4) != 0)
    throw IoError(where + ": not a checkpoint file");
  if (get_u32(in, 4) != kCheckpointVersion)
    throw IoError(where + ": unsupported checkpoint version " + std::to_string(get_u32(in, 4)));
  std::size_t head_len = get_u32(in, 8);
  if (12 + head_len > in.size()) throw IoError(where + ": truncated header");
  Checkpoint c;
  try {
    c.header = json::parse(in.substr(12, head_len));
    c.params.D = c.header.at("D").get<std::size_t>();
    c.params.d = c.header.at("d").get<std::size_t>();
  } catch (const json::exception& e) {
    throw IoError(where + ": bad header: " + e.what());
  }
  std::size_t count = c.params.D * c.params.d + c.params.d;
  if (in.size() != 12 + head_len + count * sizeof(double))
    throw IoError(where + ": payload size does not match D=" + std::to_string(c.params.D) +
                  ", d=" + std::to_string(c.params.d));
  const char* data = in.data() + 12 + head_len;
  c.params.W.resize(c.params.D * c.params.d);
  c.params.b.resize(c.params.d);
  std::memcpy(c.params.W.data(), data, c.params.W.size() * sizeof(double));
  std::memcpy(c.params.b.data(), data + c.params.W.size() * sizeof(double),
              c.params.b.size() * sizeof(double));
  return c;
}

}  // namespace tforge::train
