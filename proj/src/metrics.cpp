#include "tforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "tforge/error.hpp"
#include "tforge/hash.hpp"
#include "tforge/text.hpp"

namespace tforge::eval {

using nlohmann::json;

std::vector<double> fractional_ranks(std::span<const double> xs) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size())
    throw DatasetError("spearman: length mismatch (" + std::to_string(xs.size()) + " vs " +
                       std::to_string(ys.size()) + ")");
  if (xs.size() < 2) throw DatasetError("spearman: need at least two items");
  for (double v : xs)
    if (!std::isfinite(v)) throw DatasetError("spearman: non-finite value");
  for (double v : ys)
    if (!std::isfinite(v)) throw DatasetError("spearman: non-finite value");
  auto rx = fractional_ranks(xs), ry = fractional_ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw DatasetError("spearman: constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double average_precision(const std::vector<bool>& ranked) {
  if (ranked.empty()) throw DatasetError("average_precision: empty ranking");
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    if (ranked[k]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  }
  return hits ? sum / static_cast<double>(hits) : 0.0;
}

// --- files ------------------------------------------------------------------

json ScoredPair::to_json() const { return json{{"text_a", text_a}, {"text_b", text_b}, {"score", gold}}; }

json RerankQuery::to_json() const {
  json pos = json::array(), neg = json::array();
  for (const auto& c : candidates) (c.relevant ? pos : neg).push_back(c.text);
  return json{{"query", query}, {"positives", pos}, {"negatives", neg}};
}

namespace {

template <class F>
void for_each_record(const std::filesystem::path& path, F&& fn) {
  std::ifstream probe(path);
  if (!probe) throw IoError(path.string() + ": cannot open");
  std::string line;
  std::size_t lineno = 0;
  std::size_t count = 0;
  while (std::getline(probe, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::string where = path.string() + ":" + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DatasetError(where + ": " + e.what());
    }
    if (!j.is_object()) throw DatasetError(where + ": expected an object");
    fn(j, where);
    ++count;
  }
  if (count == 0) throw DatasetError(path.string() + ": no records");
}

std::string need_string(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j[key].is_string())
    throw DatasetError(where + ": field '" + key + "' must be a string");
  return j[key].get<std::string>();
}

std::vector<std::string> string_list(const json& j, const char* key, const std::string& where) {
  std::vector<std::string> out;
  if (!j.contains(key)) return out;
  if (!j[key].is_array()) throw DatasetError(where + ": field '" + std::string(key) + "' must be a list");
  for (const auto& x : j[key]) {
    if (!x.is_string()) throw DatasetError(where + ": '" + std::string(key) + "' entries must be strings");
    out.push_back(x.get<std::string>());
  }
  return out;
}

}  // namespace

std::vector<ScoredPair> read_sts_file(const std::filesystem::path& path) {
  std::vector<ScoredPair> out;
  for_each_record(path, [&](const json& j, const std::string& where) {
    ScoredPair p;
    p.text_a = need_string(j, "text_a", where);
    p.text_b = need_string(j, "text_b", where);
    if (!j.contains("score") || !j["score"].is_number())
      throw DatasetError(where + ": field 'score' must be a number");
    p.gold = j["score"].get<double>();
    if (!std::isfinite(p.gold)) throw DatasetError(where + ": score is not finite");
    out.push_back(std::move(p));
  });
  return out;
}

std::vector<RerankQuery> read_rerank_file(const std::filesystem::path& path) {
  std::vector<RerankQuery> out;
  for_each_record(path, [&](const json& j, const std::string& where) {
    RerankQuery q;
    q.query = need_string(j, "query", where);
    for (auto& t : string_list(j, "positives", where)) q.candidates.push_back({t, true});
    for (auto& t : string_list(j, "negatives", where)) q.candidates.push_back({t, false});
    if (q.candidates.empty()) throw DatasetError(where + ": query has no candidates");
    out.push_back(std::move(q));
  });
  return out;
}

void write_sts_file(const std::filesystem::path& path, const std::vector<ScoredPair>& pairs) {
  std::string s;
  for (const auto& p : pairs) s += p.to_json().dump() + "\n";
  write_file_atomic(path, s);
}

void write_rerank_file(const std::filesystem::path& path, const std::vector<RerankQuery>& queries) {
  std::string s;
  for (const auto& q : queries) s += q.to_json().dump() + "\n";
  write_file_atomic(path, s);
}

// --- embedders --------------------------------------------------------------

ProjectionEmbedder::ProjectionEmbedder(std::shared_ptr<const train::FeatureSource> features,
                                       train::ProjectionParams params)
    : features_(std::move(features)), params_(std::move(params)) {
  if (features_->dim() != params_.D)
    throw ConfigError("feature dimension " + std::to_string(features_->dim()) +
                      " does not match checkpoint input dimension " + std::to_string(params_.D));
}

std::vector<double> ProjectionEmbedder::embed(std::string_view text) const {
  return train::encode(features_->features(text), params_);
}

ProjectionEmbedder load_embedder(const std::filesystem::path& checkpoint,
                                 const std::filesystem::path& features_override) {
  auto c = train::load_checkpoint(checkpoint);
  std::shared_ptr<const train::FeatureSource> f =
      train::make_feature_source(c.header.value("featurizer", json::object()), features_override);
  return ProjectionEmbedder(f, std::move(c.params));
}

double eval_cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

std::vector<std::size_t> rank_by_score(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

double triplet_accuracy(const Embedder& embedder, const std::vector<train::TrainText>& triplets) {
  if (triplets.empty()) throw DatasetError("triplet_accuracy: no triplets");
  std::size_t correct = 0;
  for (const auto& t : triplets) {
    auto x = embedder.embed(t.sent0);
    if (eval_cosine(x, embedder.embed(t.sent1)) > eval_cosine(x, embedder.embed(t.hard_neg))) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(triplets.size());
}

// --- runners ----------------------------------------------------------------

json EvalReport::to_json() const {
  json fs = json::array();
  for (const auto& f : files) fs.push_back({{"file", f.file}, {"items", f.items}, {metric, f.value}});
  return json{{"task", task},       {"metric", metric},
              {"checkpoint", checkpoint}, {"checkpoint_sha256", checkpoint_sha256},
              {"files", fs},        {"average", average}};
}

double spearman_of(const Embedder& embedder, const std::vector<ScoredPair>& pairs) {
  std::vector<double> gold, pred;
  for (const auto& p : pairs) {
    gold.push_back(p.gold);
    pred.push_back(eval_cosine(embedder.embed(p.text_a), embedder.embed(p.text_b)));
  }
  return spearman(gold, pred);
}

double mean_average_precision(const Embedder& embedder, const std::vector<RerankQuery>& queries) {
  if (queries.empty()) throw DatasetError("mean_average_precision: no queries");
  double sum = 0.0;
  for (const auto& q : queries) {
    auto qe = embedder.embed(q.query);
    std::vector<double> scores;
    for (const auto& c : q.candidates) scores.push_back(eval_cosine(qe, embedder.embed(c.text)));
    std::vector<bool> ranked;
    for (std::size_t k : rank_by_score(scores)) ranked.push_back(q.candidates[k].relevant);
    sum += average_precision(ranked);
  }
  return sum / static_cast<double>(queries.size());
}

namespace {

template <class Read, class Score>
EvalReport run(const char* task, const char* metric, const std::vector<std::filesystem::path>& files,
               Read&& read, Score&& score) {
  if (files.empty()) throw UsageError(std::string("eval ") + task + ": no input files");
  EvalReport r;
  r.task = task;
  r.metric = metric;
  double sum = 0.0;
  for (const auto& f : files) {
    auto records = read(f);
    FileResult fr;
    fr.file = f.filename().string();
    fr.items = records.size();
    try {
      fr.value = score(records);
    } catch (const DatasetError& e) {
      throw DatasetError(f.string() + ": " + e.what());
    }
    sum += fr.value;
    r.files.push_back(fr);
  }
  r.average = sum / static_cast<double>(r.files.size());
  return r;
}

}  // namespace

EvalReport eval_sts(const Embedder& embedder, const std::vector<std::filesystem::path>& files) {
  return run("sts", "spearman", files, read_sts_file,
             [&](const std::vector<ScoredPair>& p) { return spearman_of(embedder, p); });
}

EvalReport eval_rerank(const Embedder& embedder, const std::vector<std::filesystem::path>& files) {
  return run("rerank", "map", files, read_rerank_file,
             [&](const std::vector<RerankQuery>& q) { return mean_average_precision(embedder, q); });
}

}  // namespace tforge::eval
