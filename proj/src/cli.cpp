#include "tforge/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "tforge/error.hpp"
#include "tforge/hash.hpp"
#include "tforge/metrics.hpp"
#include "tforge/mock_llm.hpp"
#include "tforge/prompt_pools.hpp"
#include "tforge/text.hpp"

#ifndef TFORGE_DEFAULT_POOLS
#define TFORGE_DEFAULT_POOLS "data/default_pools.json"
#endif

namespace tforge::cli {

using nlohmann::json;
namespace fs = std::filesystem;

// --- configuration ----------------------------------------------------------

RunConfig default_run_config() {
  RunConfig c;
  c.pools = TFORGE_DEFAULT_POOLS;
  return c;
}

namespace {

[[noreturn]] void bad(const std::string& path, const std::string& what) {
  throw ConfigError(path + ": " + what);
}

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) bad(path, "expected an object");
  for (const auto& [k, v] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }))
      bad(path + "." + k, "unknown field");
  }
}

std::string as_string(const json& v, const std::string& path) {
  if (!v.is_string()) bad(path, "expected a string");
  return v.get<std::string>();
}

double as_number(const json& v, const std::string& path) {
  if (!v.is_number()) bad(path, "expected a number");
  return v.get<double>();
}

std::uint64_t as_count(const json& v, const std::string& path) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) bad(path, "expected a nonnegative integer");
  return v.get<std::uint64_t>();
}

fs::path as_path(const json& v, const std::string& path, const fs::path& base) {
  fs::path p = as_string(v, path);
  return p.is_relative() && !base.empty() ? base / p : p;
}

template <class F>
auto wrap(const std::string& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    bad(path, e.what());
  }
}

train::Objective parse_objective(std::string_view s) {
  if (s == "supervised") return train::Objective::supervised;
  if (s == "unsupervised") return train::Objective::unsupervised;
  throw ConfigError("objective must be 'supervised' or 'unsupervised', got '" + std::string(s) + "'");
}

TransportKind parse_transport(std::string_view s) {
  if (s == "http") return TransportKind::http;
  if (s == "mock") return TransportKind::mock;
  throw ConfigError("transport must be 'http' or 'mock', got '" + std::string(s) + "'");
}

std::string to_string(TransportKind t) { return t == TransportKind::http ? "http" : "mock"; }

}  // namespace

void RunConfig::apply_json(const json& doc, const std::string& origin, const fs::path& base) {
  check_keys(doc, origin,
             {"pools", "base_url", "model", "generation", "prices", "seed", "max_in_flight", "rate",
              "mode", "backend", "transport", "fixtures", "out", "few_shot_k", "train", "features"});
  auto at = [&](const char* k) { return origin + "." + k; };
  if (doc.contains("pools")) pools = as_path(doc["pools"], at("pools"), base);
  if (doc.contains("base_url")) base_url = as_string(doc["base_url"], at("base_url"));
  if (doc.contains("model")) model = as_string(doc["model"], at("model"));
  if (doc.contains("generation")) {
    const json& g = doc["generation"];
    const std::string gp = at("generation");
    check_keys(g, gp, {"unlabeled", "positive", "hard_negative"});
    if (g.contains("unlabeled"))
      generation.unlabeled = llm::GenerationConfig::from_json(g["unlabeled"], generation.unlabeled, gp + ".unlabeled");
    if (g.contains("positive"))
      generation.positive = llm::GenerationConfig::from_json(g["positive"], generation.positive, gp + ".positive");
    if (g.contains("hard_negative"))
      generation.hard_negative = llm::GenerationConfig::from_json(g["hard_negative"], generation.hard_negative,
                                                                  gp + ".hard_negative");
  }
  if (doc.contains("prices")) {
    const json& p = doc["prices"];
    const std::string pp = at("prices");
    check_keys(p, pp, {"input_per_1k", "output_per_1k"});
    double in = prices.input_nanodollars_per_1k * 1e-9, outp = prices.output_nanodollars_per_1k * 1e-9;
    if (p.contains("input_per_1k")) in = as_number(p["input_per_1k"], pp + ".input_per_1k");
    if (p.contains("output_per_1k")) outp = as_number(p["output_per_1k"], pp + ".output_per_1k");
    prices = wrap(pp, [&] { return llm::PriceTable::from_dollars(in, outp); });
  }
  if (doc.contains("seed")) seed = as_count(doc["seed"], at("seed"));
  if (doc.contains("max_in_flight")) max_in_flight = as_count(doc["max_in_flight"], at("max_in_flight"));
  if (doc.contains("rate")) rate = as_number(doc["rate"], at("rate"));
  if (doc.contains("mode"))
    mode = wrap(at("mode"), [&] { return synth::parse_mode(as_string(doc["mode"], at("mode"))); });
  if (doc.contains("backend"))
    backend = wrap(at("backend"), [&] { return llm::parse_backend_mode(as_string(doc["backend"], at("backend"))); });
  if (doc.contains("transport"))
    transport = wrap(at("transport"), [&] { return parse_transport(as_string(doc["transport"], at("transport"))); });
  if (doc.contains("fixtures")) fixtures = as_path(doc["fixtures"], at("fixtures"), base);
  if (doc.contains("out")) out = as_path(doc["out"], at("out"), base);
  if (doc.contains("few_shot_k")) few_shot_k = as_count(doc["few_shot_k"], at("few_shot_k"));
  if (doc.contains("train")) {
    const json& t = doc["train"];
    const std::string tp = at("train");
    check_keys(t, tp, {"tau", "batch_size", "lr", "epochs", "keep_prob", "beta1", "beta2", "eps", "dim",
                       "objective", "max_steps", "max_seconds"});
    auto num = [&](const char* k, double& dst) {
      if (t.contains(k)) dst = as_number(t[k], tp + "." + k);
    };
    auto cnt = [&](const char* k, std::size_t& dst) {
      if (t.contains(k)) dst = as_count(t[k], tp + "." + k);
    };
    num("tau", train.tau);
    cnt("batch_size", train.batch_size);
    num("lr", train.lr);
    cnt("epochs", train.epochs);
    num("keep_prob", train.keep_prob);
    num("beta1", train.beta1);
    num("beta2", train.beta2);
    num("eps", train.eps);
    cnt("dim", train.dim_out);
    cnt("max_steps", train.max_steps);
    num("max_seconds", train.max_seconds);
    if (t.contains("objective"))
      train.objective = wrap(tp + ".objective", [&] { return parse_objective(as_string(t["objective"], tp + ".objective")); });
    wrap(tp, [&] { train.validate(); return 0; });
  }
  if (doc.contains("features")) {
    const json& f = doc["features"];
    const std::string fp = at("features");
    check_keys(f, fp, {"dim", "min_n", "max_n"});
    if (f.contains("dim")) features.dim = as_count(f["dim"], fp + ".dim");
    if (f.contains("min_n")) features.min_n = static_cast<int>(as_count(f["min_n"], fp + ".min_n"));
    if (f.contains("max_n")) features.max_n = static_cast<int>(as_count(f["max_n"], fp + ".max_n"));
  }
}

void RunConfig::validate() const {
  if (!fs::exists(pools)) throw ConfigError("pools: file not found: " + pools.string());
  if (max_in_flight < 1) throw ConfigError("max_in_flight: must be at least 1");
  if (!(rate >= 0.0)) throw ConfigError("rate: must be >= 0");
  if (few_shot_k < 1) throw ConfigError("few_shot_k: must be at least 1");
  if (backend != llm::BackendMode::live && fixtures.empty())
    throw ConfigError(std::string("fixtures: backend ") + std::string(llm::to_string(backend)) +
                      " needs a fixture file");
  if (backend == llm::BackendMode::replay && !fs::exists(fixtures))
    throw ConfigError("fixtures: file not found: " + fixtures.string());
  if (features.dim == 0 || features.min_n < 1 || features.max_n < features.min_n)
    throw ConfigError("features: need dim > 0 and 1 <= min_n <= max_n");
  wrap("generation.unlabeled", [&] { generation.unlabeled.validate(); return 0; });
  wrap("generation.positive", [&] { generation.positive.validate(); return 0; });
  wrap("generation.hard_negative", [&] { generation.hard_negative.validate(); return 0; });
  wrap("train", [&] { train.validate(); return 0; });
}

json RunConfig::to_json() const {
  json j{{"pools", pools.string()},
         {"generation", generation.to_json()},
         {"prices", prices.to_json()},
         {"seed", seed},
         {"max_in_flight", max_in_flight},
         {"rate", rate},
         {"mode", synth::to_string(mode)},
         {"backend", llm::to_string(backend)},
         {"transport", to_string(transport)},
         {"few_shot_k", few_shot_k},
         {"train", train.to_json()},
         {"features", features.to_json()}};
  if (base_url) j["base_url"] = *base_url;
  if (model) j["model"] = *model;
  if (!fixtures.empty()) j["fixtures"] = fixtures.string();
  if (!out.empty()) j["out"] = out.string();
  return j;
}

// --- commands ---------------------------------------------------------------

namespace {

constexpr const char* kLedgerFile = "ledger.jsonl";
constexpr const char* kCostFile = "cost.json";

void write_json(const fs::path& p, const json& j) { write_file_atomic(p, j.dump(2) + "\n"); }

fs::path need_out(const RunConfig& c, const char* what) {
  if (c.out.empty()) throw UsageError(std::string(what) + ": --out is required");
  return c.out;
}

// Pools, backend and ledger wired into a synthesis context.
struct Session {
  pools::PoolSet pools;
  std::shared_ptr<llm::Transport> transport;
  std::shared_ptr<llm::FixtureStore> store;
  std::unique_ptr<llm::Gateway> gateway;
  std::unique_ptr<llm::CostLedger> ledger;
  synth::SynthContext ctx;

  Session(const RunConfig& c, const fs::path& out_dir, const std::atomic<bool>* cancel)
      : pools(pools::load_pools(c.pools)) {
    pools::validate_pools(pools, c.few_shot_k);
    if (c.backend != llm::BackendMode::replay) {
      if (c.transport == TransportKind::mock) {
        mock::MockOptions o = mock::options_for(pools);
        o.seed = c.seed;
        transport = std::make_shared<mock::MockTransport>(o);
      } else {
        transport = std::make_shared<llm::HttpTransport>(llm::http_options_from_env(c.base_url));
      }
    }
    if (c.backend != llm::BackendMode::live) {
      if (c.backend == llm::BackendMode::record && c.fixtures.has_parent_path())
        fs::create_directories(c.fixtures.parent_path());
      store = std::make_shared<llm::FixtureStore>(c.fixtures);
    }
    llm::RetryPolicy retry;
    retry.jitter_seed = derive_seed(c.seed, "retry");
    gateway = std::make_unique<llm::Gateway>(c.backend, transport, store, retry);
    fs::create_directories(out_dir);
    fs::remove(out_dir / kLedgerFile);
    ledger = std::make_unique<llm::CostLedger>(c.prices, out_dir / kLedgerFile);
    ctx.pools = &pools;
    ctx.gateway = gateway.get();
    ctx.ledger = ledger.get();
    ctx.seed = c.seed;
    ctx.mode = c.mode;
    ctx.configs = c.generation;
    if (c.model) {
      ctx.configs.unlabeled.model = *c.model;
      ctx.configs.positive.model = *c.model;
      ctx.configs.hard_negative.model = *c.model;
    }
    ctx.few_shot_k = c.few_shot_k;
    ctx.max_in_flight = c.max_in_flight;
    ctx.rate = c.rate;
    ctx.cancel = cancel;
  }
};

std::string dollars(llm::Money m) { return "$" + m.to_string(6); }

int cmd_pools_validate(const RunConfig& c, const std::string& file, std::ostream& out) {
  fs::path p = file.empty() ? c.pools : fs::path(file);
  auto pools = pools::load_pools(p);
  pools::validate_pools(pools, c.few_shot_k);
  out << pools.positive_prompts.size() << "/" << pools.hard_negative_prompts.size() << "/"
      << pools.unlabeled_prompts.size() << "/" << pools.caption_prompts.size() << " prompts, "
      << pools.genres.size() << " genres, " << pools.topics.topics.size() << " topics\n";
  return 0;
}

int cmd_synth_scratch(const RunConfig& c, std::size_t n, const std::atomic<bool>* cancel, std::ostream& out) {
  if (n == 0) throw UsageError("synth scratch: --n must be at least 1");
  fs::path dir = need_out(c, "synth scratch");
  Session s(c, dir, cancel);
  auto sentences = synth::generate_unlabeled(n, s.ctx);
  std::string jsonl, txt;
  for (const auto& u : sentences) {
    jsonl += u.to_json().dump() + "\n";
    txt += u.text + "\n";
  }
  write_file_atomic(dir / "unlabeled.jsonl", jsonl);
  write_file_atomic(dir / "unlabeled.txt", txt);
  write_json(dir / kCostFile, s.ledger->summary_json());
  write_json(dir / "unlabeled_manifest.json",
             {{"n", sentences.size()},
              {"seed", c.seed},
              {"mode", synth::to_string(c.mode)},
              {"pool_file", s.pools.source_path},
              {"pool_sha256", s.pools.source_sha256},
              {"configs", s.ctx.configs.to_json()},
              {"data_sha256", sha256_hex(jsonl)},
              {"created_at", utc_timestamp()}});
  out << "wrote " << sentences.size() << " sentences to " << (dir / "unlabeled.jsonl").string() << " ("
      << s.ledger->overall().requests << " requests, " << dollars(s.ledger->overall().cost) << ")\n";
  return 0;
}

int cmd_annotate(const RunConfig& c, const fs::path& input, bool dedup, bool no_filter,
                 const std::atomic<bool>* cancel, std::ostream& out) {
  fs::path dir = need_out(c, "annotate");
  synth::AssembleOptions opts;
  opts.source = input.extension() == ".jsonl" ? synth::Source::scratch : synth::Source::partial;
  opts.dedup = dedup;
  opts.filter = !no_filter;
  auto inputs = opts.source == synth::Source::scratch ? synth::read_scratch_input(input)
                                                      : synth::read_partial_input(input);
  Session s(c, dir, cancel);
  auto m = synth::assemble_dataset(inputs, s.ctx, opts, dir);
  write_json(dir / kCostFile, s.ledger->summary_json());
  out << "wrote " << m.n << " triplets to " << (dir / synth::kDataFile).string() << " ("
      << m.doc.value("skipped", 0) << " skipped, " << s.ledger->overall().requests << " requests, "
      << dollars(s.ledger->overall().cost) << ")\n";
  return 0;
}

enum class Format { lines, unlabeled, triplets, csv };

Format detect_format(const fs::path& p) {
  if (p.extension() == ".csv") return Format::csv;
  if (p.extension() != ".jsonl") return Format::lines;
  for (const auto& line : read_nonempty_lines(p)) {
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DatasetError(p.string() + ": " + e.what());
    }
    if (j.contains("sent0")) return Format::triplets;
    if (j.contains("text")) return Format::unlabeled;
    throw DatasetError(p.string() + ": records need 'text' or 'sent0'");
  }
  return Format::lines;
}

bool fits(const synth::Triplet& t) {
  return word_count(t.sent0) <= synth::kMaxWords && word_count(t.sent1) <= synth::kMaxWords &&
         word_count(t.hard_neg) <= synth::kMaxWords;
}

// Shared by filter and dedup: keep(text) decides on the record's key text.
template <class Keep>
std::pair<std::size_t, std::size_t> rewrite(const fs::path& in, const fs::path& outp, Keep&& keep,
                                            bool triplet_all_fields) {
  if (outp.empty()) throw UsageError("--out is required");
  if (outp.has_parent_path()) fs::create_directories(outp.parent_path());
  switch (detect_format(in)) {
    case Format::lines: {
      std::string s;
      std::size_t total = 0, kept = 0;
      for (const auto& line : read_nonempty_lines(in)) {
        ++total;
        std::string t(trim(line));
        if (keep(t)) {
          s += t + "\n";
          ++kept;
        }
      }
      write_file_atomic(outp, s);
      return {kept, total};
    }
    case Format::unlabeled: {
      std::string s;
      std::size_t total = 0, kept = 0;
      for (const auto& line : read_nonempty_lines(in)) {
        ++total;
        auto u = synth::UnlabeledSentence::from_json(json::parse(line));
        if (keep(u.text)) {
          s += u.to_json().dump() + "\n";
          ++kept;
        }
      }
      write_file_atomic(outp, s);
      return {kept, total};
    }
    case Format::triplets:
    case Format::csv: {
      auto all = synth::read_triplets(in);
      std::vector<synth::Triplet> kept;
      for (auto& t : all) {
        bool ok = triplet_all_fields ? fits(t) && keep(t.sent0) : keep(t.sent0);
        if (ok) kept.push_back(t);
      }
      if (outp.extension() == ".csv") {
        synth::export_csv(kept, outp);
      } else {
        synth::write_triplets(outp, kept);
      }
      return {kept.size(), all.size()};
    }
  }
  return {0, 0};
}

int cmd_filter(const fs::path& in, const fs::path& outp, std::ostream& out) {
  auto [kept, total] = rewrite(in, outp, [](const std::string& t) { return word_count(t) <= synth::kMaxWords; }, true);
  out << "kept " << kept << " of " << total << " (limit " << synth::kMaxWords << " words)\n";
  return 0;
}

int cmd_dedup(const fs::path& in, const fs::path& outp, std::ostream& out) {
  std::set<std::string> seen;
  auto [kept, total] = rewrite(in, outp, [&](const std::string& t) { return seen.insert(synth::normalize_sentence(t)).second; }, false);
  out << "kept " << kept << " of " << total << " (" << total - kept << " duplicates)\n";
  return 0;
}

int cmd_export_csv(const fs::path& in, const fs::path& outp, std::ostream& out) {
  if (outp.empty()) throw UsageError("export-csv: --out is required");
  auto t = synth::read_triplets(in);
  if (outp.has_parent_path()) fs::create_directories(outp.parent_path());
  synth::export_csv(t, outp);
  out << "wrote " << t.size() << " rows to " << outp.string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& c, const fs::path& data, const fs::path& features_file, std::ostream& out) {
  fs::path dir = need_out(c, "train");
  auto triplets = synth::read_triplets(data);
  std::vector<train::TrainText> texts;
  for (const auto& t : triplets) texts.push_back({t.sent0, t.sent1, t.hard_neg});
  std::unique_ptr<train::FeatureSource> features;
  if (!features_file.empty()) {
    features = std::make_unique<train::PrecomputedFeatures>(features_file);
  } else {
    features = std::make_unique<train::HashedNgramFeatures>(c.features);
  }
  train::TrainConfig tc = c.train;
  tc.seed = c.seed;
  train::TrainOutput to;
  to.dir = dir;
  auto r = train::train(texts, *features, tc, to);
  write_json(dir / "train_manifest.json", {{"data", data.string()},
                                           {"data_sha256", sha256_file(data)},
                                           {"records", texts.size()},
                                           {"steps", r.steps},
                                           {"stopped_by_budget", r.stopped_by_budget},
                                           {"train", tc.to_json()},
                                           {"featurizer", features->describe()},
                                           {"created_at", utc_timestamp()}});
  std::ostringstream loss;
  loss << std::setprecision(6) << (r.log.empty() ? 0.0 : r.log.back().loss);
  out << "trained " << r.steps << " steps on " << texts.size() << " triplets, final loss " << loss.str()
      << (r.stopped_by_budget ? " (time budget reached)" : "") << "; checkpoint "
      << (dir / "final.ckpt").string() << "\n";
  return 0;
}

int cmd_eval(const std::string& task, const fs::path& ckpt, const std::vector<std::string>& files,
             const fs::path& report_override, const fs::path& features_override, std::ostream& out) {
  if (files.empty()) throw UsageError("eval " + task + ": no input files");
  auto embedder = eval::load_embedder(ckpt, features_override);
  std::vector<fs::path> paths(files.begin(), files.end());
  eval::EvalReport r = task == "sts" ? eval::eval_sts(embedder, paths) : eval::eval_rerank(embedder, paths);
  r.checkpoint = ckpt.filename().string();
  r.checkpoint_sha256 = sha256_file(ckpt);
  fs::path report = report_override.empty()
                        ? ckpt.parent_path() / (ckpt.stem().string() + ".eval_" + task + ".json")
                        : report_override;
  if (report.has_parent_path()) fs::create_directories(report.parent_path());
  json doc = r.to_json();
  write_json(report, doc);
  fs::path manifest = report;
  manifest.replace_extension(".manifest.json");
  write_json(manifest, {{"report", report.filename().string()},
                        {"report_sha256", sha256_file(report)},
                        {"created_at", utc_timestamp()}});
  out << doc.dump(2) << "\n";
  return 0;
}

int cmd_cost_report(const std::vector<std::string>& dirs, std::ostream& out) {
  std::map<llm::Stage, llm::StageTotals> stages;
  llm::StageTotals all;
  std::int64_t n = 0;
  for (const auto& d : dirs) {
    const fs::path dir = d;
    auto ledger = llm::CostLedger::fold_event_log(dir / kLedgerFile);
    llm::Money sum;
    for (llm::Stage st : llm::kAllStages) {
      auto t = ledger.totals(st);
      sum += t.cost;
      auto& acc = stages[st];
      acc.usage += t.usage;
      acc.cost += t.cost;
      acc.requests += t.requests;
      acc.failures += t.failures;
    }
    auto o = ledger.overall();
    if (sum != o.cost) throw Error(dir.string() + ": stage totals do not sum to the ledger total");
    all.usage += o.usage;
    all.cost += o.cost;
    all.requests += o.requests;
    all.failures += o.failures;
    if (fs::exists(dir / kCostFile)) {
      json recorded = json::parse(read_file(dir / kCostFile));
      if (recorded != ledger.summary_json())
        throw Error((dir / kCostFile).string() + " disagrees with " + kLedgerFile);
      out << (dir / kCostFile).string() << " matches the ledger\n";
    }
    if (fs::exists(dir / synth::kManifestFile)) {
      json m = json::parse(read_file(dir / synth::kManifestFile));
      n += m.value("N", std::int64_t{0});
    }
  }
  char line[160];
  auto row = [&](const std::string& name, const llm::StageTotals& t) {
    std::snprintf(line, sizeof line, "%-14s %9lld %9lld %12lld %12lld %14s\n", name.c_str(),
                  static_cast<long long>(t.requests), static_cast<long long>(t.failures),
                  static_cast<long long>(t.usage.prompt_tokens), static_cast<long long>(t.usage.completion_tokens),
                  t.cost.to_string(6).c_str());
    out << line;
  };
  std::snprintf(line, sizeof line, "%-14s %9s %9s %12s %12s %14s\n", "stage", "requests", "failures", "prompt_tok",
                "output_tok", "cost_usd");
  out << line;
  for (llm::Stage st : llm::kAllStages) row(std::string(llm::to_string(st)), stages[st]);
  row("total", all);
  if (n > 0) {
    const std::int64_t pico = all.cost.picodollars();
    auto per = llm::Money::from_picodollars((pico + n / 2) / n);
    auto per_k = llm::Money::from_picodollars((pico * 1000 + n / 2) / n);
    out << "per triplet: " << dollars(per) << " over " << n << " triplets; per 1000 triplets: " << dollars(per_k)
        << "\n";
  }
  return 0;
}

int cmd_dataset_validate(const fs::path& dir, const RunConfig& c, bool pools_given, std::ostream& out,
                         std::ostream& err) {
  std::optional<pools::PoolSet> p;
  if (pools_given) p = pools::load_pools(c.pools);
  auto r = synth::validate_dataset(dir, p ? &*p : nullptr);
  if (!r.ok()) {
    for (const auto& problem : r.problems) err << problem << "\n";
    throw DatasetError(std::to_string(r.problems.size()) + " problem(s) in " + dir.string());
  }
  out << "ok: " << r.records << " records\n";
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
             const std::atomic<bool>* cancel) {
  CLI::App app{"Synthesize, train and evaluate sentence-embedding triplets.", "tforge"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_file, pools_s, backend_s, transport_s, fixtures_s, base_url_s, model_s, mode_s, out_s;
  std::uint64_t seed = 0;
  std::size_t max_in_flight = 0, few_shot = 0;
  double rate = 0.0;
  std::map<std::string, CLI::Option*> g;
  g["config"] = app.add_option("--config", config_file, "JSON run-config file");
  g["seed"] = app.add_option("--seed", seed, "Master seed for every random choice");
  g["pools"] = app.add_option("--pools", pools_s, "Prompt-pool JSON file");
  g["backend"] = app.add_option("--backend", backend_s, "live | record | replay");
  g["transport"] = app.add_option("--transport", transport_s, "http | mock (in-process mock model)");
  g["fixtures"] = app.add_option("--fixtures", fixtures_s, "Fixture JSONL for record/replay");
  g["base_url"] = app.add_option("--base-url", base_url_s, "Chat-completions server origin");
  g["model"] = app.add_option("--model", model_s, "Model name for every stage");
  g["mode"] = app.add_option("--mode", mode_s, "pooled | naive");
  g["max_in_flight"] = app.add_option("--max-in-flight", max_in_flight, "Concurrent requests");
  g["rate"] = app.add_option("--rate", rate, "Request starts per second (0 = unlimited)");
  g["few_shot_k"] = app.add_option("--few-shot", few_shot, "Exemplars per annotation prompt");
  g["out"] = app.add_option("--out", out_s, "Output directory (or file for filter/dedup/export-csv)");

  auto* pools_cmd = app.add_subcommand("pools", "Prompt-pool utilities")->require_subcommand(1)->fallthrough();
  std::string pools_file;
  auto* pools_validate = pools_cmd->add_subcommand("validate", "Check a pool file and print its counts")->fallthrough();
  pools_validate->add_option("file", pools_file, "Pool file (default: --pools)");

  auto* synth_cmd = app.add_subcommand("synth", "Unlabeled sentence generation")->require_subcommand(1)->fallthrough();
  auto* scratch = synth_cmd->add_subcommand("scratch", "Generate unlabeled sentences")->fallthrough();
  std::size_t n = 0;
  scratch->add_option("--n", n, "Number of sentences")->required();

  auto* annotate = app.add_subcommand("annotate", "Write a positive and a hard negative per sentence")->fallthrough();
  std::string input;
  bool dedup_flag = false, no_filter = false;
  annotate->add_option("--input", input, "Sentences: .jsonl from synth scratch, else one per line")->required();
  annotate->add_flag("--dedup", dedup_flag, "Drop duplicate input sentences");
  annotate->add_flag("--no-filter", no_filter, "Keep inputs longer than 32 words");

  std::string rw_input;
  auto* filter = app.add_subcommand("filter", "Drop sentences longer than 32 words")->fallthrough();
  filter->add_option("input", rw_input, "Text, unlabeled JSONL, triplet JSONL or CSV")->required();
  auto* dedup_cmd = app.add_subcommand("dedup", "Drop duplicate sentences")->fallthrough();
  dedup_cmd->add_option("input", rw_input, "Text, unlabeled JSONL, triplet JSONL or CSV")->required();
  auto* export_cmd = app.add_subcommand("export-csv", "Write sent0,sent1,hard_neg CSV")->fallthrough();
  export_cmd->add_option("input", rw_input, "Triplet JSONL")->required();

  auto* train_cmd = app.add_subcommand("train", "Train the projection head")->fallthrough();
  std::string data, features_file;
  train_cmd->add_option("--data", data, "Triplet JSONL or CSV")->required();
  train_cmd->add_option("--features", features_file, "Precomputed {id, vector} JSONL instead of hashed n-grams");
  std::map<std::string, CLI::Option*> t;
  train::TrainConfig tflags;
  std::string objective_s;
  std::size_t feature_dim = 0;
  t["tau"] = train_cmd->add_option("--tau", tflags.tau, "Temperature");
  t["batch_size"] = train_cmd->add_option("--batch-size", tflags.batch_size, "Mini-batch size");
  t["lr"] = train_cmd->add_option("--lr", tflags.lr, "Learning rate");
  t["epochs"] = train_cmd->add_option("--epochs", tflags.epochs, "Epochs");
  t["keep_prob"] = train_cmd->add_option("--keep-prob", tflags.keep_prob, "Feature keep probability");
  t["dim"] = train_cmd->add_option("--dim", tflags.dim_out, "Embedding dimension");
  t["objective"] = train_cmd->add_option("--objective", objective_s, "supervised | unsupervised");
  t["max_steps"] = train_cmd->add_option("--max-steps", tflags.max_steps, "Stop after this many updates");
  t["max_seconds"] = train_cmd->add_option("--max-seconds", tflags.max_seconds, "Wall-clock budget");
  t["feature_dim"] = train_cmd->add_option("--feature-dim", feature_dim, "Hashed feature buckets");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint")->require_subcommand(1)->fallthrough();
  std::string ckpt, report, eval_features;
  std::vector<std::string> eval_files;
  auto add_eval = [&](const char* name, const char* help) {
    auto* e = eval_cmd->add_subcommand(name, help)->fallthrough();
    e->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
    e->add_option("--report", report, "Report path (default: next to the checkpoint)");
    e->add_option("--features", eval_features, "Precomputed feature file for the checkpoint");
    e->add_option("files", eval_files, "Input JSONL files")->required();
    return e;
  };
  auto* eval_sts = add_eval("sts", "Spearman on {text_a, text_b, score} files");
  auto* eval_rerank = add_eval("rerank", "MAP on {query, positives, negatives} files");

  auto* cost_cmd = app.add_subcommand("cost", "Spend accounting")->require_subcommand(1)->fallthrough();
  std::vector<std::string> cost_dirs;
  auto* cost_report =
      cost_cmd->add_subcommand("report", "Per-stage totals summed over run directories")->fallthrough();
  cost_report->add_option("dirs", cost_dirs, "Run directories holding ledger.jsonl")->required();

  auto* dataset_cmd = app.add_subcommand("dataset", "Dataset utilities")->require_subcommand(1)->fallthrough();
  std::string dataset_dir;
  auto* dataset_validate = dataset_cmd->add_subcommand("validate", "Check a dataset directory")->fallthrough();
  dataset_validate->add_option("dir", dataset_dir, "Directory holding data.jsonl and manifest.json")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  try {
    RunConfig c = default_run_config();
    if (g["config"]->count()) {
      fs::path cf = config_file;
      json doc;
      try {
        doc = json::parse(read_file(cf));
      } catch (const json::exception& e) {
        throw ConfigError(cf.string() + ": " + e.what());
      }
      c.apply_json(doc, "config", cf.parent_path());
    }
    auto given = [&](const char* k) { return g[k]->count() > 0; };
    if (given("seed")) c.seed = seed;
    if (given("pools")) c.pools = pools_s;
    if (given("backend")) c.backend = llm::parse_backend_mode(backend_s);
    if (given("transport")) c.transport = parse_transport(transport_s);
    if (given("fixtures")) c.fixtures = fixtures_s;
    if (given("base_url")) c.base_url = base_url_s;
    if (given("model")) c.model = model_s;
    if (given("mode")) c.mode = synth::parse_mode(mode_s);
    if (given("max_in_flight")) c.max_in_flight = max_in_flight;
    if (given("rate")) c.rate = rate;
    if (given("few_shot_k")) c.few_shot_k = few_shot;
    if (given("out")) c.out = out_s;
    if (t["tau"]->count()) c.train.tau = tflags.tau;
    if (t["batch_size"]->count()) c.train.batch_size = tflags.batch_size;
    if (t["lr"]->count()) c.train.lr = tflags.lr;
    if (t["epochs"]->count()) c.train.epochs = tflags.epochs;
    if (t["keep_prob"]->count()) c.train.keep_prob = tflags.keep_prob;
    if (t["dim"]->count()) c.train.dim_out = tflags.dim_out;
    if (t["objective"]->count()) c.train.objective = parse_objective(objective_s);
    if (t["max_steps"]->count()) c.train.max_steps = tflags.max_steps;
    if (t["max_seconds"]->count()) c.train.max_seconds = tflags.max_seconds;
    if (t["feature_dim"]->count()) c.features.dim = feature_dim;
    c.validate();

    if (pools_validate->parsed()) return cmd_pools_validate(c, pools_file, out);
    if (scratch->parsed()) return cmd_synth_scratch(c, n, cancel, out);
    if (annotate->parsed()) return cmd_annotate(c, input, dedup_flag, no_filter, cancel, out);
    if (filter->parsed()) return cmd_filter(rw_input, c.out, out);
    if (dedup_cmd->parsed()) return cmd_dedup(rw_input, c.out, out);
    if (export_cmd->parsed()) return cmd_export_csv(rw_input, c.out, out);
    if (train_cmd->parsed()) return cmd_train(c, data, features_file, out);
    if (eval_sts->parsed()) return cmd_eval("sts", ckpt, eval_files, report, eval_features, out);
    if (eval_rerank->parsed()) return cmd_eval("rerank", ckpt, eval_files, report, eval_features, out);
    if (cost_report->parsed()) return cmd_cost_report(cost_dirs, out);
    if (dataset_validate->parsed()) return cmd_dataset_validate(dataset_dir, c, given("pools"), out, err);
    err << "tforge: no command\n";
    return 1;
  } catch (const CancelledError& e) {
    err << "tforge: interrupted: " << e.what() << " (ledger flushed)\n";
    return 2;
  } catch (const UsageError& e) {
    err << "tforge: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "tforge: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace tforge::cli
