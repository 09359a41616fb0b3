#include "tforge/toy_corpus.hpp"

#include <set>
#include <string>

#include "tforge/error.hpp"
#include "tforge/rng.hpp"
#include "tforge/text.hpp"

namespace tforge::toy {
namespace {

using Cluster = std::vector<std::string>;

const std::vector<Cluster> kNouns = {
    {"car", "automobile", "vehicle"},    {"dog", "hound", "pup"},
    {"child", "kid", "youngster"},       {"doctor", "physician", "medic"},
    {"house", "home", "residence"},      {"boat", "ship", "vessel"},
    {"student", "pupil", "learner"},     {"shop", "store", "boutique"},
    {"film", "movie", "picture"},        {"woman", "lady"},
    {"man", "gentleman", "fellow"},      {"teacher", "instructor", "tutor"},
};

// Antonym pairs; each side is a synonym cluster.
const std::vector<std::pair<Cluster, Cluster>> kAdjectives = {
    {{"big", "large", "huge"}, {"small", "tiny", "little"}},
    {{"happy", "glad", "cheerful"}, {"sad", "unhappy", "sorrowful"}},
    {{"fast", "quick", "rapid"}, {"slow", "sluggish", "unhurried"}},
    {{"hot", "warm", "heated"}, {"cold", "chilly", "icy"}},
    {{"old", "ancient", "aged"}, {"new", "modern", "recent"}},
    {{"clean", "tidy", "spotless"}, {"dirty", "filthy", "grimy"}},
    {{"loud", "noisy", "booming"}, {"quiet", "silent", "hushed"}},
    {{"bright", "shiny", "luminous"}, {"dark", "dim", "murky"}},
};

struct Verb {
  std::string third;
  std::string base;
};
const std::vector<std::vector<Verb>> kVerbs = {
    {{"waits", "wait"}, {"lingers", "linger"}, {"stays", "stay"}},
    {{"sleeps", "sleep"}, {"naps", "nap"}, {"dozes", "doze"}},
    {{"runs", "run"}, {"sprints", "sprint"}, {"dashes", "dash"}},
    {{"talks", "talk"}, {"chats", "chat"}, {"speaks", "speak"}},
    {{"eats", "eat"}, {"dines", "dine"}, {"feasts", "feast"}},
};

const std::vector<Cluster> kPlaces = {
    {"park", "garden"},         {"station", "terminal", "depot"},
    {"river", "stream", "creek"}, {"school", "academy"},
    {"beach", "shore", "coast"},  {"hospital", "clinic"},
    {"market", "bazaar"},       {"lake", "pond"},
};

const Cluster kPreps = {"near", "by", "beside"};

// A sentence is a choice of cluster per slot plus a surface word per slot.
struct Frame {
  std::size_t noun = 0, adj = 0, adj_side = 0, verb = 0, place = 0;
};

struct Surface {
  std::size_t noun = 0, adj = 0, verb = 0, place = 0, prep = 0;
  bool negated = false;
};

const Cluster& adj_cluster(const Frame& f, std::size_t side) {
  return side == 0 ? kAdjectives[f.adj].first : kAdjectives[f.adj].second;
}

std::string render(const Frame& f, const Surface& s, std::size_t adj_side) {
  const Verb& v = kVerbs[f.verb][s.verb];
  std::string verb = s.negated ? "does not " + v.base : v.third;
  return "the " + adj_cluster(f, adj_side)[s.adj] + " " + kNouns[f.noun][s.noun] + " " + verb +
         " " + kPreps[s.prep] + " the " + kPlaces[f.place][s.place];
}

std::size_t pick(Rng& rng, std::size_t n) { return static_cast<std::size_t>(rng.uniform_index(n)); }

// A different member when the cluster has one.
std::size_t other(Rng& rng, std::size_t n, std::size_t not_this) {
  if (n < 2) return not_this;
  std::size_t k = pick(rng, n - 1);
  return k >= not_this ? k + 1 : k;
}

Frame random_frame(Rng& rng) {
  Frame f;
  f.noun = pick(rng, kNouns.size());
  f.adj = pick(rng, kAdjectives.size());
  f.adj_side = pick(rng, 2);
  f.verb = pick(rng, kVerbs.size());
  f.place = pick(rng, kPlaces.size());
  return f;
}

Surface random_surface(const Frame& f, Rng& rng) {
  Surface s;
  s.noun = pick(rng, kNouns[f.noun].size());
  s.adj = pick(rng, adj_cluster(f, f.adj_side).size());
  s.verb = pick(rng, kVerbs[f.verb].size());
  s.place = pick(rng, kPlaces[f.place].size());
  s.prep = pick(rng, kPreps.size());
  return s;
}

Surface paraphrase_surface(const Frame& f, const Surface& s, Rng& rng) {
  Surface p;
  p.noun = other(rng, kNouns[f.noun].size(), s.noun);
  p.adj = other(rng, adj_cluster(f, f.adj_side).size(), s.adj);
  p.verb = other(rng, kVerbs[f.verb].size(), s.verb);
  p.place = other(rng, kPlaces[f.place].size(), s.place);
  p.prep = other(rng, kPreps.size(), s.prep);
  return p;
}

// Same words as the anchor, with the adjective's antonym or a negated verb.
std::string contradiction(const Frame& f, const Surface& s, Rng& rng) {
  if (rng.bernoulli(0.6)) {
    Surface c = s;
    const std::size_t side = 1 - f.adj_side;
    c.adj = std::min(s.adj, adj_cluster(f, side).size() - 1);
    return render(f, c, side);
  }
  Surface c = s;
  c.negated = true;
  return render(f, c, f.adj_side);
}

// Changes the cluster on `slots` of {noun, place, verb}, keeping the rest.
Frame shift_slots(Frame f, int slots, Rng& rng) {
  std::vector<int> which{0, 1, 2};
  rng.shuffle(which);
  for (int k = 0; k < slots; ++k) {
    switch (which[k]) {
      case 0: f.noun = other(rng, kNouns.size(), f.noun); break;
      case 1: f.place = other(rng, kPlaces.size(), f.place); break;
      default: f.verb = other(rng, kVerbs.size(), f.verb); break;
    }
  }
  return f;
}

Frame unrelated_frame(const Frame& f, Rng& rng) {
  Frame u;
  u.noun = other(rng, kNouns.size(), f.noun);
  u.adj = other(rng, kAdjectives.size(), f.adj);
  u.adj_side = pick(rng, 2);
  u.verb = other(rng, kVerbs.size(), f.verb);
  u.place = other(rng, kPlaces.size(), f.place);
  return u;
}

// Surface words drawn for a (possibly shifted) frame, reusing indices where
// clusters allow so unchanged slots read as synonyms.
Surface fit_surface(const Frame& f, const Surface& like, Rng& rng) {
  Surface s = paraphrase_surface(f, like, rng);
  s.noun = std::min(s.noun, kNouns[f.noun].size() - 1);
  s.adj = std::min(s.adj, adj_cluster(f, f.adj_side).size() - 1);
  s.verb = std::min(s.verb, kVerbs[f.verb].size() - 1);
  s.place = std::min(s.place, kPlaces[f.place].size() - 1);
  return s;
}

}  // namespace

ToyCorpus make_toy_corpus(const ToyOptions& o) {
  if (o.heldout >= o.triplets) throw ConfigError("toy corpus: heldout must be smaller than triplets");
  ToyCorpus c;
  Rng rng = derive_stream(o.seed, "toy/triplets");
  std::set<std::string> anchors;
  std::vector<synth::Triplet> all;
  std::size_t guard = 0;
  while (all.size() < o.triplets) {
    if (++guard > o.triplets * 100) throw DatasetError("toy corpus: template space exhausted");
    Frame f = random_frame(rng);
    Surface s = random_surface(f, rng);
    std::string a = render(f, s, f.adj_side);
    if (!anchors.insert(a).second) continue;
    synth::Triplet t;
    t.sent0 = a;
    t.sent1 = render(f, paraphrase_surface(f, s, rng), f.adj_side);
    t.hard_neg = contradiction(f, s, rng);
    t.provenance = {{"source", "toy"}};
    all.push_back(std::move(t));
  }
  Rng split = derive_stream(o.seed, "toy/split");
  split.shuffle(all);
  c.heldout.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(o.heldout));
  c.train.assign(all.begin() + static_cast<std::ptrdiff_t>(o.heldout), all.end());

  Rng sts = derive_stream(o.seed, "toy/sts");
  for (std::size_t i = 0; i < o.sts_pairs; ++i) {
    Frame f = random_frame(sts);
    Surface s = random_surface(f, sts);
    std::string a = render(f, s, f.adj_side);
    const int level = static_cast<int>(i % 5);
    eval::ScoredPair p{a, "", 0.0};
    switch (level) {
      case 0:
        p.text_b = render(f, paraphrase_surface(f, s, sts), f.adj_side);
        p.gold = 5;
        break;
      case 1: {
        Frame g = shift_slots(f, 1, sts);
        p.text_b = render(g, fit_surface(g, s, sts), g.adj_side);
        p.gold = 3;
        break;
      }
      case 2: {
        Frame g = shift_slots(f, 2, sts);
        p.text_b = render(g, fit_surface(g, s, sts), g.adj_side);
        p.gold = 2;
        break;
      }
      case 3:
        p.text_b = contradiction(f, s, sts);
        p.gold = 1;
        break;
      default: {
        Frame g = unrelated_frame(f, sts);
        p.text_b = render(g, fit_surface(g, s, sts), g.adj_side);
        p.gold = 0;
        break;
      }
    }
    c.sts.push_back(std::move(p));
  }

  Rng rr = derive_stream(o.seed, "toy/rerank");
  for (std::size_t i = 0; i < o.rerank_queries; ++i) {
    Frame f = random_frame(rr);
    Surface s = random_surface(f, rr);
    eval::RerankQuery q;
    q.query = render(f, s, f.adj_side);
    q.candidates.push_back({render(f, paraphrase_surface(f, s, rr), f.adj_side), true});
    q.candidates.push_back({contradiction(f, s, rr), false});
    Frame g = shift_slots(f, 1, rr);
    q.candidates.push_back({render(g, fit_surface(g, s, rr), g.adj_side), false});
    Frame u = unrelated_frame(f, rr);
    q.candidates.push_back({render(u, fit_surface(u, s, rr), u.adj_side), false});
    c.rerank.push_back(std::move(q));
  }
  return c;
}

void write_toy_corpus(const std::filesystem::path& dir, const ToyCorpus& c) {
  std::filesystem::create_directories(dir);
  synth::write_triplets(dir / "toy_train.jsonl", c.train);
  synth::write_triplets(dir / "toy_heldout.jsonl", c.heldout);
  eval::write_sts_file(dir / "toy_sts.jsonl", c.sts);
  eval::write_rerank_file(dir / "toy_rerank.jsonl", c.rerank);
}

std::vector<train::TrainText> as_train_texts(const std::vector<synth::Triplet>& triplets) {
  std::vector<train::TrainText> out;
  out.reserve(triplets.size());
  for (const auto& t : triplets) out.push_back({t.sent0, t.sent1, t.hard_neg});
  return out;
}

}  // namespace tforge::toy
