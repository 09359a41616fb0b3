// Writes the templated toy corpus used by the learning checks.
#include <CLI11.hpp>

#include <iostream>

#include "tforge/error.hpp"
#include "tforge/toy_corpus.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate the toy triplet, STS and rerank files", "make_toy_corpus"};
  tforge::toy::ToyOptions o;
  std::string out = "data/toy";
  app.add_option("--out", out, "Output directory");
  app.add_option("--seed", o.seed, "Seed");
  app.add_option("--triplets", o.triplets, "Triplets, held-out split included");
  app.add_option("--heldout", o.heldout, "Held-out triplets");
  app.add_option("--sts-pairs", o.sts_pairs, "STS pairs");
  app.add_option("--rerank-queries", o.rerank_queries, "Rerank queries");
  CLI11_PARSE(app, argc, argv);
  try {
    auto c = tforge::toy::make_toy_corpus(o);
    tforge::toy::write_toy_corpus(out, c);
    std::cout << "wrote " << c.train.size() << " train, " << c.heldout.size() << " held-out triplets, "
              << c.sts.size() << " STS pairs, " << c.rerank.size() << " rerank queries to " << out << "\n";
  } catch (const tforge::UsageError& e) {
    std::cerr << "make_toy_corpus: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "make_toy_corpus: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
