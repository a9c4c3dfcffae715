#pragma once

#include <numeric>
#include <vector>

#include "dmr/data.hpp"
#include "dmr/model.hpp"

namespace fixtures {

inline dmr::SynthConfig small_synth(std::size_t n = 24, std::uint64_t seed = 3) {
  dmr::SynthConfig c;
  c.vocab_size = 30;
  c.num_examples = n;
  c.min_length = 4;
  c.max_length = 9;
  c.signal_set_size = 3;
  c.signals_per_example = 2;
  c.seed = seed;
  return c;
}

inline dmr::Batch first_batch(const dmr::Corpus& corpus, std::size_t n) {
  std::vector<std::size_t> idx(std::min(n, corpus.size()));
  std::iota(idx.begin(), idx.end(), 0);
  return dmr::make_batch(corpus, idx);
}

inline dmr::ClassifierConfig small_classifier(const dmr::Corpus& corpus) {
  dmr::ClassifierConfig c;
  c.vocab_size = corpus.vocab.size();
  c.embed_dim = 6;
  c.hidden_dim = 5;
  c.feature_dim = 4;
  c.num_classes = corpus.num_classes();
  return c;
}

inline dmr::GeneratorConfig small_generator(const dmr::Corpus& corpus) {
  dmr::GeneratorConfig g;
  g.vocab_size = corpus.vocab.size();
  g.embed_dim = 6;
  g.hidden_dim = 5;
  g.num_classes = corpus.num_classes();
  // A random head gives non-trivial masks without training.
  g.zero_head = false;
  return g;
}

}  // namespace fixtures
