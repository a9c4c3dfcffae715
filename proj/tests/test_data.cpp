#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "dmr/data.hpp"
#include "dmr/error.hpp"

namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "dmr_test_data";
  fs::create_directories(dir);
  return dir / name;
}

fs::path write_file(const std::string& name, const std::string& text) {
  const fs::path p = temp_file(name);
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST(Vocabulary, ReservedIdsAndRoundTrip) {
  dmr::Vocabulary v;
  EXPECT_EQ(v.size(), 2u);
  EXPECT_EQ(v.add("good"), 2);
  EXPECT_EQ(v.add("bad"), 3);
  EXPECT_EQ(v.add("good"), 2);
  EXPECT_EQ(v.encode("never-seen"), dmr::Vocabulary::kUnknown);
  for (dmr::TokenId id = 0; id < static_cast<dmr::TokenId>(v.size()); ++id) {
    EXPECT_EQ(v.encode(v.decode(id)), id);
  }
  const fs::path p = temp_file("vocab.txt");
  v.save(p);
  EXPECT_EQ(dmr::Vocabulary::load(p), v);
  std::ifstream in(p);
  std::string first;
  std::getline(in, first);
  EXPECT_EQ(first, "good");  // line 0 holds id 2
}

TEST(Vocabulary, RejectsDuplicates) {
  EXPECT_THROW(dmr::Vocabulary::load(write_file("dup.txt", "a\nb\na\n")), dmr::DataError);
}

TEST(LoadCorpus, EmptyFileIsEmptyCorpus) {
  const dmr::Corpus c = dmr::load_corpus(write_file("empty.jsonl", ""));
  EXPECT_TRUE(c.empty());
}

TEST(LoadCorpus, BuildsVocabularyAndReadsRationales) {
  const dmr::Corpus c = dmr::load_corpus(write_file(
      "two.jsonl",
      "{\"tokens\":[\"a\",\"b\"],\"label\":1,\"rationale\":[0,1]}\n\n{\"tokens\":[\"b\"],\"label\":0}\n"));
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.examples[0].tokens, (std::vector<dmr::TokenId>{2, 3}));
  EXPECT_EQ(c.examples[1].tokens, (std::vector<dmr::TokenId>{3}));
  EXPECT_EQ(*c.examples[0].rationale, (dmr::Mask{0, 1}));
  EXPECT_FALSE(c.examples[1].rationale);
  EXPECT_FALSE(c.has_rationales());
  EXPECT_EQ(c.num_classes(), 2);
}

TEST(LoadCorpus, RationaleLengthMismatchNamesLine) {
  const fs::path p = write_file("bad.jsonl",
                                "{\"tokens\":[\"a\"],\"label\":0}\n"
                                "{\"tokens\":[\"a\",\"b\"],\"label\":0,\"rationale\":[1]}\n");
  try {
    dmr::load_corpus(p);
    FAIL() << "expected DataError";
  } catch (const dmr::DataError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(LoadCorpus, MalformedRecordsAreRejected) {
  for (const char* line : {"not json", "[1,2]", "{\"tokens\":[],\"label\":0}",
                           "{\"tokens\":[\"a\"],\"label\":-1}", "{\"tokens\":[\"a\"]}",
                           "{\"tokens\":[\"a\"],\"label\":0,\"rationale\":[2]}"}) {
    EXPECT_THROW(dmr::load_corpus(write_file("malformed.jsonl", std::string(line) + "\n")),
                 dmr::DataError)
        << line;
  }
}

TEST(LoadCorpus, UnknownTokensMapToUnknownWithGivenVocabulary) {
  dmr::Vocabulary v;
  v.add("a");
  const dmr::Corpus c =
      dmr::load_corpus(write_file("unk.jsonl", "{\"tokens\":[\"a\",\"zzz\"],\"label\":0}\n"), &v);
  EXPECT_EQ(c.examples[0].tokens, (std::vector<dmr::TokenId>{2, dmr::Vocabulary::kUnknown}));
  EXPECT_EQ(c.vocab, v);
}

TEST(LoadCorpus, SaveLoadRoundTrip) {
  dmr::SynthConfig sc;
  sc.num_examples = 50;
  const dmr::Corpus c = dmr::generate_synthetic(sc);
  const fs::path p = temp_file("round.jsonl");
  dmr::save_corpus(p, c);
  const dmr::Corpus back = dmr::load_corpus(p, &c.vocab);
  EXPECT_EQ(back.examples, c.examples);
}

TEST(Synthetic, GoldMasksMarkExactlyThePlantedSignals) {
  dmr::SynthConfig sc;
  sc.num_examples = 300;
  const dmr::Corpus c = dmr::generate_synthetic(sc);
  ASSERT_EQ(c.size(), 300u);
  EXPECT_EQ(c.vocab.size(), sc.vocab_size + 2);
  std::map<dmr::TokenId, int> owner;
  for (int cls = 0; cls < sc.num_classes; ++cls) {
    for (dmr::TokenId id : dmr::signal_tokens(sc, c.vocab, cls)) {
      EXPECT_FALSE(owner.contains(id)) << "signal sets overlap";
      owner[id] = cls;
    }
  }
  for (const dmr::Example& e : c.examples) {
    ASSERT_TRUE(e.rationale);
    EXPECT_GE(e.tokens.size(), sc.min_length);
    EXPECT_LE(e.tokens.size(), sc.max_length);
    std::size_t ones = 0;
    for (std::size_t t = 0; t < e.tokens.size(); ++t) {
      const bool signal = owner.contains(e.tokens[t]);
      EXPECT_EQ((*e.rationale)[t] == 1, signal);
      if (signal) EXPECT_EQ(owner[e.tokens[t]], e.label);
      ones += (*e.rationale)[t];
    }
    EXPECT_EQ(ones, sc.signals_per_example);
  }
}

TEST(Synthetic, CountingClassifierIsPerfect) {
  dmr::SynthConfig sc;
  sc.num_examples = 500;
  sc.num_classes = 3;
  const dmr::Corpus c = dmr::generate_synthetic(sc);
  std::vector<std::set<dmr::TokenId>> signals;
  for (int cls = 0; cls < sc.num_classes; ++cls) {
    const auto ids = dmr::signal_tokens(sc, c.vocab, cls);
    signals.emplace_back(ids.begin(), ids.end());
  }
  for (const dmr::Example& e : c.examples) {
    std::vector<int> counts(signals.size(), 0);
    for (dmr::TokenId id : e.tokens)
      for (std::size_t k = 0; k < signals.size(); ++k) counts[k] += signals[k].contains(id);
    const auto best = std::max_element(counts.begin(), counts.end()) - counts.begin();
    EXPECT_EQ(best, e.label);
  }
}

TEST(Synthetic, SameSeedSameCorpus) {
  dmr::SynthConfig sc;
  sc.num_examples = 100;
  EXPECT_EQ(dmr::generate_synthetic(sc).examples, dmr::generate_synthetic(sc).examples);
  dmr::SynthConfig other = sc;
  other.seed = sc.seed + 1;
  EXPECT_NE(dmr::generate_synthetic(sc).examples, dmr::generate_synthetic(other).examples);
}

TEST(Synthetic, ZipfNoiseFavoursLowRanks) {
  dmr::SynthConfig sc;
  sc.num_examples = 400;
  sc.noise = dmr::NoiseDistribution::kZipf;
  const dmr::Corpus c = dmr::generate_synthetic(sc);
  std::map<std::string, int> freq;
  for (const auto& e : c.examples)
    for (std::size_t t = 0; t < e.tokens.size(); ++t)
      if (!(*e.rationale)[t]) ++freq[c.vocab.decode(e.tokens[t])];
  EXPECT_GT(freq["w0"], 5 * std::max(1, freq["w100"]));
}

TEST(Synthetic, InvalidConfigsAreRejected) {
  dmr::SynthConfig sc;
  sc.signals_per_example = 20;  // not below the minimum length
  EXPECT_THROW(dmr::validate(sc), dmr::ConfigError);
  sc = {};
  sc.min_length = 50;
  EXPECT_THROW(dmr::validate(sc), dmr::ConfigError);
  sc = {};
  sc.vocab_size = 5;  // too small for the signal sets
  EXPECT_THROW(dmr::validate(sc), dmr::ConfigError);
}

TEST(Batching, SizesAndCoverage) {
  const auto batches = dmr::batch_indices(10, 4, 1, 0);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[0].size(), 4u);
  EXPECT_EQ(batches[1].size(), 4u);
  EXPECT_EQ(batches[2].size(), 2u);
  std::multiset<std::size_t> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen.count(i), 1u);
}

TEST(Batching, OrderIsAFunctionOfSeedAndEpoch) {
  EXPECT_EQ(dmr::batch_indices(100, 8, 5, 2), dmr::batch_indices(100, 8, 5, 2));
  EXPECT_NE(dmr::batch_indices(100, 8, 5, 2), dmr::batch_indices(100, 8, 5, 3));
  EXPECT_NE(dmr::batch_indices(100, 8, 5, 2), dmr::batch_indices(100, 8, 6, 2));
}

TEST(Batching, PaddingAndValidity) {
  dmr::Corpus c;
  c.examples.push_back({{2, 3, 4}, 0, dmr::Mask{1, 0, 0}});
  c.examples.push_back({{5}, 1, dmr::Mask{1}});
  const std::vector<std::size_t> idx{0, 1};
  const dmr::Batch b = dmr::make_batch(c, idx);
  EXPECT_EQ(b.size, 2u);
  EXPECT_EQ(b.length, 3u);
  EXPECT_EQ(b.tokens, (std::vector<dmr::TokenId>{2, 3, 4, 5, 0, 0}));
  EXPECT_EQ(b.valid, dmr::Tensor::matrix(2, 3, {1, 1, 1, 1, 0, 0}));
  EXPECT_EQ(b.labels, (std::vector<int>{0, 1}));
  EXPECT_EQ(b.length_of(1), 1u);
  EXPECT_EQ(b.gold.size(), 2u);
}

TEST(Batching, IteratorCoversCorpusOnce) {
  dmr::SynthConfig sc;
  sc.num_examples = 37;
  const dmr::Corpus c = dmr::generate_synthetic(sc);
  std::set<std::size_t> seen;
  for (const dmr::Batch& b : dmr::batch_iterator(c, 8, 4, 1)) {
    for (std::size_t i = 0; i < b.size; ++i) {
      EXPECT_TRUE(seen.insert(b.index[i]).second);
      EXPECT_EQ(b.labels[i], c.examples[b.index[i]].label);
    }
  }
  EXPECT_EQ(seen.size(), 37u);
}
