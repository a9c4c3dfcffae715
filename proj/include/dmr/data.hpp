#pragma once

// Corpus ingestion, vocabulary, padded batching and the synthetic
// planted-rationale corpus.
//
// Corpus file: UTF-8, one JSON object per line:
//   {"tokens": ["w1", "w2", ...], "label": 0, "rationale": [0, 1, ...]}
// "rationale" is optional and, when present, has one 0/1 entry per token.
//
// Vocabulary file: one token per line; the token on line n (0-based) has
// id n + 2. Ids 0 (padding) and 1 (unknown) are reserved and not written.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dmr/tensor.hpp"

namespace dmr {

using TokenId = std::int32_t;
using Mask = std::vector<std::uint8_t>;

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnknown = 1;

  Vocabulary();

  // Returns the id of `token`, inserting it if new.
  TokenId add(const std::string& token);
  // Unknown tokens map to kUnknown.
  TokenId encode(const std::string& token) const;
  const std::string& decode(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return ids_.contains(token); }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

struct Example {
  std::vector<TokenId> tokens;
  int label = 0;
  std::optional<Mask> rationale;

  bool operator==(const Example&) const = default;
};

struct Corpus {
  std::vector<Example> examples;
  Vocabulary vocab;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
  // max label + 1, and at least 2.
  int num_classes() const;
  bool has_rationales() const;
};

// Reads a corpus file. With `vocab` given, tokens are encoded against it
// (unseen tokens become kUnknown); otherwise a vocabulary is built in order of
// first appearance. Throws DataError naming the line on malformed records.
Corpus load_corpus(const std::filesystem::path& path,
                   const Vocabulary* vocab = nullptr);
void save_corpus(const std::filesystem::path& path, const Corpus& corpus);

enum class NoiseDistribution { kUniform, kZipf };

struct SynthConfig {
  std::size_t vocab_size = 200;   // distinct non-reserved tokens
  std::size_t num_examples = 2000;
  std::size_t min_length = 20;
  std::size_t max_length = 40;
  int num_classes = 2;
  std::size_t signal_set_size = 5;  // signal tokens owned by each class
  std::size_t signals_per_example = 3;
  NoiseDistribution noise = NoiseDistribution::kUniform;
  double zipf_exponent = 1.0;
  std::uint64_t seed = 7;
};

// Throws ConfigError when the configuration cannot be realised.
void validate(const SynthConfig& config);

// Every example carries `signals_per_example` tokens drawn from its class's
// signal set at distinct random positions; its gold rationale is 1 exactly
// there. All other tokens come from the shared neutral pool. Signal tokens
// are named "c<class>_s<j>", neutral tokens "w<j>".
Corpus generate_synthetic(const SynthConfig& config);

// Builds the synthetic vocabulary alone (ids agree with generate_synthetic).
Vocabulary synthetic_vocabulary(const SynthConfig& config);

// Signal token ids of `cls` in a corpus produced by generate_synthetic.
std::vector<TokenId> signal_tokens(const SynthConfig& config, const Vocabulary& vocab, int cls);

// A batch padded to its own longest example with id 0.
struct Batch {
  std::size_t size = 0;    // B
  std::size_t length = 0;  // L
  std::vector<TokenId> tokens;     // B*L
  Tensor valid;                    // [B, L], 1 at real tokens
  std::vector<int> labels;         // B
  std::vector<std::size_t> index;  // corpus positions
  std::vector<Mask> gold;          // per example (unpadded), empty if absent

  std::size_t length_of(std::size_t b) const;
};

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices);

// Corpus positions split into batches of at most `batch_size`. The order is a
// pure function of (seed, epoch); every position appears exactly once.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t corpus_size,
                                                    std::size_t batch_size,
                                                    std::uint64_t seed,
                                                    std::uint64_t epoch);

// Unshuffled batches in corpus order.
std::vector<std::vector<std::size_t>> sequential_batch_indices(std::size_t corpus_size,
                                                               std::size_t batch_size);

std::vector<Batch> batch_iterator(const Corpus& corpus, std::size_t batch_size,
                                  std::uint64_t seed, std::uint64_t epoch);

}  // namespace dmr
