#include "dmr/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "dmr/error.hpp"
#include "dmr/rng.hpp"

namespace dmr {

Vocabulary::Vocabulary() : tokens_{"<pad>", "<unk>"}, ids_{{"<pad>", kPad}, {"<unk>", kUnknown}} {}

TokenId Vocabulary::add(const std::string& token) {
  if (auto it = ids_.find(token); it != ids_.end()) return it->second;
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

TokenId Vocabulary::encode(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnknown : it->second;
}

const std::string& Vocabulary::decode(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocabulary " + path.string());
  for (std::size_t i = 2; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  Vocabulary v;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) throw DataError("empty vocabulary entry", n);
    if (v.contains(line)) throw DataError("duplicate vocabulary entry '" + line + "'", n);
    v.add(line);
  }
  return v;
}

int Corpus::num_classes() const {
  int top = 1;
  for (const Example& e : examples) top = std::max(top, e.label);
  return top + 1;
}

bool Corpus::has_rationales() const {
  return !examples.empty() &&
         std::all_of(examples.begin(), examples.end(),
                     [](const Example& e) { return e.rationale.has_value(); });
}

namespace {

Example parse_record(const std::string& line, std::size_t n, Vocabulary& vocab,
                     bool grow) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("invalid JSON: ") + e.what(), n);
  }
  if (!j.is_object()) throw DataError("record is not an object", n);
  if (!j.contains("tokens") || !j["tokens"].is_array()) {
    throw DataError("missing \"tokens\" array", n);
  }
  if (!j.contains("label") || !j["label"].is_number_integer() || j["label"].get<long long>() < 0) {
    throw DataError("\"label\" must be a non-negative integer", n);
  }
  Example ex;
  ex.label = j["label"].get<int>();
  for (const auto& t : j["tokens"]) {
    if (t.is_string()) {
      ex.tokens.push_back(grow ? vocab.add(t.get<std::string>())
                               : vocab.encode(t.get<std::string>()));
    } else if (t.is_number_integer() && !grow) {
      const auto id = t.get<long long>();
      if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
        throw DataError("token id " + std::to_string(id) + " outside vocabulary", n);
      }
      ex.tokens.push_back(static_cast<TokenId>(id));
    } else {
      throw DataError("tokens must be strings (or ids when a vocabulary is given)", n);
    }
  }
  if (ex.tokens.empty()) throw DataError("record has no tokens", n);
  if (j.contains("rationale") && !j["rationale"].is_null()) {
    const auto& r = j["rationale"];
    if (!r.is_array()) throw DataError("\"rationale\" must be an array", n);
    if (r.size() != ex.tokens.size()) {
      throw DataError("rationale length " + std::to_string(r.size()) +
                          " != token length " + std::to_string(ex.tokens.size()),
                      n);
    }
    Mask m;
    for (const auto& b : r) {
      if (!b.is_number_integer() || (b.get<int>() != 0 && b.get<int>() != 1)) {
        throw DataError("rationale entries must be 0 or 1", n);
      }
      m.push_back(static_cast<std::uint8_t>(b.get<int>()));
    }
    ex.rationale = std::move(m);
  }
  return ex;
}

}  // namespace

Corpus load_corpus(const std::filesystem::path& path, const Vocabulary* vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus " + path.string());
  Corpus c;
  const bool grow = vocab == nullptr;
  if (vocab) c.vocab = *vocab;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    c.examples.push_back(parse_record(line, n, c.vocab, grow));
  }
  return c;
}

void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write corpus " + path.string());
  for (const Example& e : corpus.examples) {
    nlohmann::ordered_json j;
    auto tokens = nlohmann::ordered_json::array();
    for (TokenId t : e.tokens) tokens.push_back(corpus.vocab.decode(t));
    j["tokens"] = std::move(tokens);
    j["label"] = e.label;
    if (e.rationale) {
      auto r = nlohmann::ordered_json::array();
      for (std::uint8_t b : *e.rationale) r.push_back(static_cast<int>(b));
      j["rationale"] = std::move(r);
    }
    out << j.dump() << '\n';
  }
}

void validate(const SynthConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError("synthetic corpus: " + m); };
  if (c.num_classes < 2) fail("need at least 2 classes");
  if (c.signal_set_size == 0) fail("signal set size must be positive");
  if (c.signals_per_example == 0) fail("signals per example must be positive");
  if (c.min_length == 0 || c.min_length > c.max_length) fail("invalid length range");
  if (c.signals_per_example >= c.min_length) {
    fail("signals per example (" + std::to_string(c.signals_per_example) +
         ") must be below the minimum length (" + std::to_string(c.min_length) + ")");
  }
  if (c.vocab_size <= static_cast<std::size_t>(c.num_classes) * c.signal_set_size) {
    fail("vocabulary too small for the signal sets plus at least one neutral token");
  }
  if (c.noise == NoiseDistribution::kZipf && !(c.zipf_exponent > 0)) {
    fail("zipf exponent must be positive");
  }
}

Vocabulary synthetic_vocabulary(const SynthConfig& c) {
  validate(c);
  Vocabulary v;
  for (int k = 0; k < c.num_classes; ++k)
    for (std::size_t j = 0; j < c.signal_set_size; ++j)
      v.add("c" + std::to_string(k) + "_s" + std::to_string(j));
  const std::size_t neutral = c.vocab_size - static_cast<std::size_t>(c.num_classes) * c.signal_set_size;
  for (std::size_t j = 0; j < neutral; ++j) v.add("w" + std::to_string(j));
  return v;
}

std::vector<TokenId> signal_tokens(const SynthConfig& c, const Vocabulary& vocab, int cls) {
  std::vector<TokenId> out;
  for (std::size_t j = 0; j < c.signal_set_size; ++j)
    out.push_back(vocab.encode("c" + std::to_string(cls) + "_s" + std::to_string(j)));
  return out;
}

Corpus generate_synthetic(const SynthConfig& c) {
  Corpus corpus;
  corpus.vocab = synthetic_vocabulary(c);
  const auto first_neutral =
      static_cast<TokenId>(2 + static_cast<std::size_t>(c.num_classes) * c.signal_set_size);
  const std::size_t neutral = corpus.vocab.size() - static_cast<std::size_t>(first_neutral);

  std::vector<double> cdf;
  if (c.noise == NoiseDistribution::kZipf) {
    double acc = 0.0;
    for (std::size_t r = 0; r < neutral; ++r) {
      acc += 1.0 / std::pow(static_cast<double>(r + 1), c.zipf_exponent);
      cdf.push_back(acc);
    }
    for (double& v : cdf) v /= acc;
  }

  Rng rng(derive_seed(c.seed, 0x5e7));
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < c.num_examples; ++i) {
    Example ex;
    ex.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.num_classes)));
    const std::size_t len = c.min_length + rng.below(c.max_length - c.min_length + 1);
    ex.tokens.resize(len);
    for (TokenId& t : ex.tokens) {
      std::size_t r;
      if (cdf.empty()) {
        r = rng.below(neutral);
      } else {
        r = static_cast<std::size_t>(
            std::upper_bound(cdf.begin(), cdf.end(), rng.uniform()) - cdf.begin());
        r = std::min(r, neutral - 1);
      }
      t = first_neutral + static_cast<TokenId>(r);
    }
    positions.resize(len);
    for (std::size_t p = 0; p < len; ++p) positions[p] = p;
    Mask gold(len, 0);
    const auto class_base =
        static_cast<TokenId>(2 + static_cast<std::size_t>(ex.label) * c.signal_set_size);
    for (std::size_t k = 0; k < c.signals_per_example; ++k) {
      std::swap(positions[k], positions[k + rng.below(len - k)]);
      const std::size_t pos = positions[k];
      ex.tokens[pos] = class_base + static_cast<TokenId>(rng.below(c.signal_set_size));
      gold[pos] = 1;
    }
    ex.rationale = std::move(gold);
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

std::size_t Batch::length_of(std::size_t b) const {
  std::size_t n = 0;
  for (std::size_t p = 0; p < length; ++p) n += valid[b * length + p] != 0.0;
  return n;
}

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices) {
  Batch b;
  b.size = indices.size();
  for (std::size_t i : indices) b.length = std::max(b.length, corpus.examples.at(i).tokens.size());
  b.tokens.assign(b.size * b.length, Vocabulary::kPad);
  b.valid = Tensor(Shape{b.size, b.length});
  bool gold = true;
  for (std::size_t r = 0; r < b.size; ++r) {
    const Example& ex = corpus.examples[indices[r]];
    std::copy(ex.tokens.begin(), ex.tokens.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(r * b.length));
    for (std::size_t p = 0; p < ex.tokens.size(); ++p) b.valid[r * b.length + p] = 1.0;
    b.labels.push_back(ex.label);
    b.index.push_back(indices[r]);
    gold = gold && ex.rationale.has_value();
  }
  if (gold) {
    for (std::size_t i : indices) b.gold.push_back(*corpus.examples[i].rationale);
  }
  return b;
}

std::vector<std::vector<std::size_t>> sequential_batch_indices(std::size_t n, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> chunk;
    for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) chunk.push_back(i);
    out.push_back(std::move(chunk));
  }
  return out;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0xba7c0000ULL + epoch));
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  }
  return out;
}

std::vector<Batch> batch_iterator(const Corpus& corpus, std::size_t batch_size,
                                  std::uint64_t seed, std::uint64_t epoch) {
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(corpus.size(), batch_size, seed, epoch)) {
    out.push_back(make_batch(corpus, idx));
  }
  return out;
}

}  // namespace dmr
