#pragma once

// The three networks: rationale generator, student classifier and teacher
// classifier. All share one token encoder design (embedding lookup followed by
// a per-token tanh layer); the classifier pools the encoded sequence, maps it
// through a sigmoid feature layer and a softmax output layer.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmr/autodiff.hpp"
#include "dmr/checkpoint.hpp"
#include "dmr/data.hpp"
#include "dmr/params.hpp"

namespace dmr {

enum class Pooling { kMax, kMean };
enum class MaskMode { kStochastic, kThreshold };
// Which label the class-conditioned generator is given.
enum class LabelSource { kGroundTruth, kTeacher, kNone };

std::string to_string(Pooling p);
Pooling parse_pooling(const std::string& s);
std::string to_string(MaskMode m);
MaskMode parse_mask_mode(const std::string& s);
std::string to_string(LabelSource s);
LabelSource parse_label_source(const std::string& s);

// Maps per-token input vectors [B, L, in] to hidden states [B, L, H].
// Implementations register their weights in the owning network's
// ParameterSet; `kind()` is stored in checkpoints.
class SequenceEncoder {
 public:
  virtual ~SequenceEncoder() = default;
  virtual std::string kind() const = 0;
  virtual std::size_t output_dim() const = 0;
  virtual ad::Var encode(const BoundParams& params, ad::Var inputs,
                         const Tensor& valid) const = 0;
  virtual std::unique_ptr<SequenceEncoder> clone() const = 0;
};

// h_t = tanh(x_t W + b), applied independently at every position.
class FeedForwardEncoder final : public SequenceEncoder {
 public:
  FeedForwardEncoder(ParameterSet& params, const std::string& prefix,
                     std::size_t input_dim, std::size_t hidden_dim, Rng& rng);

  std::string kind() const override { return "feedforward"; }
  std::size_t output_dim() const override { return hidden_dim_; }
  ad::Var encode(const BoundParams& params, ad::Var inputs,
                 const Tensor& valid) const override;
  std::unique_ptr<SequenceEncoder> clone() const override {
    return std::make_unique<FeedForwardEncoder>(*this);
  }

 private:
  std::size_t weight_ = 0, bias_ = 0, hidden_dim_ = 0;
};

struct GeneratorConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 32;
  int num_classes = 2;
  // Concatenates a one-hot class label to every token embedding.
  bool class_conditioning = false;
  // Reads token embeddings from the classifier's table instead of its own.
  bool share_embedding = false;
  double threshold = 0.5;
  // Start the scoring head at zero so every token begins at p = 0.5.
  bool zero_head = true;
};

class Generator {
 public:
  Generator(GeneratorConfig config, std::uint64_t seed);
  Generator(const Generator& other);
  Generator& operator=(const Generator& other);
  Generator(Generator&&) noexcept = default;
  Generator& operator=(Generator&&) noexcept = default;

  struct Output {
    ad::Var probs;  // [B, L] selection probabilities
    ad::Var mask;   // [B, L] binary, 0 at padding
  };

  // `condition` holds one class id per example and is required iff class
  // conditioning is on. `rng` is required in stochastic mode. `embedding`
  // overrides the generator's own table (shared-embedding setups).
  Output forward(const BoundParams& params, const Batch& batch,
                 std::span<const int> condition, MaskMode mode, Rng* rng,
                 std::optional<ad::Var> embedding = std::nullopt) const;

  // Threshold-mode masks per example, unpadded.
  std::vector<Mask> infer_masks(const Batch& batch, std::span<const int> condition,
                                const ParameterSet* shared_embedding = nullptr) const;

  const GeneratorConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  void save(Checkpoint& ckpt) const;
  static Generator load(const Checkpoint& ckpt);

 private:
  Generator() = default;
  void build(std::uint64_t seed);

  GeneratorConfig config_;
  ParameterSet params_;
  std::unique_ptr<SequenceEncoder> encoder_;
  std::size_t embedding_ = 0, head_w_ = 0, head_b_ = 0;
};

struct ClassifierConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 32;
  std::size_t feature_dim = 100;
  int num_classes = 2;
  Pooling pooling = Pooling::kMax;
};

class Classifier {
 public:
  // `role` prefixes parameter names ("classifier", "teacher").
  Classifier(ClassifierConfig config, std::string role, std::uint64_t seed);
  Classifier(const Classifier& other);
  Classifier& operator=(const Classifier& other);
  Classifier(Classifier&&) noexcept = default;
  Classifier& operator=(Classifier&&) noexcept = default;

  struct Output {
    ad::Var features;  // [B, feature_dim], entries in [0, 1]
    ad::Var probs;     // [B, num_classes]
  };

  // Classifies z ⊙ e(x) for mask z: [B, L].
  Output forward(const BoundParams& params, const Batch& batch, ad::Var mask) const;
  // Full-text pass: the all-ones mask.
  Output forward_full(const BoundParams& params, const Batch& batch) const;

  // Class probabilities without recording gradients. `masks` are unpadded
  // per-example masks; empty means full text.
  Tensor predict(const Batch& batch, std::span<const Mask> masks = {}) const;

  ad::Var embedding(const BoundParams& params) const { return params[embedding_]; }
  std::size_t embedding_index() const { return embedding_; }

  const ClassifierConfig& config() const { return config_; }
  const std::string& role() const { return role_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  void save(Checkpoint& ckpt) const;
  static Classifier load(const Checkpoint& ckpt, const std::string& role);

 private:
  Classifier() = default;
  void build(std::uint64_t seed);

  ClassifierConfig config_;
  std::string role_;
  ParameterSet params_;
  std::unique_ptr<SequenceEncoder> encoder_;
  std::size_t embedding_ = 0, feature_w_ = 0, feature_b_ = 0, out_w_ = 0, out_b_ = 0;
};

// Index of the largest entry in each row; ties go to the lower class id.
std::vector<int> argmax_rows(const Tensor& probs);

// Padded [B, L] tensor from unpadded per-example masks.
Tensor pad_masks(const Batch& batch, std::span<const Mask> masks);

}  // namespace dmr
