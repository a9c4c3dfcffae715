#include "dmr/model.hpp"

#include <cmath>
#include <cstdio>

#include "dmr/error.hpp"
#include "dmr/rng.hpp"

namespace dmr {

std::string to_string(Pooling p) { return p == Pooling::kMax ? "max" : "mean"; }

Pooling parse_pooling(const std::string& s) {
  if (s == "max") return Pooling::kMax;
  if (s == "mean") return Pooling::kMean;
  throw ConfigError("unknown pooling '" + s + "' (expected max|mean)");
}

std::string to_string(MaskMode m) {
  return m == MaskMode::kStochastic ? "stochastic" : "threshold";
}

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "stochastic") return MaskMode::kStochastic;
  if (s == "threshold") return MaskMode::kThreshold;
  throw ConfigError("unknown mask mode '" + s + "' (expected stochastic|threshold)");
}

std::string to_string(LabelSource s) {
  switch (s) {
    case LabelSource::kGroundTruth: return "ground_truth";
    case LabelSource::kTeacher: return "teacher";
    case LabelSource::kNone: return "none";
  }
  return "?";
}

LabelSource parse_label_source(const std::string& s) {
  if (s == "ground_truth" || s == "gold") return LabelSource::kGroundTruth;
  if (s == "teacher" || s == "teacher_predicted") return LabelSource::kTeacher;
  if (s == "none") return LabelSource::kNone;
  throw ConfigError("unknown label source '" + s + "' (expected ground_truth|teacher|none)");
}

namespace {

Tensor uniform_tensor(Shape shape, double limit, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(-limit, limit);
  return t;
}

Tensor glorot(std::size_t in, std::size_t out, Rng& rng) {
  return uniform_tensor(Shape{in, out}, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
}

// Rows have unit expected squared norm; row 0 (padding) is zero.
Tensor embedding_table(std::size_t vocab, std::size_t dim, Rng& rng) {
  if (vocab < 2) throw ConfigError("vocabulary must hold at least the two reserved ids");
  Tensor t = uniform_tensor(Shape{vocab, dim}, std::sqrt(3.0 / static_cast<double>(dim)), rng);
  std::fill_n(t.data.begin(), dim, 0.0);
  return t;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t meta_size(const Checkpoint& c, const std::string& key) {
  return static_cast<std::size_t>(std::stoull(c.meta_value(key)));
}

bool meta_bool(const Checkpoint& c, const std::string& key) {
  return c.meta_value(key) == "true";
}

void restore(ParameterSet& params, const Checkpoint& ckpt) {
  for (Parameter& p : params) {
    const Tensor& t = ckpt.array(p.name);
    if (t.shape != p.value.shape) {
      throw DataError("checkpoint array " + p.name + " has shape " + shape_string(t.shape) +
                      ", expected " + shape_string(p.value.shape));
    }
    p.value = t;
  }
}

void check_encoder_kind(const Checkpoint& ckpt, const std::string& key) {
  const std::string& kind = ckpt.meta_value(key);
  if (kind != "feedforward") throw DataError("unsupported encoder kind " + kind);
}

}  // namespace

FeedForwardEncoder::FeedForwardEncoder(ParameterSet& params, const std::string& prefix,
                                       std::size_t input_dim, std::size_t hidden_dim, Rng& rng)
    : hidden_dim_(hidden_dim) {
  weight_ = params.add(prefix + ".encoder.weight", glorot(input_dim, hidden_dim, rng));
  bias_ = params.add(prefix + ".encoder.bias", Tensor(Shape{hidden_dim}));
}

ad::Var FeedForwardEncoder::encode(const BoundParams& params, ad::Var inputs,
                                   const Tensor& /*valid*/) const {
  return ad::tanh(ad::add(ad::matmul(inputs, params[weight_]), params[bias_]));
}

// --- Generator ---------------------------------------------------------------

Generator::Generator(GeneratorConfig config, std::uint64_t seed) : config_(config) {
  build(seed);
}

Generator::Generator(const Generator& o)
    : config_(o.config_), params_(o.params_), encoder_(o.encoder_->clone()),
      embedding_(o.embedding_), head_w_(o.head_w_), head_b_(o.head_b_) {}

Generator& Generator::operator=(const Generator& o) {
  if (this != &o) *this = Generator(o);
  return *this;
}

void Generator::build(std::uint64_t seed) {
  if (config_.num_classes < 2) throw ConfigError("generator needs at least 2 classes");
  Rng rng(derive_seed(seed, 0x6e0));
  embedding_ = ad::kNoRow;
  if (!config_.share_embedding) {
    embedding_ = params_.add("generator.embedding",
                             embedding_table(config_.vocab_size, config_.embed_dim, rng));
  }
  const std::size_t in =
      config_.embed_dim + (config_.class_conditioning ? static_cast<std::size_t>(config_.num_classes) : 0);
  encoder_ = std::make_unique<FeedForwardEncoder>(params_, "generator", in, config_.hidden_dim, rng);
  head_w_ = params_.add("generator.head.weight",
                        config_.zero_head ? Tensor(Shape{config_.hidden_dim, 1})
                                          : glorot(config_.hidden_dim, 1, rng));
  head_b_ = params_.add("generator.head.bias", Tensor(Shape{1}));
}

Generator::Output Generator::forward(const BoundParams& params, const Batch& batch,
                                     std::span<const int> condition, MaskMode mode, Rng* rng,
                                     std::optional<ad::Var> embedding) const {
  ad::Tape& tape = params[head_b_].tape();
  const std::size_t b = batch.size, l = batch.length;
  if (!embedding) {
    if (embedding_ == ad::kNoRow) throw Error("generator shares an embedding table; none was supplied");
    embedding = params[embedding_];
  }
  ad::Var x = ad::gather_rows(*embedding, batch.tokens, Shape{b, l}, Vocabulary::kPad);
  if (config_.class_conditioning) {
    if (condition.size() != b) {
      throw Error("generator: class conditioning needs one label per example (got " +
                  std::to_string(condition.size()) + " for " + std::to_string(b) + ")");
    }
    const auto c = static_cast<std::size_t>(config_.num_classes);
    Tensor onehot(Shape{b, l, c});
    for (std::size_t i = 0; i < b; ++i) {
      if (condition[i] < 0 || condition[i] >= config_.num_classes) {
        throw Error("generator: conditioning label " + std::to_string(condition[i]) + " out of range");
      }
      for (std::size_t p = 0; p < l; ++p)
        onehot[(i * l + p) * c + static_cast<std::size_t>(condition[i])] = 1.0;
    }
    x = ad::concat_last(x, tape.constant(std::move(onehot)));
  }
  ad::Var h = encoder_->encode(params, x, batch.valid);
  ad::Var scores = ad::reshape(ad::add(ad::matmul(h, params[head_w_]), params[head_b_]), Shape{b, l});
  ad::Var probs = ad::sigmoid(scores);
  ad::Var z;
  if (mode == MaskMode::kThreshold) {
    z = ad::straight_through(probs, config_.threshold);
  } else {
    if (!rng) throw Error("generator: stochastic mode needs a random stream");
    z = ad::straight_through_sample(probs, *rng);
  }
  z = ad::mul(z, tape.constant(batch.valid));
  return {probs, z};
}

std::vector<Mask> Generator::infer_masks(const Batch& batch, std::span<const int> condition,
                                         const ParameterSet* shared_embedding) const {
  ad::Tape tape;
  BoundParams bound(tape, params_, false);
  std::optional<ad::Var> emb;
  if (config_.share_embedding) {
    if (!shared_embedding) throw Error("generator shares an embedding table; none was supplied");
    emb = tape.constant(shared_embedding->at("classifier.embedding").value);
  }
  Output out = forward(bound, batch, condition, MaskMode::kThreshold, nullptr, emb);
  const Tensor& z = out.mask.value();
  std::vector<Mask> masks;
  for (std::size_t i = 0; i < batch.size; ++i) {
    const std::size_t len = batch.length_of(i);
    Mask m(len);
    for (std::size_t p = 0; p < len; ++p) m[p] = z[i * batch.length + p] != 0.0;
    masks.push_back(std::move(m));
  }
  return masks;
}

void Generator::save(Checkpoint& ckpt) const {
  ckpt.meta["generator.vocab_size"] = std::to_string(config_.vocab_size);
  ckpt.meta["generator.embed_dim"] = std::to_string(config_.embed_dim);
  ckpt.meta["generator.hidden_dim"] = std::to_string(config_.hidden_dim);
  ckpt.meta["generator.num_classes"] = std::to_string(config_.num_classes);
  ckpt.meta["generator.class_conditioning"] = config_.class_conditioning ? "true" : "false";
  ckpt.meta["generator.share_embedding"] = config_.share_embedding ? "true" : "false";
  ckpt.meta["generator.threshold"] = fmt_double(config_.threshold);
  ckpt.meta["generator.encoder"] = encoder_->kind();
  for (const Parameter& p : params_) ckpt.arrays.emplace_back(p.name, p.value);
}

Generator Generator::load(const Checkpoint& ckpt) {
  GeneratorConfig c;
  c.vocab_size = meta_size(ckpt, "generator.vocab_size");
  c.embed_dim = meta_size(ckpt, "generator.embed_dim");
  c.hidden_dim = meta_size(ckpt, "generator.hidden_dim");
  c.num_classes = static_cast<int>(meta_size(ckpt, "generator.num_classes"));
  c.class_conditioning = meta_bool(ckpt, "generator.class_conditioning");
  c.share_embedding = meta_bool(ckpt, "generator.share_embedding");
  c.threshold = std::stod(ckpt.meta_value("generator.threshold"));
  check_encoder_kind(ckpt, "generator.encoder");
  Generator g(c, 0);
  restore(g.params_, ckpt);
  return g;
}

// --- Classifier --------------------------------------------------------------

Classifier::Classifier(ClassifierConfig config, std::string role, std::uint64_t seed)
    : config_(config), role_(std::move(role)) {
  build(seed);
}

Classifier::Classifier(const Classifier& o)
    : config_(o.config_), role_(o.role_), params_(o.params_), encoder_(o.encoder_->clone()),
      embedding_(o.embedding_), feature_w_(o.feature_w_), feature_b_(o.feature_b_),
      out_w_(o.out_w_), out_b_(o.out_b_) {}

Classifier& Classifier::operator=(const Classifier& o) {
  if (this != &o) *this = Classifier(o);
  return *this;
}

void Classifier::build(std::uint64_t seed) {
  if (config_.num_classes < 2) throw ConfigError("classifier needs at least 2 classes");
  if (role_.empty() || role_.find_first_of(" \t\n.") != std::string::npos) {
    throw ConfigError("invalid classifier role '" + role_ + "'");
  }
  Rng rng(derive_seed(seed, 0xc1a));
  embedding_ = params_.add(role_ + ".embedding",
                           embedding_table(config_.vocab_size, config_.embed_dim, rng));
  encoder_ = std::make_unique<FeedForwardEncoder>(params_, role_, config_.embed_dim,
                                                  config_.hidden_dim, rng);
  feature_w_ = params_.add(role_ + ".feature.weight",
                           glorot(config_.hidden_dim, config_.feature_dim, rng));
  feature_b_ = params_.add(role_ + ".feature.bias", Tensor(Shape{config_.feature_dim}));
  const auto c = static_cast<std::size_t>(config_.num_classes);
  out_w_ = params_.add(role_ + ".output.weight", glorot(config_.feature_dim, c, rng));
  out_b_ = params_.add(role_ + ".output.bias", Tensor(Shape{c}));
}

Classifier::Output Classifier::forward(const BoundParams& params, const Batch& batch,
                                       ad::Var mask) const {
  const std::size_t b = batch.size, l = batch.length;
  ad::Var x = ad::gather_rows(params[embedding_], batch.tokens, Shape{b, l}, Vocabulary::kPad);
  ad::Var masked = ad::scale_rows(x, mask);
  ad::Var h = encoder_->encode(params, masked, batch.valid);
  ad::Var pooled = config_.pooling == Pooling::kMax ? ad::masked_max_pool(h, batch.valid)
                                                    : ad::masked_mean_pool(h, batch.valid);
  ad::Var features = ad::sigmoid(ad::add(ad::matmul(pooled, params[feature_w_]), params[feature_b_]));
  ad::Var probs = ad::softmax(ad::add(ad::matmul(features, params[out_w_]), params[out_b_]));
  return {features, probs};
}

Classifier::Output Classifier::forward_full(const BoundParams& params, const Batch& batch) const {
  ad::Tape& tape = params[out_b_].tape();
  return forward(params, batch, tape.constant(Tensor(Shape{batch.size, batch.length}, 1.0)));
}

Tensor Classifier::predict(const Batch& batch, std::span<const Mask> masks) const {
  ad::Tape tape;
  BoundParams bound(tape, params_, false);
  if (masks.empty()) return forward_full(bound, batch).probs.value();
  return forward(bound, batch, tape.constant(pad_masks(batch, masks))).probs.value();
}

void Classifier::save(Checkpoint& ckpt) const {
  const std::string& r = role_;
  ckpt.meta[r + ".vocab_size"] = std::to_string(config_.vocab_size);
  ckpt.meta[r + ".embed_dim"] = std::to_string(config_.embed_dim);
  ckpt.meta[r + ".hidden_dim"] = std::to_string(config_.hidden_dim);
  ckpt.meta[r + ".feature_dim"] = std::to_string(config_.feature_dim);
  ckpt.meta[r + ".num_classes"] = std::to_string(config_.num_classes);
  ckpt.meta[r + ".pooling"] = to_string(config_.pooling);
  ckpt.meta[r + ".encoder"] = encoder_->kind();
  for (const Parameter& p : params_) ckpt.arrays.emplace_back(p.name, p.value);
}

Classifier Classifier::load(const Checkpoint& ckpt, const std::string& role) {
  ClassifierConfig c;
  c.vocab_size = meta_size(ckpt, role + ".vocab_size");
  c.embed_dim = meta_size(ckpt, role + ".embed_dim");
  c.hidden_dim = meta_size(ckpt, role + ".hidden_dim");
  c.feature_dim = meta_size(ckpt, role + ".feature_dim");
  c.num_classes = static_cast<int>(meta_size(ckpt, role + ".num_classes"));
  c.pooling = parse_pooling(ckpt.meta_value(role + ".pooling"));
  check_encoder_kind(ckpt, role + ".encoder");
  Classifier clf(c, role, 0);
  restore(clf.params_, ckpt);
  return clf;
}

std::vector<int> argmax_rows(const Tensor& probs) {
  std::vector<int> out;
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    auto row = probs.row(r);
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
      if (row[j] > row[best]) best = j;
    out.push_back(static_cast<int>(best));
  }
  return out;
}

Tensor pad_masks(const Batch& batch, std::span<const Mask> masks) {
  if (masks.size() != batch.size) {
    throw ShapeError("pad_masks: " + std::to_string(masks.size()) + " masks for batch of " +
                     std::to_string(batch.size));
  }
  Tensor t(Shape{batch.size, batch.length});
  for (std::size_t i = 0; i < batch.size; ++i) {
    if (masks[i].size() != batch.length_of(i)) {
      throw ShapeError("pad_masks: mask " + std::to_string(i) + " has length " +
                       std::to_string(masks[i].size()) + ", example has " +
                       std::to_string(batch.length_of(i)) + " tokens");
    }
    for (std::size_t p = 0; p < masks[i].size(); ++p) t[i * batch.length + p] = masks[i][p];
  }
  return t;
}

}  // namespace dmr
