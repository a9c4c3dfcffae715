#pragma once

// Two-stage training: the teacher is pretrained on full text with cross
// entropy; then, per batch, the student classifier takes one step on
// l_cls + λ3 l_fm + λ4 l_om (generator mask detached) and the generator takes
// one step on l_cls + Ω(z) (classifier frozen).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmr/data.hpp"
#include "dmr/eval.hpp"
#include "dmr/losses.hpp"
#include "dmr/model.hpp"

namespace dmr {

enum class OptimizerKind { kSgd, kAdam };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Optimizer {
 public:
  Optimizer(OptimizerConfig config, const ParameterSet& params);

  // Applies Parameter::grad to Parameter::value. Throws NumericalError naming
  // the parameter if any gradient is not finite; nothing is updated then.
  void step(ParameterSet& params);
  std::size_t steps() const { return steps_; }

 private:
  OptimizerConfig config_;
  std::vector<Tensor> first_, second_;
  std::size_t steps_ = 0;
};

struct TrainConfig {
  LossWeights weights;
  OptimizerConfig optimizer;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  MaskMode mask_mode = MaskMode::kStochastic;
  LabelSource label_source = LabelSource::kNone;
  // Reporting only: recorded next to the achieved sparsity.
  std::optional<double> target_sparsity;
  // Adds wall-clock seconds to every epoch record (breaks byte-identical
  // reports across runs).
  bool record_time = false;
};

// Throws ConfigError on invalid settings (including λ3 > 0 with a batch size
// below 2).
void validate(const TrainConfig& config);

struct EpochRecord {
  std::string stage;  // "teacher" or "joint"
  std::size_t epoch = 0;
  double cls = 0.0;
  std::optional<double> omega, fm, om;
  std::optional<double> train_accuracy;
  std::optional<double> sparsity;  // % of real tokens selected while training
  std::optional<double> target_sparsity;
  // Largest gradient that reached the generator / teacher from the classifier
  // objective; both must be exactly 0.
  std::optional<double> generator_leak, teacher_leak;
  // Largest gradient that reached the classifier from the generator objective.
  std::optional<double> classifier_leak;
  std::optional<EvalResult> validation;
  std::optional<double> seconds;

  nlohmann::ordered_json to_json() const;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;

  // One JSON object per line, one line per epoch.
  std::string to_jsonl() const;
};

struct TeacherResult {
  Classifier teacher;
  TrainReport report;
};

TeacherResult pretrain_teacher(const Corpus& corpus, const ClassifierConfig& model,
                               const TrainConfig& config);

struct JointResult {
  Generator generator;
  Classifier classifier;
  TrainReport report;
};

// `teacher` may be null when λ4 = 0 and the generator is not conditioned on
// teacher labels. `validation`, when given, is evaluated after every epoch.
JointResult train_joint(const Corpus& corpus, const Classifier* teacher,
                        const GeneratorConfig& gen_model, const ClassifierConfig& clf_model,
                        const TrainConfig& config, const Corpus* validation = nullptr);

}  // namespace dmr
