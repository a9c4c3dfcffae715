#pragma once

// Rationale quality (sparsity, token precision/recall/F1) and classification
// accuracy with generator rationales or full text.

#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "dmr/data.hpp"
#include "dmr/model.hpp"

namespace dmr {

// Percentages in [0, 100]. The headline numbers are micro-averaged over all
// real tokens of the corpus; the macro_* fields average per-example scores.
// Precision is 0 when nothing is selected, F1 is 0 when P + R == 0.
struct MetricsRecord {
  double sparsity = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> accuracy;
  std::size_t tokens = 0;
  std::size_t selected = 0;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;

  nlohmann::ordered_json to_json() const;
};

double f1_score(double precision, double recall);

// Throws ShapeError naming the example when lengths disagree.
MetricsRecord rationale_metrics(std::span<const Mask> predicted, std::span<const Mask> gold);

// Percentage of real tokens selected.
double sparsity_percent(std::span<const Mask> masks);

// Generator conditioning labels for a batch: gold labels, teacher argmax, or
// none (empty).
std::vector<int> condition_labels(const Batch& batch, LabelSource source,
                                  const Classifier* teacher);

enum class MaskSource { kGenerator, kAllOnes };

struct EvalConfig {
  LabelSource label_source = LabelSource::kNone;
  std::size_t batch_size = 256;
  // Batches are scored on this many threads; results do not depend on it.
  std::size_t workers = 1;
};

// Percent of examples whose argmax prediction (ties to the lower id) equals
// the label. kGenerator needs `gen` (and `teacher` for teacher labels).
// Throws on an empty corpus.
double classification_accuracy(const Classifier& clf, const Corpus& corpus, MaskSource source,
                               const Generator* gen = nullptr,
                               const Classifier* teacher = nullptr,
                               const EvalConfig& config = {});

// Mean -log p(y) of `clf` on generator rationales.
double mean_classification_loss(const Generator& gen, const Classifier& clf,
                                const Classifier* teacher, const Corpus& corpus,
                                const EvalConfig& config = {});

struct EvalResult {
  std::optional<MetricsRecord> metrics;  // absent without gold rationales
  std::vector<Mask> masks;               // threshold-mode, unpadded, corpus order
  double sparsity = 0.0;
  double accuracy_rationale = 0.0;
  double accuracy_full = 0.0;

  nlohmann::ordered_json to_json() const;
};

EvalResult evaluate_run(const Generator& gen, const Classifier& clf, const Classifier* teacher,
                        const Corpus& corpus, const EvalConfig& config = {});

}  // namespace dmr
