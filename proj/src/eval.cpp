#include "dmr/eval.hpp"

#include <cmath>
#include <thread>

#include "dmr/error.hpp"
#include "dmr/losses.hpp"

namespace dmr {

double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

nlohmann::ordered_json MetricsRecord::to_json() const {
  nlohmann::ordered_json j;
  j["sparsity"] = sparsity;
  j["precision"] = precision;
  j["recall"] = recall;
  j["f1"] = f1;
  j["macro_precision"] = macro_precision;
  j["macro_recall"] = macro_recall;
  j["macro_f1"] = macro_f1;
  j["accuracy"] = accuracy ? nlohmann::ordered_json(*accuracy) : nlohmann::ordered_json();
  j["tokens"] = tokens;
  j["selected"] = selected;
  j["tp"] = true_positives;
  j["fp"] = false_positives;
  j["fn"] = false_negatives;
  return j;
}

MetricsRecord rationale_metrics(std::span<const Mask> predicted, std::span<const Mask> gold) {
  if (predicted.size() != gold.size()) {
    throw ShapeError("rationale_metrics: " + std::to_string(predicted.size()) +
                     " predicted masks for " + std::to_string(gold.size()) + " gold masks");
  }
  MetricsRecord m;
  double sum_p = 0.0, sum_r = 0.0, sum_f = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i].size() != gold[i].size()) {
      throw ShapeError("rationale_metrics: example " + std::to_string(i) + " has " +
                       std::to_string(predicted[i].size()) + " predicted vs " +
                       std::to_string(gold[i].size()) + " gold entries");
    }
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t t = 0; t < predicted[i].size(); ++t) {
      const bool p = predicted[i][t] != 0, g = gold[i][t] != 0;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
    }
    m.tokens += predicted[i].size();
    m.selected += tp + fp;
    m.true_positives += tp;
    m.false_positives += fp;
    m.false_negatives += fn;
    const double p = tp + fp ? 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double r = tp + fn ? 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    sum_p += p;
    sum_r += r;
    sum_f += f1_score(p, r);
  }
  const auto pct = [](std::size_t num, std::size_t den) {
    return den ? 100.0 * static_cast<double>(num) / static_cast<double>(den) : 0.0;
  };
  m.sparsity = pct(m.selected, m.tokens);
  m.precision = pct(m.true_positives, m.true_positives + m.false_positives);
  m.recall = pct(m.true_positives, m.true_positives + m.false_negatives);
  m.f1 = f1_score(m.precision, m.recall);
  if (!predicted.empty()) {
    const auto n = static_cast<double>(predicted.size());
    m.macro_precision = sum_p / n;
    m.macro_recall = sum_r / n;
    m.macro_f1 = sum_f / n;
  }
  return m;
}

double sparsity_percent(std::span<const Mask> masks) {
  std::size_t tokens = 0, selected = 0;
  for (const Mask& m : masks) {
    tokens += m.size();
    for (std::uint8_t v : m) selected += v != 0;
  }
  return tokens ? 100.0 * static_cast<double>(selected) / static_cast<double>(tokens) : 0.0;
}

std::vector<int> condition_labels(const Batch& batch, LabelSource source, const Classifier* teacher) {
  switch (source) {
    case LabelSource::kGroundTruth: return batch.labels;
    case LabelSource::kTeacher:
      if (!teacher) throw ConfigError("teacher-predicted labels need a teacher");
      return argmax_rows(teacher->predict(batch));
    case LabelSource::kNone: return {};
  }
  return {};
}

namespace {

// Runs fn(batch_index, batch) over sequential batches on `workers` threads.
template <typename F>
void for_each_batch(const Corpus& corpus, const EvalConfig& config, F fn) {
  const auto chunks = sequential_batch_indices(corpus.size(), config.batch_size);
  const std::size_t workers = std::max<std::size_t>(1, std::min(config.workers, chunks.size()));
  auto run = [&](std::size_t w) {
    for (std::size_t b = w; b < chunks.size(); b += workers) fn(b, make_batch(corpus, chunks[b]));
  };
  if (workers == 1) {
    run(0);
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
}

const ParameterSet* shared_table(const Generator& gen, const Classifier& clf) {
  return gen.config().share_embedding ? &clf.params() : nullptr;
}

}  // namespace

double classification_accuracy(const Classifier& clf, const Corpus& corpus, MaskSource source,
                               const Generator* gen, const Classifier* teacher,
                               const EvalConfig& config) {
  if (corpus.empty()) throw Error("classification_accuracy: empty corpus");
  if (source == MaskSource::kGenerator && !gen) {
    throw ConfigError("classification_accuracy: generator masks need a generator");
  }
  const auto chunks = sequential_batch_indices(corpus.size(), config.batch_size);
  std::vector<std::size_t> correct(chunks.size(), 0);
  for_each_batch(corpus, config, [&](std::size_t b, const Batch& batch) {
    Tensor probs;
    if (source == MaskSource::kAllOnes) {
      probs = clf.predict(batch);
    } else {
      const auto cond = condition_labels(batch, config.label_source, teacher);
      const auto masks = gen->infer_masks(batch, cond, shared_table(*gen, clf));
      probs = clf.predict(batch, masks);
    }
    const auto pred = argmax_rows(probs);
    for (std::size_t i = 0; i < batch.size; ++i) correct[b] += pred[i] == batch.labels[i];
  });
  std::size_t total = 0;
  for (std::size_t c : correct) total += c;
  return 100.0 * static_cast<double>(total) / static_cast<double>(corpus.size());
}

double mean_classification_loss(const Generator& gen, const Classifier& clf,
                                const Classifier* teacher, const Corpus& corpus,
                                const EvalConfig& config) {
  if (corpus.empty()) throw Error("mean_classification_loss: empty corpus");
  const auto chunks = sequential_batch_indices(corpus.size(), config.batch_size);
  std::vector<double> sums(chunks.size(), 0.0);
  for_each_batch(corpus, config, [&](std::size_t b, const Batch& batch) {
    const auto cond = condition_labels(batch, config.label_source, teacher);
    const auto masks = gen.infer_masks(batch, cond, shared_table(gen, clf));
    const Tensor probs = clf.predict(batch, masks);
    for (std::size_t i = 0; i < batch.size; ++i) {
      const double p = probs[i * probs.cols() + static_cast<std::size_t>(batch.labels[i])];
      sums[b] -= std::log(std::max(p, ad::kLogFloor));
    }
  });
  double total = 0.0;
  for (double s : sums) total += s;
  return total / static_cast<double>(corpus.size());
}

nlohmann::ordered_json EvalResult::to_json() const {
  nlohmann::ordered_json j;
  j["sparsity"] = sparsity;
  j["metrics"] = metrics ? metrics->to_json() : nlohmann::ordered_json();
  j["accuracy_rationale"] = accuracy_rationale;
  j["accuracy_full"] = accuracy_full;
  return j;
}

EvalResult evaluate_run(const Generator& gen, const Classifier& clf, const Classifier* teacher,
                        const Corpus& corpus, const EvalConfig& config) {
  if (corpus.empty()) throw Error("evaluate_run: empty corpus");
  const auto chunks = sequential_batch_indices(corpus.size(), config.batch_size);
  std::vector<std::vector<Mask>> masks(chunks.size());
  std::vector<std::size_t> correct_rat(chunks.size(), 0), correct_full(chunks.size(), 0);
  for_each_batch(corpus, config, [&](std::size_t b, const Batch& batch) {
    const auto cond = condition_labels(batch, config.label_source, teacher);
    masks[b] = gen.infer_masks(batch, cond, shared_table(gen, clf));
    const auto pred_rat = argmax_rows(clf.predict(batch, masks[b]));
    const auto pred_full = argmax_rows(clf.predict(batch));
    for (std::size_t i = 0; i < batch.size; ++i) {
      correct_rat[b] += pred_rat[i] == batch.labels[i];
      correct_full[b] += pred_full[i] == batch.labels[i];
    }
  });
  EvalResult r;
  std::size_t rat = 0, full = 0;
  for (std::size_t b = 0; b < chunks.size(); ++b) {
    for (Mask& m : masks[b]) r.masks.push_back(std::move(m));
    rat += correct_rat[b];
    full += correct_full[b];
  }
  const auto n = static_cast<double>(corpus.size());
  r.accuracy_rationale = 100.0 * static_cast<double>(rat) / n;
  r.accuracy_full = 100.0 * static_cast<double>(full) / n;
  r.sparsity = sparsity_percent(r.masks);
  if (corpus.has_rationales()) {
    std::vector<Mask> gold;
    for (const Example& e : corpus.examples) gold.push_back(*e.rationale);
    MetricsRecord m = rationale_metrics(r.masks, gold);
    m.accuracy = r.accuracy_rationale;
    r.metrics = m;
  }
  return r;
}

}  // namespace dmr
