#include "dmr/training.hpp"

#include <chrono>
#include <cmath>

#include "dmr/error.hpp"
#include "dmr/rng.hpp"

namespace dmr {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd|adam)");
}

Optimizer::Optimizer(OptimizerConfig config, const ParameterSet& params) : config_(config) {
  if (!(config_.learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (config_.kind == OptimizerKind::kAdam) {
    if (!(config_.beta1 >= 0.0 && config_.beta1 < 1.0 && config_.beta2 >= 0.0 &&
          config_.beta2 < 1.0 && config_.epsilon > 0.0)) {
      throw ConfigError("invalid Adam hyperparameters");
    }
    for (const Parameter& p : params) {
      first_.emplace_back(p.value.shape);
      second_.emplace_back(p.value.shape);
    }
  }
}

void Optimizer::step(ParameterSet& params) {
  for (const Parameter& p : params) {
    for (double g : p.grad.data) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter " + p.name);
    }
  }
  ++steps_;
  const double lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::kSgd) {
    for (Parameter& p : params)
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] -= lr * p.grad[i];
    return;
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = params[k];
    Tensor& m = first_[k];
    Tensor& v = second_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      p.value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.epsilon);
    }
  }
}

void validate(const TrainConfig& c) {
  validate(c.weights);
  if (c.batch_size == 0) throw ConfigError("batch size must be positive");
  if (c.weights.feature_matching > 0.0 && c.batch_size < 2) {
    throw ConfigError("feature matching (lambda3 > 0) needs batch size >= 2");
  }
  if (!(c.optimizer.learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (c.target_sparsity && !(*c.target_sparsity > 0.0 && *c.target_sparsity < 1.0)) {
    throw ConfigError("target sparsity must lie in (0, 1)");
  }
}

namespace {

nlohmann::ordered_json opt(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json();
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericalError(std::string("non-finite ") + what);
}

// Running means of the per-batch terms of one epoch.
struct Accumulator {
  double sum = 0.0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  void add(const std::optional<double>& v) {
    if (v) add(*v);
  }
  std::optional<double> mean() const {
    return n ? std::optional<double>(sum / static_cast<double>(n)) : std::nullopt;
  }
};

using Clock = std::chrono::steady_clock;

}  // namespace

nlohmann::ordered_json EpochRecord::to_json() const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["epoch"] = epoch;
  j["l_cls"] = cls;
  j["omega"] = opt(omega);
  j["l_fm"] = opt(fm);
  j["l_om"] = opt(om);
  j["train_accuracy"] = opt(train_accuracy);
  j["sparsity"] = opt(sparsity);
  j["target_sparsity"] = opt(target_sparsity);
  j["generator_leak"] = opt(generator_leak);
  j["teacher_leak"] = opt(teacher_leak);
  j["classifier_leak"] = opt(classifier_leak);
  j["validation"] = validation ? validation->to_json() : nlohmann::ordered_json();
  if (seconds) j["seconds"] = *seconds;
  return j;
}

std::string TrainReport::to_jsonl() const {
  std::string out;
  for (const EpochRecord& e : epochs) out += e.to_json().dump() + "\n";
  return out;
}

TeacherResult pretrain_teacher(const Corpus& corpus, const ClassifierConfig& model,
                               const TrainConfig& config) {
  if (corpus.empty()) throw Error("pretrain_teacher: empty corpus");
  validate(config);
  TeacherResult r{Classifier(model, "teacher", derive_seed(config.seed, 1)), {}};
  Classifier& teacher = r.teacher;
  Optimizer optimizer(config.optimizer, teacher.params());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = Clock::now();
    Accumulator cls;
    std::size_t correct = 0;
    for (const auto& idx : batch_indices(corpus.size(), config.batch_size, config.seed, epoch)) {
      const Batch batch = make_batch(corpus, idx);
      ad::Tape tape;
      BoundParams bound(tape, teacher.params(), true);
      const auto out = teacher.forward_full(bound, batch);
      ad::Var loss = classification_loss(out.probs, batch.labels);
      check_finite(loss.value().item(), "teacher loss");
      const auto pred = argmax_rows(out.probs.value());
      for (std::size_t i = 0; i < batch.size; ++i) correct += pred[i] == batch.labels[i];
      tape.backward(loss);
      teacher.params().zero_grad();
      bound.harvest_into(teacher.params());
      optimizer.step(teacher.params());
      cls.add(loss.value().item());
    }
    EpochRecord rec;
    rec.stage = "teacher";
    rec.epoch = epoch + 1;
    rec.cls = *cls.mean();
    rec.train_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(corpus.size());
    if (config.record_time) rec.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    r.report.epochs.push_back(std::move(rec));
  }
  return r;
}

JointResult train_joint(const Corpus& corpus, const Classifier* teacher,
                        const GeneratorConfig& gen_model, const ClassifierConfig& clf_model,
                        const TrainConfig& config, const Corpus* validation) {
  if (corpus.empty()) throw Error("train_joint: empty corpus");
  validate(config);
  if (gen_model.class_conditioning && config.label_source == LabelSource::kNone) {
    throw ConfigError("class-conditioned generator needs a label source (ground_truth|teacher)");
  }
  const bool need_teacher_labels = gen_model.class_conditioning &&
                                   config.label_source == LabelSource::kTeacher;
  if (!teacher && (config.weights.output_matching > 0.0 || need_teacher_labels)) {
    throw ConfigError("a pretrained teacher is required for lambda4 > 0 or teacher labels");
  }
  JointResult r{Generator(gen_model, derive_seed(config.seed, 2)),
                Classifier(clf_model, "classifier", derive_seed(config.seed, 3)),
                {}};
  Generator& gen = r.generator;
  Classifier& clf = r.classifier;
  const bool shared = gen_model.share_embedding;
  Optimizer gen_opt(config.optimizer, gen.params());
  Optimizer clf_opt(config.optimizer, clf.params());
  const LossWeights& w = config.weights;
  EvalConfig eval_config;
  eval_config.label_source = gen_model.class_conditioning ? config.label_source : LabelSource::kNone;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = Clock::now();
    Accumulator cls, omega, fm, om, selected, tokens;
    double gen_leak = 0.0, teacher_leak = 0.0, clf_leak = 0.0;
    const auto batches = batch_indices(corpus.size(), config.batch_size, config.seed, epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch batch = make_batch(corpus, batches[bi]);
      const std::uint64_t mask_seed = derive_seed(config.seed, (epoch << 32) ^ bi ^ 0x3a5cULL);

      // Classifier step: the mask is detached inside classifier_objective.
      // Generator and teacher are bound as trainable leaves so that any
      // gradient leaking into them is observable.
      ad::Tape ctape;
      BoundParams g1(ctape, gen.params(), true);
      BoundParams c1(ctape, clf.params(), true);
      std::optional<BoundParams> t1;
      std::optional<ad::Var> teacher_probs;
      if (teacher) {
        t1.emplace(ctape, teacher->params(), true);
        teacher_probs = teacher->forward_full(*t1, batch).probs;
      }
      std::vector<int> cond;
      if (gen_model.class_conditioning) {
        cond = need_teacher_labels ? argmax_rows(teacher_probs->value()) : batch.labels;
      }
      Rng rng1(mask_seed);
      const auto g_out = gen.forward(g1, batch, cond, config.mask_mode, &rng1,
                                     shared ? std::optional(clf.embedding(c1)) : std::nullopt);
      LossWeights batch_w = w;
      if (batch.size < 2) batch_w.feature_matching = 0.0;  // CMD needs two samples
      const ObjectiveTerms ct =
          classifier_objective(batch, g_out.mask, clf, c1, teacher_probs, batch_w);
      check_finite(ct.total.value().item(), "classifier objective");
      ctape.backward(ct.total);
      gen_leak = std::max(gen_leak, g1.max_abs_grad());
      if (t1) teacher_leak = std::max(teacher_leak, t1->max_abs_grad());
      clf.params().zero_grad();
      c1.harvest_into(clf.params());
      clf_opt.step(clf.params());

      // Generator step on the same mask sample, classifier frozen.
      ad::Tape gtape;
      BoundParams g2(gtape, gen.params(), true);
      BoundParams c2(gtape, clf.params(), false);
      Rng rng2(mask_seed);
      const auto g_out2 = gen.forward(g2, batch, cond, config.mask_mode, &rng2,
                                      shared ? std::optional(clf.embedding(c2)) : std::nullopt);
      const ObjectiveTerms gt = generator_objective(batch, g_out2.mask, clf, c2, w);
      check_finite(gt.total.value().item(), "generator objective");
      gtape.backward(gt.total);
      clf_leak = std::max(clf_leak, c2.max_abs_grad());
      gen.params().zero_grad();
      g2.harvest_into(gen.params());
      gen_opt.step(gen.params());

      cls.add(ct.cls);
      omega.add(gt.omega);
      fm.add(ct.fm);
      om.add(ct.om);
      double sel = 0.0;
      for (double v : g_out.mask.value().data) sel += v;
      selected.add(sel);
      double real = 0.0;
      for (double v : batch.valid.data) real += v;
      tokens.add(real);
    }
    EpochRecord rec;
    rec.stage = "joint";
    rec.epoch = epoch + 1;
    rec.cls = *cls.mean();
    rec.omega = omega.mean();
    rec.fm = fm.mean();
    rec.om = om.mean();
    rec.sparsity = 100.0 * selected.sum / tokens.sum;
    if (config.target_sparsity) rec.target_sparsity = 100.0 * *config.target_sparsity;
    rec.generator_leak = gen_leak;
    if (teacher) rec.teacher_leak = teacher_leak;
    rec.classifier_leak = clf_leak;
    if (validation && !validation->empty()) {
      rec.validation = evaluate_run(gen, clf, teacher, *validation, eval_config);
    }
    if (config.record_time) rec.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    r.report.epochs.push_back(std::move(rec));
  }
  return r;
}

}  // namespace dmr
