// Acceptance gate. Each test prints exactly one PASS/FAIL line for its
// criterion, then asserts on the same verdict.

#include <gtest/gtest.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "dmr/checkpoint.hpp"
#include "dmr/eval.hpp"
#include "dmr/losses.hpp"
#include "dmr/training.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

namespace ad = dmr::ad;
namespace fs = std::filesystem;
using dmr::Rng;
using dmr::Tensor;
using Clock = std::chrono::steady_clock;

namespace {

// Pipeline settings shared by the end-to-end criteria; the CLI defaults match.
constexpr std::size_t kTrain = 2000, kTest = 500;
constexpr std::uint64_t kDataSeed = 7;
constexpr std::size_t kTeacherEpochs = 5, kJointEpochs = 20;
constexpr double kLambda1 = 0.001;
constexpr std::uint64_t kSeeds[] = {1, 2, 3};

void verdict(int n, const std::string& title, bool ok, const std::string& detail) {
  std::printf("%s criterion %d (%s): %s\n", ok ? "PASS" : "FAIL", n, title.c_str(), detail.c_str());
  std::fflush(stdout);
  EXPECT_TRUE(ok) << "criterion " << n << ": " << detail;
}

std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor unit_batch(Rng& rng, std::size_t n, std::size_t d) {
  return gradcheck::random_tensor(rng, {n, d}, 0.0, 1.0);
}

oracle::Matrix rows(const Tensor& t) {
  oracle::Matrix m(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) m[i].assign(t.row(i).begin(), t.row(i).end());
  return m;
}

double value_of(const std::function<ad::Var(ad::Tape&)>& f) {
  ad::Tape t;
  return f(t).value().item();
}

// ---- the shared study -------------------------------------------------------

enum class Variant { kFull, kNoFm, kNoFmNoOm };

const char* name_of(Variant v) {
  switch (v) {
    case Variant::kFull: return "DMR";
    case Variant::kNoFm: return "-fm";
    case Variant::kNoFmNoOm: return "-fm&om";
  }
  return "";
}

struct Data {
  dmr::Corpus train, test;
};

const Data& data() {
  static const Data d = [] {
    dmr::SynthConfig sc;
    sc.num_examples = kTrain + kTest;
    sc.seed = kDataSeed;
    dmr::Corpus all = dmr::generate_synthetic(sc);
    Data out;
    out.train.vocab = out.test.vocab = all.vocab;
    out.train.examples.assign(all.examples.begin(), all.examples.begin() + kTrain);
    out.test.examples.assign(all.examples.begin() + kTrain, all.examples.end());
    return out;
  }();
  return d;
}

dmr::ClassifierConfig classifier_config() {
  dmr::ClassifierConfig c;
  c.vocab_size = data().train.vocab.size();
  c.num_classes = data().train.num_classes();
  return c;
}

dmr::GeneratorConfig generator_config() {
  dmr::GeneratorConfig g;
  g.vocab_size = data().train.vocab.size();
  g.num_classes = data().train.num_classes();
  return g;
}

dmr::TrainConfig teacher_config(std::uint64_t seed) {
  dmr::TrainConfig c;
  c.epochs = kTeacherEpochs;
  c.seed = seed;
  return c;
}

dmr::TrainConfig joint_config(Variant v, std::uint64_t seed) {
  dmr::TrainConfig c;
  c.epochs = kJointEpochs;
  c.seed = seed;
  c.weights.sparsity = kLambda1;
  c.weights.feature_matching = v == Variant::kFull ? 1.0 : 0.0;
  c.weights.output_matching = v == Variant::kNoFmNoOm ? 0.0 : 1.0;
  return c;
}

struct Trial {
  dmr::JointResult model;
  dmr::EvalResult eval;
  double seconds = 0.0;
};

struct Study {
  std::map<std::uint64_t, dmr::TeacherResult> teachers;
  std::map<std::uint64_t, double> teacher_seconds;
  std::map<std::pair<Variant, std::uint64_t>, Trial> runs;
};

Study& study() {
  static Study s;
  return s;
}

const dmr::TeacherResult& teacher(std::uint64_t seed) {
  Study& s = study();
  if (!s.teachers.contains(seed)) {
    const auto t0 = Clock::now();
    s.teachers.emplace(seed, dmr::pretrain_teacher(data().train, classifier_config(), teacher_config(seed)));
    s.teacher_seconds[seed] = seconds_since(t0);
  }
  return s.teachers.at(seed);
}

Trial train_and_eval(Variant v, std::uint64_t seed) {
  const dmr::Classifier& t = teacher(seed).teacher;
  const auto t0 = Clock::now();
  dmr::JointResult m = dmr::train_joint(data().train, &t, generator_config(), classifier_config(),
                                        joint_config(v, seed));
  dmr::EvalResult e = dmr::evaluate_run(m.generator, m.classifier, &t, data().test);
  return {std::move(m), std::move(e), seconds_since(t0)};
}

const Trial& run(Variant v, std::uint64_t seed) {
  Study& s = study();
  const auto key = std::make_pair(v, seed);
  if (!s.runs.contains(key)) s.runs.emplace(key, train_and_eval(v, seed));
  return s.runs.at(key);
}

struct Means {
  double f1 = 0, sparsity = 0, acc_rationale = 0, acc_full = 0;
};

Means means(Variant v) {
  Means m;
  for (std::uint64_t seed : kSeeds) {
    const dmr::EvalResult& e = run(v, seed).eval;
    m.f1 += e.metrics->f1;
    m.sparsity += e.sparsity;
    m.acc_rationale += e.accuracy_rationale;
    m.acc_full += e.accuracy_full;
  }
  const double n = std::size(kSeeds);
  m.f1 /= n;
  m.sparsity /= n;
  m.acc_rationale /= n;
  m.acc_full /= n;
  return m;
}

double planted_rate(const dmr::Corpus& c) {
  std::vector<dmr::Mask> gold;
  for (const auto& e : c.examples) gold.push_back(*e.rationale);
  return dmr::sparsity_percent(gold);
}

}  // namespace

// ---- criteria ---------------------------------------------------------------

TEST(Acceptance, C1_GradientsMatchFiniteDifferences) {
  const auto t0 = Clock::now();
  Rng rng(1001);
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  auto sweep = [&](const std::vector<gradcheck::Named>& cases) {
    for (const auto& c : cases) {
      double w = 0.0;
      for (int i = 0; i < 100; ++i) w = std::max(w, gradcheck::max_error(c.make(rng)));
      ++checked;
      if (w > worst || worst_name.empty()) {
        worst = w;
        worst_name = c.name;
      }
    }
  };
  sweep(gradcheck::op_cases());
  sweep(gradcheck::loss_cases());
  const double secs = seconds_since(t0);
  verdict(1, "finite differences", worst < 1e-4 && secs < 60.0,
          std::to_string(checked) + " ops and losses x 100 configs, worst relative error " +
              sci(worst) + " (" + worst_name + "), " + fmt(secs, 1) + " s");
}

TEST(Acceptance, C2_LossProperties) {
  Rng rng(1002);
  bool ok = true;
  double worst_asym = 0.0, min_cmd = 1.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = gradcheck::dim(rng, 2, 8), d = gradcheck::dim(rng, 1, 6);
    const Tensor a = unit_batch(rng, n, d), b = unit_batch(rng, n, d);
    auto cmd = [](const Tensor& x, const Tensor& z) {
      return value_of([&](ad::Tape& t) { return dmr::cmd_loss(t.constant(x), t.constant(z), 5); });
    };
    const double ab = cmd(a, b);
    worst_asym = std::max(worst_asym, std::abs(ab - cmd(b, a)));
    min_cmd = std::min(min_cmd, ab);
    ok = ok && cmd(a, a) == 0.0;
  }
  ok = ok && worst_asym <= 1e-12 && min_cmd >= 0.0;

  bool gibbs = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = gradcheck::dim(rng, 2, 5);
    const Tensor p = gradcheck::random_simplex(rng, 1, c), q = gradcheck::random_simplex(rng, 1, c);
    const double h = dmr::entropy(p.row(0));
    const double cross = value_of([&](ad::Tape& t) { return dmr::distillation_loss(t.constant(p), t.constant(q)); });
    const double self = value_of([&](ad::Tape& t) { return dmr::distillation_loss(t.constant(p), t.constant(p)); });
    gibbs = gibbs && cross > h && std::abs(self - h) <= 1e-12;
  }

  std::size_t masks = 0;
  bool omega = true;
  for (int len = 1; len <= 6; ++len) {
    for (std::uint32_t bits = 0; bits < (1u << len); ++bits, ++masks) {
      Tensor z({1, static_cast<std::size_t>(len)});
      for (int i = 0; i < len; ++i) z[i] = (bits >> i) & 1u;
      const double v = value_of([&](ad::Tape& t) {
        return dmr::rationale_regularizer(t.constant(z), Tensor(z.shape, 1.0), 0.7, 1.3);
      });
      omega = omega && std::abs(v - oracle::omega(bits, len, 0.7, 1.3)) <= 1e-12;
    }
  }
  verdict(2, "loss properties", ok && gibbs && omega,
          "cmd(A,A)=0, max asymmetry " + sci(worst_asym) + ", min cmd " +
              sci(min_cmd) + " over 1000 pairs; cross-entropy vs entropy " +
              (gibbs ? "ok" : "violated") + "; omega " + (omega ? "matches" : "differs") +
              " on " + std::to_string(masks) + " masks");
}

TEST(Acceptance, C3_GradientRouting) {
  // Reported leaks from every live batch of the three full runs.
  double gen_leak = 0.0, teacher_leak = 0.0;
  bool teachers_unchanged = true;
  for (std::uint64_t seed : kSeeds) {
    const std::uint64_t before = teacher(seed).teacher.params().checksum();
    const Trial& r = run(Variant::kFull, seed);
    for (const auto& e : r.model.report.epochs) {
      gen_leak = std::max(gen_leak, *e.generator_leak);
      teacher_leak = std::max(teacher_leak, *e.teacher_leak);
    }
    teachers_unchanged = teachers_unchanged && teacher(seed).teacher.params().checksum() == before;
  }
  // An independent probe on real training batches with the trained models.
  const Trial& r = run(Variant::kFull, kSeeds[0]);
  const dmr::Classifier& t = teacher(kSeeds[0]).teacher;
  double probe = 0.0, classifier_grad = 0.0;
  std::size_t batches = 0;
  for (const dmr::Batch& b : dmr::batch_iterator(data().train, 32, 99, 0)) {
    if (++batches > 5) break;
    ad::Tape tape;
    dmr::BoundParams g(tape, r.model.generator.params(), true);
    dmr::BoundParams c(tape, r.model.classifier.params(), true);
    dmr::BoundParams tp(tape, t.params(), true);
    Rng rng(batches);
    const auto mask = r.model.generator.forward(g, b, {}, dmr::MaskMode::kStochastic, &rng).mask;
    const auto probs = t.forward_full(tp, b).probs;
    const auto terms = dmr::classifier_objective(b, mask, r.model.classifier, c, probs,
                                                 joint_config(Variant::kFull, 1).weights);
    tape.backward(terms.total);
    probe = std::max({probe, g.max_abs_grad(), tp.max_abs_grad()});
    classifier_grad = std::max(classifier_grad, c.max_abs_grad());
  }
  verdict(3, "gradient routing",
          gen_leak == 0.0 && teacher_leak == 0.0 && probe == 0.0 && classifier_grad > 0.0 &&
              teachers_unchanged,
          "max generator leak " + sci(gen_leak) + ", max teacher leak " +
              sci(teacher_leak) + " over all training batches; probe leak " +
              sci(probe) + "; teacher checksums " +
              (teachers_unchanged ? "unchanged" : "changed"));
}

TEST(Acceptance, C4_OracleEquivalence) {
  Rng rng(1004);
  double worst = 0.0;
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = gradcheck::dim(rng, 2, 8), d = gradcheck::dim(rng, 1, 4);
    const Tensor x = unit_batch(rng, n, d), z = unit_batch(rng, n, d);
    const double bw = rng.uniform(0.3, 3.0);
    const double cmd = value_of([&](ad::Tape& t) { return dmr::cmd_loss(t.constant(x), t.constant(z), 5); });
    const double mmd = value_of([&](ad::Tape& t) { return dmr::mmd_loss(t.constant(x), t.constant(z), bw); });
    const double coral = value_of([&](ad::Tape& t) { return dmr::coral_loss(t.constant(x), t.constant(z)); });
    worst = std::max({worst, std::abs(cmd - oracle::cmd(rows(x), rows(z), 5)),
                      std::abs(mmd - oracle::mmd(rows(x), rows(z), bw)),
                      std::abs(coral - oracle::coral(rows(x), rows(z)))});
  }
  std::mt19937_64 gen(1004);
  double worst_metric = 0.0;
  const int cases = 200;
  for (int trial = 0; trial < cases; ++trial) {
    std::uniform_int_distribution<std::size_t> count(1, 6), len(1, 12);
    std::bernoulli_distribution g(0.3), p(0.1 + 0.2 * (trial % 5));
    std::vector<dmr::Mask> pred(count(gen)), gold;
    for (auto& m : pred) m.resize(len(gen));
    gold = pred;
    for (auto& m : pred)
      for (auto& b : m) b = p(gen);
    for (auto& m : gold)
      for (auto& b : m) b = g(gen);
    const auto got = dmr::rationale_metrics(pred, gold);
    const auto want = oracle::token_metrics(pred, gold);
    worst_metric = std::max({worst_metric, std::abs(got.sparsity - want.sparsity),
                             std::abs(got.precision - want.precision),
                             std::abs(got.recall - want.recall), std::abs(got.f1 - want.f1)});
  }
  verdict(4, "oracle equivalence", worst <= 1e-10 && worst_metric <= 1e-9,
          "cmd/mmd/coral max deviation " + sci(worst) + " over 300 batches; metrics max deviation " +
              sci(worst_metric) + " over " + std::to_string(cases) + " cases");
}

TEST(Acceptance, C5_EndToEndSynthetic) {
  double secs = 0.0;
  std::string per_seed;
  for (std::uint64_t seed : kSeeds) {
    const Trial& r = run(Variant::kFull, seed);
    secs += study().teacher_seconds.at(seed) + r.seconds;
    per_seed += " " + fmt(r.eval.metrics->f1, 1);
  }
  const Means m = means(Variant::kFull);
  const double planted = planted_rate(data().test);
  const bool ok = m.f1 >= 80.0 && std::abs(m.sparsity - planted) <= 3.0 && secs < 300.0;
  verdict(5, "end-to-end synthetic", ok,
          "mean F1 " + fmt(m.f1) + " (seeds:" + per_seed + "), sparsity " + fmt(m.sparsity) +
              " vs planted " + fmt(planted) + ", " + fmt(secs, 1) + " s for 3 seeds");
}

TEST(Acceptance, C6_AblationOrdering) {
  const double full = means(Variant::kFull).f1, no_fm = means(Variant::kNoFm).f1,
               neither = means(Variant::kNoFmNoOm).f1;
  const bool ok = full >= no_fm && no_fm >= neither && full - neither >= 3.0;
  verdict(6, "ablation ordering", ok,
          std::string("mean F1 ") + name_of(Variant::kFull) + " " + fmt(full, 3) + ", " +
              name_of(Variant::kNoFm) + " " + fmt(no_fm, 3) + ", " + name_of(Variant::kNoFmNoOm) +
              " " + fmt(neither, 3));
}

TEST(Acceptance, C7_RationaleVsFullText) {
  double worst = 0.0;
  std::string per_seed;
  for (std::uint64_t seed : kSeeds) {
    const dmr::EvalResult& e = run(Variant::kFull, seed).eval;
    worst = std::max(worst, std::abs(e.accuracy_rationale - e.accuracy_full));
    per_seed += " " + fmt(e.accuracy_rationale, 1) + "/" + fmt(e.accuracy_full, 1);
  }
  verdict(7, "rationale vs full text", worst <= 2.0,
          "accuracy rationale/full per seed:" + per_seed + ", largest gap " + fmt(worst));
}

TEST(Acceptance, C8_Determinism) {
  const fs::path dir = fs::temp_directory_path() / "dmr_acceptance";
  fs::create_directories(dir);
  auto bytes = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
  };
  auto artifacts = [&](const dmr::TeacherResult& t, const Trial& r, const std::string& tag) {
    dmr::Checkpoint teacher_ckpt, model_ckpt;
    t.teacher.save(teacher_ckpt);
    r.model.generator.save(model_ckpt);
    r.model.classifier.save(model_ckpt);
    dmr::write_checkpoint(dir / (tag + "_teacher.ckpt"), teacher_ckpt);
    dmr::write_checkpoint(dir / (tag + "_model.ckpt"), model_ckpt);
    return std::vector<std::string>{bytes(dir / (tag + "_teacher.ckpt")), bytes(dir / (tag + "_model.ckpt")),
                                    t.report.to_jsonl(), r.model.report.to_jsonl(),
                                    r.eval.to_json().dump()};
  };
  const std::uint64_t seed = kSeeds[0];
  const auto first = artifacts(teacher(seed), run(Variant::kFull, seed), "a");
  const dmr::TeacherResult t2 = dmr::pretrain_teacher(data().train, classifier_config(), teacher_config(seed));
  dmr::JointResult m2 = dmr::train_joint(data().train, &t2.teacher, generator_config(),
                                         classifier_config(), joint_config(Variant::kFull, seed));
  dmr::EvalResult e2 = dmr::evaluate_run(m2.generator, m2.classifier, &t2.teacher, data().test);
  const Trial r2{std::move(m2), std::move(e2), 0.0};
  const auto second = artifacts(t2, r2, "b");
  const char* names[] = {"teacher checkpoint", "model checkpoint", "teacher report", "train report",
                         "metric record"};
  std::string differing;
  for (std::size_t i = 0; i < first.size(); ++i)
    if (first[i] != second[i]) differing += std::string(" ") + names[i];
  verdict(8, "determinism", differing.empty(),
          differing.empty() ? "seed " + std::to_string(seed) +
                                  " rerun gives byte-identical checkpoints, reports and metrics"
                            : "differs:" + differing);
}
