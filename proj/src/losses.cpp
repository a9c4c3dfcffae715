#include "dmr/losses.hpp"

#include <cmath>

#include "dmr/error.hpp"

namespace dmr {

std::string to_string(MatchingLoss m) {
  switch (m) {
    case MatchingLoss::kCmd: return "cmd";
    case MatchingLoss::kMmd: return "mmd";
    case MatchingLoss::kCoral: return "coral";
  }
  return "?";
}

MatchingLoss parse_matching_loss(const std::string& s) {
  if (s == "cmd") return MatchingLoss::kCmd;
  if (s == "mmd") return MatchingLoss::kMmd;
  if (s == "coral") return MatchingLoss::kCoral;
  throw ConfigError("unknown matching loss '" + s + "' (expected cmd|mmd|coral)");
}

void validate(const LossWeights& w) {
  auto nonneg = [](double v, const char* name) {
    if (!(v >= 0.0)) throw ConfigError(std::string(name) + " must be >= 0");
  };
  nonneg(w.sparsity, "lambda1");
  nonneg(w.continuity, "lambda2");
  nonneg(w.feature_matching, "lambda3");
  nonneg(w.output_matching, "lambda4");
  if (w.moment_order < 2) throw ConfigError("moment order K must be >= 2");
  if (!w.moment_weights.empty()) {
    if (w.moment_weights.size() != static_cast<std::size_t>(w.moment_order)) {
      throw ConfigError("expected " + std::to_string(w.moment_order) + " CMD term weights");
    }
    for (double v : w.moment_weights) nonneg(v, "CMD term weight");
  }
  if (!(w.mmd_bandwidth > 0.0)) throw ConfigError("MMD bandwidth must be > 0");
}

namespace {

void check_feature_pair(const char* op, ad::Var fx, ad::Var fz, std::size_t min_rows) {
  const Tensor& a = fx.value();
  const Tensor& b = fz.value();
  if (a.rank() != 2 || a.shape != b.shape) {
    throw ShapeError(std::string(op) + ": feature batches must share shape [N, d], got " +
                     shape_string(a.shape) + " and " + shape_string(b.shape));
  }
  if (a.dim(0) < min_rows) {
    throw ShapeError(std::string(op) + ": needs at least " + std::to_string(min_rows) +
                     " samples, got " + std::to_string(a.dim(0)));
  }
}

void check_unit_box(const char* op, const Tensor& t) {
  for (double v : t.data) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw Error(std::string(op) + ": feature value " + std::to_string(v) + " outside [0,1]");
    }
  }
}

ad::Var weighted(ad::Var term, std::span<const double> w, std::size_t i) {
  return w.empty() || w[i] == 1.0 ? term : ad::scale(term, w[i]);
}

}  // namespace

ad::Var classification_loss(ad::Var probs, std::span<const int> labels) {
  return ad::neg(ad::mean(ad::log(ad::pick(probs, labels))));
}

ad::Var rationale_regularizer(ad::Var z, const Tensor& valid, double sparsity, double continuity) {
  const Tensor& zv = z.value();
  if (zv.rank() != 2 || zv.shape != valid.shape) {
    throw ShapeError("rationale_regularizer: mask " + shape_string(zv.shape) + " vs valid " +
                     shape_string(valid.shape));
  }
  ad::Tape& tape = z.tape();
  const std::size_t b = zv.dim(0), l = zv.dim(1);
  ad::Var live = ad::mul(z, tape.constant(valid));
  ad::Var total = ad::scale(ad::sum(live), sparsity);
  if (l > 1) {
    ad::Var jumps = ad::abs(ad::sub(ad::slice_last(live, 1, l), ad::slice_last(live, 0, l - 1)));
    ad::Var pair_valid = ad::slice_last(tape.constant(valid), 1, l);
    total = ad::add(total, ad::scale(ad::sum(ad::mul(jumps, pair_valid)), continuity));
  }
  return ad::scale(total, 1.0 / static_cast<double>(b));
}

ad::Var cmd_loss(ad::Var fx, ad::Var fz, int order, std::span<const double> term_weights) {
  check_feature_pair("cmd_loss", fx, fz, 2);
  check_unit_box("cmd_loss", fx.value());
  check_unit_box("cmd_loss", fz.value());
  if (order < 2) throw ConfigError("cmd_loss: moment order must be >= 2");
  if (!term_weights.empty() && term_weights.size() != static_cast<std::size_t>(order)) {
    throw ConfigError("cmd_loss: expected " + std::to_string(order) + " term weights");
  }
  ad::Var mx = ad::mean(fx, 0);
  ad::Var mz = ad::mean(fz, 0);
  ad::Var total = weighted(ad::l2_norm(ad::sub(mx, mz)), term_weights, 0);
  ad::Var cx = ad::sub(fx, mx);
  ad::Var cz = ad::sub(fz, mz);
  for (int k = 2; k <= order; ++k) {
    ad::Var moment_x = ad::mean(ad::pow(cx, k), 0);
    ad::Var moment_z = ad::mean(ad::pow(cz, k), 0);
    total = ad::add(total, weighted(ad::l2_norm(ad::sub(moment_x, moment_z)), term_weights,
                                    static_cast<std::size_t>(k - 1)));
  }
  return total;
}

ad::Var mmd_loss(ad::Var fx, ad::Var fz, double bandwidth) {
  if (!(bandwidth > 0.0)) throw ConfigError("mmd_loss: bandwidth must be > 0");
  const Tensor& a = fx.value();
  const Tensor& b = fz.value();
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1) || a.dim(0) == 0 || b.dim(0) == 0) {
    throw ShapeError("mmd_loss: incompatible feature batches " + shape_string(a.shape) +
                     " and " + shape_string(b.shape));
  }
  const double gamma = -1.0 / (2.0 * bandwidth * bandwidth);
  auto kernel_mean = [gamma](ad::Var p, ad::Var q) {
    return ad::mean(ad::exp(ad::scale(ad::pairwise_sq_dist(p, q), gamma)));
  };
  return ad::sub(ad::add(kernel_mean(fx, fx), kernel_mean(fz, fz)),
                 ad::scale(kernel_mean(fx, fz), 2.0));
}

ad::Var coral_loss(ad::Var fx, ad::Var fz) {
  check_feature_pair("coral_loss", fx, fz, 2);
  const std::size_t n = fx.value().dim(0), d = fx.value().dim(1);
  auto covariance = [n](ad::Var f) {
    ad::Var c = ad::sub(f, ad::mean(f, 0));
    return ad::scale(ad::matmul(ad::transpose(c), c), 1.0 / static_cast<double>(n - 1));
  };
  ad::Var diff = ad::sub(covariance(fx), covariance(fz));
  return ad::scale(ad::sum(ad::pow(diff, 2)), 1.0 / (4.0 * static_cast<double>(d * d)));
}

ad::Var feature_matching_loss(ad::Var fx, ad::Var fz, const LossWeights& w) {
  switch (w.matching) {
    case MatchingLoss::kCmd: return cmd_loss(fx, fz, w.moment_order, w.moment_weights);
    case MatchingLoss::kMmd: return mmd_loss(fx, fz, w.mmd_bandwidth);
    case MatchingLoss::kCoral: return coral_loss(fx, fz);
  }
  throw ConfigError("unknown matching loss");
}

ad::Var distillation_loss(ad::Var teacher_probs, ad::Var student_probs) {
  if (teacher_probs.shape() != student_probs.shape() || student_probs.value().rank() == 0) {
    throw ShapeError("distillation_loss: teacher " + shape_string(teacher_probs.shape()) +
                     " vs student " + shape_string(student_probs.shape()));
  }
  ad::Var target = ad::stop_gradient(teacher_probs);
  ad::Var cross = ad::sum(ad::mul(target, ad::log(student_probs)));
  return ad::scale(cross, -1.0 / static_cast<double>(student_probs.value().rows()));
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

ObjectiveTerms classifier_objective(const Batch& batch, ad::Var mask, const Classifier& clf,
                                    const BoundParams& clf_params,
                                    std::optional<ad::Var> teacher_probs, const LossWeights& w) {
  ad::Var z = ad::stop_gradient(mask);
  const Classifier::Output rat = clf.forward(clf_params, batch, z);
  ObjectiveTerms t;
  ad::Var cls = classification_loss(rat.probs, batch.labels);
  t.cls = cls.value().item();
  t.total = cls;
  if (w.feature_matching > 0.0) {
    if (batch.size < 2) {
      throw ConfigError("classifier_objective: feature matching needs a batch of at least 2");
    }
    const Classifier::Output full = clf.forward_full(clf_params, batch);
    ad::Var fm = feature_matching_loss(full.features, rat.features, w);
    t.fm = fm.value().item();
    t.total = ad::add(t.total, ad::scale(fm, w.feature_matching));
  }
  if (w.output_matching > 0.0 && !teacher_probs) {
    throw ConfigError("classifier_objective: output matching needs teacher probabilities");
  }
  if (teacher_probs) {
    ad::Var om = distillation_loss(*teacher_probs, rat.probs);
    t.om = om.value().item();
    if (w.output_matching > 0.0) t.total = ad::add(t.total, ad::scale(om, w.output_matching));
  }
  return t;
}

ObjectiveTerms generator_objective(const Batch& batch, ad::Var mask, const Classifier& clf,
                                   const BoundParams& clf_params, const LossWeights& w) {
  if (clf_params.trainable()) {
    throw Error("generator_objective: the classifier binding must be frozen");
  }
  const Classifier::Output rat = clf.forward(clf_params, batch, mask);
  ObjectiveTerms t;
  ad::Var cls = classification_loss(rat.probs, batch.labels);
  ad::Var omega = rationale_regularizer(mask, batch.valid, w.sparsity, w.continuity);
  t.cls = cls.value().item();
  t.omega = omega.value().item();
  t.total = ad::add(cls, omega);
  return t;
}

}  // namespace dmr
