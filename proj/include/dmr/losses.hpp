#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmr/autodiff.hpp"
#include "dmr/data.hpp"
#include "dmr/model.hpp"

namespace dmr {

enum class MatchingLoss { kCmd, kMmd, kCoral };

std::string to_string(MatchingLoss m);
MatchingLoss parse_matching_loss(const std::string& s);

struct LossWeights {
  double sparsity = 0.0;          // λ1, weight of ‖z‖₁
  double continuity = 0.0;        // λ2, weight of Σ|z_i - z_{i-1}|
  double feature_matching = 0.0;  // λ3
  double output_matching = 0.0;   // λ4
  int moment_order = 5;           // K
  // Optional per-term CMD constants: index 0 weights the mean term, index
  // k-1 the k-th central moment. Empty means all ones.
  std::vector<double> moment_weights;
  MatchingLoss matching = MatchingLoss::kCmd;
  double mmd_bandwidth = 1.0;
};

// Throws ConfigError unless all λ ≥ 0, K ≥ 2, and the moment weights (if any)
// have K nonnegative entries.
void validate(const LossWeights& w);

// Mean over rows of -log p[y]; probs: [B, C].
ad::Var classification_loss(ad::Var probs, std::span<const int> labels);

// Mean over rows of λ1 Σ z_i + λ2 Σ_{i≥2} |z_i - z_{i-1}|, counting only real
// tokens (valid == 1). z, valid: [B, L].
ad::Var rationale_regularizer(ad::Var z, const Tensor& valid, double sparsity,
                              double continuity);

// Central moment discrepancy between two feature batches [N, d] with entries
// in [0, 1]:
//   ‖E_x - E_z‖₂ + Σ_{k=2..K} ‖C_k(x) - C_k(z)‖₂,
// where C_k is the elementwise k-th central moment over the batch. Requires
// N ≥ 2.
ad::Var cmd_loss(ad::Var fx, ad::Var fz, int order,
                 std::span<const double> term_weights = {});

// Biased MMD² estimate with a Gaussian kernel exp(-‖a-b‖² / (2 bandwidth²)).
ad::Var mmd_loss(ad::Var fx, ad::Var fz, double bandwidth);

// ‖Cov(x) - Cov(z)‖²_F / (4 d²), covariances with the N-1 normaliser.
// Requires N ≥ 2.
ad::Var coral_loss(ad::Var fx, ad::Var fz);

// The configured feature-space matching loss.
ad::Var feature_matching_loss(ad::Var fx, ad::Var fz, const LossWeights& w);

// Mean over rows of Σ_y -p_t(y) log p_s(y). The teacher side is detached.
ad::Var distillation_loss(ad::Var teacher_probs, ad::Var student_probs);

double entropy(std::span<const double> p);

struct ObjectiveTerms {
  ad::Var total;
  double cls = 0.0;
  std::optional<double> omega;
  std::optional<double> fm;
  std::optional<double> om;
};

// l_cls + λ3 l_fm + λ4 l_om for the classifier. The mask is detached on
// entry, so no gradient reaches whatever produced it. `teacher_probs` is
// required when λ4 > 0 and is detached as well. Throws ConfigError when
// λ3 > 0 and the batch has fewer than 2 examples.
ObjectiveTerms classifier_objective(const Batch& batch, ad::Var mask,
                                    const Classifier& clf, const BoundParams& clf_params,
                                    std::optional<ad::Var> teacher_probs,
                                    const LossWeights& w);

// l_cls + Ω(z) for the generator. The mask stays live; `clf_params` must be a
// frozen (non-trainable) binding.
ObjectiveTerms generator_objective(const Batch& batch, ad::Var mask,
                                   const Classifier& clf, const BoundParams& clf_params,
                                   const LossWeights& w);

}  // namespace dmr
