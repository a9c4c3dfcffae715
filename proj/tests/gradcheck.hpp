#pragma once

// Central finite-difference checks for tape gradients, plus one random case
// generator per op and loss. Shared by the unit tests and the acceptance
// suite.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dmr/autodiff.hpp"
#include "dmr/losses.hpp"
#include "dmr/rng.hpp"

namespace gradcheck {

using dmr::Rng;
using dmr::Shape;
using dmr::Tensor;
namespace ad = dmr::ad;

using Fn = std::function<ad::Var(const std::vector<ad::Var>&)>;

struct Case {
  std::vector<Tensor> inputs;
  Fn f;
  // Inputs whose gradient is not compared (integer-like or detached inputs).
  std::vector<bool> skip;
};

// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3). The floor turns
// the check into an absolute one (1e-7 at the 1e-4 tolerance) for gradients
// that are numerically zero.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

inline double evaluate(const Case& c, const std::vector<Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  return c.f(vars).value().item();
}

// Largest relative error over every input entry.
inline double max_error(const Case& c, double h = 1e-5) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Tensor& t : c.inputs) vars.push_back(tape.variable(t));
  const ad::Var loss = c.f(vars);
  tape.backward(loss);
  double worst = 0.0;
  std::vector<Tensor> work = c.inputs;
  for (std::size_t k = 0; k < c.inputs.size(); ++k) {
    if (k < c.skip.size() && c.skip[k]) continue;
    const Tensor g = vars[k].grad();
    for (std::size_t i = 0; i < work[k].size(); ++i) {
      const double x = work[k][i];
      work[k][i] = x + h;
      const double up = evaluate(c, work);
      work[k][i] = x - h;
      const double down = evaluate(c, work);
      work[k][i] = x;
      worst = std::max(worst, relative_error(g[i], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from 0 by `gap`, for kinks at the origin.
inline Tensor away_from_zero(Rng& rng, Shape shape, double gap = 0.05) {
  Tensor t(std::move(shape));
  for (double& v : t.data) {
    const double m = rng.uniform(gap, 1.0);
    v = rng.bernoulli(0.5) ? m : -m;
  }
  return t;
}

inline std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

// Reduces any output to a scalar through fixed random weights, so every
// output entry contributes a distinct upstream gradient.
inline ad::Var project(ad::Var out, const Tensor& weights) {
  return ad::sum(ad::mul(out, out.tape().constant(weights)));
}

inline Case unary(Rng& rng, Tensor x, std::function<ad::Var(ad::Var)> op) {
  ad::Tape probe;
  const Shape out_shape = op(probe.constant(x)).shape();
  Tensor w = random_tensor(rng, out_shape);
  return {{std::move(x)}, [op, w](const std::vector<ad::Var>& v) { return project(op(v[0]), w); }, {}};
}

inline Case binary(Rng& rng, Tensor a, Tensor b, std::function<ad::Var(ad::Var, ad::Var)> op) {
  ad::Tape probe;
  const Shape out_shape = op(probe.constant(a), probe.constant(b)).shape();
  Tensor w = random_tensor(rng, out_shape);
  return {{std::move(a), std::move(b)},
          [op, w](const std::vector<ad::Var>& v) { return project(op(v[0], v[1]), w); },
          {}};
}

inline Shape random_shape(Rng& rng) {
  const std::size_t rank = dim(rng, 1, 3);
  Shape s;
  for (std::size_t r = 0; r < rank; ++r) s.push_back(dim(rng, 1, 4));
  return s;
}

inline Tensor random_valid(Rng& rng, std::size_t b, std::size_t l) {
  Tensor valid({b, l});
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t len = dim(rng, 1, l);
    for (std::size_t t = 0; t < len; ++t) valid[i * l + t] = 1.0;
  }
  return valid;
}

// Probability rows bounded away from 0.
inline Tensor random_simplex(Rng& rng, std::size_t n, std::size_t c) {
  Tensor p = random_tensor(rng, {n, c}, 0.1, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += p[i * c + j];
    for (std::size_t j = 0; j < c; ++j) p[i * c + j] /= s;
  }
  return p;
}

struct Named {
  std::string name;
  std::function<Case(Rng&)> make;
};

inline std::vector<Named> op_cases() {
  std::vector<Named> g;
  g.push_back({"add", [](Rng& r) {
                 const Shape s = random_shape(r);
                 return binary(r, random_tensor(r, s), random_tensor(r, s), ad::add);
               }});
  g.push_back({"add_broadcast", [](Rng& r) {
                 const Shape s = random_shape(r);
                 const Shape tail(s.begin() + static_cast<std::ptrdiff_t>(r.below(s.size() + 1)), s.end());
                 return binary(r, random_tensor(r, s), random_tensor(r, tail), ad::add);
               }});
  g.push_back({"sub", [](Rng& r) {
                 const Shape s = random_shape(r);
                 return binary(r, random_tensor(r, s), random_tensor(r, {s.back()}), ad::sub);
               }});
  g.push_back({"mul", [](Rng& r) {
                 const Shape s = random_shape(r);
                 const Shape tail(s.begin() + static_cast<std::ptrdiff_t>(r.below(s.size() + 1)), s.end());
                 return binary(r, random_tensor(r, s), random_tensor(r, tail), ad::mul);
               }});
  g.push_back({"scale", [](Rng& r) {
                 const double f = r.uniform(-3.0, 3.0);
                 return unary(r, random_tensor(r, random_shape(r)), [f](ad::Var x) { return ad::scale(x, f); });
               }});
  g.push_back({"add_scalar", [](Rng& r) {
                 const double c = r.uniform(-3.0, 3.0);
                 return unary(r, random_tensor(r, random_shape(r)), [c](ad::Var x) { return ad::add_scalar(x, c); });
               }});
  g.push_back({"neg", [](Rng& r) { return unary(r, random_tensor(r, random_shape(r)), ad::neg); }});
  g.push_back({"sigmoid", [](Rng& r) {
                 return unary(r, random_tensor(r, random_shape(r), -4.0, 4.0), ad::sigmoid);
               }});
  g.push_back({"tanh", [](Rng& r) {
                 return unary(r, random_tensor(r, random_shape(r), -3.0, 3.0), [](ad::Var x) { return ad::tanh(x); });
               }});
  g.push_back({"exp", [](Rng& r) {
                 return unary(r, random_tensor(r, random_shape(r), -2.0, 2.0), [](ad::Var x) { return ad::exp(x); });
               }});
  g.push_back({"log", [](Rng& r) {
                 return unary(r, random_tensor(r, random_shape(r), 0.1, 3.0), [](ad::Var x) { return ad::log(x); });
               }});
  g.push_back({"pow", [](Rng& r) {
                 const int e = static_cast<int>(r.below(6));
                 return unary(r, random_tensor(r, random_shape(r), -1.5, 1.5), [e](ad::Var x) { return ad::pow(x, e); });
               }});
  g.push_back({"abs", [](Rng& r) {
                 return unary(r, away_from_zero(r, random_shape(r)), [](ad::Var x) { return ad::abs(x); });
               }});
  g.push_back({"matmul", [](Rng& r) {
                 Shape s = random_shape(r);
                 const std::size_t m = dim(r, 1, 4);
                 return binary(r, random_tensor(r, s), random_tensor(r, {s.back(), m}), ad::matmul);
               }});
  g.push_back({"transpose", [](Rng& r) {
                 return unary(r, random_tensor(r, {dim(r, 1, 5), dim(r, 1, 5)}), ad::transpose);
               }});
  g.push_back({"reshape", [](Rng& r) {
                 const std::size_t a = dim(r, 1, 4), b = dim(r, 1, 4), c = dim(r, 1, 3);
                 return unary(r, random_tensor(r, {a, b, c}), [a, b, c](ad::Var x) {
                   return ad::reshape(x, {b, a * c});
                 });
               }});
  g.push_back({"concat_last", [](Rng& r) {
                 const std::size_t n = dim(r, 1, 4);
                 return binary(r, random_tensor(r, {n, dim(r, 1, 4)}), random_tensor(r, {n, dim(r, 1, 4)}),
                               ad::concat_last);
               }});
  g.push_back({"slice_last", [](Rng& r) {
                 const std::size_t c = dim(r, 1, 6);
                 const std::size_t b = r.below(c);
                 const std::size_t e = b + 1 + r.below(c - b);
                 return unary(r, random_tensor(r, {dim(r, 1, 4), c}), [b, e](ad::Var x) {
                   return ad::slice_last(x, b, e);
                 });
               }});
  g.push_back({"scale_rows", [](Rng& r) {
                 const std::size_t b = dim(r, 1, 3), l = dim(r, 1, 4), h = dim(r, 1, 4);
                 return binary(r, random_tensor(r, {b, l, h}), random_tensor(r, {b, l}), ad::scale_rows);
               }});
  g.push_back({"sum", [](Rng& r) {
                 return unary(r, random_tensor(r, random_shape(r)), [](ad::Var x) { return ad::sum(x); });
               }});
  g.push_back({"sum_axis", [](Rng& r) {
                 const Shape s = random_shape(r);
                 const std::size_t axis = r.below(s.size());
                 return unary(r, random_tensor(r, s), [axis](ad::Var x) { return ad::sum(x, axis); });
               }});
  g.push_back({"mean", [](Rng& r) {
                 return unary(r, random_tensor(r, random_shape(r)), [](ad::Var x) { return ad::mean(x); });
               }});
  g.push_back({"mean_axis", [](Rng& r) {
                 const Shape s = random_shape(r);
                 const std::size_t axis = r.below(s.size());
                 return unary(r, random_tensor(r, s), [axis](ad::Var x) { return ad::mean(x, axis); });
               }});
  g.push_back({"l2_norm", [](Rng& r) {
                 return unary(r, away_from_zero(r, random_shape(r)), ad::l2_norm);
               }});
  g.push_back({"softmax", [](Rng& r) {
                 return unary(r, random_tensor(r, random_shape(r), -3.0, 3.0), ad::softmax);
               }});
  g.push_back({"gather_rows", [](Rng& r) {
                 const std::size_t v = dim(r, 2, 6), e = dim(r, 1, 4), b = dim(r, 1, 3), l = dim(r, 1, 4);
                 // A frozen row is never looked up here: its gradient is dropped on
                 // purpose, which finite differences cannot see.
                 const std::size_t frozen = r.bernoulli(0.5) ? 0 : ad::kNoRow;
                 const std::size_t lo = frozen == 0 ? 1 : 0;
                 std::vector<std::int32_t> ids(b * l);
                 for (auto& id : ids) id = static_cast<std::int32_t>(lo + r.below(v - lo));
                 return unary(r, random_tensor(r, {v, e}), [ids, b, l, frozen](ad::Var t) {
                   return ad::gather_rows(t, ids, {b, l}, frozen);
                 });
               }});
  g.push_back({"masked_max_pool", [](Rng& r) {
                 const std::size_t b = dim(r, 1, 3), l = dim(r, 1, 5), h = dim(r, 1, 4);
                 const Tensor valid = random_valid(r, b, l);
                 // Distinct values on a grid keep the argmax away from ties.
                 std::vector<double> grid(b * l * h);
                 for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = -1.0 + 0.05 * static_cast<double>(i);
                 r.shuffle(grid);
                 Tensor x({b, l, h}, grid);
                 return unary(r, std::move(x), [valid](ad::Var v) { return ad::masked_max_pool(v, valid); });
               }});
  g.push_back({"masked_mean_pool", [](Rng& r) {
                 const std::size_t b = dim(r, 1, 3), l = dim(r, 1, 5), h = dim(r, 1, 4);
                 const Tensor valid = random_valid(r, b, l);
                 return unary(r, random_tensor(r, {b, l, h}),
                              [valid](ad::Var v) { return ad::masked_mean_pool(v, valid); });
               }});
  g.push_back({"pick", [](Rng& r) {
                 const std::size_t b = dim(r, 1, 4), c = dim(r, 2, 4);
                 std::vector<int> idx(b);
                 for (int& i : idx) i = static_cast<int>(r.below(c));
                 return unary(r, random_tensor(r, {b, c}), [idx](ad::Var x) { return ad::pick(x, idx); });
               }});
  g.push_back({"pairwise_sq_dist", [](Rng& r) {
                 const std::size_t d = dim(r, 1, 4);
                 return binary(r, random_tensor(r, {dim(r, 1, 4), d}), random_tensor(r, {dim(r, 1, 4), d}),
                               ad::pairwise_sq_dist);
               }});
  return g;
}

inline std::vector<Named> loss_cases() {
  std::vector<Named> g;
  g.push_back({"classification_loss", [](Rng& r) {
                 const std::size_t b = dim(r, 1, 5), c = dim(r, 2, 4);
                 std::vector<int> y(b);
                 for (int& v : y) v = static_cast<int>(r.below(c));
                 return Case{{random_tensor(r, {b, c}, -2.0, 2.0)},
                             [y](const std::vector<ad::Var>& v) {
                               return dmr::classification_loss(ad::softmax(v[0]), y);
                             },
                             {}};
               }});
  g.push_back({"rationale_regularizer", [](Rng& r) {
                 const std::size_t b = dim(r, 1, 3), l = dim(r, 2, 6);
                 const Tensor valid = random_valid(r, b, l);
                 const double l1 = r.uniform(0.0, 2.0), l2 = r.uniform(0.0, 2.0);
                 // Neighbouring entries at least 0.01 apart keep |z_i - z_{i-1}| smooth.
                 Tensor z({b, l});
                 for (double& v : z.data) v = 0.02 * static_cast<double>(r.below(50));
                 for (std::size_t i = 0; i < z.size(); ++i) z[i] += 0.001 * static_cast<double>(i);
                 return Case{{z},
                             [valid, l1, l2](const std::vector<ad::Var>& v) {
                               return dmr::rationale_regularizer(v[0], valid, l1, l2);
                             },
                             {}};
               }});
  g.push_back({"cmd_loss", [](Rng& r) {
                 const std::size_t n = dim(r, 2, 6), d = dim(r, 1, 4);
                 return Case{{random_tensor(r, {n, d}, 0.05, 0.95), random_tensor(r, {n, d}, 0.05, 0.95)},
                             [](const std::vector<ad::Var>& v) { return dmr::cmd_loss(v[0], v[1], 5); },
                             {}};
               }});
  g.push_back({"mmd_loss", [](Rng& r) {
                 const std::size_t d = dim(r, 1, 4);
                 const double bw = r.uniform(0.5, 2.0);
                 return Case{{random_tensor(r, {dim(r, 1, 6), d}), random_tensor(r, {dim(r, 1, 6), d})},
                             [bw](const std::vector<ad::Var>& v) { return dmr::mmd_loss(v[0], v[1], bw); },
                             {}};
               }});
  g.push_back({"coral_loss", [](Rng& r) {
                 const std::size_t n = dim(r, 2, 6), d = dim(r, 1, 4);
                 return Case{{random_tensor(r, {n, d}), random_tensor(r, {n, d})},
                             [](const std::vector<ad::Var>& v) { return dmr::coral_loss(v[0], v[1]); },
                             {}};
               }});
  g.push_back({"distillation_loss", [](Rng& r) {
                 const std::size_t b = dim(r, 1, 4), c = dim(r, 2, 4);
                 // The teacher side is detached, so only the student logits are checked.
                 return Case{{random_simplex(r, b, c), random_tensor(r, {b, c}, -2.0, 2.0)},
                             [](const std::vector<ad::Var>& v) {
                               return dmr::distillation_loss(v[0], ad::softmax(v[1]));
                             },
                             {true, false}};
               }});
  return g;
}

}  // namespace gradcheck
