#include "dmr/params.hpp"

#include <cmath>
#include <cstring>

#include "dmr/error.hpp"

namespace dmr {

std::size_t ParameterSet::add(std::string name, Tensor init) {
  for (const Parameter& p : params_) {
    if (p.name == name) throw Error("duplicate parameter " + name);
  }
  Tensor grad(init.shape);
  params_.push_back(Parameter{std::move(name), std::move(init), std::move(grad)});
  return params_.size() - 1;
}

Parameter& ParameterSet::at(std::string_view name) {
  for (Parameter& p : params_)
    if (p.name == name) return p;
  throw Error("no parameter named " + std::string(name));
}

const Parameter& ParameterSet::at(std::string_view name) const {
  return const_cast<ParameterSet*>(this)->at(name);
}

void ParameterSet::zero_grad() {
  for (Parameter& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
}

double ParameterSet::max_abs_grad() const {
  double m = 0.0;
  for (const Parameter& p : params_)
    for (double g : p.grad.data) m = std::max(m, std::abs(g));
  return m;
}

std::uint64_t ParameterSet::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const Parameter& p : params_) {
    feed(p.name.data(), p.name.size());
    for (std::size_t d : p.value.shape) feed(&d, sizeof d);
    feed(p.value.data.data(), p.value.size() * sizeof(double));
  }
  return h;
}

BoundParams::BoundParams(ad::Tape& tape, const ParameterSet& params, bool trainable)
    : trainable_(trainable) {
  vars_.reserve(params.size());
  for (const Parameter& p : params) {
    vars_.push_back(trainable ? tape.variable(p.value) : tape.constant(p.value));
  }
}

void BoundParams::harvest_into(ParameterSet& target) const {
  if (target.size() != vars_.size()) throw Error("harvest_into: parameter set does not match binding");
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    const Tensor* g = vars_[i].tape().grad_if_any(vars_[i].id());
    if (!g) continue;
    Tensor& acc = target[i].grad;
    if (acc.shape != g->shape) throw Error("harvest_into: shape mismatch for " + target[i].name);
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += (*g)[k];
  }
}

double BoundParams::max_abs_grad() const {
  double m = 0.0;
  for (const ad::Var& v : vars_) {
    if (const Tensor* g = v.tape().grad_if_any(v.id())) {
      for (double x : g->data) m = std::max(m, std::abs(x));
    }
  }
  return m;
}

}  // namespace dmr
