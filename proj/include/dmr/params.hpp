#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dmr/autodiff.hpp"
#include "dmr/tensor.hpp"

namespace dmr {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Named parameter arrays of one network, in registration order.
class ParameterSet {
 public:
  // Returns the index of the new parameter.
  std::size_t add(std::string name, Tensor init);

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  // Largest |grad| entry across all parameters.
  double max_abs_grad() const;
  // FNV-1a over names, shapes and value bytes.
  std::uint64_t checksum() const;

 private:
  std::vector<Parameter> params_;
};

// A ParameterSet placed on a tape as leaves. Trainable bindings create
// requires-grad leaves; frozen ones create constants.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParameterSet& params, bool trainable);

  ad::Var operator[](std::size_t i) const { return vars_[i]; }
  std::size_t size() const { return vars_.size(); }
  bool trainable() const { return trainable_; }
  // Adds the tape gradient of every leaf into the matching Parameter::grad
  // of `target`, which must be the set this binding was made from.
  void harvest_into(ParameterSet& target) const;
  // Largest |gradient| that reached any leaf (0 when none did).
  double max_abs_grad() const;

 private:
  std::vector<ad::Var> vars_;
  bool trainable_;
};

}  // namespace dmr
