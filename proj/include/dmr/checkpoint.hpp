#pragma once

// Checkpoint file layout:
//
//   dmr-checkpoint 1
//   meta <key> <value>                      (zero or more)
//   array <name> <rank> <d0> ... <offset>   (one per array, offset in bytes)
//   payload
//   <concatenated little-endian IEEE-754 binary64 values>
//
// Keys and names contain no whitespace. Values are written with full
// precision, so a save/load round trip is bit-exact.

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dmr/tensor.hpp"

namespace dmr {

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> arrays;

  const Tensor& array(const std::string& name) const;
  const std::string& meta_value(const std::string& key) const;
  bool operator==(const Checkpoint&) const = default;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace dmr
