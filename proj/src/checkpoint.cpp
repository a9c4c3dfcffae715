#include "dmr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "dmr/error.hpp"

namespace dmr {

namespace {

constexpr const char* kMagic = "dmr-checkpoint 1";

void put_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>(bits & 0xff));
    bits >>= 8;
  }
}

double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | static_cast<unsigned char>(p[i]);
  return std::bit_cast<double>(bits);
}

bool has_space(const std::string& s) {
  return s.empty() || s.find_first_of(" \t\r\n") != std::string::npos;
}

}  // namespace

const Tensor& Checkpoint::array(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return t;
  throw DataError("checkpoint has no array " + name);
}

const std::string& Checkpoint::meta_value(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw DataError("checkpoint has no meta key " + key);
  return it->second;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string header = std::string(kMagic) + "\n";
  for (const auto& [k, v] : ckpt.meta) {
    if (has_space(k) || has_space(v)) throw Error("checkpoint meta must be non-empty without whitespace: " + k);
    header += "meta " + k + " " + v + "\n";
  }
  std::string payload;
  for (const auto& [name, t] : ckpt.arrays) {
    if (has_space(name)) throw Error("checkpoint array name must not contain whitespace: " + name);
    header += "array " + name + " " + std::to_string(t.rank());
    for (std::size_t d : t.shape) header += " " + std::to_string(d);
    header += " " + std::to_string(payload.size()) + "\n";
    for (double v : t.data) put_le(payload, v);
  }
  header += "payload\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Checkpoint ckpt;
  struct Pending {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Pending> pending;
  std::size_t pos = 0, line_no = 0;
  bool done = false;
  while (!done) {
    const std::size_t eol = bytes.find('\n', pos);
    if (eol == std::string::npos) throw DataError("truncated checkpoint header", line_no + 1);
    const std::string line = bytes.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (line_no == 1) {
      if (line != kMagic) throw DataError("not a checkpoint file", 1);
      continue;
    }
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "payload") {
      done = true;
    } else if (tag == "meta") {
      std::string k, v;
      if (!(ls >> k >> v)) throw DataError("bad meta line", line_no);
      ckpt.meta[k] = v;
    } else if (tag == "array") {
      Pending p;
      std::size_t rank = 0;
      if (!(ls >> p.name >> rank)) throw DataError("bad array line", line_no);
      p.shape.resize(rank);
      for (std::size_t& d : p.shape)
        if (!(ls >> d)) throw DataError("bad array shape", line_no);
      if (!(ls >> p.offset)) throw DataError("bad array offset", line_no);
      pending.push_back(std::move(p));
    } else {
      throw DataError("unknown checkpoint header line '" + line + "'", line_no);
    }
  }
  const std::size_t payload_size = bytes.size() - pos;
  for (Pending& p : pending) {
    const std::size_t n = shape_size(p.shape);
    if (p.offset % 8 != 0 || p.offset + n * 8 > payload_size) {
      throw DataError("checkpoint array " + p.name + " exceeds payload");
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = get_le(bytes.data() + pos + p.offset + i * 8);
    ckpt.arrays.emplace_back(p.name, Tensor(std::move(p.shape), std::move(values)));
  }
  return ckpt;
}

}  // namespace dmr
