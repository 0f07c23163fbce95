#pragma once

// Versioned binary checkpoints. Layout (all integers and IEEE doubles are
// serialized little-endian, byte by byte, so files round-trip across hosts):
//
//   "TICLCKPT" | u32 version | model config | u64 step | u64 master_seed
//   | u8 has_optimizer [| u64 adam_t]
//   | u32 param_count | manifest entries (u16 name_len, name, u32 rows, u32 cols)
//   | parameter doubles in manifest order
//   [| first-moment doubles | second-moment doubles, same manifest]
//
// The manifest is name-sorted, which is simply std::map iteration order.
// Writes go to "<path>.tmp" and are renamed into place, so a crash mid-write
// never leaves a half-written file at the target path.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ticl/errors.hpp"
#include "ticl/model.hpp"
#include "ticl/optim.hpp"
#include "ticl/tensor.hpp"

namespace ticl {

inline constexpr char kCheckpointMagic[8] = {'T', 'I', 'C', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  PfnModelD model;
  std::uint64_t step = 0;
  std::uint64_t master_seed = 0;
  bool has_optimizer = false;
  AdamState opt;
};

namespace detail {

inline void put_bytes(std::ostream& os, std::uint64_t v, int n) {
  char buf[8];
  for (int i = 0; i < n; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, n);
}

inline std::uint64_t take_bytes(std::istream& is, int n) {
  char buf[8];
  is.read(buf, n);
  if (!is) throw IoError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  return v;
}

inline void put_u16(std::ostream& os, std::uint16_t v) { put_bytes(os, v, 2); }
inline void put_u32(std::ostream& os, std::uint32_t v) { put_bytes(os, v, 4); }
inline void put_u64(std::ostream& os, std::uint64_t v) { put_bytes(os, v, 8); }
inline void put_i32(std::ostream& os, std::int32_t v) {
  put_bytes(os, static_cast<std::uint32_t>(v), 4);
}
inline std::uint16_t take_u16(std::istream& is) { return static_cast<std::uint16_t>(take_bytes(is, 2)); }
inline std::uint32_t take_u32(std::istream& is) { return static_cast<std::uint32_t>(take_bytes(is, 4)); }
inline std::uint64_t take_u64(std::istream& is) { return take_bytes(is, 8); }
inline std::int32_t take_i32(std::istream& is) {
  return static_cast<std::int32_t>(static_cast<std::uint32_t>(take_bytes(is, 4)));
}

inline void put_mat(std::ostream& os, const MatD& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      put_u64(os, std::bit_cast<std::uint64_t>(m(i, j)));
}

inline void take_mat(std::istream& is, MatD& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = std::bit_cast<double>(take_u64(is));
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  namespace fs = std::filesystem;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot open " + tmp + " for writing");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_u32(os, kCheckpointVersion);

    const ModelConfig& c = ckpt.model.cfg;
    detail::put_u32(os, static_cast<std::uint32_t>(c.backbone));
    detail::put_i32(os, c.num_layers);
    detail::put_i32(os, c.embed_dim);
    detail::put_i32(os, c.hidden_dim);
    detail::put_i32(os, c.num_heads);
    detail::put_i32(os, c.state_dim);
    detail::put_i32(os, c.max_features);
    detail::put_i32(os, c.max_classes);
    detail::put_u64(os, c.seed);

    detail::put_u64(os, ckpt.step);
    detail::put_u64(os, ckpt.master_seed);
    detail::put_bytes(os, ckpt.has_optimizer ? 1 : 0, 1);
    if (ckpt.has_optimizer) detail::put_u64(os, ckpt.opt.t);

    detail::put_u32(os, static_cast<std::uint32_t>(ckpt.model.params.size()));
    for (const auto& [name, p] : ckpt.model.params) {
      detail::put_u16(os, static_cast<std::uint16_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put_u32(os, static_cast<std::uint32_t>(p.rows()));
      detail::put_u32(os, static_cast<std::uint32_t>(p.cols()));
    }
    for (const auto& [name, p] : ckpt.model.params) detail::put_mat(os, p);
    if (ckpt.has_optimizer) {
      for (const auto& [name, p] : ckpt.model.params) {
        auto it = ckpt.opt.m.find(name);
        if (it == ckpt.opt.m.end() || it->second.rows() != p.rows() || it->second.cols() != p.cols())
          throw ContractError("checkpoint: optimizer first moment missing or misshapen for " + name);
        detail::put_mat(os, it->second);
      }
      for (const auto& [name, p] : ckpt.model.params) {
        auto it = ckpt.opt.v.find(name);
        if (it == ckpt.opt.v.end() || it->second.rows() != p.rows() || it->second.cols() != p.cols())
          throw ContractError("checkpoint: optimizer second moment missing or misshapen for " + name);
        detail::put_mat(os, it->second);
      }
    }
    os.flush();
    if (!os) throw IoError("checkpoint: write to " + tmp + " failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("checkpoint: rename " + tmp + " -> " + path + ": " + ec.message());
}

// Loads a checkpoint, verifying magic and version. When `expect` is given the
// stored model config must match it field for field; a divergence (say, a
// checkpoint trained at a different embed_dim than the run is configured for)
// is reported as a config mismatch rather than surfacing later as a shape
// error deep inside a forward pass.
inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expect = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);

  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::char_traits<char>::compare(magic, kCheckpointMagic, 8) != 0)
    throw IoError("checkpoint: " + path + " is not a checkpoint (bad magic)");
  const std::uint32_t version = detail::take_u32(is);
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: " + path + " has format version " + std::to_string(version) +
                  ", expected " + std::to_string(kCheckpointVersion));

  Checkpoint ckpt;
  ModelConfig& c = ckpt.model.cfg;
  const std::uint32_t backbone = detail::take_u32(is);
  if (backbone > 2) throw IoError("checkpoint: invalid backbone tag " + std::to_string(backbone));
  c.backbone = static_cast<Backbone>(backbone);
  c.num_layers = detail::take_i32(is);
  c.embed_dim = detail::take_i32(is);
  c.hidden_dim = detail::take_i32(is);
  c.num_heads = detail::take_i32(is);
  c.state_dim = detail::take_i32(is);
  c.max_features = detail::take_i32(is);
  c.max_classes = detail::take_i32(is);
  c.seed = detail::take_u64(is);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw IoError("checkpoint: " + path + " carries an invalid model config: " + e.what());
  }

  ckpt.step = detail::take_u64(is);
  ckpt.master_seed = detail::take_u64(is);
  ckpt.has_optimizer = detail::take_bytes(is, 1) != 0;
  if (ckpt.has_optimizer) ckpt.opt.t = detail::take_u64(is);

  const std::uint32_t count = detail::take_u32(is);
  std::string prev;
  std::vector<std::pair<std::string, std::pair<std::uint32_t, std::uint32_t>>> manifest;
  manifest.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint16_t len = detail::take_u16(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw IoError("checkpoint: truncated file");
    if (k > 0 && !(prev < name))
      throw IoError("checkpoint: parameter manifest is not name-sorted at " + name);
    prev = name;
    const std::uint32_t rows = detail::take_u32(is);
    const std::uint32_t cols = detail::take_u32(is);
    if (rows == 0 || cols == 0)
      throw IoError("checkpoint: parameter " + name + " has empty shape");
    manifest.emplace_back(std::move(name), std::make_pair(rows, cols));
  }
  for (const auto& [name, shape] : manifest) {
    MatD p(shape.first, shape.second);
    detail::take_mat(is, p);
    ckpt.model.params.emplace(name, std::move(p));
  }
  if (ckpt.has_optimizer) {
    for (const auto& [name, shape] : manifest) {
      MatD m(shape.first, shape.second);
      detail::take_mat(is, m);
      ckpt.opt.m.emplace(name, std::move(m));
    }
    for (const auto& [name, shape] : manifest) {
      MatD v(shape.first, shape.second);
      detail::take_mat(is, v);
      ckpt.opt.v.emplace(name, std::move(v));
    }
  }
  is.peek();
  if (!is.eof()) throw IoError("checkpoint: " + path + " has trailing bytes past the blob");

  if (expect) {
    const ModelConfig& e = *expect;
    auto mismatch = [&](const char* field, auto stored, auto wanted) {
      throw ConfigError("checkpoint: config mismatch on " + std::string(field) + ": file has " +
                        std::to_string(stored) + ", run expects " + std::to_string(wanted));
    };
    if (c.backbone != e.backbone)
      throw ConfigError(std::string("checkpoint: config mismatch on backbone: file has ") +
                        backbone_name(c.backbone) + ", run expects " + backbone_name(e.backbone));
    if (c.num_layers != e.num_layers) mismatch("num_layers", c.num_layers, e.num_layers);
    if (c.embed_dim != e.embed_dim) mismatch("embed_dim", c.embed_dim, e.embed_dim);
    if (c.hidden_dim != e.hidden_dim) mismatch("hidden_dim", c.hidden_dim, e.hidden_dim);
    if (c.num_heads != e.num_heads) mismatch("num_heads", c.num_heads, e.num_heads);
    if (c.state_dim != e.state_dim) mismatch("state_dim", c.state_dim, e.state_dim);
    if (c.max_features != e.max_features) mismatch("max_features", c.max_features, e.max_features);
    if (c.max_classes != e.max_classes) mismatch("max_classes", c.max_classes, e.max_classes);
  }
  return ckpt;
}

}  // namespace ticl
