// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container:
//
//   "TLMCKPT1" | u64 header length | JSON header | tensors
//
// The header records format_version, dims (n, m, p, vocab_size), cell kind,
// vocabulary and table hashes, RNG state, optimizer state, the training
// config, and the tensor list. Tensors follow in header order, row-major,
// little-endian IEEE-754 float64.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "tablelm/model_core.hpp"

namespace tablelm {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  std::size_t vocab_size = 0;
  std::uint64_t vocab_hash = 0;
  std::uint64_t table_hash = 0;
  std::string rng_state;
  nlohmann::json optimizer = nlohmann::json::object();
  nlohmann::json config = nlohmann::json::object();
};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("checkpoint: truncated");
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(b[k]) << (8 * k);
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  const auto& P = ck.params;
  nlohmann::json h;
  h["format_version"] = kCheckpointVersion;
  h["n"] = P.n;
  h["m"] = P.m;
  h["p"] = P.p;
  h["vocab_size"] = ck.vocab_size;
  h["cell"] = to_string(P.kind);
  h["vocab_hash"] = hash_hex(ck.vocab_hash);
  h["table_hash"] = hash_hex(ck.table_hash);
  h["rng_state"] = ck.rng_state;
  h["optimizer"] = ck.optimizer;
  h["config"] = ck.config;
  auto& tensors = h["tensors"] = nlohmann::json::array();
  P.for_each([&](const char* name, const Matrix& t) {
    tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  });
  const std::string header = h.dump();
  os.write("TLMCKPT1", 8);
  detail::put_u64(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  P.for_each([&](const char*, const Matrix& t) {
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        std::uint64_t bits;
        const double v = t(r, c);
        std::memcpy(&bits, &v, 8);
        detail::put_u64(os, bits);
      }
  });
  if (!os) throw Error("write_checkpoint: stream error");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, "TLMCKPT1", 8) != 0) throw FormatError("checkpoint: bad magic");
  const auto len = detail::get_u64(is);
  if (len > (1ULL << 30)) throw FormatError("checkpoint: implausible header length");
  std::string header(len, '\0');
  if (!is.read(header.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint: truncated header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
  try {
    if (h.at("format_version").get<int>() != kCheckpointVersion)
      throw FormatError("checkpoint: unsupported format version");
    Checkpoint ck;
    ck.params = ModelParams::zeros(h.at("n").get<std::size_t>(), h.at("m").get<std::size_t>(),
                                   h.at("p").get<std::size_t>(), parse_cell_kind(h.at("cell").get<std::string>()));
    ck.vocab_size = h.at("vocab_size").get<std::size_t>();
    ck.vocab_hash = parse_hash_hex(h.at("vocab_hash").get<std::string>());
    ck.table_hash = parse_hash_hex(h.at("table_hash").get<std::string>());
    ck.rng_state = h.at("rng_state").get<std::string>();
    ck.optimizer = h.at("optimizer");
    ck.config = h.at("config");
    std::size_t idx = 0;
    const auto& tensors = h.at("tensors");
    ck.params.for_each([&](const char* name, Matrix& t) {
      const auto& d = tensors.at(idx++);
      if (d.at("name").get<std::string>() != name || d.at("rows").get<Eigen::Index>() != t.rows() ||
          d.at("cols").get<Eigen::Index>() != t.cols())
        throw FormatError(std::string("checkpoint: tensor ") + name + " has unexpected shape");
      for (Eigen::Index r = 0; r < t.rows(); ++r)
        for (Eigen::Index c = 0; c < t.cols(); ++c) {
          const std::uint64_t bits = detail::get_u64(is);
          std::memcpy(&t(r, c), &bits, 8);
        }
    });
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
}

/// Writes to `path` through a temporary file and a rename, so a failed write
/// never leaves a partial checkpoint behind.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    write_checkpoint(os, ck);
    os.flush();
    if (!os) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return read_checkpoint(is);
}

}  // namespace tablelm
