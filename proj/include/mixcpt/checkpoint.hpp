// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

// Binary checkpoint layout (all integers and floats little-endian):
//
//   offset  size  field
//   0       8     magic "MXCPT1\0\0"
//   8       4     format version (u32, currently 1)
//   12      20    vocab_size, d_model, n_layers, n_heads, max_seq_len (u32 each)
//   32      8     optimizer step count (u64)
//   40      8     RNG seed (u64)
//   48      4*N   parameters as f32, canonical order (see WeightSet)

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mixcpt/error.hpp"
#include "mixcpt/model.hpp"

namespace mixcpt {

inline constexpr std::array<char, 8> kCheckpointMagic = {'M', 'X', 'C', 'P', 'T', '1', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointHeaderSize = 48;

struct Checkpoint {
  Parameters<float> params;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;

  const ModelConfig& config() const noexcept { return params.config; }
};

namespace detail {

template <class U>
void put_le(std::vector<unsigned char>& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>(value >> (8 * i)));
}

template <class U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
  std::vector<unsigned char> out;
  out.reserve(kCheckpointHeaderSize + 4 * ck.params.count());
  out.insert(out.end(), kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const auto& c = ck.params.config;
  for (auto f : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.max_seq_len}) detail::put_le<std::uint32_t>(out, f);
  detail::put_le<std::uint64_t>(out, ck.step);
  detail::put_le<std::uint64_t>(out, ck.seed);
  ck.params.for_each([&out](const Tensor<float>& t) {
    for (float v : t.data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  });
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < kCheckpointHeaderSize) {
    throw FormatError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes, header needs " +
                      std::to_string(kCheckpointHeaderSize));
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw FormatError("checkpoint magic mismatch");
  }
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 8);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig cfg;
  cfg.vocab_size = detail::get_le<std::uint32_t>(bytes.data() + 12);
  cfg.d_model = detail::get_le<std::uint32_t>(bytes.data() + 16);
  cfg.n_layers = detail::get_le<std::uint32_t>(bytes.data() + 20);
  cfg.n_heads = detail::get_le<std::uint32_t>(bytes.data() + 24);
  cfg.max_seq_len = detail::get_le<std::uint32_t>(bytes.data() + 28);
  try {
    cfg.validate();
  } catch (const ParameterError& e) {
    throw FormatError(std::string("checkpoint holds an invalid model config: ") + e.what());
  }
  Checkpoint ck;
  ck.step = detail::get_le<std::uint64_t>(bytes.data() + 32);
  ck.seed = detail::get_le<std::uint64_t>(bytes.data() + 40);
  ck.params = shaped_parameters<float>(cfg);
  const std::size_t expected = kCheckpointHeaderSize + 4 * ck.params.count();
  if (bytes.size() != expected) {
    throw FormatError("checkpoint size " + std::to_string(bytes.size()) + " does not match embedded config (expected " +
                      std::to_string(expected) + " bytes)");
  }
  const unsigned char* p = bytes.data() + kCheckpointHeaderSize;
  ck.params.for_each([&p](Tensor<float>& t) {
    for (auto& v : t.data()) {
      v = std::bit_cast<float>(detail::get_le<std::uint32_t>(p));
      p += 4;
    }
  });
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open checkpoint for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing checkpoint: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace mixcpt
