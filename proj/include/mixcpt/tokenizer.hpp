// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mixcpt/error.hpp"
#include "mixcpt/ops.hpp"

namespace mixcpt {

/// Byte-level vocabulary: ids 0..255 are raw bytes, followed by the special
/// ids below.
namespace special {
inline constexpr TokenId kSep = 256;  // sample separator / end of sequence
inline constexpr TokenId kSystem = 257;
inline constexpr TokenId kUser = 258;
inline constexpr TokenId kAssistant = 259;
inline constexpr TokenId kPad = 260;
}  // namespace special

inline constexpr std::uint32_t kTokenizerVocabSize = 261;

inline bool is_special(TokenId id) noexcept { return id >= 256; }

inline std::vector<TokenId> tokenize(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
  return ids;
}

enum class SpecialIds {
  kReject,  // special ids raise InputError
  kSkip,    // special ids are dropped
};

inline std::string detokenize(std::span<const TokenId> ids, SpecialIds mode = SpecialIds::kReject) {
  std::string out;
  out.reserve(ids.size());
  for (auto id : ids) {
    if (is_special(id)) {
      if (mode == SpecialIds::kSkip) continue;
      throw InputError("detokenize: special id " + std::to_string(id) + " in strict mode");
    }
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

}  // namespace mixcpt
