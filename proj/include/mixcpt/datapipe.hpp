// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

// Unified knowledge format: raw documents, instruction pairs and preference
// triples become template-free token sequences, which are shuffled,
// separated by SEP and cut into fixed-length training blocks.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mixcpt/error.hpp"
#include "mixcpt/rng.hpp"
#include "mixcpt/tokenizer.hpp"

namespace mixcpt {

enum class SourceKind { kCpt, kSft, kDpo };

inline std::string_view to_string(SourceKind k) {
  switch (k) {
    case SourceKind::kCpt:
      return "cpt";
    case SourceKind::kSft:
      return "sft";
    case SourceKind::kDpo:
      return "dpo";
  }
  return "?";
}

inline SourceKind parse_source_kind(std::string_view s) {
  if (s == "cpt") return SourceKind::kCpt;
  if (s == "sft") return SourceKind::kSft;
  if (s == "dpo") return SourceKind::kDpo;
  throw ParameterError("unknown data kind '" + std::string(s) + "' (expected cpt, sft or dpo)");
}

struct RawDocument {
  std::string text;
  std::optional<double> score;  // quality score in [0, 1], when the corpus provides one
  friend bool operator==(const RawDocument&, const RawDocument&) = default;
};

struct InstructionPair {
  std::string query;
  std::string response;
  friend bool operator==(const InstructionPair&, const InstructionPair&) = default;
};

struct PreferenceTriple {
  std::string query;
  std::string chosen;
  std::string rejected;
  friend bool operator==(const PreferenceTriple&, const PreferenceTriple&) = default;
};

using Record = std::variant<RawDocument, InstructionPair, PreferenceTriple>;

/// The (query, response) view used for chat templating; triples use the chosen
/// response.
inline InstructionPair positive_pair(const InstructionPair& p) { return p; }
inline InstructionPair positive_pair(const PreferenceTriple& t) { return {t.query, t.chosen}; }

struct UnifiedSample {
  std::vector<TokenId> tokens;
  SourceKind source = SourceKind::kCpt;
  friend bool operator==(const UnifiedSample&, const UnifiedSample&) = default;
};

struct PackedBlock {
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> mask;
  friend bool operator==(const PackedBlock&, const PackedBlock&) = default;
};

namespace detail {
inline void require_text(const std::string& s, const char* what) {
  if (s.empty()) throw InputError(std::string("empty ") + what);
}
inline std::vector<TokenId> concat_tokens(std::string_view a, std::string_view b) {
  auto ids = tokenize(a);
  auto tail = tokenize(b);
  ids.insert(ids.end(), tail.begin(), tail.end());
  return ids;
}
}  // namespace detail

inline UnifiedSample to_unified(const RawDocument& d) {
  detail::require_text(d.text, "document text");
  return {tokenize(d.text), SourceKind::kCpt};
}

/// [q; r] with no delimiter between query and response.
inline UnifiedSample to_unified(const InstructionPair& p) {
  detail::require_text(p.query, "instruction query");
  detail::require_text(p.response, "instruction response");
  return {detail::concat_tokens(p.query, p.response), SourceKind::kSft};
}

/// [q; r+]; the rejected response is not used for pre-training.
inline UnifiedSample to_unified(const PreferenceTriple& t) {
  detail::require_text(t.query, "preference query");
  detail::require_text(t.chosen, "chosen response");
  detail::require_text(t.rejected, "rejected response");
  if (t.chosen == t.rejected) throw InputError("preference triple has identical chosen and rejected responses");
  return {detail::concat_tokens(t.query, t.chosen), SourceKind::kDpo};
}

inline UnifiedSample to_unified(const Record& r) {
  return std::visit([](const auto& rec) { return to_unified(rec); }, r);
}

enum class PackOrder {
  kGlobalShuffle,      // all kinds shuffled together
  kPerKindSequential,  // shuffled within each kind, then cpt, sft, dpo back to back
};

/// Concatenates samples with one SEP after each and cuts the stream into
/// blocks of exactly max_seq_len tokens. A sample may continue into the next
/// block. The final partial block is right-padded with PAD, mask 0 on pads;
/// every other position has mask 1. With no seed the input order is kept.
inline std::vector<PackedBlock> pack_blocks(std::vector<UnifiedSample> samples, std::size_t max_seq_len,
                                            std::optional<std::uint64_t> shuffle_seed,
                                            PackOrder order = PackOrder::kGlobalShuffle) {
  if (max_seq_len < 2) throw ParameterError("pack_blocks: max_seq_len must be >= 2");
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    if (order == PackOrder::kGlobalShuffle) {
      rng.shuffle(std::span<UnifiedSample>(samples));
    } else {
      std::vector<UnifiedSample> ordered;
      ordered.reserve(samples.size());
      for (auto kind : {SourceKind::kCpt, SourceKind::kSft, SourceKind::kDpo}) {
        std::vector<UnifiedSample> group;
        for (auto& s : samples) {
          if (s.source == kind) group.push_back(std::move(s));
        }
        rng.shuffle(std::span<UnifiedSample>(group));
        for (auto& s : group) ordered.push_back(std::move(s));
      }
      samples = std::move(ordered);
    }
  }
  std::vector<TokenId> stream;
  for (const auto& s : samples) {
    stream.insert(stream.end(), s.tokens.begin(), s.tokens.end());
    stream.push_back(special::kSep);
  }
  std::vector<PackedBlock> blocks;
  for (std::size_t begin = 0; begin < stream.size(); begin += max_seq_len) {
    PackedBlock b;
    b.tokens.assign(max_seq_len, special::kPad);
    b.mask.assign(max_seq_len, 0);
    const std::size_t n = std::min(max_seq_len, stream.size() - begin);
    for (std::size_t i = 0; i < n; ++i) {
      b.tokens[i] = stream[begin + i];
      b.mask[i] = 1;
    }
    blocks.push_back(std::move(b));
  }
  return blocks;
}

// ---------------------------------------------------------------------------
// JSONL

namespace detail {

inline const std::string& require_string(const nlohmann::json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw ParseError("line " + std::to_string(line) + ": missing required field \"" + key + "\"");
  }
  if (!it->is_string()) {
    throw ParseError("line " + std::to_string(line) + ": field \"" + key + "\" must be a string");
  }
  return it->get_ref<const std::string&>();
}

}  // namespace detail

/// Parses one JSONL record of the given kind. `line` is 1-based, for messages.
inline Record parse_record(std::string_view text, SourceKind kind, std::size_t line) {
  nlohmann::json obj;
  try {
    obj = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("line " + std::to_string(line) + ": malformed JSON (" + e.what() + ")");
  }
  if (!obj.is_object()) throw ParseError("line " + std::to_string(line) + ": expected a JSON object");
  switch (kind) {
    case SourceKind::kCpt: {
      RawDocument d{detail::require_string(obj, "text", line), std::nullopt};
      if (auto it = obj.find("score"); it != obj.end()) {
        if (!it->is_number()) throw ParseError("line " + std::to_string(line) + ": \"score\" must be a number");
        d.score = it->get<double>();
      }
      return d;
    }
    case SourceKind::kSft:
      return InstructionPair{detail::require_string(obj, "query", line), detail::require_string(obj, "response", line)};
    case SourceKind::kDpo:
      return PreferenceTriple{detail::require_string(obj, "query", line), detail::require_string(obj, "chosen", line),
                              detail::require_string(obj, "rejected", line)};
  }
  throw ParseError("unreachable");
}

/// Records in file order. When min_quality is set, scored records below it are
/// dropped; records without a score are kept. Blank lines are skipped.
inline std::vector<Record> load_jsonl(const std::filesystem::path& path, SourceKind kind,
                                      std::optional<double> min_quality = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open data file: " + path.string());
  std::vector<Record> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto rec = parse_record(line, kind, lineno);
    if (min_quality) {
      if (const auto* d = std::get_if<RawDocument>(&rec); d && d->score && *d->score < *min_quality) continue;
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline nlohmann::json to_json(const Record& r) {
  return std::visit(
      [](const auto& rec) -> nlohmann::json {
        using R = std::decay_t<decltype(rec)>;
        if constexpr (std::is_same_v<R, RawDocument>) {
          nlohmann::json j{{"text", rec.text}};
          if (rec.score) j["score"] = *rec.score;
          return j;
        } else if constexpr (std::is_same_v<R, InstructionPair>) {
          return {{"query", rec.query}, {"response", rec.response}};
        } else {
          return {{"query", rec.query}, {"chosen", rec.chosen}, {"rejected", rec.rejected}};
        }
      },
      r);
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<Record>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open for writing: " + path.string());
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

/// Packed blocks as JSONL: {"tokens": [...], "mask": [...]} per line.
inline void write_blocks(const std::filesystem::path& path, const std::vector<PackedBlock>& blocks) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open for writing: " + path.string());
  for (const auto& b : blocks) out << nlohmann::json{{"tokens", b.tokens}, {"mask", b.mask}}.dump() << '\n';
}

inline std::vector<PackedBlock> read_blocks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open blocks file: " + path.string());
  std::vector<PackedBlock> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      PackedBlock b{j.at("tokens").get<std::vector<TokenId>>(), j.at("mask").get<std::vector<std::uint8_t>>()};
      if (b.tokens.size() != b.mask.size() || b.tokens.empty()) {
        throw ParseError("line " + std::to_string(lineno) + ": tokens and mask lengths differ");
      }
      out.push_back(std::move(b));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(lineno) + ": bad block (" + e.what() + ")");
    }
  }
  return out;
}

}  // namespace mixcpt
