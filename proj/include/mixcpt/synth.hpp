// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic factual corpora for the desk-scale experiments. Entities are
// invented pronounceable words, each carrying a few attribute facts whose
// values are unique words, so every answer occurs in exactly one document.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "mixcpt/datapipe.hpp"
#include "mixcpt/error.hpp"
#include "mixcpt/rng.hpp"

namespace mixcpt {

struct Fact {
  std::string entity;
  std::string attribute;
  std::string value;
  friend bool operator==(const Fact&, const Fact&) = default;
};

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t n_entities = 32;  // domain entities
  std::size_t n_general = 64;   // general entities
  std::size_t attrs_per_entity = 2;
  double heldout_fraction = 0.5;  // share of domain entities whose probes are held out

  void validate() const {
    if (n_entities < 1 || n_general < 1) throw ParameterError("synth_corpus: entity counts must be >= 1");
    if (attrs_per_entity < 1 || attrs_per_entity > attribute_names().size()) {
      throw ParameterError("synth_corpus: attrs_per_entity must be in [1, " +
                           std::to_string(attribute_names().size()) + "]");
    }
    if (heldout_fraction < 0.0 || heldout_fraction > 1.0) {
      throw ParameterError("synth_corpus: heldout_fraction must be in [0, 1]");
    }
  }

  static const std::vector<std::string>& attribute_names() {
    static const std::vector<std::string> names = {"color", "city", "pet", "food", "job", "sport"};
    return names;
  }
};

struct SynthCorpus {
  std::vector<Fact> domain_facts;
  std::vector<Fact> general_facts;
  std::vector<RawDocument> domain_docs;
  std::vector<InstructionPair> seen_probes;     // domain QA on non-held-out entities
  std::vector<InstructionPair> heldout_probes;  // domain QA never used for training
  std::vector<RawDocument> general_docs;
  std::vector<InstructionPair> general_pairs;
  std::vector<PreferenceTriple> general_triples;
  std::vector<std::string> heldout_entities;
};

inline std::string fact_sentence(const Fact& f) { return f.entity + " " + f.attribute + " is " + f.value + "."; }
inline std::string fact_question(const Fact& f) { return "What is " + f.entity + " " + f.attribute + "?"; }

namespace detail {

class WordMaker {
 public:
  explicit WordMaker(Rng& rng) : rng_(rng) {}

  /// A fresh word of `syllables` consonant-vowel pairs, plus a closing
  /// consonant when `closed` is set. Never repeats a word already issued.
  std::string make(std::size_t syllables, bool closed) {
    static constexpr std::string_view kCons = "bdfgklmnprstvz";
    static constexpr std::string_view kVow = "aeiou";
    for (;;) {
      std::string w;
      for (std::size_t s = 0; s < syllables; ++s) {
        w.push_back(kCons[rng_.below(kCons.size())]);
        w.push_back(kVow[rng_.below(kVow.size())]);
      }
      if (closed) w.push_back(kCons[rng_.below(kCons.size())]);
      if (used_.insert(w).second) return w;
    }
  }

 private:
  Rng& rng_;
  std::set<std::string> used_;
};

inline std::vector<Fact> make_facts(std::size_t n, std::size_t per_entity, WordMaker& words, Rng& rng) {
  const auto& attrs = SynthConfig::attribute_names();
  std::vector<Fact> facts;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string entity = words.make(2, false);
    std::vector<std::size_t> order(attrs.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(per_entity));
    std::sort(chosen.begin(), chosen.end());
    for (auto a : chosen) facts.push_back({entity, attrs[a], words.make(1, true)});
  }
  return facts;
}

inline std::vector<RawDocument> docs_by_entity(const std::vector<Fact>& facts) {
  std::vector<RawDocument> docs;
  for (std::size_t i = 0; i < facts.size();) {
    std::string text;
    std::size_t j = i;
    for (; j < facts.size() && facts[j].entity == facts[i].entity; ++j) {
      if (!text.empty()) text.push_back(' ');
      text += fact_sentence(facts[j]);
    }
    docs.push_back({text, std::nullopt});
    i = j;
  }
  return docs;
}

}  // namespace detail

/// Deterministic under cfg.seed. Entity names (four letters) and values
/// (three letters) come from one pool of unique words, so domain and general
/// vocabularies are disjoint and each value belongs to exactly one fact.
inline SynthCorpus synth_corpus(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  detail::WordMaker words(rng);
  SynthCorpus out;
  out.domain_facts = detail::make_facts(cfg.n_entities, cfg.attrs_per_entity, words, rng);
  out.general_facts = detail::make_facts(cfg.n_general, cfg.attrs_per_entity, words, rng);
  out.domain_docs = detail::docs_by_entity(out.domain_facts);
  out.general_docs = detail::docs_by_entity(out.general_facts);

  std::vector<std::size_t> entity_order(cfg.n_entities);
  for (std::size_t i = 0; i < entity_order.size(); ++i) entity_order[i] = i;
  rng.shuffle(std::span<std::size_t>(entity_order));
  const auto n_heldout =
      static_cast<std::size_t>(std::llround(cfg.heldout_fraction * static_cast<double>(cfg.n_entities)));
  std::vector<bool> heldout(cfg.n_entities, false);
  for (std::size_t i = 0; i < n_heldout; ++i) heldout[entity_order[i]] = true;

  for (std::size_t f = 0, e = 0; f < out.domain_facts.size(); ++f) {
    if (f > 0 && out.domain_facts[f].entity != out.domain_facts[f - 1].entity) ++e;
    const auto& fact = out.domain_facts[f];
    InstructionPair probe{fact_question(fact), fact.value};
    if (heldout[e]) {
      out.heldout_probes.push_back(std::move(probe));
      if (out.heldout_entities.empty() || out.heldout_entities.back() != fact.entity) {
        out.heldout_entities.push_back(fact.entity);
      }
    } else {
      out.seen_probes.push_back(std::move(probe));
    }
  }

  for (std::size_t f = 0; f < out.general_facts.size(); ++f) {
    const auto& fact = out.general_facts[f];
    out.general_pairs.push_back({fact_question(fact), fact.value});
    if (out.general_facts.size() > 1) {
      // A wrong value taken from another general fact.
      std::size_t other = static_cast<std::size_t>(rng.below(out.general_facts.size() - 1));
      if (other >= f) ++other;
      out.general_triples.push_back({fact_question(fact), fact.value, out.general_facts[other].value});
    }
  }
  return out;
}

inline SynthCorpus synth_corpus(std::uint64_t seed, std::size_t n_entities, std::size_t n_general) {
  SynthConfig cfg;
  cfg.seed = seed;
  cfg.n_entities = n_entities;
  cfg.n_general = n_general;
  return synth_corpus(cfg);
}

}  // namespace mixcpt
