#pragma once

// Synthetic corpora for demos and tests: a two-domain template grammar and
// a corpus that teaches a model to loop.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "ctrlkit/errors.hpp"
#include "ctrlkit/registry.hpp"
#include "ctrlkit/rng.hpp"

namespace ctrlkit::synth {

struct Lexicon {
  std::vector<std::string> nouns, verbs, adjectives;
};

/// Distinct pronounceable pseudo-words. Verbs end in "s" and adjectives in
/// "ly", so the three classes never collide.
inline Lexicon make_lexicon(std::uint64_t seed, std::size_t nouns = 120, std::size_t verbs = 60,
                            std::size_t adjectives = 60) {
  static constexpr std::string_view consonants = "bdfgklmnprstvz";
  static constexpr std::string_view vowels = "aeiou";
  CounterRng rng(seed, {0x1E71C0});
  std::set<std::string> used{"the", "a"};
  auto word = [&](std::size_t syllables, std::string_view suffix) {
    for (;;) {
      std::string w;
      for (std::size_t s = 0; s < syllables; ++s) {
        w += consonants[rng.below(consonants.size())];
        w += vowels[rng.below(vowels.size())];
      }
      w += suffix;
      if (used.insert(w).second) return w;
    }
  };
  Lexicon lex;
  for (std::size_t i = 0; i < nouns; ++i) lex.nouns.push_back(word(2 + rng.below(2), ""));
  for (std::size_t i = 0; i < verbs; ++i) lex.verbs.push_back(word(1 + rng.below(2), "s"));
  for (std::size_t i = 0; i < adjectives; ++i) lex.adjectives.push_back(word(1 + rng.below(2), "ly"));
  return lex;
}

/// One subject-verb-object sentence as a word list, final "." included.
inline std::vector<std::string> svo_sentence(CounterRng& rng, const Lexicon& lex) {
  auto pick = [&](const std::vector<std::string>& v) { return v[rng.below(v.size())]; };
  const std::string det1 = rng.below(3) == 0 ? "a" : "the";
  const std::string det2 = rng.below(3) == 0 ? "a" : "the";
  std::vector<std::string> s{det1};
  if (rng.below(2)) s.push_back(pick(lex.adjectives));
  s.push_back(pick(lex.nouns));
  s.push_back(pick(lex.verbs));
  s.push_back(det2);
  if (rng.below(2)) s.push_back(pick(lex.adjectives));
  s.push_back(pick(lex.nouns));
  s.push_back(".");
  return s;
}

struct TwoDomainText {
  std::string forward;   // domain A: subject verb object
  std::string reversed;  // domain B: the same template read backwards
};

/// `sentences` sentences per domain, four to a line.
inline TwoDomainText two_domain_text(std::uint64_t seed, std::size_t sentences, const Lexicon& lex) {
  CounterRng rng(seed, {0x2D0});
  TwoDomainText out;
  for (auto* text : {&out.forward, &out.reversed}) {
    const bool reverse = text == &out.reversed;
    for (std::size_t i = 0; i < sentences; ++i) {
      auto words = svo_sentence(rng, lex);
      if (reverse) std::reverse(words.begin(), words.end());
      for (std::size_t w = 0; w < words.size(); ++w) {
        if (w) *text += ' ';
        *text += words[w];
      }
      *text += (i % 4 == 3) ? '\n' : ' ';
    }
  }
  return out;
}

inline constexpr const char* kForwardCode = "Forward";
inline constexpr const char* kReversedCode = "Reversed";
inline constexpr const char* kLoopCode = "Loop";

inline ControlCodeRegistry two_domain_registry() {
  ControlCodeRegistry reg;
  reg.add(kForwardCode, CodeKind::domain);
  reg.add(kReversedCode, CodeKind::domain);
  return reg;
}

/// Words of the looping corpus: "p0" .. "p{n-1}".
inline std::vector<std::string> loop_words(std::size_t n) {
  if (n < 4 || n % 2) throw ParameterError("loop corpus needs an even word count >= 4");
  std::vector<std::string> w;
  for (std::size_t i = 0; i < n; ++i) w.push_back("p" + std::to_string(i));
  return w;
}

/// Random walk over `n` words. From word i the next word is its partner
/// i^1 with probability `p_partner`, else i+2 (mod n). Greedy decoding of a
/// model fit to this walk bounces between two partners forever; the
/// runner-up successor is close behind, which is what a repetition penalty
/// can exploit.
inline std::string loop_text(std::uint64_t seed, std::size_t n, std::size_t length, double p_partner = 0.55) {
  const auto words = loop_words(n);
  CounterRng rng(seed, {0x100B});
  std::string out;
  std::size_t cur = rng.below(n);
  for (std::size_t i = 0; i < length; ++i) {
    if (i) out += ' ';
    out += words[cur];
    cur = rng.uniform() < p_partner ? (cur ^ 1) : (cur + 2) % n;
  }
  out += '\n';
  return out;
}

}  // namespace ctrlkit::synth
