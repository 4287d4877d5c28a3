#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ctrlkit/errors.hpp"
#include "ctrlkit/registry.hpp"

namespace ctrlkit {

using TokenId = std::int64_t;

inline constexpr std::string_view kUnknownToken = "<unk>";
inline constexpr TokenId kUnknownId = 0;

namespace text {

inline bool is_space(char c) noexcept {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

// Byte length of the UTF-8 sequence starting with `lead`; malformed lead
// bytes count as one byte so every input splits into something.
inline std::size_t utf8_len(unsigned char lead) noexcept {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

inline std::vector<std::string> utf8_chars(std::string_view s) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < s.size();) {
    std::size_t n = std::min(utf8_len(static_cast<unsigned char>(s[i])), s.size() - i);
    out.emplace_back(s.substr(i, n));
    i += n;
  }
  return out;
}

struct Piece {
  std::string_view text;
  bool whitespace;
};

// Splits into words and standalone whitespace characters. A single space
// directly before a word belongs to that word (" cat"); every other
// whitespace character is its own piece.
inline std::vector<Piece> pretokenize(std::string_view s) {
  std::vector<Piece> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const bool lead_space = s[i] == ' ' && i + 1 < s.size() && !is_space(s[i + 1]);
    if (is_space(s[i]) && !lead_space) {
      out.push_back({s.substr(i, 1), true});
      ++i;
      continue;
    }
    std::size_t j = lead_space ? i + 1 : i;
    while (j < s.size() && !is_space(s[j])) ++j;
    out.push_back({s.substr(i, j - i), false});
    i = j;
  }
  return out;
}

// Word body without its attached leading space.
inline std::string_view word_body(std::string_view piece) {
  return (!piece.empty() && piece[0] == ' ') ? piece.substr(1) : piece;
}

inline std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\v': out += "\\v"; break;
      case '\f': out += "\\f"; break;
      case ' ': out += "\\s"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string unescape(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i == s.size()) throw FormatError("dangling escape in token");
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      case 'v': out += '\v'; break;
      case 'f': out += '\f'; break;
      case 's': out += ' '; break;
      default: throw FormatError(std::string("unknown escape \\") + s[i]);
    }
  }
  return out;
}

}  // namespace text

/// Ordered merge list; a merge's rank is its position.
class MergeTable {
 public:
  using Pair = std::pair<std::string, std::string>;

  void push_back(Pair p) {
    ranks_.emplace(p, merges_.size());
    merges_.push_back(std::move(p));
  }

  const std::vector<Pair>& merges() const noexcept { return merges_; }
  std::size_t size() const noexcept { return merges_.size(); }

  std::optional<std::size_t> rank(const std::string& left, const std::string& right) const {
    auto it = ranks_.find(Pair{left, right});
    if (it == ranks_.end()) return std::nullopt;
    return it->second;
  }

  std::string serialize() const {
    std::ostringstream os;
    os << "bpe-v1 " << merges_.size() << '\n';
    for (const auto& [l, r] : merges_) os << text::escape(l) << ' ' << text::escape(r) << '\n';
    return os.str();
  }

  static MergeTable parse(std::istream& in) {
    std::string header;
    if (!std::getline(in, header)) throw FormatError("merges: missing header");
    std::istringstream hs(header);
    std::string magic;
    std::size_t count = 0;
    if (!(hs >> magic >> count) || magic != "bpe-v1") throw FormatError("merges: bad header '" + header + "'");
    MergeTable table;
    std::string line;
    for (std::size_t i = 0; i < count; ++i) {
      if (!std::getline(in, line)) throw FormatError("merges: expected " + std::to_string(count) + " entries");
      auto sp = line.find(' ');
      if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() || line.find(' ', sp + 1) != std::string::npos)
        throw FormatError("merges: malformed line '" + line + "'");
      table.push_back({text::unescape(line.substr(0, sp)), text::unescape(line.substr(sp + 1))});
    }
    return table;
  }

  bool operator==(const MergeTable& o) const { return merges_ == o.merges_; }

 private:
  std::vector<Pair> merges_;
  std::map<Pair, std::size_t> ranks_;
};

/// Token string <-> id bijection. Ids [0, num_reserved) hold the unknown
/// token followed by the control codes in registry order.
class Vocabulary {
 public:
  Vocabulary() = default;

  TokenId add(std::string token) {
    if (auto it = ids_.find(token); it != ids_.end()) return it->second;
    const auto id = static_cast<TokenId>(tokens_.size());
    ids_.emplace(token, id);
    tokens_.push_back(std::move(token));
    return id;
  }

  void set_num_reserved(std::size_t n) { num_reserved_ = n; }
  std::size_t num_reserved() const noexcept { return num_reserved_; }
  std::size_t size() const noexcept { return tokens_.size(); }

  bool contains(TokenId id) const noexcept { return id >= 0 && static_cast<std::size_t>(id) < tokens_.size(); }
  bool is_reserved(TokenId id) const noexcept { return id >= 0 && static_cast<std::size_t>(id) < num_reserved_; }

  const std::string& token(TokenId id) const {
    if (!contains(id)) throw IndexError("token id " + std::to_string(id) + " not in vocabulary");
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::optional<TokenId> find(const std::string& token) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  // Lookup for BPE output symbols: reserved strings never match.
  TokenId subword_id(const std::string& symbol) const {
    auto id = find(symbol);
    return (id && !is_reserved(*id)) ? *id : kUnknownId;
  }

  std::string serialize() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < tokens_.size(); ++i) os << text::escape(tokens_[i]) << '\t' << i << '\n';
    return os.str();
  }

  static Vocabulary parse(std::istream& in, std::size_t num_reserved) {
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
      auto tab = line.rfind('\t');
      if (tab == std::string::npos) throw FormatError("vocab: expected token<TAB>id, got '" + line + "'");
      const std::string tok = text::unescape(std::string_view(line).substr(0, tab));
      std::size_t id = 0;
      try {
        id = std::stoull(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw FormatError("vocab: bad id in '" + line + "'");
      }
      if (id != v.size() || v.find(tok)) throw FormatError("vocab: ids must be dense and tokens unique");
      v.add(tok);
    }
    if (v.size() < num_reserved) throw FormatError("vocab: smaller than reserved range");
    v.set_num_reserved(num_reserved);
    return v;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_ && num_reserved_ == o.num_reserved_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  std::size_t num_reserved_ = 0;
};

/// Word-boundary BPE tokenizer with atomic control-code tokens.
///
/// Text is split into words (carrying at most one leading space) and
/// standalone whitespace characters; merges never cross a piece boundary.
/// A word spelled exactly like a registered control code becomes that
/// code's reserved id (its leading space, if any, stays a separate token);
/// other words are split into characters and merged by rank.
class Tokenizer {
 public:
  Tokenizer() = default;
  Tokenizer(ControlCodeRegistry registry, Vocabulary vocab, MergeTable merges)
      : registry_(std::move(registry)), vocab_(std::move(vocab)), merges_(std::move(merges)) {
    if (vocab_.num_reserved() != 1 + registry_.size()) throw FormatError("vocabulary/registry reserved range mismatch");
    if (vocab_.token(kUnknownId) != kUnknownToken) throw FormatError("vocabulary id 0 must be the unknown token");
    for (std::size_t i = 0; i < registry_.size(); ++i)
      if (vocab_.token(static_cast<TokenId>(i + 1)) != registry_.codes()[i].name)
        throw FormatError("vocabulary reserved ids do not match registry order");
  }

  const ControlCodeRegistry& registry() const noexcept { return registry_; }
  const Vocabulary& vocab() const noexcept { return vocab_; }
  const MergeTable& merges() const noexcept { return merges_; }
  std::size_t vocab_size() const noexcept { return vocab_.size(); }

  TokenId code_id(const std::string& name) const {
    auto i = registry_.find(name);
    if (!i) throw UnknownCodeError(name);
    return static_cast<TokenId>(*i + 1);
  }

  bool is_code(TokenId id) const noexcept { return id >= 1 && static_cast<std::size_t>(id) <= registry_.size(); }

  /// Applies merges in rank order to one word (no whitespace inside).
  std::vector<std::string> bpe_word(std::string_view word) const {
    std::vector<std::string> syms = text::utf8_chars(word);
    while (syms.size() > 1) {
      std::size_t best = std::numeric_limits<std::size_t>::max();
      for (std::size_t i = 0; i + 1 < syms.size(); ++i)
        if (auto r = merges_.rank(syms[i], syms[i + 1]); r && *r < best) best = *r;
      if (best == std::numeric_limits<std::size_t>::max()) break;
      const auto& [left, right] = merges_.merges()[best];
      std::vector<std::string> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
          next.push_back(left + right);
          i += 2;
        } else {
          next.push_back(std::move(syms[i]));
          ++i;
        }
      }
      syms = std::move(next);
    }
    return syms;
  }

  std::vector<TokenId> encode(std::string_view input) const {
    std::vector<TokenId> ids;
    std::unordered_map<std::string_view, std::vector<TokenId>> memo;
    for (const auto& piece : text::pretokenize(input)) {
      if (piece.whitespace) {
        ids.push_back(vocab_.subword_id(std::string(piece.text)));
        continue;
      }
      if (auto it = memo.find(piece.text); it != memo.end()) {
        ids.insert(ids.end(), it->second.begin(), it->second.end());
        continue;
      }
      std::vector<TokenId> word_ids;
      const auto body = text::word_body(piece.text);
      if (auto code = registry_.find(std::string(body))) {
        if (body.size() != piece.text.size()) word_ids.push_back(vocab_.subword_id(" "));
        word_ids.push_back(static_cast<TokenId>(*code + 1));
      } else {
        for (const auto& sym : bpe_word(piece.text)) word_ids.push_back(vocab_.subword_id(sym));
      }
      ids.insert(ids.end(), word_ids.begin(), word_ids.end());
      memo.emplace(piece.text, std::move(word_ids));
    }
    return ids;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) out += vocab_.token(id);
    return out;
  }

  // Writes merges.txt, vocab.tsv and codes.tsv into `dir`.
  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    write_file(dir / "merges.txt", merges_.serialize());
    write_file(dir / "vocab.tsv", vocab_.serialize());
    registry_.save((dir / "codes.tsv").string());
  }

  static Tokenizer load(const std::filesystem::path& dir) {
    auto registry = ControlCodeRegistry::load((dir / "codes.tsv").string());
    std::ifstream vin(dir / "vocab.tsv");
    std::ifstream min(dir / "merges.txt");
    if (!vin || !min) throw std::runtime_error("tokenizer files missing in " + dir.string());
    auto vocab = Vocabulary::parse(vin, 1 + registry.size());
    auto merges = MergeTable::parse(min);
    return Tokenizer(std::move(registry), std::move(vocab), std::move(merges));
  }

 private:
  static void write_file(const std::filesystem::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + p.string());
    out << content;
  }

  ControlCodeRegistry registry_;
  Vocabulary vocab_;
  MergeTable merges_;
};

/// Learns up to `num_merges` merges by greedy most-frequent-pair merging
/// over the corpus words. Ties go to the lexicographically smallest pair.
/// Learning stops early once the best pair occurs fewer than
/// `min_pair_count` times. Words spelled like a control code are excluded.
inline Tokenizer learn_bpe(std::string_view corpus, std::size_t num_merges, std::size_t min_pair_count,
                           const ControlCodeRegistry& registry) {
  using Pair = MergeTable::Pair;
  if (corpus.empty()) throw ParameterError("learn_bpe: empty corpus");
  min_pair_count = std::max<std::size_t>(min_pair_count, 1);

  std::set<std::string> reserved{std::string(kUnknownToken)};
  for (const auto& c : registry.codes()) reserved.insert(c.name);

  std::map<std::string, std::uint64_t> word_freq;
  std::set<std::string> chars;
  for (const auto& piece : text::pretokenize(corpus)) {
    if (piece.whitespace) {
      chars.emplace(piece.text);
      continue;
    }
    std::string w(piece.text);
    if (registry.find(std::string(text::word_body(w)))) {
      if (w[0] == ' ') chars.insert(" ");
      continue;
    }
    for (auto& ch : text::utf8_chars(w)) chars.insert(std::move(ch));
    ++word_freq[w];
  }

  Vocabulary vocab;
  vocab.add(std::string(kUnknownToken));
  for (const auto& c : registry.codes()) vocab.add(c.name);
  vocab.set_num_reserved(1 + registry.size());
  for (const auto& ch : chars)
    if (!reserved.count(ch)) vocab.add(ch);

  std::vector<std::vector<std::string>> words;
  std::vector<std::uint64_t> freq;
  for (const auto& [w, f] : word_freq) {
    words.push_back(text::utf8_chars(w));
    freq.push_back(f);
  }

  std::map<Pair, std::int64_t> counts;
  std::map<Pair, std::set<std::size_t>> where;
  auto add_word = [&](std::size_t wi, std::int64_t sign) {
    const auto& s = words[wi];
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      Pair p{s[i], s[i + 1]};
      auto& c = counts[p];
      c += sign * static_cast<std::int64_t>(freq[wi]);
      if (sign > 0) {
        where[p].insert(wi);
      } else {
        if (c == 0) counts.erase(p);
        if (auto it = where.find(p); it != where.end()) {
          it->second.erase(wi);
          if (it->second.empty()) where.erase(it);
        }
      }
    }
  };
  for (std::size_t wi = 0; wi < words.size(); ++wi) add_word(wi, +1);

  MergeTable merges;
  while (merges.size() < num_merges) {
    const Pair* best = nullptr;
    std::int64_t best_count = 0;
    // std::map iterates in lexicographic pair order, so strict > keeps the
    // smallest pair among equal counts.
    for (const auto& [p, c] : counts) {
      if (c <= best_count) continue;
      if (reserved.count(p.first + p.second)) continue;
      best = &p;
      best_count = c;
    }
    if (!best || best_count < static_cast<std::int64_t>(min_pair_count)) break;
    const Pair pair = *best;
    const std::string merged = pair.first + pair.second;
    const std::vector<std::size_t> affected(where[pair].begin(), where[pair].end());
    for (std::size_t wi : affected) {
      add_word(wi, -1);
      auto& s = words[wi];
      std::vector<std::string> next;
      next.reserve(s.size());
      for (std::size_t i = 0; i < s.size();) {
        if (i + 1 < s.size() && s[i] == pair.first && s[i + 1] == pair.second) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(std::move(s[i]));
          ++i;
        }
      }
      s = std::move(next);
      add_word(wi, +1);
    }
    merges.push_back(pair);
    vocab.add(merged);
  }

  return Tokenizer(registry, std::move(vocab), std::move(merges));
}

}  // namespace ctrlkit
