#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ctrlkit/binary_io.hpp"
#include "ctrlkit/errors.hpp"
#include "ctrlkit/tokenizer.hpp"

namespace ctrlkit {

/// One training window: the domain code id followed by L-1 content tokens.
struct SequenceRecord {
  std::string domain;
  std::vector<TokenId> tokens;
  bool operator==(const SequenceRecord&) const = default;
};

/// Inline secondary code to insert before document token `position`.
struct CodeMark {
  std::size_t position = 0;
  std::string code;
};

/// Inserts secondary codes into a tokenized document. The domain code is
/// only validated here; chunk_stream() prepends it per window.
inline std::vector<TokenId> inject_codes(const Tokenizer& tok, std::span<const TokenId> document,
                                         const std::string& domain, std::vector<CodeMark> marks) {
  tok.registry().require_domain(domain);
  for (const auto& m : marks) {
    const auto& code = tok.registry().get(m.code);
    if (code.kind != CodeKind::secondary) throw UnknownCodeError(m.code + " (not a secondary code)");
    if (m.position > document.size())
      throw ParameterError("code mark position " + std::to_string(m.position) + " beyond document length " +
                           std::to_string(document.size()));
  }
  std::stable_sort(marks.begin(), marks.end(), [](const CodeMark& a, const CodeMark& b) { return a.position < b.position; });
  std::vector<TokenId> out;
  out.reserve(document.size() + marks.size());
  std::size_t m = 0;
  for (std::size_t i = 0; i <= document.size(); ++i) {
    while (m < marks.size() && marks[m].position == i) out.push_back(tok.code_id(marks[m++].code));
    if (i < document.size()) out.push_back(document[i]);
  }
  return out;
}

/// Cuts the stream into non-overlapping windows of L-1 tokens and prefixes
/// each with the domain code. A trailing remainder shorter than L-1 is dropped.
inline std::vector<SequenceRecord> chunk_stream(std::span<const TokenId> stream, std::size_t length, TokenId code_id,
                                                const std::string& domain) {
  if (length < 2) throw ParameterError("sequence length must be at least 2");
  const std::size_t content = length - 1;
  std::vector<SequenceRecord> out;
  for (std::size_t start = 0; start + content <= stream.size(); start += content) {
    SequenceRecord r{domain, {}};
    r.tokens.reserve(length);
    r.tokens.push_back(code_id);
    r.tokens.insert(r.tokens.end(), stream.begin() + static_cast<std::ptrdiff_t>(start),
                    stream.begin() + static_cast<std::ptrdiff_t>(start + content));
    out.push_back(std::move(r));
  }
  return out;
}

inline std::size_t count_unknowns(const SequenceRecord& r) {
  return static_cast<std::size_t>(std::count(r.tokens.begin(), r.tokens.end(), kUnknownId));
}

inline constexpr std::size_t kMaxUnknownsPerRecord = 2;

inline std::vector<SequenceRecord> filter_unknowns(std::vector<SequenceRecord> records) {
  std::erase_if(records, [](const SequenceRecord& r) { return count_unknowns(r) > kMaxUnknownsPerRecord; });
  return records;
}

// ---- record files -------------------------------------------------------
//
// Little-endian: magic "CTRLREC1", u32 L, u64 count, then per record
// u16 name length, UTF-8 domain name, L x u32 token ids.

inline constexpr std::string_view kRecordMagic = "CTRLREC1";

struct RecordFile {
  std::size_t length = 0;
  std::vector<SequenceRecord> records;
};

inline std::vector<char> encode_records(std::span<const SequenceRecord> records, std::size_t length) {
  io::ByteWriter w;
  w.put_bytes(kRecordMagic);
  w.put(static_cast<std::uint32_t>(length));
  w.put(static_cast<std::uint64_t>(records.size()));
  for (const auto& r : records) {
    if (r.tokens.size() != length)
      throw ParameterError("record length " + std::to_string(r.tokens.size()) + " != " + std::to_string(length));
    if (r.domain.size() > 0xFFFF) throw ParameterError("domain name too long");
    w.put(static_cast<std::uint16_t>(r.domain.size()));
    w.put_bytes(r.domain);
    for (TokenId id : r.tokens) {
      if (id < 0 || id > 0xFFFFFFFFLL) throw ParameterError("token id does not fit u32");
      w.put(static_cast<std::uint32_t>(id));
    }
  }
  return w.bytes();
}

inline RecordFile decode_records(std::vector<char> bytes) {
  io::ByteReader r(std::move(bytes));
  if (r.get_bytes(kRecordMagic.size()) != kRecordMagic) throw FormatError("record file: bad magic");
  RecordFile file;
  file.length = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  if (file.length < 2) throw FormatError("record file: sequence length < 2");
  // Each record needs at least 2 + 4L bytes; reject impossible counts early.
  if (count > r.remaining() / (2 + 4 * file.length)) throw FormatError("record file: truncated");
  file.records.reserve(count);
  std::vector<std::uint32_t> ids(file.length);
  for (std::uint64_t i = 0; i < count; ++i) {
    SequenceRecord rec;
    rec.domain = r.get_bytes(r.get<std::uint16_t>());
    r.get_array(ids.data(), ids.size());
    rec.tokens.assign(ids.begin(), ids.end());
    file.records.push_back(std::move(rec));
  }
  if (!r.at_end()) throw FormatError("record file: trailing bytes");
  return file;
}

inline void write_records(std::span<const SequenceRecord> records, std::size_t length, const std::string& path) {
  const auto bytes = encode_records(records, length);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline RecordFile read_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_records(std::move(bytes));
}

// ---- manifest -----------------------------------------------------------
//
// UTF-8, one document per line: "<domain code><TAB><path>[<TAB><marks>]".
// Marks are comma-separated "<secondary code>@<byte offset>". Lines starting
// with '#' and blank lines are ignored. Relative paths resolve against the
// manifest's directory.

struct ByteMark {
  std::size_t offset = 0;
  std::string code;
};

struct ManifestEntry {
  std::string domain;
  std::filesystem::path path;
  std::vector<ByteMark> marks;
};

inline std::vector<ManifestEntry> parse_manifest(std::istream& in, const std::filesystem::path& base_dir,
                                                 const ControlCodeRegistry& registry) {
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, '\t');) fields.push_back(f);
    const std::string where = "manifest line " + std::to_string(lineno) + ": ";
    if (fields.size() < 2 || fields.size() > 3) throw FormatError(where + "expected 2 or 3 tab-separated fields");
    ManifestEntry e;
    e.domain = fields[0];
    registry.require_domain(e.domain);
    e.path = fields[1];
    if (e.path.is_relative()) e.path = base_dir / e.path;
    if (!std::filesystem::exists(e.path)) throw std::runtime_error(where + "missing document " + e.path.string());
    if (fields.size() == 3 && !fields[2].empty()) {
      std::stringstream ms(fields[2]);
      for (std::string m; std::getline(ms, m, ',');) {
        auto at = m.rfind('@');
        if (at == std::string::npos || at == 0) throw FormatError(where + "mark '" + m + "' is not code@offset");
        ByteMark bm;
        bm.code = m.substr(0, at);
        try {
          bm.offset = std::stoull(m.substr(at + 1));
        } catch (const std::exception&) {
          throw FormatError(where + "bad offset in mark '" + m + "'");
        }
        if (registry.get(bm.code).kind != CodeKind::secondary)
          throw UnknownCodeError(bm.code + " (not a secondary code)");
        e.marks.push_back(std::move(bm));
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path, const ControlCodeRegistry& registry) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
  return parse_manifest(in, path.parent_path(), registry);
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Tokenizes one document, turning byte-offset marks into token positions
/// by encoding the text between marks separately, then injects the codes.
inline std::vector<TokenId> encode_document(const Tokenizer& tok, std::string text, const std::string& domain,
                                            std::vector<ByteMark> marks) {
  if (!text.empty() && !text::is_space(text.back())) text.push_back('\n');
  std::stable_sort(marks.begin(), marks.end(), [](const ByteMark& a, const ByteMark& b) { return a.offset < b.offset; });
  std::vector<TokenId> ids;
  std::vector<CodeMark> code_marks;
  std::size_t cursor = 0;
  for (const auto& m : marks) {
    if (m.offset > text.size()) throw ParameterError("mark offset beyond document end");
    auto seg = tok.encode(std::string_view(text).substr(cursor, m.offset - cursor));
    ids.insert(ids.end(), seg.begin(), seg.end());
    cursor = m.offset;
    code_marks.push_back({ids.size(), m.code});
  }
  auto tail = tok.encode(std::string_view(text).substr(cursor));
  ids.insert(ids.end(), tail.begin(), tail.end());
  return inject_codes(tok, ids, domain, std::move(code_marks));
}

struct DomainStream {
  std::string domain;
  std::vector<TokenId> tokens;
};

/// Concatenated injected token stream per domain, domains in order of first
/// appearance in the manifest.
inline std::vector<DomainStream> domain_streams(const Tokenizer& tok, const std::vector<ManifestEntry>& manifest) {
  std::vector<DomainStream> out;
  for (const auto& e : manifest) {
    auto it = std::find_if(out.begin(), out.end(), [&](const DomainStream& s) { return s.domain == e.domain; });
    if (it == out.end()) {
      out.push_back({e.domain, {}});
      it = std::prev(out.end());
    }
    auto ids = encode_document(tok, read_text_file(e.path), e.domain, e.marks);
    it->tokens.insert(it->tokens.end(), ids.begin(), ids.end());
  }
  return out;
}

struct CorpusSplit {
  std::vector<SequenceRecord> train;
  std::vector<SequenceRecord> validation;
};

/// Number of trailing records per domain held out for validation.
inline std::size_t holdout_count(std::size_t n, double fraction = 0.05) {
  if (n < 2) return 0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(n) * fraction));
}

inline CorpusSplit build_corpus(const Tokenizer& tok, const std::vector<DomainStream>& streams, std::size_t length,
                                double holdout_fraction = 0.05) {
  CorpusSplit split;
  for (const auto& s : streams) {
    auto records = filter_unknowns(chunk_stream(s.tokens, length, tok.code_id(s.domain), s.domain));
    const std::size_t held = holdout_count(records.size(), holdout_fraction);
    const std::size_t keep = records.size() - held;
    for (std::size_t i = 0; i < records.size(); ++i)
      (i < keep ? split.train : split.validation).push_back(std::move(records[i]));
  }
  return split;
}

}  // namespace ctrlkit
