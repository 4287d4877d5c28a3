#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctrlkit/errors.hpp"

namespace ctrlkit {

enum class CodeKind { domain, secondary };

inline const char* to_string(CodeKind kind) { return kind == CodeKind::domain ? "domain" : "secondary"; }

inline CodeKind parse_code_kind(const std::string& s) {
  if (s == "domain") return CodeKind::domain;
  if (s == "secondary") return CodeKind::secondary;
  throw FormatError("unknown code kind: " + s);
}

struct ControlCode {
  std::string name;
  CodeKind kind = CodeKind::domain;
  bool operator==(const ControlCode&) const = default;
};

/// Ordered set of control codes. Registration order fixes the reserved
/// vocabulary ids (1..n, after the unknown token) and breaks attribution ties.
class ControlCodeRegistry {
 public:
  ControlCodeRegistry() = default;
  explicit ControlCodeRegistry(std::vector<ControlCode> codes) {
    for (auto& c : codes) add(std::move(c.name), c.kind);
  }

  void add(std::string name, CodeKind kind) {
    if (name.empty() || std::any_of(name.begin(), name.end(), [](unsigned char ch) { return std::isspace(ch); }))
      throw ParameterError("control code names must be non-empty and contain no whitespace: '" + name + "'");
    if (find(name)) throw ParameterError("duplicate control code: " + name);
    codes_.push_back({std::move(name), kind});
  }

  const std::vector<ControlCode>& codes() const noexcept { return codes_; }
  std::size_t size() const noexcept { return codes_.size(); }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < codes_.size(); ++i)
      if (codes_[i].name == name) return i;
    return std::nullopt;
  }

  const ControlCode& get(const std::string& name) const {
    auto i = find(name);
    if (!i) throw UnknownCodeError(name);
    return codes_[*i];
  }

  const ControlCode& require_domain(const std::string& name) const {
    const auto& c = get(name);
    if (c.kind != CodeKind::domain) throw UnknownCodeError(name + " (not a domain code)");
    return c;
  }

  std::vector<std::string> domain_names() const {
    std::vector<std::string> out;
    for (const auto& c : codes_)
      if (c.kind == CodeKind::domain) out.push_back(c.name);
    return out;
  }

  // "name<TAB>kind" per line.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const auto& c : codes_) out << c.name << '\t' << to_string(c.kind) << '\n';
  }

  static ControlCodeRegistry load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    ControlCodeRegistry reg;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos) throw FormatError("codes file: expected name<TAB>kind, got '" + line + "'");
      reg.add(line.substr(0, tab), parse_code_kind(line.substr(tab + 1)));
    }
    return reg;
  }

  bool operator==(const ControlCodeRegistry&) const = default;

 private:
  std::vector<ControlCode> codes_;
};

}  // namespace ctrlkit
