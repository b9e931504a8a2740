#pragma once

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "increlearn/errors.hpp"
#include "increlearn/model.hpp"
#include "increlearn/sparse_vector.hpp"

namespace increlearn {

// Phase files: a `#dim <p>` header, then one example per line
//   label TAB type:id[,type:id...] TAB idx:val[ idx:val...] [TAB offset]
// The entity and feature fields may be empty. The offset column is written
// only for non-zero offsets. Values use 17 significant digits, so a
// serialize/parse round trip reproduces every double.

namespace detail {

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline bool parse_size(std::string_view s, std::size_t& out) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

inline bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline bool valid_name(std::string_view s) {
  if (s.empty()) return false;
  return std::none_of(s.begin(), s.end(), [](char c) {
    return c == ',' || c == ':' || c == '\t' || c == ' ' || c == '\n' || c == '\r' || c == '#';
  });
}

}  // namespace detail

/// Parses one phase from `in`; `source` names the input in error messages.
inline PhaseDataset parse_phase(std::istream& in, std::size_t phase_index, const std::string& source = "<stream>") {
  PhaseDataset out;
  out.phase_index = phase_index;
  std::string line;
  std::size_t line_no = 0;
  bool have_dim = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::string_view body(line);
      if (body.rfind("#dim ", 0) == 0) {
        if (have_dim) throw ParseError(source, line_no, "duplicate #dim header");
        if (!detail::parse_size(body.substr(5), out.feature_dim)) {
          throw ParseError(source, line_no, "bad #dim header");
        }
        have_dim = true;
      }
      continue;
    }
    if (!have_dim) throw ParseError(source, line_no, "example before #dim header");
    auto fields = detail::split(line, '\t');
    if (fields.size() != 3 && fields.size() != 4) {
      throw ParseError(source, line_no, "expected 3 or 4 tab-separated fields, got " + std::to_string(fields.size()));
    }
    LabeledExample ex;
    if (fields[0] == "0") {
      ex.label = 0;
    } else if (fields[0] == "1") {
      ex.label = 1;
    } else {
      throw ParseError(source, line_no, "label must be 0 or 1, got '" + std::string(fields[0]) + "'");
    }
    if (!fields[1].empty()) {
      for (auto pair : detail::split(fields[1], ',')) {
        const std::size_t colon = pair.find(':');
        if (colon == std::string_view::npos) throw ParseError(source, line_no, "entity must be type:id");
        std::string_view type = pair.substr(0, colon), id = pair.substr(colon + 1);
        if (!detail::valid_name(type) || !detail::valid_name(id)) {
          throw ParseError(source, line_no, "bad entity '" + std::string(pair) + "'");
        }
        if (!ex.entity_ids.emplace(std::string(type), std::string(id)).second) {
          throw ParseError(source, line_no, "duplicate entity type '" + std::string(type) + "'");
        }
      }
    }
    std::vector<SparseEntry> entries;
    std::set<std::size_t> seen;
    if (!fields[2].empty()) {
      for (auto tok : detail::split(fields[2], ' ')) {
        if (tok.empty()) continue;
        const std::size_t colon = tok.find(':');
        SparseEntry e;
        if (colon == std::string_view::npos || !detail::parse_size(tok.substr(0, colon), e.index) ||
            !detail::parse_double(tok.substr(colon + 1), e.value)) {
          throw ParseError(source, line_no, "bad feature '" + std::string(tok) + "'");
        }
        if (e.index >= out.feature_dim) {
          throw ParseError(source, line_no,
                           "feature index " + std::to_string(e.index) + " >= dim " + std::to_string(out.feature_dim));
        }
        if (!seen.insert(e.index).second) {
          throw ParseError(source, line_no, "duplicate feature index " + std::to_string(e.index));
        }
        entries.push_back(e);
      }
    }
    ex.features = SparseVector::from_entries(out.feature_dim, std::move(entries));
    if (fields.size() == 4 && !detail::parse_double(fields[3], ex.offset)) {
      throw ParseError(source, line_no, "bad offset '" + std::string(fields[3]) + "'");
    }
    out.examples.push_back(std::move(ex));
  }
  if (!have_dim) throw ParseError(source, line_no, "missing #dim header");
  return out;
}

inline std::string phase_file_name(std::size_t t) { return "phase_" + std::to_string(t) + ".tsv"; }

/// Parses `path`; the phase index comes from a `phase_<t>.tsv` file name (0 otherwise).
inline PhaseDataset parse_phase(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::size_t t = 0;
  static const std::regex kName(R"(phase_(\d+)\.tsv)");
  std::smatch m;
  const std::string name = path.filename().string();
  if (std::regex_match(name, m, kName)) t = std::stoull(m[1].str());
  return parse_phase(in, t, path.string());
}

inline void serialize_phase(const PhaseDataset& data, std::ostream& out) {
  data.validate();
  out << "#dim " << data.feature_dim << '\n';
  for (const auto& ex : data.examples) {
    out << ex.label << '\t';
    bool first = true;
    for (const auto& [type, id] : ex.entity_ids) {
      if (!detail::valid_name(type) || !detail::valid_name(id)) {
        throw ValidationError("entity '" + type + ":" + id + "' cannot be serialized");
      }
      out << (first ? "" : ",") << type << ':' << id;
      first = false;
    }
    out << '\t';
    first = true;
    for (const auto& e : ex.features.entries()) {
      out << (first ? "" : " ") << e.index << ':' << detail::format_double(e.value);
      first = false;
    }
    if (ex.offset != 0.0) out << '\t' << detail::format_double(ex.offset);
    out << '\n';
  }
}

inline std::string serialize_phase(const PhaseDataset& data) {
  std::ostringstream os;
  serialize_phase(data, os);
  return os.str();
}

inline void write_phase(const std::filesystem::path& dir, const PhaseDataset& data) {
  std::filesystem::create_directories(dir);
  const auto path = dir / phase_file_name(data.phase_index);
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  serialize_phase(data, out);
  if (!out) throw ValidationError("write failed for " + path.string());
}

inline void write_phases(const std::filesystem::path& dir, const std::vector<PhaseDataset>& phases) {
  for (const auto& p : phases) write_phase(dir, p);
}

/// Loads every `phase_<t>.tsv` in `dir`; indices must run 0..n-1 and share one dim.
inline std::vector<PhaseDataset> load_phases(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("not a directory: " + dir.string());
  static const std::regex kName(R"(phase_(\d+)\.tsv)");
  std::map<std::size_t, std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, kName)) files.emplace(std::stoull(m[1].str()), entry.path());
  }
  std::vector<PhaseDataset> out;
  for (const auto& [t, path] : files) {
    if (t != out.size()) throw ValidationError("phase files are not contiguous from 0 (missing phase " +
                                               std::to_string(out.size()) + ")");
    out.push_back(parse_phase(path));
    if (out.back().feature_dim != out.front().feature_dim) {
      throw ShapeError("phase " + std::to_string(t) + " has a different #dim");
    }
  }
  return out;
}

}  // namespace increlearn
