#pragma once

#include <cstddef>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "increlearn/errors.hpp"
#include "increlearn/hessian.hpp"
#include "increlearn/model.hpp"
#include "increlearn/trainer.hpp"

namespace increlearn {

// Round store layout: <store>/round_<t>/ holding
//   meta                     key value lines, format_version first
//   fixed.model              the fixed-effect record (id "fixed")
//   random_<type>.models     one record per entity id
// Model files start with "#increlearn-model v1" and end with "#records <n>".
// A record is one line of tab-separated fields:
//   id  l2_base  weights  mean  precision
// weights: "idx:value ..." or "-"; mean: dense values or "-" (no prior);
// precision: none | diag v.. | full p v.. | dfp capacity m (step grad rho)*m | adam scale v..
// Numbers are C99 hexfloats, so load(save(x)) == x bit for bit.

inline constexpr int kStoreFormatVersion = 1;

struct RoundSnapshot {
  std::size_t t = 0;
  std::size_t counter = 0;
  double lambda_f = 1.0;
  HessianMode hessian_mode = HessianMode::diag;
  std::size_t feature_dim = 0;
  GlmixModel model;
  GlmixPriors priors;

  std::vector<std::string> entity_types() const {
    std::vector<std::string> out;
    for (const auto& [type, m] : model.random_effects) out.push_back(type);
    return out;
  }

  friend bool operator==(const RoundSnapshot&, const RoundSnapshot&) = default;
};

namespace store_detail {

inline std::string hex(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double unhex(std::string_view s, const std::string& where) {
  std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (tmp.empty() || end != tmp.c_str() + tmp.size()) throw StoreIntegrityError(where + ": bad number '" + tmp + "'");
  return v;
}

inline std::size_t unsize(std::string_view s, const std::string& where) {
  std::string tmp(s);
  char* end = nullptr;
  const unsigned long long v = std::strtoull(tmp.c_str(), &end, 10);
  if (tmp.empty() || end != tmp.c_str() + tmp.size() || tmp[0] == '-') {
    throw StoreIntegrityError(where + ": bad integer '" + tmp + "'");
  }
  return static_cast<std::size_t>(v);
}

inline std::vector<std::string_view> tokens(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ') ++i;
    const std::size_t j = s.find(' ', i);
    const std::size_t end = j == std::string_view::npos ? s.size() : j;
    if (end > i) out.push_back(s.substr(i, end - i));
    i = end;
  }
  return out;
}

inline void write_values(std::ostream& os, std::span<const double> v) {
  for (double x : v) os << ' ' << hex(x);
}

inline std::string encode_precision(const HessianRepr& h) {
  std::ostringstream os;
  std::visit(
      [&](const auto& r) {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, FullHessian>) {
          os << "full " << r.dim;
          write_values(os, r.data);
        } else if constexpr (std::is_same_v<T, DiagonalHessian>) {
          os << "diag";
          write_values(os, r.values);
        } else if constexpr (std::is_same_v<T, DfpMemory>) {
          os << "dfp " << r.capacity << ' ' << r.pairs.size();
          for (const auto& p : r.pairs) {
            write_values(os, p.step);
            write_values(os, p.grad_change);
            os << ' ' << hex(p.rho);
          }
        } else {
          os << "adam " << hex(r.scale);
          write_values(os, r.second_moment);
        }
      },
      h);
  return os.str();
}

class Reader {
 public:
  Reader(std::vector<std::string_view> toks, std::string where) : toks_(std::move(toks)), where_(std::move(where)) {}

  std::string_view next() {
    if (pos_ >= toks_.size()) throw StoreIntegrityError(where_ + ": record ends early");
    return toks_[pos_++];
  }
  double number() { return unhex(next(), where_); }
  std::size_t count() { return unsize(next(), where_); }
  Vector values(std::size_t n) {
    Vector v(n);
    for (double& x : v) x = number();
    return v;
  }
  void finish() const {
    if (pos_ != toks_.size()) throw StoreIntegrityError(where_ + ": trailing tokens in record");
  }

 private:
  std::vector<std::string_view> toks_;
  std::string where_;
  std::size_t pos_ = 0;
};

inline HessianRepr decode_precision(std::string_view field, std::size_t dim, const std::string& where) {
  Reader r(tokens(field), where);
  const std::string_view kind = r.next();
  HessianRepr out;
  if (kind == "diag") {
    out = DiagonalHessian{r.values(dim)};
  } else if (kind == "full") {
    const std::size_t p = r.count();
    if (p != dim) throw StoreIntegrityError(where + ": full precision dim mismatch");
    FullHessian f(p);
    f.data = r.values(p * p);
    out = std::move(f);
  } else if (kind == "dfp") {
    DfpMemory mem;
    mem.capacity = r.count();
    const std::size_t m = r.count();
    for (std::size_t k = 0; k < m; ++k) {
      DfpPair pair;
      pair.step = r.values(dim);
      pair.grad_change = r.values(dim);
      pair.rho = r.number();
      mem.pairs.push_back(std::move(pair));
    }
    out = std::move(mem);
  } else if (kind == "adam") {
    AdamMoment a;
    a.scale = r.number();
    a.second_moment = r.values(dim);
    out = std::move(a);
  } else {
    throw StoreIntegrityError(where + ": unknown precision kind '" + std::string(kind) + "'");
  }
  r.finish();
  return out;
}

struct Record {
  std::string id;
  GlmModel model;
  std::optional<PriorDistribution> prior;
};

inline void write_record(std::ostream& os, const std::string& id, const GlmModel& m, const PriorDistribution* prior) {
  os << id << '\t' << hex(m.l2_base) << '\t';
  if (m.weights.nnz() == 0) os << '-';
  bool first = true;
  for (const auto& e : m.weights.entries()) {
    os << (first ? "" : " ") << e.index << ':' << hex(e.value);
    first = false;
  }
  os << '\t';
  if (prior) {
    std::ostringstream mean;
    write_values(mean, prior->mean);
    os << mean.str().substr(1) << '\t' << encode_precision(prior->precision);
  } else {
    os << "-\tnone";
  }
  os << '\n';
}

inline Record read_record(const std::string& line, std::size_t dim, const std::string& where) {
  std::vector<std::string_view> fields;
  std::string_view s(line);
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find('\t', start);
    fields.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  if (fields.size() != 5) throw StoreIntegrityError(where + ": expected 5 fields");
  Record rec;
  rec.id = std::string(fields[0]);
  rec.model.l2_base = unhex(fields[1], where);
  std::vector<SparseEntry> entries;
  if (fields[2] != "-") {
    for (auto tok : tokens(fields[2])) {
      const std::size_t colon = tok.find(':');
      if (colon == std::string_view::npos) throw StoreIntegrityError(where + ": bad weight '" + std::string(tok) + "'");
      entries.push_back({unsize(tok.substr(0, colon), where), unhex(tok.substr(colon + 1), where)});
      if (entries.back().index >= dim) throw StoreIntegrityError(where + ": weight index out of range");
    }
  }
  rec.model.weights = SparseVector::from_entries(dim, std::move(entries));
  if (fields[4] != "none") {
    Reader mean(tokens(fields[3]), where);
    PriorDistribution prior;
    prior.mean = mean.values(dim);
    mean.finish();
    prior.precision = decode_precision(fields[4], dim, where);
    rec.prior = std::move(prior);
  } else if (fields[3] != "-") {
    throw StoreIntegrityError(where + ": mean without precision");
  }
  return rec;
}

inline void write_model_file(const std::filesystem::path& path, const std::vector<Record>& records) {
  std::ofstream os(path);
  if (!os) throw StoreError("cannot write " + path.string());
  os << "#increlearn-model v" << kStoreFormatVersion << '\n';
  for (const auto& r : records) write_record(os, r.id, r.model, r.prior ? &*r.prior : nullptr);
  os << "#records " << records.size() << '\n';
  os.flush();
  if (!os) throw StoreError("write failed for " + path.string());
}

inline std::vector<Record> read_model_file(const std::filesystem::path& path, std::size_t dim) {
  std::ifstream in(path);
  if (!in) throw StoreIntegrityError("missing model file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw StoreIntegrityError(path.string() + ": empty file");
  const std::string expected = "#increlearn-model v" + std::to_string(kStoreFormatVersion);
  if (line.rfind("#increlearn-model v", 0) != 0) throw StoreIntegrityError(path.string() + ": bad header");
  if (line != expected) throw StoreVersionError(path.string() + ": unsupported model format '" + line + "'");
  std::vector<Record> out;
  bool trailer = false;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (trailer) throw StoreIntegrityError(where + ": data after trailer");
    if (line.rfind("#records ", 0) == 0) {
      if (unsize(std::string_view(line).substr(9), where) != out.size()) {
        throw StoreIntegrityError(where + ": record count mismatch");
      }
      trailer = true;
      continue;
    }
    out.push_back(read_record(line, dim, where));
  }
  if (!trailer) throw StoreIntegrityError(path.string() + ": truncated (no trailer)");
  return out;
}

inline bool valid_type_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  }
  return true;
}

}  // namespace store_detail

inline std::filesystem::path round_dir(const std::filesystem::path& store, std::size_t t) {
  return store / ("round_" + std::to_string(t));
}

/// Writes the snapshot to <store>/round_<t>, replacing an existing round
/// atomically (written to a temporary directory, then renamed).
inline void save_round(const std::filesystem::path& store, const RoundSnapshot& snap) {
  namespace fs = std::filesystem;
  fs::create_directories(store);
  const fs::path final_dir = round_dir(store, snap.t);
  const fs::path tmp = store / (".round_" + std::to_string(snap.t) + ".tmp");
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  {
    std::ofstream meta(tmp / "meta");
    meta << "format_version " << kStoreFormatVersion << '\n'
         << "t " << snap.t << '\n'
         << "counter " << snap.counter << '\n'
         << "lambda_f " << store_detail::hex(snap.lambda_f) << '\n'
         << "hessian_mode " << to_string(snap.hessian_mode) << '\n'
         << "feature_dim " << snap.feature_dim << '\n'
         << "entity_types";
    for (const auto& type : snap.entity_types()) {
      if (!store_detail::valid_type_name(type)) throw ValidationError("entity type '" + type + "' is not storable");
      meta << ' ' << type;
    }
    meta << "\nend\n";
    meta.flush();
    if (!meta) throw StoreError("cannot write meta in " + tmp.string());
  }
  if (snap.model.fixed.dim() != snap.feature_dim) throw ShapeError("save_round: fixed model dim != feature_dim");
  store_detail::write_model_file(
      tmp / "fixed.model", {{"fixed", snap.model.fixed, snap.priors.fixed}});
  for (const auto& [type, models] : snap.model.random_effects) {
    std::vector<store_detail::Record> records;
    const EntityPriors* priors = nullptr;
    if (auto it = snap.priors.random.find(type); it != snap.priors.random.end()) priors = &it->second;
    for (const auto& [id, m] : models) {
      std::optional<PriorDistribution> prior;
      if (priors) {
        if (auto p = priors->find(id); p != priors->end()) prior = p->second;
      }
      records.push_back({id, m, std::move(prior)});
    }
    if (priors) {
      for (const auto& [id, p] : *priors) {
        if (!models.contains(id)) throw ValidationError("save_round: prior for '" + id + "' without a model");
      }
    }
    store_detail::write_model_file(tmp / ("random_" + type + ".models"), records);
  }
  fs::remove_all(final_dir);
  fs::rename(tmp, final_dir);
}

/// Reads one round directory. Nothing is returned unless every file parses.
inline RoundSnapshot load_round_dir(const std::filesystem::path& dir) {
  std::ifstream meta(dir / "meta");
  if (!meta) throw StoreIntegrityError("missing meta in " + dir.string());
  std::map<std::string, std::string> kv;
  std::string line;
  bool first = true, ended = false;
  while (std::getline(meta, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    const std::size_t sp = line.find(' ');
    std::string key = line.substr(0, sp);
    std::string value = sp == std::string::npos ? "" : line.substr(sp + 1);
    if (first) {
      if (key != "format_version") throw StoreIntegrityError(dir.string() + ": meta must start with format_version");
      if (value != std::to_string(kStoreFormatVersion)) {
        throw StoreVersionError(dir.string() + ": store format version " + value + " is not supported (expected " +
                                std::to_string(kStoreFormatVersion) + ")");
      }
      first = false;
    }
    kv[key] = value;
  }
  if (first) throw StoreIntegrityError(dir.string() + ": empty meta");
  if (!ended) throw StoreIntegrityError(dir.string() + ": truncated meta");
  auto need = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw StoreIntegrityError(dir.string() + ": meta lacks " + k);
    return it->second;
  };
  const std::string where = (dir / "meta").string();
  RoundSnapshot snap;
  snap.t = store_detail::unsize(need("t"), where);
  snap.counter = store_detail::unsize(need("counter"), where);
  snap.lambda_f = store_detail::unhex(need("lambda_f"), where);
  try {
    snap.hessian_mode = parse_hessian_mode(need("hessian_mode"));
  } catch (const ValidationError& e) {
    throw StoreIntegrityError(where + ": " + e.what());
  }
  snap.feature_dim = store_detail::unsize(need("feature_dim"), where);

  auto fixed = store_detail::read_model_file(dir / "fixed.model", snap.feature_dim);
  if (fixed.size() != 1 || fixed[0].id != "fixed") throw StoreIntegrityError(dir.string() + ": bad fixed.model");
  snap.model.fixed = std::move(fixed[0].model);
  snap.priors.fixed = std::move(fixed[0].prior);
  for (auto type : store_detail::tokens(need("entity_types"))) {
    const std::string name(type);
    auto records = store_detail::read_model_file(dir / ("random_" + name + ".models"), snap.feature_dim);
    auto& models = snap.model.random_effects[name];
    for (auto& r : records) {
      if (r.prior) snap.priors.random[name].emplace(r.id, std::move(*r.prior));
      if (!models.emplace(r.id, std::move(r.model)).second) {
        throw StoreIntegrityError(dir.string() + ": duplicate entity '" + r.id + "'");
      }
    }
  }
  return snap;
}

inline RoundSnapshot load_round(const std::filesystem::path& store, std::size_t t) {
  const auto dir = round_dir(store, t);
  if (!std::filesystem::is_directory(dir)) throw StoreError("no round " + std::to_string(t) + " in " + store.string());
  return load_round_dir(dir);
}

/// Highest round index present in the store, if any.
inline std::optional<std::size_t> latest_round(const std::filesystem::path& store) {
  if (!std::filesystem::is_directory(store)) return std::nullopt;
  static const std::regex kName(R"(round_(\d+))");
  std::optional<std::size_t> best;
  for (const auto& entry : std::filesystem::directory_iterator(store)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (entry.is_directory() && std::regex_match(name, m, kName)) {
      const std::size_t t = std::stoull(m[1].str());
      if (!best || t > *best) best = t;
    }
  }
  return best;
}

}  // namespace increlearn
