#pragma once

// Experiment records: long-format metric rows, timing rows, CSV round-trip,
// atomic persistence and the run manifest.

#include "fls/harness/config.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <iomanip>

namespace fls::harness {

inline constexpr const char* kCodeVersion = "fls-lab 1.0.0";

struct MetricRow {
  std::string method;
  std::uint64_t seed = 0;
  std::string phase;
  Index step = 0;
  Index minibatches = 0;
  double sparsity = 0.0;
  std::string metric;
  double value = 0.0;

  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

struct TimingRow {
  std::string method;
  std::uint64_t seed = 0;
  std::string phase;
  Index step = 0;
  double sparsity = 0.0;
  double wall_ms = 0.0;
};

struct ExperimentRecord {
  std::string experiment;
  Config config;
  std::vector<std::uint64_t> seeds;
  std::vector<MetricRow> metrics;
  std::vector<TimingRow> timing;
  std::vector<std::string> notes;  // human-readable selections and outcomes
};

// Number formatting: shortest representation that round-trips exactly.

inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double x = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::invalid_argument("bad number '" + s + "'");
  return x;
}

inline const char* kMetricsHeader = "method,seed,phase,step,minibatches,sparsity,metric,value";

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) {
    out += csv_field(r.method) + ',' + std::to_string(r.seed) + ',' + csv_field(r.phase) + ',' + std::to_string(r.step) +
           ',' + std::to_string(r.minibatches) + ',' + format_double(r.sparsity) + ',' + csv_field(r.metric) + ',' +
           format_double(r.value) + '\n';
  }
  return out;
}

inline std::vector<MetricRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader)
    throw std::invalid_argument("metrics csv: missing or unexpected header");
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 8) throw std::invalid_argument("metrics csv: expected 8 columns, got " + std::to_string(f.size()));
    rows.push_back({f[0], std::stoull(f[1]), f[2], std::stol(f[3]), std::stol(f[4]), parse_double(f[5]), f[6],
                    parse_double(f[7])});
  }
  return rows;
}

inline std::string timing_csv(const std::vector<TimingRow>& rows) {
  std::ostringstream out;
  out << "method,seed,phase,step,sparsity,wall_ms\n";
  for (const auto& r : rows)
    out << csv_field(r.method) << ',' << r.seed << ',' << csv_field(r.phase) << ',' << r.step << ','
        << format_double(r.sparsity) << ',' << format_double(r.wall_ms) << '\n';
  return out.str();
}

/// Writes via a temporary sibling and rename, so readers never observe a
/// partially written file.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + tmp + "'");
    f << content;
    f.flush();
    if (!f) throw std::runtime_error("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Git blob object id (SHA-1 over "blob <size>\0<content>").
inline std::string content_hash(const std::string& content) {
  const std::string obj = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(obj.data(), obj.size(), md, &len, EVP_sha1(), nullptr) != 1)
    throw std::runtime_error("content_hash: digest failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return out.str();
}

inline std::string seeds_text(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? "," : "") + std::to_string(seeds[i]);
  return s;
}

inline std::string manifest_json(const ExperimentRecord& r) {
  nlohmann::ordered_json j;
  j["experiment"] = r.experiment;
  j["code_version"] = kCodeVersion;
  j["seeds"] = r.seeds;
  j["config"] = r.config.to_json();
  j["input_hash"] = content_hash(r.experiment + "\n" + r.config.canonical() + "seeds = " + seeds_text(r.seeds) + "\n");
  j["metrics_hash"] = content_hash(metrics_csv(r.metrics));
  j["notes"] = r.notes;
  return j.dump(2) + "\n";
}

// Seed-level aggregation.

struct MeanSem {
  double mean = 0.0;
  double sem = 0.0;
  std::size_t count = 0;
};

inline MeanSem mean_sem(const std::vector<double>& xs) {
  MeanSem out;
  out.count = xs.size();
  if (xs.empty()) return out;
  for (double x : xs) out.mean += x;
  out.mean /= double(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - out.mean) * (x - out.mean);
    out.sem = std::sqrt(ss / double(xs.size() - 1) / double(xs.size()));
  }
  return out;
}

/// Rows matching (method, metric[, phase]) selected by `pred`.
template <class Pred>
std::vector<MetricRow> select_rows(const std::vector<MetricRow>& rows, Pred&& pred) {
  std::vector<MetricRow> out;
  for (const auto& r : rows)
    if (pred(r)) out.push_back(r);
  return out;
}

/// Per-seed value of `metric` for `method` at the last recorded step.
inline std::map<std::uint64_t, double> final_values(const std::vector<MetricRow>& rows, const std::string& method,
                                                    const std::string& metric, const std::string& phase = "") {
  std::map<std::uint64_t, std::pair<Index, double>> best;
  for (const auto& r : rows) {
    if (r.method != method || r.metric != metric || (!phase.empty() && r.phase != phase)) continue;
    auto it = best.find(r.seed);
    if (it == best.end() || r.step >= it->second.first) best[r.seed] = {r.step, r.value};
  }
  std::map<std::uint64_t, double> out;
  for (const auto& [s, v] : best) out[s] = v.second;
  return out;
}

/// Plain-text table: mean +- s.e.m. over seeds at each series' last step, plus
/// the experiment notes.
inline std::string summary_text(const ExperimentRecord& r) {
  std::ostringstream out;
  out << "experiment: " << r.experiment << "\nseeds: " << seeds_text(r.seeds) << "\n\n";
  std::map<std::tuple<std::string, std::string, std::string>, std::map<std::uint64_t, std::pair<Index, double>>> last;
  for (const auto& m : r.metrics) {
    if (m.phase == "snapshot") continue;  // per-index scatter data, no final value
    auto& slot = last[{m.metric, m.phase, m.method}];
    auto it = slot.find(m.seed);
    if (it == slot.end() || m.step >= it->second.first) slot[m.seed] = {m.step, m.value};
  }
  out << std::left << std::setw(22) << "metric" << std::setw(12) << "phase" << std::setw(28) << "method"
      << "final (mean +- sem, n)\n";
  for (const auto& [key, per_seed] : last) {
    std::vector<double> xs;
    for (const auto& [s, v] : per_seed) xs.push_back(v.second);
    const auto ms = mean_sem(xs);
    std::ostringstream val;
    val << std::setprecision(6) << ms.mean << " +- " << ms.sem << " (" << ms.count << ")";
    out << std::left << std::setw(22) << std::get<0>(key) << std::setw(12) << std::get<1>(key) << std::setw(28)
        << std::get<2>(key) << val.str() << '\n';
  }
  if (!r.notes.empty()) {
    out << "\nnotes:\n";
    for (const auto& n : r.notes) out << "  " << n << '\n';
  }
  return out.str();
}

}  // namespace fls::harness
