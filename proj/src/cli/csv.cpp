#include <Eigen/Core>

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "gpelab/cli.hpp"

namespace gpelab::cli {
namespace {

std::string join(const std::vector<std::string>& parts) {
  std::string s;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) s += ',';
    s += parts[i];
  }
  return s;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << bytes;
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

std::string CsvSchema::schema_line() const {
  return "#schema=gpelab." + name + "/v" + std::to_string(version);
}

std::string CsvSchema::header() const { return join(columns); }

const CsvSchema& normalization_schema() {
  static const CsvSchema s{"normalization", 1, {"encoding", "L", "log_Z_L"}};
  return s;
}
const CsvSchema& entropy_schema() {
  static const CsvSchema s{"entropy", 1, {"encoding", "L", "H_L"}};
  return s;
}
const CsvSchema& moments_schema() {
  static const CsvSchema s{"moments", 1, {"encoding", "n", "mean", "variance", "samples"}};
  return s;
}
const CsvSchema& report_schema() {
  static const CsvSchema s{
      "report", 1, {"encoding", "convergence", "entropy_bounded", "gps", "ldcp_range"}};
  return s;
}
const CsvSchema& loss_schema() {
  static const CsvSchema s{"loss", 1, {"iter", "loss", "lr"}};
  return s;
}
const CsvSchema& eval_schema() {
  static const CsvSchema s{"eval",
                           1,
                           {"encoding", "train_context", "prompt_length", "perplexity",
                            "mean_attention_entropy", "n_eval_tokens"}};
  return s;
}
const CsvSchema& bench_schema() {
  static const CsvSchema s{"bench",
                           1,
                           {"encoding", "phase", "tokens_per_sec", "param_bytes",
                            "peak_activation_bytes_estimate"}};
  return s;
}
const CsvSchema& sweep_schema() {
  static const CsvSchema s{"sweep",
                           1,
                           {"seed", "encoding", "train_context", "prompt_length", "perplexity",
                            "mean_attention_entropy", "n_eval_tokens"}};
  return s;
}
const CsvSchema& readability_schema() {
  static const CsvSchema s{"readability",
                           1,
                           {"doc_id", "words", "sentences", "syllables", "fre", "gunning_fog",
                            "ari"}};
  return s;
}

std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, r.ptr);
}

CsvWriter::CsvWriter(const fs::path& path, const CsvSchema& schema)
    : path_(path), columns_(schema.columns.size()) {
  buffer_ = schema.schema_line() + "\n" + schema.header() + "\n";
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_) {
    throw std::logic_error("csv row has " + std::to_string(cells.size()) + " cells, expected " +
                           std::to_string(columns_));
  }
  buffer_ += join(cells);
  buffer_ += '\n';
}

void CsvWriter::close() { write_file(path_, buffer_); }

std::vector<std::vector<std::string>> read_csv(const fs::path& path, const CsvSchema& schema) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != schema.schema_line()) {
    throw UsageError(path.string() + ": expected schema line " + schema.schema_line());
  }
  if (!std::getline(f, line) || line != schema.header()) {
    throw UsageError(path.string() + ": unexpected header");
  }
  std::vector<std::vector<std::string>> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != schema.columns.size()) {
      throw UsageError(path.string() + ": malformed row '" + line + "'");
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

void write_metadata(const fs::path& dir, const std::string& command, const nlohmann::json& config,
                    const nlohmann::json& extra) {
  nlohmann::json j;
  j["tool"] = "gpelab";
  j["version"] = kVersion;
  j["command"] = command;
  j["config"] = config;
  j["build"] = {{"compiler", __VERSION__},
                {"cxx_standard", static_cast<long>(__cplusplus)},
                {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                              std::to_string(EIGEN_MAJOR_VERSION) + "." +
                              std::to_string(EIGEN_MINOR_VERSION)},
                {"threads", 1}};
  for (const auto& [k, v] : extra.items()) j[k] = v;
  write_file(dir / "metadata.json", j.dump(2) + "\n");
}

nlohmann::json read_metadata(const fs::path& dir) {
  std::ifstream f(dir / "metadata.json");
  if (!f) throw UsageError("no metadata.json in " + dir.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("malformed metadata.json in " + dir.string() + ": " + e.what());
  }
}

}  // namespace gpelab::cli
