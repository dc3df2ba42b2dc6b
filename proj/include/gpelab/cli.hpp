#pragma once

// Subcommand implementations behind the `gpelab` executable. Every command
// writes its outputs plus metadata.json into an output directory.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpelab/corpus.hpp"
#include "gpelab/lm/bench.hpp"
#include "gpelab/lm/checkpoint.hpp"
#include "gpelab/lm/config.hpp"
#include "gpelab/lm/evaluate.hpp"
#include "gpelab/lm/train.hpp"
#include "gpelab/property_lab.hpp"

namespace gpelab::cli {

namespace fs = std::filesystem;

inline constexpr const char* kVersion = "0.1.0";

// Bad input from the user (missing file, malformed spec, invalid option).
// The executable maps it to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- CSV ----

struct CsvSchema {
  std::string name;
  int version = 1;
  std::vector<std::string> columns;

  std::string schema_line() const;  // "#schema=gpelab.<name>/v<version>"
  std::string header() const;       // comma-joined columns
};

const CsvSchema& normalization_schema();
const CsvSchema& entropy_schema();
const CsvSchema& moments_schema();
const CsvSchema& report_schema();
const CsvSchema& loss_schema();
const CsvSchema& eval_schema();
const CsvSchema& bench_schema();
const CsvSchema& sweep_schema();
const CsvSchema& readability_schema();

// Shortest decimal that round-trips to the same double.
std::string format_number(double x);

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const CsvSchema& schema);
  void row(const std::vector<std::string>& cells);
  void close();

 private:
  fs::path path_;
  std::size_t columns_;
  std::string buffer_;
};

// Reads a file written by CsvWriter, checking the schema line and header.
// Returns the data rows.
std::vector<std::vector<std::string>> read_csv(const fs::path& path, const CsvSchema& schema);

// ---- metadata ----

// metadata.json: tool version, command, resolved config and build details.
// Contains no timestamps or host names, so reruns are byte-identical.
void write_metadata(const fs::path& dir, const std::string& command, const nlohmann::json& config,
                    const nlohmann::json& extra = nlohmann::json::object());
nlohmann::json read_metadata(const fs::path& dir);

// ---- data ----

struct DataConfig {
  std::string corpus;
  std::string separator = std::string(corpus::kDefaultSeparator);
  double val_fraction = 0.1;
};

struct LoadedData {
  std::vector<std::string> documents;
  std::shared_ptr<const corpus::Vocab> vocab;
  corpus::Corpus train;
  corpus::Corpus val;
  std::int64_t replaced_sequences = 0;
};

// Ingests and splits the corpus. Without `vocab`, one is built from every
// document. Throws UsageError when the file is missing or empty.
LoadedData load_data(const DataConfig& cfg,
                     std::shared_ptr<const corpus::Vocab> vocab = nullptr);

nlohmann::json to_json(const DataConfig& cfg);

// ---- analyze ----

struct AnalyzeConfig {
  std::vector<std::string> encodings{"rope", "alibi", "ape"};
  int d = 64;
  std::vector<std::int64_t> grid = lab::default_grid();
  std::uint64_t seed = 1234;
  std::int64_t samples = 100000;
  std::vector<std::int64_t> moment_positions{0, 1, 10, 100, 1000};
  double rope_base = 10000.0;
  double alibi_slope = 0.5;
  double ape_lambda = 0.1;
  double ape_delta = 0.5;
  double ape_beta = 0.1;
  double ape_gamma = 0.1;
  double ldcp_threshold = 1.0;
  std::string out;
};

// Analysis encoding by name ("rope", "alibi", "ape", "identity").
Encoding analysis_encoding(const std::string& name, const AnalyzeConfig& cfg);

std::vector<lab::PropertyReport> cmd_analyze(const AnalyzeConfig& cfg);

// ---- train ----

struct TrainCommand {
  DataConfig data;
  lm::ModelConfig model;
  lm::TrainConfig train;
  std::string out;
  bool resume = false;  // continue from out/model.ckpt when present
  bool verbose = false;
};

struct TrainOutcome {
  fs::path checkpoint;
  std::vector<lm::LossRecord> log;
};

TrainOutcome cmd_train(const TrainCommand& cmd);

// ---- eval ----

enum class EvalSplit { kVal, kTrain, kAll };
EvalSplit parse_eval_split(const std::string& name);
std::string to_string(EvalSplit split);

struct EvalCommand {
  std::string checkpoint;
  DataConfig data;
  EvalSplit split = EvalSplit::kVal;
  lm::EvalOptions eval;  // empty prompt_lengths -> powers of two from train_context
  std::string out;
};

std::vector<lm::EvalRecord> cmd_eval(const EvalCommand& cmd);

// Writes eval rows (skipped lengths omitted) to `path`.
void write_eval_csv(const fs::path& path, const std::vector<lm::EvalRecord>& records);

// ---- bench ----

struct BenchCommand {
  std::string checkpoint;                // bench this model, or
  lm::ModelConfig model;                 // build one per encoding from this config
  std::vector<std::string> encodings{"rope", "alibi", "ape"};
  std::vector<lm::BenchPhase> phases{lm::BenchPhase::kTrain, lm::BenchPhase::kInference};
  lm::BenchOptions bench;
  std::string out;
};

std::vector<lm::BenchResult> cmd_bench(const BenchCommand& cmd);

// ---- finetune ----

struct FinetuneCommand {
  std::string checkpoint;
  DataConfig data;
  lm::EncodingSpec encoding;
  double corpus_fraction = 0.01;
  int iterations = 500;
  // Defaults to 10% of the source checkpoint's peak learning rate.
  std::optional<double> learning_rate;
  int warmup_iters = 50;
  lm::EvalOptions eval;  // empty prompt_lengths -> powers of two from train_context
  std::string out;
};

struct FinetuneOutcome {
  std::vector<lm::EvalRecord> before;
  std::vector<lm::EvalRecord> after;
  fs::path checkpoint;
};

FinetuneOutcome cmd_finetune(const FinetuneCommand& cmd);

// ---- sweep ----

struct SweepSpec {
  DataConfig data;
  std::vector<std::string> encodings{"rope", "alibi", "ape"};
  std::vector<int> contexts{64};
  std::vector<std::uint64_t> seeds{1337};
  lm::ModelConfig model;
  lm::TrainConfig train;
  lm::EvalOptions eval;
};

// Throws UsageError naming the offending key (as a JSON pointer).
SweepSpec parse_sweep_spec(const nlohmann::json& j);
SweepSpec load_sweep_spec(const fs::path& path);

struct SweepCell {
  std::string encoding;
  int context = 0;
  std::uint64_t seed = 0;
  std::string name;  // directory name under the sweep output
  std::string hash;  // of the fully resolved cell config
  bool reused = false;
};

struct SweepOutcome {
  std::vector<SweepCell> cells;
  fs::path combined_csv;
};

SweepOutcome cmd_sweep(const SweepSpec& spec, const std::string& out, bool verbose = false);

// ---- corpus ----

struct CorpusCommand {
  DataConfig data;
  std::vector<corpus::LengthBucket> buckets = corpus::default_buckets();
  std::string out;
};

// Writes buckets.csv (doc_id,word_count,bucket) and readability.csv.
void cmd_corpus(const CorpusCommand& cmd);

}  // namespace gpelab::cli
