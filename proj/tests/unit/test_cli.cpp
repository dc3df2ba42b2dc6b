#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "gtest/gtest.h"
#include "gpelab/cli.hpp"

namespace gpelab::cli {
namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gpelab_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  f << s;
}

// A small multi-document corpus.
fs::path tiny_corpus(const fs::path& dir) {
  std::ostringstream os;
  for (int d = 0; d < 10; ++d) {
    if (d) os << "<|endoftext|>";
    for (int i = 0; i < 30; ++i) os << "Doc " << d << " has word " << i << ". ";
  }
  const fs::path p = dir / "tiny.txt";
  write_text(p, os.str());
  return p;
}

TEST(Csv, FormatNumberRoundTrips) {
  for (double x : {0.1, 1.0 / 3.0, 6e-4, 1e300, -2.5, 0.0}) {
    EXPECT_EQ(std::stod(format_number(x)), x);
  }
  EXPECT_EQ(format_number(2.0), "2");
  EXPECT_EQ(format_number(std::nan("")), "nan");
  EXPECT_EQ(format_number(-INFINITY), "-inf");
}

TEST(Csv, SchemaLineAndHeader) {
  EXPECT_EQ(eval_schema().schema_line(), "#schema=gpelab.eval/v1");
  EXPECT_EQ(eval_schema().header(),
            "encoding,train_context,prompt_length,perplexity,mean_attention_entropy,"
            "n_eval_tokens");
  EXPECT_EQ(sweep_schema().header(),
            "seed,encoding,train_context,prompt_length,perplexity,mean_attention_entropy,"
            "n_eval_tokens");
  EXPECT_EQ(bench_schema().header(),
            "encoding,phase,tokens_per_sec,param_bytes,peak_activation_bytes_estimate");
}

TEST(Csv, WriteReadRoundTripAndValidation) {
  const fs::path dir = scratch("csv");
  CsvWriter w(dir / "a.csv", loss_schema());
  w.row({"0", "4.5", "1e-05"});
  w.row({"10", "3.25", "0.0006"});
  EXPECT_THROW(w.row({"1", "2"}), std::logic_error);
  w.close();
  EXPECT_EQ(slurp(dir / "a.csv"),
            "#schema=gpelab.loss/v1\niter,loss,lr\n0,4.5,1e-05\n10,3.25,0.0006\n");
  const auto rows = read_csv(dir / "a.csv", loss_schema());
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1][1], "3.25");
  EXPECT_THROW(read_csv(dir / "a.csv", eval_schema()), UsageError);
  EXPECT_THROW(read_csv(dir / "missing.csv", loss_schema()), UsageError);
}

TEST(Metadata, NoTimestampsAndRoundTrip) {
  const fs::path dir = scratch("meta");
  write_metadata(dir, "unit", {{"x", 1}}, {{"extra_key", "v"}});
  const auto first = slurp(dir / "metadata.json");
  write_metadata(dir, "unit", {{"x", 1}}, {{"extra_key", "v"}});
  EXPECT_EQ(slurp(dir / "metadata.json"), first);
  const auto j = read_metadata(dir);
  EXPECT_EQ(j["command"], "unit");
  EXPECT_EQ(j["config"]["x"], 1);
  EXPECT_EQ(j["extra_key"], "v");
  EXPECT_EQ(j["version"], kVersion);
}

TEST(Data, MissingOrEmptyCorpusIsUsageError) {
  const fs::path dir = scratch("data");
  DataConfig cfg;
  cfg.corpus = (dir / "nope.txt").string();
  EXPECT_THROW(load_data(cfg), UsageError);
  write_text(dir / "empty.txt", "");
  cfg.corpus = (dir / "empty.txt").string();
  EXPECT_THROW(load_data(cfg), UsageError);
}

TEST(Data, ValidationSplitIsTailOfDocuments) {
  const fs::path dir = scratch("split");
  DataConfig cfg;
  cfg.corpus = tiny_corpus(dir).string();
  const auto data = load_data(cfg);
  EXPECT_EQ(data.documents.size(), 10u);
  EXPECT_EQ(data.val.documents.size(), 1u);
  EXPECT_EQ(data.train.documents.size(), 9u);
}

TEST(Analyze, RerunIsByteIdentical) {
  const fs::path dir = scratch("analyze");
  AnalyzeConfig cfg;
  cfg.samples = 2000;
  cfg.grid = {64, 128, 256, 512, 1024};
  cfg.out = (dir / "a").string();
  const auto reports = cmd_analyze(cfg);
  ASSERT_EQ(reports.size(), 3u);
  cfg.out = (dir / "b").string();
  cmd_analyze(cfg);
  for (const char* f :
       {"normalization.csv", "entropy.csv", "moments.csv", "report.csv", "metadata.json"}) {
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
  const auto rows = read_csv(dir / "a" / "normalization.csv", normalization_schema());
  EXPECT_EQ(rows.size(), 15u);
}

TEST(Analyze, RejectsUnknownEncoding) {
  AnalyzeConfig cfg;
  cfg.encodings = {"rope", "xpos"};
  cfg.out = scratch("badenc").string();
  EXPECT_THROW(cmd_analyze(cfg), UsageError);
}

TEST(SweepSpec, UnknownKeysNamedByPointer) {
  const auto expect_pointer = [](const nlohmann::json& j, const std::string& pointer) {
    try {
      parse_sweep_spec(j);
      FAIL() << "accepted " << j.dump();
    } catch (const UsageError& e) {
      EXPECT_NE(std::string(e.what()).find(pointer), std::string::npos) << e.what();
    }
  };
  expect_pointer({{"corpus", "c"}, {"contexs", {64}}}, "/contexs");
  expect_pointer({{"corpus", "c"}, {"model", {{"n_layer", 2}}}}, "/model/n_layer");
  expect_pointer({{"corpus", "c"}, {"train", {{"lr", 1.0}}}}, "/train/lr");
  expect_pointer({{"corpus", "c"}, {"eval", {{"budget", 1}}}}, "/eval/budget");
  expect_pointer({{"corpus", "c"}, {"encodings", {"rope", "xpos"}}}, "/encodings/1");
  expect_pointer({{"corpus", "c"}, {"seeds", nlohmann::json::array()}}, "/seeds");
  expect_pointer({{"encodings", {"rope"}}}, "/corpus");
}

TEST(SweepSpec, ParsesResolvedValues) {
  const auto s = parse_sweep_spec({{"corpus", "c.txt"},
                                   {"encodings", {"alibi"}},
                                   {"contexts", {32, 64}},
                                   {"seeds", {1, 2}},
                                   {"model", {{"n_layers", 2}}},
                                   {"train", {{"iterations", 5}}},
                                   {"eval", {{"prompt_lengths", {32}}}}});
  EXPECT_EQ(s.data.corpus, "c.txt");
  EXPECT_EQ(s.contexts, (std::vector<int>{32, 64}));
  EXPECT_EQ(s.model.n_layers, 2);
  EXPECT_EQ(s.train.iterations, 5);
  EXPECT_EQ(s.eval.prompt_lengths, std::vector<int>{32});
}

SweepSpec tiny_sweep(const fs::path& corpus) {
  SweepSpec s;
  s.data.corpus = corpus.string();
  s.encodings = {"rope", "ape"};
  s.contexts = {16};
  s.seeds = {3};
  s.model.n_layers = 1;
  s.model.n_heads = 2;
  s.model.d_model = 8;
  s.train.iterations = 4;
  s.train.warmup_iters = 1;
  s.train.eval_interval = 2;
  s.eval.prompt_lengths = {16, 32};
  s.eval.token_budget = 64;
  return s;
}

TEST(Sweep, ResumeReusesFinishedCellsOnly) {
  const fs::path dir = scratch("sweep");
  const fs::path corpus = tiny_corpus(dir);
  const auto out = (dir / "out").string();
  const auto first = cmd_sweep(tiny_sweep(corpus), out);
  ASSERT_EQ(first.cells.size(), 2u);
  EXPECT_FALSE(first.cells[0].reused);
  EXPECT_EQ(first.cells[0].name, "rope-ctx16-seed3");
  const auto combined = slurp(first.combined_csv);

  const auto second = cmd_sweep(tiny_sweep(corpus), out);
  EXPECT_TRUE(second.cells[0].reused);
  EXPECT_TRUE(second.cells[1].reused);
  EXPECT_EQ(slurp(second.combined_csv), combined);

  // A changed config invalidates the hash, so the cell is trained again.
  auto changed = tiny_sweep(corpus);
  changed.train.iterations = 5;
  const auto third = cmd_sweep(changed, out);
  EXPECT_FALSE(third.cells[0].reused);
  EXPECT_NE(third.cells[0].hash, first.cells[0].hash);

  const auto rows = read_csv(first.combined_csv, sweep_schema());
  EXPECT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0][0], "3");
}

TEST(Finetune, ZeroLearningRateSameEncodingChangesNothing) {
  const fs::path dir = scratch("finetune");
  TrainCommand tc;
  tc.data.corpus = tiny_corpus(dir).string();
  tc.model.n_layers = 1;
  tc.model.n_heads = 2;
  tc.model.d_model = 8;
  tc.model.train_context = 16;
  tc.model.encoding.kind = lm::PositionKind::kAlibi;
  tc.train.iterations = 3;
  tc.train.warmup_iters = 1;
  tc.out = (dir / "train").string();
  cmd_train(tc);

  FinetuneCommand fc;
  fc.checkpoint = (dir / "train" / "model.ckpt").string();
  fc.data = tc.data;
  fc.encoding.kind = lm::PositionKind::kAlibi;
  fc.corpus_fraction = 1.0;
  fc.iterations = 3;
  fc.learning_rate = 0.0;
  fc.eval.prompt_lengths = {16};
  fc.eval.token_budget = 32;
  fc.out = (dir / "ft").string();
  const auto out = cmd_finetune(fc);
  ASSERT_EQ(out.before.size(), 1u);
  EXPECT_EQ(out.before[0].perplexity, out.after[0].perplexity);
  const auto a = lm::load_checkpoint(fc.checkpoint);
  const auto b = lm::load_checkpoint(out.checkpoint.string());
  EXPECT_EQ(a.parameters, b.parameters);
}

#ifdef GPELAB_EXE
int run(const std::string& args) {
  const std::string cmd = std::string(GPELAB_EXE) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Executable, ExitCodes) {
  const fs::path dir = scratch("exe");
  EXPECT_EQ(run("--version"), 0);
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("analyze"), 2);  // --out missing
  EXPECT_EQ(run("train --corpus " + (dir / "missing.txt").string() + " --out " +
                (dir / "t").string()),
            2);
  write_text(dir / "bad.ckpt", "not a checkpoint");
  EXPECT_EQ(run("eval --checkpoint " + (dir / "bad.ckpt").string() + " --corpus " +
                tiny_corpus(dir).string() + " --out " + (dir / "e").string()),
            2);
  write_text(dir / "spec.json", R"({"corpus": "x", "model": {"layers": 2}})");
  EXPECT_EQ(run("sweep --spec " + (dir / "spec.json").string() + " --out " +
                (dir / "s").string()),
            2);
  EXPECT_EQ(run("analyze --samples 100 --grid 64,128,256,512,1024 --out " + (dir / "a").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "a" / "report.csv"));
}

TEST(Executable, SeedPrecedence) {
  const fs::path dir = scratch("seed");
  const auto seed_of = [&](const std::string& prefix, const std::string& args) {
    const fs::path out = dir / "a";
    fs::remove_all(out);
    const std::string cmd = prefix + " " + std::string(GPELAB_EXE) + " " + args +
                            " analyze --samples 100 --grid 64,128,256,512,1024 --out " +
                            out.string() + " >/dev/null 2>&1";
    EXPECT_EQ(std::system(cmd.c_str()), 0) << cmd;
    return read_metadata(out)["config"]["seed"].get<std::uint64_t>();
  };
  write_text(dir / "c.ini", "[analyze]\nseed = 7\n");
  const std::string cfg = "--config " + (dir / "c.ini").string();
  EXPECT_EQ(seed_of("", ""), 1234u);
  EXPECT_EQ(seed_of("GPELAB_SEED=9", ""), 9u);
  EXPECT_EQ(seed_of("GPELAB_SEED=9", cfg), 7u);
  // A flag after the subcommand beats both.
  const fs::path out = dir / "b";
  const std::string cmd = "GPELAB_SEED=9 " + std::string(GPELAB_EXE) + " " + cfg +
                          " analyze --seed 3 --samples 100 --grid 64,128,256,512,1024 --out " +
                          out.string() + " >/dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_EQ(read_metadata(out)["config"]["seed"], 3);

  write_text(dir / "bad.ini", "[analyze]\nbogus = 1\n");
  EXPECT_EQ(run("--config " + (dir / "bad.ini").string() + " analyze --out " +
                (dir / "c").string()),
            2);
}
#endif

}  // namespace
}  // namespace gpelab::cli
