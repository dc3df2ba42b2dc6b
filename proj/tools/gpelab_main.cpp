#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "gpelab/cli.hpp"

namespace cli = gpelab::cli;
namespace lm = gpelab::lm;

namespace {

constexpr const char* kSeedEnv = "GPELAB_SEED";

void add_data_options(CLI::App* app, cli::DataConfig& d) {
  app->add_option("--corpus", d.corpus, "UTF-8 text file")->required();
  app->add_option("--separator", d.separator, "document separator");
  app->add_option("--val-fraction", d.val_fraction, "fraction of documents held out (tail)")
      ->capture_default_str();
}

struct EncodingFlags {
  std::string kind = "rope";
  double rope_base = 10000.0;
  bool frozen = false;
  double lambda = 0.1;
  double delta = 0.0;
  CLI::Option* delta_opt = nullptr;
  double beta = 0.01;
  double gamma = 0.01;

  lm::EncodingSpec spec() const {
    lm::EncodingSpec s;
    s.kind = lm::parse_position_kind(kind);
    s.rope_base = rope_base;
    s.learnable = !frozen;
    s.ape_lambda = lambda;
    if (delta_opt && delta_opt->count()) s.ape_delta = delta;
    s.ape_beta = beta;
    s.ape_gamma = gamma;
    return s;
  }
};

void add_encoding_options(CLI::App* app, EncodingFlags& e, bool with_kind = true) {
  if (with_kind) {
    app->add_option("--encoding", e.kind, "none, rope, alibi or ape")->capture_default_str();
  }
  app->add_option("--rope-base", e.rope_base)->capture_default_str();
  app->add_flag("--ape-frozen", e.frozen, "keep APE parameters fixed during training");
  app->add_option("--ape-lambda", e.lambda)->capture_default_str();
  e.delta_opt = app->add_option("--ape-delta", e.delta, "default: per-head ALiBi slope");
  app->add_option("--ape-beta", e.beta)->capture_default_str();
  app->add_option("--ape-gamma", e.gamma)->capture_default_str();
}

void add_model_options(CLI::App* app, lm::ModelConfig& m) {
  app->add_option("--layers", m.n_layers)->capture_default_str();
  app->add_option("--heads", m.n_heads)->capture_default_str();
  app->add_option("--d-model", m.d_model)->capture_default_str();
  app->add_option("--context", m.train_context, "training context length")->capture_default_str();
  app->add_option("--dropout", m.dropout)->capture_default_str();
}

void add_train_options(CLI::App* app, lm::TrainConfig& t, std::string& schedule) {
  app->add_option("--batch-size", t.batch_size)->capture_default_str();
  app->add_option("--lr", t.learning_rate, "peak learning rate")->capture_default_str();
  app->add_option("--min-lr-ratio", t.min_lr_ratio)->capture_default_str();
  app->add_option("--weight-decay", t.weight_decay)->capture_default_str();
  app->add_option("--grad-clip", t.grad_clip)->capture_default_str();
  app->add_option("--iterations", t.iterations)->capture_default_str();
  app->add_option("--warmup", t.warmup_iters)->capture_default_str();
  app->add_option("--lr-schedule", schedule)
      ->check(CLI::IsMember({"cosine", "constant"}))
      ->capture_default_str();
  app->add_option("--log-interval", t.eval_interval)->capture_default_str();
}

void add_eval_options(CLI::App* app, lm::EvalOptions& e, std::uint64_t& seed) {
  app->add_option("--prompt-lengths", e.prompt_lengths,
                  "default: powers of two from the training context")
      ->delimiter(',');
  app->add_option("--seed", seed, "window sampling seed")->envname(kSeedEnv)->capture_default_str();
  app->add_option("--token-budget", e.token_budget)->capture_default_str();
  app->add_option("--entropy-tail", e.entropy_tail)->capture_default_str();
}

lm::LrSchedule parse_schedule(const std::string& s) {
  return s == "constant" ? lm::LrSchedule::kConstant : lm::LrSchedule::kCosine;
}

std::vector<gpelab::corpus::LengthBucket> parse_buckets(const std::vector<std::string>& specs) {
  std::vector<gpelab::corpus::LengthBucket> out;
  for (const auto& s : specs) {
    const auto a = s.find(':');
    const auto b = s.find(':', a == std::string::npos ? a : a + 1);
    if (a == std::string::npos || b == std::string::npos) {
      throw cli::UsageError("bucket must look like name:min:max, got " + s);
    }
    try {
      out.push_back({s.substr(0, a), std::stoll(s.substr(a + 1, b - a - 1)),
                     std::stoll(s.substr(b + 1))});
    } catch (const std::logic_error&) {
      throw cli::UsageError("bucket must look like name:min:max, got " + s);
    }
  }
  return out;
}

void print_records(const std::vector<lm::EvalRecord>& records) {
  std::printf("%-8s %6s %8s %12s %10s\n", "encoding", "ctx", "prompt", "perplexity", "entropy");
  for (const auto& r : records) {
    if (r.skipped()) {
      std::printf("%-8s %6d %8d  skipped: %s\n", r.encoding.c_str(), r.train_context,
                  r.prompt_length, r.warning.c_str());
    } else {
      std::printf("%-8s %6d %8d %12.4f %10.4f\n", r.encoding.c_str(), r.train_context,
                  r.prompt_length, r.perplexity, r.mean_attention_entropy);
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gpelab: generalized positional encoding lab"};
  app.set_version_flag("--version", cli::kVersion);
  app.set_config("--config", "", "INI file; [section] names a subcommand");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "progress on stderr");

  // analyze
  cli::AnalyzeConfig an;
  auto* analyze = app.add_subcommand("analyze", "property report for analytic encodings");
  analyze->add_option("--encodings", an.encodings, "rope, alibi, ape, identity")
      ->delimiter(',')
      ->capture_default_str();
  analyze->add_option("--d", an.d, "head dimension")->capture_default_str();
  analyze->add_option("--grid", an.grid, "lengths L")->delimiter(',');
  analyze->add_option("--seed", an.seed)->envname(kSeedEnv)->capture_default_str();
  analyze->add_option("--samples", an.samples, "Monte Carlo samples per position")
      ->capture_default_str();
  analyze->add_option("--moment-positions", an.moment_positions)->delimiter(',');
  analyze->add_option("--rope-base", an.rope_base)->capture_default_str();
  analyze->add_option("--alibi-slope", an.alibi_slope)->capture_default_str();
  analyze->add_option("--ape-lambda", an.ape_lambda)->capture_default_str();
  analyze->add_option("--ape-delta", an.ape_delta)->capture_default_str();
  analyze->add_option("--ape-beta", an.ape_beta)->capture_default_str();
  analyze->add_option("--ape-gamma", an.ape_gamma)->capture_default_str();
  analyze->add_option("--ldcp-threshold", an.ldcp_threshold)->capture_default_str();
  analyze->add_option("--out", an.out)->required();

  // train
  cli::TrainCommand tr;
  EncodingFlags tr_enc;
  std::string tr_schedule = "cosine";
  std::uint64_t tr_seed = 1337;
  auto* train = app.add_subcommand("train", "train a character-level model");
  add_data_options(train, tr.data);
  add_model_options(train, tr.model);
  add_encoding_options(train, tr_enc);
  add_train_options(train, tr.train, tr_schedule);
  train->add_option("--seed", tr_seed, "init, sampling and dropout seed")
      ->envname(kSeedEnv)
      ->capture_default_str();
  train->add_option("--out", tr.out)->required();
  train->add_flag("--resume", tr.resume, "continue from <out>/model.ckpt");

  // eval
  cli::EvalCommand ev;
  std::string ev_split = "val";
  auto* eval = app.add_subcommand("eval", "perplexity and attention entropy per prompt length");
  eval->add_option("--checkpoint", ev.checkpoint)->required();
  add_data_options(eval, ev.data);
  eval->add_option("--split", ev_split)
      ->check(CLI::IsMember({"val", "train", "all"}))
      ->capture_default_str();
  add_eval_options(eval, ev.eval, ev.eval.seed);
  eval->add_option("--out", ev.out)->required();

  // bench
  cli::BenchCommand be;
  be.model.vocab_size = 96;
  std::vector<std::string> be_phases{"train", "inference"};
  auto* bench = app.add_subcommand("bench", "throughput and memory per encoding");
  bench->add_option("--checkpoint", be.checkpoint, "bench this model instead of fresh ones");
  bench->add_option("--encodings", be.encodings)->delimiter(',')->capture_default_str();
  bench->add_option("--phases", be_phases)->delimiter(',')->capture_default_str();
  add_model_options(bench, be.model);
  bench->add_option("--vocab-size", be.model.vocab_size)->capture_default_str();
  bench->add_option("--batch", be.bench.batch)->capture_default_str();
  bench->add_option("--length", be.bench.length, "0: training context")->capture_default_str();
  bench->add_option("--warmup-steps", be.bench.warmup_steps)->capture_default_str();
  bench->add_option("--steps", be.bench.steps)->capture_default_str();
  bench->add_option("--seed", be.bench.seed)->envname(kSeedEnv)->capture_default_str();
  bench->add_option("--out", be.out)->required();

  // finetune
  cli::FinetuneCommand ft;
  EncodingFlags ft_enc;
  ft_enc.kind = "ape";
  double ft_lr = 0.0;
  auto* finetune = app.add_subcommand("finetune", "swap the positional encoding and fine-tune");
  finetune->add_option("--checkpoint", ft.checkpoint)->required();
  add_data_options(finetune, ft.data);
  add_encoding_options(finetune, ft_enc);
  finetune->add_option("--fraction", ft.corpus_fraction, "share of training tokens used")
      ->capture_default_str();
  finetune->add_option("--iterations", ft.iterations)->capture_default_str();
  auto* ft_lr_opt =
      finetune->add_option("--lr", ft_lr, "default: 10% of the source peak learning rate");
  finetune->add_option("--warmup", ft.warmup_iters)->capture_default_str();
  add_eval_options(finetune, ft.eval, ft.eval.seed);
  finetune->add_option("--out", ft.out)->required();

  // sweep
  std::string sw_spec, sw_out;
  auto* sweep = app.add_subcommand("sweep", "train and evaluate a grid of configurations");
  sweep->add_option("--spec", sw_spec, "JSON sweep spec")->required();
  sweep->add_option("--out", sw_out)->required();

  // corpus
  cli::CorpusCommand co;
  std::vector<std::string> co_buckets;
  auto* corpus = app.add_subcommand("corpus", "length buckets and readability scores");
  add_data_options(corpus, co.data);
  corpus->add_option("--buckets", co_buckets, "name:min:max (words); default 0-5k,5k-10k")
      ->delimiter(',');
  corpus->add_option("--out", co.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*analyze) {
      const auto reports = cli::cmd_analyze(an);
      std::printf("%-9s %-12s %-8s %-5s %s\n", "encoding", "convergence", "entropy", "gps",
                  "ldcp_range");
      for (const auto& r : reports) {
        std::printf("%-9s %-12s %-8s %-5s %lld\n", r.encoding.c_str(),
                    gpelab::lab::to_string(r.convergence).c_str(),
                    r.entropy_bounded() ? "bounded" : "growing", r.gps ? "yes" : "no",
                    static_cast<long long>(r.ldcp.range));
      }
    } else if (*train) {
      tr.model.encoding = tr_enc.spec();
      tr.model.seed = tr_seed;
      tr.train.seed = tr_seed;
      tr.train.lr_schedule = parse_schedule(tr_schedule);
      tr.verbose = verbose;
      const auto outcome = cli::cmd_train(tr);
      if (!outcome.log.empty()) {
        std::printf("final loss %.4f after %d iterations\n", outcome.log.back().loss,
                    outcome.log.back().iter + 1);
      }
      std::printf("checkpoint %s\n", outcome.checkpoint.string().c_str());
    } else if (*eval) {
      ev.split = cli::parse_eval_split(ev_split);
      print_records(cli::cmd_eval(ev));
    } else if (*bench) {
      be.phases.clear();
      for (const auto& p : be_phases) be.phases.push_back(lm::parse_bench_phase(p));
      std::printf("%-8s %-10s %14s %12s %16s\n", "encoding", "phase", "tokens/s", "param_bytes",
                  "act_bytes_est");
      for (const auto& r : cli::cmd_bench(be)) {
        std::printf("%-8s %-10s %14.1f %12lld %16lld\n", r.encoding.c_str(),
                    lm::to_string(r.phase).c_str(), r.tokens_per_sec,
                    static_cast<long long>(r.param_bytes),
                    static_cast<long long>(r.peak_activation_bytes_estimate));
      }
    } else if (*finetune) {
      ft.encoding = ft_enc.spec();
      if (ft_lr_opt->count()) ft.learning_rate = ft_lr;
      const auto outcome = cli::cmd_finetune(ft);
      std::printf("before\n");
      print_records(outcome.before);
      std::printf("after\n");
      print_records(outcome.after);
    } else if (*sweep) {
      const auto outcome = cli::cmd_sweep(cli::load_sweep_spec(sw_spec), sw_out, verbose);
      for (const auto& c : outcome.cells) {
        std::printf("%-32s %s %s\n", c.name.c_str(), c.hash.c_str(),
                    c.reused ? "reused" : "trained");
      }
      std::printf("combined %s\n", outcome.combined_csv.string().c_str());
    } else if (*corpus) {
      if (!co_buckets.empty()) co.buckets = parse_buckets(co_buckets);
      cli::cmd_corpus(co);
    }
  } catch (const cli::UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const lm::CheckpointError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fatal: %s\n", e.what());
    return 1;
  }
  return 0;
}
