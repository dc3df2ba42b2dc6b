#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>

#include "gpelab/cli.hpp"

namespace gpelab::cli {
namespace {

using nlohmann::json;

std::string bool_str(bool b) { return b ? "true" : "false"; }

// Runs `f`, turning configuration errors into UsageError.
template <class F>
auto as_usage(const std::string& context, F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(context + ": " + e.what());
  } catch (const lm::CheckpointError& e) {
    throw UsageError(context + ": " + e.what());
  }
}

void ensure_out(const std::string& out) {
  if (out.empty()) throw UsageError("an output directory is required (--out)");
  fs::create_directories(out);
}

std::vector<int> resolve_lengths(const lm::EvalOptions& opt, int train_context,
                                 const corpus::Corpus& c) {
  if (!opt.prompt_lengths.empty()) return opt.prompt_lengths;
  auto lengths = lm::default_prompt_lengths(train_context, c);
  if (lengths.empty()) {
    throw UsageError("evaluation corpus has no document longer than train_context (" +
                     std::to_string(train_context) + " tokens)");
  }
  return lengths;
}

json eval_options_json(const lm::EvalOptions& o) {
  return json{{"prompt_lengths", o.prompt_lengths},
              {"seed", o.seed},
              {"token_budget", o.token_budget},
              {"entropy_tail", o.entropy_tail}};
}

json eval_protocol_json(const lm::EvalOptions& o) {
  return json{
      {"windows", "P+1 contiguous tokens inside one document; all P next-token predictions "
                  "scored; ceil(token_budget/P) windows drawn uniformly over valid starts by a "
                  "sampler seeded from (seed, P)"},
      {"entropy_scope", "mean over layers, heads and query positions t >= floor((1 - "
                        "entropy_tail) * P)"},
      {"entropy_tail", o.entropy_tail}};
}

json records_warnings(const std::vector<lm::EvalRecord>& records) {
  json w = json::array();
  for (const auto& r : records) {
    if (r.skipped()) w.push_back({{"prompt_length", r.prompt_length}, {"warning", r.warning}});
  }
  return w;
}

void write_loss_csv(const fs::path& path, const std::vector<lm::LossRecord>& log) {
  CsvWriter w(path, loss_schema());
  for (const auto& r : log) {
    w.row({std::to_string(r.iter), format_number(r.loss), format_number(r.lr)});
  }
  w.close();
}

corpus::Corpus select_split(const LoadedData& data, EvalSplit split) {
  switch (split) {
    case EvalSplit::kVal: return data.val;
    case EvalSplit::kTrain: return data.train;
    case EvalSplit::kAll:
      return corpus::make_corpus(data.documents, data.vocab, corpus::Split::kVal, "all documents");
  }
  return data.val;
}

}  // namespace

// ---- data ----

json to_json(const DataConfig& cfg) {
  return json{{"corpus", cfg.corpus},
              {"separator", cfg.separator},
              {"val_fraction", cfg.val_fraction}};
}

LoadedData load_data(const DataConfig& cfg, std::shared_ptr<const corpus::Vocab> vocab) {
  if (cfg.corpus.empty()) throw UsageError("a corpus path is required (--corpus)");
  if (!fs::exists(cfg.corpus)) throw UsageError("corpus not found: " + cfg.corpus);
  if (!(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0)) {
    throw UsageError("val_fraction must be in (0, 1)");
  }
  LoadedData d;
  corpus::IngestResult ing;
  try {
    ing = corpus::ingest(cfg.corpus, cfg.separator);
  } catch (const std::runtime_error& e) {
    throw UsageError(e.what());
  }
  if (ing.documents.empty()) throw UsageError("corpus has no documents: " + cfg.corpus);
  d.documents = std::move(ing.documents);
  d.replaced_sequences = ing.replaced_sequences;
  d.vocab = vocab ? vocab : std::make_shared<const corpus::Vocab>(corpus::build_vocab(d.documents));
  auto split = as_usage("corpus split", [&] {
    return corpus::split_train_val(d.documents, d.vocab, cfg.val_fraction, cfg.corpus);
  });
  d.train = std::move(split.train);
  d.val = std::move(split.val);
  return d;
}

// ---- analyze ----

Encoding analysis_encoding(const std::string& name, const AnalyzeConfig& cfg) {
  if (name == "rope") return RopeEncoding{cfg.rope_base};
  if (name == "alibi") return AlibiEncoding{cfg.alibi_slope};
  if (name == "ape") {
    return make_ape(cfg.ape_lambda, cfg.ape_delta, cfg.ape_beta, cfg.ape_gamma, cfg.d,
                    cfg.rope_base);
  }
  if (name == "identity") return identity_encoding();
  throw UsageError("unknown encoding: " + name + " (expected rope, alibi, ape or identity)");
}

std::vector<lab::PropertyReport> cmd_analyze(const AnalyzeConfig& cfg) {
  ensure_out(cfg.out);
  if (cfg.d < 2 || cfg.d % 2 != 0) throw UsageError("d must be a positive even number");
  if (cfg.encodings.empty()) throw UsageError("no encodings selected");
  if (cfg.samples < 2) throw UsageError("samples must be at least 2");
  std::vector<Encoding> encodings;
  for (const auto& name : cfg.encodings) {
    encodings.push_back(analysis_encoding(name, cfg));
    as_usage("encoding " + name, [&] {
      validate(encodings.back());
      return 0;
    });
  }
  lab::ReportOptions ro;
  ro.grid = cfg.grid;
  ro.ldcp_threshold = cfg.ldcp_threshold;

  CsvWriter norm(fs::path(cfg.out) / "normalization.csv", normalization_schema());
  CsvWriter ent(fs::path(cfg.out) / "entropy.csv", entropy_schema());
  CsvWriter mom(fs::path(cfg.out) / "moments.csv", moments_schema());
  CsvWriter rep(fs::path(cfg.out) / "report.csv", report_schema());
  std::vector<lab::PropertyReport> reports;
  for (std::size_t e = 0; e < encodings.size(); ++e) {
    const std::string& name = cfg.encodings[e];
    auto r = as_usage("analysis grid", [&] {
      return lab::build_property_report(encodings[e], cfg.d, cfg.seed, ro);
    });
    for (const auto& p : r.normalization.entries) {
      norm.row({name, std::to_string(p.length), format_number(p.log_z)});
    }
    for (const auto& p : r.entropy_curve.entries) {
      ent.row({name, std::to_string(p.length), format_number(p.entropy)});
    }
    for (std::int64_t n : cfg.moment_positions) {
      const auto m = lab::mc_score_moments(encodings[e], n, cfg.d, cfg.samples,
                                           lm::derive_seed(cfg.seed, static_cast<std::uint64_t>(n)));
      mom.row({name, std::to_string(n), format_number(m.mean), format_number(m.variance),
               std::to_string(m.samples)});
    }
    rep.row({name, lab::to_string(r.convergence), bool_str(r.entropy_bounded()), bool_str(r.gps),
             std::to_string(r.ldcp.range)});
    reports.push_back(std::move(r));
  }
  norm.close();
  ent.close();
  mom.close();
  rep.close();

  json notes = json::object();
  for (const auto& r : reports) notes[r.encoding] = r.notes;
  write_metadata(cfg.out, "analyze",
                 json{{"encodings", cfg.encodings},
                      {"d", cfg.d},
                      {"grid", cfg.grid},
                      {"seed", cfg.seed},
                      {"samples", cfg.samples},
                      {"moment_positions", cfg.moment_positions},
                      {"rope_base", cfg.rope_base},
                      {"alibi_slope", cfg.alibi_slope},
                      {"ape_lambda", cfg.ape_lambda},
                      {"ape_delta", cfg.ape_delta},
                      {"ape_beta", cfg.ape_beta},
                      {"ape_gamma", cfg.ape_gamma},
                      {"ldcp_threshold", cfg.ldcp_threshold}},
                 json{{"notes", notes}});
  return reports;
}

// ---- train ----

TrainOutcome cmd_train(const TrainCommand& cmd) {
  ensure_out(cmd.out);
  const LoadedData data = load_data(cmd.data);
  lm::ModelConfig mc = cmd.model;
  mc.vocab_size = static_cast<int>(data.vocab->size());
  as_usage("model config", [&] {
    mc.validate();
    cmd.train.validate();
    return 0;
  });

  const fs::path ckpt_path = fs::path(cmd.out) / "model.ckpt";
  lm::Transformer<float> model(mc);
  lm::TrainState resume;
  if (cmd.resume && fs::exists(ckpt_path)) {
    const auto ck = as_usage("resume", [&] { return lm::load_checkpoint(ckpt_path.string()); });
    if (!(ck.model == mc)) throw UsageError("resume: checkpoint model config differs from the request");
    model = lm::model_from_checkpoint(ck);
    resume = ck.state;
  }

  const auto on_log = [&](const lm::LossRecord& r) {
    if (cmd.verbose) {
      std::cerr << "iter " << r.iter << " loss " << r.loss << " lr " << r.lr << "\n";
    }
  };
  const lm::TrainResult result =
      as_usage("training", [&] { return lm::train(model, data.train, cmd.train, resume, on_log); });

  lm::Checkpoint ck = lm::make_checkpoint(model, *data.vocab, cmd.train, result.state);
  ck.extra = json{{"data", to_json(cmd.data)}};
  lm::save_checkpoint(ckpt_path.string(), ck);
  write_loss_csv(fs::path(cmd.out) / "loss.csv", result.log);
  write_metadata(cmd.out, "train",
                 json{{"data", to_json(cmd.data)},
                      {"model", lm::to_json(mc)},
                      {"train", lm::to_json(cmd.train)},
                      {"resume", cmd.resume}},
                 json{{"train_tokens", data.train.total_tokens()},
                      {"replaced_utf8_sequences", data.replaced_sequences},
                      {"num_parameters", model.num_parameters()}});
  return TrainOutcome{ckpt_path, result.log};
}

// ---- eval ----

EvalSplit parse_eval_split(const std::string& name) {
  if (name == "val") return EvalSplit::kVal;
  if (name == "train") return EvalSplit::kTrain;
  if (name == "all") return EvalSplit::kAll;
  throw UsageError("unknown split: " + name + " (expected val, train or all)");
}

std::string to_string(EvalSplit split) {
  switch (split) {
    case EvalSplit::kVal: return "val";
    case EvalSplit::kTrain: return "train";
    case EvalSplit::kAll: return "all";
  }
  return "val";
}

void write_eval_csv(const fs::path& path, const std::vector<lm::EvalRecord>& records) {
  CsvWriter w(path, eval_schema());
  for (const auto& r : records) {
    if (r.skipped()) continue;
    w.row({r.encoding, std::to_string(r.train_context), std::to_string(r.prompt_length),
           format_number(r.perplexity), format_number(r.mean_attention_entropy),
           std::to_string(r.n_eval_tokens)});
  }
  w.close();
}

std::vector<lm::EvalRecord> cmd_eval(const EvalCommand& cmd) {
  ensure_out(cmd.out);
  if (cmd.checkpoint.empty()) throw UsageError("a checkpoint is required (--checkpoint)");
  const auto ck = as_usage("checkpoint", [&] { return lm::load_checkpoint(cmd.checkpoint); });
  const auto model = as_usage("checkpoint", [&] { return lm::model_from_checkpoint(ck); });
  const auto vocab = std::make_shared<const corpus::Vocab>(lm::vocab_from_checkpoint(ck));
  const LoadedData data = load_data(cmd.data, vocab);
  const corpus::Corpus eval_corpus = select_split(data, cmd.split);

  lm::EvalOptions opt = cmd.eval;
  opt.prompt_lengths = resolve_lengths(opt, ck.model.train_context, eval_corpus);
  const auto records =
      as_usage("evaluation", [&] { return lm::evaluate_perplexity(model, eval_corpus, opt); });
  write_eval_csv(fs::path(cmd.out) / "eval.csv", records);
  write_metadata(cmd.out, "eval",
                 json{{"checkpoint", cmd.checkpoint},
                      {"data", to_json(cmd.data)},
                      {"split", to_string(cmd.split)},
                      {"eval", eval_options_json(opt)}},
                 json{{"model", lm::to_json(ck.model)},
                      {"protocol", eval_protocol_json(opt)},
                      {"skipped", records_warnings(records)}});
  for (const auto& r : records) {
    if (r.skipped()) std::cerr << "warning: " << r.warning << "\n";
  }
  return records;
}

// ---- bench ----

std::vector<lm::BenchResult> cmd_bench(const BenchCommand& cmd) {
  ensure_out(cmd.out);
  std::vector<lm::Transformer<float>> models;
  if (!cmd.checkpoint.empty()) {
    const auto ck = as_usage("checkpoint", [&] { return lm::load_checkpoint(cmd.checkpoint); });
    models.push_back(as_usage("checkpoint", [&] { return lm::model_from_checkpoint(ck); }));
  } else {
    if (cmd.encodings.empty()) throw UsageError("no encodings selected");
    for (const auto& name : cmd.encodings) {
      lm::ModelConfig mc = cmd.model;
      as_usage("bench config", [&] {
        mc.encoding.kind = lm::parse_position_kind(name);
        mc.validate();
        return 0;
      });
      models.emplace_back(mc);
    }
  }
  std::vector<lm::BenchResult> results;
  CsvWriter w(fs::path(cmd.out) / "bench.csv", bench_schema());
  json peaks = json::array();
  for (const auto& m : models) {
    for (auto phase : cmd.phases) {
      const auto r = as_usage("bench", [&] { return lm::bench(m, phase, cmd.bench); });
      w.row({r.encoding, lm::to_string(r.phase), format_number(r.tokens_per_sec),
             std::to_string(r.param_bytes), std::to_string(r.peak_activation_bytes_estimate)});
      peaks.push_back({{"encoding", r.encoding},
                       {"phase", lm::to_string(r.phase)},
                       {"process_peak_bytes",
                        r.process_peak_bytes ? json(*r.process_peak_bytes) : json(nullptr)}});
      results.push_back(r);
    }
  }
  w.close();
  json phases = json::array();
  for (auto p : cmd.phases) phases.push_back(lm::to_string(p));
  write_metadata(cmd.out, "bench",
                 json{{"checkpoint", cmd.checkpoint},
                      {"model", lm::to_json(cmd.model)},
                      {"encodings", cmd.encodings},
                      {"phases", phases},
                      {"batch", cmd.bench.batch},
                      {"length", cmd.bench.length},
                      {"warmup_steps", cmd.bench.warmup_steps},
                      {"steps", cmd.bench.steps},
                      {"seed", cmd.bench.seed}},
                 json{{"process_peak", peaks},
                      {"note", "tokens_per_sec is wall-clock and varies between runs"}});
  return results;
}

// ---- finetune ----

FinetuneOutcome cmd_finetune(const FinetuneCommand& cmd) {
  ensure_out(cmd.out);
  if (cmd.checkpoint.empty()) throw UsageError("a checkpoint is required (--checkpoint)");
  if (!(cmd.corpus_fraction > 0.0 && cmd.corpus_fraction <= 1.0)) {
    throw UsageError("corpus_fraction must be in (0, 1]");
  }
  if (cmd.iterations < 0) throw UsageError("iterations must be non-negative");
  const auto ck = as_usage("checkpoint", [&] { return lm::load_checkpoint(cmd.checkpoint); });
  const auto source = as_usage("checkpoint", [&] { return lm::model_from_checkpoint(ck); });
  const auto vocab = std::make_shared<const corpus::Vocab>(lm::vocab_from_checkpoint(ck));
  const LoadedData data = load_data(cmd.data, vocab);
  const corpus::Corpus tune = data.train.prefix_fraction(cmd.corpus_fraction);

  lm::EvalOptions opt = cmd.eval;
  opt.prompt_lengths = resolve_lengths(opt, ck.model.train_context, data.val);

  lm::TrainConfig tc = ck.train.value_or(lm::TrainConfig{});
  const double peak = tc.learning_rate;
  tc.learning_rate = cmd.learning_rate.value_or(0.1 * peak);
  tc.iterations = cmd.iterations;
  tc.warmup_iters = std::max(1, std::min(cmd.warmup_iters, std::max(1, cmd.iterations)));
  tc.eval_interval = std::max(1, std::min(tc.eval_interval, std::max(1, cmd.iterations)));

  FinetuneOutcome out;
  out.before = as_usage("evaluation", [&] { return lm::evaluate_perplexity(source, data.val, opt); });
  auto model = as_usage("encoding swap", [&] { return lm::swap_encoding(source, cmd.encoding); });
  const auto result = as_usage("finetune", [&] { return lm::train(model, tune, tc); });
  out.after = as_usage("evaluation", [&] { return lm::evaluate_perplexity(model, data.val, opt); });

  out.checkpoint = fs::path(cmd.out) / "model.ckpt";
  lm::Checkpoint next = lm::make_checkpoint(model, *vocab, tc, result.state);
  next.extra = json{{"data", to_json(cmd.data)},
                    {"finetuned_from", cmd.checkpoint},
                    {"source_encoding", lm::to_json(ck.model.encoding)}};
  lm::save_checkpoint(out.checkpoint.string(), next);
  write_eval_csv(fs::path(cmd.out) / "eval_before.csv", out.before);
  write_eval_csv(fs::path(cmd.out) / "eval_after.csv", out.after);
  write_loss_csv(fs::path(cmd.out) / "loss.csv", result.log);
  write_metadata(cmd.out, "finetune",
                 json{{"checkpoint", cmd.checkpoint},
                      {"data", to_json(cmd.data)},
                      {"encoding", lm::to_json(cmd.encoding)},
                      {"corpus_fraction", cmd.corpus_fraction},
                      {"iterations", cmd.iterations},
                      {"learning_rate", tc.learning_rate},
                      {"warmup_iters", tc.warmup_iters},
                      {"eval", eval_options_json(opt)}},
                 json{{"train", lm::to_json(tc)},
                      {"source_peak_learning_rate", peak},
                      {"finetune_tokens", tune.total_tokens()},
                      {"corpus_fraction_rule", "token prefix of the training split"},
                      {"protocol", eval_protocol_json(opt)},
                      {"skipped", records_warnings(out.after)}});
  return out;
}

// ---- corpus ----

void cmd_corpus(const CorpusCommand& cmd) {
  ensure_out(cmd.out);
  const LoadedData data = load_data(cmd.data);
  const auto assignment =
      as_usage("buckets", [&] { return corpus::bucket_by_length(data.documents, cmd.buckets); });
  {
    std::ofstream f(fs::path(cmd.out) / "buckets.csv", std::ios::binary | std::ios::trunc);
    f << "#schema=gpelab.buckets/v1\n" << corpus::bucket_manifest_csv(assignment);
    if (!f) throw std::runtime_error("cannot write buckets.csv");
  }
  CsvWriter w(fs::path(cmd.out) / "readability.csv", readability_schema());
  for (std::size_t i = 0; i < data.documents.size(); ++i) {
    if (corpus::word_count(data.documents[i]) == 0) continue;
    const auto s = corpus::readability(data.documents[i]);
    w.row({std::to_string(i), std::to_string(s.words), std::to_string(s.sentences),
           std::to_string(s.syllables), format_number(s.fre), format_number(s.gunning_fog),
           format_number(s.ari)});
  }
  w.close();
  json buckets = json::array();
  for (const auto& b : cmd.buckets) {
    buckets.push_back({{"name", b.name}, {"min_words", b.min_words}, {"max_words", b.max_words}});
  }
  write_metadata(cmd.out, "corpus", json{{"data", to_json(cmd.data)}, {"buckets", buckets}},
                 json{{"documents", data.documents.size()},
                      {"vocab_size", data.vocab->size()},
                      {"train_tokens", data.train.total_tokens()},
                      {"val_tokens", data.val.total_tokens()},
                      {"dropped_by_buckets", assignment.dropped},
                      {"replaced_utf8_sequences", data.replaced_sequences}});
}

}  // namespace gpelab::cli
