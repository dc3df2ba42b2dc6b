#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "gpelab/cli.hpp"

namespace gpelab::cli {
namespace {

using nlohmann::json;

[[noreturn]] void spec_error(const std::string& pointer, const std::string& what) {
  throw UsageError("sweep spec " + (pointer.empty() ? std::string("/") : pointer) + ": " + what);
}

void check_keys(const json& j, const std::set<std::string>& known, const std::string& pointer) {
  if (!j.is_object()) spec_error(pointer, "expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) spec_error(pointer + "/" + key, "unknown key");
  }
}

template <class T>
T get(const json& j, const std::string& key, const std::string& pointer) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    spec_error(pointer + "/" + key, std::string("bad value (") + e.what() + ")");
  }
}

template <class T>
std::vector<T> get_list(const json& j, const std::string& key, const std::string& pointer) {
  auto v = get<std::vector<T>>(j, key, pointer);
  if (v.empty()) spec_error(pointer + "/" + key, "must not be empty");
  return v;
}

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

struct ResolvedCell {
  SweepCell cell;
  lm::ModelConfig model;
  lm::TrainConfig train;
};

ResolvedCell resolve(const SweepSpec& spec, const std::string& enc, int ctx, std::uint64_t seed) {
  ResolvedCell r;
  r.model = spec.model;
  r.model.encoding.kind = lm::parse_position_kind(enc);
  r.model.train_context = ctx;
  r.model.seed = seed;
  r.train = spec.train;
  r.train.seed = seed;
  r.cell.encoding = enc;
  r.cell.context = ctx;
  r.cell.seed = seed;
  r.cell.name = enc + "-ctx" + std::to_string(ctx) + "-seed" + std::to_string(seed);
  const json identity{{"version", kVersion},
                      {"data", to_json(spec.data)},
                      {"model", lm::to_json(r.model)},
                      {"train", lm::to_json(r.train)},
                      {"eval",
                       {{"prompt_lengths", spec.eval.prompt_lengths},
                        {"seed", spec.eval.seed},
                        {"token_budget", spec.eval.token_budget},
                        {"entropy_tail", spec.eval.entropy_tail}}}};
  r.cell.hash = fnv1a_hex(identity.dump());
  return r;
}

bool cell_complete(const fs::path& dir, const std::string& hash) {
  if (!fs::exists(dir / "metadata.json") || !fs::exists(dir / "eval" / "eval.csv") ||
      !fs::exists(dir / "train" / "model.ckpt")) {
    return false;
  }
  try {
    const json meta = read_metadata(dir);
    return meta.value("cell_hash", std::string()) == hash;
  } catch (const UsageError&) {
    return false;
  }
}

}  // namespace

SweepSpec parse_sweep_spec(const json& j) {
  check_keys(j, {"corpus", "separator", "val_fraction", "encodings", "contexts", "seeds", "model",
                 "train", "eval"},
             "");
  SweepSpec s;
  if (!j.contains("corpus")) spec_error("/corpus", "required key missing");
  s.data.corpus = get<std::string>(j, "corpus", "");
  if (j.contains("separator")) s.data.separator = get<std::string>(j, "separator", "");
  if (j.contains("val_fraction")) s.data.val_fraction = get<double>(j, "val_fraction", "");
  if (j.contains("encodings")) s.encodings = get_list<std::string>(j, "encodings", "");
  for (std::size_t i = 0; i < s.encodings.size(); ++i) {
    try {
      lm::parse_position_kind(s.encodings[i]);
    } catch (const std::invalid_argument& e) {
      spec_error("/encodings/" + std::to_string(i), e.what());
    }
  }
  if (j.contains("contexts")) s.contexts = get_list<int>(j, "contexts", "");
  for (std::size_t i = 0; i < s.contexts.size(); ++i) {
    if (s.contexts[i] < 2) spec_error("/contexts/" + std::to_string(i), "must be at least 2");
  }
  if (j.contains("seeds")) s.seeds = get_list<std::uint64_t>(j, "seeds", "");

  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, {"n_layers", "n_heads", "d_model", "encoding", "dropout", "tie_embeddings"},
               "/model");
    if (m.contains("encoding")) {
      check_keys(m.at("encoding"),
                 {"rope_base", "learnable", "ape_lambda", "ape_delta", "ape_beta", "ape_gamma"},
                 "/model/encoding");
    }
    try {
      s.model = lm::model_config_from_json(m);
    } catch (const std::invalid_argument& e) {
      spec_error("/model", e.what());
    }
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, {"batch_size", "learning_rate", "min_lr_ratio", "weight_decay", "grad_clip",
                   "iterations", "warmup_iters", "lr_schedule", "beta1", "beta2", "adam_eps",
                   "eval_interval"},
               "/train");
    try {
      s.train = lm::train_config_from_json(t);
      s.train.validate();
    } catch (const std::invalid_argument& e) {
      spec_error("/train", e.what());
    }
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, {"prompt_lengths", "seed", "token_budget", "entropy_tail"}, "/eval");
    if (e.contains("prompt_lengths")) {
      s.eval.prompt_lengths = get<std::vector<int>>(e, "prompt_lengths", "/eval");
    }
    if (e.contains("seed")) s.eval.seed = get<std::uint64_t>(e, "seed", "/eval");
    if (e.contains("token_budget")) {
      s.eval.token_budget = get<std::int64_t>(e, "token_budget", "/eval");
    }
    if (e.contains("entropy_tail")) s.eval.entropy_tail = get<double>(e, "entropy_tail", "/eval");
  }
  return s;
}

SweepSpec load_sweep_spec(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open sweep spec " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw UsageError("sweep spec " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_sweep_spec(j);
}

SweepOutcome cmd_sweep(const SweepSpec& spec, const std::string& out, bool verbose) {
  if (out.empty()) throw UsageError("an output directory is required (--out)");
  fs::create_directories(out);
  SweepOutcome outcome;
  outcome.combined_csv = fs::path(out) / "sweep.csv";
  CsvWriter combined(outcome.combined_csv, sweep_schema());
  json cells = json::array();

  for (std::uint64_t seed : spec.seeds) {
    for (int ctx : spec.contexts) {
      for (const auto& enc : spec.encodings) {
        ResolvedCell r = resolve(spec, enc, ctx, seed);
        const fs::path dir = fs::path(out) / r.cell.name;
        r.cell.reused = cell_complete(dir, r.cell.hash);
        if (verbose) {
          std::cerr << (r.cell.reused ? "reuse " : "run ") << r.cell.name << "\n";
        }
        if (!r.cell.reused) {
          TrainCommand tc;
          tc.data = spec.data;
          tc.model = r.model;
          tc.train = r.train;
          tc.out = (dir / "train").string();
          tc.verbose = verbose;
          cmd_train(tc);
          EvalCommand ec;
          ec.checkpoint = (dir / "train" / "model.ckpt").string();
          ec.data = spec.data;
          ec.eval = spec.eval;
          ec.out = (dir / "eval").string();
          cmd_eval(ec);
          write_metadata(dir, "sweep-cell",
                         json{{"encoding", enc},
                              {"train_context", ctx},
                              {"seed", seed},
                              {"model", lm::to_json(r.model)},
                              {"train", lm::to_json(r.train)}},
                         json{{"cell_hash", r.cell.hash}});
        }
        for (const auto& row : read_csv(dir / "eval" / "eval.csv", eval_schema())) {
          std::vector<std::string> cellrow{std::to_string(seed)};
          cellrow.insert(cellrow.end(), row.begin(), row.end());
          combined.row(cellrow);
        }
        cells.push_back({{"name", r.cell.name}, {"hash", r.cell.hash}});
        outcome.cells.push_back(r.cell);
      }
    }
  }
  combined.close();
  json seeds = json::array();
  for (auto s : spec.seeds) seeds.push_back(s);
  write_metadata(out, "sweep",
                 json{{"data", to_json(spec.data)},
                      {"encodings", spec.encodings},
                      {"contexts", spec.contexts},
                      {"seeds", seeds},
                      {"model", lm::to_json(spec.model)},
                      {"train", lm::to_json(spec.train)},
                      {"eval",
                       {{"prompt_lengths", spec.eval.prompt_lengths},
                        {"seed", spec.eval.seed},
                        {"token_budget", spec.eval.token_budget},
                        {"entropy_tail", spec.eval.entropy_tail}}}},
                 json{{"cells", cells}, {"execution", "cells run sequentially"}});
  return outcome;
}

}  // namespace gpelab::cli
