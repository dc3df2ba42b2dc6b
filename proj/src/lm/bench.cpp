#include "gpelab/lm/bench.hpp"

#include <chrono>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "gpelab/lm/train.hpp"

namespace gpelab::lm {

std::string to_string(BenchPhase phase) {
  return phase == BenchPhase::kTrain ? "train" : "inference";
}

BenchPhase parse_bench_phase(std::string_view name) {
  if (name == "train") return BenchPhase::kTrain;
  if (name == "inference") return BenchPhase::kInference;
  throw std::invalid_argument("unknown bench phase: " + std::string(name));
}

std::int64_t activation_bytes_estimate(const ModelConfig& cfg, int batch, int length) {
  const std::int64_t n = static_cast<std::int64_t>(batch) * length;
  const std::int64_t c = cfg.d_model;
  const std::int64_t scores = static_cast<std::int64_t>(batch) * cfg.n_heads * length * length;
  const bool ape = cfg.encoding.kind == PositionKind::kApe;
  // ln1, q, k, v, att, res_mid, ln2 (7 x C) + fc and gelu (8 x C) + 4 row stats.
  std::int64_t per_layer = n * (15 * c + 4) + scores * (ape ? 2 : 1);
  if (cfg.dropout > 0.0) per_layer += 2 * n * c;
  std::int64_t total = cfg.n_layers * per_layer;
  total += (cfg.n_layers + 1) * n * c;  // residual stream
  total += n * (c + 2);                 // final layer norm
  total += n * cfg.vocab_size;          // logits
  return total * static_cast<std::int64_t>(sizeof(float));
}

std::optional<std::int64_t> process_peak_bytes() {
  std::ifstream f("/proc/self/status");
  if (!f) return std::nullopt;
  std::string line;
  while (std::getline(f, line)) {
    if (line.rfind("VmHWM:", 0) == 0) {
      std::istringstream is(line.substr(6));
      std::int64_t kb = 0;
      is >> kb;
      if (is) return kb * 1024;
    }
  }
  return std::nullopt;
}

BenchResult bench(const Transformer<float>& model, BenchPhase phase, const BenchOptions& options) {
  const ModelConfig& cfg = model.config();
  const int length = options.length > 0 ? options.length : cfg.train_context;
  if (options.batch <= 0 || options.steps <= 0 || options.warmup_steps < 0) {
    throw std::invalid_argument("bench needs positive batch and steps");
  }
  const auto n = static_cast<std::size_t>(options.batch) * length;
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<TokenId> pick(0, cfg.vocab_size - 1);
  std::vector<TokenId> tokens(n), targets(n);
  for (auto& t : tokens) t = pick(rng);
  for (auto& t : targets) t = pick(rng);

  Transformer<float> work = model;
  TrainConfig tc;
  AdamW<float> opt(tc, work.num_parameters());
  corpus::Batch batch{options.batch, length, tokens, targets};

  const auto run = [&] {
    if (phase == BenchPhase::kTrain) {
      train_step(work, opt, batch, 1e-5, tc.grad_clip);
    } else {
      work.forward(tokens, {}, options.batch, length);
    }
  };
  for (int i = 0; i < options.warmup_steps; ++i) run();
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < options.steps; ++i) run();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  BenchResult r;
  r.encoding = to_string(cfg.encoding.kind);
  r.phase = phase;
  r.tokens_per_sec = static_cast<double>(n) * options.steps / secs;
  r.param_bytes = static_cast<std::int64_t>(model.num_parameters() * sizeof(float));
  r.peak_activation_bytes_estimate = activation_bytes_estimate(cfg, options.batch, length);
  r.process_peak_bytes = process_peak_bytes();
  return r;
}

}  // namespace gpelab::lm
