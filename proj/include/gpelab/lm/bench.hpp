#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "gpelab/lm/model.hpp"

namespace gpelab::lm {

enum class BenchPhase { kTrain, kInference };

std::string to_string(BenchPhase phase);
BenchPhase parse_bench_phase(std::string_view name);

struct BenchOptions {
  int batch = 12;
  int length = 0;  // 0 means train_context
  int warmup_steps = 2;
  int steps = 10;
  std::uint64_t seed = 1234;
};

struct BenchResult {
  std::string encoding;
  BenchPhase phase = BenchPhase::kTrain;
  double tokens_per_sec = 0.0;
  std::int64_t param_bytes = 0;
  std::int64_t peak_activation_bytes_estimate = 0;
  std::optional<std::int64_t> process_peak_bytes;  // VmHWM where available
};

// Bytes of activations a forward pass keeps for backward (float storage).
std::int64_t activation_bytes_estimate(const ModelConfig& cfg, int batch, int length);

// Peak resident set size of this process, if the platform reports it.
std::optional<std::int64_t> process_peak_bytes();

// Times `steps` warmed-up steps on random tokens. Training steps run forward,
// backward and an AdamW update on a private copy of the model; inference steps
// run a batched forward without targets.
BenchResult bench(const Transformer<float>& model, BenchPhase phase, const BenchOptions& options);

}  // namespace gpelab::lm
