#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace gpelab::lm {

enum class PositionKind { kNone, kRope, kAlibi, kApe };

std::string to_string(PositionKind kind);
// Accepts "none", "rope", "alibi", "ape". Throws std::invalid_argument.
PositionKind parse_position_kind(std::string_view name);

struct EncodingSpec {
  PositionKind kind = PositionKind::kRope;
  double rope_base = 10000.0;

  // APE only. Initial values are mapped through inverse softplus; alpha starts
  // at the RoPE schedule base^(2m/d_head). An unset delta takes each head's
  // ALiBi slope.
  bool learnable = true;
  double ape_lambda = 0.1;
  std::optional<double> ape_delta;
  double ape_beta = 0.01;
  double ape_gamma = 0.01;

  bool rotates() const { return kind == PositionKind::kRope || kind == PositionKind::kApe; }
  bool operator==(const EncodingSpec&) const = default;
};

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int vocab_size = 0;
  int train_context = 64;
  EncodingSpec encoding;
  double dropout = 0.0;
  bool tie_embeddings = true;
  std::uint64_t seed = 1337;

  int d_head() const { return d_model / n_heads; }
  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class LrSchedule { kCosine, kConstant };

struct TrainConfig {
  int batch_size = 12;
  double learning_rate = 6e-4;
  double min_lr_ratio = 0.1;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  int iterations = 2000;
  int warmup_iters = 100;
  LrSchedule lr_schedule = LrSchedule::kCosine;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  int eval_interval = 100;
  std::uint64_t seed = 1337;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Learning rate for a 0-based iteration: linear warmup lr*(it+1)/warmup, then
// cosine decay to min_lr_ratio*lr at the final iteration.
double learning_rate_at(const TrainConfig& cfg, int iteration);

// Independent seed for sub-stream `stream` of `seed` (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

nlohmann::json to_json(const EncodingSpec& spec);
nlohmann::json to_json(const ModelConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
// Unknown keys are rejected with std::invalid_argument.
EncodingSpec encoding_spec_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace gpelab::lm
