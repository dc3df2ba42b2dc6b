#include "gpelab/lm/config.hpp"

#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>

namespace gpelab::lm {
namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) {
      throw std::invalid_argument(std::string("unknown ") + what + " key: " + key);
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("bad value for ") + key + ": " + e.what());
  }
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

std::string to_string(PositionKind kind) {
  switch (kind) {
    case PositionKind::kNone: return "none";
    case PositionKind::kRope: return "rope";
    case PositionKind::kAlibi: return "alibi";
    case PositionKind::kApe: return "ape";
  }
  return "unknown";
}

PositionKind parse_position_kind(std::string_view name) {
  if (name == "none") return PositionKind::kNone;
  if (name == "rope") return PositionKind::kRope;
  if (name == "alibi") return PositionKind::kAlibi;
  if (name == "ape") return PositionKind::kApe;
  throw std::invalid_argument("unknown encoding: " + std::string(name));
}

void ModelConfig::validate() const {
  require(n_layers > 0, "n_layers must be positive");
  require(n_heads > 0, "n_heads must be positive");
  require(d_model > 0 && d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(vocab_size > 0, "vocab_size must be positive");
  require(train_context >= 2, "train_context must be at least 2");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  if (encoding.rotates()) {
    require(d_head() % 2 == 0, "rotary encodings need an even head dimension");
  }
  require(encoding.rope_base > 0.0, "rope_base must be positive");
  if (encoding.kind == PositionKind::kApe) {
    require(encoding.ape_lambda >= 0.0 && encoding.ape_beta >= 0.0 && encoding.ape_gamma >= 0.0,
            "APE lambda, beta, gamma must be non-negative");
    require(!encoding.ape_delta || *encoding.ape_delta > 0.0, "APE delta must be positive");
  }
}

void TrainConfig::validate() const {
  require(batch_size > 0, "batch_size must be positive");
  require(learning_rate >= 0.0, "learning_rate must be non-negative");
  require(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0, "min_lr_ratio must be in [0, 1]");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(grad_clip > 0.0, "grad_clip must be positive");
  require(iterations >= 0, "iterations must be non-negative");
  require(warmup_iters > 0, "warmup_iters must be positive");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must be in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
  require(eval_interval > 0, "eval_interval must be positive");
}

double learning_rate_at(const TrainConfig& cfg, int iteration) {
  if (iteration < cfg.warmup_iters) {
    return cfg.learning_rate * static_cast<double>(iteration + 1) / cfg.warmup_iters;
  }
  if (cfg.lr_schedule == LrSchedule::kConstant) return cfg.learning_rate;
  const double min_lr = cfg.min_lr_ratio * cfg.learning_rate;
  const int span = cfg.iterations - 1 - cfg.warmup_iters;
  if (span <= 0) return cfg.learning_rate;
  const double ratio = std::min(1.0, static_cast<double>(iteration - cfg.warmup_iters) / span);
  const double coeff = 0.5 * (1.0 + std::cos(std::numbers::pi * ratio));
  return min_lr + coeff * (cfg.learning_rate - min_lr);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

json to_json(const EncodingSpec& s) {
  json j{{"kind", to_string(s.kind)}, {"rope_base", s.rope_base}};
  if (s.kind == PositionKind::kApe) {
    j["learnable"] = s.learnable;
    j["ape_lambda"] = s.ape_lambda;
    j["ape_delta"] = s.ape_delta ? json(*s.ape_delta) : json(nullptr);
    j["ape_beta"] = s.ape_beta;
    j["ape_gamma"] = s.ape_gamma;
  }
  return j;
}

json to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},         {"n_heads", c.n_heads},
              {"d_model", c.d_model},           {"vocab_size", c.vocab_size},
              {"train_context", c.train_context}, {"encoding", to_json(c.encoding)},
              {"dropout", c.dropout},           {"tie_embeddings", c.tie_embeddings},
              {"seed", c.seed}};
}

json to_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"min_lr_ratio", c.min_lr_ratio},
              {"weight_decay", c.weight_decay},
              {"grad_clip", c.grad_clip},
              {"iterations", c.iterations},
              {"warmup_iters", c.warmup_iters},
              {"lr_schedule", c.lr_schedule == LrSchedule::kCosine ? "cosine" : "constant"},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"eval_interval", c.eval_interval},
              {"seed", c.seed}};
}

EncodingSpec encoding_spec_from_json(const json& j) {
  reject_unknown(j, {"kind", "rope_base", "learnable", "ape_lambda", "ape_delta", "ape_beta",
                     "ape_gamma"},
                 "encoding");
  EncodingSpec s;
  std::string kind = to_string(s.kind);
  read(j, "kind", kind);
  s.kind = parse_position_kind(kind);
  read(j, "rope_base", s.rope_base);
  read(j, "learnable", s.learnable);
  read(j, "ape_lambda", s.ape_lambda);
  read(j, "ape_beta", s.ape_beta);
  read(j, "ape_gamma", s.ape_gamma);
  if (j.contains("ape_delta") && !j.at("ape_delta").is_null()) {
    double d = 0.0;
    read(j, "ape_delta", d);
    s.ape_delta = d;
  }
  return s;
}

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j, {"n_layers", "n_heads", "d_model", "vocab_size", "train_context", "encoding",
                     "dropout", "tie_embeddings", "seed"},
                 "model");
  ModelConfig c;
  read(j, "n_layers", c.n_layers);
  read(j, "n_heads", c.n_heads);
  read(j, "d_model", c.d_model);
  read(j, "vocab_size", c.vocab_size);
  read(j, "train_context", c.train_context);
  if (j.contains("encoding")) c.encoding = encoding_spec_from_json(j.at("encoding"));
  read(j, "dropout", c.dropout);
  read(j, "tie_embeddings", c.tie_embeddings);
  read(j, "seed", c.seed);
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  reject_unknown(j, {"batch_size", "learning_rate", "min_lr_ratio", "weight_decay", "grad_clip",
                     "iterations", "warmup_iters", "lr_schedule", "beta1", "beta2", "adam_eps",
                     "eval_interval", "seed"},
                 "train");
  TrainConfig c;
  read(j, "batch_size", c.batch_size);
  read(j, "learning_rate", c.learning_rate);
  read(j, "min_lr_ratio", c.min_lr_ratio);
  read(j, "weight_decay", c.weight_decay);
  read(j, "grad_clip", c.grad_clip);
  read(j, "iterations", c.iterations);
  read(j, "warmup_iters", c.warmup_iters);
  std::string schedule = "cosine";
  read(j, "lr_schedule", schedule);
  if (schedule == "cosine") {
    c.lr_schedule = LrSchedule::kCosine;
  } else if (schedule == "constant") {
    c.lr_schedule = LrSchedule::kConstant;
  } else {
    throw std::invalid_argument("unknown lr_schedule: " + schedule);
  }
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "adam_eps", c.adam_eps);
  read(j, "eval_interval", c.eval_interval);
  read(j, "seed", c.seed);
  return c;
}

}  // namespace gpelab::lm
