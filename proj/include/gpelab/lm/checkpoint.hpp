#pragma once

// Binary checkpoint:
//   "GPELABCK" | u32 version | u64 header bytes | JSON header
//   | u64 n | n x f32 parameters | [n x f32 adam m | n x f32 adam v]
//   | u64 FNV-1a of every preceding byte
// All integers and floats are little-endian.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpelab/corpus.hpp"
#include "gpelab/lm/config.hpp"
#include "gpelab/lm/model.hpp"
#include "gpelab/lm/train.hpp"

namespace gpelab::lm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Code { kIo, kBadMagic, kVersion, kTruncated, kCorrupt, kShape };

  CheckpointError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

std::string to_string(CheckpointError::Code code);

struct TensorEntry {
  std::string name;
  std::vector<int> shape;
  bool operator==(const TensorEntry&) const = default;
};

struct Checkpoint {
  ModelConfig model;
  std::optional<TrainConfig> train;
  std::string vocab;  // Vocab::serialize()
  std::vector<TensorEntry> tensors;
  std::vector<float> parameters;
  TrainState state;
  nlohmann::json extra = nlohmann::json::object();
};

Checkpoint make_checkpoint(const Transformer<float>& model, const corpus::Vocab& vocab,
                           const std::optional<TrainConfig>& train = std::nullopt,
                           const TrainState& state = {});

// Throws CheckpointError(kShape) when the tensor list does not match the
// layout implied by the stored config.
Transformer<float> model_from_checkpoint(const Checkpoint& ckpt);
corpus::Vocab vocab_from_checkpoint(const Checkpoint& ckpt);

// Writes to `path` through a temporary file and rename.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace gpelab::lm
