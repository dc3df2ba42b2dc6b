#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpelab/corpus.hpp"
#include "gpelab/lm/config.hpp"
#include "gpelab/lm/model.hpp"

namespace gpelab::lm {

struct OptimizerState {
  std::vector<float> m;
  std::vector<float> v;
  std::int64_t step = 0;
};

// Decoupled weight decay Adam. Decay applies only to tensors flagged `decay`;
// tensors with trainable == false are left untouched.
template <class T>
class AdamW {
 public:
  AdamW(const TrainConfig& cfg, std::size_t n_params);

  void step(Transformer<T>& model, double lr);

  OptimizerState state() const;
  void set_state(const OptimizerState& s);

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::vector<T> m_, v_;
  std::int64_t t_ = 0;
};

// Scales gradients in place so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <class T>
double clip_grad_norm(Transformer<T>& model, double max_norm);

struct LossRecord {
  int iter = 0;
  double loss = 0.0;
  double lr = 0.0;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(int iteration, double loss, double grad_norm);
  int iteration() const { return iteration_; }

 private:
  int iteration_;
};

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
};

// One optimizer step on a fixed batch.
template <class T>
StepResult train_step(Transformer<T>& model, AdamW<T>& opt, const corpus::Batch& batch, double lr,
                      double grad_clip, const ForwardOptions& options = {});

// Resumable training state.
struct TrainState {
  int iteration = 0;  // next iteration to run
  std::optional<OptimizerState> optimizer;
  std::string sampler_state;
  std::vector<LossRecord> log;
};

struct TrainResult {
  std::vector<LossRecord> log;
  TrainState state;
};

// Trains on random windows of length train_context. The loss log holds one
// row per eval_interval iterations (mean training loss since the previous row)
// plus the last iteration. Throws NonFiniteLoss on NaN/inf loss or gradients.
TrainResult train(Transformer<float>& model, const corpus::Corpus& corpus, const TrainConfig& cfg,
                  const TrainState& resume = {},
                  const std::function<void(const LossRecord&)>& on_log = {});

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace gpelab::lm
