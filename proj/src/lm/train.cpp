#include "gpelab/lm/train.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gpelab::lm {
namespace {

std::string describe(int iteration, double loss, double grad_norm) {
  std::ostringstream os;
  os << "non-finite training value at iteration " << iteration << " (loss=" << loss
     << ", grad_norm=" << grad_norm << "); lower the learning rate or check the data";
  return os.str();
}

}  // namespace

NonFiniteLoss::NonFiniteLoss(int iteration, double loss, double grad_norm)
    : std::runtime_error(describe(iteration, loss, grad_norm)), iteration_(iteration) {}

template <class T>
AdamW<T>::AdamW(const TrainConfig& cfg, std::size_t n_params)
    : beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay),
      m_(n_params, T(0)),
      v_(n_params, T(0)) {}

template <class T>
void AdamW<T>::step(Transformer<T>& model, double lr) {
  auto p = model.parameters();
  const auto g = model.gradients();
  if (p.size() != m_.size()) throw std::invalid_argument("optimizer size does not match model");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const T b1 = static_cast<T>(beta1_);
  const T b2 = static_cast<T>(beta2_);
  for (const auto& info : model.tensors()) {
    if (!info.trainable) continue;
    const T decay = static_cast<T>(info.decay ? weight_decay_ : 0.0);
    const T step = static_cast<T>(lr);
    for (std::size_t i = info.offset; i < info.offset + info.size; ++i) {
      m_[i] = b1 * m_[i] + (T(1) - b1) * g[i];
      v_[i] = b2 * v_[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = m_[i] / static_cast<T>(bc1);
      const T vhat = v_[i] / static_cast<T>(bc2);
      p[i] -= step * (mhat / (std::sqrt(vhat) + static_cast<T>(eps_)) + decay * p[i]);
    }
  }
}

template <class T>
OptimizerState AdamW<T>::state() const {
  OptimizerState s;
  s.m.assign(m_.begin(), m_.end());
  s.v.assign(v_.begin(), v_.end());
  s.step = t_;
  return s;
}

template <class T>
void AdamW<T>::set_state(const OptimizerState& s) {
  if (s.m.size() != m_.size() || s.v.size() != v_.size()) {
    throw std::invalid_argument("optimizer state size does not match model");
  }
  m_.assign(s.m.begin(), s.m.end());
  v_.assign(s.v.begin(), s.v.end());
  t_ = s.step;
}

template <class T>
double clip_grad_norm(Transformer<T>& model, double max_norm) {
  auto g = model.gradients();
  double sq = 0.0;
  for (const auto& info : model.tensors()) {
    if (!info.trainable) continue;
    for (std::size_t i = info.offset; i < info.offset + info.size; ++i) {
      sq += static_cast<double>(g[i]) * g[i];
    }
  }
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / (norm + 1e-6));
    for (auto& x : g) x *= scale;
  }
  return norm;
}

template <class T>
StepResult train_step(Transformer<T>& model, AdamW<T>& opt, const corpus::Batch& batch, double lr,
                      double grad_clip, const ForwardOptions& options) {
  StepResult r;
  model.zero_grad();
  r.loss = model.forward(batch.inputs, batch.targets, batch.batch_size, batch.context, options);
  model.backward();
  r.grad_norm = clip_grad_norm(model, grad_clip);
  if (std::isfinite(r.loss) && std::isfinite(r.grad_norm)) opt.step(model, lr);
  return r;
}

TrainResult train(Transformer<float>& model, const corpus::Corpus& corpus, const TrainConfig& cfg,
                  const TrainState& resume, const std::function<void(const LossRecord&)>& on_log) {
  cfg.validate();
  corpus::BatchSampler sampler(corpus, model.config().train_context, cfg.batch_size, cfg.seed);
  AdamW<float> opt(cfg, model.num_parameters());
  TrainResult result;
  result.log = resume.log;
  if (resume.optimizer) opt.set_state(*resume.optimizer);
  if (!resume.sampler_state.empty()) sampler.set_rng_state(resume.sampler_state);

  double loss_acc = 0.0;
  int loss_count = 0;
  for (int it = resume.iteration; it < cfg.iterations; ++it) {
    const double lr = learning_rate_at(cfg, it);
    const corpus::Batch batch = sampler.next();
    ForwardOptions fo;
    fo.training = true;
    fo.dropout_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(it));
    const StepResult step = train_step(model, opt, batch, lr, cfg.grad_clip, fo);
    if (!std::isfinite(step.loss) || !std::isfinite(step.grad_norm)) {
      throw NonFiniteLoss(it, step.loss, step.grad_norm);
    }
    loss_acc += step.loss;
    ++loss_count;
    if (it % cfg.eval_interval == 0 || it == cfg.iterations - 1) {
      LossRecord rec{it, loss_acc / loss_count, lr};
      result.log.push_back(rec);
      if (on_log) on_log(rec);
      loss_acc = 0.0;
      loss_count = 0;
    }
  }
  result.state.iteration = std::max(resume.iteration, cfg.iterations);
  result.state.optimizer = opt.state();
  result.state.sampler_state = sampler.rng_state();
  result.state.log = result.log;
  return result;
}

template class AdamW<float>;
template class AdamW<double>;
template double clip_grad_norm(Transformer<float>&, double);
template double clip_grad_norm(Transformer<double>&, double);
template StepResult train_step(Transformer<float>&, AdamW<float>&, const corpus::Batch&, double,
                               double, const ForwardOptions&);
template StepResult train_step(Transformer<double>&, AdamW<double>&, const corpus::Batch&, double,
                               double, const ForwardOptions&);

}  // namespace gpelab::lm
