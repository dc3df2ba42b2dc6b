#pragma once

// Decoder-only transformer with hand-written forward and backward passes.
// Parameters and gradients live in flat buffers described by TensorInfo;
// the tensor order is the canonical checkpoint order.

#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <new>
#include <functional>
#include <stdexcept>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gpelab/corpus.hpp"
#include "gpelab/lm/config.hpp"

namespace gpelab::lm {

using corpus::TokenId;

// 64-byte aligned storage. Vectorized reductions peel leading elements up to
// an alignment boundary, so with arbitrary addresses the summation order (and
// the last bits of results) would depend on where malloc put a buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    const std::size_t bytes = (n * sizeof(T) + kAlign - 1) / kAlign * kAlign;
    void* p = std::aligned_alloc(kAlign, bytes == 0 ? kAlign : bytes);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) { std::free(p); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool decay = false;      // receives weight decay (matrices only)
  bool encoding = false;   // positional-encoding parameter
  bool trainable = true;
};

struct ForwardOptions {
  bool training = false;  // enables dropout
  std::uint64_t dropout_seed = 0;
};

// Statistics from Transformer::evaluate. Entropy sums run over all layers and
// heads for query positions >= entropy_from.
struct SequenceStats {
  double nll_sum = 0.0;
  std::int64_t n_tokens = 0;
  double entropy_sum = 0.0;
  std::int64_t entropy_rows = 0;
  std::vector<double> head_entropy_sum;  // per head, summed over layers
  std::int64_t head_entropy_rows = 0;    // rows per head
};

// Called with each attention row (keys 0..query) during evaluate.
using RowHook =
    std::function<void(int layer, int head, int query, std::span<const double> probs)>;

struct ApeHead {
  double lambda = 0.0;
  double delta = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
  std::vector<double> alpha;
};

double softplus(double x);
double inverse_softplus(double y);

template <class T>
class Transformer {
 public:
  explicit Transformer(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& tensor(std::string_view name) const;
  std::size_t num_parameters() const { return params_.size(); }
  std::size_t num_encoding_parameters() const;

  std::span<T> parameters() { return params_; }
  std::span<const T> parameters() const { return params_; }
  std::span<T> gradients() { return grads_; }
  std::span<const T> gradients() const { return grads_; }
  std::span<T> tensor_data(std::string_view name);
  std::span<const T> tensor_data(std::string_view name) const;

  // Batched forward over `batch` rows of `length` tokens. Returns the mean
  // next-token cross-entropy if targets are given, otherwise NaN. Activations
  // are kept for backward(). Throws std::out_of_range for ids >= vocab_size.
  double forward(std::span<const TokenId> tokens, std::span<const TokenId> targets, int batch,
                 int length, const ForwardOptions& options = {});
  void zero_grad();
  // Accumulates d(mean loss)/d(params) for the last forward with targets.
  void backward();

  // Outputs of the last forward: logits [batch, length, vocab] and the
  // attention matrix [length, length] of one (layer, row, head).
  std::span<const T> logits() const { return logits_; }
  std::span<const T> attention(int layer, int row, int head) const;

  // Single-sequence evaluation that never materializes the full attention
  // matrix, so it scales to long prompts. `targets` may be empty.
  SequenceStats evaluate(std::span<const TokenId> tokens, std::span<const TokenId> targets,
                         int entropy_from, const RowHook& hook = {}) const;

  // Effective (softplus-mapped) APE parameters of a head.
  ApeHead ape_head(int head) const;
  void set_ape_alpha(int head, std::span<const double> alpha);

  template <class U>
  void copy_parameters_from(const Transformer<U>& other);

 private:
  struct LayerActs {
    Buffer<T> ln1_out, ln1_mean, ln1_rstd;
    Buffer<T> qr, kr, v;   // [B, H, T, d_head], rotated where applicable
    Buffer<T> raw, probs;  // [B, H, T, T]; raw only for APE
    Buffer<T> att;         // [B*T, C]
    Buffer<T> attn_mask, res_mid;
    Buffer<T> ln2_out, ln2_mean, ln2_rstd;
    Buffer<T> fc, gelu;    // [B*T, 4C]
    Buffer<T> mlp_mask;
  };

  // Per-head position tables for one sequence length.
  struct PositionTables {
    int length = 0;
    Buffer<T> cos, sin;    // [H, T, d_head/2]
    Buffer<T> temp, bias;  // [H, T] indexed by relative distance
    std::vector<ApeHead> ape;
  };

  void build_layout();
  void initialize();
  PositionTables make_tables(int length) const;
  void ensure_activations(int batch, int length);

  ModelConfig cfg_;
  std::vector<TensorInfo> tensors_;
  Buffer<T> params_;
  Buffer<T> grads_;

  // Activations of the last forward.
  int batch_ = 0;
  int length_ = 0;
  bool has_targets_ = false;
  std::vector<TokenId> tokens_;
  std::vector<TokenId> targets_;
  bool dropout_active_ = false;
  PositionTables tables_;
  std::vector<LayerActs> layers_;
  Buffer<T> residual_;           // [n_layers+1, B*T, C]
  Buffer<T> embed_mask_;
  Buffer<T> lnf_out_, lnf_mean_, lnf_rstd_;
  Buffer<T> logits_;
};

template <class T>
template <class U>
void Transformer<T>::copy_parameters_from(const Transformer<U>& other) {
  if (!(other.config() == cfg_)) {
    throw std::invalid_argument("parameter copy needs identical model configs");
  }
  const auto src = other.parameters();
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i] = static_cast<T>(src[i]);
}

// New model with `spec` as its encoding. Every tensor shared with `model` is
// copied bit for bit; new encoding tensors take their initial values.
template <class T>
Transformer<T> swap_encoding(const Transformer<T>& model, const EncodingSpec& spec);

// Rescales each APE head's alpha by measured/target entropy, clamped to
// [0.5, 2] per call. `head_entropy` is the measured mean entropy per head.
// Returns the applied factors.
template <class T>
std::vector<double> rescale_ape_alpha(Transformer<T>& model, std::span<const double> head_entropy,
                                      double target_entropy);

extern template class Transformer<float>;
extern template class Transformer<double>;

}  // namespace gpelab::lm
