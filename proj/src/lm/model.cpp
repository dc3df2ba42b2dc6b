#include "gpelab/lm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

#include <Eigen/Dense>

#include "gpelab/encodings.hpp"

namespace gpelab::lm {
namespace {

using Eigen::Index;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using RowVecMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <class T>
using CRowVecMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

template <class T>
MatMap<T> mat(T* p, Index rows, Index cols, Index ld) {
  return MatMap<T>(p, rows, cols, Eigen::OuterStride<>(ld));
}
template <class T>
CMatMap<T> cmat(const T* p, Index rows, Index cols, Index ld) {
  return CMatMap<T>(p, rows, cols, Eigen::OuterStride<>(ld));
}

constexpr double kLayerNormEps = 1e-5;
constexpr int kEvalChunk = 128;

// out[n, oc] = inp[n, c] * w[c, oc] + b
template <class T>
void linear_forward(T* out, const T* inp, const T* w, const T* b, int n, int c, int oc) {
  auto o = mat(out, n, oc, oc);
  o.noalias() = cmat(inp, n, c, c) * cmat(w, c, oc, oc);
  if (b) o.rowwise() += CRowVecMap<T>(b, oc);
}

// dinp is overwritten; dw and db accumulate.
template <class T>
void linear_backward(T* dinp, T* dw, T* db, const T* dout, const T* inp, const T* w, int n, int c,
                     int oc) {
  const auto d = cmat(dout, n, oc, oc);
  if (dinp) mat(dinp, n, c, c).noalias() = d * cmat(w, c, oc, oc).transpose();
  mat(dw, c, oc, oc).noalias() += cmat(inp, n, c, c).transpose() * d;
  if (db) RowVecMap<T>(db, oc) += d.colwise().sum();
}

template <class T>
void layernorm_forward(T* out, T* mean, T* rstd, const T* x, const T* w, const T* b, int n, int c) {
  for (int i = 0; i < n; ++i) {
    const T* xi = x + static_cast<std::size_t>(i) * c;
    double m = 0.0;
    for (int j = 0; j < c; ++j) m += xi[j];
    m /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (xi[j] - m) * (xi[j] - m);
    var /= c;
    const double s = 1.0 / std::sqrt(var + kLayerNormEps);
    T* oi = out + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) oi[j] = static_cast<T>((xi[j] - m) * s) * w[j] + b[j];
    if (mean) mean[i] = static_cast<T>(m);
    if (rstd) rstd[i] = static_cast<T>(s);
  }
}

// dx accumulates.
template <class T>
void layernorm_backward(T* dx, T* dw, T* db, const T* dout, const T* x, const T* w, const T* mean,
                        const T* rstd, int n, int c) {
  for (int i = 0; i < n; ++i) {
    const auto off = static_cast<std::size_t>(i) * c;
    const T* di = dout + off;
    const T* xi = x + off;
    const T m = mean[i];
    const T s = rstd[i];
    T dnorm_mean = 0;
    T dnorm_norm_mean = 0;
    for (int j = 0; j < c; ++j) {
      const T norm = (xi[j] - m) * s;
      const T dnorm = w[j] * di[j];
      dnorm_mean += dnorm;
      dnorm_norm_mean += dnorm * norm;
    }
    dnorm_mean /= c;
    dnorm_norm_mean /= c;
    T* dxi = dx + off;
    for (int j = 0; j < c; ++j) {
      const T norm = (xi[j] - m) * s;
      const T dnorm = w[j] * di[j];
      db[j] += di[j];
      dw[j] += norm * di[j];
      dxi[j] += s * (dnorm - dnorm_mean - norm * dnorm_norm_mean);
    }
  }
}

const double kGeluScale = std::sqrt(2.0 / std::numbers::pi);

template <class T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using CArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <class T>
void gelu_forward(T* out, const T* x, std::size_t n) {
  const T k = static_cast<T>(kGeluScale);
  const CArrayMap<T> v(x, static_cast<Index>(n));
  ArrayMap<T>(out, static_cast<Index>(n)) =
      T(0.5) * v * (T(1) + (k * (v + T(0.044715) * v.cube())).tanh());
}

template <class T>
void gelu_backward(T* dx, const T* x, const T* dout, std::size_t n) {
  const T k = static_cast<T>(kGeluScale);
  const auto len = static_cast<Index>(n);
  const CArrayMap<T> v(x, len);
  const Eigen::Array<T, Eigen::Dynamic, 1> t = (k * (v + T(0.044715) * v.cube())).tanh();
  ArrayMap<T>(dx, len) =
      (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t.square()) * k * (T(1) + T(3 * 0.044715) * v.square())) *
      CArrayMap<T>(dout, len);
}

// Causal attention for query rows [t0, t1) of one head. q holds those rows;
// k and v hold rows [0, t1). probs receives the row-major [t1-t0, t1]
// probabilities with leading dimension ld (zero above the diagonal); raw, if
// given, the scaled dot products before the positional terms. entropy, if
// given, receives the Shannon entropy of each row.
template <class T>
void attend_rows(const T* q, const T* k, const T* v, int t0, int t1, int dh, T scale,
                 const T* temp, const T* bias, T* raw, T* probs, int ld, T* out, int out_ld,
                 double* entropy) {
  const int rows = t1 - t0;
  auto s = mat(probs, rows, t1, ld);
  s.noalias() = cmat(q, rows, dh, dh) * cmat(k, t1, dh, dh).transpose();
  s *= scale;
  if (raw) mat(raw, rows, t1, ld) = s;
  for (int i = 0; i < rows; ++i) {
    const int t = t0 + i;
    T* row = probs + static_cast<std::size_t>(i) * ld;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j <= t; ++j) {
      const int n = t - j;
      T l = row[j];
      if (temp) l *= temp[n];
      if (bias) l += bias[n];
      row[j] = l;
      mx = std::max(mx, l);
    }
    double sum = 0.0;
    double weighted = 0.0;
    for (int j = 0; j <= t; ++j) {
      const T shifted = row[j] - mx;
      const T e = std::exp(shifted);
      sum += e;
      if (entropy) weighted += static_cast<double>(e) * shifted;
      row[j] = e;
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (int j = 0; j <= t; ++j) row[j] *= inv;
    std::fill(row + t + 1, row + t1, T(0));
    if (entropy) entropy[i] = std::max(0.0, std::log(sum) - weighted / sum);
  }
  mat(out, rows, dh, out_ld).noalias() = cmat(probs, rows, t1, ld) * cmat(v, t1, dh, dh);
}

// Rotates consecutive pairs of x (length dh) for one position.
template <class T>
void rotate(T* dst, const T* src, const T* c, const T* s, int half) {
  for (int m = 0; m < half; ++m) {
    const T x0 = src[2 * m];
    const T x1 = src[2 * m + 1];
    // Angle -t*omega: q and k enter as R(-t w) q, R(-s w) k, so the score is
    // q^T R((t - s) w) k.
    dst[2 * m] = c[m] * x0 + s[m] * x1;
    dst[2 * m + 1] = -s[m] * x0 + c[m] * x1;
  }
}

template <class T>
void unrotate(T* dst, const T* src, const T* c, const T* s, int half) {
  for (int m = 0; m < half; ++m) {
    const T g0 = src[2 * m];
    const T g1 = src[2 * m + 1];
    dst[2 * m] = c[m] * g0 - s[m] * g1;
    dst[2 * m + 1] = s[m] * g0 + c[m] * g1;
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<double> dropout_mask(std::size_t n, double p, std::mt19937_64& rng) {
  std::vector<double> m(n);
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  for (auto& x : m) x = keep(rng) ? scale : 0.0;
  return m;
}

}  // namespace

double softplus(double x) { return x > 20.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double inverse_softplus(double y) {
  if (!(y > 0.0)) throw std::invalid_argument("inverse_softplus needs a positive value");
  return y > 20.0 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

template <class T>
Transformer<T>::Transformer(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  build_layout();
  initialize();
}

template <class T>
void Transformer<T>::build_layout() {
  const int c = cfg_.d_model;
  const int v = cfg_.vocab_size;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::vector<int> shape, bool decay, bool encoding = false) {
    std::size_t size = 1;
    for (int d : shape) size *= static_cast<std::size_t>(d);
    TensorInfo info{std::move(name), std::move(shape), offset, size, decay, encoding, true};
    if (encoding) info.trainable = cfg_.encoding.learnable;
    tensors_.push_back(std::move(info));
    offset += size;
  };
  add("wte", {v, c}, true);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    add(p + "ln1.w", {c}, false);
    add(p + "ln1.b", {c}, false);
    add(p + "attn.w_qkv", {c, 3 * c}, true);
    add(p + "attn.b_qkv", {3 * c}, false);
    add(p + "attn.w_proj", {c, c}, true);
    add(p + "attn.b_proj", {c}, false);
    add(p + "ln2.w", {c}, false);
    add(p + "ln2.b", {c}, false);
    add(p + "mlp.w_fc", {c, 4 * c}, true);
    add(p + "mlp.b_fc", {4 * c}, false);
    add(p + "mlp.w_proj", {4 * c, c}, true);
    add(p + "mlp.b_proj", {c}, false);
  }
  add("ln_f.w", {c}, false);
  add("ln_f.b", {c}, false);
  if (!cfg_.tie_embeddings) add("lm_head", {v, c}, true);
  if (cfg_.encoding.kind == PositionKind::kApe) {
    const int h = cfg_.n_heads;
    add("ape.lambda", {h}, false, true);
    add("ape.delta", {h}, false, true);
    add("ape.beta", {h}, false, true);
    add("ape.gamma", {h}, false, true);
    add("ape.alpha", {h, cfg_.d_head() / 2}, false, true);
  }
  params_.assign(offset, T(0));
  grads_.assign(offset, T(0));
}

template <class T>
void Transformer<T>::initialize() {
  // Encoding tensors come last and draw no random numbers, so the remaining
  // weights are identical across encodings for a given seed.
  std::mt19937_64 rng(cfg_.seed);
  const double proj_std = 0.02 / std::sqrt(2.0 * cfg_.n_layers);
  for (const auto& t : tensors_) {
    T* p = params_.data() + t.offset;
    const std::string& n = t.name;
    const auto ends_with = [&](std::string_view suffix) {
      return n.size() >= suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (t.encoding) continue;
    if (ends_with(".w") && t.shape.size() == 1) {
      std::fill(p, p + t.size, T(1));
    } else if (t.shape.size() == 1) {
      std::fill(p, p + t.size, T(0));
    } else {
      std::normal_distribution<double> normal(0.0, ends_with("w_proj") ? proj_std : 0.02);
      for (std::size_t i = 0; i < t.size; ++i) p[i] = static_cast<T>(normal(rng));
    }
  }
  if (cfg_.encoding.kind != PositionKind::kApe) return;
  const auto& e = cfg_.encoding;
  const int h = cfg_.n_heads;
  const int half = cfg_.d_head() / 2;
  const auto slopes = alibi_slopes(h);
  auto lam = tensor_data("ape.lambda");
  auto del = tensor_data("ape.delta");
  auto bet = tensor_data("ape.beta");
  auto gam = tensor_data("ape.gamma");
  auto alp = tensor_data("ape.alpha");
  // Exact zeros are not representable through softplus; use a tiny value.
  const auto raw = [](double value) { return inverse_softplus(std::max(value, 1e-30)); };
  for (int i = 0; i < h; ++i) {
    lam[i] = static_cast<T>(raw(e.ape_lambda));
    del[i] = static_cast<T>(raw(e.ape_delta ? *e.ape_delta : slopes[static_cast<std::size_t>(i)]));
    bet[i] = static_cast<T>(raw(e.ape_beta));
    gam[i] = static_cast<T>(raw(e.ape_gamma));
    for (int m = 0; m < half; ++m) {
      const double alpha = std::pow(e.rope_base, 2.0 * m / cfg_.d_head());
      alp[static_cast<std::size_t>(i * half + m)] = static_cast<T>(raw(alpha));
    }
  }
}

template <class T>
const TensorInfo& Transformer<T>::tensor(std::string_view name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw std::out_of_range("no tensor named " + std::string(name));
}

template <class T>
std::span<T> Transformer<T>::tensor_data(std::string_view name) {
  const auto& t = tensor(name);
  return std::span<T>(params_.data() + t.offset, t.size);
}

template <class T>
std::span<const T> Transformer<T>::tensor_data(std::string_view name) const {
  const auto& t = tensor(name);
  return std::span<const T>(params_.data() + t.offset, t.size);
}

template <class T>
std::size_t Transformer<T>::num_encoding_parameters() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.encoding ? t.size : 0;
  return n;
}

template <class T>
ApeHead Transformer<T>::ape_head(int head) const {
  if (cfg_.encoding.kind != PositionKind::kApe) throw std::logic_error("model has no APE parameters");
  if (head < 0 || head >= cfg_.n_heads) throw std::out_of_range("head index");
  const auto h = static_cast<std::size_t>(head);
  const int half = cfg_.d_head() / 2;
  ApeHead a;
  a.lambda = softplus(tensor_data("ape.lambda")[h]);
  a.delta = softplus(tensor_data("ape.delta")[h]);
  a.beta = softplus(tensor_data("ape.beta")[h]);
  a.gamma = softplus(tensor_data("ape.gamma")[h]);
  const auto alp = tensor_data("ape.alpha");
  for (int m = 0; m < half; ++m) a.alpha.push_back(softplus(alp[h * half + m]));
  return a;
}

template <class T>
void Transformer<T>::set_ape_alpha(int head, std::span<const double> alpha) {
  const int half = cfg_.d_head() / 2;
  if (alpha.size() != static_cast<std::size_t>(half)) throw std::invalid_argument("alpha size");
  ape_head(head);  // validates
  auto alp = tensor_data("ape.alpha");
  for (int m = 0; m < half; ++m) {
    alp[static_cast<std::size_t>(head * half + m)] = static_cast<T>(inverse_softplus(alpha[m]));
  }
}

template <class T>
typename Transformer<T>::PositionTables Transformer<T>::make_tables(int length) const {
  PositionTables tab;
  tab.length = length;
  const int h = cfg_.n_heads;
  const int half = cfg_.d_head() / 2;
  const auto& e = cfg_.encoding;
  const auto len = static_cast<std::size_t>(length);
  if (e.kind == PositionKind::kApe) {
    for (int i = 0; i < h; ++i) tab.ape.push_back(ape_head(i));
  }
  if (e.rotates()) {
    tab.cos.resize(static_cast<std::size_t>(h) * len * half);
    tab.sin.resize(tab.cos.size());
    for (int i = 0; i < h; ++i) {
      std::vector<double> omega(static_cast<std::size_t>(half));
      for (int m = 0; m < half; ++m) {
        omega[m] = e.kind == PositionKind::kRope
                       ? std::pow(e.rope_base, -2.0 * m / cfg_.d_head())
                       : 1.0 / tab.ape[static_cast<std::size_t>(i)].alpha[m];
      }
      for (int t = 0; t < length; ++t) {
        const std::size_t base = (static_cast<std::size_t>(i) * len + t) * half;
        for (int m = 0; m < half; ++m) {
          // t / alpha for APE, t * base^(-2m/d) for RoPE.
          const double a = e.kind == PositionKind::kRope
                               ? t * omega[m]
                               : t / tab.ape[static_cast<std::size_t>(i)].alpha[m];
          tab.cos[base + m] = static_cast<T>(std::cos(a));
          tab.sin[base + m] = static_cast<T>(std::sin(a));
        }
      }
    }
  }
  if (e.kind == PositionKind::kAlibi) {
    const auto slopes = alibi_slopes(h);
    tab.bias.resize(static_cast<std::size_t>(h) * len);
    for (int i = 0; i < h; ++i) {
      for (int n = 0; n < length; ++n) {
        tab.bias[i * len + n] = static_cast<T>(-slopes[static_cast<std::size_t>(i)] * n);
      }
    }
  } else if (e.kind == PositionKind::kApe) {
    tab.temp.resize(static_cast<std::size_t>(h) * len);
    tab.bias.resize(tab.temp.size());
    for (int i = 0; i < h; ++i) {
      const auto& a = tab.ape[static_cast<std::size_t>(i)];
      for (int n = 0; n < length; ++n) {
        const double dn = n;
        tab.temp[i * len + n] = static_cast<T>(1.0 / (1.0 + a.lambda * dn));
        tab.bias[i * len + n] =
            static_cast<T>(-a.delta * dn - a.beta * std::log1p(dn) - a.gamma * std::sqrt(dn));
      }
    }
  }
  return tab;
}

template <class T>
void Transformer<T>::ensure_activations(int batch, int length) {
  const auto n = static_cast<std::size_t>(batch) * length;
  const auto c = static_cast<std::size_t>(cfg_.d_model);
  const auto hl = static_cast<std::size_t>(batch) * cfg_.n_heads * length;
  const bool ape = cfg_.encoding.kind == PositionKind::kApe;
  layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
  for (auto& a : layers_) {
    a.ln1_out.resize(n * c);
    a.ln1_mean.resize(n);
    a.ln1_rstd.resize(n);
    a.qr.resize(n * c);
    a.kr.resize(n * c);
    a.v.resize(n * c);
    a.probs.resize(hl * length);
    a.raw.resize(ape ? hl * length : 0);
    a.att.resize(n * c);
    a.res_mid.resize(n * c);
    a.ln2_out.resize(n * c);
    a.ln2_mean.resize(n);
    a.ln2_rstd.resize(n);
    a.fc.resize(n * 4 * c);
    a.gelu.resize(n * 4 * c);
    a.attn_mask.resize(dropout_active_ ? n * c : 0);
    a.mlp_mask.resize(dropout_active_ ? n * c : 0);
  }
  residual_.resize((static_cast<std::size_t>(cfg_.n_layers) + 1) * n * c);
  embed_mask_.resize(dropout_active_ ? n * c : 0);
  lnf_out_.resize(n * c);
  lnf_mean_.resize(n);
  lnf_rstd_.resize(n);
  logits_.resize(n * static_cast<std::size_t>(cfg_.vocab_size));
}

template <class T>
double Transformer<T>::forward(std::span<const TokenId> tokens, std::span<const TokenId> targets,
                               int batch, int length, const ForwardOptions& options) {
  if (batch <= 0 || length <= 0) throw std::invalid_argument("batch and length must be positive");
  const auto n = static_cast<std::size_t>(batch) * length;
  if (tokens.size() != n || (!targets.empty() && targets.size() != n)) {
    throw std::invalid_argument("token count does not match batch * length");
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= cfg_.vocab_size) throw std::out_of_range("token id outside vocabulary");
  }
  for (TokenId t : targets) {
    if (t < 0 || t >= cfg_.vocab_size) throw std::out_of_range("target id outside vocabulary");
  }
  const int c = cfg_.d_model;
  const int h = cfg_.n_heads;
  const int dh = cfg_.d_head();
  const int half = dh / 2;
  const int v = cfg_.vocab_size;
  const auto len = static_cast<std::size_t>(length);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  batch_ = batch;
  length_ = length;
  tokens_.assign(tokens.begin(), tokens.end());
  targets_.assign(targets.begin(), targets.end());
  has_targets_ = !targets.empty();
  dropout_active_ = options.training && cfg_.dropout > 0.0;
  ensure_activations(batch, length);
  tables_ = make_tables(length);
  std::mt19937_64 drop_rng(options.dropout_seed);
  const auto apply_dropout = [&](T* x, Buffer<T>& mask) {
    const auto m = dropout_mask(mask.size(), cfg_.dropout, drop_rng);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      mask[i] = static_cast<T>(m[i]);
      x[i] *= mask[i];
    }
  };

  const T* wte = tensor_data("wte").data();
  T* x0 = residual_.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(wte + static_cast<std::size_t>(tokens[i]) * c, c, x0 + i * c);
  }
  if (dropout_active_) apply_dropout(x0, embed_mask_);

  Buffer<T> qkv(n * 3 * c);
  Buffer<T> proj(n * c);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    auto& a = layers_[static_cast<std::size_t>(l)];
    const std::string p = "h" + std::to_string(l) + ".";
    const T* x = residual_.data() + static_cast<std::size_t>(l) * n * c;
    T* x_next = residual_.data() + static_cast<std::size_t>(l + 1) * n * c;

    layernorm_forward(a.ln1_out.data(), a.ln1_mean.data(), a.ln1_rstd.data(), x,
                      tensor_data(p + "ln1.w").data(), tensor_data(p + "ln1.b").data(),
                      static_cast<int>(n), c);
    linear_forward(qkv.data(), a.ln1_out.data(), tensor_data(p + "attn.w_qkv").data(),
                   tensor_data(p + "attn.b_qkv").data(), static_cast<int>(n), c, 3 * c);

    for (int b = 0; b < batch; ++b) {
      for (int hd = 0; hd < h; ++hd) {
        const std::size_t head_off = (static_cast<std::size_t>(b) * h + hd) * len * dh;
        for (int t = 0; t < length; ++t) {
          const T* src = qkv.data() + (static_cast<std::size_t>(b) * len + t) * 3 * c + hd * dh;
          T* qd = a.qr.data() + head_off + static_cast<std::size_t>(t) * dh;
          T* kd = a.kr.data() + head_off + static_cast<std::size_t>(t) * dh;
          T* vd = a.v.data() + head_off + static_cast<std::size_t>(t) * dh;
          if (cfg_.encoding.rotates()) {
            const std::size_t tb = (static_cast<std::size_t>(hd) * len + t) * half;
            rotate(qd, src, tables_.cos.data() + tb, tables_.sin.data() + tb, half);
            rotate(kd, src + c, tables_.cos.data() + tb, tables_.sin.data() + tb, half);
          } else {
            std::copy_n(src, dh, qd);
            std::copy_n(src + c, dh, kd);
          }
          std::copy_n(src + 2 * c, dh, vd);
        }
        const std::size_t prob_off = (static_cast<std::size_t>(b) * h + hd) * len * len;
        const T* temp = tables_.temp.empty() ? nullptr : tables_.temp.data() + hd * len;
        const T* bias = tables_.bias.empty() ? nullptr : tables_.bias.data() + hd * len;
        attend_rows(a.qr.data() + head_off, a.kr.data() + head_off, a.v.data() + head_off, 0,
                    length, dh, scale, temp, bias, a.raw.empty() ? nullptr : a.raw.data() + prob_off,
                    a.probs.data() + prob_off, length,
                    a.att.data() + static_cast<std::size_t>(b) * len * c + hd * dh, c, nullptr);
      }
    }

    linear_forward(proj.data(), a.att.data(), tensor_data(p + "attn.w_proj").data(),
                   tensor_data(p + "attn.b_proj").data(), static_cast<int>(n), c, c);
    if (dropout_active_) apply_dropout(proj.data(), a.attn_mask);
    for (std::size_t i = 0; i < n * c; ++i) a.res_mid[i] = x[i] + proj[i];

    layernorm_forward(a.ln2_out.data(), a.ln2_mean.data(), a.ln2_rstd.data(), a.res_mid.data(),
                      tensor_data(p + "ln2.w").data(), tensor_data(p + "ln2.b").data(),
                      static_cast<int>(n), c);
    linear_forward(a.fc.data(), a.ln2_out.data(), tensor_data(p + "mlp.w_fc").data(),
                   tensor_data(p + "mlp.b_fc").data(), static_cast<int>(n), c, 4 * c);
    gelu_forward(a.gelu.data(), a.fc.data(), a.fc.size());
    linear_forward(proj.data(), a.gelu.data(), tensor_data(p + "mlp.w_proj").data(),
                   tensor_data(p + "mlp.b_proj").data(), static_cast<int>(n), 4 * c, c);
    if (dropout_active_) apply_dropout(proj.data(), a.mlp_mask);
    for (std::size_t i = 0; i < n * c; ++i) x_next[i] = a.res_mid[i] + proj[i];
  }

  const T* xl = residual_.data() + static_cast<std::size_t>(cfg_.n_layers) * n * c;
  layernorm_forward(lnf_out_.data(), lnf_mean_.data(), lnf_rstd_.data(), xl,
                    tensor_data("ln_f.w").data(), tensor_data("ln_f.b").data(), static_cast<int>(n),
                    c);
  const T* head = cfg_.tie_embeddings ? wte : tensor_data("lm_head").data();
  mat(logits_.data(), static_cast<Index>(n), v, v).noalias() =
      cmat(lnf_out_.data(), static_cast<Index>(n), c, c) * cmat(head, v, c, c).transpose();

  if (!has_targets_) return std::numeric_limits<double>::quiet_NaN();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits_.data() + i * v;
    const T mx = *std::max_element(row, row + v);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    loss += std::log(sum) - static_cast<double>(row[targets[i]] - mx);
  }
  return loss / static_cast<double>(n);
}

template <class T>
void Transformer<T>::zero_grad() {
  std::fill(grads_.begin(), grads_.end(), T(0));
}

template <class T>
void Transformer<T>::backward() {
  if (!has_targets_) throw std::logic_error("backward needs a forward pass with targets");
  const int batch = batch_;
  const int length = length_;
  const auto n = static_cast<std::size_t>(batch) * length;
  const auto len = static_cast<std::size_t>(length);
  const int c = cfg_.d_model;
  const int h = cfg_.n_heads;
  const int dh = cfg_.d_head();
  const int half = dh / 2;
  const int v = cfg_.vocab_size;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const bool ape = cfg_.encoding.kind == PositionKind::kApe;
  const bool ape_grad = ape && cfg_.encoding.learnable;
  const auto grad = [&](const std::string& name) { return grads_.data() + tensor(name).offset; };

  // Softmax cross-entropy.
  Buffer<T> dlogits(logits_.size());
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits_.data() + i * v;
    T* drow = dlogits.data() + i * v;
    const T mx = *std::max_element(row, row + v);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    for (int j = 0; j < v; ++j) {
      const double p = std::exp(static_cast<double>(row[j] - mx)) / sum;
      drow[j] = static_cast<T>((p - (j == targets_[i] ? 1.0 : 0.0)) * inv_n);
    }
  }

  const T* wte = tensor_data("wte").data();
  const T* head = cfg_.tie_embeddings ? wte : tensor_data("lm_head").data();
  T* dhead = cfg_.tie_embeddings ? grad("wte") : grad("lm_head");
  Buffer<T> dlnf(n * c);
  mat(dlnf.data(), static_cast<Index>(n), c, c).noalias() =
      cmat(dlogits.data(), static_cast<Index>(n), v, v) * cmat(head, v, c, c);
  mat(dhead, v, c, c).noalias() += cmat(dlogits.data(), static_cast<Index>(n), v, v).transpose() *
                                   cmat(lnf_out_.data(), static_cast<Index>(n), c, c);

  Buffer<T> dres(n * c, T(0));
  const T* xl = residual_.data() + static_cast<std::size_t>(cfg_.n_layers) * n * c;
  layernorm_backward(dres.data(), grad("ln_f.w"), grad("ln_f.b"), dlnf.data(), xl,
                     tensor_data("ln_f.w").data(), lnf_mean_.data(), lnf_rstd_.data(),
                     static_cast<int>(n), c);

  // Gradients w.r.t. temp(n) and bias(n) per head, summed over layers.
  std::vector<double> g_temp(ape_grad ? static_cast<std::size_t>(h) * len : 0, 0.0);
  std::vector<double> g_bias(ape_grad ? static_cast<std::size_t>(h) * len : 0, 0.0);
  std::vector<double> g_alpha(ape_grad ? static_cast<std::size_t>(h) * half : 0, 0.0);

  Buffer<T> dproj(n * c);
  Buffer<T> dgelu(n * 4 * c);
  Buffer<T> dfc(n * 4 * c);
  Buffer<T> dln(n * c);
  Buffer<T> datt(n * c);
  Buffer<T> dqkv(n * 3 * c);
  Buffer<T> dp(len * len);
  Buffer<T> dqr(len * dh);
  Buffer<T> dkr(len * dh);
  Buffer<T> dv(len * dh);

  for (int l = cfg_.n_layers - 1; l >= 0; --l) {
    auto& a = layers_[static_cast<std::size_t>(l)];
    const std::string p = "h" + std::to_string(l) + ".";
    const T* x = residual_.data() + static_cast<std::size_t>(l) * n * c;

    // MLP branch.
    for (std::size_t i = 0; i < n * c; ++i) dproj[i] = dropout_active_ ? dres[i] * a.mlp_mask[i] : dres[i];
    linear_backward(dgelu.data(), grad(p + "mlp.w_proj"), grad(p + "mlp.b_proj"), dproj.data(),
                    a.gelu.data(), tensor_data(p + "mlp.w_proj").data(), static_cast<int>(n), 4 * c, c);
    gelu_backward(dfc.data(), a.fc.data(), dgelu.data(), dfc.size());
    linear_backward(dln.data(), grad(p + "mlp.w_fc"), grad(p + "mlp.b_fc"), dfc.data(),
                    a.ln2_out.data(), tensor_data(p + "mlp.w_fc").data(), static_cast<int>(n), c, 4 * c);
    layernorm_backward(dres.data(), grad(p + "ln2.w"), grad(p + "ln2.b"), dln.data(),
                       a.res_mid.data(), tensor_data(p + "ln2.w").data(), a.ln2_mean.data(),
                       a.ln2_rstd.data(), static_cast<int>(n), c);

    // Attention branch.
    for (std::size_t i = 0; i < n * c; ++i) dproj[i] = dropout_active_ ? dres[i] * a.attn_mask[i] : dres[i];
    linear_backward(datt.data(), grad(p + "attn.w_proj"), grad(p + "attn.b_proj"), dproj.data(),
                    a.att.data(), tensor_data(p + "attn.w_proj").data(), static_cast<int>(n), c, c);

    for (int b = 0; b < batch; ++b) {
      for (int hd = 0; hd < h; ++hd) {
        const std::size_t head_off = (static_cast<std::size_t>(b) * h + hd) * len * dh;
        const std::size_t prob_off = (static_cast<std::size_t>(b) * h + hd) * len * len;
        const T* qr = a.qr.data() + head_off;
        const T* kr = a.kr.data() + head_off;
        const T* probs = a.probs.data() + prob_off;
        const auto d_out = cmat(datt.data() + static_cast<std::size_t>(b) * len * c + hd * dh,
                                length, dh, c);
        auto dP = mat(dp.data(), length, length, length);
        dP.noalias() = d_out * cmat(a.v.data() + head_off, length, dh, dh).transpose();
        mat(dv.data(), length, dh, dh).noalias() =
            cmat(probs, length, length, length).transpose() * d_out;

        const T* temp = tables_.temp.empty() ? nullptr : tables_.temp.data() + hd * len;
        const T* raw = a.raw.empty() ? nullptr : a.raw.data() + prob_off;
        double* gt = ape_grad ? g_temp.data() + hd * len : nullptr;
        double* gb = ape_grad ? g_bias.data() + hd * len : nullptr;
        for (int t = 0; t < length; ++t) {
          const T* prow = probs + static_cast<std::size_t>(t) * len;
          T* drow = dp.data() + static_cast<std::size_t>(t) * len;
          T dot = 0;
          for (int s = 0; s <= t; ++s) dot += prow[s] * drow[s];
          for (int s = 0; s <= t; ++s) {
            const int dist = t - s;
            const T dl = prow[s] * (drow[s] - dot);
            if (gt) {
              gt[dist] += static_cast<double>(dl) * raw[static_cast<std::size_t>(t) * len + s];
              gb[dist] += static_cast<double>(dl);
            }
            drow[s] = temp ? dl * temp[dist] : dl;
          }
          std::fill(drow + t + 1, drow + length, T(0));
        }
        const auto dS = cmat(dp.data(), length, length, length);
        mat(dqr.data(), length, dh, dh).noalias() = dS * cmat(kr, length, dh, dh);
        mat(dqr.data(), length, dh, dh) *= scale;
        mat(dkr.data(), length, dh, dh).noalias() = dS.transpose() * cmat(qr, length, dh, dh);
        mat(dkr.data(), length, dh, dh) *= scale;

        for (int t = 0; t < length; ++t) {
          T* dst = dqkv.data() + (static_cast<std::size_t>(b) * len + t) * 3 * c + hd * dh;
          const T* gq = dqr.data() + static_cast<std::size_t>(t) * dh;
          const T* gk = dkr.data() + static_cast<std::size_t>(t) * dh;
          if (cfg_.encoding.rotates()) {
            const std::size_t tb = (static_cast<std::size_t>(hd) * len + t) * half;
            unrotate(dst, gq, tables_.cos.data() + tb, tables_.sin.data() + tb, half);
            unrotate(dst + c, gk, tables_.cos.data() + tb, tables_.sin.data() + tb, half);
            if (ape_grad) {
              // d(angle)/d(alpha) = t / alpha^2 for angle -t/alpha.
              const T* q = qr + static_cast<std::size_t>(t) * dh;
              const T* k = kr + static_cast<std::size_t>(t) * dh;
              const auto& alpha = tables_.ape[static_cast<std::size_t>(hd)].alpha;
              for (int m = 0; m < half; ++m) {
                const double ga = static_cast<double>(gq[2 * m + 1] * q[2 * m] - gq[2 * m] * q[2 * m + 1]) +
                                  static_cast<double>(gk[2 * m + 1] * k[2 * m] - gk[2 * m] * k[2 * m + 1]);
                g_alpha[static_cast<std::size_t>(hd * half + m)] += ga * t / (alpha[m] * alpha[m]);
              }
            }
          } else {
            std::copy_n(gq, dh, dst);
            std::copy_n(gk, dh, dst + c);
          }
          std::copy_n(dv.data() + static_cast<std::size_t>(t) * dh, dh, dst + 2 * c);
        }
      }
    }

    linear_backward(dln.data(), grad(p + "attn.w_qkv"), grad(p + "attn.b_qkv"), dqkv.data(),
                    a.ln1_out.data(), tensor_data(p + "attn.w_qkv").data(), static_cast<int>(n), c, 3 * c);
    layernorm_backward(dres.data(), grad(p + "ln1.w"), grad(p + "ln1.b"), dln.data(), x,
                       tensor_data(p + "ln1.w").data(), a.ln1_mean.data(), a.ln1_rstd.data(),
                       static_cast<int>(n), c);
  }

  T* dwte = grad("wte");
  for (std::size_t i = 0; i < n; ++i) {
    T* dst = dwte + static_cast<std::size_t>(tokens_[i]) * c;
    const T* src = dres.data() + i * c;
    for (int j = 0; j < c; ++j) dst[j] += dropout_active_ ? src[j] * embed_mask_[i * c + j] : src[j];
  }

  if (!ape_grad) return;
  const auto raw_of = [&](const std::string& name, int i) {
    return static_cast<double>(tensor_data(name)[static_cast<std::size_t>(i)]);
  };
  T* d_lam = grad("ape.lambda");
  T* d_del = grad("ape.delta");
  T* d_bet = grad("ape.beta");
  T* d_gam = grad("ape.gamma");
  T* d_alp = grad("ape.alpha");
  for (int hd = 0; hd < h; ++hd) {
    const auto& ap = tables_.ape[static_cast<std::size_t>(hd)];
    double gl = 0.0, gd = 0.0, gbeta = 0.0, gg = 0.0;
    for (int dist = 0; dist < length; ++dist) {
      const double dn = dist;
      const double t_grad = g_temp[hd * len + dist];
      const double b_grad = g_bias[hd * len + dist];
      const double denom = 1.0 + ap.lambda * dn;
      gl += t_grad * (-dn / (denom * denom));
      gd -= b_grad * dn;
      gbeta -= b_grad * std::log1p(dn);
      gg -= b_grad * std::sqrt(dn);
    }
    d_lam[hd] += static_cast<T>(gl * sigmoid(raw_of("ape.lambda", hd)));
    d_del[hd] += static_cast<T>(gd * sigmoid(raw_of("ape.delta", hd)));
    d_bet[hd] += static_cast<T>(gbeta * sigmoid(raw_of("ape.beta", hd)));
    d_gam[hd] += static_cast<T>(gg * sigmoid(raw_of("ape.gamma", hd)));
    for (int m = 0; m < half; ++m) {
      const int idx = hd * half + m;
      d_alp[idx] += static_cast<T>(g_alpha[static_cast<std::size_t>(idx)] * sigmoid(raw_of("ape.alpha", idx)));
    }
  }
}

template <class T>
std::span<const T> Transformer<T>::attention(int layer, int row, int head) const {
  if (layer < 0 || layer >= static_cast<int>(layers_.size()) || row < 0 || row >= batch_ ||
      head < 0 || head >= cfg_.n_heads) {
    throw std::out_of_range("attention index");
  }
  const auto len = static_cast<std::size_t>(length_);
  const std::size_t off = (static_cast<std::size_t>(row) * cfg_.n_heads + head) * len * len;
  return std::span<const T>(layers_[static_cast<std::size_t>(layer)].probs.data() + off, len * len);
}

template <class T>
SequenceStats Transformer<T>::evaluate(std::span<const TokenId> tokens,
                                       std::span<const TokenId> targets, int entropy_from,
                                       const RowHook& hook) const {
  const int length = static_cast<int>(tokens.size());
  if (length == 0) throw std::invalid_argument("cannot evaluate an empty sequence");
  if (!targets.empty() && targets.size() != tokens.size()) {
    throw std::invalid_argument("targets must match tokens");
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= cfg_.vocab_size) throw std::out_of_range("token id outside vocabulary");
  }
  for (TokenId t : targets) {
    if (t < 0 || t >= cfg_.vocab_size) throw std::out_of_range("target id outside vocabulary");
  }
  const auto n = static_cast<std::size_t>(length);
  const int c = cfg_.d_model;
  const int h = cfg_.n_heads;
  const int dh = cfg_.d_head();
  const int half = dh / 2;
  const int v = cfg_.vocab_size;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const PositionTables tab = make_tables(length);
  entropy_from = std::clamp(entropy_from, 0, length);

  SequenceStats stats;
  stats.head_entropy_sum.assign(static_cast<std::size_t>(h), 0.0);

  Buffer<T> x(n * c);
  const T* wte = tensor_data("wte").data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(wte + static_cast<std::size_t>(tokens[i]) * c, c, x.data() + i * c);
  }
  Buffer<T> ln(n * c), qkv(n * 3 * c), att(n * c), proj(n * c), fc(n * 4 * c), gelu(n * 4 * c);
  Buffer<T> q(n * dh), k(n * dh), val(n * dh);
  const int chunk = std::min(kEvalChunk, length);
  Buffer<T> probs(static_cast<std::size_t>(chunk) * n);
  std::vector<double> entropy(static_cast<std::size_t>(chunk));
  std::vector<double> hook_row;

  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    layernorm_forward<T>(ln.data(), nullptr, nullptr, x.data(), tensor_data(p + "ln1.w").data(),
                         tensor_data(p + "ln1.b").data(), length, c);
    linear_forward(qkv.data(), ln.data(), tensor_data(p + "attn.w_qkv").data(),
                   tensor_data(p + "attn.b_qkv").data(), length, c, 3 * c);
    for (int hd = 0; hd < h; ++hd) {
      for (int t = 0; t < length; ++t) {
        const T* src = qkv.data() + static_cast<std::size_t>(t) * 3 * c + hd * dh;
        const auto dst = static_cast<std::size_t>(t) * dh;
        if (cfg_.encoding.rotates()) {
          const std::size_t tb = (static_cast<std::size_t>(hd) * n + t) * half;
          rotate(q.data() + dst, src, tab.cos.data() + tb, tab.sin.data() + tb, half);
          rotate(k.data() + dst, src + c, tab.cos.data() + tb, tab.sin.data() + tb, half);
        } else {
          std::copy_n(src, dh, q.data() + dst);
          std::copy_n(src + c, dh, k.data() + dst);
        }
        std::copy_n(src + 2 * c, dh, val.data() + dst);
      }
      const T* temp = tab.temp.empty() ? nullptr : tab.temp.data() + hd * n;
      const T* bias = tab.bias.empty() ? nullptr : tab.bias.data() + hd * n;
      for (int t0 = 0; t0 < length; t0 += chunk) {
        const int t1 = std::min(length, t0 + chunk);
        const bool want_entropy = t1 > entropy_from;
        attend_rows(q.data() + static_cast<std::size_t>(t0) * dh, k.data(), val.data(), t0, t1, dh,
                    scale, temp, bias, static_cast<T*>(nullptr), probs.data(), t1,
                    att.data() + static_cast<std::size_t>(t0) * c + hd * dh, c,
                    want_entropy ? entropy.data() : nullptr);
        for (int t = std::max(t0, entropy_from); t < t1; ++t) {
          const double e = entropy[static_cast<std::size_t>(t - t0)];
          stats.entropy_sum += e;
          stats.entropy_rows += 1;
          stats.head_entropy_sum[static_cast<std::size_t>(hd)] += e;
        }
        if (hook) {
          for (int t = t0; t < t1; ++t) {
            const T* row = probs.data() + static_cast<std::size_t>(t - t0) * t1;
            hook_row.assign(row, row + t + 1);
            hook(l, hd, t, hook_row);
          }
        }
      }
    }
    linear_forward(proj.data(), att.data(), tensor_data(p + "attn.w_proj").data(),
                   tensor_data(p + "attn.b_proj").data(), length, c, c);
    for (std::size_t i = 0; i < n * c; ++i) x[i] += proj[i];
    layernorm_forward<T>(ln.data(), nullptr, nullptr, x.data(), tensor_data(p + "ln2.w").data(),
                         tensor_data(p + "ln2.b").data(), length, c);
    linear_forward(fc.data(), ln.data(), tensor_data(p + "mlp.w_fc").data(),
                   tensor_data(p + "mlp.b_fc").data(), length, c, 4 * c);
    gelu_forward(gelu.data(), fc.data(), fc.size());
    linear_forward(proj.data(), gelu.data(), tensor_data(p + "mlp.w_proj").data(),
                   tensor_data(p + "mlp.b_proj").data(), length, 4 * c, c);
    for (std::size_t i = 0; i < n * c; ++i) x[i] += proj[i];
  }
  stats.head_entropy_rows = static_cast<std::int64_t>(length - entropy_from) * cfg_.n_layers;

  if (targets.empty()) return stats;
  layernorm_forward<T>(ln.data(), nullptr, nullptr, x.data(), tensor_data("ln_f.w").data(),
                       tensor_data("ln_f.b").data(), length, c);
  const T* head = cfg_.tie_embeddings ? wte : tensor_data("lm_head").data();
  Buffer<T> logits(static_cast<std::size_t>(v));
  for (int t = 0; t < length; ++t) {
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> lg(logits.data(), v);
    lg.noalias() = cmat(head, v, c, c) *
                   Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(ln.data() + static_cast<std::size_t>(t) * c, c);
    const T mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(logits[j] - mx));
    stats.nll_sum += std::log(sum) - static_cast<double>(logits[targets[t]] - mx);
  }
  stats.n_tokens = length;
  return stats;
}

template <class T>
Transformer<T> swap_encoding(const Transformer<T>& model, const EncodingSpec& spec) {
  ModelConfig cfg = model.config();
  cfg.encoding = spec;
  Transformer<T> out(cfg);
  auto dst = out.parameters();
  const auto src = model.parameters();
  for (const auto& t : out.tensors()) {
    const TensorInfo* old = nullptr;
    for (const auto& o : model.tensors()) {
      if (o.name == t.name && o.shape == t.shape) old = &o;
    }
    if (!old) continue;
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(old->offset), t.size,
                dst.begin() + static_cast<std::ptrdiff_t>(t.offset));
  }
  return out;
}

template <class T>
std::vector<double> rescale_ape_alpha(Transformer<T>& model, std::span<const double> head_entropy,
                                      double target_entropy) {
  const int h = model.config().n_heads;
  if (head_entropy.size() != static_cast<std::size_t>(h)) {
    throw std::invalid_argument("need one entropy per head");
  }
  if (!(target_entropy > 0.0)) throw std::invalid_argument("target entropy must be positive");
  std::vector<double> factors;
  for (int i = 0; i < h; ++i) {
    const double f = std::clamp(head_entropy[static_cast<std::size_t>(i)] / target_entropy, 0.5, 2.0);
    factors.push_back(f);
    if (f == 1.0) continue;
    auto alpha = model.ape_head(i).alpha;
    for (double& a : alpha) a *= f;
    model.set_ape_alpha(i, alpha);
  }
  return factors;
}

template class Transformer<float>;
template class Transformer<double>;
template Transformer<float> swap_encoding(const Transformer<float>&, const EncodingSpec&);
template Transformer<double> swap_encoding(const Transformer<double>&, const EncodingSpec&);
template std::vector<double> rescale_ape_alpha(Transformer<float>&, std::span<const double>, double);
template std::vector<double> rescale_ape_alpha(Transformer<double>&, std::span<const double>, double);

}  // namespace gpelab::lm
