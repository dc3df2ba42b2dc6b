#include "gpelab/lm/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gpelab::lm {
namespace {

constexpr int kMaxPromptLength = 16384;

std::int64_t longest_document(const corpus::Corpus& corpus) {
  std::int64_t n = 0;
  for (const auto& d : corpus.documents) n = std::max<std::int64_t>(n, static_cast<std::int64_t>(d.size()));
  return n;
}

struct WindowStats {
  double nll_sum = 0.0;
  std::int64_t tokens = 0;
  double entropy_sum = 0.0;
  std::int64_t entropy_rows = 0;
  std::vector<double> head_sum;
  std::int64_t head_rows = 0;
};

WindowStats run_windows(const Transformer<float>& model, const corpus::Batch& windows,
                        int entropy_from, bool with_targets) {
  WindowStats w;
  w.head_sum.assign(static_cast<std::size_t>(model.config().n_heads), 0.0);
  const auto p = static_cast<std::size_t>(windows.context);
  for (int r = 0; r < windows.batch_size; ++r) {
    const std::span<const TokenId> in(windows.inputs.data() + r * p, p);
    const std::span<const TokenId> tg = with_targets
                                            ? std::span<const TokenId>(windows.targets.data() + r * p, p)
                                            : std::span<const TokenId>();
    const SequenceStats s = model.evaluate(in, tg, entropy_from);
    w.nll_sum += s.nll_sum;
    w.tokens += s.n_tokens;
    w.entropy_sum += s.entropy_sum;
    w.entropy_rows += s.entropy_rows;
    for (std::size_t h = 0; h < w.head_sum.size(); ++h) w.head_sum[h] += s.head_entropy_sum[h];
    w.head_rows += s.head_entropy_rows;
  }
  return w;
}

}  // namespace

int entropy_start(int prompt_length, double entropy_tail) {
  if (!(entropy_tail > 0.0 && entropy_tail <= 1.0)) {
    throw std::invalid_argument("entropy_tail must be in (0, 1]");
  }
  const int start = static_cast<int>(std::floor((1.0 - entropy_tail) * prompt_length));
  return std::clamp(start, 0, std::max(0, prompt_length - 1));
}

std::vector<int> default_prompt_lengths(int train_context, const corpus::Corpus& corpus) {
  const std::int64_t longest = longest_document(corpus);
  std::vector<int> out;
  for (int p = train_context; p <= kMaxPromptLength; p *= 2) {
    if (p + 1 <= longest) out.push_back(p);
  }
  return out;
}

corpus::Batch eval_windows(const corpus::Corpus& corpus, int prompt_length, std::uint64_t seed,
                           std::int64_t token_budget) {
  if (prompt_length < 1) throw std::invalid_argument("prompt length must be positive");
  const auto count = std::max<std::int64_t>(1, (token_budget + prompt_length - 1) / prompt_length);
  corpus::BatchSampler sampler(corpus, prompt_length, static_cast<int>(count),
                               derive_seed(seed, static_cast<std::uint64_t>(prompt_length)));
  return sampler.next();
}

std::vector<EvalRecord> evaluate_perplexity(const Transformer<float>& model,
                                            const corpus::Corpus& corpus,
                                            const EvalOptions& options) {
  std::vector<int> lengths = options.prompt_lengths;
  std::sort(lengths.begin(), lengths.end());
  lengths.erase(std::unique(lengths.begin(), lengths.end()), lengths.end());
  std::vector<EvalRecord> out;
  for (int p : lengths) {
    if (p < 2) throw std::invalid_argument("prompt lengths must be at least 2");
    EvalRecord rec;
    rec.encoding = to_string(model.config().encoding.kind);
    rec.train_context = model.config().train_context;
    rec.prompt_length = p;
    if (longest_document(corpus) < p + 1) {
      rec.perplexity = std::nan("");
      rec.mean_attention_entropy = std::nan("");
      rec.warning = "no document holds " + std::to_string(p + 1) + " tokens; length skipped";
      out.push_back(rec);
      continue;
    }
    const corpus::Batch windows = eval_windows(corpus, p, options.seed, options.token_budget);
    const WindowStats w = run_windows(model, windows, entropy_start(p, options.entropy_tail), true);
    rec.perplexity = std::exp(w.nll_sum / static_cast<double>(w.tokens));
    rec.mean_attention_entropy = w.entropy_sum / static_cast<double>(w.entropy_rows);
    rec.n_eval_tokens = w.tokens;
    out.push_back(rec);
  }
  return out;
}

EntropyProbe attention_entropy_probe(const Transformer<float>& model, const corpus::Corpus& corpus,
                                     int prompt_length, const EvalOptions& options) {
  if (corpus.documents.empty() || corpus.total_tokens() == 0) {
    throw std::invalid_argument("probe corpus is empty");
  }
  if (longest_document(corpus) < prompt_length + 1) {
    throw std::invalid_argument("probe corpus has no document of " +
                                std::to_string(prompt_length + 1) + " tokens");
  }
  const corpus::Batch windows = eval_windows(corpus, prompt_length, options.seed, options.token_budget);
  const WindowStats w =
      run_windows(model, windows, entropy_start(prompt_length, options.entropy_tail), false);
  EntropyProbe probe;
  probe.prompt_length = prompt_length;
  probe.mean_entropy = w.entropy_sum / static_cast<double>(w.entropy_rows);
  for (double s : w.head_sum) probe.head_entropy.push_back(s / static_cast<double>(w.head_rows));
  return probe;
}

std::vector<double> ape_entropy_recalibration(Transformer<float>& model,
                                              const corpus::Corpus& probe, int prompt_length,
                                              double target_entropy, const EvalOptions& options) {
  if (model.config().encoding.kind != PositionKind::kApe) {
    throw std::invalid_argument("entropy recalibration applies to APE models only");
  }
  const EntropyProbe measured = attention_entropy_probe(model, probe, prompt_length, options);
  return rescale_ape_alpha(model, measured.head_entropy, target_entropy);
}

}  // namespace gpelab::lm
