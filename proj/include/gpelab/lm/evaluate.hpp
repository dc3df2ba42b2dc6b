#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gpelab/corpus.hpp"
#include "gpelab/lm/model.hpp"

namespace gpelab::lm {

struct EvalOptions {
  std::vector<int> prompt_lengths;
  std::uint64_t seed = 1234;
  // Approximate number of predicted tokens per prompt length; the window
  // count is ceil(token_budget / P), at least one.
  std::int64_t token_budget = 8192;
  // Entropy is averaged over the last `entropy_tail` fraction of queries.
  double entropy_tail = 0.25;
};

struct EvalRecord {
  std::string encoding;
  int train_context = 0;
  int prompt_length = 0;
  double perplexity = 0.0;
  double mean_attention_entropy = 0.0;
  std::int64_t n_eval_tokens = 0;
  std::string warning;  // non-empty when the length was skipped

  bool skipped() const { return !warning.empty(); }
};

// First query index included in the entropy average for a prompt of length P.
int entropy_start(int prompt_length, double entropy_tail);

// Powers of two from train_context up to 16384, keeping only lengths for
// which some document holds P+1 tokens.
std::vector<int> default_prompt_lengths(int train_context, const corpus::Corpus& corpus);

// Windows of P+1 tokens inside single documents, chosen by a seeded sampler
// that depends only on (seed, P) and the corpus, so every model sees the same
// tokens. Each window predicts all P next tokens.
corpus::Batch eval_windows(const corpus::Corpus& corpus, int prompt_length, std::uint64_t seed,
                           std::int64_t token_budget);

// Perplexity and attention entropy per prompt length, sorted ascending.
// Lengths with no long-enough document yield a skipped record with a warning.
std::vector<EvalRecord> evaluate_perplexity(const Transformer<float>& model,
                                            const corpus::Corpus& corpus,
                                            const EvalOptions& options);

struct EntropyProbe {
  int prompt_length = 0;
  double mean_entropy = 0.0;
  std::vector<double> head_entropy;  // per head, averaged over layers
};

EntropyProbe attention_entropy_probe(const Transformer<float>& model, const corpus::Corpus& corpus,
                                     int prompt_length, const EvalOptions& options);

// Measures per-head entropy at `prompt_length` and rescales APE alpha by
// measured/target (clamped to [0.5, 2] per call). Returns the factors.
// Throws std::invalid_argument for an empty probe corpus.
std::vector<double> ape_entropy_recalibration(Transformer<float>& model,
                                              const corpus::Corpus& probe, int prompt_length,
                                              double target_entropy, const EvalOptions& options);

}  // namespace gpelab::lm
