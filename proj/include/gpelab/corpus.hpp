#pragma once

// Text ingestion, character-level tokenization, length buckets, readability
// metrics and next-token batch sampling.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace gpelab::corpus {

using TokenId = std::int32_t;

inline constexpr std::string_view kDefaultSeparator = "<|endoftext|>";

struct IngestResult {
  std::vector<std::string> documents;
  // Number of invalid UTF-8 sequences replaced with U+FFFD.
  std::int64_t replaced_sequences = 0;
};

// Splits on `separator` when it occurs in the text (pieces are trimmed and
// empty pieces dropped); otherwise the whole text is one document.
IngestResult split_documents(std::string_view text,
                             std::string_view separator = kDefaultSeparator);

// Reads a UTF-8 file and splits it. Throws std::runtime_error if unreadable.
IngestResult ingest(const std::filesystem::path& path,
                    std::string_view separator = kDefaultSeparator);

// Decodes UTF-8 into code points; invalid sequences become U+FFFD and are
// counted in `replaced`.
std::u32string decode_utf8(std::string_view text, std::int64_t* replaced = nullptr);
std::string encode_utf8(std::u32string_view text);

// Character vocabulary: id 0 is reserved for unknown symbols, ids 1.. are the
// sorted unique code points.
class Vocab {
 public:
  static constexpr TokenId kUnknown = 0;

  Vocab() = default;
  explicit Vocab(std::vector<char32_t> symbols);

  std::size_t size() const { return symbols_.size() + 1; }
  const std::vector<char32_t>& symbols() const { return symbols_; }

  TokenId id(char32_t symbol) const;
  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(const std::vector<TokenId>& ids) const;

  // One symbol per line, line i holding id i. Line 0 is `<unk>`; symbols are
  // escaped as \n, \t, \r, \\ and \u{XXXX} for other control characters.
  std::string serialize() const;
  static Vocab deserialize(std::string_view text);

  bool operator==(const Vocab&) const = default;

 private:
  std::vector<char32_t> symbols_;
  std::map<char32_t, TokenId> index_;
};

Vocab build_vocab(const std::vector<std::string>& docs);

enum class Split { kTrain, kVal };

struct Corpus {
  std::vector<std::vector<TokenId>> documents;
  std::shared_ptr<const Vocab> vocab;
  Split split = Split::kTrain;
  std::string provenance;

  std::int64_t total_tokens() const;
  // Leading prefix holding `fraction` of the tokens, cut inside the last
  // document if needed.
  Corpus prefix_fraction(double fraction) const;
};

Corpus make_corpus(const std::vector<std::string>& docs, std::shared_ptr<const Vocab> vocab,
                   Split split, std::string provenance = {});

struct TrainValSplit {
  Corpus train;
  Corpus val;
};

// The last ceil(val_fraction * N) documents form the validation split. With a
// single document the text itself is cut at the same fraction.
TrainValSplit split_train_val(const std::vector<std::string>& docs,
                              std::shared_ptr<const Vocab> vocab, double val_fraction,
                              const std::string& provenance = {});

struct LengthBucket {
  std::string name;
  std::int64_t min_words = 0;
  std::int64_t max_words = 0;
};

// {"0-5k", 0, 5000}, {"5k-10k", 5000, 10000}.
std::vector<LengthBucket> default_buckets();

std::int64_t word_count(std::string_view text);

struct BucketAssignment {
  // Bucket name -> indices into the input documents.
  std::map<std::string, std::vector<std::size_t>> members;
  std::vector<std::int64_t> word_counts;
  // Bucket name per document, empty when dropped.
  std::vector<std::string> bucket_of;
  std::int64_t dropped = 0;
};

// A document belongs to the bucket with min < words <= max (the first bucket
// also takes min itself). Buckets must be non-overlapping.
BucketAssignment bucket_by_length(const std::vector<std::string>& docs,
                                  const std::vector<LengthBucket>& buckets);

// `doc_id,word_count,bucket` rows; dropped documents carry an empty bucket.
std::string bucket_manifest_csv(const BucketAssignment& assignment);

struct ReadabilityScores {
  double fre = 0.0;
  double gunning_fog = 0.0;
  double ari = 0.0;
  std::int64_t sentences = 0;
  std::int64_t words = 0;
  std::int64_t syllables = 0;
  std::int64_t complex_words = 0;
  std::int64_t characters = 0;
};

// Vowel-group syllable estimate (aeiouy groups, trailing silent e removed,
// at least one per word).
int count_syllables(std::string_view word);

// Flesch reading ease, Gunning fog and the automated readability index.
// Throws std::invalid_argument for text without words.
ReadabilityScores readability(std::string_view text);

struct Batch {
  int batch_size = 0;
  int context = 0;
  std::vector<TokenId> inputs;   // batch_size * context, row-major
  std::vector<TokenId> targets;  // inputs shifted by one in the source stream
};

// Uniform random windows of length context+1. In strict mode a window never
// crosses a document boundary; otherwise documents are treated as one stream.
// The corpus must outlive the sampler.
class BatchSampler {
 public:
  BatchSampler(const Corpus& corpus, int context, int batch_size, std::uint64_t seed,
               bool strict = true);

  Batch next();

  std::string rng_state() const;
  void set_rng_state(const std::string& state);

 private:
  const Corpus* corpus_;
  int context_;
  int batch_size_;
  bool strict_;
  std::vector<TokenId> stream_;
  std::vector<std::int64_t> cumulative_;  // cumulative window counts per doc
  std::int64_t total_windows_ = 0;
  std::mt19937_64 rng_;
};

}  // namespace gpelab::corpus
