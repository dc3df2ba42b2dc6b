#include "gpelab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace gpelab::corpus {
namespace {

constexpr char32_t kReplacement = 0xFFFD;

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::string_view trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return s.substr(b, e - b);
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Re-encodes text so that it is valid UTF-8.
std::string sanitize(std::string_view text, std::int64_t* replaced) {
  std::int64_t count = 0;
  const std::u32string cps = decode_utf8(text, &count);
  if (replaced) *replaced += count;
  if (count == 0) return std::string(text);
  return encode_utf8(cps);
}

bool needs_escape(char32_t c) { return c < 0x20 || c == 0x7F || c == 0x85 || c == 0x2028 || c == 0x2029; }

// Unbiased draw from [0, bound) using rejection on the raw 64-bit stream, so
// the sequence does not depend on the standard library's distributions.
std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

}  // namespace

std::u32string decode_utf8(std::string_view text, std::int64_t* replaced) {
  std::u32string out;
  out.reserve(text.size());
  std::int64_t bad = 0;
  std::size_t i = 0;
  const auto byte = [&](std::size_t j) { return static_cast<unsigned char>(text[j]); };
  while (i < text.size()) {
    const unsigned char c = byte(i);
    int len = 0;
    char32_t cp = 0;
    char32_t min = 0;
    if (c < 0x80) {
      out.push_back(c);
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
      min = 0x80;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
      min = 0x800;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
      min = 0x10000;
    }
    bool ok = len > 0 && i + static_cast<std::size_t>(len) <= text.size();
    for (int j = 1; ok && j < len; ++j) {
      const unsigned char cc = byte(i + static_cast<std::size_t>(j));
      if ((cc & 0xC0) != 0x80) {
        ok = false;
      } else {
        cp = (cp << 6) | (cc & 0x3F);
      }
    }
    if (ok && (cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF))) ok = false;
    if (ok) {
      out.push_back(cp);
      i += static_cast<std::size_t>(len);
    } else {
      out.push_back(kReplacement);
      ++bad;
      ++i;
    }
  }
  if (replaced) *replaced = bad;
  return out;
}

std::string encode_utf8(std::u32string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char32_t c : text) append_utf8(out, c);
  return out;
}

IngestResult split_documents(std::string_view text, std::string_view separator) {
  IngestResult result;
  const std::string clean = sanitize(text, &result.replaced_sequences);
  const std::string_view all(clean);
  if (separator.empty() || all.find(separator) == std::string_view::npos) {
    if (!trim(all).empty()) result.documents.emplace_back(all);
    return result;
  }
  std::size_t pos = 0;
  while (pos <= all.size()) {
    const std::size_t next = all.find(separator, pos);
    const std::size_t end = next == std::string_view::npos ? all.size() : next;
    const std::string_view piece = trim(all.substr(pos, end - pos));
    if (!piece.empty()) result.documents.emplace_back(piece);
    if (next == std::string_view::npos) break;
    pos = next + separator.size();
  }
  return result;
}

IngestResult ingest(const std::filesystem::path& path, std::string_view separator) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus file: " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw std::runtime_error("error while reading corpus file: " + path.string());
  return split_documents(text, separator);
}

Vocab::Vocab(std::vector<char32_t> symbols) : symbols_(std::move(symbols)) {
  std::sort(symbols_.begin(), symbols_.end());
  symbols_.erase(std::unique(symbols_.begin(), symbols_.end()), symbols_.end());
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    index_.emplace(symbols_[i], static_cast<TokenId>(i + 1));
  }
}

TokenId Vocab::id(char32_t symbol) const {
  const auto it = index_.find(symbol);
  return it == index_.end() ? kUnknown : it->second;
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  const std::u32string cps = decode_utf8(text);
  std::vector<TokenId> ids;
  ids.reserve(cps.size());
  for (char32_t c : cps) ids.push_back(id(c));
  return ids;
}

std::string Vocab::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (TokenId t : ids) {
    if (t < 0 || static_cast<std::size_t>(t) >= size()) {
      throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary");
    }
    append_utf8(out, t == kUnknown ? kReplacement : symbols_[static_cast<std::size_t>(t - 1)]);
  }
  return out;
}

std::string Vocab::serialize() const {
  std::string out = "<unk>\n";
  for (char32_t c : symbols_) {
    switch (c) {
      case U'\n': out += "\\n"; break;
      case U'\t': out += "\\t"; break;
      case U'\r': out += "\\r"; break;
      case U'\\': out += "\\\\"; break;
      default:
        if (needs_escape(c)) {
          char buf[16];
          std::snprintf(buf, sizeof(buf), "\\u{%04X}", static_cast<unsigned>(c));
          out += buf;
        } else {
          append_utf8(out, c);
        }
    }
    out.push_back('\n');
  }
  return out;
}

Vocab Vocab::deserialize(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::size_t end = nl == std::string_view::npos ? text.size() : nl;
    lines.push_back(text.substr(pos, end - pos));
    pos = end + 1;
  }
  if (lines.empty() || lines[0] != "<unk>") {
    throw std::invalid_argument("vocab file must start with <unk>");
  }
  std::vector<char32_t> symbols;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string_view line = lines[i];
    char32_t c = 0;
    if (line.size() >= 2 && line[0] == '\\') {
      if (line == "\\n") {
        c = U'\n';
      } else if (line == "\\t") {
        c = U'\t';
      } else if (line == "\\r") {
        c = U'\r';
      } else if (line == "\\\\") {
        c = U'\\';
      } else if (line.size() > 4 && line.substr(0, 3) == "\\u{" && line.back() == '}') {
        c = static_cast<char32_t>(std::stoul(std::string(line.substr(3, line.size() - 4)), nullptr, 16));
      } else {
        throw std::invalid_argument("bad escape in vocab line " + std::to_string(i));
      }
    } else {
      std::int64_t bad = 0;
      const std::u32string cps = decode_utf8(line, &bad);
      if (cps.size() != 1 || bad != 0) {
        throw std::invalid_argument("vocab line " + std::to_string(i) + " is not one symbol");
      }
      c = cps[0];
    }
    if (!symbols.empty() && c <= symbols.back()) {
      throw std::invalid_argument("vocab symbols must be strictly increasing");
    }
    symbols.push_back(c);
  }
  return Vocab(std::move(symbols));
}

Vocab build_vocab(const std::vector<std::string>& docs) {
  std::set<char32_t> seen;
  for (const auto& d : docs) {
    for (char32_t c : decode_utf8(d)) seen.insert(c);
  }
  return Vocab(std::vector<char32_t>(seen.begin(), seen.end()));
}

std::int64_t Corpus::total_tokens() const {
  std::int64_t n = 0;
  for (const auto& d : documents) n += static_cast<std::int64_t>(d.size());
  return n;
}

Corpus Corpus::prefix_fraction(double fraction) const {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("corpus fraction must be in (0, 1]");
  }
  auto budget = static_cast<std::int64_t>(std::ceil(fraction * static_cast<double>(total_tokens())));
  Corpus out{{}, vocab, split, provenance};
  for (const auto& d : documents) {
    if (budget <= 0) break;
    const auto take = std::min<std::int64_t>(budget, static_cast<std::int64_t>(d.size()));
    out.documents.emplace_back(d.begin(), d.begin() + take);
    budget -= take;
  }
  return out;
}

Corpus make_corpus(const std::vector<std::string>& docs, std::shared_ptr<const Vocab> vocab,
                   Split split, std::string provenance) {
  if (!vocab) throw std::invalid_argument("corpus needs a vocabulary");
  Corpus c{{}, vocab, split, std::move(provenance)};
  c.documents.reserve(docs.size());
  for (const auto& d : docs) c.documents.push_back(vocab->encode(d));
  return c;
}

TrainValSplit split_train_val(const std::vector<std::string>& docs,
                              std::shared_ptr<const Vocab> vocab, double val_fraction,
                              const std::string& provenance) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("validation fraction must be in (0, 1)");
  }
  if (docs.empty()) throw std::invalid_argument("cannot split an empty corpus");
  std::vector<std::string> train;
  std::vector<std::string> val;
  if (docs.size() == 1) {
    const std::u32string cps = decode_utf8(docs[0]);
    const auto cut = static_cast<std::size_t>(
        std::floor((1.0 - val_fraction) * static_cast<double>(cps.size())));
    train.push_back(encode_utf8(std::u32string_view(cps).substr(0, cut)));
    val.push_back(encode_utf8(std::u32string_view(cps).substr(cut)));
  } else {
    auto n_val = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(docs.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, docs.size() - 1);
    train.assign(docs.begin(), docs.end() - static_cast<std::ptrdiff_t>(n_val));
    val.assign(docs.end() - static_cast<std::ptrdiff_t>(n_val), docs.end());
  }
  return {make_corpus(train, vocab, Split::kTrain, provenance),
          make_corpus(val, vocab, Split::kVal, provenance)};
}

std::vector<LengthBucket> default_buckets() {
  return {{"0-5k", 0, 5000}, {"5k-10k", 5000, 10000}};
}

std::int64_t word_count(std::string_view text) {
  std::int64_t n = 0;
  bool in_word = false;
  for (char c : text) {
    if (is_space(c)) {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++n;
    }
  }
  return n;
}

BucketAssignment bucket_by_length(const std::vector<std::string>& docs,
                                  const std::vector<LengthBucket>& buckets) {
  std::vector<LengthBucket> sorted = buckets;
  for (const auto& b : sorted) {
    if (b.min_words >= b.max_words || b.min_words < 0) {
      throw std::invalid_argument("bucket " + b.name + " needs 0 <= min < max");
    }
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const LengthBucket& a, const LengthBucket& b) { return a.min_words < b.min_words; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i].min_words < sorted[i - 1].max_words) {
      throw std::invalid_argument("buckets " + sorted[i - 1].name + " and " + sorted[i].name +
                                  " overlap");
    }
    if (sorted[i].name == sorted[i - 1].name) throw std::invalid_argument("duplicate bucket name");
  }

  BucketAssignment out;
  for (const auto& b : sorted) out.members[b.name];
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const std::int64_t w = word_count(docs[i]);
    out.word_counts.push_back(w);
    std::string name;
    for (std::size_t j = 0; j < sorted.size(); ++j) {
      const auto& b = sorted[j];
      const bool lower_ok = w > b.min_words || (j == 0 && w == b.min_words);
      if (lower_ok && w <= b.max_words) {
        name = b.name;
        break;
      }
    }
    if (name.empty()) {
      ++out.dropped;
    } else {
      out.members[name].push_back(i);
    }
    out.bucket_of.push_back(name);
  }
  return out;
}

std::string bucket_manifest_csv(const BucketAssignment& assignment) {
  std::ostringstream os;
  os << "doc_id,word_count,bucket\n";
  for (std::size_t i = 0; i < assignment.word_counts.size(); ++i) {
    os << i << ',' << assignment.word_counts[i] << ',' << assignment.bucket_of[i] << '\n';
  }
  return os.str();
}

BatchSampler::BatchSampler(const Corpus& corpus, int context, int batch_size, std::uint64_t seed,
                           bool strict)
    : corpus_(&corpus), context_(context), batch_size_(batch_size), strict_(strict), rng_(seed) {
  if (context <= 0 || batch_size <= 0) {
    throw std::invalid_argument("context and batch size must be positive");
  }
  const auto need = static_cast<std::int64_t>(context) + 1;
  if (strict_) {
    std::int64_t acc = 0;
    for (const auto& d : corpus.documents) {
      acc += std::max<std::int64_t>(0, static_cast<std::int64_t>(d.size()) - need + 1);
      cumulative_.push_back(acc);
    }
    total_windows_ = acc;
  } else {
    for (const auto& d : corpus.documents) stream_.insert(stream_.end(), d.begin(), d.end());
    total_windows_ = std::max<std::int64_t>(0, static_cast<std::int64_t>(stream_.size()) - need + 1);
  }
  if (total_windows_ == 0) {
    throw std::invalid_argument("corpus has no window of " + std::to_string(need) + " tokens");
  }
}

Batch BatchSampler::next() {
  Batch b;
  b.batch_size = batch_size_;
  b.context = context_;
  const auto ctx = static_cast<std::size_t>(context_);
  b.inputs.reserve(ctx * static_cast<std::size_t>(batch_size_));
  b.targets.reserve(ctx * static_cast<std::size_t>(batch_size_));
  for (int r = 0; r < batch_size_; ++r) {
    const auto w = static_cast<std::int64_t>(bounded(rng_, static_cast<std::uint64_t>(total_windows_)));
    const TokenId* src;
    if (strict_) {
      const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), w);
      const auto doc = static_cast<std::size_t>(it - cumulative_.begin());
      const std::int64_t before = doc == 0 ? 0 : cumulative_[doc - 1];
      src = corpus_->documents[doc].data() + (w - before);
    } else {
      src = stream_.data() + w;
    }
    b.inputs.insert(b.inputs.end(), src, src + ctx);
    b.targets.insert(b.targets.end(), src + 1, src + ctx + 1);
  }
  return b;
}

std::string BatchSampler::rng_state() const {
  std::ostringstream os;
  os << rng_;
  return os.str();
}

void BatchSampler::set_rng_state(const std::string& state) {
  std::istringstream is(state);
  is >> rng_;
  if (!is) throw std::invalid_argument("malformed sampler state");
}

}  // namespace gpelab::corpus
