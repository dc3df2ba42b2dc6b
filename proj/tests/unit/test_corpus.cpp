#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "gtest/gtest.h"
#include "gpelab/corpus.hpp"

namespace gpelab::corpus {
namespace {

namespace fs = std::filesystem;

fs::path write_temp(const std::string& name, const std::string& content) {
  const fs::path p = fs::temp_directory_path() / ("gpelab_test_" + name);
  std::ofstream(p, std::ios::binary) << content;
  return p;
}

std::string words(int n) {
  std::string s;
  for (int i = 0; i < n; ++i) s += (i ? " w" : "w");
  return s;
}

TEST(Ingest, EmptyFileHasNoDocuments) {
  const auto p = write_temp("empty.txt", "");
  EXPECT_TRUE(ingest(p).documents.empty());
}

TEST(Ingest, SentinelSeparatedStories) {
  const auto p = write_temp("two.txt", "Once upon a time.\n<|endoftext|>\nThe end.\n<|endoftext|>\n");
  const auto r = ingest(p);
  ASSERT_EQ(r.documents.size(), 2u);
  EXPECT_EQ(r.documents[0], "Once upon a time.");
  EXPECT_EQ(r.documents[1], "The end.");
  EXPECT_EQ(r.replaced_sequences, 0);
}

TEST(Ingest, WholeFilePreservesAsciiBytes) {
  const std::string text = "line one\n\nline two\n  trailing  \n";
  const auto r = ingest(write_temp("ascii.txt", text));
  ASSERT_EQ(r.documents.size(), 1u);
  EXPECT_EQ(r.documents[0].size(), text.size());
  EXPECT_EQ(r.documents[0], text);
}

TEST(Ingest, CustomSeparator) {
  const auto r = split_documents("a\n===\nb\n===\n\n===\nc", "===");
  EXPECT_EQ(r.documents, (std::vector<std::string>{"a", "b", "c"}));
}

TEST(Ingest, InvalidUtf8IsReplacedAndCounted) {
  const std::string text = std::string("ok ") + '\xFF' + " and " + '\xC3' + "(";
  const auto r = split_documents(text);
  ASSERT_EQ(r.documents.size(), 1u);
  EXPECT_EQ(r.replaced_sequences, 2);
  EXPECT_EQ(r.documents[0], "ok \xEF\xBF\xBD and \xEF\xBF\xBD(");
}

TEST(Ingest, UnreadableFileThrows) {
  EXPECT_THROW(ingest("/nonexistent/dir/corpus.txt"), std::runtime_error);
}

TEST(Utf8, RoundTripMultibyte) {
  const std::string s = "na\xC3\xAFve \xE2\x82\xAC \xF0\x9F\x98\x80";
  std::int64_t bad = -1;
  const auto cps = decode_utf8(s, &bad);
  EXPECT_EQ(bad, 0);
  EXPECT_EQ(cps.size(), 9u);
  EXPECT_EQ(encode_utf8(cps), s);
  // Overlong encoding of '/' and a lone surrogate are rejected.
  decode_utf8("\xC0\xAF", &bad);
  EXPECT_EQ(bad, 2);
  decode_utf8("\xED\xA0\x80", &bad);
  EXPECT_EQ(bad, 3);
}

TEST(Vocab, ThreeSymbolsPlusReserved) {
  const Vocab v = build_vocab({"abca"});
  EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(v.id(U'a'), 1);
  EXPECT_EQ(v.id(U'b'), 2);
  EXPECT_EQ(v.id(U'c'), 3);
}

TEST(Vocab, UnionOfDisjointDocs) {
  const Vocab v = build_vocab({"ab", "xy"});
  EXPECT_EQ(v.size(), 5u);
  EXPECT_EQ(v.symbols(), (std::vector<char32_t>{U'a', U'b', U'x', U'y'}));
}

TEST(Vocab, StableIds) {
  EXPECT_EQ(build_vocab({"hello world", "zz"}), build_vocab({"hello world", "zz"}));
  EXPECT_EQ(build_vocab({"ba"}), build_vocab({"ab"}));
}

TEST(Vocab, EncodeDecode) {
  const Vocab v = build_vocab({"hello"});
  EXPECT_EQ(v.decode(v.encode("hello")), "hello");
  EXPECT_EQ(v.encode("hxl"), (std::vector<TokenId>{v.id(U'h'), Vocab::kUnknown, v.id(U'l')}));
  EXPECT_TRUE(v.encode("").empty());
  EXPECT_EQ(v.decode({}), "");
  EXPECT_THROW(v.decode({99}), std::out_of_range);
}

TEST(Vocab, SerializeRoundTrip) {
  const Vocab v = build_vocab({"a b\n\tc\\\r\x01\xC3\xA9<unk>"});
  const std::string file = v.serialize();
  EXPECT_EQ(file.substr(0, 6), "<unk>\n");
  EXPECT_NE(file.find("\\u{0001}\n"), std::string::npos);
  EXPECT_NE(file.find("\\n\n"), std::string::npos);
  EXPECT_EQ(Vocab::deserialize(file), v);
  EXPECT_THROW(Vocab::deserialize("a\nb\n"), std::invalid_argument);
  EXPECT_THROW(Vocab::deserialize("<unk>\nab\n"), std::invalid_argument);
}

TEST(Corpus, IdsBelowVocabAndRoundTrip) {
  const std::vector<std::string> docs{"to be or not", "that is the question"};
  auto vocab = std::make_shared<const Vocab>(build_vocab(docs));
  const Corpus c = make_corpus(docs, vocab, Split::kTrain, "mem");
  ASSERT_EQ(c.documents.size(), 2u);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    for (TokenId t : c.documents[i]) EXPECT_LT(static_cast<std::size_t>(t), vocab->size());
    EXPECT_EQ(vocab->decode(c.documents[i]), docs[i]);
  }
  EXPECT_EQ(c.total_tokens(), 12 + 20);
}

TEST(Corpus, PrefixFraction) {
  const std::vector<std::string> docs{"aaaaaaaaaa", "bbbbbbbbbb"};
  auto vocab = std::make_shared<const Vocab>(build_vocab(docs));
  const Corpus c = make_corpus(docs, vocab, Split::kTrain);
  const Corpus p = c.prefix_fraction(0.25);
  ASSERT_EQ(p.documents.size(), 1u);
  EXPECT_EQ(p.total_tokens(), 5);
  EXPECT_EQ(c.prefix_fraction(0.6).total_tokens(), 12);
  EXPECT_EQ(c.prefix_fraction(1.0).documents, c.documents);
  EXPECT_THROW(c.prefix_fraction(0.0), std::invalid_argument);
}

TEST(Corpus, TrainValSplit) {
  std::vector<std::string> docs;
  for (int i = 0; i < 10; ++i) docs.push_back("doc" + std::to_string(i));
  auto vocab = std::make_shared<const Vocab>(build_vocab(docs));
  const auto s = split_train_val(docs, vocab, 0.15);
  EXPECT_EQ(s.train.documents.size(), 8u);
  EXPECT_EQ(s.val.documents.size(), 2u);
  EXPECT_EQ(vocab->decode(s.val.documents[0]), "doc8");
  EXPECT_EQ(s.val.split, Split::kVal);

  const auto single = split_train_val({"0123456789"}, vocab, 0.3);
  EXPECT_EQ(vocab->decode(single.train.documents[0]), "0123456");
  EXPECT_EQ(vocab->decode(single.val.documents[0]), "789");
}

TEST(Buckets, Membership) {
  const std::vector<std::string> docs{words(100), words(7000), words(5000), words(12000),
                                      words(5001), ""};
  const auto a = bucket_by_length(docs, default_buckets());
  EXPECT_EQ(a.bucket_of, (std::vector<std::string>{"0-5k", "5k-10k", "0-5k", "", "5k-10k", "0-5k"}));
  EXPECT_EQ(a.dropped, 1);
  EXPECT_EQ(a.word_counts[1], 7000);
  std::size_t retained = 0;
  std::set<std::size_t> seen;
  for (const auto& [name, idx] : a.members) {
    retained += idx.size();
    for (auto i : idx) EXPECT_TRUE(seen.insert(i).second);
  }
  EXPECT_EQ(retained + static_cast<std::size_t>(a.dropped), docs.size());
}

TEST(Buckets, RejectsOverlapAndEmptyRange) {
  EXPECT_THROW(bucket_by_length({}, {{"a", 0, 10}, {"b", 5, 20}}), std::invalid_argument);
  EXPECT_THROW(bucket_by_length({}, {{"a", 10, 10}}), std::invalid_argument);
}

TEST(Buckets, ManifestCsv) {
  const auto a = bucket_by_length({words(3), words(6000), words(20000)}, default_buckets());
  EXPECT_EQ(bucket_manifest_csv(a),
            "doc_id,word_count,bucket\n0,3,0-5k\n1,6000,5k-10k\n2,20000,\n");
}

TEST(WordCount, Whitespace) {
  EXPECT_EQ(word_count(""), 0);
  EXPECT_EQ(word_count("  a\tb\n\nc  "), 3);
}

TEST(Syllables, Heuristic) {
  EXPECT_EQ(count_syllables("the"), 1);
  EXPECT_EQ(count_syllables("cat"), 1);
  EXPECT_EQ(count_syllables("make"), 1);
  EXPECT_EQ(count_syllables("table"), 2);
  EXPECT_EQ(count_syllables("beautiful"), 3);
  EXPECT_EQ(count_syllables("rhythm"), 1);
  EXPECT_EQ(count_syllables("Queue,"), 1);
  EXPECT_EQ(count_syllables("123"), 1);
}

TEST(Readability, TheCatSat) {
  const auto r = readability("The cat sat.");
  EXPECT_EQ(r.words, 3);
  EXPECT_EQ(r.sentences, 1);
  EXPECT_EQ(r.syllables, 3);
  // 206.835 - 1.015 * 3 - 84.6 * 1
  EXPECT_NEAR(r.fre, 119.19, 1e-9);
  EXPECT_NEAR(r.gunning_fog, 0.4 * 3.0, 1e-12);
  // 9 letters over 3 words.
  EXPECT_NEAR(r.ari, 4.71 * 3.0 + 0.5 * 3.0 - 21.43, 1e-12);
}

TEST(Readability, SingleSyllableCorpusHasNoComplexWords) {
  const auto r = readability("The dog ran. A cat sat! Did it nap? Yes.");
  EXPECT_EQ(r.complex_words, 0);
  EXPECT_EQ(r.sentences, 4);
  const double wps = 10.0 / 4.0;
  EXPECT_NEAR(r.gunning_fog, 0.4 * wps, 1e-12);
}

TEST(Readability, ComplexWordsAndEllipsis) {
  const auto r = readability("Beautiful elephants wander... Really.");
  EXPECT_EQ(r.sentences, 2);
  EXPECT_EQ(r.words, 4);
  EXPECT_EQ(r.complex_words, 2);
}

TEST(Readability, RejectsTextWithoutWords) {
  EXPECT_THROW(readability(""), std::invalid_argument);
  EXPECT_THROW(readability(" ... !!"), std::invalid_argument);
}

class SamplerTest : public ::testing::Test {
 protected:
  void SetUp() override {
    docs_ = {"abcdefghij", "klm", "nopqrstuvwxyz"};
    vocab_ = std::make_shared<const Vocab>(build_vocab(docs_));
    corpus_ = make_corpus(docs_, vocab_, Split::kTrain);
  }
  std::vector<std::string> docs_;
  std::shared_ptr<const Vocab> vocab_;
  Corpus corpus_;
};

TEST_F(SamplerTest, ShiftAlignment) {
  BatchSampler s(corpus_, 4, 8, 1);
  const Batch b = s.next();
  ASSERT_EQ(b.inputs.size(), 32u);
  ASSERT_EQ(b.targets.size(), 32u);
  for (int r = 0; r < 8; ++r) {
    for (int t = 0; t + 1 < 4; ++t) EXPECT_EQ(b.targets[r * 4 + t], b.inputs[r * 4 + t + 1]);
    // Consecutive letters in every source document.
    EXPECT_EQ(b.targets[r * 4 + 3], b.inputs[r * 4 + 3] + 1);
  }
}

TEST_F(SamplerTest, SameSeedSameStream) {
  BatchSampler a(corpus_, 4, 3, 99);
  BatchSampler b(corpus_, 4, 3, 99);
  BatchSampler c(corpus_, 4, 3, 100);
  bool differs = false;
  for (int i = 0; i < 20; ++i) {
    const Batch x = a.next();
    EXPECT_EQ(x.inputs, b.next().inputs);
    differs |= x.inputs != c.next().inputs;
  }
  EXPECT_TRUE(differs);
}

TEST_F(SamplerTest, StrictWindowsStayInsideDocuments) {
  BatchSampler s(corpus_, 4, 16, 5);
  std::set<TokenId> starts;
  for (int i = 0; i < 200; ++i) {
    const Batch b = s.next();
    for (int r = 0; r < 16; ++r) {
      const std::string w = vocab_->decode(
          std::vector<TokenId>(b.inputs.begin() + r * 4, b.inputs.begin() + r * 4 + 4));
      const bool inside = docs_[0].find(w) != std::string::npos ||
                          docs_[2].find(w) != std::string::npos;
      EXPECT_TRUE(inside) << w;
      starts.insert(b.inputs[r * 4]);
    }
  }
  // 6 windows in the first document, 9 in the third, none in "klm".
  EXPECT_EQ(starts.size(), 15u);
}

TEST_F(SamplerTest, LooseModeCrossesBoundaries) {
  // The documents spell the alphabet, so the joined stream has 26 - 4 windows.
  BatchSampler s(corpus_, 4, 16, 5, false);
  std::set<TokenId> starts;
  for (int i = 0; i < 200; ++i) {
    const Batch b = s.next();
    for (int r = 0; r < 16; ++r) starts.insert(b.inputs[r * 4]);
  }
  EXPECT_EQ(starts.size(), 22u);
  EXPECT_TRUE(starts.count(vocab_->id(U'k')));
}

TEST_F(SamplerTest, StateRestore) {
  BatchSampler s(corpus_, 3, 2, 7);
  s.next();
  const std::string state = s.rng_state();
  const Batch expected = s.next();
  BatchSampler t(corpus_, 3, 2, 12345);
  t.set_rng_state(state);
  EXPECT_EQ(t.next().inputs, expected.inputs);
}

TEST_F(SamplerTest, Errors) {
  EXPECT_THROW(BatchSampler(corpus_, 13, 1, 0), std::invalid_argument);
  EXPECT_THROW(BatchSampler(corpus_, 0, 1, 0), std::invalid_argument);
}

}  // namespace
}  // namespace gpelab::corpus
