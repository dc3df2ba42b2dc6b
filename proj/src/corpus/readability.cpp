#include <cctype>
#include <stdexcept>
#include <string>

#include "gpelab/corpus.hpp"

namespace gpelab::corpus {
namespace {

bool is_vowel(char c) {
  return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u' || c == 'y';
}

bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

// Letters and digits count as word characters; any non-ASCII byte that starts
// a code point is taken as a letter.
bool is_word_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  if (u >= 0x80) return (u & 0xC0) != 0x80;
  return std::isalnum(u) != 0;
}

}  // namespace

int count_syllables(std::string_view word) {
  std::string w;
  for (char c : word) {
    const auto u = static_cast<unsigned char>(c);
    if (u < 0x80 && std::isalpha(u)) w.push_back(static_cast<char>(std::tolower(u)));
  }
  if (w.empty()) return 1;
  int groups = 0;
  bool prev = false;
  for (char c : w) {
    const bool v = is_vowel(c);
    if (v && !prev) ++groups;
    prev = v;
  }
  // Silent trailing e ("make"), but keep consonant+le ("table").
  const std::size_t n = w.size();
  if (groups > 1 && w[n - 1] == 'e' && !is_vowel(w[n - 2]) &&
      !(w[n - 2] == 'l' && n >= 3 && !is_vowel(w[n - 3]))) {
    --groups;
  }
  return groups < 1 ? 1 : groups;
}

ReadabilityScores readability(std::string_view text) {
  ReadabilityScores r;
  bool open_sentence = false;  // words seen since the last terminator
  std::size_t i = 0;
  while (i < text.size()) {
    if (is_space(text[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    const std::string_view token = text.substr(i, j - i);
    std::int64_t chars = 0;
    for (char c : token) chars += is_word_char(c) ? 1 : 0;
    if (chars > 0) {
      ++r.words;
      r.characters += chars;
      const int syl = count_syllables(token);
      r.syllables += syl;
      if (syl >= 3) ++r.complex_words;
      open_sentence = true;
    }
    // A run of terminators ends at most one sentence.
    for (std::size_t k = 0; k < token.size(); ++k) {
      if (is_terminator(token[k]) && (k + 1 == token.size() || !is_terminator(token[k + 1]))) {
        if (open_sentence) {
          ++r.sentences;
          open_sentence = false;
        }
      }
    }
    i = j;
  }
  if (open_sentence) ++r.sentences;
  if (r.words == 0 || r.sentences == 0) {
    throw std::invalid_argument("readability needs at least one word and one sentence");
  }
  const double words = static_cast<double>(r.words);
  const double wps = words / static_cast<double>(r.sentences);
  r.fre = 206.835 - 1.015 * wps - 84.6 * (static_cast<double>(r.syllables) / words);
  r.gunning_fog = 0.4 * (wps + 100.0 * (static_cast<double>(r.complex_words) / words));
  r.ari = 4.71 * (static_cast<double>(r.characters) / words) + 0.5 * wps - 21.43;
  return r;
}

}  // namespace gpelab::corpus
