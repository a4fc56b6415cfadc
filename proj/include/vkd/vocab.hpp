#pragma once

#include <array>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vkd/rng.hpp"
#include "vkd/tensor.hpp"  // Source

namespace vkd {

// WordPiece-style subword vocabulary. Ids are dense and 0-based; the five
// special tokens always occupy ids 0..4 in the order below. Immutable after
// construction, so concurrent readers can share one instance.
struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr int kNumSpecials = 5;

  static const std::array<const char*, kNumSpecials>& special_strings();

  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> id_of;
  std::string continuation_prefix = "##";

  int size() const { return static_cast<int>(tokens.size()); }
  bool contains(const std::string& token) const { return id_of.count(token) != 0; }
  int lookup(const std::string& token) const;  // -1 when absent
};

// Token sequence where each entry remembers which vocabulary produced it.
// word_spans maps every original whitespace word to its [start,end) token
// range; entries within one span share a tag.
struct TaggedTokenSequence {
  struct Entry {
    int id;
    Source source;
  };
  std::vector<Entry> entries;
  std::vector<std::pair<int, int>> word_spans;

  int word_count() const { return static_cast<int>(word_spans.size()); }
};

// --- text utilities shared by the vocabulary trainer and corpus ingestion ---

// Splits a UTF-8 string into codepoint substrings; throws "encoding" on
// malformed input.
std::vector<std::string> utf8_codepoints(const std::string& text);

// Lowercases (ASCII), splits on whitespace, and breaks punctuation characters
// out as standalone words.
std::vector<std::string> normalize_line(const std::string& line);

// --- construction and segmentation ---

// Builds a vocabulary by frequency-ranked iterative pair merging over the
// whitespace words of `lines`, ties broken lexicographically. Every corpus
// character enters both as a word-initial and as a continuation token, so
// later segmentation can only fail on characters unseen here.
Vocabulary train_wordpiece(const std::vector<std::string>& lines, int target_size,
                           const std::string& continuation_prefix = "##");

// Greedy longest-match-first segmentation. Falls back to exactly {UNK} when
// any piece of the word cannot be matched.
std::vector<int> segment_word(const Vocabulary& vocab, const std::string& word);

// Concatenated segment_word outputs, all tagged with `role`.
TaggedTokenSequence segment_sequence(const Vocabulary& vocab, Source role,
                                     const std::vector<std::string>& words);

// Per-word vocabulary mixing: each word is independently segmented with the
// student vocabulary with probability p_dt, otherwise with the teacher's.
TaggedTokenSequence dual_segment(const Vocabulary& teacher_vocab, const Vocabulary& student_vocab,
                                 const std::vector<std::string>& words, double p_dt, Rng& rng);

// |content(a) ∩ content(b)| / |content(a)|, specials excluded on both sides.
double vocab_overlap(const Vocabulary& a, const Vocabulary& b);

// Reconstructs the word covered by [begin,end) entry ids (continuation
// prefixes stripped).
std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids);

// One token per line, line number = id.
void save_vocabulary(const Vocabulary& vocab, const std::string& path);
Vocabulary load_vocabulary(const std::string& path);

}  // namespace vkd
