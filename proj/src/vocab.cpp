#include "vkd/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "vkd/error.hpp"

namespace vkd {

const std::array<const char*, Vocabulary::kNumSpecials>& Vocabulary::special_strings() {
  static const std::array<const char*, kNumSpecials> kSpecials = {"[PAD]", "[UNK]", "[CLS]",
                                                                  "[SEP]", "[MASK]"};
  return kSpecials;
}

int Vocabulary::lookup(const std::string& token) const {
  auto it = id_of.find(token);
  return it == id_of.end() ? -1 : it->second;
}

std::vector<std::string> utf8_codepoints(const std::string& text) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    size_t len;
    if (c < 0x80)
      len = 1;
    else if ((c >> 5) == 0x6)
      len = 2;
    else if ((c >> 4) == 0xe)
      len = 3;
    else if ((c >> 3) == 0x1e)
      len = 4;
    else
      fail("encoding", "invalid UTF-8 lead byte at offset " + std::to_string(i));
    if (i + len > text.size()) fail("encoding", "truncated UTF-8 sequence");
    for (size_t k = 1; k < len; ++k)
      if ((static_cast<unsigned char>(text[i + k]) >> 6) != 0x2)
        fail("encoding", "invalid UTF-8 continuation byte");
    out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

namespace {

bool is_ascii_punct(const std::string& cp) {
  return cp.size() == 1 && std::ispunct(static_cast<unsigned char>(cp[0]));
}

std::string lower_cp(const std::string& cp) {
  if (cp.size() == 1)
    return std::string(1, static_cast<char>(std::tolower(static_cast<unsigned char>(cp[0]))));
  return cp;
}

}  // namespace

std::vector<std::string> normalize_line(const std::string& line) {
  std::vector<std::string> words;
  std::istringstream stream(line);
  std::string raw;
  while (stream >> raw) {
    std::string current;
    for (const auto& cp : utf8_codepoints(raw)) {
      if (is_ascii_punct(cp)) {
        if (!current.empty()) words.push_back(std::move(current));
        current.clear();
        words.push_back(cp);
      } else {
        current += lower_cp(cp);
      }
    }
    if (!current.empty()) words.push_back(std::move(current));
  }
  return words;
}

namespace {

Vocabulary vocabulary_from_tokens(std::vector<std::string> tokens, const std::string& prefix) {
  Vocabulary vocab;
  vocab.continuation_prefix = prefix;
  vocab.tokens = std::move(tokens);
  for (size_t i = 0; i < vocab.tokens.size(); ++i) {
    if (!vocab.id_of.emplace(vocab.tokens[i], static_cast<int>(i)).second)
      fail("vocab-too-small", "duplicate token '" + vocab.tokens[i] + "'");
  }
  return vocab;
}

}  // namespace

Vocabulary train_wordpiece(const std::vector<std::string>& lines, int target_size,
                           const std::string& continuation_prefix) {
  // word -> count over the whole corpus
  std::map<std::vector<std::string>, int64_t> word_counts_by_cp;
  std::set<std::string> chars;
  for (const auto& line : lines) {
    for (const auto& word : normalize_line(line)) {
      auto cps = utf8_codepoints(word);
      for (const auto& cp : cps) chars.insert(cp);
      word_counts_by_cp[std::move(cps)] += 1;
    }
  }
  if (word_counts_by_cp.empty()) fail("empty-corpus", "no words in training corpus");

  const int floor = Vocabulary::kNumSpecials + 2 * static_cast<int>(chars.size());
  if (target_size < floor)
    fail("vocab-too-small", "target " + std::to_string(target_size) + " below character floor " +
                                std::to_string(floor));

  std::vector<std::string> tokens(Vocabulary::special_strings().begin(),
                                  Vocabulary::special_strings().end());
  // every character in both word-initial and continuation form
  for (const auto& c : chars) tokens.push_back(c);
  for (const auto& c : chars) tokens.push_back(continuation_prefix + c);
  std::set<std::string> present(tokens.begin(), tokens.end());

  // each distinct word as a mutable symbol sequence with its count
  struct WordEntry {
    std::vector<std::string> symbols;
    int64_t count;
  };
  std::vector<WordEntry> words;
  words.reserve(word_counts_by_cp.size());
  for (const auto& [cps, count] : word_counts_by_cp) {
    WordEntry entry;
    entry.count = count;
    entry.symbols.reserve(cps.size());
    for (size_t i = 0; i < cps.size(); ++i)
      entry.symbols.push_back(i == 0 ? cps[i] : continuation_prefix + cps[i]);
    words.push_back(std::move(entry));
  }

  while (static_cast<int>(tokens.size()) < target_size) {
    // count adjacent symbol pairs; ordered map gives the lexicographic
    // tie-break for free
    std::map<std::pair<std::string, std::string>, int64_t> pair_counts;
    for (const auto& word : words)
      for (size_t i = 0; i + 1 < word.symbols.size(); ++i)
        pair_counts[{word.symbols[i], word.symbols[i + 1]}] += word.count;
    const std::pair<std::string, std::string>* best = nullptr;
    int64_t best_count = 0;
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count) {
        best = &pair;
        best_count = count;
      }
    }
    if (!best) break;

    std::string merged = best->first;
    merged += best->second.substr(continuation_prefix.size());
    for (auto& word : words) {
      auto& syms = word.symbols;
      for (size_t i = 0; i + 1 < syms.size();) {
        if (syms[i] == best->first && syms[i + 1] == best->second) {
          syms[i] = merged;
          syms.erase(syms.begin() + static_cast<std::ptrdiff_t>(i) + 1);
        } else {
          ++i;
        }
      }
    }
    if (present.insert(merged).second) tokens.push_back(merged);
  }

  return vocabulary_from_tokens(std::move(tokens), continuation_prefix);
}

std::vector<int> segment_word(const Vocabulary& vocab, const std::string& word) {
  const auto cps = utf8_codepoints(word);
  std::vector<int> pieces;
  size_t start = 0;
  while (start < cps.size()) {
    int matched = -1;
    size_t matched_end = start;
    for (size_t end = cps.size(); end > start; --end) {
      std::string candidate = start > 0 ? vocab.continuation_prefix : "";
      for (size_t i = start; i < end; ++i) candidate += cps[i];
      const int id = vocab.lookup(candidate);
      if (id >= 0) {
        matched = id;
        matched_end = end;
        break;
      }
    }
    if (matched < 0) return {Vocabulary::kUnk};
    pieces.push_back(matched);
    start = matched_end;
  }
  return pieces;
}

namespace {

void append_word(TaggedTokenSequence& seq, const std::vector<int>& pieces, Source tag) {
  const int start = static_cast<int>(seq.entries.size());
  for (int id : pieces) seq.entries.push_back({id, tag});
  seq.word_spans.emplace_back(start, static_cast<int>(seq.entries.size()));
}

}  // namespace

TaggedTokenSequence segment_sequence(const Vocabulary& vocab, Source role,
                                     const std::vector<std::string>& words) {
  TaggedTokenSequence seq;
  for (const auto& word : words) append_word(seq, segment_word(vocab, word), role);
  return seq;
}

TaggedTokenSequence dual_segment(const Vocabulary& teacher_vocab, const Vocabulary& student_vocab,
                                 const std::vector<std::string>& words, double p_dt, Rng& rng) {
  if (p_dt < 0.0 || p_dt > 1.0) fail("shape-mismatch", "p_dt must lie in [0,1]");
  TaggedTokenSequence seq;
  for (const auto& word : words) {
    if (rng.bernoulli(p_dt))
      append_word(seq, segment_word(student_vocab, word), Source::Student);
    else
      append_word(seq, segment_word(teacher_vocab, word), Source::Teacher);
  }
  return seq;
}

double vocab_overlap(const Vocabulary& a, const Vocabulary& b) {
  if (a.size() <= Vocabulary::kNumSpecials || b.size() <= Vocabulary::kNumSpecials)
    fail("empty-content-vocab", "overlap needs content tokens beyond the specials");
  int64_t shared = 0;
  int64_t total = 0;
  for (int i = Vocabulary::kNumSpecials; i < a.size(); ++i) {
    ++total;
    const int id = b.lookup(a.tokens[i]);
    if (id >= Vocabulary::kNumSpecials) ++shared;
  }
  return static_cast<double>(shared) / static_cast<double>(total);
}

std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids) {
  std::string word;
  for (size_t i = 0; i < ids.size(); ++i) {
    const std::string& token = vocab.tokens.at(static_cast<size_t>(ids[i]));
    if (i > 0 && token.rfind(vocab.continuation_prefix, 0) == 0)
      word += token.substr(vocab.continuation_prefix.size());
    else
      word += token;
  }
  return word;
}

void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io", "cannot write vocabulary file " + path);
  for (const auto& token : vocab.tokens) out << token << '\n';
}

Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot read vocabulary file " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
  if (tokens.size() < Vocabulary::kNumSpecials) fail("io", "vocabulary file too short: " + path);
  for (int i = 0; i < Vocabulary::kNumSpecials; ++i)
    if (tokens[static_cast<size_t>(i)] != Vocabulary::special_strings()[static_cast<size_t>(i)])
      fail("io", "vocabulary file missing special token at id " + std::to_string(i));
  return vocabulary_from_tokens(std::move(tokens), "##");
}

}  // namespace vkd
