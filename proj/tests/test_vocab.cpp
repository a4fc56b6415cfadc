#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "toy_data.hpp"
#include "vkd/error.hpp"
#include "vkd/vocab.hpp"

using namespace vkd;

namespace {

Vocabulary make_vocab(const std::vector<std::string>& content) {
  Vocabulary vocab;
  for (const char* s : Vocabulary::special_strings()) vocab.tokens.push_back(s);
  vocab.tokens.insert(vocab.tokens.end(), content.begin(), content.end());
  for (size_t i = 0; i < vocab.tokens.size(); ++i)
    vocab.id_of[vocab.tokens[i]] = static_cast<int>(i);
  return vocab;
}

// independent greedy longest-prefix oracle over token strings
std::vector<std::string> greedy_oracle(const Vocabulary& vocab, const std::string& word) {
  std::vector<std::string> out;
  size_t start = 0;
  while (start < word.size()) {
    size_t best_len = 0;
    std::string best;
    for (const auto& token : vocab.tokens) {
      std::string body = token;
      const bool cont = token.rfind("##", 0) == 0;
      if (cont) body = token.substr(2);
      if (body.empty() || cont != (start > 0)) continue;
      if (word.compare(start, body.size(), body) == 0 && body.size() > best_len) {
        best_len = body.size();
        best = token;
      }
    }
    if (best_len == 0) return {"[UNK]"};
    out.push_back(best);
    start += best_len;
  }
  return out;
}

}  // namespace

TEST_CASE("pair-merge trainer on the three-word corpus") {
  auto vocab = train_wordpiece({"ab ab ab"}, 10);
  // hand-run oracle: base = specials + {a,b,##a,##b}; one merge (a,##b) -> ab
  CHECK(vocab.size() == 10);
  CHECK(vocab.contains("a"));
  CHECK(vocab.contains("##b"));
  CHECK(vocab.contains("ab"));
  for (const char* s : Vocabulary::special_strings()) CHECK(vocab.contains(s));
  CHECK(segment_word(vocab, "ab") == std::vector<int>{vocab.lookup("ab")});
}

TEST_CASE("single-character corpus yields exactly the floor vocabulary") {
  auto vocab = train_wordpiece({"x"}, 7);
  CHECK(vocab.tokens ==
        std::vector<std::string>{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "x", "##x"});
}

TEST_CASE("trainer error cases") {
  CHECK_THROWS_WITH_AS(train_wordpiece({}, 100), doctest::Contains("empty-corpus"), Error);
  CHECK_THROWS_WITH_AS(train_wordpiece({"", "   "}, 100), doctest::Contains("empty-corpus"),
                       Error);
  // floor for "x" is 5 + 2
  CHECK_THROWS_WITH_AS(train_wordpiece({"x"}, 6), doctest::Contains("vocab-too-small"), Error);
}

TEST_CASE("trainer is deterministic and respects the size cap") {
  const auto lines = vkd_test::toy_corpus(50, 9);
  auto a = train_wordpiece(lines, 160);
  auto b = train_wordpiece(lines, 160);
  CHECK(a.tokens == b.tokens);
  CHECK(a.size() <= 160);
  // character coverage in both forms
  std::set<std::string> chars;
  for (const auto& line : lines)
    for (const auto& word : normalize_line(line))
      for (const auto& cp : utf8_codepoints(word)) chars.insert(cp);
  for (const auto& c : chars) {
    CHECK(a.contains(c));
    CHECK(a.contains("##" + c));
  }
  // no duplicates
  std::set<std::string> unique(a.tokens.begin(), a.tokens.end());
  CHECK(unique.size() == a.tokens.size());
}

TEST_CASE("greedy segmentation basics") {
  auto vocab = make_vocab({"learn", "##ing", "learning", "mach", "##ine", "q"});
  // whole-word match wins over pieces
  CHECK(segment_word(vocab, "learning") == std::vector<int>{vocab.lookup("learning")});
  // longest-prefix pieces
  auto vocab2 = make_vocab({"learn", "##ing"});
  CHECK(segment_word(vocab2, "learning") ==
        std::vector<int>{vocab2.lookup("learn"), vocab2.lookup("##ing")});
  // unmatched character anywhere collapses the word to UNK
  CHECK(segment_word(vocab, "machinez") == std::vector<int>{Vocabulary::kUnk});
}

TEST_CASE("segmentation agrees with an independent greedy oracle") {
  const auto lines = vkd_test::toy_corpus(60, 3);
  auto vocab = train_wordpiece(lines, 140);
  for (const std::string word : {"machine", "learning", "teacher", "working", "deeper"}) {
    const auto oracle = greedy_oracle(vocab, word);
    const auto ids = segment_word(vocab, word);
    REQUIRE(ids.size() == oracle.size());
    for (size_t i = 0; i < ids.size(); ++i)
      CHECK(vocab.tokens[static_cast<size_t>(ids[i])] == oracle[i]);
  }
}

TEST_CASE("round trip over covered words") {
  const auto lines = vkd_test::toy_corpus(40, 21);
  auto vocab = train_wordpiece(lines, 120);
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    // random word over the covered alphabet
    std::string word;
    const int len = 1 + static_cast<int>(rng.below(10));
    for (int i = 0; i < len; ++i)
      word += static_cast<char>('a' + static_cast<int>(rng.below(26)));
    const auto ids = segment_word(vocab, word);
    if (ids == std::vector<int>{Vocabulary::kUnk}) continue;  // uncovered char
    CHECK(detokenize(vocab, ids) == word);
    CHECK(segment_word(vocab, word) == ids);  // determinism
  }
}

TEST_CASE("segment_sequence spans partition the entries") {
  auto vocab = make_vocab({"learn", "##ing", "i", "like"});
  CHECK(segment_sequence(vocab, Source::Student, {}).entries.empty());

  auto seq = segment_sequence(vocab, Source::Student, {"i", "like"});
  REQUIRE(seq.word_spans.size() == 2);
  CHECK(seq.word_spans[0] == std::pair{0, 1});
  CHECK(seq.word_spans[1] == std::pair{1, 2});

  auto longer = segment_sequence(vocab, Source::Teacher, {"learning", "i", "learning"});
  int cursor = 0;
  for (const auto& [start, end] : longer.word_spans) {
    CHECK(start == cursor);
    CHECK(end > start);
    cursor = end;
  }
  CHECK(cursor == static_cast<int>(longer.entries.size()));
  for (const auto& entry : longer.entries) CHECK(entry.source == Source::Teacher);
}

TEST_CASE("dual segmentation degenerate probabilities match single-vocabulary paths") {
  const auto lines = vkd_test::toy_corpus(30, 5);
  auto teacher = train_wordpiece(lines, 200);
  auto student = train_wordpiece(lines, 90);
  Rng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> words;
    const int n = static_cast<int>(rng.below(12));
    for (int i = 0; i < n; ++i)
      words.push_back(vkd_test::base_words()[rng.below(vkd_test::base_words().size())]);

    Rng r0(trial);
    auto zero = dual_segment(teacher, student, words, 0.0, r0);
    auto pure_teacher = segment_sequence(teacher, Source::Teacher, words);
    CHECK(zero.word_spans == pure_teacher.word_spans);
    REQUIRE(zero.entries.size() == pure_teacher.entries.size());
    for (size_t i = 0; i < zero.entries.size(); ++i) {
      CHECK(zero.entries[i].id == pure_teacher.entries[i].id);
      CHECK(zero.entries[i].source == Source::Teacher);
    }

    Rng r1(trial);
    auto one = dual_segment(teacher, student, words, 1.0, r1);
    auto pure_student = segment_sequence(student, Source::Student, words);
    REQUIRE(one.entries.size() == pure_student.entries.size());
    for (size_t i = 0; i < one.entries.size(); ++i) {
      CHECK(one.entries[i].id == pure_student.entries[i].id);
      CHECK(one.entries[i].source == Source::Student);
    }
  }
}

TEST_CASE("dual segmentation tags words as units") {
  const auto lines = vkd_test::toy_corpus(30, 5);
  auto teacher = train_wordpiece(lines, 200);
  auto student = train_wordpiece(lines, 90);
  std::vector<std::string> words;
  for (int i = 0; i < 40; ++i)
    words.push_back(vkd_test::base_words()[i % vkd_test::base_words().size()]);
  Rng rng(11);
  auto seq = dual_segment(teacher, student, words, 0.5, rng);
  for (const auto& [start, end] : seq.word_spans) {
    for (int i = start; i < end; ++i)
      CHECK(seq.entries[static_cast<size_t>(i)].source ==
            seq.entries[static_cast<size_t>(start)].source);
  }
}

TEST_CASE("vocab overlap") {
  auto a = make_vocab({"x", "y", "z"});
  CHECK(vocab_overlap(a, a) == doctest::Approx(1.0));
  auto b = make_vocab({"p", "q"});
  CHECK(vocab_overlap(a, b) == doctest::Approx(0.0));
  auto c = make_vocab({"x", "p"});
  CHECK(vocab_overlap(c, a) == doctest::Approx(0.5));
  auto specials_only = make_vocab({});
  CHECK_THROWS_WITH_AS(vocab_overlap(specials_only, a),
                       doctest::Contains("empty-content-vocab"), Error);
}

TEST_CASE("normalization lowercases and splits punctuation") {
  CHECK(normalize_line("Hello World") == std::vector<std::string>{"hello", "world"});
  CHECK(normalize_line("it's done.") == std::vector<std::string>{"it", "'", "s", "done", "."});
  CHECK(normalize_line("") == std::vector<std::string>{});
  CHECK_THROWS_WITH_AS(normalize_line(std::string("\xff\xfe bad")),
                       doctest::Contains("encoding"), Error);
}

TEST_CASE("vocabulary file round trip") {
  const auto lines = vkd_test::toy_corpus(20, 2);
  auto vocab = train_wordpiece(lines, 100);
  const std::string path = "vocab_roundtrip.txt";
  save_vocabulary(vocab, path);
  auto loaded = load_vocabulary(path);
  CHECK(loaded.tokens == vocab.tokens);
  CHECK(loaded.lookup("[MASK]") == Vocabulary::kMask);
}
