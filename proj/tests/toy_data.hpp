#pragma once

// Deterministic synthetic fixtures shared by the test suites. Corpus lines are
// built from a pool of fixed phrases, so a masked word is almost always
// recoverable from its phrase-mates; random-word text would cap masked
// prediction at the unigram entropy no matter the model. The classification
// pools reuse phrase vocabulary so fine-tuning sentences stay in-vocabulary.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vkd/error.hpp"
#include "vkd/rng.hpp"

namespace vkd_test {

inline const std::vector<std::string>& phrase_pool() {
  static const std::vector<std::string> phrases = {
      "the teacher reads books",   "a student learns pieces",  "machines play little games",
      "deep models train fast",    "we like reading words",    "the worker works daily",
      "training takes much time",  "it was very good",         "it was quite bad",
      "the happy player wins",     "the sad reader loses",     "great models win prizes",
      "bright machines work well", "dark rooms stay cold",     "sweet words sound nice",
      "bitter words sting hard"};
  return phrases;
}

inline const std::vector<std::string>& base_words() {
  static const std::vector<std::string> words = [] {
    std::vector<std::string> out;
    for (const auto& phrase : phrase_pool()) {
      std::string word;
      for (char c : phrase) {
        if (c == ' ') {
          out.push_back(word);
          word.clear();
        } else {
          word += c;
        }
      }
      out.push_back(word);
    }
    return out;
  }();
  return words;
}

inline const std::vector<std::string>& positive_words() {
  static const std::vector<std::string> words = {"good", "happy", "great",
                                                 "bright", "sweet", "wins"};
  return words;
}

inline const std::vector<std::string>& negative_words() {
  static const std::vector<std::string> words = {"bad", "sad", "dark",
                                                 "bitter", "loses", "cold"};
  return words;
}

inline std::vector<std::string> toy_corpus(int sentences, uint64_t seed) {
  vkd::Rng rng(seed);
  std::vector<std::string> lines;
  lines.reserve(static_cast<size_t>(sentences));
  for (int i = 0; i < sentences; ++i) {
    const int phrases = 2 + static_cast<int>(rng.below(2));
    std::string line;
    for (int p = 0; p < phrases; ++p) {
      if (!line.empty()) line += ' ';
      line += phrase_pool()[rng.below(phrase_pool().size())];
    }
    line += " .";
    lines.push_back(std::move(line));
  }
  return lines;
}

// two-class set: sentiment words decide the label, filler words are shared
inline std::vector<std::string> toy_classification_tsv(int examples, uint64_t seed) {
  vkd::Rng rng(seed);
  const std::vector<std::string> fillers = {"the", "it", "words", "models", "was", "we"};
  std::vector<std::string> lines;
  lines.reserve(static_cast<size_t>(examples));
  for (int i = 0; i < examples; ++i) {
    const int label = i % 2;
    const auto& pool = label == 0 ? positive_words() : negative_words();
    std::string text;
    const int length = 4 + static_cast<int>(rng.below(3));
    for (int w = 0; w < length; ++w) {
      if (!text.empty()) text += ' ';
      if (w % 2 == 0)
        text += pool[rng.below(pool.size())];
      else
        text += fillers[rng.below(fillers.size())];
    }
    lines.push_back(std::to_string(label) + "\t" + text);
  }
  return lines;
}

inline std::string write_lines(const std::string& name, const std::vector<std::string>& lines) {
  const auto path = std::filesystem::path(name);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) vkd::fail("io", "cannot write fixture " + name);
  for (const auto& line : lines) out << line << '\n';
  return path.string();
}

}  // namespace vkd_test
