#include "vkd/distill.hpp"

#include <algorithm>
#include <cmath>

namespace vkd {

const char* mode_name(DistillMode mode) {
  switch (mode) {
    case DistillMode::NoKd: return "no_kd";
    case DistillMode::Dual: return "dual";
    case DistillMode::DualProjDown: return "dual_proj_down";
    case DistillMode::DualProjUp: return "dual_proj_up";
  }
  return "unknown";
}

DistillMode mode_from_name(const std::string& name) {
  if (name == "no_kd") return DistillMode::NoKd;
  if (name == "dual") return DistillMode::Dual;
  if (name == "dual_proj_down") return DistillMode::DualProjDown;
  if (name == "dual_proj_up") return DistillMode::DualProjUp;
  fail("shape-mismatch", "unknown distillation mode '" + name + "'");
}

void DistillConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(p_dt) || !prob(mask_rate) || !prob(replace_mask) || !prob(replace_random) ||
      !prob(replace_keep))
    fail("shape-mismatch", "distill probabilities must lie in [0,1]");
  if (std::abs(replace_mask + replace_random + replace_keep - 1.0) > 1e-9)
    fail("shape-mismatch", "replace probabilities must sum to 1");
  if (!std::isfinite(epsilon)) fail("shape-mismatch", "epsilon must be finite");
}

std::vector<uint8_t> choose_masked_words(int word_count, double mask_rate, Rng& rng) {
  std::vector<uint8_t> plan(static_cast<size_t>(word_count));
  for (auto& flag : plan) flag = rng.bernoulli(mask_rate) ? 1 : 0;
  return plan;
}

MaskedSequence apply_mask_plan(const TaggedTokenSequence& seq, const std::vector<uint8_t>& plan,
                               const DistillConfig& cfg, const Vocabulary& teacher_vocab,
                               const Vocabulary& student_vocab, Rng& rng) {
  if (plan.size() != seq.word_spans.size())
    fail("shape-mismatch", "mask plan does not match word count");
  MaskedSequence out;
  out.token_ids.reserve(seq.entries.size());
  for (const auto& entry : seq.entries) out.token_ids.push_back(entry.id);

  for (size_t w = 0; w < plan.size(); ++w) {
    if (!plan[w]) continue;
    const auto [start, end] = seq.word_spans[w];
    for (int pos = start; pos < end; ++pos) {
      const auto& entry = seq.entries[static_cast<size_t>(pos)];
      const Vocabulary& vocab =
          entry.source == Source::Teacher ? teacher_vocab : student_vocab;
      const double draw = rng.uniform();
      if (draw < cfg.replace_mask) {
        out.token_ids[static_cast<size_t>(pos)] = Vocabulary::kMask;
      } else if (draw < cfg.replace_mask + cfg.replace_random) {
        const int content = vocab.size() - Vocabulary::kNumSpecials;
        if (content > 0)
          out.token_ids[static_cast<size_t>(pos)] =
              Vocabulary::kNumSpecials +
              static_cast<int>(rng.below(static_cast<uint64_t>(content)));
      }  // else keep the original token
      out.slots.push_back({0, pos, entry.source, entry.id});
    }
  }
  return out;
}

MaskedSequence mask_words(const TaggedTokenSequence& seq, const DistillConfig& cfg,
                          const Vocabulary& teacher_vocab, const Vocabulary& student_vocab,
                          Rng& rng) {
  const auto plan = choose_masked_words(seq.word_count(), cfg.mask_rate, rng);
  return apply_mask_plan(seq, plan, cfg, teacher_vocab, student_vocab, rng);
}

namespace {

// first W words whose pieces fit the content budget in every view
int words_that_fit(const std::vector<const TaggedTokenSequence*>& views, int budget) {
  int words = static_cast<int>(views.front()->word_spans.size());
  for (const auto* view : views)
    words = std::min(words, static_cast<int>(view->word_spans.size()));
  int fit = 0;
  for (int w = 0; w < words; ++w) {
    bool ok = true;
    for (const auto* view : views)
      if (view->word_spans[static_cast<size_t>(w)].second > budget) ok = false;
    if (!ok) break;
    fit = w + 1;
  }
  return fit;
}

TaggedTokenSequence truncate_words(const TaggedTokenSequence& seq, int words) {
  TaggedTokenSequence out;
  if (words <= 0) return out;
  const int end = seq.word_spans[static_cast<size_t>(words) - 1].second;
  out.entries.assign(seq.entries.begin(), seq.entries.begin() + end);
  out.word_spans.assign(seq.word_spans.begin(), seq.word_spans.begin() + words);
  return out;
}

void append_row(Batch& batch, const MaskedSequence& masked, Source consumer_role,
                const std::vector<Source>& content_tags, int seq_len) {
  const int example = batch.batch_size;
  const int content = static_cast<int>(masked.token_ids.size());
  batch.token_ids.push_back(Vocabulary::kCls);
  batch.source_tags.push_back(consumer_role);
  batch.attention_mask.push_back(1);
  for (int i = 0; i < content; ++i) {
    batch.token_ids.push_back(masked.token_ids[static_cast<size_t>(i)]);
    batch.source_tags.push_back(content_tags[static_cast<size_t>(i)]);
    batch.attention_mask.push_back(1);
  }
  batch.token_ids.push_back(Vocabulary::kSep);
  batch.source_tags.push_back(consumer_role);
  batch.attention_mask.push_back(1);
  for (int i = content + 2; i < seq_len; ++i) {
    batch.token_ids.push_back(Vocabulary::kPad);
    batch.source_tags.push_back(consumer_role);
    batch.attention_mask.push_back(0);
  }
  for (const auto& slot : masked.slots)
    batch.masked.push_back({example, slot.position + 1, slot.role, slot.label});
  batch.type_ids.resize(batch.token_ids.size(), 0);
  batch.batch_size += 1;
  batch.seq_len = seq_len;
}

std::vector<Source> tags_of(const TaggedTokenSequence& seq) {
  std::vector<Source> tags;
  tags.reserve(seq.entries.size());
  for (const auto& entry : seq.entries) tags.push_back(entry.source);
  return tags;
}

}  // namespace

DualBatch build_dual_batch(const std::vector<std::vector<std::string>>& examples,
                           const Vocabulary& teacher_vocab, const Vocabulary& student_vocab,
                           const DistillConfig& cfg, int seq_len, Rng& rng) {
  cfg.validate();
  if (examples.empty()) fail("shape-mismatch", "dual batch needs at least one example");
  if (seq_len < 3) fail("shape-mismatch", "seq_len must fit CLS and SEP");
  DualBatch out;
  const int budget = seq_len - 2;
  for (const auto& words : examples) {
    // fixed draw order per example: word tags, mask plan, teacher-view
    // replacements, student-view replacements
    auto teacher_seq = dual_segment(teacher_vocab, student_vocab, words, cfg.p_dt, rng);
    auto student_seq = segment_sequence(student_vocab, Source::Student, words);
    auto plan = choose_masked_words(static_cast<int>(words.size()), cfg.mask_rate, rng);

    const int keep = words_that_fit({&teacher_seq, &student_seq}, budget);
    teacher_seq = truncate_words(teacher_seq, keep);
    student_seq = truncate_words(student_seq, keep);
    plan.resize(static_cast<size_t>(keep));

    auto teacher_masked =
        apply_mask_plan(teacher_seq, plan, cfg, teacher_vocab, student_vocab, rng);
    auto student_masked =
        apply_mask_plan(student_seq, plan, cfg, teacher_vocab, student_vocab, rng);
    append_row(out.teacher, teacher_masked, Source::Teacher, tags_of(teacher_seq), seq_len);
    append_row(out.student, student_masked, Source::Student, tags_of(student_seq), seq_len);
  }
  return out;
}

Batch build_single_batch(const std::vector<std::vector<std::string>>& examples,
                         const Vocabulary& vocab, Source role, const DistillConfig& cfg,
                         int seq_len, Rng& rng) {
  cfg.validate();
  if (examples.empty()) fail("shape-mismatch", "batch needs at least one example");
  if (seq_len < 3) fail("shape-mismatch", "seq_len must fit CLS and SEP");
  Batch out;
  const int budget = seq_len - 2;
  for (const auto& words : examples) {
    auto seq = segment_sequence(vocab, role, words);
    auto plan = choose_masked_words(static_cast<int>(words.size()), cfg.mask_rate, rng);
    const int keep = words_that_fit({&seq}, budget);
    seq = truncate_words(seq, keep);
    plan.resize(static_cast<size_t>(keep));
    auto masked = apply_mask_plan(seq, plan, cfg, vocab, vocab, rng);
    append_row(out, masked, role, tags_of(seq), seq_len);
  }
  return out;
}

}  // namespace vkd
