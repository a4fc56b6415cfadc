#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vkd/encoder.hpp"
#include "vkd/rng.hpp"
#include "vkd/tensor.hpp"
#include "vkd/vocab.hpp"

namespace vkd {

enum class DistillMode : uint8_t { NoKd, Dual, DualProjDown, DualProjUp };

const char* mode_name(DistillMode mode);
DistillMode mode_from_name(const std::string& name);

struct DistillConfig {
  DistillMode mode = DistillMode::Dual;
  double p_dt = 0.5;
  double epsilon = 1.0;
  double mask_rate = 0.15;
  double replace_mask = 0.8;
  double replace_random = 0.1;
  double replace_keep = 0.1;
  uint64_t seed = 0;
  // lifts the stop-gradient on teacher parameters inside the projection loss
  bool proj_update_teacher = false;

  bool uses_projection() const {
    return mode == DistillMode::DualProjDown || mode == DistillMode::DualProjUp;
  }
  void validate() const;
};

// ---------------------------------------------------------------------------
// Shared projections
// ---------------------------------------------------------------------------

// One trainable U/V pair per teacher-to-student dimension group, shared by
// every parameter axis of that class. U is student_dim x teacher_dim, V is
// teacher_dim x student_dim. Discarded after distillation; never part of a
// student checkpoint.
template <typename S>
struct ProjectionSetT {
  struct Group {
    int teacher_dim = 0;
    int student_dim = 0;
    TensorPtrT<S> u;  // [student_dim, teacher_dim]
    TensorPtrT<S> v;  // [teacher_dim, student_dim]
  };
  Group hidden;
  Group intermediate;

  const Group& group_for(DimClass c) const {
    if (c == DimClass::Hidden) return hidden;
    if (c == DimClass::Intermediate) return intermediate;
    fail("registry-mismatch", "no projection group for this axis class");
  }
  std::vector<std::pair<std::string, TensorPtrT<S>>> named_tensors() const {
    return {{"proj.hidden.u", hidden.u},
            {"proj.hidden.v", hidden.v},
            {"proj.intermediate.u", intermediate.u},
            {"proj.intermediate.v", intermediate.v}};
  }
};

using ProjectionSet = ProjectionSetT<float>;

template <typename S>
ProjectionSetT<S> init_projections(const ModelConfig& teacher, const ModelConfig& student,
                                   Rng& rng) {
  auto make_group = [&](int td, int sd) {
    typename ProjectionSetT<S>::Group g;
    g.teacher_dim = td;
    g.student_dim = sd;
    g.u = tensor<S>({sd, td}, true);
    g.v = tensor<S>({td, sd}, true);
    fill_xavier(*g.u, sd, td, rng);
    fill_xavier(*g.v, td, sd, rng);
    return g;
  };
  ProjectionSetT<S> set;
  set.hidden = make_group(teacher.hidden_dim, student.hidden_dim);
  set.intermediate = make_group(teacher.intermediate_dim, student.intermediate_dim);
  return set;
}

namespace detail {

inline bool projected_axis(DimClass c) {
  return c == DimClass::Hidden || c == DimClass::Intermediate;
}

template <typename S>
void check_proj_pair(const ParamEntryT<S>& t, const ParamEntryT<S>& s,
                     const ProjectionSetT<S>& proj) {
  if (t.classes != s.classes || t.tensor->rank() != s.tensor->rank())
    fail("registry-mismatch", "structure differs for " + t.name);
  for (int axis = 0; axis < t.tensor->rank(); ++axis) {
    const DimClass c = t.classes[static_cast<size_t>(axis)];
    const int td = t.tensor->dims[static_cast<size_t>(axis)];
    const int sd = s.tensor->dims[static_cast<size_t>(axis)];
    if (projected_axis(c)) {
      const auto& g = proj.group_for(c);
      if (td != g.teacher_dim || sd != g.student_dim)
        fail("registry-mismatch", "projection group does not match " + t.name);
    } else if (td != sd) {
      fail("registry-mismatch", "identity-mapped axis differs in size for " + t.name);
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Projection losses
// ---------------------------------------------------------------------------

// Down projection: sum over correspondent pairs of ||map(theta_t) - theta_s||^2
// where map left-multiplies projected axis 0 by U and right-multiplies
// projected axis 1 by V; identity-class axes must agree in size. Vectors use
// the single applicable matrix. Teacher parameters are treated as constants
// unless update_teacher lifts the stop-gradient.
template <typename S>
TensorPtrT<S> proj_loss_down(const ParamRegistryT<S>& teacher, const ParamRegistryT<S>& student,
                             const ProjectionSetT<S>& proj, bool update_teacher = false) {
  check_correspondence(teacher, student);
  TensorPtrT<S> total = scalar_tensor<S>(S(0));
  for (const auto& t : teacher.entries()) {
    if (t.has_teacher_vocab_axis()) continue;
    const auto& s = student.entry(t.name);
    detail::check_proj_pair(t, s, proj);
    auto mapped = update_teacher ? t.tensor : detach(t.tensor);
    if (t.tensor->rank() == 2) {
      if (detail::projected_axis(t.classes[0]))
        mapped = matmul(proj.group_for(t.classes[0]).u, mapped);
      if (detail::projected_axis(t.classes[1]))
        mapped = matmul(mapped, proj.group_for(t.classes[1]).v);
    } else if (t.tensor->rank() == 1 && detail::projected_axis(t.classes[0])) {
      auto column = reshape(mapped, {t.tensor->dims[0], 1});
      mapped = reshape(matmul(proj.group_for(t.classes[0]).u, column),
                       {s.tensor->dims[0]});
    }
    total = add(total, sum_squares(sub(mapped, s.tensor)));
  }
  return total;
}

// Up projection: sum of ||theta_t - inv_map(theta_s)||^2 with the student
// mapped into teacher shapes (V on projected axis 0, U on projected axis 1).
template <typename S>
TensorPtrT<S> proj_loss_up(const ParamRegistryT<S>& teacher, const ParamRegistryT<S>& student,
                           const ProjectionSetT<S>& proj, bool update_teacher = false) {
  check_correspondence(teacher, student);
  TensorPtrT<S> total = scalar_tensor<S>(S(0));
  for (const auto& t : teacher.entries()) {
    if (t.has_teacher_vocab_axis()) continue;
    const auto& s = student.entry(t.name);
    detail::check_proj_pair(t, s, proj);
    auto mapped = s.tensor;
    if (s.tensor->rank() == 2) {
      if (detail::projected_axis(s.classes[0]))
        mapped = matmul(proj.group_for(s.classes[0]).v, mapped);
      if (detail::projected_axis(s.classes[1]))
        mapped = matmul(mapped, proj.group_for(s.classes[1]).u);
    } else if (s.tensor->rank() == 1 && detail::projected_axis(s.classes[0])) {
      auto column = reshape(mapped, {s.tensor->dims[0], 1});
      mapped = reshape(matmul(proj.group_for(s.classes[0]).v, column),
                       {t.tensor->dims[0]});
    }
    auto anchor = update_teacher ? t.tensor : detach(t.tensor);
    total = add(total, sum_squares(sub(anchor, mapped)));
  }
  return total;
}

// ---------------------------------------------------------------------------
// Cross-entropy composition
// ---------------------------------------------------------------------------

// L_ce = student CE + teacher CE, each averaged over its own masked
// positions; the teacher average spans both of its heads.
template <typename S>
TensorPtrT<S> dual_ce_loss(const MlmOutT<S>& student_out, const MlmOutT<S>& teacher_out) {
  auto side = [&](const MlmOutT<S>& out) -> TensorPtrT<S> {
    const int n = out.masked_count();
    if (n == 0) return scalar_tensor<S>(S(0));
    TensorPtrT<S> sum = scalar_tensor<S>(S(0));
    if (out.teacher_logits)
      sum = add(sum, cross_entropy(out.teacher_logits, out.teacher_labels, Reduction::Sum));
    if (out.student_logits)
      sum = add(sum, cross_entropy(out.student_logits, out.student_labels, Reduction::Sum));
    return scale(sum, S(1) / S(n));
  };
  return add(side(student_out), side(teacher_out));
}

// mean masked cross-entropy of a single model's MLM output
template <typename S>
TensorPtrT<S> mlm_ce_loss(const MlmOutT<S>& out) {
  const int n = out.masked_count();
  if (n == 0) return scalar_tensor<S>(S(0));
  TensorPtrT<S> sum = scalar_tensor<S>(S(0));
  if (out.teacher_logits)
    sum = add(sum, cross_entropy(out.teacher_logits, out.teacher_labels, Reduction::Sum));
  if (out.student_logits)
    sum = add(sum, cross_entropy(out.student_logits, out.student_labels, Reduction::Sum));
  return scale(sum, S(1) / S(n));
}

// L_final = L_p + epsilon * L_ce; modes without a projection loss contribute
// the cross-entropy term only.
template <typename S>
TensorPtrT<S> total_loss(const TensorPtrT<S>& proj_loss, const TensorPtrT<S>& ce_loss, S epsilon,
                         DistillMode mode) {
  const bool wants_proj =
      mode == DistillMode::DualProjDown || mode == DistillMode::DualProjUp;
  if (wants_proj != (proj_loss != nullptr))
    fail("shape-mismatch", "projection loss must be present exactly for projection modes");
  auto weighted = scale(ce_loss, epsilon);
  return proj_loss ? add(proj_loss, weighted) : weighted;
}

// ---------------------------------------------------------------------------
// Masking and batch construction
// ---------------------------------------------------------------------------

// Word-level mask plan: which whitespace words of an example are masked.
std::vector<uint8_t> choose_masked_words(int word_count, double mask_rate, Rng& rng);

struct MaskedSequence {
  std::vector<int> token_ids;  // content entries after replacement
  std::vector<MaskedSlot> slots;  // positions relative to content start
};

// Applies the per-piece replacement scheme (MASK / random same-vocabulary
// token / keep) to every piece of every selected word. Labels record the
// original id and the word's source tag.
MaskedSequence apply_mask_plan(const TaggedTokenSequence& seq, const std::vector<uint8_t>& plan,
                               const DistillConfig& cfg, const Vocabulary& teacher_vocab,
                               const Vocabulary& student_vocab, Rng& rng);

// Single-view convenience: draws its own plan, then applies it.
MaskedSequence mask_words(const TaggedTokenSequence& seq, const DistillConfig& cfg,
                          const Vocabulary& teacher_vocab, const Vocabulary& student_vocab,
                          Rng& rng);

struct DualBatch {
  Batch teacher;
  Batch student;
};

// Builds the teacher view (dual-segmented with p_dt) and the student view
// (student vocabulary only) of the same examples under one word-level mask
// plan, so both models predict the same masked words. Sequences are wrapped
// in CLS/SEP and padded to seq_len; words that do not fit in both views are
// dropped whole.
DualBatch build_dual_batch(const std::vector<std::vector<std::string>>& examples,
                           const Vocabulary& teacher_vocab, const Vocabulary& student_vocab,
                           const DistillConfig& cfg, int seq_len, Rng& rng);

// Single-vocabulary batch (teacher pretraining, NoKD training, evaluation).
Batch build_single_batch(const std::vector<std::vector<std::string>>& examples,
                         const Vocabulary& vocab, Source role, const DistillConfig& cfg,
                         int seq_len, Rng& rng);

}  // namespace vkd
