#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vkd/checkpoint.hpp"
#include "vkd/distill.hpp"
#include "vkd/encoder.hpp"
#include "vkd/optim.hpp"
#include "vkd/vocab.hpp"

namespace vkd {

struct RunConfig {
  ModelConfig teacher;
  ModelConfig student;
  DistillConfig distill;
  OptimConfig optim;
  std::string corpus;
  std::string eval_corpus;
  std::string teacher_vocab;
  std::string student_vocab;
  std::string checkpoint_dir;
  std::string teacher_checkpoint;  // empty: pretrain the teacher in-run
  int64_t teacher_pretrain_steps = 0;
  int64_t steps = 1;
  int batch_size = 8;
  int seq_len = 128;
  int64_t eval_every = 100;
  uint64_t seed = 0;
  uint64_t eval_seed = 1234567;
  bool deterministic = false;

  void validate() const;  // launch-time checks: paths exist, steps >= 1
};

RunConfig run_config_from_json(const std::string& json_text);
std::string run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::string& path);

// The hyperparameters the reference setup trained with: 12-layer teacher and
// students, 30522/4928 vocabularies, LAMB at 0.00125 with batch 4096 for 250K
// steps, sequences of 128. Not runnable on a desk; kept as documentation and
// as the default for size reporting.
RunConfig paper_scale_profile();

struct MetricsRecord {
  int64_t step = 0;
  double l_final = 0.0;
  double l_ce_student = 0.0;
  double l_ce_teacher = 0.0;
  double l_p = 0.0;
  double masked_accuracy = 0.0;
  double wall_clock_s = 0.0;  // zeroed under the deterministic flag
};

std::string metrics_to_jsonl(const std::vector<MetricsRecord>& records);

// Lowercased whitespace-word lists, one document per line, blank lines
// skipped, punctuation split into standalone words.
std::vector<std::vector<std::string>> ingest_corpus(const std::string& path);

struct TrainSummary {
  std::string checkpoint_path;
  std::string metrics_path;
  std::vector<MetricsRecord> records;
  int64_t teacher_forward_count = 0;
};

// MLM pretraining of the teacher model on its own vocabulary. Writes
// teacher.ckpt and teacher_metrics.jsonl under checkpoint_dir.
TrainSummary pretrain_teacher(const RunConfig& config);

// The distillation loop: dual batches, teacher/student forwards, the
// mode-dependent combined loss, LAMB updates on the student (plus projections
// and the CE-driven teacher), periodic metrics and checkpoints. The student
// checkpoint never contains projection tensors. Throws "diverged" on a
// non-finite loss, leaving the last-good checkpoint in place.
TrainSummary run_distillation(const RunConfig& config);

// Fraction of masked positions where the model's top-1 prediction equals the
// label; masking is seeded by eval_seed only, so repeated calls score the same
// masked corpus. The role picks the vocabulary head (Student for the student
// artifact, Teacher when scoring a teacher during its own pretraining).
double evaluate_masked_accuracy(const ParamRegistry& model, const ModelConfig& model_config,
                                const Vocabulary& vocab,
                                const std::vector<std::vector<std::string>>& eval_corpus,
                                const DistillConfig& mask_config, int seq_len, int batch_size,
                                uint64_t eval_seed, Source role = Source::Student);

struct LabeledExample {
  int label = 0;
  std::vector<std::string> words;
};

// TSV rows of `label<TAB>text`; labels must be integers in [0, classes).
std::vector<LabeledExample> load_labeled_tsv(const std::string& path, int classes);

struct FinetuneResult {
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
  double eval_f1 = 0.0;  // F1 of class 1; meaningful for 2-class tasks
};

// Fine-tunes all student weights plus a fresh affine layer on the CLS
// encoding, then scores the eval set.
FinetuneResult finetune_classifier(const ModelConfig& student_config,
                                   const std::string& student_checkpoint,
                                   const Vocabulary& student_vocab,
                                   const std::vector<LabeledExample>& train_set,
                                   const std::vector<LabeledExample>& eval_set, int classes,
                                   int epochs, const OptimConfig& optim, int seq_len,
                                   uint64_t seed);

struct SizeReport {
  int64_t params = 0;
  double size_mb = 0.0;      // params * 4 / 2^20
  double flops_ratio = 0.0;  // vs the reference config at the same seq_len
};

SizeReport report_model_size(const ModelConfig& config, const ModelConfig& reference,
                             int seq_len);
std::string format_size_report(const std::vector<std::pair<std::string, ModelConfig>>& models,
                               const ModelConfig& reference, int seq_len);

}  // namespace vkd
