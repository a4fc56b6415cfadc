// vkd: vocabulary-compressed knowledge distillation workbench.
// Subcommands cover the full path: vocabulary construction, segmentation,
// teacher pretraining, distillation, masked-LM evaluation, classifier
// fine-tuning, and size reporting.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "vkd/checkpoint.hpp"
#include "vkd/distill.hpp"
#include "vkd/encoder.hpp"
#include "vkd/error.hpp"
#include "vkd/pipeline.hpp"
#include "vkd/vocab.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

struct CommonOpts {
  std::string config_path;
  std::optional<uint64_t> seed;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
  auto* config = cmd->add_option("--config", opts.config_path, "run config JSON");
  if (config_required) config->required();
  cmd->add_option("--seed", opts.seed, "override the config seed");
  cmd->add_flag("--deterministic", opts.deterministic, "force deterministic mode");
}

vkd::RunConfig load_config(const CommonOpts& opts) {
  auto cfg = vkd::load_run_config(opts.config_path);
  if (opts.seed) {
    cfg.seed = *opts.seed;
    cfg.distill.seed = *opts.seed;
  }
  if (opts.deterministic) cfg.deterministic = true;
  return cfg;
}

void print_metrics_tail(const vkd::TrainSummary& summary) {
  if (summary.records.empty()) return;
  const auto& r = summary.records.back();
  std::printf("step %lld  l_final %.4f  l_ce_s %.4f  l_ce_t %.4f  l_p %.4f  masked_acc %.4f\n",
              static_cast<long long>(r.step), r.l_final, r.l_ce_student, r.l_ce_teacher, r.l_p,
              r.masked_accuracy);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vocabulary-compressed knowledge distillation workbench"};
  app.require_subcommand(1);

  // vocab-train
  std::string vt_input, vt_out;
  int vt_size = 0;
  auto* vocab_train = app.add_subcommand("vocab-train", "build a WordPiece vocabulary");
  vocab_train->add_option("--input", vt_input, "training text, one document per line")->required();
  vocab_train->add_option("--size", vt_size, "target vocabulary size")->required();
  vocab_train->add_option("--out", vt_out, "output vocabulary file")->required();

  // segment
  std::string sg_vocab, sg_vocab2, sg_text;
  double sg_p_dt = 0.5;
  uint64_t sg_seed = 0;
  auto* segment = app.add_subcommand("segment", "segment text with one or two vocabularies");
  segment->add_option("--vocab", sg_vocab, "vocabulary file")->required();
  segment->add_option("--vocab2", sg_vocab2, "student vocabulary for dual segmentation");
  segment->add_option("--p-dt", sg_p_dt, "student-vocabulary probability per word");
  segment->add_option("--seed", sg_seed, "dual segmentation seed");
  segment->add_option("--text", sg_text, "text file to segment")->required();

  CommonOpts pretrain_opts;
  auto* pretrain = app.add_subcommand("pretrain-teacher", "masked-LM pretraining of the teacher");
  add_common(pretrain, pretrain_opts);

  CommonOpts distill_opts;
  auto* distill = app.add_subcommand("distill", "train a student under the configured mode");
  add_common(distill, distill_opts);

  CommonOpts eval_opts;
  std::string eval_ckpt;
  auto* eval_mlm = app.add_subcommand("eval-mlm", "masked prediction accuracy of a student");
  add_common(eval_mlm, eval_opts);
  eval_mlm->add_option("--ckpt", eval_ckpt, "student checkpoint (default from config)");

  CommonOpts ft_opts;
  std::string ft_ckpt, ft_train, ft_eval;
  int ft_classes = 2, ft_epochs = 10;
  auto* finetune = app.add_subcommand("finetune", "fine-tune a classification head");
  add_common(finetune, ft_opts);
  finetune->add_option("--ckpt", ft_ckpt, "student checkpoint")->required();
  finetune->add_option("--train", ft_train, "training TSV (label<TAB>text)")->required();
  finetune->add_option("--eval", ft_eval, "evaluation TSV")->required();
  finetune->add_option("--classes", ft_classes, "number of classes");
  finetune->add_option("--epochs", ft_epochs, "fine-tuning epochs");

  CommonOpts size_opts;
  int sr_seq_len = 128;
  auto* size_report = app.add_subcommand("size-report", "parameter/size/FLOPs accounting");
  add_common(size_report, size_opts, /*config_required=*/false);
  size_report->add_option("--seq-len", sr_seq_len, "sequence length for the FLOPs ratio");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*vocab_train) {
      std::ifstream in(vt_input, std::ios::binary);
      if (!in) vkd::fail("io", "cannot read " + vt_input);
      std::vector<std::string> lines;
      std::string line;
      while (std::getline(in, line)) lines.push_back(line);
      auto vocab = vkd::train_wordpiece(lines, vt_size);
      vkd::save_vocabulary(vocab, vt_out);
      std::printf("wrote %d tokens to %s\n", vocab.size(), vt_out.c_str());
    } else if (*segment) {
      auto vocab = vkd::load_vocabulary(sg_vocab);
      std::optional<vkd::Vocabulary> vocab2;
      if (!sg_vocab2.empty()) vocab2 = vkd::load_vocabulary(sg_vocab2);
      std::ifstream in(sg_text, std::ios::binary);
      if (!in) vkd::fail("io", "cannot read " + sg_text);
      vkd::Rng rng(sg_seed);
      std::string line;
      while (std::getline(in, line)) {
        const auto words = vkd::normalize_line(line);
        vkd::TaggedTokenSequence seq =
            vocab2 ? vkd::dual_segment(vocab, *vocab2, words, sg_p_dt, rng)
                   : vkd::segment_sequence(vocab, vkd::Source::Teacher, words);
        std::string out;
        for (const auto& entry : seq.entries) {
          const auto& v = (!vocab2 || entry.source == vkd::Source::Teacher) ? vocab : *vocab2;
          if (!out.empty()) out += ' ';
          out += v.tokens[static_cast<size_t>(entry.id)];
          if (vocab2) out += entry.source == vkd::Source::Student ? "/S" : "/T";
        }
        std::printf("%s\n", out.c_str());
      }
    } else if (*pretrain) {
      auto summary = vkd::pretrain_teacher(load_config(pretrain_opts));
      print_metrics_tail(summary);
      std::printf("teacher checkpoint: %s\n", summary.checkpoint_path.c_str());
    } else if (*distill) {
      auto cfg = load_config(distill_opts);
      auto summary = vkd::run_distillation(cfg);
      print_metrics_tail(summary);
      std::printf("student checkpoint: %s\n", summary.checkpoint_path.c_str());
    } else if (*eval_mlm) {
      auto cfg = load_config(eval_opts);
      auto vocab = vkd::load_vocabulary(cfg.student_vocab);
      vkd::Rng init_rng(cfg.seed);
      auto params = vkd::init_model<float>(cfg.student, init_rng);
      const std::string ckpt =
          eval_ckpt.empty() ? cfg.checkpoint_dir + "/student.ckpt" : eval_ckpt;
      vkd::load_registry(ckpt, params);
      const double acc = vkd::evaluate_masked_accuracy(
          params, cfg.student, vocab, vkd::ingest_corpus(cfg.eval_corpus), cfg.distill,
          cfg.seq_len, cfg.batch_size, cfg.eval_seed);
      std::printf("masked prediction accuracy: %.4f\n", acc);
    } else if (*finetune) {
      auto cfg = load_config(ft_opts);
      auto vocab = vkd::load_vocabulary(cfg.student_vocab);
      auto train_set = vkd::load_labeled_tsv(ft_train, ft_classes);
      auto eval_set = vkd::load_labeled_tsv(ft_eval, ft_classes);
      auto result = vkd::finetune_classifier(cfg.student, ft_ckpt, vocab, train_set, eval_set,
                                             ft_classes, ft_epochs, cfg.optim, cfg.seq_len,
                                             cfg.seed);
      std::printf("train accuracy %.4f  eval accuracy %.4f  eval F1 %.4f\n",
                  result.train_accuracy, result.eval_accuracy, result.eval_f1);
    } else if (*size_report) {
      std::vector<std::pair<std::string, vkd::ModelConfig>> models;
      vkd::ModelConfig reference;
      if (!size_opts.config_path.empty()) {
        auto cfg = vkd::load_run_config(size_opts.config_path);
        reference = cfg.teacher;
        models = {{"teacher", cfg.teacher}, {"student", cfg.student}};
      } else {
        auto profile = vkd::paper_scale_profile();
        // the deployed teacher, without the distillation-time dual tables
        reference = profile.teacher;
        reference.extra_vocab_size = 0;
        models.push_back({"teacher", reference});
        for (int d : {48, 96, 192}) {
          auto student = profile.student;
          student.hidden_dim = d;
          student.intermediate_dim = 4 * d;
          student.num_heads = d / 16;
          models.push_back({"student-d" + std::to_string(d), student});
        }
      }
      std::fputs(vkd::format_size_report(models, reference, sr_seq_len).c_str(), stdout);
    }
  } catch (const vkd::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.code() == "diverged" ? kExitDiverged : kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  }
  return kExitOk;
}
