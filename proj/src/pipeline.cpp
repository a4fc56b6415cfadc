#include "vkd/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace vkd {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config serialization
// ---------------------------------------------------------------------------

namespace {

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.extra_vocab_size = j.value("extra_vocab_size", 0);
  cfg.hidden_dim = j.at("hidden_dim").get<int>();
  cfg.intermediate_dim = j.at("intermediate_dim").get<int>();
  cfg.num_layers = j.at("num_layers").get<int>();
  cfg.num_heads = j.at("num_heads").get<int>();
  cfg.max_positions = j.at("max_positions").get<int>();
  cfg.type_vocab = j.value("type_vocab", 2);
  cfg.tie_mlm_decoder = j.value("tie_mlm_decoder", true);
  return cfg;
}

json model_config_to_json(const ModelConfig& cfg) {
  return json{{"vocab_size", cfg.vocab_size},
              {"extra_vocab_size", cfg.extra_vocab_size},
              {"hidden_dim", cfg.hidden_dim},
              {"intermediate_dim", cfg.intermediate_dim},
              {"num_layers", cfg.num_layers},
              {"num_heads", cfg.num_heads},
              {"max_positions", cfg.max_positions},
              {"type_vocab", cfg.type_vocab},
              {"tie_mlm_decoder", cfg.tie_mlm_decoder}};
}

DistillConfig distill_config_from_json(const json& j, uint64_t default_seed) {
  DistillConfig cfg;
  cfg.mode = mode_from_name(j.value("mode", "dual"));
  cfg.p_dt = j.value("p_dt", 0.5);
  cfg.epsilon = j.value("epsilon", 1.0);
  cfg.mask_rate = j.value("mask_rate", 0.15);
  if (j.contains("replace_probs")) {
    const auto probs = j.at("replace_probs").get<std::vector<double>>();
    if (probs.size() != 3) fail("shape-mismatch", "replace_probs wants [mask, random, keep]");
    cfg.replace_mask = probs[0];
    cfg.replace_random = probs[1];
    cfg.replace_keep = probs[2];
  }
  cfg.seed = j.value("seed", default_seed);
  cfg.proj_update_teacher = j.value("proj_update_teacher", false);
  cfg.validate();
  return cfg;
}

json distill_config_to_json(const DistillConfig& cfg) {
  return json{{"mode", mode_name(cfg.mode)},
              {"p_dt", cfg.p_dt},
              {"epsilon", cfg.epsilon},
              {"mask_rate", cfg.mask_rate},
              {"replace_probs", {cfg.replace_mask, cfg.replace_random, cfg.replace_keep}},
              {"seed", cfg.seed},
              {"proj_update_teacher", cfg.proj_update_teacher}};
}

OptimConfig optim_config_from_json(const json& j) {
  OptimConfig cfg;
  cfg.lr = j.value("lr", cfg.lr);
  cfg.beta1 = j.value("beta1", cfg.beta1);
  cfg.beta2 = j.value("beta2", cfg.beta2);
  cfg.eps = j.value("eps", cfg.eps);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.warmup_fraction = j.value("warmup_fraction", cfg.warmup_fraction);
  cfg.trust_lo = j.value("trust_lo", cfg.trust_lo);
  cfg.trust_hi = j.value("trust_hi", cfg.trust_hi);
  cfg.validate();
  return cfg;
}

json optim_config_to_json(const OptimConfig& cfg) {
  return json{{"lr", cfg.lr},
              {"beta1", cfg.beta1},
              {"beta2", cfg.beta2},
              {"eps", cfg.eps},
              {"weight_decay", cfg.weight_decay},
              {"warmup_fraction", cfg.warmup_fraction},
              {"trust_lo", cfg.trust_lo},
              {"trust_hi", cfg.trust_hi}};
}

}  // namespace

void RunConfig::validate() const {
  if (steps < 1) fail("shape-mismatch", "steps must be at least 1");
  if (batch_size < 1 || seq_len < 3) fail("shape-mismatch", "bad batch geometry");
  const std::vector<std::pair<std::string, std::string>> required = {
      {"corpus", corpus},
      {"eval_corpus", eval_corpus},
      {"teacher_vocab", teacher_vocab},
      {"student_vocab", student_vocab}};
  for (const auto& [label, path] : required) {
    if (path.empty()) fail("io", std::string(label) + " path missing from run config");
    if (!fs::exists(path)) fail("io", std::string(label) + " path does not exist: " + path);
  }
  if (!teacher_checkpoint.empty() && !fs::exists(teacher_checkpoint))
    fail("io", "teacher checkpoint does not exist: " + teacher_checkpoint);
  student.validate();
  if (distill.mode != DistillMode::NoKd) teacher.validate();
}

RunConfig run_config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    fail("io", std::string("run config is not valid JSON: ") + e.what());
  }
  try {
    RunConfig cfg;
    cfg.seed = j.value("seed", 0ULL);
    cfg.teacher = model_config_from_json(j.at("teacher"));
    cfg.student = model_config_from_json(j.at("student"));
    cfg.distill = distill_config_from_json(j.value("distill", json::object()), cfg.seed);
    cfg.optim = optim_config_from_json(j.value("optim", json::object()));
    cfg.corpus = j.value("corpus", "");
    cfg.eval_corpus = j.value("eval_corpus", "");
    cfg.teacher_vocab = j.value("teacher_vocab", "");
    cfg.student_vocab = j.value("student_vocab", "");
    cfg.checkpoint_dir = j.value("checkpoint_dir", "checkpoints");
    cfg.teacher_checkpoint = j.value("teacher_checkpoint", "");
    cfg.teacher_pretrain_steps = j.value("teacher_pretrain_steps", 0);
    cfg.steps = j.value("steps", 1);
    cfg.batch_size = j.value("batch_size", 8);
    cfg.seq_len = j.value("seq_len", 128);
    cfg.eval_every = j.value("eval_every", 100);
    cfg.eval_seed = j.value("eval_seed", 1234567ULL);
    cfg.deterministic = j.value("deterministic", false);
    return cfg;
  } catch (const json::exception& e) {
    fail("io", std::string("run config field error: ") + e.what());
  }
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j{{"teacher", model_config_to_json(cfg.teacher)},
         {"student", model_config_to_json(cfg.student)},
         {"distill", distill_config_to_json(cfg.distill)},
         {"optim", optim_config_to_json(cfg.optim)},
         {"corpus", cfg.corpus},
         {"eval_corpus", cfg.eval_corpus},
         {"teacher_vocab", cfg.teacher_vocab},
         {"student_vocab", cfg.student_vocab},
         {"checkpoint_dir", cfg.checkpoint_dir},
         {"teacher_checkpoint", cfg.teacher_checkpoint},
         {"teacher_pretrain_steps", cfg.teacher_pretrain_steps},
         {"steps", cfg.steps},
         {"batch_size", cfg.batch_size},
         {"seq_len", cfg.seq_len},
         {"eval_every", cfg.eval_every},
         {"seed", cfg.seed},
         {"eval_seed", cfg.eval_seed},
         {"deterministic", cfg.deterministic}};
  return j.dump(2);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot read run config " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return run_config_from_json(buffer.str());
}

RunConfig paper_scale_profile() {
  RunConfig cfg;
  cfg.teacher = {30522, 4928, 768, 3072, 12, 12, 512, 2, true};
  cfg.student = {4928, 0, 48, 192, 12, 3, 512, 2, true};
  cfg.distill.mode = DistillMode::Dual;
  cfg.distill.p_dt = 0.5;
  cfg.distill.epsilon = 1.0;
  cfg.optim.lr = 0.00125;
  cfg.steps = 250000;
  cfg.batch_size = 4096;
  cfg.seq_len = 128;
  return cfg;
}

// ---------------------------------------------------------------------------
// Corpus and metrics
// ---------------------------------------------------------------------------

std::vector<std::vector<std::string>> ingest_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot read corpus " + path);
  std::vector<std::vector<std::string>> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto words = normalize_line(line);
    if (!words.empty()) docs.push_back(std::move(words));
  }
  return docs;
}

namespace {

json metrics_record_to_json(const MetricsRecord& r) {
  return json{{"step", r.step},
              {"l_final", r.l_final},
              {"l_ce_student", r.l_ce_student},
              {"l_ce_teacher", r.l_ce_teacher},
              {"l_p", r.l_p},
              {"masked_accuracy", r.masked_accuracy},
              {"wall_clock_s", r.wall_clock_s}};
}

}  // namespace

std::string metrics_to_jsonl(const std::vector<MetricsRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += metrics_record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared training machinery
// ---------------------------------------------------------------------------

namespace {

// cyclic seeded-shuffle sampler over corpus indices
class ExampleSampler {
 public:
  ExampleSampler(size_t count, Rng rng) : count_(count), rng_(rng) { reshuffle(); }

  std::vector<size_t> next(size_t n) {
    std::vector<size_t> out;
    out.reserve(n);
    while (out.size() < n) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(count_);
    std::iota(order_.begin(), order_.end(), size_t{0});
    for (size_t i = count_; i > 1; --i)
      std::swap(order_[i - 1], order_[rng_.below(i)]);
    cursor_ = 0;
  }

  size_t count_;
  Rng rng_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
};

std::vector<std::vector<std::string>> pick(const std::vector<std::vector<std::string>>& corpus,
                                           const std::vector<size_t>& idx) {
  std::vector<std::vector<std::string>> out;
  out.reserve(idx.size());
  for (size_t i : idx) out.push_back(corpus[i]);
  return out;
}

double wall_seconds(std::chrono::steady_clock::time_point start, bool deterministic) {
  if (deterministic) return 0.0;
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

int argmax_row(const TensorPtrT<float>& logits, int row) {
  const int cols = logits->dims[1];
  const float* base = logits->data.data() + size_t(row) * cols;
  int best = 0;
  for (int c = 1; c < cols; ++c)
    if (base[c] > base[best]) best = c;
  return best;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("io", "cannot write " + path);
  out << text;
}

}  // namespace

double evaluate_masked_accuracy(const ParamRegistry& model, const ModelConfig& model_config,
                                const Vocabulary& vocab,
                                const std::vector<std::vector<std::string>>& eval_corpus,
                                const DistillConfig& mask_config, int seq_len, int batch_size,
                                uint64_t eval_seed, Source role) {
  if (eval_corpus.empty()) fail("no-eval-data", "evaluation corpus is empty");
  Rng rng(eval_seed);
  int64_t correct = 0, total = 0;
  for (size_t start = 0; start < eval_corpus.size(); start += size_t(batch_size)) {
    const size_t end = std::min(eval_corpus.size(), start + size_t(batch_size));
    std::vector<std::vector<std::string>> chunk(eval_corpus.begin() + start,
                                                eval_corpus.begin() + end);
    auto batch = build_single_batch(chunk, vocab, role, mask_config, seq_len, rng);
    if (batch.masked.empty()) continue;
    auto out = forward_mlm(model, model_config, batch);
    const auto& logits = role == Source::Student ? out.student_logits : out.teacher_logits;
    const auto& labels = role == Source::Student ? out.student_labels : out.teacher_labels;
    for (size_t i = 0; i < labels.size(); ++i) {
      correct += argmax_row(logits, static_cast<int>(i)) == labels[i];
      total += 1;
    }
  }
  if (total == 0) fail("no-eval-data", "no masked positions in the evaluation corpus");
  return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Teacher pretraining
// ---------------------------------------------------------------------------

TrainSummary pretrain_teacher(const RunConfig& config) {
  config.validate();
  const auto corpus = ingest_corpus(config.corpus);
  if (corpus.empty()) fail("empty-corpus", "training corpus has no documents");
  const auto eval_set = ingest_corpus(config.eval_corpus);
  const auto teacher_vocab = load_vocabulary(config.teacher_vocab);

  Rng root(config.seed);
  Rng init_rng = root.child(1);
  Rng data_rng = root.child(2);
  Rng batch_rng = Rng(config.distill.seed).child(3);

  auto params = init_model<float>(config.teacher, init_rng);
  auto views = views_of(params);
  OptimState state(config.optim);
  ExampleSampler sampler(corpus.size(), data_rng);

  // masking config only; dual segmentation plays no role here
  DistillConfig mask_cfg = config.distill;

  fs::create_directories(config.checkpoint_dir);
  TrainSummary summary;
  summary.checkpoint_path = (fs::path(config.checkpoint_dir) / "teacher.ckpt").string();
  summary.metrics_path = (fs::path(config.checkpoint_dir) / "teacher_metrics.jsonl").string();

  const auto start = std::chrono::steady_clock::now();
  const int64_t steps = config.teacher_pretrain_steps > 0 ? config.teacher_pretrain_steps
                                                          : config.steps;
  for (int64_t step = 1; step <= steps; ++step) {
    auto batch = build_single_batch(pick(corpus, sampler.next(size_t(config.batch_size))),
                                    teacher_vocab, Source::Teacher, mask_cfg, config.seq_len,
                                    batch_rng);
    auto out = forward_mlm(params, config.teacher, batch);
    auto loss = mlm_ce_loss(out);
    if (!std::isfinite(static_cast<double>(loss->data[0])))
      fail("diverged", "non-finite teacher pretraining loss at step " + std::to_string(step));
    backward(loss);
    state.lamb_step(views, lr_at(step, steps, config.optim.lr, config.optim.warmup_fraction));
    params.clear_grads();

    if (step == 1 || step == steps || step % config.eval_every == 0) {
      MetricsRecord r;
      r.step = step;
      r.l_final = r.l_ce_teacher = static_cast<double>(loss->data[0]);
      r.masked_accuracy = evaluate_masked_accuracy(params, config.teacher, teacher_vocab,
                                                   eval_set, mask_cfg, config.seq_len,
                                                   config.batch_size, config.eval_seed,
                                                   Source::Teacher);
      r.wall_clock_s = wall_seconds(start, config.deterministic);
      summary.records.push_back(r);
      save_registry(summary.checkpoint_path, params);
    }
  }
  save_registry(summary.checkpoint_path, params);
  write_text(summary.metrics_path, metrics_to_jsonl(summary.records));
  return summary;
}

// ---------------------------------------------------------------------------
// Distillation
// ---------------------------------------------------------------------------

namespace {

// teacher pretraining batches are all teacher-tagged, so only the teacher
// vocabulary head trains; evaluation masks with the same scheme
double scalar_of(const TensorPtrT<float>& t) { return static_cast<double>(t->data[0]); }

}  // namespace

TrainSummary run_distillation(const RunConfig& config) {
  config.validate();
  const auto corpus = ingest_corpus(config.corpus);
  if (corpus.empty()) fail("empty-corpus", "training corpus has no documents");
  const auto eval_set = ingest_corpus(config.eval_corpus);
  const auto student_vocab = load_vocabulary(config.student_vocab);
  const auto teacher_vocab = load_vocabulary(config.teacher_vocab);

  const DistillMode mode = config.distill.mode;
  const bool with_teacher = mode != DistillMode::NoKd;

  Rng root(config.seed);
  Rng init_rng = root.child(1);
  Rng data_rng = root.child(2);
  Rng batch_rng = Rng(config.distill.seed).child(4);
  Rng proj_rng = root.child(5);

  auto student = init_model<float>(config.student, init_rng);

  ParamRegistry teacher;
  if (with_teacher) {
    Rng teacher_init = root.child(6);
    teacher = init_model<float>(config.teacher, teacher_init);
    if (!config.teacher_checkpoint.empty()) {
      load_registry(config.teacher_checkpoint, teacher);
    } else {
      if (config.teacher_pretrain_steps < 1)
        fail("io", "distillation needs teacher_checkpoint or teacher_pretrain_steps");
      RunConfig pre = config;
      pre.checkpoint_dir = (fs::path(config.checkpoint_dir) / "teacher_pretrain").string();
      auto summary = pretrain_teacher(pre);
      load_registry(summary.checkpoint_path, teacher);
    }
  }

  ProjectionSet projections;
  std::vector<ParamViewT<float>> student_views = views_of(student);
  if (config.distill.uses_projection()) {
    check_correspondence(teacher, student);
    projections = init_projections<float>(config.teacher, config.student, proj_rng);
    for (auto& [name, tensor] : projections.named_tensors())
      student_views.push_back({name, tensor});
  }
  std::vector<ParamViewT<float>> teacher_views;
  if (with_teacher) teacher_views = views_of(teacher);

  OptimState student_state(config.optim);
  OptimState teacher_state(config.optim);
  ExampleSampler sampler(corpus.size(), data_rng);

  fs::create_directories(config.checkpoint_dir);
  TrainSummary summary;
  summary.checkpoint_path = (fs::path(config.checkpoint_dir) / "student.ckpt").string();
  summary.metrics_path = (fs::path(config.checkpoint_dir) / "metrics.jsonl").string();
  const std::string teacher_out = (fs::path(config.checkpoint_dir) / "teacher.ckpt").string();

  auto flush = [&]() {
    save_registry(summary.checkpoint_path, student);
    if (with_teacher) save_registry(teacher_out, teacher);
    write_text(summary.metrics_path, metrics_to_jsonl(summary.records));
  };

  const auto start = std::chrono::steady_clock::now();
  for (int64_t step = 1; step <= config.steps; ++step) {
    TensorPtrT<float> ce_student, ce_teacher, l_p;
    if (with_teacher) {
      auto dual = build_dual_batch(pick(corpus, sampler.next(size_t(config.batch_size))),
                                   teacher_vocab, student_vocab, config.distill, config.seq_len,
                                   batch_rng);
      auto student_out = forward_mlm(student, config.student, dual.student);
      auto teacher_out_fwd = forward_mlm(teacher, config.teacher, dual.teacher);
      summary.teacher_forward_count += 1;
      ce_student = mlm_ce_loss(student_out);
      ce_teacher = mlm_ce_loss(teacher_out_fwd);
      if (mode == DistillMode::DualProjDown)
        l_p = proj_loss_down(teacher, student, projections, config.distill.proj_update_teacher);
      else if (mode == DistillMode::DualProjUp)
        l_p = proj_loss_up(teacher, student, projections, config.distill.proj_update_teacher);
    } else {
      auto batch = build_single_batch(pick(corpus, sampler.next(size_t(config.batch_size))),
                                      student_vocab, Source::Student, config.distill,
                                      config.seq_len, batch_rng);
      ce_student = mlm_ce_loss(forward_mlm(student, config.student, batch));
      ce_teacher = scalar_tensor<float>(0.0f);
    }

    auto l_ce = add(ce_student, ce_teacher);
    auto l_final = total_loss(l_p, l_ce, static_cast<float>(config.distill.epsilon), mode);
    if (!std::isfinite(scalar_of(l_final))) {
      flush();
      fail("diverged", "non-finite loss at step " + std::to_string(step));
    }

    backward(l_final);
    const double lr = lr_at(step, config.steps, config.optim.lr, config.optim.warmup_fraction);
    student_state.lamb_step(student_views, lr);
    if (with_teacher) teacher_state.lamb_step(teacher_views, lr);
    student.clear_grads();
    if (with_teacher) teacher.clear_grads();
    for (auto& [name, tensor] : projections.named_tensors())
      if (tensor) tensor->clear_grad();

    if (step == 1 || step == config.steps || step % config.eval_every == 0) {
      MetricsRecord r;
      r.step = step;
      r.l_final = scalar_of(l_final);
      r.l_ce_student = scalar_of(ce_student);
      r.l_ce_teacher = scalar_of(ce_teacher);
      r.l_p = l_p ? scalar_of(l_p) : 0.0;
      r.masked_accuracy = evaluate_masked_accuracy(student, config.student, student_vocab,
                                                   eval_set, config.distill, config.seq_len,
                                                   config.batch_size, config.eval_seed);
      r.wall_clock_s = wall_seconds(start, config.deterministic);
      summary.records.push_back(r);
      flush();
    }
  }
  flush();
  return summary;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

std::vector<LabeledExample> load_labeled_tsv(const std::string& path, int classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot read dataset " + path);
  std::vector<LabeledExample> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      fail("bad-dataset", "line " + std::to_string(line_no) + " has no tab separator");
    const std::string label_text = line.substr(0, tab);
    int label;
    try {
      size_t used = 0;
      label = std::stoi(label_text, &used);
      if (used != label_text.size()) throw std::invalid_argument(label_text);
    } catch (const std::exception&) {
      fail("bad-dataset", "unknown label '" + label_text + "' on line " + std::to_string(line_no));
    }
    if (label < 0 || label >= classes)
      fail("bad-dataset", "label " + std::to_string(label) + " outside [0," +
                              std::to_string(classes) + ")");
    out.push_back({label, normalize_line(line.substr(tab + 1))});
  }
  return out;
}

namespace {

Batch classification_batch(const std::vector<const LabeledExample*>& examples,
                           const Vocabulary& vocab, int seq_len) {
  Batch batch;
  batch.seq_len = seq_len;
  for (const auto* ex : examples) {
    auto seq = segment_sequence(vocab, Source::Student, ex->words);
    std::vector<int> ids;
    for (const auto& e : seq.entries) {
      if (static_cast<int>(ids.size()) >= seq_len - 2) break;
      ids.push_back(e.id);
    }
    batch.token_ids.push_back(Vocabulary::kCls);
    for (int id : ids) batch.token_ids.push_back(id);
    batch.token_ids.push_back(Vocabulary::kSep);
    for (int i = static_cast<int>(ids.size()) + 2; i < seq_len; ++i)
      batch.token_ids.push_back(Vocabulary::kPad);
    batch.batch_size += 1;
  }
  batch.source_tags.assign(batch.token_ids.size(), Source::Student);
  batch.type_ids.assign(batch.token_ids.size(), 0);
  batch.attention_mask.assign(batch.token_ids.size(), 0);
  for (int b = 0; b < batch.batch_size; ++b) {
    for (int t = 0; t < seq_len; ++t) {
      const size_t i = size_t(b) * seq_len + t;
      batch.attention_mask[i] = batch.token_ids[i] != Vocabulary::kPad || t == 0 ? 1 : 0;
    }
  }
  return batch;
}

struct ClassifierEval {
  double accuracy = 0.0;
  double f1 = 0.0;
};

ClassifierEval score_classifier(const ParamRegistry& params, const ModelConfig& config,
                                const TensorPtrT<float>& w, const TensorPtrT<float>& b,
                                const Vocabulary& vocab,
                                const std::vector<LabeledExample>& data, int seq_len,
                                int batch_size) {
  int64_t correct = 0;
  int64_t tp = 0, fp = 0, fn = 0;
  for (size_t start = 0; start < data.size(); start += size_t(batch_size)) {
    const size_t end = std::min(data.size(), start + size_t(batch_size));
    std::vector<const LabeledExample*> chunk;
    for (size_t i = start; i < end; ++i) chunk.push_back(&data[i]);
    auto batch = classification_batch(chunk, vocab, seq_len);
    auto logits = add_bias(matmul(select_position(encode(params, config, batch), 0), w), b);
    for (size_t i = 0; i < chunk.size(); ++i) {
      const int predicted = argmax_row(logits, static_cast<int>(i));
      const int label = chunk[i]->label;
      correct += predicted == label;
      tp += predicted == 1 && label == 1;
      fp += predicted == 1 && label != 1;
      fn += predicted != 1 && label == 1;
    }
  }
  ClassifierEval eval;
  eval.accuracy = data.empty() ? 0.0 : static_cast<double>(correct) / data.size();
  const double denom = 2.0 * tp + fp + fn;
  eval.f1 = denom > 0.0 ? 2.0 * tp / denom : 0.0;
  return eval;
}

}  // namespace

FinetuneResult finetune_classifier(const ModelConfig& student_config,
                                   const std::string& student_checkpoint,
                                   const Vocabulary& student_vocab,
                                   const std::vector<LabeledExample>& train_set,
                                   const std::vector<LabeledExample>& eval_set, int classes,
                                   int epochs, const OptimConfig& optim, int seq_len,
                                   uint64_t seed) {
  if (train_set.empty()) fail("bad-dataset", "empty training set");
  if (classes < 2) fail("bad-dataset", "need at least two classes");
  Rng root(seed);
  Rng init_rng = root.child(7);
  Rng order_rng = root.child(8);

  auto params = init_model<float>(student_config, init_rng);
  load_registry(student_checkpoint, params);

  const int d = student_config.hidden_dim;
  auto w = tensor<float>({d, classes}, true);
  fill_xavier(*w, d, classes, init_rng);
  auto b = tensor<float>({classes}, true);

  auto views = views_of(params);
  views.push_back({"classifier.weight", w});
  views.push_back({"classifier.bias", b});
  OptimState state(optim);

  const int batch_size = 16;
  const int64_t steps_per_epoch =
      (static_cast<int64_t>(train_set.size()) + batch_size - 1) / batch_size;
  const int64_t total_steps = steps_per_epoch * epochs;
  int64_t step = 0;

  std::vector<size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), size_t{0});
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[order_rng.below(i)]);
    for (size_t start = 0; start < order.size(); start += size_t(batch_size)) {
      const size_t end = std::min(order.size(), start + size_t(batch_size));
      std::vector<const LabeledExample*> chunk;
      std::vector<int> labels;
      for (size_t i = start; i < end; ++i) {
        chunk.push_back(&train_set[order[i]]);
        labels.push_back(train_set[order[i]].label);
      }
      auto batch = classification_batch(chunk, student_vocab, seq_len);
      auto logits = add_bias(matmul(select_position(encode(params, student_config, batch), 0), w), b);
      auto loss = cross_entropy(logits, labels, Reduction::Mean);
      if (!std::isfinite(static_cast<double>(loss->data[0])))
        fail("diverged", "non-finite fine-tuning loss");
      backward(loss);
      step += 1;
      state.lamb_step(views, lr_at(step, total_steps, optim.lr, optim.warmup_fraction));
      params.clear_grads();
      w->clear_grad();
      b->clear_grad();
    }
  }

  FinetuneResult result;
  result.train_accuracy =
      score_classifier(params, student_config, w, b, student_vocab, train_set, seq_len, batch_size)
          .accuracy;
  const auto eval = eval_set.empty()
                        ? ClassifierEval{}
                        : score_classifier(params, student_config, w, b, student_vocab, eval_set,
                                           seq_len, batch_size);
  result.eval_accuracy = eval.accuracy;
  result.eval_f1 = eval.f1;
  return result;
}

// ---------------------------------------------------------------------------
// Size accounting
// ---------------------------------------------------------------------------

SizeReport report_model_size(const ModelConfig& config, const ModelConfig& reference,
                             int seq_len) {
  SizeReport report;
  report.params = count_params(config);
  report.size_mb = static_cast<double>(report.params) * 4.0 / (1024.0 * 1024.0);
  report.flops_ratio = static_cast<double>(flops_per_token(config, seq_len)) /
                       static_cast<double>(flops_per_token(reference, seq_len));
  return report;
}

std::string format_size_report(const std::vector<std::pair<std::string, ModelConfig>>& models,
                               const ModelConfig& reference, int seq_len) {
  std::ostringstream os;
  os << "model            vocab   extra  hidden  #params      size(MB)  flops vs reference\n";
  for (const auto& [name, cfg] : models) {
    const auto r = report_model_size(cfg, reference, seq_len);
    os << std::left << std::setw(16) << name << " " << std::right << std::setw(6)
       << cfg.vocab_size << "  " << std::setw(5) << cfg.extra_vocab_size << "  " << std::setw(6)
       << cfg.hidden_dim << "  " << std::setw(11) << r.params << "  " << std::setw(8)
       << std::fixed << std::setprecision(1) << r.size_mb << "  " << std::setw(6)
       << std::setprecision(2) << r.flops_ratio * 100.0 << "%\n";
  }
  os << "flops accounting: " << flops_formula() << " at seq_len " << seq_len << "\n";
  return os.str();
}

}  // namespace vkd
