#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vkd/error.hpp"
#include "vkd/rng.hpp"
#include "vkd/tensor.hpp"

namespace vkd {

// Dimension class of one tensor axis. Teacher and student models share a
// structural skeleton: paired tensors have the same name and per-axis classes,
// and the class decides how the projection losses map that axis (Hidden and
// Intermediate axes get the shared U/V pair of their group, the rest map by
// identity; VocabT axes have no student counterpart at all).
enum class DimClass : uint8_t { Hidden, Intermediate, VocabS, VocabT, Position, Type, Scalar };

struct ModelConfig {
  int vocab_size = 0;        // primary vocabulary (the teacher's own when dual)
  int extra_vocab_size = 0;  // student-vocabulary table on a dual-input teacher; 0 otherwise
  int hidden_dim = 0;
  int intermediate_dim = 0;
  int num_layers = 0;
  int num_heads = 0;
  int max_positions = 0;
  int type_vocab = 2;
  bool tie_mlm_decoder = true;

  bool dual() const { return extra_vocab_size > 0; }
  void validate() const;
};

// Exact trainable-parameter count for a config: embeddings, per-layer
// attention/FFN blocks with their layer norms, pooler, tied MLM head, NSP
// head. The decoder is tied to the embedding tables and contributes only its
// biases.
int64_t count_params(const ModelConfig& config);

// Forward-pass multiply-accumulate count per token, matmul MACs only:
//   L * (4*d^2 + 2*seq_len*d + 2*d*i)
// per layer: the four d x d attention projections, the score and mixing
// products against seq_len keys, and the two FFN products. Embedding lookups
// contribute no MACs and task heads are excluded, so a 0-layer model costs 0.
int64_t flops_per_token(const ModelConfig& config, int seq_len);
const char* flops_formula();

// ---------------------------------------------------------------------------
// Parameter registry
// ---------------------------------------------------------------------------

template <typename S>
struct ParamEntryT {
  std::string name;
  TensorPtrT<S> tensor;
  std::vector<DimClass> classes;  // one per axis

  bool has_teacher_vocab_axis() const {
    for (DimClass c : classes)
      if (c == DimClass::VocabT) return true;
    return false;
  }
};

// Ordered name -> tensor map holding every trainable tensor of one model
// exactly once. Iteration order is insertion order, which init_model keeps
// fixed, so RNG consumption and optimizer sweeps are deterministic.
template <typename S>
class ParamRegistryT {
 public:
  void add(const std::string& name, TensorPtrT<S> tensor, std::vector<DimClass> classes) {
    if (index_.count(name)) fail("registry-mismatch", "duplicate tensor name " + name);
    if (classes.size() != tensor->dims.size())
      fail("registry-mismatch", "axis class count mismatch for " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(tensor), std::move(classes)});
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const ParamEntryT<S>& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail("registry-mismatch", "no tensor named " + name);
    return entries_[it->second];
  }

  const TensorPtrT<S>& get(const std::string& name) const { return entry(name).tensor; }

  std::vector<ParamEntryT<S>>& entries() { return entries_; }
  const std::vector<ParamEntryT<S>>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  int64_t total_elements() const {
    int64_t total = 0;
    for (const auto& e : entries_) total += e.tensor->numel();
    return total;
  }

  void clear_grads() {
    for (auto& e : entries_) e.tensor->clear_grad();
  }

 private:
  std::vector<ParamEntryT<S>> entries_;
  std::map<std::string, size_t> index_;
};

using ParamRegistry = ParamRegistryT<float>;

// Structural correspondence required by the projection losses: every student
// tensor exists in the teacher with identical rank and axis classes, and every
// teacher tensor except the teacher-vocabulary ones exists in the student.
template <typename S>
void check_correspondence(const ParamRegistryT<S>& teacher, const ParamRegistryT<S>& student) {
  for (const auto& e : student.entries()) {
    if (!teacher.has(e.name)) fail("registry-mismatch", "teacher lacks tensor " + e.name);
    if (teacher.entry(e.name).classes != e.classes)
      fail("registry-mismatch", "axis classes differ for " + e.name);
  }
  for (const auto& e : teacher.entries()) {
    if (!e.has_teacher_vocab_axis() && !student.has(e.name))
      fail("registry-mismatch", "student lacks tensor " + e.name);
  }
}

// ---------------------------------------------------------------------------
// Batch
// ---------------------------------------------------------------------------

struct MaskedSlot {
  int example;
  int position;  // sequence position (CLS offset included)
  Source role;   // which vocabulary the original word was segmented with
  int label;     // original token id in that vocabulary
};

struct Batch {
  int batch_size = 0;
  int seq_len = 0;
  std::vector<int> token_ids;           // batch * seq, row-major
  std::vector<Source> source_tags;      // same layout
  std::vector<uint8_t> attention_mask;  // 1 = real token, 0 = padding
  std::vector<int> type_ids;            // same layout
  std::vector<MaskedSlot> masked;       // example-major, position-ascending

  int at(int example, int position) const { return token_ids[size_t(example) * seq_len + position]; }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace names {
inline std::string layer(int l, const char* suffix) {
  return "layer" + std::to_string(l) + "." + suffix;
}
inline constexpr const char* kWordTeacher = "embeddings.word_tvocab";
inline constexpr const char* kWordStudent = "embeddings.word_svocab";
inline constexpr const char* kPosition = "embeddings.position";
inline constexpr const char* kType = "embeddings.type";
inline constexpr const char* kMlmBiasTeacher = "mlm.bias_tvocab";
inline constexpr const char* kMlmBiasStudent = "mlm.bias_svocab";
}  // namespace names

// Xavier-initialized parameter registry for a config. Weight matrices are
// Glorot-uniform, biases zero, layer-norm gains one. Equal seeds give
// identical registries.
template <typename S>
ParamRegistryT<S> init_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  ParamRegistryT<S> reg;
  const int d = config.hidden_dim;
  const int i = config.intermediate_dim;

  auto weight = [&](const std::string& name, int rows, int cols, DimClass c0, DimClass c1) {
    auto t = tensor<S>({rows, cols}, true);
    fill_xavier(*t, rows, cols, rng);
    reg.add(name, t, {c0, c1});
  };
  auto bias = [&](const std::string& name, int n, DimClass c0) {
    reg.add(name, tensor<S>({n}, true), {c0});
  };
  auto ln = [&](const std::string& prefix) {
    auto gain = tensor<S>({d}, true);
    std::fill(gain->data.begin(), gain->data.end(), S(1));
    reg.add(prefix + ".gain", gain, {DimClass::Hidden});
    bias(prefix + ".bias", d, DimClass::Hidden);
  };

  if (config.dual()) {
    weight(names::kWordTeacher, config.vocab_size, d, DimClass::VocabT, DimClass::Hidden);
    weight(names::kWordStudent, config.extra_vocab_size, d, DimClass::VocabS, DimClass::Hidden);
  } else {
    weight(names::kWordStudent, config.vocab_size, d, DimClass::VocabS, DimClass::Hidden);
  }
  weight(names::kPosition, config.max_positions, d, DimClass::Position, DimClass::Hidden);
  weight(names::kType, config.type_vocab, d, DimClass::Type, DimClass::Hidden);
  ln("embeddings.ln");

  for (int l = 0; l < config.num_layers; ++l) {
    for (const char* part : {"attn.query", "attn.key", "attn.value", "attn.output"}) {
      weight(names::layer(l, part) + ".weight", d, d, DimClass::Hidden, DimClass::Hidden);
      bias(names::layer(l, part) + ".bias", d, DimClass::Hidden);
    }
    ln(names::layer(l, "attn.ln"));
    weight(names::layer(l, "ffn.in.weight"), d, i, DimClass::Hidden, DimClass::Intermediate);
    bias(names::layer(l, "ffn.in.bias"), i, DimClass::Intermediate);
    weight(names::layer(l, "ffn.out.weight"), i, d, DimClass::Intermediate, DimClass::Hidden);
    bias(names::layer(l, "ffn.out.bias"), d, DimClass::Hidden);
    ln(names::layer(l, "ffn.ln"));
  }

  weight("pooler.weight", d, d, DimClass::Hidden, DimClass::Hidden);
  bias("pooler.bias", d, DimClass::Hidden);

  weight("mlm.transform.weight", d, d, DimClass::Hidden, DimClass::Hidden);
  bias("mlm.transform.bias", d, DimClass::Hidden);
  ln("mlm.ln");
  if (config.dual()) {
    bias(names::kMlmBiasTeacher, config.vocab_size, DimClass::VocabT);
    bias(names::kMlmBiasStudent, config.extra_vocab_size, DimClass::VocabS);
  } else {
    bias(names::kMlmBiasStudent, config.vocab_size, DimClass::VocabS);
  }

  weight("nsp.weight", d, 2, DimClass::Hidden, DimClass::Type);
  bias("nsp.bias", 2, DimClass::Type);
  return reg;
}

// Encoder forward: embeddings (word by source tag, position, type), layer
// norm, then num_layers of post-norm multi-head self-attention + GELU FFN
// blocks. Positions with attention_mask 0 cannot influence other positions.
template <typename S>
TensorPtrT<S> encode(const ParamRegistryT<S>& params, const ModelConfig& config,
                     const Batch& batch) {
  const int B = batch.batch_size, T = batch.seq_len, d = config.hidden_dim;
  if (B <= 0 || T <= 0) fail("shape-mismatch", "empty batch");
  if (T > config.max_positions) fail("shape-mismatch", "sequence longer than max_positions");
  if (static_cast<int>(batch.token_ids.size()) != B * T)
    fail("shape-mismatch", "token id buffer does not match batch dims");

  TensorPtrT<S> words;
  if (config.dual()) {
    words = dual_embedding_lookup(params.get(names::kWordTeacher),
                                  params.get(names::kWordStudent), batch.token_ids,
                                  batch.source_tags);
  } else {
    for (Source tag : batch.source_tags)
      if (tag == Source::Teacher)
        fail("wrong-consumer", "teacher-tagged token fed to a single-vocabulary model");
    words = embedding_lookup(params.get(names::kWordStudent), batch.token_ids);
  }

  std::vector<int> position_ids(size_t(B) * T);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t) position_ids[size_t(b) * T + t] = t;
  auto positions = embedding_lookup(params.get(names::kPosition), position_ids);
  auto types = embedding_lookup(params.get(names::kType), batch.type_ids);

  auto x = add(add(words, positions), types);  // [B*T, d]
  x = layer_norm(x, params.get("embeddings.ln.gain"), params.get("embeddings.ln.bias"),
                 S(1e-12));

  // additive key bias: 0 for real tokens, -1e9 for padding
  auto attn_bias = tensor<S>({B, T});
  for (size_t i = 0; i < batch.attention_mask.size(); ++i)
    attn_bias->data[i] = batch.attention_mask[i] ? S(0) : S(-1e9);

  const int H = config.num_heads;
  const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d / H)));
  auto dense = [&](const TensorPtrT<S>& in, const std::string& prefix) {
    return add_bias(matmul(in, params.get(prefix + ".weight")), params.get(prefix + ".bias"));
  };

  for (int l = 0; l < config.num_layers; ++l) {
    auto q = split_heads(reshape(dense(x, names::layer(l, "attn.query")), {B, T, d}), H);
    auto k = split_heads(reshape(dense(x, names::layer(l, "attn.key")), {B, T, d}), H);
    auto v = split_heads(reshape(dense(x, names::layer(l, "attn.value")), {B, T, d}), H);
    auto scores = add_attention_bias(scale(bmm_nt(q, k), inv_sqrt_hd), attn_bias, H);
    auto mixed = reshape(merge_heads(bmm(softmax_rows(scores), v), H), {B * T, d});
    auto attn_out = dense(mixed, names::layer(l, "attn.output"));
    x = layer_norm(add(x, attn_out), params.get(names::layer(l, "attn.ln.gain")),
                   params.get(names::layer(l, "attn.ln.bias")), S(1e-12));
    auto inner = gelu(dense(x, names::layer(l, "ffn.in")));
    auto ffn_out = dense(inner, names::layer(l, "ffn.out"));
    x = layer_norm(add(x, ffn_out), params.get(names::layer(l, "ffn.ln.gain")),
                   params.get(names::layer(l, "ffn.ln.bias")), S(1e-12));
  }
  return reshape(x, {B, T, d});
}

// Masked-LM forward. Masked positions are routed to the vocabulary head that
// matches the masked word's source tag; decoders are tied to the embedding
// tables. Either logits tensor is null when no position routes to it.
template <typename S>
struct MlmOutT {
  TensorPtrT<S> hidden;                 // [B, T, d]
  TensorPtrT<S> teacher_logits;         // [n_teacher, vocab_t] or null
  std::vector<int> teacher_labels;
  TensorPtrT<S> student_logits;         // [n_student, vocab_s] or null
  std::vector<int> student_labels;
  int masked_count() const {
    return static_cast<int>(teacher_labels.size() + student_labels.size());
  }
};

template <typename S>
MlmOutT<S> forward_mlm(const ParamRegistryT<S>& params, const ModelConfig& config,
                       const Batch& batch) {
  MlmOutT<S> out;
  out.hidden = encode(params, config, batch);
  const int T = batch.seq_len, d = config.hidden_dim;
  auto flat = reshape(out.hidden, {batch.batch_size * T, d});

  std::vector<int> teacher_rows, student_rows;
  for (const auto& slot : batch.masked) {
    const int row = slot.example * T + slot.position;
    if (slot.role == Source::Teacher) {
      if (!config.dual())
        fail("wrong-consumer", "teacher-vocabulary label in a single-vocabulary model");
      teacher_rows.push_back(row);
      out.teacher_labels.push_back(slot.label);
    } else {
      student_rows.push_back(row);
      out.student_labels.push_back(slot.label);
    }
  }

  auto head = [&](const std::vector<int>& rows, const char* table, const char* bias_name) {
    auto h = gather_rows(flat, rows);
    h = add_bias(matmul(h, params.get("mlm.transform.weight")), params.get("mlm.transform.bias"));
    h = layer_norm(gelu(h), params.get("mlm.ln.gain"), params.get("mlm.ln.bias"), S(1e-12));
    return add_bias(matmul(h, transpose2d(params.get(table))), params.get(bias_name));
  };
  if (!teacher_rows.empty())
    out.teacher_logits = head(teacher_rows, names::kWordTeacher, names::kMlmBiasTeacher);
  if (!student_rows.empty())
    out.student_logits = head(student_rows, names::kWordStudent, names::kMlmBiasStudent);
  return out;
}

// CLS pooling: tanh affine over the first position. Present for architecture
// parity; the classification path reads the CLS encoding directly.
template <typename S>
TensorPtrT<S> pool(const ParamRegistryT<S>& params, const TensorPtrT<S>& hidden) {
  auto cls = select_position(hidden, 0);
  return tanh_op(add_bias(matmul(cls, params.get("pooler.weight")), params.get("pooler.bias")));
}

}  // namespace vkd
