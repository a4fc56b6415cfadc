#include "vkd/encoder.hpp"

namespace vkd {

void ModelConfig::validate() const {
  if (vocab_size < 1 || hidden_dim < 1 || intermediate_dim < 1 || num_layers < 0 ||
      num_heads < 1 || max_positions < 1 || type_vocab < 1 || extra_vocab_size < 0)
    fail("shape-mismatch", "model config dimensions must be positive");
  if (hidden_dim % num_heads != 0)
    fail("shape-mismatch", "hidden_dim must be divisible by num_heads");
  if (!tie_mlm_decoder)
    fail("shape-mismatch", "untied MLM decoders are not supported");
}

int64_t count_params(const ModelConfig& config) {
  config.validate();
  const int64_t v = config.vocab_size;
  const int64_t e = config.extra_vocab_size;
  const int64_t d = config.hidden_dim;
  const int64_t i = config.intermediate_dim;
  const int64_t p = config.max_positions;

  const int64_t embeddings = v * d + e * d + p * d + config.type_vocab * d + 2 * d;
  const int64_t per_layer = 4 * (d * d + d)        // q, k, v, output projections
                            + 2 * d                // attention layer norm
                            + (d * i + i + i * d + d)  // ffn in/out with biases
                            + 2 * d;               // ffn layer norm
  const int64_t pooler = d * d + d;
  const int64_t mlm_head = d * d + d + 2 * d + v + e;  // transform, ln, tied-decoder biases
  const int64_t nsp_head = 2 * d + 2;
  return embeddings + config.num_layers * per_layer + pooler + mlm_head + nsp_head;
}

int64_t flops_per_token(const ModelConfig& config, int seq_len) {
  config.validate();
  if (seq_len < 1) fail("shape-mismatch", "seq_len must be at least 1");
  const int64_t d = config.hidden_dim;
  const int64_t i = config.intermediate_dim;
  return config.num_layers * (4 * d * d + 2 * int64_t(seq_len) * d + 2 * d * i);
}

const char* flops_formula() {
  return "L * (4*d^2 + 2*seq_len*d + 2*d*i) multiply-accumulates per token "
         "(attention projections, score/mix products, FFN); embedding lookups "
         "and task heads contribute none";
}

}  // namespace vkd
