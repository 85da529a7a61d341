#pragma once

#include <optional>
#include <string>
#include <vector>

#include "semrec/checkpoint.hpp"
#include "semrec/tensor.hpp"
#include "semrec/textcodec.hpp"

namespace semrec {

struct BackboneConfig {
  int layers = 2;
  int model_dim = 64;
  int heads = 4;
  int ffn_dim = 256;
  int max_seq_len = 256;
  int vocab_size = 0;   // must equal EmbeddingLayout::total()
  int lora_rank = 0;    // 0 disables the adapters
  bool lora_all_projections = false;  // default: Q and V only
  float dropout = 0.0f;

  void validate() const;
};

// One low-rank adapter: effective weight = base + scaling * down * up.
// up starts at zero, so a fresh adapter is an exact no-op.
struct LoraAdapter {
  Tensor down;  // [D, r]
  Tensor up;    // [r, D]
  bool attached() const { return down.defined(); }
};

enum class FreezePolicy { TokenizerFreeze, RecommenderFreeze, None };

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct ParameterPartition {
  std::vector<NamedParam> frozen;
  std::vector<NamedParam> trainable;

  int64_t frozen_scalars() const;
  int64_t trainable_scalars() const;
  std::vector<Tensor> trainable_tensors() const;
};

struct ForwardResult {
  Tensor hidden;  // [seq, D], final-layer states after the closing norm
  Tensor logits;  // [seq, vocab], weight-tied against the embedding tables
};

// Decoder-only pre-norm transformer with GELU FFN, learned absolute
// positions, weight-tied output head, an externally supplied attention mask
// per call, and optional LoRA adapters on the attention projections.
class Backbone {
 public:
  Backbone(BackboneConfig config, EmbeddingLayout layout, uint64_t seed);

  const BackboneConfig& config() const { return config_; }
  const EmbeddingLayout& layout() const { return layout_; }

  // Input embeddings for a token sequence: table lookup everywhere, the
  // supplied vectors written verbatim at PLACEHOLDER positions, positional
  // embeddings added on top.
  Tensor embed(const TokenSequence& seq, const std::optional<Tensor>& placeholder_fill = {}) const;

  ForwardResult forward(const Tensor& input_embeddings, const AttnMask& mask) const;

  ParameterPartition partition_parameters(FreezePolicy policy);

  std::vector<NamedParam> named_parameters() const;
  int64_t parameter_count() const;

  // Folds every attached adapter into its base projection and re-initializes
  // the adapters (fresh rank, up = 0). Used when a downstream stage reuses
  // the backbone with its own adapter budget.
  void merge_lora_into_base();
  void reset_lora(int rank, bool all_projections, uint64_t seed);

  void set_training(bool on) { training_ = on; }

  void save(const std::string& manifest_path, const MetaMap& extra_meta = {}) const;
  static Backbone load(const std::string& manifest_path);

  // Concatenated embedding tables in vocabulary id order.
  Tensor token_table() const;

 private:
  struct LayerWeights {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    LoraAdapter lora_q, lora_k, lora_v, lora_o;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;
  };

  Tensor project(const Tensor& x, const Tensor& w, const Tensor& b, const LoraAdapter& lora) const;
  Tensor maybe_dropout(const Tensor& x) const;
  void init_lora(int rank, bool all_projections, uint64_t seed);
  void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  BackboneConfig config_;
  EmbeddingLayout layout_;
  float lora_scaling_ = 0.0f;

  Tensor word_emb_, dense_emb_, ph_emb_, task_emb_, code_emb_;
  Tensor pos_emb_;
  std::vector<LayerWeights> layers_;
  Tensor final_gain_, final_bias_;
  bool training_ = false;
  mutable std::mt19937 dropout_rng_;
};

}  // namespace semrec
