#pragma once

#include <string>
#include <vector>

#include "semrec/adam.hpp"
#include "semrec/backbone.hpp"
#include "semrec/textcodec.hpp"

namespace semrec {

// An item's ordered attribute list. The first content_attr_count attributes
// form the content block; every attribute is also a task target
// (reconstruction for indices <= r, generation above).
struct ItemRecord {
  std::string item_id;
  std::vector<std::pair<std::string, std::string>> attributes;  // (name, text)
  int content_attr_count = 0;  // r

  int attr_count() const { return static_cast<int>(attributes.size()); }  // m
  void validate() const;
};

// "reconstruct_<name>" for content attributes, "generate_<name>" otherwise.
std::string task_name_for(const ItemRecord& item, int task_index);
// Task names for one schema-defining item, in task-index order.
std::vector<std::string> tokenizer_task_names(const ItemRecord& schema);

// Half-open position spans of the four blocks of one tokenizer sequence.
struct BlockLayout {
  int content_begin = 0, content_end = 0;
  int token_begin = 0, token_end = 0;
  int placeholder_begin = 0, placeholder_end = 0;
  int task_begin = 0, task_end = 0;
  int v = 0;

  int size() const { return task_end; }
  void validate() const;
};

struct TokenizerSample {
  TokenSequence sequence;
  BlockLayout layout;
  int task_index = 0;  // 1-based
  std::string target_attribute;
};

enum class MaskDirection {
  Compress,     // token block reads content, task block reads placeholders
  PaperLiteral  // content reads token block, placeholder reads task block
};

// sequence = [content(a_1..a_r); <dt_1..dt_v>; <ph_1..ph_v>; t_i; a_i; <eos>].
// Overlong sequences lose content tokens from the right; the other blocks are
// structural and never truncated.
TokenizerSample build_sample(const ItemRecord& item, int task_index, const Vocabulary& vocab,
                             int max_seq_len);

// Causal attention inside every block; across blocks only token->content and
// task->placeholder (queries -> keys) are open. Everything else is blocked,
// which forces task outputs through the placeholder bottleneck.
AttnMask build_cascaded_mask(const BlockLayout& layout,
                             MaskDirection direction = MaskDirection::Compress);

struct DualForwardOptions {
  MaskDirection mask_direction = MaskDirection::Compress;
  bool stop_gradient_fill = false;
};

struct DualForwardResult {
  Tensor loss;           // scalar, next-token cross-entropy over the task answer
  Tensor dense_outputs;  // [v, D] final-layer states at the dense-token positions
};

// Pass 1 runs content+token under the restricted mask and captures the dense
// outputs; pass 2 runs the full sequence with placeholders filled by them.
// Gradients flow through both passes unless stop_gradient_fill is set.
DualForwardResult dual_forward(const TokenizerSample& sample, const Backbone& model,
                               const DualForwardOptions& opts = {});

struct TokenizerTrainOptions {
  int epochs = 5;
  int batch_size = 8;
  AdamConfig adam = {};
  DualForwardOptions dual = {};
  bool verbose = false;
};

struct TokenizerTrainReport {
  double initial_loss = 0.0;  // mean loss over all samples before any update
  std::vector<double> epoch_losses;
  int64_t samples_per_epoch = 0;
};

// Iterates shuffled (item, task) samples, m per item, with the
// TOKENIZER_FREEZE partition active. Aborts if a full epoch's mean loss
// exceeds twice the first epoch's.
TokenizerTrainReport train_tokenizer(const std::vector<ItemRecord>& items, Backbone& model,
                                     const Vocabulary& vocab, const TokenizerTrainOptions& opts,
                                     uint64_t seed);

// E: v x n x D dense-token outputs, one column per item.
struct DenseEmbeddingMatrix {
  int v = 0;
  int n = 0;
  int dim = 0;
  std::vector<float> data;  // [v][n][dim]
  std::vector<std::string> item_ids;

  float at(int position, int item, int channel) const {
    return data[(static_cast<size_t>(position) * n + item) * dim + channel];
  }

  void save(const std::string& manifest_path, const MetaMap& extra_meta = {}) const;
  static DenseEmbeddingMatrix load(const std::string& manifest_path);
};

// Pass 1 only per item; independent of batch composition.
DenseEmbeddingMatrix extract_dense_embeddings(const std::vector<ItemRecord>& items,
                                              const Backbone& model, const Vocabulary& vocab,
                                              const DualForwardOptions& opts = {});

// Item catalog ingestion: JSON-lines, one object per line:
// {"item_id": str, "attributes": [[name, text], ...], "content_attrs": r}
std::vector<ItemRecord> load_items_jsonl(const std::string& path);
void save_items_jsonl(const std::string& path, const std::vector<ItemRecord>& items);

}  // namespace semrec
