#pragma once

#include <string>
#include <vector>

#include "semrec/adam.hpp"
#include "semrec/codetree.hpp"
#include "semrec/dense_tokenizer.hpp"

namespace semrec {

struct UserSequence {
  std::string user_id;
  std::vector<std::string> history;  // oldest first
  std::string target;
};

// TSV: user_id \t item_1,item_2,... \t target_item
std::vector<UserSequence> load_sequences_tsv(const std::string& path);
void save_sequences_tsv(const std::string& path, const std::vector<UserSequence>& seqs);

enum class RecSampleKind { Retrieval, Alignment, Scoring };

// One instruction-tuning sample: token ids with teacher-forced answer tokens
// appended, next-token targets, and a mask of the positions that predict the
// answer span.
struct RecSample {
  RecSampleKind kind = RecSampleKind::Retrieval;
  std::vector<int> ids;
  std::vector<int> targets;
  std::vector<uint8_t> loss_positions;
  std::vector<int> label_ids;
};

// History codes for a user sequence, most recent max_history items.
std::vector<SemanticId> history_codes(const UserSequence& seq, const CodeMatrix& codes,
                                      int max_history);

// [<next_item>; flattened history codes] -> v target code tokens
RecSample build_retrieval_sample(const UserSequence& seq, const CodeMatrix& codes,
                                 const Vocabulary& vocab, int max_history);

// Direction alternates with item_index parity: even pairs codes -> title,
// odd pairs title -> codes.
RecSample build_alignment_sample(const ItemRecord& item, const SemanticId& item_codes,
                                 const Vocabulary& vocab, int item_index);

// [<score>; history codes; <sep>; candidate codes] -> <yes> | <no>
RecSample build_scoring_sample(const std::vector<SemanticId>& history, const SemanticId& candidate,
                               bool clicked, const Vocabulary& vocab);

struct RecTrainOptions {
  int batch_size = 8;
  AdamConfig adam = {};
  int max_epochs = 40;
  int early_stop_patience = 5;  // epochs without a validation gain before stopping
  int phase1_patience = 2;      // stalled epochs before dropping the auxiliary tasks
  int max_history = 10;
  int beam_width = 10;
  bool alignment_task = true;
  bool scoring_task = true;
  int scoring_negatives = 3;  // uniform negatives per sequence
  bool verbose = false;
};

struct RecEpochStats {
  int epoch = 0;
  int phase = 1;
  double mean_loss = 0.0;
  double valid_recall5 = 0.0;
};

struct RecTrainReport {
  std::vector<RecEpochStats> epochs;
  int phase_transition_epoch = -1;  // first phase-2 epoch index, -1 when never reached
  int best_epoch = -1;
  double best_recall5 = 0.0;
};

// Phase 1 mixes retrieval, alignment and scoring samples; once validation
// Recall@5 stalls, phase 2 continues with the retrieval task alone. Early
// stopping restores the best-validation parameters.
RecTrainReport train_recommender(const std::vector<ItemRecord>& items,
                                 const std::vector<UserSequence>& train_seqs,
                                 const std::vector<UserSequence>& valid_seqs,
                                 const CodeMatrix& codes, const CodeTree& tree, Backbone& model,
                                 const Vocabulary& vocab, const RecTrainOptions& opts,
                                 uint64_t seed);

// Recall@5 of conditional beam search over the given sequences.
double beam_recall_at5(const std::vector<UserSequence>& seqs, const CodeMatrix& codes,
                       const CodeTree& tree, const Backbone& model, const Vocabulary& vocab,
                       int max_history, int beam_width);

}  // namespace semrec
