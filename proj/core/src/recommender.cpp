#include "semrec/recommender.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

namespace semrec {

std::vector<UserSequence> load_sequences_tsv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("sequences: cannot read " + path);
  std::vector<UserSequence> seqs;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    UserSequence seq;
    std::string items;
    if (!std::getline(ss, seq.user_id, '\t') || !std::getline(ss, items, '\t') ||
        !std::getline(ss, seq.target, '\t'))
      throw ValidationError("sequences: malformed row in " + path);
    std::istringstream is(items);
    std::string item;
    while (std::getline(is, item, ',')) seq.history.push_back(item);
    if (seq.history.empty())
      throw ValidationError("sequences: user " + seq.user_id + " has an empty history");
    seqs.push_back(std::move(seq));
  }
  if (seqs.empty()) throw ValidationError("sequences: " + path + " holds no rows");
  return seqs;
}

void save_sequences_tsv(const std::string& path, const std::vector<UserSequence>& seqs) {
  std::ofstream f(path);
  if (!f) throw ValidationError("sequences: cannot write " + path);
  for (const auto& seq : seqs) {
    f << seq.user_id << "\t";
    for (size_t i = 0; i < seq.history.size(); ++i) f << (i ? "," : "") << seq.history[i];
    f << "\t" << seq.target << "\n";
  }
}

std::vector<SemanticId> history_codes(const UserSequence& seq, const CodeMatrix& codes,
                                      int max_history) {
  if (seq.history.empty()) throw ValidationError("sequences: empty history for " + seq.user_id);
  if (max_history < 1) throw ValidationError("sequences: max_history must be positive");
  const size_t keep = std::min(seq.history.size(), static_cast<size_t>(max_history));
  std::vector<SemanticId> out;
  out.reserve(keep);
  for (size_t i = seq.history.size() - keep; i < seq.history.size(); ++i) {
    const int idx = codes.index_of(seq.history[i]);
    if (idx < 0)
      throw ValidationError("sequences: unknown item '" + seq.history[i] + "' for user " +
                            seq.user_id);
    out.push_back(codes.column(idx));
  }
  return out;
}

namespace {

// teacher forcing: loss at positions whose next token is an answer token
RecSample finish_sample(RecSampleKind kind, std::vector<int> prompt, std::vector<int> label) {
  RecSample s;
  s.kind = kind;
  s.label_ids = label;
  s.ids = std::move(prompt);
  const size_t prompt_len = s.ids.size();
  s.ids.insert(s.ids.end(), label.begin(), label.end());
  s.targets.assign(s.ids.size(), -1);
  s.loss_positions.assign(s.ids.size(), 0);
  for (size_t p = prompt_len - 1; p + 1 < s.ids.size(); ++p) {
    s.loss_positions[p] = 1;
    s.targets[p] = s.ids[p + 1];
  }
  return s;
}

}  // namespace

RecSample build_retrieval_sample(const UserSequence& seq, const CodeMatrix& codes,
                                 const Vocabulary& vocab, int max_history) {
  const int target_idx = codes.index_of(seq.target);
  if (target_idx < 0)
    throw ValidationError("retrieval sample: unknown target '" + seq.target + "'");
  std::vector<int> prompt = {vocab.task_id("next_item")};
  for (int id : flatten_codes(history_codes(seq, codes, max_history), vocab)) prompt.push_back(id);
  std::vector<int> label = flatten_codes({codes.column(target_idx)}, vocab);
  return finish_sample(RecSampleKind::Retrieval, std::move(prompt), std::move(label));
}

RecSample build_alignment_sample(const ItemRecord& item, const SemanticId& item_codes,
                                 const Vocabulary& vocab, int item_index) {
  if (item.attributes.empty())
    throw ValidationError("alignment sample: item " + item.item_id + " has no text");
  const std::vector<int> code_ids = flatten_codes({item_codes}, vocab);
  std::vector<int> text_ids = vocab.encode(item.attributes.front().second).ids;
  if (item_index % 2 == 0) {
    // codes -> text
    std::vector<int> prompt = {vocab.task_id("align")};
    prompt.insert(prompt.end(), code_ids.begin(), code_ids.end());
    text_ids.push_back(vocab.eos_id());
    return finish_sample(RecSampleKind::Alignment, std::move(prompt), std::move(text_ids));
  }
  // text -> codes
  std::vector<int> prompt = {vocab.task_id("align")};
  prompt.insert(prompt.end(), text_ids.begin(), text_ids.end());
  return finish_sample(RecSampleKind::Alignment, std::move(prompt), code_ids);
}

RecSample build_scoring_sample(const std::vector<SemanticId>& history, const SemanticId& candidate,
                               bool clicked, const Vocabulary& vocab) {
  std::vector<int> prompt = {vocab.task_id("score")};
  for (int id : flatten_codes(history, vocab)) prompt.push_back(id);
  prompt.push_back(vocab.sep_id());
  for (int id : flatten_codes({candidate}, vocab)) prompt.push_back(id);
  return finish_sample(RecSampleKind::Scoring, std::move(prompt),
                       {clicked ? vocab.yes_id() : vocab.no_id()});
}

double beam_recall_at5(const std::vector<UserSequence>& seqs, const CodeMatrix& codes,
                       const CodeTree& tree, const Backbone& model, const Vocabulary& vocab,
                       int max_history, int beam_width) {
  if (seqs.empty()) throw ValidationError("recall: no sequences");
  BeamSearchOptions opts;
  opts.beam_width = std::max(5, beam_width);
  int hits = 0;
  for (const auto& seq : seqs) {
    auto ranked = conditional_beam_search(history_codes(seq, codes, max_history), model, vocab,
                                          tree, opts);
    const size_t top = std::min<size_t>(5, ranked.size());
    for (size_t i = 0; i < top; ++i)
      if (ranked[i].valid && ranked[i].item_id == seq.target) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(seqs.size());
}

namespace {

Tensor rec_sample_loss(const RecSample& sample, const Backbone& model) {
  TokenSequence seq;
  for (int id : sample.ids) seq.append(id, BlockTag::Content);
  ForwardResult out =
      model.forward(model.embed(seq), AttnMask::causal(static_cast<int>(sample.ids.size())));
  return cross_entropy(out.logits, sample.targets, sample.loss_positions);
}

std::vector<float> snapshot(const std::vector<Tensor>& params) {
  std::vector<float> flat;
  for (const auto& p : params) {
    auto v = p.values();
    flat.insert(flat.end(), v.begin(), v.end());
  }
  return flat;
}

void restore(std::vector<Tensor>& params, const std::vector<float>& flat) {
  size_t offset = 0;
  for (auto& p : params) {
    auto v = p.values();
    std::copy(flat.begin() + static_cast<long>(offset),
              flat.begin() + static_cast<long>(offset + v.size()), v.begin());
    offset += v.size();
  }
}

}  // namespace

RecTrainReport train_recommender(const std::vector<ItemRecord>& items,
                                 const std::vector<UserSequence>& train_seqs,
                                 const std::vector<UserSequence>& valid_seqs,
                                 const CodeMatrix& codes, const CodeTree& tree, Backbone& model,
                                 const Vocabulary& vocab, const RecTrainOptions& opts,
                                 uint64_t seed) {
  if (train_seqs.empty()) throw ValidationError("train_recommender: no training sequences");
  if (valid_seqs.empty()) throw ValidationError("train_recommender: no validation sequences");
  if (vocab.k() < 1) throw ValidationError("train_recommender: code tokens not registered");

  ParameterPartition partition = model.partition_parameters(FreezePolicy::RecommenderFreeze);
  AdamOptimizer optimizer(partition.trainable_tensors(), opts.adam);
  std::vector<Tensor> trainable = partition.trainable_tensors();
  std::mt19937 rng(static_cast<uint32_t>(seed));

  // fixed sample pool
  std::vector<RecSample> retrieval, auxiliary;
  for (const auto& seq : train_seqs)
    retrieval.push_back(build_retrieval_sample(seq, codes, vocab, opts.max_history));
  if (opts.alignment_task)
    for (size_t i = 0; i < items.size(); ++i) {
      const int idx = codes.index_of(items[i].item_id);
      if (idx < 0) throw ValidationError("train_recommender: item without codes: " + items[i].item_id);
      auxiliary.push_back(
          build_alignment_sample(items[i], codes.column(idx), vocab, static_cast<int>(i)));
    }
  if (opts.scoring_task) {
    std::uniform_int_distribution<int> pick(0, codes.n - 1);
    for (const auto& seq : train_seqs) {
      auto history = history_codes(seq, codes, opts.max_history);
      const int target_idx = codes.index_of(seq.target);
      if (target_idx < 0) throw ValidationError("train_recommender: unknown target " + seq.target);
      auxiliary.push_back(build_scoring_sample(history, codes.column(target_idx), true, vocab));
      for (int neg = 0; neg < opts.scoring_negatives; ++neg) {
        int j = pick(rng);
        while (j == target_idx) j = pick(rng);
        auxiliary.push_back(build_scoring_sample(history, codes.column(j), false, vocab));
      }
    }
  }

  RecTrainReport report;
  std::vector<float> best_params = snapshot(trainable);
  int phase = 1;
  int stall = 0;        // epochs since the last validation improvement
  double phase_initial_loss = -1.0;
  model.set_training(true);

  for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
    std::vector<const RecSample*> pool;
    for (const auto& s : retrieval) pool.push_back(&s);
    if (phase == 1)
      for (const auto& s : auxiliary) pool.push_back(&s);
    std::shuffle(pool.begin(), pool.end(), rng);

    double epoch_loss = 0.0;
    size_t cursor = 0;
    while (cursor < pool.size()) {
      const size_t batch_end = std::min(cursor + static_cast<size_t>(opts.batch_size), pool.size());
      Tape tape;
      Tensor batch_loss;
      {
        TapeScope scope(tape);
        for (size_t s = cursor; s < batch_end; ++s) {
          Tensor loss = rec_sample_loss(*pool[s], model);
          epoch_loss += loss.item();
          batch_loss = batch_loss.defined() ? add(batch_loss, loss) : loss;
        }
        batch_loss = scale(batch_loss, 1.0f / static_cast<float>(batch_end - cursor));
      }
      tape.backward(batch_loss);
      optimizer.step();
      cursor = batch_end;
    }
    epoch_loss /= static_cast<double>(pool.size());
    if (phase_initial_loss < 0) phase_initial_loss = epoch_loss;
    if (!std::isfinite(epoch_loss) || epoch_loss > 2.0 * phase_initial_loss)
      throw DivergenceError("train_recommender: diverged at epoch " + std::to_string(epoch + 1) +
                            " (mean loss " + std::to_string(epoch_loss) + ")");

    model.set_training(false);
    const double recall = beam_recall_at5(valid_seqs, codes, tree, model, vocab, opts.max_history,
                                          opts.beam_width);
    model.set_training(true);
    report.epochs.push_back({epoch, phase, epoch_loss, recall});
    if (opts.verbose)
      std::cout << "rec epoch " << epoch + 1 << " phase " << phase << " loss " << epoch_loss
                << " valid recall@5 " << recall << "\n";

    if (recall > report.best_recall5) {
      report.best_recall5 = recall;
      report.best_epoch = epoch;
      best_params = snapshot(trainable);
      stall = 0;
    } else {
      ++stall;
    }

    if (phase == 1 && stall >= opts.phase1_patience) {
      phase = 2;
      report.phase_transition_epoch = epoch + 1;
      phase_initial_loss = -1.0;  // retrieval-only epochs have their own loss scale
      stall = 0;
    } else if (phase == 2 && stall >= opts.early_stop_patience) {
      break;
    }
  }

  model.set_training(false);
  restore(trainable, best_params);
  return report;
}

}  // namespace semrec
