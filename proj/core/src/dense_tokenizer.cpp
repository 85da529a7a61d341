#include "semrec/dense_tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>

#include <json.hpp>

namespace semrec {

void ItemRecord::validate() const {
  if (attributes.empty()) throw ValidationError("item " + item_id + ": needs at least one attribute");
  if (content_attr_count < 1 || content_attr_count > attr_count())
    throw ValidationError("item " + item_id + ": content_attr_count must be in [1, m]");
  std::set<std::string> names;
  for (const auto& [name, text] : attributes)
    if (!names.insert(name).second)
      throw ValidationError("item " + item_id + ": duplicate attribute name '" + name + "'");
}

std::string task_name_for(const ItemRecord& item, int task_index) {
  if (task_index < 1 || task_index > item.attr_count())
    throw ValidationError("task index " + std::to_string(task_index) + " out of range");
  const auto& name = item.attributes[static_cast<size_t>(task_index - 1)].first;
  return (task_index <= item.content_attr_count ? "reconstruct_" : "generate_") + name;
}

std::vector<std::string> tokenizer_task_names(const ItemRecord& schema) {
  schema.validate();
  std::vector<std::string> names;
  for (int i = 1; i <= schema.attr_count(); ++i) names.push_back(task_name_for(schema, i));
  return names;
}

void BlockLayout::validate() const {
  if (v < 1) throw ValidationError("layout: v must be positive");
  if (content_begin != 0 || content_end < content_begin || token_begin != content_end ||
      token_end != token_begin + v || placeholder_begin != token_end ||
      placeholder_end != placeholder_begin + v || task_begin != placeholder_end ||
      task_end <= task_begin)
    throw ValidationError("layout: spans must be contiguous, ordered and sized v");
}

TokenizerSample build_sample(const ItemRecord& item, int task_index, const Vocabulary& vocab,
                             int max_seq_len) {
  item.validate();
  if (task_index < 1 || task_index > item.attr_count())
    throw ValidationError("build_sample: task index out of range for item " + item.item_id);
  const int v = vocab.v();
  if (v < 1) throw ValidationError("build_sample: vocabulary has no dense tokens registered");

  std::vector<int> content;
  for (int i = 0; i < item.content_attr_count; ++i) {
    const auto& [name, text] = item.attributes[static_cast<size_t>(i)];
    for (int id : vocab.encode(name + " : " + text).ids) content.push_back(id);
  }

  const auto& [target_name, target_text] = item.attributes[static_cast<size_t>(task_index - 1)];
  TokenSequence answer = vocab.encode(target_text);
  const int task_len = 1 + static_cast<int>(answer.size()) + 1;  // task token + answer + eos

  const int structural = 2 * v + task_len;
  if (structural > max_seq_len)
    throw ValidationError("build_sample: item " + item.item_id +
                          " exceeds max_seq_len even with an empty content block");
  if (static_cast<int>(content.size()) + structural > max_seq_len)
    content.resize(static_cast<size_t>(max_seq_len - structural));

  TokenizerSample sample;
  sample.task_index = task_index;
  sample.target_attribute = target_name;
  for (int id : content) sample.sequence.append(id, BlockTag::Content);
  for (int i = 1; i <= v; ++i) sample.sequence.append(vocab.dense_id(i), BlockTag::Token);
  for (int i = 1; i <= v; ++i) sample.sequence.append(vocab.placeholder_id(i), BlockTag::Placeholder);
  sample.sequence.append(vocab.task_id(task_name_for(item, task_index)), BlockTag::Task);
  for (int id : answer.ids) sample.sequence.append(id, BlockTag::Task);
  sample.sequence.append(vocab.eos_id(), BlockTag::Task);

  BlockLayout& l = sample.layout;
  l.v = v;
  l.content_begin = 0;
  l.content_end = static_cast<int>(content.size());
  l.token_begin = l.content_end;
  l.token_end = l.token_begin + v;
  l.placeholder_begin = l.token_end;
  l.placeholder_end = l.placeholder_begin + v;
  l.task_begin = l.placeholder_end;
  l.task_end = l.task_begin + task_len;
  l.validate();
  return sample;
}

AttnMask build_cascaded_mask(const BlockLayout& layout, MaskDirection direction) {
  layout.validate();
  const int n = layout.size();
  AttnMask mask(n, n, false);
  const std::pair<int, int> blocks[4] = {{layout.content_begin, layout.content_end},
                                         {layout.token_begin, layout.token_end},
                                         {layout.placeholder_begin, layout.placeholder_end},
                                         {layout.task_begin, layout.task_end}};
  for (const auto& [b, e] : blocks)
    for (int i = b; i < e; ++i)
      for (int j = b; j <= i; ++j) mask.set(i, j, true);

  auto open = [&](std::pair<int, int> queries, std::pair<int, int> keys) {
    for (int i = queries.first; i < queries.second; ++i)
      for (int j = keys.first; j < keys.second; ++j) mask.set(i, j, true);
  };
  if (direction == MaskDirection::Compress) {
    open(blocks[1], blocks[0]);  // token block reads content
    open(blocks[3], blocks[2]);  // task block reads placeholders
  } else {
    open(blocks[0], blocks[1]);  // the sentence taken literally
    open(blocks[2], blocks[3]);
  }
  return mask;
}

DualForwardResult dual_forward(const TokenizerSample& sample, const Backbone& model,
                               const DualForwardOptions& opts) {
  const BlockLayout& l = sample.layout;
  l.validate();
  if (static_cast<int>(sample.sequence.size()) != l.size())
    throw ValidationError("dual_forward: sequence does not match layout");
  for (int id : sample.sequence.ids)
    if (id < 0 || id >= model.config().vocab_size)
      throw ValidationError("dual_forward: sample token id outside the model vocabulary");

  const AttnMask full_mask = build_cascaded_mask(l, opts.mask_direction);

  // pass 1: content + token blocks only
  TokenSequence prefix;
  for (int i = 0; i < l.token_end; ++i)
    prefix.append(sample.sequence.ids[static_cast<size_t>(i)], sample.sequence.tags[static_cast<size_t>(i)]);
  ForwardResult pass1 = model.forward(model.embed(prefix), full_mask.prefix(l.token_end));
  Tensor captured = slice_rows(pass1.hidden, l.token_begin, l.token_end);
  Tensor fill = opts.stop_gradient_fill ? detach(captured) : captured;

  // pass 2: full sequence with placeholders carrying the captured outputs
  ForwardResult pass2 = model.forward(model.embed(sample.sequence, fill), full_mask);

  std::vector<int> targets(sample.sequence.size(), -1);
  std::vector<uint8_t> loss_positions(sample.sequence.size(), 0);
  for (int p = l.task_begin; p + 1 < l.task_end; ++p) {
    loss_positions[static_cast<size_t>(p)] = 1;
    targets[static_cast<size_t>(p)] = sample.sequence.ids[static_cast<size_t>(p + 1)];
  }

  DualForwardResult out;
  out.loss = cross_entropy(pass2.logits, targets, loss_positions);
  if (!std::isfinite(out.loss.item()))
    throw DivergenceError("dual_forward: non-finite loss");
  out.dense_outputs = captured;
  return out;
}

TokenizerTrainReport train_tokenizer(const std::vector<ItemRecord>& items, Backbone& model,
                                     const Vocabulary& vocab, const TokenizerTrainOptions& opts,
                                     uint64_t seed) {
  if (!vocab.frozen()) throw ValidationError("train_tokenizer: vocabulary must be frozen");
  if (items.empty()) throw ValidationError("train_tokenizer: no items");
  if (opts.epochs < 1 || opts.batch_size < 1)
    throw ValidationError("train_tokenizer: epochs and batch_size must be positive");

  ParameterPartition partition = model.partition_parameters(FreezePolicy::TokenizerFreeze);
  AdamOptimizer optimizer(partition.trainable_tensors(), opts.adam);

  std::vector<std::pair<int, int>> schedule;  // (item index, task index)
  for (size_t i = 0; i < items.size(); ++i) {
    items[i].validate();
    for (int t = 1; t <= items[i].attr_count(); ++t)
      schedule.emplace_back(static_cast<int>(i), t);
  }

  TokenizerTrainReport report;
  report.samples_per_epoch = static_cast<int64_t>(schedule.size());
  for (const auto& [item_idx, task_idx] : schedule) {
    TokenizerSample sample = build_sample(items[static_cast<size_t>(item_idx)], task_idx, vocab,
                                          model.config().max_seq_len);
    report.initial_loss += dual_forward(sample, model, opts.dual).loss.item();
  }
  report.initial_loss /= static_cast<double>(schedule.size());

  std::mt19937 rng(static_cast<uint32_t>(seed));
  model.set_training(true);
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(schedule.begin(), schedule.end(), rng);
    double epoch_loss = 0.0;
    size_t cursor = 0;
    while (cursor < schedule.size()) {
      const size_t batch_end = std::min(cursor + static_cast<size_t>(opts.batch_size), schedule.size());
      Tape tape;
      Tensor batch_loss;
      {
        TapeScope scope(tape);
        for (size_t s = cursor; s < batch_end; ++s) {
          const auto& [item_idx, task_idx] = schedule[s];
          TokenizerSample sample = build_sample(items[static_cast<size_t>(item_idx)], task_idx,
                                                vocab, model.config().max_seq_len);
          Tensor loss = dual_forward(sample, model, opts.dual).loss;
          epoch_loss += loss.item();
          batch_loss = batch_loss.defined() ? add(batch_loss, loss) : loss;
        }
        batch_loss = scale(batch_loss, 1.0f / static_cast<float>(batch_end - cursor));
      }
      tape.backward(batch_loss);
      optimizer.step();
      cursor = batch_end;
    }
    epoch_loss /= static_cast<double>(schedule.size());
    report.epoch_losses.push_back(epoch_loss);
    if (opts.verbose)
      std::cout << "tokenizer epoch " << epoch + 1 << "/" << opts.epochs
                << " mean loss " << epoch_loss << "\n";
    if (!std::isfinite(epoch_loss) || epoch_loss > 2.0 * report.initial_loss)
      throw DivergenceError("train_tokenizer: diverged at epoch " + std::to_string(epoch + 1) +
                            " (mean loss " + std::to_string(epoch_loss) + " vs initial " +
                            std::to_string(report.initial_loss) + ")");
  }
  model.set_training(false);
  return report;
}

DenseEmbeddingMatrix extract_dense_embeddings(const std::vector<ItemRecord>& items,
                                              const Backbone& model, const Vocabulary& vocab,
                                              const DualForwardOptions& opts) {
  if (items.empty()) throw ValidationError("extract_dense_embeddings: no items");
  DenseEmbeddingMatrix e;
  e.v = vocab.v();
  e.n = static_cast<int>(items.size());
  e.dim = model.config().model_dim;
  e.data.assign(static_cast<size_t>(e.v) * e.n * e.dim, 0.0f);
  for (int j = 0; j < e.n; ++j) {
    const ItemRecord& item = items[static_cast<size_t>(j)];
    TokenizerSample sample = build_sample(item, 1, vocab, model.config().max_seq_len);
    if (sample.layout.content_end == sample.layout.content_begin)
      throw ValidationError("extract_dense_embeddings: item " + item.item_id + " has empty content");
    const BlockLayout& l = sample.layout;
    TokenSequence prefix;
    for (int i = 0; i < l.token_end; ++i)
      prefix.append(sample.sequence.ids[static_cast<size_t>(i)],
                    sample.sequence.tags[static_cast<size_t>(i)]);
    const AttnMask mask = build_cascaded_mask(l, opts.mask_direction).prefix(l.token_end);
    ForwardResult pass1 = model.forward(model.embed(prefix), mask);
    for (int i = 0; i < e.v; ++i)
      for (int c = 0; c < e.dim; ++c)
        e.data[(static_cast<size_t>(i) * e.n + j) * e.dim + c] =
            pass1.hidden.at(l.token_begin + i, c);
    e.item_ids.push_back(item.item_id);
  }
  return e;
}

void DenseEmbeddingMatrix::save(const std::string& manifest_path, const MetaMap& extra_meta) const {
  MetaMap meta = {{"v", std::to_string(v)}, {"n", std::to_string(n)}, {"dim", std::to_string(dim)}};
  for (const auto& kv : extra_meta) meta.push_back(kv);
  Tensor t = Tensor::from_data({v, n, dim}, data);
  save_named_tensors(manifest_path, "dense_embeddings", meta, {{"item_ids", item_ids}}, {{"E", t}});
}

DenseEmbeddingMatrix DenseEmbeddingMatrix::load(const std::string& manifest_path) {
  LoadedCheckpoint ck = load_named_tensors(manifest_path);
  if (ck.kind != "dense_embeddings")
    throw ValidationError("dense embeddings: wrong checkpoint kind '" + ck.kind + "'");
  DenseEmbeddingMatrix e;
  e.v = std::stoi(ck.meta_value("v"));
  e.n = std::stoi(ck.meta_value("n"));
  e.dim = std::stoi(ck.meta_value("dim"));
  const Tensor* t = ck.find("E");
  if (t == nullptr) throw ValidationError("dense embeddings: missing tensor E");
  auto tv = t->values();
  e.data.assign(tv.begin(), tv.end());
  const auto* ids = ck.find_list("item_ids");
  if (ids == nullptr || static_cast<int>(ids->size()) != e.n)
    throw ValidationError("dense embeddings: item id list missing or wrong length");
  e.item_ids = *ids;
  return e;
}

std::vector<ItemRecord> load_items_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("items: cannot read " + path);
  std::vector<ItemRecord> items;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    ItemRecord item;
    item.item_id = j.at("item_id").get<std::string>();
    for (const auto& attr : j.at("attributes"))
      item.attributes.emplace_back(attr[0].get<std::string>(), attr[1].get<std::string>());
    item.content_attr_count = j.at("content_attrs").get<int>();
    item.validate();
    items.push_back(std::move(item));
  }
  if (items.empty()) throw ValidationError("items: " + path + " holds no records");
  return items;
}

void save_items_jsonl(const std::string& path, const std::vector<ItemRecord>& items) {
  std::ofstream f(path);
  if (!f) throw ValidationError("items: cannot write " + path);
  for (const auto& item : items) {
    nlohmann::ordered_json j;
    j["item_id"] = item.item_id;
    nlohmann::ordered_json attrs = nlohmann::ordered_json::array();
    for (const auto& [name, text] : item.attributes) attrs.push_back({name, text});
    j["attributes"] = attrs;
    j["content_attrs"] = item.content_attr_count;
    f << j.dump() << "\n";
  }
}

}  // namespace semrec
