#include "semrec/backbone.hpp"

#include <cmath>

namespace semrec {

void BackboneConfig::validate() const {
  if (layers < 1 || model_dim < 1 || heads < 1 || ffn_dim < 1 || max_seq_len < 1 || vocab_size < 1)
    throw ValidationError("backbone: all dimensions must be positive");
  if (model_dim % heads != 0)
    throw ValidationError("backbone: model_dim must be divisible by heads");
  if (lora_rank < 0 || lora_rank >= model_dim)
    throw ValidationError("backbone: lora_rank must be in [0, model_dim)");
  if (dropout < 0.0f || dropout >= 1.0f)
    throw ValidationError("backbone: dropout must be in [0, 1)");
}

int64_t ParameterPartition::frozen_scalars() const {
  int64_t n = 0;
  for (const auto& p : frozen) n += p.tensor.numel();
  return n;
}

int64_t ParameterPartition::trainable_scalars() const {
  int64_t n = 0;
  for (const auto& p : trainable) n += p.tensor.numel();
  return n;
}

std::vector<Tensor> ParameterPartition::trainable_tensors() const {
  std::vector<Tensor> out;
  out.reserve(trainable.size());
  for (const auto& p : trainable) out.push_back(p.tensor);
  return out;
}

Backbone::Backbone(BackboneConfig config, EmbeddingLayout layout, uint64_t seed)
    : config_(config), layout_(layout), dropout_rng_(static_cast<uint32_t>(seed ^ 0xd0u)) {
  config_.validate();
  if (config_.vocab_size != layout_.total())
    throw ValidationError("backbone: vocab_size " + std::to_string(config_.vocab_size) +
                          " does not match embedding layout total " +
                          std::to_string(layout_.total()));
  const int d = config_.model_dim;
  std::mt19937 rng(static_cast<uint32_t>(seed));
  constexpr float kInitStd = 0.02f;
  // Embedding rows double as the weight-tied output head, so they need a
  // scale the logits can work with when training from scratch.
  const float emb_std = 0.5f / std::sqrt(static_cast<float>(d));

  word_emb_ = Tensor::randn({layout_.words, d}, emb_std, rng);
  dense_emb_ = Tensor::randn({layout_.dense, d}, kInitStd, rng);
  ph_emb_ = Tensor::randn({layout_.placeholders, d}, emb_std, rng);

  // Task rows start near the mean word embedding.
  task_emb_ = Tensor::randn({layout_.tasks, d}, kInitStd * 0.1f, rng);
  if (layout_.words > 0 && layout_.tasks > 0) {
    auto words = word_emb_.values();
    std::vector<double> mean_row(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < layout_.words; ++i)
      for (int j = 0; j < d; ++j) mean_row[static_cast<size_t>(j)] += words[static_cast<size_t>(i) * d + j];
    for (auto& m : mean_row) m /= layout_.words;
    auto tasks = task_emb_.values();
    for (int i = 0; i < layout_.tasks; ++i)
      for (int j = 0; j < d; ++j) tasks[static_cast<size_t>(i) * d + j] += static_cast<float>(mean_row[static_cast<size_t>(j)]);
  }

  code_emb_ = Tensor::randn({layout_.codes, d}, emb_std, rng);
  pos_emb_ = Tensor::randn({config_.max_seq_len, d}, kInitStd, rng);

  layers_.resize(static_cast<size_t>(config_.layers));
  for (auto& l : layers_) {
    l.ln1_gain = Tensor::full({d}, 1.0f);
    l.ln1_bias = Tensor::zeros({d});
    l.wq = Tensor::randn({d, d}, kInitStd, rng);
    l.bq = Tensor::zeros({d});
    l.wk = Tensor::randn({d, d}, kInitStd, rng);
    l.bk = Tensor::zeros({d});
    l.wv = Tensor::randn({d, d}, kInitStd, rng);
    l.bv = Tensor::zeros({d});
    l.wo = Tensor::randn({d, d}, kInitStd, rng);
    l.bo = Tensor::zeros({d});
    l.ln2_gain = Tensor::full({d}, 1.0f);
    l.ln2_bias = Tensor::zeros({d});
    l.w1 = Tensor::randn({d, config_.ffn_dim}, kInitStd, rng);
    l.b1 = Tensor::zeros({config_.ffn_dim});
    l.w2 = Tensor::randn({config_.ffn_dim, d}, kInitStd, rng);
    l.b2 = Tensor::zeros({d});
  }
  final_gain_ = Tensor::full({d}, 1.0f);
  final_bias_ = Tensor::zeros({d});

  // Adapter draws come from their own stream so lora_rank does not perturb
  // the base initialization.
  init_lora(config_.lora_rank, config_.lora_all_projections, seed);
}

void Backbone::init_lora(int rank, bool all_projections, uint64_t seed) {
  config_.lora_rank = rank;
  config_.lora_all_projections = all_projections;
  lora_scaling_ = rank > 0 ? 1.0f / static_cast<float>(rank) : 0.0f;
  std::mt19937 rng(static_cast<uint32_t>(seed ^ 0x9e3779b9u));
  const int d = config_.model_dim;
  for (auto& l : layers_) {
    l.lora_q = l.lora_k = l.lora_v = l.lora_o = LoraAdapter{};
    if (rank == 0) continue;
    auto fresh = [&]() {
      LoraAdapter a;
      a.down = Tensor::randn({d, rank}, 0.02f, rng);
      a.up = Tensor::zeros({rank, d});
      return a;
    };
    l.lora_q = fresh();
    l.lora_v = fresh();
    if (all_projections) {
      l.lora_k = fresh();
      l.lora_o = fresh();
    }
  }
}

Tensor Backbone::token_table() const {
  std::vector<Tensor> parts;
  for (const Tensor* t : {&word_emb_, &dense_emb_, &ph_emb_, &task_emb_, &code_emb_})
    if (t->defined() && t->dim(0) > 0) parts.push_back(*t);
  return concat_rows(parts);
}

Tensor Backbone::embed(const TokenSequence& seq, const std::optional<Tensor>& placeholder_fill) const {
  const int t = static_cast<int>(seq.size());
  if (t == 0) throw ValidationError("embed: empty sequence");
  if (t > config_.max_seq_len)
    throw ValidationError("embed: sequence length " + std::to_string(t) + " exceeds max_seq_len " +
                          std::to_string(config_.max_seq_len));
  Tensor x = gather_rows(token_table(), seq.ids);
  std::vector<int> ph_positions;
  for (int i = 0; i < t; ++i)
    if (seq.tags[static_cast<size_t>(i)] == BlockTag::Placeholder) ph_positions.push_back(i);
  if (placeholder_fill.has_value()) {
    if (placeholder_fill->dim(0) != static_cast<int>(ph_positions.size()))
      throw ValidationError("embed: fill-length mismatch, " +
                            std::to_string(placeholder_fill->dim(0)) + " vectors for " +
                            std::to_string(ph_positions.size()) + " placeholder positions");
    x = replace_rows(x, ph_positions, *placeholder_fill);
  } else if (!ph_positions.empty()) {
    throw ValidationError("embed: sequence has placeholder positions but no fill was supplied");
  }
  return add(x, slice_rows(pos_emb_, 0, t));
}

Tensor Backbone::project(const Tensor& x, const Tensor& w, const Tensor& b,
                         const LoraAdapter& lora) const {
  Tensor y = add_row(matmul(x, w), b);
  if (lora.attached()) y = add(y, scale(matmul(matmul(x, lora.down), lora.up), lora_scaling_));
  return y;
}

Tensor Backbone::maybe_dropout(const Tensor& x) const {
  if (!training_ || config_.dropout <= 0.0f) return x;
  std::bernoulli_distribution keep(1.0 - config_.dropout);
  const float inv = 1.0f / (1.0f - config_.dropout);
  std::vector<float> m(static_cast<size_t>(x.numel()));
  for (auto& v : m) v = keep(dropout_rng_) ? inv : 0.0f;
  return mul(x, Tensor::from_data(x.shape(), std::move(m)));
}

ForwardResult Backbone::forward(const Tensor& input_embeddings, const AttnMask& mask) const {
  const int t = input_embeddings.dim(0);
  if (input_embeddings.dim(1) != config_.model_dim)
    throw ValidationError("forward: embedding width mismatch");
  if (t > config_.max_seq_len) throw ValidationError("forward: sequence exceeds max_seq_len");
  if (mask.rows != t || mask.cols != t) throw ValidationError("forward: mask shape mismatch");
  const int head_dim = config_.model_dim / config_.heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(head_dim));

  Tensor h = input_embeddings;
  for (const auto& l : layers_) {
    Tensor a = layer_norm(h, l.ln1_gain, l.ln1_bias);
    Tensor q = project(a, l.wq, l.bq, l.lora_q);
    Tensor k = project(a, l.wk, l.bk, l.lora_k);
    Tensor v = project(a, l.wv, l.bv, l.lora_v);
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(config_.heads));
    for (int hd = 0; hd < config_.heads; ++hd) {
      const int c0 = hd * head_dim, c1 = (hd + 1) * head_dim;
      Tensor qh = slice_cols(q, c0, c1);
      Tensor kh = slice_cols(k, c0, c1);
      Tensor vh = slice_cols(v, c0, c1);
      Tensor probs = masked_softmax(scale(matmul_nt(qh, kh), inv_sqrt), mask);
      heads.push_back(matmul(probs, vh));
    }
    Tensor attn = add_row(matmul(concat_cols(heads), l.wo), l.bo);
    h = add(h, maybe_dropout(attn));
    Tensor f = layer_norm(h, l.ln2_gain, l.ln2_bias);
    Tensor ffn = add_row(matmul(gelu(add_row(matmul(f, l.w1), l.b1)), l.w2), l.b2);
    h = add(h, maybe_dropout(ffn));
  }
  ForwardResult out;
  out.hidden = layer_norm(h, final_gain_, final_bias_);
  out.logits = matmul_nt(out.hidden, token_table());
  return out;
}

void Backbone::for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  fn("word_emb", word_emb_);
  fn("dense_emb", dense_emb_);
  fn("ph_emb", ph_emb_);
  fn("task_emb", task_emb_);
  fn("code_emb", code_emb_);
  fn("pos_emb", pos_emb_);
  for (size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    fn(p + "ln1.gain", l.ln1_gain);
    fn(p + "ln1.bias", l.ln1_bias);
    fn(p + "attn.wq", l.wq);
    fn(p + "attn.bq", l.bq);
    fn(p + "attn.wk", l.wk);
    fn(p + "attn.bk", l.bk);
    fn(p + "attn.wv", l.wv);
    fn(p + "attn.bv", l.bv);
    fn(p + "attn.wo", l.wo);
    fn(p + "attn.bo", l.bo);
    auto lora = [&](const char* name, const LoraAdapter& a) {
      if (!a.attached()) return;
      fn(p + "attn.lora_" + name + ".down", a.down);
      fn(p + "attn.lora_" + name + ".up", a.up);
    };
    lora("q", l.lora_q);
    lora("k", l.lora_k);
    lora("v", l.lora_v);
    lora("o", l.lora_o);
    fn(p + "ln2.gain", l.ln2_gain);
    fn(p + "ln2.bias", l.ln2_bias);
    fn(p + "ffn.w1", l.w1);
    fn(p + "ffn.b1", l.b1);
    fn(p + "ffn.w2", l.w2);
    fn(p + "ffn.b2", l.b2);
  }
  fn("final_ln.gain", final_gain_);
  fn("final_ln.bias", final_bias_);
}

std::vector<NamedParam> Backbone::named_parameters() const {
  std::vector<NamedParam> out;
  for_each_param([&](const std::string& name, const Tensor& t) { out.push_back({name, t}); });
  return out;
}

int64_t Backbone::parameter_count() const {
  int64_t n = 0;
  for_each_param([&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

ParameterPartition Backbone::partition_parameters(FreezePolicy policy) {
  auto is_frozen = [&](const std::string& name) {
    if (policy == FreezePolicy::None) return false;
    if (name == "word_emb") return true;
    if (name == "code_emb" && policy == FreezePolicy::TokenizerFreeze) return true;
    // base attention projections; adapters stay trainable
    if (name.find(".attn.") != std::string::npos && name.find("lora") == std::string::npos)
      return true;
    return false;
  };
  ParameterPartition part;
  for_each_param([&](const std::string& name, const Tensor& t) {
    Tensor tensor = t;
    const bool frozen = is_frozen(name);
    tensor.set_requires_grad(!frozen);
    (frozen ? part.frozen : part.trainable).push_back({name, tensor});
  });
  return part;
}

void Backbone::merge_lora_into_base() {
  const int d = config_.model_dim;
  auto fold = [&](Tensor& w, LoraAdapter& a) {
    if (!a.attached()) return;
    const int r = a.down.dim(1);
    auto wd = w.values();
    auto down = a.down.values();
    auto up = a.up.values();
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int t = 0; t < r; ++t)
          acc += static_cast<double>(down[static_cast<size_t>(i) * r + t]) *
                 up[static_cast<size_t>(t) * d + j];
        wd[static_cast<size_t>(i) * d + j] += static_cast<float>(lora_scaling_ * acc);
      }
    a = LoraAdapter{};
  };
  for (auto& l : layers_) {
    fold(l.wq, l.lora_q);
    fold(l.wk, l.lora_k);
    fold(l.wv, l.lora_v);
    fold(l.wo, l.lora_o);
  }
  config_.lora_rank = 0;
}

void Backbone::reset_lora(int rank, bool all_projections, uint64_t seed) {
  if (rank < 0 || rank >= config_.model_dim)
    throw ValidationError("backbone: lora rank out of range");
  init_lora(rank, all_projections, seed);
}

void Backbone::save(const std::string& manifest_path, const MetaMap& extra_meta) const {
  MetaMap meta = {
      {"layers", std::to_string(config_.layers)},
      {"model_dim", std::to_string(config_.model_dim)},
      {"heads", std::to_string(config_.heads)},
      {"ffn_dim", std::to_string(config_.ffn_dim)},
      {"max_seq_len", std::to_string(config_.max_seq_len)},
      {"vocab_size", std::to_string(config_.vocab_size)},
      {"lora_rank", std::to_string(config_.lora_rank)},
      {"lora_all_projections", config_.lora_all_projections ? "1" : "0"},
      {"dropout", std::to_string(config_.dropout)},
      {"layout_words", std::to_string(layout_.words)},
      {"layout_dense", std::to_string(layout_.dense)},
      {"layout_placeholders", std::to_string(layout_.placeholders)},
      {"layout_tasks", std::to_string(layout_.tasks)},
      {"layout_codes", std::to_string(layout_.codes)},
  };
  for (const auto& kv : extra_meta) meta.push_back(kv);
  std::vector<std::pair<std::string, Tensor>> tensors;
  for_each_param([&](const std::string& name, const Tensor& t) { tensors.emplace_back(name, t); });
  save_named_tensors(manifest_path, "backbone", meta, {}, tensors);
}

Backbone Backbone::load(const std::string& manifest_path) {
  LoadedCheckpoint ck = load_named_tensors(manifest_path);
  if (ck.kind != "backbone")
    throw ValidationError("backbone: checkpoint kind '" + ck.kind + "' is not a backbone");
  BackboneConfig cfg;
  cfg.layers = std::stoi(ck.meta_value("layers"));
  cfg.model_dim = std::stoi(ck.meta_value("model_dim"));
  cfg.heads = std::stoi(ck.meta_value("heads"));
  cfg.ffn_dim = std::stoi(ck.meta_value("ffn_dim"));
  cfg.max_seq_len = std::stoi(ck.meta_value("max_seq_len"));
  cfg.vocab_size = std::stoi(ck.meta_value("vocab_size"));
  cfg.lora_rank = std::stoi(ck.meta_value("lora_rank"));
  cfg.lora_all_projections = ck.meta_value("lora_all_projections") == "1";
  cfg.dropout = std::stof(ck.meta_value("dropout"));
  EmbeddingLayout layout;
  layout.words = std::stoi(ck.meta_value("layout_words"));
  layout.dense = std::stoi(ck.meta_value("layout_dense"));
  layout.placeholders = std::stoi(ck.meta_value("layout_placeholders"));
  layout.tasks = std::stoi(ck.meta_value("layout_tasks"));
  layout.codes = std::stoi(ck.meta_value("layout_codes"));

  Backbone model(cfg, layout, 0);
  model.for_each_param([&](const std::string& name, const Tensor& t) {
    const Tensor* stored = ck.find(name);
    if (stored == nullptr)
      throw ValidationError("backbone: checkpoint missing tensor '" + name + "'");
    if (stored->shape() != t.shape())
      throw ValidationError("backbone: shape mismatch for tensor '" + name + "'");
    Tensor dst = t;
    auto src = stored->values();
    std::copy(src.begin(), src.end(), dst.values().begin());
  });
  return model;
}

}  // namespace semrec
