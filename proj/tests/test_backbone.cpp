#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <thread>

#include "semrec/adam.hpp"
#include "semrec/backbone.hpp"

using namespace semrec;

namespace {

EmbeddingLayout small_layout() {
  EmbeddingLayout l;
  l.words = 10;
  l.dense = 2;
  l.placeholders = 2;
  l.tasks = 2;
  l.codes = 8;
  return l;
}

BackboneConfig small_config(int lora_rank = 0) {
  BackboneConfig c;
  c.layers = 2;
  c.model_dim = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.max_seq_len = 32;
  c.vocab_size = small_layout().total();
  c.lora_rank = lora_rank;
  return c;
}

TokenSequence plain_sequence(std::initializer_list<int> ids) {
  TokenSequence s;
  for (int id : ids) s.append(id, BlockTag::Content);
  return s;
}

bool bytes_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.values().data(), b.values().data(), a.values().size() * sizeof(float)) == 0;
}

Tensor param_by_name(const Backbone& model, const std::string& name) {
  for (const auto& np : model.named_parameters())
    if (np.name == name) return np.tensor;
  throw std::runtime_error("missing parameter " + name);
}

// Straight-line re-implementation of the forward pass in double precision,
// reading the model only through named_parameters(). Kept independent of the
// tensor op implementations on purpose.
std::vector<double> naive_forward_logits(const Backbone& model, const std::vector<float>& input,
                                         int t, const AttnMask& mask) {
  std::map<std::string, std::vector<double>> p;
  std::map<std::string, std::vector<int>> shapes;
  for (const auto& np : model.named_parameters()) {
    auto vals = np.tensor.values();
    p[np.name] = std::vector<double>(vals.begin(), vals.end());
    shapes[np.name] = np.tensor.shape();
  }
  const auto& cfg = model.config();
  const int d = cfg.model_dim;
  const int heads = cfg.heads;
  const int hd = d / heads;

  auto layer_norm_rows = [&](std::vector<double>& x, const std::vector<double>& g,
                             const std::vector<double>& b) {
    for (int i = 0; i < t; ++i) {
      double mu = 0;
      for (int j = 0; j < d; ++j) mu += x[i * d + j];
      mu /= d;
      double var = 0;
      for (int j = 0; j < d; ++j) var += (x[i * d + j] - mu) * (x[i * d + j] - mu);
      var /= d;
      double inv = 1.0 / std::sqrt(var + 1e-5);
      for (int j = 0; j < d; ++j) x[i * d + j] = (x[i * d + j] - mu) * inv * g[j] + b[j];
    }
  };
  auto linear = [&](const std::vector<double>& x, const std::vector<double>& w,
                    const std::vector<double>& b, int in, int out) {
    std::vector<double> y(static_cast<size_t>(t) * out, 0.0);
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < out; ++j) {
        double acc = b.empty() ? 0.0 : b[j];
        for (int q = 0; q < in; ++q) acc += x[i * in + q] * w[static_cast<size_t>(q) * out + j];
        y[static_cast<size_t>(i) * out + j] = acc;
      }
    return y;
  };

  std::vector<double> h(input.begin(), input.begin() + static_cast<size_t>(t) * d);
  for (int li = 0; li < cfg.layers; ++li) {
    const std::string pre = "layer" + std::to_string(li) + ".";
    std::vector<double> a = h;
    layer_norm_rows(a, p[pre + "ln1.gain"], p[pre + "ln1.bias"]);
    auto proj = [&](const std::string& w, const std::string& b, const std::string& lora) {
      std::vector<double> y = linear(a, p[pre + w], p[pre + b], d, d);
      const std::string down_name = pre + "attn.lora_" + lora + ".down";
      if (p.count(down_name)) {
        const int r = shapes[down_name][1];
        std::vector<double> xr = linear(a, p[down_name], {}, d, r);
        std::vector<double> lo = linear(xr, p[pre + "attn.lora_" + lora + ".up"], {}, r, d);
        for (size_t i = 0; i < y.size(); ++i) y[i] += lo[i] / r;
      }
      return y;
    };
    std::vector<double> q = proj("attn.wq", "attn.bq", "q");
    std::vector<double> k = proj("attn.wk", "attn.bk", "k");
    std::vector<double> v = proj("attn.wv", "attn.bv", "v");
    std::vector<double> ctx(static_cast<size_t>(t) * d, 0.0);
    for (int head = 0; head < heads; ++head) {
      const int c0 = head * hd;
      for (int i = 0; i < t; ++i) {
        std::vector<double> scores(static_cast<size_t>(t), 0.0);
        double mx = -1e300;
        for (int j = 0; j < t; ++j) {
          if (!mask.at(i, j)) continue;
          double s = 0;
          for (int c = 0; c < hd; ++c) s += q[i * d + c0 + c] * k[j * d + c0 + c];
          scores[static_cast<size_t>(j)] = s / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, scores[static_cast<size_t>(j)]);
        }
        double denom = 0;
        for (int j = 0; j < t; ++j)
          if (mask.at(i, j)) denom += std::exp(scores[static_cast<size_t>(j)] - mx);
        for (int j = 0; j < t; ++j) {
          if (!mask.at(i, j)) continue;
          const double w = std::exp(scores[static_cast<size_t>(j)] - mx) / denom;
          for (int c = 0; c < hd; ++c) ctx[i * d + c0 + c] += w * v[j * d + c0 + c];
        }
      }
    }
    std::vector<double> attn = linear(ctx, p[pre + "attn.wo"], p[pre + "attn.bo"], d, d);
    for (size_t i = 0; i < h.size(); ++i) h[i] += attn[i];
    std::vector<double> f = h;
    layer_norm_rows(f, p[pre + "ln2.gain"], p[pre + "ln2.bias"]);
    std::vector<double> f1 = linear(f, p[pre + "ffn.w1"], p[pre + "ffn.b1"], d, cfg.ffn_dim);
    for (auto& x : f1) x = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    std::vector<double> f2 = linear(f1, p[pre + "ffn.w2"], p[pre + "ffn.b2"], cfg.ffn_dim, d);
    for (size_t i = 0; i < h.size(); ++i) h[i] += f2[i];
  }
  layer_norm_rows(h, p["final_ln.gain"], p["final_ln.bias"]);

  // weight-tied head against the concatenated tables
  std::vector<double> table;
  for (const char* name : {"word_emb", "dense_emb", "ph_emb", "task_emb", "code_emb"}) {
    const auto& rows = p[name];
    table.insert(table.end(), rows.begin(), rows.end());
  }
  const int vocab = static_cast<int>(table.size()) / d;
  std::vector<double> logits(static_cast<size_t>(t) * vocab, 0.0);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < vocab; ++j) {
      double acc = 0;
      for (int c = 0; c < d; ++c) acc += h[i * d + c] * table[static_cast<size_t>(j) * d + c];
      logits[static_cast<size_t>(i) * vocab + j] = acc;
    }
  return logits;
}

}  // namespace

TEST_CASE("zero-initialized adapters are exact no-ops") {
  Backbone base(small_config(0), small_layout(), 42);
  Backbone adapted(small_config(4), small_layout(), 42);
  TokenSequence seq = plain_sequence({1, 4, 7, 2});
  AttnMask mask = AttnMask::causal(4);
  ForwardResult a = base.forward(base.embed(seq), mask);
  ForwardResult b = adapted.forward(adapted.embed(seq), mask);
  CHECK(bytes_equal(a.logits, b.logits));
  CHECK(bytes_equal(a.hidden, b.hidden));
}

TEST_CASE("causal mask: later positions cannot influence earlier outputs") {
  Backbone model(small_config(3), small_layout(), 7);
  AttnMask mask = AttnMask::causal(5);
  TokenSequence s1 = plain_sequence({1, 2, 3, 4, 5});
  TokenSequence s2 = plain_sequence({1, 2, 3, 4, 9});
  Tensor h1 = model.forward(model.embed(s1), mask).hidden;
  Tensor h2 = model.forward(model.embed(s2), mask).hidden;
  const int d = model.config().model_dim;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < d; ++j) CHECK(h1.at(i, j) == h2.at(i, j));
  bool last_differs = false;
  for (int j = 0; j < d; ++j)
    if (h1.at(4, j) != h2.at(4, j)) last_differs = true;
  CHECK(last_differs);
}

TEST_CASE("forward matches straight-line re-implementation") {
  Backbone model(small_config(3), small_layout(), 123);
  // give the adapters non-zero ups so the lora path is exercised
  std::mt19937 rng(5);
  for (auto& np : model.named_parameters()) {
    if (np.name.find("lora") != std::string::npos && np.name.find(".up") != std::string::npos) {
      std::normal_distribution<float> d(0.0f, 0.05f);
      for (auto& x : np.tensor.values()) x = d(rng);
    }
  }
  const int t = 6;
  TokenSequence seq = plain_sequence({0, 3, 11, 13, 20, 8});
  AttnMask mask = AttnMask::causal(t);
  Tensor emb = model.embed(seq);
  ForwardResult out = model.forward(emb, mask);
  std::vector<float> input(emb.values().begin(), emb.values().end());
  auto expect = naive_forward_logits(model, input, t, mask);
  REQUIRE(static_cast<int64_t>(expect.size()) == out.logits.numel());
  for (int64_t i = 0; i < out.logits.numel(); ++i) {
    CHECK(out.logits.at(static_cast<int>(i)) ==
          doctest::Approx(expect[static_cast<size_t>(i)]).epsilon(1e-5).scale(1.0));
  }
}

TEST_CASE("embed without placeholders is lookup plus positions") {
  Backbone model(small_config(0), small_layout(), 9);
  TokenSequence seq = plain_sequence({2, 5});
  Tensor e = model.embed(seq);
  Tensor pos = param_by_name(model, "pos_emb");
  Tensor expected = add(gather_rows(model.token_table(), seq.ids), slice_rows(pos, 0, 2));
  CHECK(bytes_equal(e, expected));
}

TEST_CASE("embed: filling with placeholder table rows equals plain lookup") {
  Backbone model(small_config(0), small_layout(), 11);
  const EmbeddingLayout l = small_layout();
  const int ph0 = l.words + l.dense;  // first placeholder id
  TokenSequence seq;
  seq.append(1, BlockTag::Content);
  seq.append(ph0, BlockTag::Placeholder);
  seq.append(ph0 + 1, BlockTag::Placeholder);
  Tensor fill = gather_rows(model.token_table(), {ph0, ph0 + 1});
  Tensor with_fill = model.embed(seq, fill);

  TokenSequence plain = plain_sequence({1, ph0, ph0 + 1});
  Tensor lookup = model.embed(plain);
  CHECK(bytes_equal(with_fill, lookup));
}

TEST_CASE("embed: fill vectors land verbatim before the positional add") {
  Backbone model(small_config(0), small_layout(), 13);
  const EmbeddingLayout l = small_layout();
  TokenSequence seq;
  seq.append(3, BlockTag::Content);
  seq.append(l.words, BlockTag::Placeholder);
  std::mt19937 rng(19);
  Tensor fill = Tensor::randn({1, 16}, 1.0f, rng);
  Tensor emb = model.embed(seq, fill);
  Tensor pos = param_by_name(model, "pos_emb");
  for (int j = 0; j < 16; ++j) CHECK(emb.at(1, j) == fill.at(0, j) + pos.at(1, j));
}

TEST_CASE("embed: fill-length mismatch is an error") {
  Backbone model(small_config(0), small_layout(), 13);
  TokenSequence seq;
  seq.append(3, BlockTag::Content);
  seq.append(small_layout().words, BlockTag::Placeholder);
  std::mt19937 rng(19);
  Tensor fill = Tensor::randn({2, 16}, 1.0f, rng);
  CHECK_THROWS_AS(model.embed(seq, fill), ValidationError);
  CHECK_THROWS_AS(model.embed(seq), ValidationError);  // placeholders need a fill
}

TEST_CASE("fully blocked mask row is rejected") {
  Backbone model(small_config(0), small_layout(), 13);
  TokenSequence seq = plain_sequence({1, 2});
  AttnMask mask(2, 2, false);
  mask.set(0, 0, true);  // row 1 fully blocked
  CHECK_THROWS_AS(model.forward(model.embed(seq), mask), ValidationError);
}

TEST_CASE("parameter partition") {
  Backbone model(small_config(4), small_layout(), 21);
  const int64_t total = model.parameter_count();

  SUBCASE("tokenizer freeze: step changes no word-embedding or base-attention row") {
    auto part = model.partition_parameters(FreezePolicy::TokenizerFreeze);
    CHECK(part.frozen_scalars() + part.trainable_scalars() == total);

    std::vector<float> word_before, wq_before, code_before;
    {
      auto w = param_by_name(model, "word_emb").values();
      word_before.assign(w.begin(), w.end());
      auto q = param_by_name(model, "layer0.attn.wq").values();
      wq_before.assign(q.begin(), q.end());
      auto c = param_by_name(model, "code_emb").values();
      code_before.assign(c.begin(), c.end());
    }

    AdamOptimizer opt(part.trainable_tensors());
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      TokenSequence seq = plain_sequence({1, 2, 3});
      ForwardResult out = model.forward(model.embed(seq), AttnMask::causal(3));
      loss = cross_entropy(out.logits, {2, 3, 4}, {1, 1, 1});
    }
    tape.backward(loss);
    for (const auto& np : part.frozen) CHECK_FALSE(np.tensor.has_grad());
    opt.step();

    CHECK(std::memcmp(word_before.data(), param_by_name(model, "word_emb").values().data(),
                      word_before.size() * sizeof(float)) == 0);
    CHECK(std::memcmp(wq_before.data(), param_by_name(model, "layer0.attn.wq").values().data(),
                      wq_before.size() * sizeof(float)) == 0);
    CHECK(std::memcmp(code_before.data(), param_by_name(model, "code_emb").values().data(),
                      code_before.size() * sizeof(float)) == 0);
  }

  SUBCASE("recommender freeze keeps code rows trainable") {
    auto part = model.partition_parameters(FreezePolicy::RecommenderFreeze);
    CHECK(part.frozen_scalars() + part.trainable_scalars() == total);
    bool code_trainable = false;
    for (const auto& np : part.trainable)
      if (np.name == "code_emb") code_trainable = true;
    CHECK(code_trainable);
  }

  SUBCASE("none: every parameter receives a gradient") {
    auto part = model.partition_parameters(FreezePolicy::None);
    CHECK(part.frozen.empty());
    CHECK(part.trainable_scalars() == total);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      TokenSequence seq = plain_sequence({1, 2, 3});
      ForwardResult out = model.forward(model.embed(seq), AttnMask::causal(3));
      loss = cross_entropy(out.logits, {2, 3, 4}, {1, 1, 1});
    }
    tape.backward(loss);
    for (const auto& np : part.trainable) CHECK(np.tensor.has_grad());
  }
}

TEST_CASE("forward is pure: repeated calls bit-identical") {
  Backbone model(small_config(4), small_layout(), 33);
  TokenSequence seq = plain_sequence({5, 1, 9, 0});
  AttnMask mask = AttnMask::causal(4);
  Tensor a = model.forward(model.embed(seq), mask).logits;
  Tensor b = model.forward(model.embed(seq), mask).logits;
  CHECK(bytes_equal(a, b));
}

TEST_CASE("concurrent forward on a frozen model matches serial output") {
  Backbone model(small_config(2), small_layout(), 77);
  TokenSequence seq = plain_sequence({1, 2, 3, 4, 5, 6});
  AttnMask mask = AttnMask::causal(6);
  Tensor serial = model.forward(model.embed(seq), mask).logits;
  std::vector<std::vector<float>> results(4);
  std::vector<std::thread> threads;
  for (int i = 0; i < 4; ++i)
    threads.emplace_back([&, i] {
      Tensor r = model.forward(model.embed(seq), mask).logits;
      results[static_cast<size_t>(i)].assign(r.values().begin(), r.values().end());
    });
  for (auto& t : threads) t.join();
  for (const auto& r : results) {
    REQUIRE(r.size() == serial.values().size());
    CHECK(std::memcmp(r.data(), serial.values().data(), r.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("checkpoint round-trip preserves every tensor bit") {
  Backbone model(small_config(4), small_layout(), 55);
  const std::string path = "backbone_roundtrip_test.json";
  model.save(path, {{"note", "unit-test"}});
  Backbone loaded = Backbone::load(path);
  std::remove(path.c_str());
  std::remove("backbone_roundtrip_test.bin");
  auto a = model.named_parameters();
  auto b = loaded.named_parameters();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(bytes_equal(a[i].tensor, b[i].tensor));
  }
  TokenSequence seq = plain_sequence({1, 2, 3});
  AttnMask mask = AttnMask::causal(3);
  CHECK(bytes_equal(model.forward(model.embed(seq), mask).logits,
                    loaded.forward(loaded.embed(seq), mask).logits));
}

TEST_CASE("merging adapters into base preserves the function") {
  Backbone model(small_config(4), small_layout(), 91);
  std::mt19937 rng(6);
  for (auto& np : model.named_parameters())
    if (np.name.find("lora") != std::string::npos) {
      std::normal_distribution<float> d(0.0f, 0.05f);
      for (auto& x : np.tensor.values()) x = d(rng);
    }
  TokenSequence seq = plain_sequence({4, 8, 2, 6});
  AttnMask mask = AttnMask::causal(4);
  Tensor before = model.forward(model.embed(seq), mask).logits;
  model.merge_lora_into_base();
  CHECK(model.config().lora_rank == 0);
  Tensor after = model.forward(model.embed(seq), mask).logits;
  REQUIRE(before.numel() == after.numel());
  for (int i = 0; i < before.numel(); ++i)
    CHECK(after.at(i) == doctest::Approx(before.at(i)).epsilon(1e-4).scale(1.0));
  // fresh adapters after the fold are no-ops again
  model.reset_lora(4, false, 123);
  Tensor fresh = model.forward(model.embed(seq), mask).logits;
  CHECK(bytes_equal(after, fresh));
}
