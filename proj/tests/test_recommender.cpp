#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>

#include "semrec/recommender.hpp"

using namespace semrec;

namespace {

// hand-assigned distinct codes: item j -> (j / k + 1, j % k + 1)
CodeMatrix grid_codes(int n, int k) {
  CodeMatrix m;
  m.v = 2;
  m.n = n;
  m.codes.assign(static_cast<size_t>(2) * n, 0);
  char buf[16];
  for (int j = 0; j < n; ++j) {
    std::snprintf(buf, sizeof(buf), "it%04d", j);
    m.item_ids.emplace_back(buf);
    m.at(0, j) = j / k + 1;
    m.at(1, j) = j % k + 1;
  }
  return m;
}

std::vector<ItemRecord> grid_items(int n) {
  static const char* pool[] = {"amber", "birch", "cedar", "dunes", "ember",
                               "frost", "grove", "heron", "inlet", "juniper"};
  std::vector<ItemRecord> items;
  char buf[16];
  for (int j = 0; j < n; ++j) {
    std::snprintf(buf, sizeof(buf), "it%04d", j);
    ItemRecord item;
    item.item_id = buf;
    item.attributes = {{"title", std::string(pool[j % 10]) + " " + pool[(j / 3) % 10]},
                       {"category", pool[j % 4]}};
    item.content_attr_count = 1;
    items.push_back(std::move(item));
  }
  return items;
}

Vocabulary grid_vocab(const std::vector<ItemRecord>& items, int v, int k) {
  std::vector<std::string> corpus;
  for (const auto& item : items)
    for (const auto& [name, text] : item.attributes) corpus.push_back(name + " : " + text);
  Vocabulary vocab = Vocabulary::build(corpus, 1, 4096);
  auto tasks = tokenizer_task_names(items.front());
  tasks.insert(tasks.end(), {"next_item", "align", "score"});
  vocab.register_specials(v, tasks, k);
  return vocab;
}

Backbone grid_model(const Vocabulary& vocab, uint64_t seed = 5, int dim = 32, int lora = 4) {
  BackboneConfig cfg;
  cfg.layers = 2;
  cfg.model_dim = dim;
  cfg.heads = 4;
  cfg.ffn_dim = dim * 4;
  cfg.max_seq_len = 128;
  cfg.vocab_size = vocab.layout().total();
  cfg.lora_rank = lora;
  return Backbone(cfg, vocab.layout(), seed);
}

std::string item_name(int j) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "it%04d", j);
  return buf;
}

// Independent oracle: enumerate every root-to-leaf path and score it with
// direct forward calls under the same conditional normalization.
std::vector<BeamHypothesis> exhaustive_ranking(const std::vector<SemanticId>& history,
                                               const Backbone& model, const Vocabulary& vocab,
                                               const CodeTree& tree, const CodeMatrix& codes) {
  std::vector<BeamHypothesis> out;
  for (int j = 0; j < codes.n; ++j) {
    const SemanticId id = codes.column(j);
    std::vector<int> ids = {vocab.task_id("next_item")};
    for (int t : flatten_codes(history, vocab)) ids.push_back(t);
    double log_prob = 0.0;
    const CodeTree::Node* node = &tree.root();
    for (int pos = 1; pos <= codes.v; ++pos) {
      TokenSequence seq;
      for (int t : ids) seq.append(t, BlockTag::Content);
      ForwardResult fw = model.forward(model.embed(seq), AttnMask::causal(static_cast<int>(ids.size())));
      const int last = static_cast<int>(ids.size()) - 1;
      double mx = -1e300, denom = 0.0;
      for (const auto& [code, child] : node->children)
        mx = std::max(mx, static_cast<double>(fw.logits.at(last, vocab.code_id(pos, code))));
      for (const auto& [code, child] : node->children)
        denom += std::exp(fw.logits.at(last, vocab.code_id(pos, code)) - mx);
      const int chosen = id[static_cast<size_t>(pos - 1)];
      log_prob += fw.logits.at(last, vocab.code_id(pos, chosen)) - mx - std::log(denom);
      node = &node->children.at(chosen);
      ids.push_back(vocab.code_id(pos, chosen));
    }
    BeamHypothesis h;
    h.codes = id;
    h.log_prob = log_prob;
    h.item_id = codes.item_ids[static_cast<size_t>(j)];
    h.valid = true;
    out.push_back(std::move(h));
  }
  std::sort(out.begin(), out.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.codes < b.codes;
  });
  return out;
}

CodeMatrix fig5_codes() {
  CodeMatrix m;
  m.v = 2;
  m.n = 3;
  m.item_ids = {"a", "b", "c"};
  m.codes = {1, 1, 2, 2, 3, 1};  // columns (1,2), (1,3), (2,1)
  return m;
}

}  // namespace

TEST_CASE("code tree structure from a 3-item matrix") {
  CodeTree tree = CodeTree::build(fig5_codes());
  CHECK(tree.leaf_count() == 3);
  CHECK(tree.depth() == 2);
  const auto& root = tree.root();
  REQUIRE(root.children.size() == 2);
  CHECK(root.children.count(1) == 1);
  CHECK(root.children.count(2) == 1);
  const auto& one = root.children.at(1);
  CHECK(one.children.size() == 2);
  CHECK(one.children.count(2) == 1);
  CHECK(one.children.count(3) == 1);
  CHECK(*tree.item_at({1, 2}) == "a");
  CHECK(*tree.item_at({2, 1}) == "c");
  CHECK_FALSE(tree.contains({2, 2}));
}

TEST_CASE("code tree membership matches the column set") {
  CodeMatrix codes = grid_codes(24, 5);
  CodeTree tree = CodeTree::build(codes);
  std::set<SemanticId> catalog;
  for (int j = 0; j < codes.n; ++j) catalog.insert(codes.column(j));
  std::mt19937 rng(3);
  for (int j = 0; j < codes.n; ++j) CHECK(tree.contains(codes.column(j)));
  for (int trial = 0; trial < 200; ++trial) {
    SemanticId id = {static_cast<int>(rng() % 7) + 1, static_cast<int>(rng() % 7) + 1};
    CHECK(tree.contains(id) == (catalog.count(id) > 0));
  }
}

TEST_CASE("single-item tree has exactly one path") {
  CodeMatrix m;
  m.v = 3;
  m.n = 1;
  m.item_ids = {"only"};
  m.codes = {2, 5, 1};
  CodeTree tree = CodeTree::build(m);
  CHECK(tree.leaf_count() == 1);
  CHECK(*tree.item_at({2, 5, 1}) == "only");
}

TEST_CASE("duplicate columns are rejected") {
  CodeMatrix m;
  m.v = 2;
  m.n = 2;
  m.item_ids = {"a", "b"};
  m.codes = {1, 1, 2, 2};
  CHECK_THROWS_AS(CodeTree::build(m), ValidationError);
}

TEST_CASE("retrieval sample template") {
  CodeMatrix codes = grid_codes(12, 4);
  auto items = grid_items(12);
  Vocabulary vocab = grid_vocab(items, 2, 4);

  SUBCASE("history of one item: prompt 1+v, label v") {
    UserSequence seq{"u1", {item_name(3)}, item_name(7)};
    RecSample s = build_retrieval_sample(seq, codes, vocab, 10);
    CHECK(s.ids.size() == 3 + 2);
    CHECK(s.label_ids.size() == 2);
    CHECK(s.ids[0] == vocab.task_id("next_item"));
    CHECK(s.label_ids[0] == vocab.code_id(1, codes.at(0, 7)));
    CHECK(s.label_ids[1] == vocab.code_id(2, codes.at(1, 7)));
    // loss exactly on the positions predicting the label
    int loss_count = 0;
    for (size_t p = 0; p < s.ids.size(); ++p)
      if (s.loss_positions[p]) {
        ++loss_count;
        CHECK(s.targets[p] == s.ids[p + 1]);
      }
    CHECK(loss_count == 2);
  }

  SUBCASE("over-long history keeps the most recent items") {
    std::vector<std::string> history;
    for (int j = 0; j < 8; ++j) history.push_back(item_name(j));
    UserSequence seq{"u2", history, item_name(9)};
    RecSample s = build_retrieval_sample(seq, codes, vocab, 3);
    CHECK(s.ids.size() == 1 + 3 * 2 + 2);
    // first history token is item 5's position-1 code
    CHECK(s.ids[1] == vocab.code_id(1, codes.at(0, 5)));
  }

  SUBCASE("flattened history length is items times v") {
    std::vector<SemanticId> hist(12, SemanticId{1, 2});
    CHECK(flatten_codes(hist, vocab).size() == 12 * 2);
  }

  SUBCASE("unknown target is an error") {
    UserSequence seq{"u3", {item_name(1)}, "missing"};
    CHECK_THROWS_AS(build_retrieval_sample(seq, codes, vocab, 10), ValidationError);
  }
}

TEST_CASE("alignment samples alternate direction by item parity") {
  CodeMatrix codes = grid_codes(10, 4);
  auto items = grid_items(10);
  Vocabulary vocab = grid_vocab(items, 2, 4);

  int code_to_text = 0, text_to_code = 0;
  for (int j = 0; j < 10; ++j) {
    RecSample s = build_alignment_sample(items[static_cast<size_t>(j)], codes.column(j), vocab, j);
    CHECK(s.ids[0] == vocab.task_id("align"));
    if (j % 2 == 0) {
      ++code_to_text;
      CHECK(s.ids[1] == vocab.code_id(1, codes.at(0, j)));
      CHECK(s.label_ids.back() == vocab.eos_id());
    } else {
      ++text_to_code;
      REQUIRE(s.label_ids.size() == 2);
      CHECK(s.label_ids[0] == vocab.code_id(1, codes.at(0, j)));
      CHECK(s.label_ids[1] == vocab.code_id(2, codes.at(1, j)));
    }
  }
  CHECK(code_to_text == 5);
  CHECK(text_to_code == 5);
}

TEST_CASE("scoring sample and score_candidate") {
  CodeMatrix codes = grid_codes(12, 4);
  auto items = grid_items(12);
  Vocabulary vocab = grid_vocab(items, 2, 4);
  Backbone model = grid_model(vocab);
  std::vector<SemanticId> history = {codes.column(0), codes.column(5)};

  SUBCASE("sample template") {
    RecSample pos = build_scoring_sample(history, codes.column(7), true, vocab);
    CHECK(pos.ids[0] == vocab.task_id("score"));
    CHECK(pos.ids[1 + 4] == vocab.sep_id());
    CHECK(pos.label_ids == std::vector<int>{vocab.yes_id()});
    RecSample neg = build_scoring_sample(history, codes.column(7), false, vocab);
    CHECK(neg.label_ids == std::vector<int>{vocab.no_id()});
  }

  SUBCASE("untrained score lies in (0,1) and the pair sums to one") {
    double yes = score_candidate(history, codes.column(7), model, vocab);
    CHECK(yes > 0.0);
    CHECK(yes < 1.0);
    const double no = 1.0 - yes;
    CHECK(yes + no == 1.0);
  }

  SUBCASE("equal yes/no logits give exactly one half") {
    // force the yes and no embedding rows equal; weight tying then makes the
    // two logits identical at every position
    for (const auto& np : model.named_parameters())
      if (np.name == "word_emb") {
        Tensor t = np.tensor;
        const int d = model.config().model_dim;
        for (int c = 0; c < d; ++c)
          t.values()[static_cast<size_t>(vocab.no_id()) * d + c] =
              t.values()[static_cast<size_t>(vocab.yes_id()) * d + c];
      }
    CHECK(score_candidate(history, codes.column(7), model, vocab) == 0.5);
  }
}

TEST_CASE("conditional beam search") {
  CodeMatrix codes = grid_codes(12, 4);
  auto items = grid_items(12);
  Vocabulary vocab = grid_vocab(items, 2, 4);
  Backbone model = grid_model(vocab);
  CodeTree tree = CodeTree::build(codes);
  std::vector<SemanticId> history = {codes.column(2), codes.column(9)};

  SUBCASE("every conditional result is a catalog item") {
    BeamSearchOptions opts;
    opts.beam_width = 8;
    auto ranked = conditional_beam_search(history, model, vocab, tree, opts);
    REQUIRE(ranked.size() == 8);
    for (const auto& h : ranked) {
      CHECK(h.valid);
      CHECK(tree.contains(h.codes));
    }
    // scores descend
    for (size_t i = 1; i < ranked.size(); ++i) CHECK(ranked[i - 1].log_prob >= ranked[i].log_prob);
  }

  SUBCASE("beam width past the leaf count returns every leaf, ranked") {
    BeamSearchOptions opts;
    opts.beam_width = 50;
    auto ranked = conditional_beam_search(history, model, vocab, tree, opts);
    CHECK(ranked.size() == 12);
    std::set<std::string> seen;
    for (const auto& h : ranked) seen.insert(h.item_id);
    CHECK(seen.size() == 12);
  }

  SUBCASE("B >= n ranking equals the exhaustive-enumeration oracle") {
    BeamSearchOptions opts;
    opts.beam_width = 12;
    auto ranked = conditional_beam_search(history, model, vocab, tree, opts);
    auto oracle = exhaustive_ranking(history, model, vocab, tree, codes);
    REQUIRE(ranked.size() == oracle.size());
    for (size_t i = 0; i < ranked.size(); ++i) {
      CHECK(ranked[i].item_id == oracle[i].item_id);
      CHECK(ranked[i].codes == oracle[i].codes);
      CHECK(ranked[i].log_prob == doctest::Approx(oracle[i].log_prob).epsilon(1e-12));
    }
  }

  SUBCASE("monotone beam: the top result survives widening") {
    BeamSearchOptions narrow;
    narrow.beam_width = 3;
    BeamSearchOptions wide;
    wide.beam_width = 9;
    auto a = conditional_beam_search(history, model, vocab, tree, narrow);
    auto b = conditional_beam_search(history, model, vocab, tree, wide);
    bool found = false;
    for (const auto& h : b)
      if (h.codes == a.front().codes) found = true;
    if (found) CHECK(a.front().codes == b.front().codes);
  }

  SUBCASE("deterministic across calls") {
    BeamSearchOptions opts;
    opts.beam_width = 6;
    auto a = conditional_beam_search(history, model, vocab, tree, opts);
    auto b = conditional_beam_search(history, model, vocab, tree, opts);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].codes == b[i].codes);
      CHECK(a[i].log_prob == b[i].log_prob);
    }
  }
}

TEST_CASE("soft constraints can emit invalid tuples, conditional cannot") {
  CodeMatrix codes = fig5_codes();
  auto items = grid_items(3);
  items[0].item_id = "a";
  items[1].item_id = "b";
  items[2].item_id = "c";
  Vocabulary vocab = grid_vocab(items, 2, 3);
  Backbone model = grid_model(vocab, 17);
  CodeTree tree = CodeTree::build(codes);
  std::vector<SemanticId> history = {codes.column(0)};

  BeamSearchOptions conditional;
  conditional.beam_width = 9;
  auto strict = conditional_beam_search(history, model, vocab, tree, conditional);
  CHECK(strict.size() == 3);  // only the three valid paths exist
  for (const auto& h : strict) {
    CHECK(h.valid);
    CHECK(h.codes != SemanticId{2, 2});
  }

  BeamSearchOptions soft;
  soft.beam_width = 4;
  soft.constraint = BeamConstraint::Soft;
  auto loose = conditional_beam_search(history, model, vocab, tree, soft);
  REQUIRE(loose.size() == 4);  // 9 combinations searched, only 3 are items
  int invalid = 0;
  for (const auto& h : loose)
    if (!h.valid) ++invalid;
  CHECK(invalid >= 1);

  BeamSearchOptions literal;
  literal.beam_width = 9;
  literal.constraint = BeamConstraint::LiteralZeroLogit;
  auto leaky = conditional_beam_search(history, model, vocab, tree, literal);
  REQUIRE(leaky.size() == 9);
  invalid = 0;
  for (const auto& h : leaky)
    if (!h.valid) ++invalid;
  CHECK(invalid == 6);
}

TEST_CASE("single-item tree: the item comes back with its conditional log-prob") {
  CodeMatrix m;
  m.v = 2;
  m.n = 1;
  m.item_ids = {"solo"};
  m.codes = {3, 1};
  auto items = grid_items(1);
  items[0].item_id = "solo";
  Vocabulary vocab = grid_vocab(items, 2, 4);
  Backbone model = grid_model(vocab);
  CodeTree tree = CodeTree::build(m);
  BeamSearchOptions opts;
  opts.beam_width = 5;
  auto ranked = conditional_beam_search({m.column(0)}, model, vocab, tree, opts);
  REQUIRE(ranked.size() == 1);
  CHECK(ranked[0].item_id == "solo");
  // one valid child per step: conditional probability one at both steps
  CHECK(ranked[0].log_prob == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("sequences TSV round-trip") {
  std::vector<UserSequence> seqs = {{"u1", {"a", "b"}, "c"}, {"u2", {"x"}, "y"}};
  save_sequences_tsv("seqs_test.tsv", seqs);
  auto r = load_sequences_tsv("seqs_test.tsv");
  std::remove("seqs_test.tsv");
  REQUIRE(r.size() == 2);
  CHECK(r[0].user_id == "u1");
  CHECK(r[0].history == std::vector<std::string>{"a", "b"});
  CHECK(r[0].target == "c");
  CHECK(r[1].history == std::vector<std::string>{"x"});
}

TEST_CASE("train_recommender learns a successor rule") {
  const int n = 30;
  CodeMatrix codes = grid_codes(n, 8);
  auto items = grid_items(n);
  Vocabulary vocab = grid_vocab(items, 2, 8);
  CodeTree tree = CodeTree::build(codes);

  // histories walk the successor cycle; the target continues it
  auto make_seqs = [&](int count, uint32_t seed) {
    std::mt19937 rng(seed);
    std::vector<UserSequence> seqs;
    for (int u = 0; u < count; ++u) {
      int start = static_cast<int>(rng() % n);
      int len = 3 + static_cast<int>(rng() % 4);
      UserSequence seq;
      seq.user_id = "u" + std::to_string(u);
      int cur = start;
      for (int i = 0; i < len; ++i) {
        seq.history.push_back(item_name(cur));
        cur = (cur + 1) % n;
      }
      seq.target = item_name(cur);
      seqs.push_back(std::move(seq));
    }
    return seqs;
  };
  auto train = make_seqs(60, 1);
  auto valid = make_seqs(20, 2);

  RecTrainOptions opts;
  opts.max_epochs = 16;
  opts.batch_size = 4;
  opts.adam.lr = 3e-3f;
  opts.beam_width = 10;
  opts.scoring_task = false;  // concentrate this test on the retrieval signal

  Backbone model = grid_model(vocab, 5, 48, 8);
  RecTrainReport report = train_recommender(items, train, valid, codes, tree, model, vocab, opts, 7);
  REQUIRE(!report.epochs.empty());
  const double baseline = 5.0 / n;  // 5/30; the e2e 5x criterion applies at n=200
  CHECK(report.best_recall5 >= 3.5 * baseline);

  SUBCASE("no-alignment ablation still runs and reports") {
    RecTrainOptions ablated = opts;
    ablated.alignment_task = false;
    ablated.max_epochs = 2;
    Backbone m2 = grid_model(vocab, 5, 48, 8);
    RecTrainReport r2 = train_recommender(items, train, valid, codes, tree, m2, vocab, ablated, 7);
    CHECK(!r2.epochs.empty());
  }

  SUBCASE("same seed, same phase transition") {
    RecTrainOptions short_opts = opts;
    short_opts.max_epochs = 6;
    Backbone a = grid_model(vocab, 5, 48, 8);
    Backbone b = grid_model(vocab, 5, 48, 8);
    RecTrainReport ra = train_recommender(items, train, valid, codes, tree, a, vocab, short_opts, 11);
    RecTrainReport rb = train_recommender(items, train, valid, codes, tree, b, vocab, short_opts, 11);
    CHECK(ra.phase_transition_epoch == rb.phase_transition_epoch);
    REQUIRE(ra.epochs.size() == rb.epochs.size());
    for (size_t i = 0; i < ra.epochs.size(); ++i) {
      CHECK(ra.epochs[i].mean_loss == rb.epochs[i].mean_loss);
      CHECK(ra.epochs[i].valid_recall5 == rb.epochs[i].valid_recall5);
    }
  }
}
