#include "semrec/codetree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace semrec {

CodeTree CodeTree::build(const CodeMatrix& codes) {
  if (codes.n < 1) throw ValidationError("code tree: empty code matrix");
  if (!codes.columns_distinct())
    throw ValidationError("code tree: duplicate columns (run collision resolution first)");
  CodeTree tree;
  tree.depth_ = codes.v;
  for (int j = 0; j < codes.n; ++j) {
    Node* node = &tree.root_;
    for (int i = 0; i < codes.v; ++i) node = &node->children[codes.at(i, j)];
    node->item_id = codes.item_ids[static_cast<size_t>(j)];
    ++tree.leaf_count_;
  }
  return tree;
}

const std::string* CodeTree::item_at(const SemanticId& id) const {
  if (static_cast<int>(id.size()) != depth_) return nullptr;
  const Node* node = &root_;
  for (int code : id) {
    auto it = node->children.find(code);
    if (it == node->children.end()) return nullptr;
    node = &it->second;
  }
  return node->item_id.empty() ? nullptr : &node->item_id;
}

std::vector<int> flatten_codes(const std::vector<SemanticId>& items, const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.reserve(items.size() * static_cast<size_t>(vocab.v()));
  for (const auto& id : items) {
    if (static_cast<int>(id.size()) != vocab.v())
      throw ValidationError("flatten_codes: semantic id length does not match v");
    for (int pos = 1; pos <= vocab.v(); ++pos)
      ids.push_back(vocab.code_id(pos, id[static_cast<size_t>(pos - 1)]));
  }
  return ids;
}

namespace {

TokenSequence causal_sequence(const std::vector<int>& ids) {
  TokenSequence seq;
  for (int id : ids) seq.append(id, BlockTag::Content);
  return seq;
}

struct Partial {
  SemanticId codes;
  double log_prob = 0.0;
  const CodeTree::Node* node = nullptr;  // null once the prefix leaves the trie
};

}  // namespace

std::vector<BeamHypothesis> conditional_beam_search(const std::vector<SemanticId>& history,
                                                    const Backbone& model, const Vocabulary& vocab,
                                                    const CodeTree& tree,
                                                    const BeamSearchOptions& opts) {
  if (opts.beam_width < 1) throw ValidationError("beam search: beam width must be positive");
  if (tree.leaf_count() < 1) throw ValidationError("beam search: empty code tree");
  const int v = vocab.v();
  const int k = vocab.k();
  if (tree.depth() != v) throw ValidationError("beam search: tree depth does not match v");

  std::vector<int> prompt = {vocab.task_id("next_item")};
  for (int id : flatten_codes(history, vocab)) prompt.push_back(id);

  std::vector<Partial> beams = {{{}, 0.0, &tree.root()}};
  for (int step = 1; step <= v; ++step) {
    const int base = vocab.code_id(step, 1);
    std::vector<Partial> expanded;
    for (const Partial& beam : beams) {
      std::vector<int> ids = prompt;
      for (int pos = 1; pos < step; ++pos)
        ids.push_back(vocab.code_id(pos, beam.codes[static_cast<size_t>(pos - 1)]));
      TokenSequence seq = causal_sequence(ids);
      ForwardResult out = model.forward(model.embed(seq), AttnMask::causal(static_cast<int>(ids.size())));
      const int last = static_cast<int>(ids.size()) - 1;
      std::vector<double> logits(static_cast<size_t>(k));
      for (int c = 0; c < k; ++c) logits[static_cast<size_t>(c)] = out.logits.at(last, base + c);

      std::vector<uint8_t> allowed(static_cast<size_t>(k), 1);
      if (opts.constraint == BeamConstraint::Conditional) {
        std::fill(allowed.begin(), allowed.end(), 0);
        if (beam.node != nullptr)
          for (const auto& [code, child] : beam.node->children) allowed[static_cast<size_t>(code - 1)] = 1;
      } else if (opts.constraint == BeamConstraint::LiteralZeroLogit) {
        // the sentence taken literally: zero the logit, keep the path open
        std::vector<uint8_t> in_tree(static_cast<size_t>(k), 0);
        if (beam.node != nullptr)
          for (const auto& [code, child] : beam.node->children) in_tree[static_cast<size_t>(code - 1)] = 1;
        for (int c = 0; c < k; ++c)
          if (!in_tree[static_cast<size_t>(c)]) logits[static_cast<size_t>(c)] = 0.0;
      }

      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c)
        if (allowed[static_cast<size_t>(c)]) mx = std::max(mx, logits[static_cast<size_t>(c)]);
      if (!std::isfinite(mx)) continue;  // conditional beam with no children cannot happen on a valid trie
      double denom = 0.0;
      for (int c = 0; c < k; ++c)
        if (allowed[static_cast<size_t>(c)]) denom += std::exp(logits[static_cast<size_t>(c)] - mx);

      for (int c = 0; c < k; ++c) {
        if (!allowed[static_cast<size_t>(c)]) continue;
        Partial next;
        next.codes = beam.codes;
        next.codes.push_back(c + 1);
        next.log_prob = beam.log_prob + (logits[static_cast<size_t>(c)] - mx - std::log(denom));
        if (beam.node != nullptr) {
          auto it = beam.node->children.find(c + 1);
          next.node = it == beam.node->children.end() ? nullptr : &it->second;
        }
        expanded.push_back(std::move(next));
      }
    }
    std::sort(expanded.begin(), expanded.end(), [](const Partial& a, const Partial& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      return a.codes < b.codes;
    });
    if (static_cast<int>(expanded.size()) > opts.beam_width)
      expanded.resize(static_cast<size_t>(opts.beam_width));
    beams = std::move(expanded);
  }

  std::vector<BeamHypothesis> out;
  out.reserve(beams.size());
  for (const Partial& beam : beams) {
    BeamHypothesis h;
    h.codes = beam.codes;
    h.log_prob = beam.log_prob;
    if (const std::string* item = tree.item_at(beam.codes)) {
      h.item_id = *item;
      h.valid = true;
    }
    out.push_back(std::move(h));
  }
  return out;
}

double score_candidate(const std::vector<SemanticId>& history, const SemanticId& candidate,
                       const Backbone& model, const Vocabulary& vocab) {
  std::vector<int> ids = {vocab.task_id("score")};
  for (int id : flatten_codes(history, vocab)) ids.push_back(id);
  ids.push_back(vocab.sep_id());
  for (int id : flatten_codes({candidate}, vocab)) ids.push_back(id);
  TokenSequence seq = causal_sequence(ids);
  ForwardResult out = model.forward(model.embed(seq), AttnMask::causal(static_cast<int>(ids.size())));
  const int last = static_cast<int>(ids.size()) - 1;
  const double yes = out.logits.at(last, vocab.yes_id());
  const double no = out.logits.at(last, vocab.no_id());
  return 1.0 / (1.0 + std::exp(no - yes));
}

}  // namespace semrec
