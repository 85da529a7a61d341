#pragma once

#include <map>
#include <string>
#include <vector>

#include "semrec/backbone.hpp"
#include "semrec/clusterer.hpp"
#include "semrec/textcodec.hpp"

namespace semrec {

// Trie of depth v over all valid semantic identifiers; root-to-leaf paths are
// exactly the columns of the CodeMatrix. Immutable after build.
class CodeTree {
 public:
  struct Node {
    std::map<int, Node> children;  // code value (1-based) -> child
    std::string item_id;           // set at leaves
  };

  static CodeTree build(const CodeMatrix& codes);

  int depth() const { return depth_; }
  int leaf_count() const { return leaf_count_; }
  const Node& root() const { return root_; }
  bool contains(const SemanticId& id) const { return item_at(id) != nullptr; }
  const std::string* item_at(const SemanticId& id) const;

 private:
  Node root_;
  int depth_ = 0;
  int leaf_count_ = 0;
};

enum class BeamConstraint {
  Conditional,      // mask codes outside the trie to probability zero
  Soft,             // restrict only to the position's code sub-vocabulary
  LiteralZeroLogit  // set invalid logits to 0.0 (not -inf) before softmax
};

struct BeamHypothesis {
  SemanticId codes;
  double log_prob = 0.0;
  std::string item_id;  // empty when the tuple is not a catalog item
  bool valid = false;
};

struct BeamSearchOptions {
  int beam_width = 10;
  BeamConstraint constraint = BeamConstraint::Conditional;
};

std::vector<int> flatten_codes(const std::vector<SemanticId>& items, const Vocabulary& vocab);

// v expansion steps over the position-specific code sub-vocabularies, top-B
// prefixes by cumulative log-probability, ties broken toward the smaller code
// tuple. Under Conditional every returned tuple maps to a catalog item; the
// soft modes may emit invalid tuples, reported with valid=false.
std::vector<BeamHypothesis> conditional_beam_search(const std::vector<SemanticId>& history,
                                                    const Backbone& model, const Vocabulary& vocab,
                                                    const CodeTree& tree,
                                                    const BeamSearchOptions& opts);

// Scoring prompt [<score>; history codes; <sep>; candidate codes]; softmax
// over exactly the {yes, no} logits at the final position, yes component.
double score_candidate(const std::vector<SemanticId>& history, const SemanticId& candidate,
                       const Backbone& model, const Vocabulary& vocab);

}  // namespace semrec
