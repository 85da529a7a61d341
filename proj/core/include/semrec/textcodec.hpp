#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "semrec/error.hpp"

namespace semrec {

enum class BlockTag : uint8_t { Content = 0, Token = 1, Placeholder = 2, Task = 3 };

struct TokenSequence {
  std::vector<int> ids;
  std::vector<BlockTag> tags;

  size_t size() const { return ids.size(); }
  void append(int id, BlockTag tag) {
    ids.push_back(id);
    tags.push_back(tag);
  }
};

enum class SpecialKind : uint8_t { Control, Dense, Placeholder, Task, Code };

// Row counts of the embedding tables, in id order: control+word rows first,
// then dense tokens, placeholders, task tokens, and position-specific codes.
struct EmbeddingLayout {
  int words = 0;  // control tokens + corpus words
  int dense = 0;
  int placeholders = 0;
  int tasks = 0;
  int codes = 0;
  int total() const { return words + dense + placeholders + tasks + codes; }
};

// Word-level vocabulary. Ids are dense in [0, size): six control tokens,
// corpus words by descending frequency (ties lexicographic), then the
// registered special blocks. register_specials freezes the vocabulary.
class Vocabulary {
 public:
  Vocabulary() = default;

  static Vocabulary build(const std::vector<std::string>& corpus, int min_count, int max_size);

  // Adds v dense tokens, v placeholders, one task token per name, and v*k
  // position-specific code tokens, then freezes. Throws if already frozen.
  void register_specials(int v, const std::vector<std::string>& task_names, int k);

  bool frozen() const { return frozen_; }
  int size() const { return static_cast<int>(id_to_token_.size()); }
  int word_count() const { return word_count_; }
  int v() const { return v_; }
  int k() const { return k_; }
  int task_count() const { return static_cast<int>(task_names_.size()); }
  const std::vector<std::string>& task_names() const { return task_names_; }
  EmbeddingLayout layout() const;

  int unk_id() const { return 0; }
  int pad_id() const { return 1; }
  int eos_id() const { return 2; }
  int sep_id() const { return 3; }
  int yes_id() const { return 4; }
  int no_id() const { return 5; }

  int dense_id(int i) const;        // i in [1, v]
  int placeholder_id(int i) const;  // i in [1, v]
  int task_id(const std::string& name) const;
  int code_id(int pos, int idx) const;  // pos in [1, v], idx in [1, k]
  bool is_code(int id) const;
  std::pair<int, int> code_of(int id) const;  // (pos, idx)

  bool contains(const std::string& token) const;
  int id_of(const std::string& token) const;  // unknown words map to <unk>
  const std::string& token_of(int id) const;

  // Lowercase, collapse whitespace, split punctuation into its own tokens.
  static std::vector<std::string> normalize(const std::string& text);

  TokenSequence encode(const std::string& text) const;  // requires frozen
  std::string decode(const TokenSequence& seq) const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  void add_token(const std::string& token, SpecialKind kind);

  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::vector<SpecialKind> kinds_;
  std::vector<std::string> task_names_;
  std::map<std::string, int> task_ids_;
  int word_count_ = 0;
  int v_ = 0;
  int k_ = 0;
  int dense_begin_ = 0;
  int placeholder_begin_ = 0;
  int task_begin_ = 0;
  int code_begin_ = 0;
  bool frozen_ = false;
};

}  // namespace semrec
