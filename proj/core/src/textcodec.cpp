#include "semrec/textcodec.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include <json.hpp>

namespace semrec {

namespace {
const char* kControls[] = {"<unk>", "<pad>", "<eos>", "<sep>", "<yes>", "<no>"};
constexpr int kControlCount = 6;
}  // namespace

std::vector<std::string> Vocabulary::normalize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string word;
  auto flush = [&]() {
    if (!word.empty()) {
      tokens.push_back(word);
      word.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      tokens.emplace_back(1, static_cast<char>(c));
    } else {
      word.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return tokens;
}

void Vocabulary::add_token(const std::string& token, SpecialKind kind) {
  if (token_to_id_.count(token)) throw ValidationError("vocab: duplicate token '" + token + "'");
  token_to_id_.emplace(token, static_cast<int>(id_to_token_.size()));
  id_to_token_.push_back(token);
  kinds_.push_back(kind);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, int min_count, int max_size) {
  if (corpus.empty()) throw ValidationError("vocab: empty corpus");
  if (max_size < kControlCount)
    throw ValidationError("vocab: max_size smaller than control token count");
  std::unordered_map<std::string, int64_t> counts;
  for (const auto& doc : corpus)
    for (const auto& tok : normalize(doc)) ++counts[tok];

  std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary vocab;
  for (const char* c : kControls) vocab.add_token(c, SpecialKind::Control);
  for (const auto& [tok, count] : ranked) {
    if (count < min_count) continue;
    if (vocab.size() >= max_size) break;
    vocab.add_token(tok, SpecialKind::Control);
  }
  // Control tokens share the word-embedding table, so every id below
  // word_count_ is a "word row".
  vocab.word_count_ = vocab.size();
  return vocab;
}

void Vocabulary::register_specials(int v, const std::vector<std::string>& task_names, int k) {
  if (frozen_) throw ValidationError("vocab: specials already registered (vocabulary is frozen)");
  if (v < 1 || k < 1) throw ValidationError("vocab: v and k must be positive");
  v_ = v;
  k_ = k;
  dense_begin_ = size();
  for (int i = 1; i <= v; ++i) add_token("<dt" + std::to_string(i) + ">", SpecialKind::Dense);
  placeholder_begin_ = size();
  for (int i = 1; i <= v; ++i) add_token("<ph" + std::to_string(i) + ">", SpecialKind::Placeholder);
  task_begin_ = size();
  for (const auto& name : task_names) {
    add_token("<" + name + ">", SpecialKind::Task);
    task_ids_.emplace(name, size() - 1);
    task_names_.push_back(name);
  }
  code_begin_ = size();
  for (int pos = 1; pos <= v; ++pos)
    for (int idx = 1; idx <= k; ++idx)
      add_token("<c" + std::to_string(pos) + "_" + std::to_string(idx) + ">", SpecialKind::Code);
  frozen_ = true;
}

EmbeddingLayout Vocabulary::layout() const {
  EmbeddingLayout l;
  l.words = word_count_;
  l.dense = v_;
  l.placeholders = v_;
  l.tasks = task_count();
  l.codes = v_ * k_;
  return l;
}

int Vocabulary::dense_id(int i) const {
  if (i < 1 || i > v_) throw ValidationError("vocab: dense token index out of range");
  return dense_begin_ + i - 1;
}

int Vocabulary::placeholder_id(int i) const {
  if (i < 1 || i > v_) throw ValidationError("vocab: placeholder index out of range");
  return placeholder_begin_ + i - 1;
}

int Vocabulary::task_id(const std::string& name) const {
  auto it = task_ids_.find(name);
  if (it == task_ids_.end()) throw ValidationError("vocab: unknown task '" + name + "'");
  return it->second;
}

int Vocabulary::code_id(int pos, int idx) const {
  if (pos < 1 || pos > v_) throw ValidationError("vocab: code position out of range");
  if (idx < 1 || idx > k_) throw ValidationError("vocab: code index out of range");
  return code_begin_ + (pos - 1) * k_ + (idx - 1);
}

bool Vocabulary::is_code(int id) const { return frozen_ && id >= code_begin_ && id < size(); }

std::pair<int, int> Vocabulary::code_of(int id) const {
  if (!is_code(id)) throw ValidationError("vocab: id is not a code token");
  const int rel = id - code_begin_;
  return {rel / k_ + 1, rel % k_ + 1};
}

bool Vocabulary::contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

int Vocabulary::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? unk_id() : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || id >= size()) throw ValidationError("vocab: id " + std::to_string(id) + " out of range");
  return id_to_token_[static_cast<size_t>(id)];
}

TokenSequence Vocabulary::encode(const std::string& text) const {
  if (!frozen_) throw ValidationError("vocab: encode requires a frozen vocabulary");
  TokenSequence seq;
  for (const auto& tok : normalize(text)) seq.append(id_of(tok), BlockTag::Content);
  return seq;
}

std::string Vocabulary::decode(const TokenSequence& seq) const {
  std::string out;
  for (int id : seq.ids) {
    if (id < 0 || id >= size())
      throw ValidationError("vocab: unknown id " + std::to_string(id) + " in decode");
    if (!out.empty()) out.push_back(' ');
    out += id_to_token_[static_cast<size_t>(id)];
  }
  return out;
}

void Vocabulary::save(const std::string& path) const {
  nlohmann::ordered_json j;
  j["version"] = 1;
  std::vector<std::string> words(id_to_token_.begin() + kControlCount,
                                 id_to_token_.begin() + word_count_);
  j["words"] = words;
  nlohmann::ordered_json specials;
  specials["control"] = std::vector<std::string>(kControls, kControls + kControlCount);
  specials["dense"] = v_;
  specials["placeholders"] = v_;
  specials["tasks"] = task_names_;
  specials["code_positions"] = v_;
  specials["codes_per_position"] = k_;
  j["specials"] = specials;
  j["frozen"] = frozen_;
  std::ofstream f(path);
  if (!f) throw ValidationError("vocab: cannot write " + path);
  f << j.dump(2) << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("vocab: cannot read " + path);
  nlohmann::json j;
  f >> j;
  if (!j.contains("version") || j["version"].get<int>() != 1)
    throw ValidationError("vocab: unsupported file version in " + path);
  Vocabulary vocab;
  for (const char* c : kControls) vocab.add_token(c, SpecialKind::Control);
  for (const auto& w : j["words"]) vocab.add_token(w.get<std::string>(), SpecialKind::Control);
  vocab.word_count_ = vocab.size();
  if (j["frozen"].get<bool>()) {
    const auto& s = j["specials"];
    vocab.register_specials(s["dense"].get<int>(), s["tasks"].get<std::vector<std::string>>(),
                            s["codes_per_position"].get<int>());
  }
  return vocab;
}

}  // namespace semrec
