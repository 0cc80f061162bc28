#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "duet/error.hpp"

namespace duet {

enum class TextKind { Caption, Question, Answer };

// Truncation caps in words, before the END token is appended.
inline std::size_t truncation_cap(TextKind kind) {
  switch (kind) {
    case TextKind::Caption: return 24;
    case TextKind::Question: return 16;
    case TextKind::Answer: return 8;
  }
  throw ContractError("bad TextKind");
}

// Lowercase, split on anything that is not a letter or digit.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Token <-> index map with reserved specials at fixed indices 0-3.
// Out-of-vocabulary tokens fall back to UNK.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kEnd = 2;
  static constexpr int kUnk = 3;

  Vocabulary() { seed_reserved(); }

  static Vocabulary from_tokens(const std::vector<std::string>& words) {
    Vocabulary v;
    for (const auto& w : words) v.add(w);
    return v;
  }

  int add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  int lookup(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  // Joins non-special tokens, stopping at the first END.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kEnd) break;
      if (id == kPad || id == kStart) continue;
      if (!out.empty()) out.push_back(' ');
      out += token(id);
    }
    return out;
  }

 private:
  void seed_reserved() {
    tokens_ = {"<pad>", "<start>", "<end>", "<unk>"};
    for (int i = 0; i < 4; ++i) index_.emplace(tokens_[static_cast<std::size_t>(i)], i);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Keeps tokens seen at least min_count times, ordered by descending frequency
// then lexicographically, so ties break the same way on every run.
inline Vocabulary build_vocab(const std::vector<std::string>& corpus, int min_count = 5) {
  if (corpus.empty()) throw ContractError("build_vocab over empty corpus");
  std::map<std::string, long> counts;
  for (const auto& text : corpus)
    for (auto& tok : tokenize(text)) ++counts[tok];

  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  for (const auto& [tok, count] : ranked)
    if (count >= min_count) v.add(tok);
  return v;
}

// Tokenize, truncate to the per-kind cap, map through the vocabulary with UNK
// fallback, then terminate with END. Empty text yields just the END token.
inline std::vector<int> preprocess(std::string_view text, TextKind kind, const Vocabulary& vocab) {
  auto words = tokenize(text);
  const std::size_t cap = truncation_cap(kind);
  if (words.size() > cap) words.resize(cap);
  std::vector<int> ids;
  ids.reserve(words.size() + 1);
  for (const auto& w : words) ids.push_back(vocab.lookup(w));
  ids.push_back(Vocabulary::kEnd);
  return ids;
}

}  // namespace duet
