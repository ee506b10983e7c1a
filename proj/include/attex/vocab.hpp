#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "attex/errors.hpp"

namespace attex {

// Reserved indices shared by every model artifact.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;

// Token/index bijection. Indices 0..3 are the reserved markers; real words
// follow in sorted order so construction is order-independent.
class Vocabulary {
 public:
  Vocabulary() { init_reserved(); }

  explicit Vocabulary(const std::vector<std::string>& words) {
    init_reserved();
    std::set<std::string> uniq(words.begin(), words.end());
    for (const auto& w : uniq) {
      if (index_.count(w)) throw ContractError("vocabulary word collides with reserved token: " + w);
      index_[w] = static_cast<int>(words_.size());
      words_.push_back(w);
    }
  }

  int size() const { return static_cast<int>(words_.size()); }

  bool contains(const std::string& w) const { return index_.count(w) != 0; }

  // Lookup for known words; unknown words map to UNK.
  int index_of(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& word(int idx) const {
    if (idx < 0 || idx >= size())
      throw ContractError("vocabulary index " + std::to_string(idx) + " out of range [0," +
                          std::to_string(size()) + ")");
    return words_[idx];
  }

  std::vector<int> encode(const std::vector<std::string>& ws) const {
    std::vector<int> ids;
    ids.reserve(ws.size());
    for (const auto& w : ws) ids.push_back(index_of(w));
    return ids;
  }

  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> ws;
    ws.reserve(ids.size());
    for (int id : ids) ws.push_back(word(id));
    return ws;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"words", std::vector<std::string>(words_.begin() + 4, words_.end())}};
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    Vocabulary v;
    for (const auto& w : j.at("words").get<std::vector<std::string>>()) {
      if (v.index_.count(w)) throw FormatError("duplicate vocabulary word: " + w);
      v.index_[w] = static_cast<int>(v.words_.size());
      v.words_.push_back(w);
    }
    return v;
  }

 private:
  void init_reserved() {
    words_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (int i = 0; i < 4; ++i) index_[words_[i]] = i;
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

// Enforces the word-sequence contract: indices in range, PAD only as a
// suffix, EOS at most once and only as the last non-PAD token.
inline void validate_token_sequence(const std::vector<int>& ids, int vocab_size) {
  bool in_pad = false;
  int eos_count = 0;
  int last_non_pad = -1;
  for (size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || id >= vocab_size)
      throw ContractError("token " + std::to_string(id) + " out of vocabulary range [0," +
                          std::to_string(vocab_size) + ")");
    if (id == kPad) {
      in_pad = true;
    } else {
      if (in_pad) throw ContractError("PAD precedes a non-PAD token at position " + std::to_string(i));
      last_non_pad = static_cast<int>(i);
      if (id == kEos) ++eos_count;
    }
  }
  if (eos_count > 1) throw ContractError("EOS appears more than once");
  if (eos_count == 1 && ids[last_non_pad] != kEos)
    throw ContractError("EOS is not the terminal non-PAD token");
}

}  // namespace attex
