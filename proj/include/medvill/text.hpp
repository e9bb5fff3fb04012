#pragma once

#include "medvill/error.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace medvill {

namespace token_id {
inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kSep = 2;
inline constexpr int kMask = 3;
inline constexpr int kUnk = 4;
inline constexpr int kReservedCount = 5;
}  // namespace token_id

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, raw);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

class Vocabulary {
 public:
  Vocabulary() {
    for (const char* t : {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"}) add(t);
  }

  /// Reserved ids followed by the corpus tokens in sorted order.
  static Vocabulary build(const std::vector<std::string>& texts) {
    std::set<std::string> words;
    for (const auto& t : texts)
      for (auto& w : split_words(t)) words.insert(std::move(w));
    Vocabulary v;
    for (const auto& w : words) v.add(w);
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? token_id::kUnk : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    return tokens_[static_cast<std::size_t>(id)];
  }

  static bool reserved(int id) { return id >= 0 && id < token_id::kReservedCount; }

  std::string serialize() const {
    std::ostringstream out;
    for (int i = 0; i < size(); ++i) out << tokens_[static_cast<std::size_t>(i)] << '\t' << i << '\n';
    return out.str();
  }

  static Vocabulary parse(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    std::map<int, std::string> by_id;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw DataError("vocabulary line without a tab: '" + line + "'");
      by_id[std::stoi(line.substr(tab + 1))] = line.substr(0, tab);
    }
    Vocabulary v;
    int expected = 0;
    for (const auto& [id, tok] : by_id) {
      if (id != expected) throw DataError("vocabulary ids are not contiguous at " + std::to_string(expected));
      if (id < token_id::kReservedCount) {
        if (tok != v.token(id)) throw DataError("reserved token mismatch at id " + std::to_string(id));
      } else {
        if (v.contains(tok)) throw DataError("duplicate vocabulary token '" + tok + "'");
        v.add(tok);
      }
      ++expected;
    }
    if (expected < token_id::kReservedCount) throw DataError("vocabulary misses reserved tokens");
    return v;
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read vocabulary " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
  }

 private:
  void add(const std::string& token) {
    ids_.emplace(token, size());
    tokens_.push_back(token);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

/// Fixed-length id sequence; positions at and after true_length carry PAD.
struct TokenSequence {
  std::vector<int> ids;
  int true_length = 0;

  std::vector<int> tokens() const { return {ids.begin(), ids.begin() + true_length}; }
  bool operator==(const TokenSequence&) const = default;
};

inline TokenSequence pad_tokens(std::vector<int> tokens, int max_len) {
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  if (static_cast<int>(tokens.size()) > max_len) tokens.resize(static_cast<std::size_t>(max_len));
  TokenSequence seq;
  seq.true_length = static_cast<int>(tokens.size());
  seq.ids = std::move(tokens);
  seq.ids.resize(static_cast<std::size_t>(max_len), token_id::kPad);
  return seq;
}

inline TokenSequence tokenize(std::string_view report, const Vocabulary& vocab, int max_len) {
  std::vector<int> ids;
  for (const auto& w : split_words(report)) ids.push_back(vocab.id(w));
  return pad_tokens(std::move(ids), max_len);
}

inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == token_id::kPad) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

}  // namespace medvill
