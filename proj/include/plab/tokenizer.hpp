#pragma once

// Tokenizers. Two implementations sit behind one interface:
//   WordTokenizer  closed vocabulary of whitespace-prefixed words and single
//                  punctuation marks, built from the texts it must encode;
//   BpeTokenizer   byte-level BPE loaded from a tokenizer.json (vocab +
//                  merges + added special tokens).

#include <algorithm>
#include <cctype>
#include <limits>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "plab/error.hpp"
#include "plab/model.hpp"

namespace plab {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual TokenIds encode(std::string_view text) const = 0;
  virtual std::string decode(const TokenIds& ids) const = 0;
  virtual std::size_t vocab_size() const = 0;
  /// Id of a piece that must encode as exactly one token, if it does.
  virtual std::optional<std::uint32_t> single_token(std::string_view piece) const {
    const TokenIds ids = encode(piece);
    if (ids.size() != 1) return std::nullopt;
    return ids[0];
  }
  virtual nlohmann::json to_json() const = 0;
};

namespace detail {

inline bool is_word_byte(unsigned char c) {
  return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
         c >= 0x80;
}

/// Splits text into word-level pieces whose concatenation is the text:
/// `<|special|>` markers, single newlines, and runs of spaces glued to the
/// following word or punctuation mark. Trailing spaces form their own piece.
inline std::vector<std::string_view> word_pieces(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t start = i;
    if (text.compare(i, 2, "<|") == 0) {
      const auto end = text.find("|>", i + 2);
      if (end != std::string_view::npos) {
        i = end + 2;
        out.push_back(text.substr(start, i - start));
        continue;
      }
    }
    if (text[i] == '\n') {
      out.push_back(text.substr(i, 1));
      ++i;
      continue;
    }
    while (i < text.size() && text[i] == ' ') ++i;
    if (i == text.size() || text[i] == '\n' || text.compare(i, 2, "<|") == 0) {
      out.push_back(text.substr(start, i - start));
      continue;
    }
    if (is_word_byte(static_cast<unsigned char>(text[i]))) {
      while (i < text.size() && is_word_byte(static_cast<unsigned char>(text[i]))) ++i;
    } else {
      ++i;
    }
    out.push_back(text.substr(start, i - start));
  }
  return out;
}

}  // namespace detail

class WordTokenizer final : public Tokenizer {
 public:
  WordTokenizer() = default;

  /// Vocabulary is the sorted set of pieces; ids follow byte order.
  explicit WordTokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
      if (!ids_.emplace(vocab_[i], static_cast<std::uint32_t>(i)).second) {
        fail(ErrorKind::tokenization, "duplicate vocabulary entry '" + vocab_[i] + "'");
      }
    }
  }

  /// Closed vocabulary covering every piece of `texts` plus `extra` pieces.
  static WordTokenizer build(const std::vector<std::string>& texts,
                             const std::vector<std::string>& extra = {}) {
    std::set<std::string> pieces(extra.begin(), extra.end());
    for (const auto& t : texts) {
      for (auto p : detail::word_pieces(t)) pieces.emplace(p);
    }
    return WordTokenizer(std::vector<std::string>(pieces.begin(), pieces.end()));
  }

  static WordTokenizer from_json(const nlohmann::json& j) {
    if (j.value("type", "") != "word") fail(ErrorKind::tokenization, "not a word tokenizer");
    return WordTokenizer(j.at("vocab").get<std::vector<std::string>>());
  }

  TokenIds encode(std::string_view text) const override {
    TokenIds out;
    for (auto piece : detail::word_pieces(text)) {
      auto it = ids_.find(std::string(piece));
      if (it == ids_.end()) {
        fail(ErrorKind::tokenization, "unknown symbol '" + std::string(piece) + "'");
      }
      out.push_back(it->second);
    }
    return out;
  }

  std::string decode(const TokenIds& ids) const override {
    std::string out;
    for (auto id : ids) {
      if (id >= vocab_.size()) {
        fail(ErrorKind::tokenization, "token id " + std::to_string(id) + " out of range");
      }
      out += vocab_[id];
    }
    return out;
  }

  std::size_t vocab_size() const override { return vocab_.size(); }
  const std::vector<std::string>& vocab() const { return vocab_; }

  nlohmann::json to_json() const override { return {{"type", "word"}, {"vocab", vocab_}}; }

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

namespace detail {

/// GPT-2 byte-to-unicode table: printable bytes map to themselves, the rest
/// to code points from U+0100 upward.
inline const std::vector<std::string>& byte_to_unicode() {
  static const std::vector<std::string> table = [] {
    std::vector<int> cps(256, -1);
    for (int b = 0; b < 256; ++b) {
      if ((b >= '!' && b <= '~') || (b >= 0xA1 && b <= 0xAC) || (b >= 0xAE && b <= 0xFF)) {
        cps[b] = b;
      }
    }
    int next = 256;
    for (int b = 0; b < 256; ++b) {
      if (cps[b] < 0) cps[b] = next++;
    }
    std::vector<std::string> t(256);
    for (int b = 0; b < 256; ++b) {
      const int cp = cps[b];
      std::string s;
      if (cp < 0x80) {
        s += static_cast<char>(cp);
      } else {
        s += static_cast<char>(0xC0 | (cp >> 6));
        s += static_cast<char>(0x80 | (cp & 0x3F));
      }
      t[b] = s;
    }
    return t;
  }();
  return table;
}

inline std::vector<std::string> utf8_chars(std::string_view s) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : 4;
    len = std::min(len, s.size() - i);
    out.emplace_back(s.substr(i, len));
    i += len;
  }
  return out;
}

inline bool is_letter(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}
inline bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
inline bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}
inline bool is_newline(unsigned char c) { return c == '\n' || c == '\r'; }

/// Hand-written equivalent of the llama3 pre-tokenizer pattern
///   (?i:'s|'t|'re|'ve|'m|'ll|'d)|[^\r\n\p{L}\p{N}]?\p{L}+|\p{N}{1,3}|
///   ?[^\s\p{L}\p{N}]+[\r\n]*|\s*[\r\n]+|\s+(?!\S)|\s+
/// with every non-ASCII byte treated as a letter.
inline std::vector<std::string_view> bpe_pretokenize(std::string_view s) {
  std::vector<std::string_view> out;
  const auto at = [&](std::size_t i) { return static_cast<unsigned char>(s[i]); };
  std::size_t i = 0;
  while (i < s.size()) {
    const std::size_t start = i;
    // contractions
    if (s[i] == '\'' && i + 1 < s.size()) {
      std::size_t len = 0;
      const char a = static_cast<char>(std::tolower(at(i + 1)));
      const char b = i + 2 < s.size() ? static_cast<char>(std::tolower(at(i + 2))) : '\0';
      if (a == 's' || a == 't' || a == 'm' || a == 'd') len = 2;
      if ((a == 'r' && b == 'e') || (a == 'v' && b == 'e') || (a == 'l' && b == 'l')) len = 3;
      if (len) {
        out.push_back(s.substr(i, len));
        i += len;
        continue;
      }
    }
    // optional non-letter/digit/newline prefix + letters
    {
      std::size_t j = i;
      if (!is_letter(at(j)) && !is_digit(at(j)) && !is_newline(at(j)) && j + 1 < s.size() &&
          is_letter(at(j + 1))) {
        ++j;
      }
      if (j < s.size() && is_letter(at(j))) {
        while (j < s.size() && is_letter(at(j))) ++j;
        out.push_back(s.substr(start, j - start));
        i = j;
        continue;
      }
    }
    if (is_digit(at(i))) {
      while (i < s.size() && i - start < 3 && is_digit(at(i))) ++i;
      out.push_back(s.substr(start, i - start));
      continue;
    }
    // optional space + punctuation run + trailing newlines
    {
      std::size_t j = i;
      if (s[j] == ' ' && j + 1 < s.size()) ++j;
      const auto is_punct = [&](std::size_t k) {
        return !is_space(at(k)) && !is_letter(at(k)) && !is_digit(at(k));
      };
      if (j < s.size() && is_punct(j)) {
        while (j < s.size() && is_punct(j)) ++j;
        while (j < s.size() && is_newline(at(j))) ++j;
        out.push_back(s.substr(start, j - start));
        i = j;
        continue;
      }
    }
    // whitespace
    std::size_t j = i;
    while (j < s.size() && is_space(at(j))) ++j;
    std::size_t last_nl = std::string_view::npos;
    for (std::size_t k = i; k < j; ++k) {
      if (is_newline(at(k))) last_nl = k;
    }
    if (last_nl != std::string_view::npos) {
      i = last_nl + 1;
    } else if (j < s.size() && j - i > 1) {
      i = j - 1;  // leave one space to prefix the next word
    } else {
      i = j;
    }
    out.push_back(s.substr(start, i - start));
  }
  return out;
}

}  // namespace detail

class BpeTokenizer final : public Tokenizer {
 public:
  /// Parses a tokenizer.json: model.vocab, model.merges (either "a b"
  /// strings or [a, b] pairs) and added_tokens.
  static BpeTokenizer from_json(const nlohmann::json& j) {
    BpeTokenizer t;
    try {
      const auto& model = j.at("model");
      for (const auto& [tok, id] : model.at("vocab").items()) {
        t.add_token(tok, id.get<std::uint32_t>());
      }
      std::size_t rank = 0;
      for (const auto& m : model.at("merges")) {
        std::string a, b;
        if (m.is_string()) {
          const auto s = m.get<std::string>();
          const auto sp = s.find(' ');
          if (sp == std::string::npos) fail(ErrorKind::tokenization, "malformed merge '" + s + "'");
          a = s.substr(0, sp);
          b = s.substr(sp + 1);
        } else {
          a = m.at(0).get<std::string>();
          b = m.at(1).get<std::string>();
        }
        t.merge_ranks_.emplace(a + '\x01' + b, rank++);
      }
      if (j.contains("added_tokens")) {
        for (const auto& a : j["added_tokens"]) {
          const auto content = a.at("content").get<std::string>();
          const auto id = a.at("id").get<std::uint32_t>();
          t.add_token(content, id);
          t.specials_.emplace(content, id);
        }
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::tokenization, std::string("tokenizer.json: ") + e.what());
    }
    return t;
  }

  static BpeTokenizer load(const std::string& path) {
    const std::string text = read_file_bytes(path, ErrorKind::tokenization);
    try {
      return from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::tokenization, path + ": " + e.what());
    }
  }

  TokenIds encode(std::string_view text) const override {
    TokenIds out;
    std::size_t i = 0;
    while (i < text.size()) {
      // earliest special token occurrence
      std::size_t best = std::string_view::npos;
      const std::pair<const std::string, std::uint32_t>* special = nullptr;
      for (const auto& sp : specials_) {
        const auto pos = text.find(sp.first, i);
        if (pos != std::string_view::npos &&
            (pos < best || (pos == best && sp.first.size() > special->first.size()))) {
          best = pos;
          special = &sp;
        }
      }
      const std::size_t end = special ? best : text.size();
      encode_ordinary(text.substr(i, end - i), out);
      if (!special) break;
      out.push_back(special->second);
      i = best + special->first.size();
    }
    return out;
  }

  std::string decode(const TokenIds& ids) const override {
    static const auto inverse = [] {
      std::map<std::string, char> m;
      const auto& t = detail::byte_to_unicode();
      for (int b = 0; b < 256; ++b) m.emplace(t[b], static_cast<char>(b));
      return m;
    }();
    std::string out;
    for (auto id : ids) {
      if (id >= id_to_token_.size() || id_to_token_[id].empty()) {
        fail(ErrorKind::tokenization, "token id " + std::to_string(id) + " out of range");
      }
      const std::string& tok = id_to_token_[id];
      if (specials_.contains(tok)) {
        out += tok;
        continue;
      }
      for (const auto& ch : detail::utf8_chars(tok)) {
        auto it = inverse.find(ch);
        if (it == inverse.end()) fail(ErrorKind::tokenization, "undecodable token '" + tok + "'");
        out += it->second;
      }
    }
    return out;
  }

  std::size_t vocab_size() const override { return id_to_token_.size(); }

  nlohmann::json to_json() const override {
    return {{"type", "bpe"}, {"vocab_size", id_to_token_.size()}};
  }

 private:
  void add_token(const std::string& tok, std::uint32_t id) {
    token_to_id_[tok] = id;
    if (id >= id_to_token_.size()) id_to_token_.resize(id + 1);
    id_to_token_[id] = tok;
  }

  void encode_ordinary(std::string_view text, TokenIds& out) const {
    const auto& table = detail::byte_to_unicode();
    for (auto word : detail::bpe_pretokenize(text)) {
      std::vector<std::string> symbols;
      for (unsigned char b : word) symbols.push_back(table[b]);
      while (symbols.size() > 1) {
        std::size_t best_rank = std::numeric_limits<std::size_t>::max();
        std::size_t best_i = 0;
        for (std::size_t k = 0; k + 1 < symbols.size(); ++k) {
          auto it = merge_ranks_.find(symbols[k] + '\x01' + symbols[k + 1]);
          if (it != merge_ranks_.end() && it->second < best_rank) {
            best_rank = it->second;
            best_i = k;
          }
        }
        if (best_rank == std::numeric_limits<std::size_t>::max()) break;
        symbols[best_i] += symbols[best_i + 1];
        symbols.erase(symbols.begin() + static_cast<std::ptrdiff_t>(best_i) + 1);
      }
      for (const auto& sym : symbols) {
        auto it = token_to_id_.find(sym);
        if (it == token_to_id_.end()) {
          fail(ErrorKind::tokenization, "symbol '" + sym + "' missing from vocabulary");
        }
        out.push_back(it->second);
      }
    }
  }

  std::unordered_map<std::string, std::uint32_t> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, std::size_t> merge_ranks_;
  std::map<std::string, std::uint32_t> specials_;
};

/// Reconstructs a tokenizer from its to_json() form (word tokenizers only;
/// BPE tokenizers are loaded from their tokenizer.json).
inline std::unique_ptr<Tokenizer> tokenizer_from_json(const nlohmann::json& j) {
  if (j.value("type", "") == "word") return std::make_unique<WordTokenizer>(WordTokenizer::from_json(j));
  if (j.contains("model")) return std::make_unique<BpeTokenizer>(BpeTokenizer::from_json(j));
  fail(ErrorKind::tokenization, "unrecognised tokenizer description");
}

}  // namespace plab
