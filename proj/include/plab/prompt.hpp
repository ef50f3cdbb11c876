#pragma once

// Persona prompts: the identity registry, template rendering, and
// clean/corrupt pairs built by symmetric token replacement.

#include <algorithm>
#include <array>
#include <cctype>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "plab/corpus.hpp"
#include "plab/error.hpp"
#include "plab/tokenizer.hpp"

namespace plab {

enum class IdentityCategory { racial, color, positive, negative, base };

inline const char* to_string(IdentityCategory c) {
  switch (c) {
    case IdentityCategory::racial: return "racial";
    case IdentityCategory::color: return "color";
    case IdentityCategory::positive: return "positive";
    case IdentityCategory::negative: return "negative";
    case IdentityCategory::base: return "base";
  }
  return "?";
}

inline IdentityCategory category_from_string(const std::string& s) {
  for (auto c : {IdentityCategory::racial, IdentityCategory::color, IdentityCategory::positive,
                 IdentityCategory::negative, IdentityCategory::base}) {
    if (s == to_string(c)) return c;
  }
  fail(ErrorKind::identity, "unknown identity category '" + s + "'");
}

inline constexpr std::string_view kBaseSurface = "helpful";
inline constexpr std::string_view kPersonaSubject = "student";
inline constexpr std::string_view kBaseSubject = "assistant";

/// "an" when the first letter is a vowel (case-insensitive), else "a".
inline std::string article_for(std::string_view surface) {
  for (char ch : surface) {
    if (!std::isalpha(static_cast<unsigned char>(ch))) continue;
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u') ? "an" : "a";
  }
  return "a";
}

struct Identity {
  std::string surface;
  IdentityCategory category = IdentityCategory::base;
  std::string article;

  static Identity make(std::string surface, IdentityCategory category) {
    Identity id{std::move(surface), category, {}};
    id.article = article_for(id.surface);
    return id;
  }
  static Identity base() { return make(std::string(kBaseSurface), IdentityCategory::base); }

  bool is_base() const { return category == IdentityCategory::base; }
  std::string_view subject() const { return is_base() ? kBaseSubject : kPersonaSubject; }

  bool operator==(const Identity&) const = default;
};

/// The token a surface occupies inside a prompt (it follows a space).
inline std::string identity_piece(std::string_view surface) { return " " + std::string(surface); }

/// Registered identities in file order, plus the base identity.
class IdentityRegistry {
 public:
  IdentityRegistry() { identities_.push_back(Identity::base()); }

  /// Parses `[{surface, category, article?}, ...]`. When a tokenizer is given,
  /// every non-base identity must encode to exactly one token.
  static IdentityRegistry from_json(const nlohmann::json& j, const Tokenizer* tokenizer = nullptr) {
    IdentityRegistry r;
    try {
      for (const auto& e : j) {
        Identity id = Identity::make(e.at("surface").get<std::string>(),
                                     category_from_string(e.at("category").get<std::string>()));
        if (e.contains("article")) {
          id.article = e["article"].get<std::string>();
          if (id.article != "a" && id.article != "an") {
            fail(ErrorKind::identity, id.surface + ": article must be 'a' or 'an'");
          }
        }
        r.add(std::move(id));
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse, std::string("identities file: ") + e.what());
    }
    if (tokenizer) r.validate(*tokenizer);
    return r;
  }

  void add(Identity id) {
    if (id.surface.empty()) fail(ErrorKind::identity, "empty identity surface");
    if (find(id.surface)) {
      if (id.is_base() && id.surface == kBaseSurface) return;
      fail(ErrorKind::identity, "duplicate identity '" + id.surface + "'");
    }
    identities_.push_back(std::move(id));
  }

  /// Rejects any persona whose surface is not a single token.
  void validate(const Tokenizer& tokenizer) const {
    for (const auto& id : identities_) {
      if (id.is_base()) continue;
      const auto ids = tokenizer.encode(identity_piece(id.surface));
      if (ids.size() != 1) {
        fail(ErrorKind::identity, "'" + id.surface + "' tokenizes to " +
                                      std::to_string(ids.size()) + " tokens, expected 1");
      }
    }
  }

  const Identity* find(std::string_view surface) const {
    for (const auto& id : identities_) {
      if (id.surface == surface) return &id;
    }
    return nullptr;
  }

  const Identity& at(std::string_view surface) const {
    if (const auto* id = find(surface)) return *id;
    fail(ErrorKind::identity, "identity '" + std::string(surface) + "' is not registered");
  }

  const std::vector<Identity>& all() const { return identities_; }

  std::vector<Identity> personas() const {
    std::vector<Identity> out;
    for (const auto& id : identities_) {
      if (!id.is_base()) out.push_back(id);
    }
    return out;
  }

  std::map<std::string, IdentityCategory> categories() const {
    std::map<std::string, IdentityCategory> out;
    for (const auto& id : identities_) out[id.surface] = id.category;
    return out;
  }

 private:
  std::vector<Identity> identities_;
};

struct IdentityPairSpec {
  std::string id1;
  std::string id2;

  std::string label() const { return id1 + "," + id2; }
  bool operator==(const IdentityPairSpec&) const = default;
};

inline std::vector<IdentityPairSpec> pairs_from_json(const nlohmann::json& j) {
  std::vector<IdentityPairSpec> out;
  try {
    for (const auto& e : j) out.push_back({e.at("id1").get<std::string>(), e.at("id2").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, std::string("pairs file: ") + e.what());
  }
  return out;
}

inline constexpr std::array<std::string_view, 8> kTemplatePlaceholders = {
    "{helper}", "{identity_1}", "{identity_2}", "{question}",
    "{option_A}", "{option_B}", "{option_C}", "{option_D}"};

/// A prompt template with placeholders {helper}, {identity_1}, {identity_2},
/// {question} and {option_A}..{option_D}, each occurring exactly once.
class PromptTemplate {
 public:
  explicit PromptTemplate(std::string text) : text_(std::move(text)) {
    for (const auto ph : kTemplatePlaceholders) {
      const auto first = text_.find(ph);
      if (first == std::string::npos) {
        fail(ErrorKind::template_text, "missing placeholder " + std::string(ph));
      }
      if (text_.find(ph, first + 1) != std::string::npos) {
        fail(ErrorKind::template_text, "placeholder " + std::string(ph) + " occurs more than once");
      }
    }
  }

  const std::string& text() const { return text_; }

  /// Single left-to-right pass; substituted values are never rescanned.
  std::string render(const std::map<std::string, std::string, std::less<>>& values) const {
    std::string out;
    std::size_t i = 0;
    while (i < text_.size()) {
      bool matched = false;
      if (text_[i] == '{') {
        for (const auto& [ph, value] : values) {
          if (text_.compare(i, ph.size(), ph) == 0) {
            out += value;
            i += ph.size();
            matched = true;
            break;
          }
        }
      }
      if (!matched) out += text_[i++];
    }
    return out;
  }

 private:
  std::string text_;
};

inline std::map<std::string, std::string, std::less<>> prompt_values(const Identity& identity,
                                                                     const QuestionRecord& q) {
  return {{"{helper}", identity.article},
          {"{identity_1}", identity.surface},
          {"{identity_2}", std::string(identity.subject())},
          {"{question}", q.question},
          {"{option_A}", q.options[0]},
          {"{option_B}", q.options[1]},
          {"{option_C}", q.options[2]},
          {"{option_D}", q.options[3]}};
}

inline std::string render_prompt(const Identity& identity, const QuestionRecord& q,
                                 const PromptTemplate& tmpl) {
  return tmpl.render(prompt_values(identity, q));
}

/// Token ids the model emits for the four answer letters.
inline std::array<std::uint32_t, 4> option_token_ids(const Tokenizer& tokenizer) {
  std::array<std::uint32_t, 4> ids{};
  for (std::size_t k = 0; k < 4; ++k) {
    const std::string piece = std::string(" ") + answer_letter(k);
    const auto id = tokenizer.single_token(piece);
    if (!id) fail(ErrorKind::tokenization, "answer piece '" + piece + "' is not a single token");
    ids[k] = *id;
  }
  return ids;
}

/// Index of the identity token in the tokenized prompt.
inline std::size_t find_identity_position(const Identity& identity, const QuestionRecord& q,
                                          const PromptTemplate& tmpl, const Tokenizer& tokenizer,
                                          const TokenIds& tokens) {
  auto values = prompt_values(identity, q);
  const std::string marker = "\x01";
  values["{identity_1}"] = marker;
  std::string prefix = tmpl.render(values);
  prefix.resize(prefix.find(marker));
  if (!prefix.empty() && prefix.back() == ' ') prefix.pop_back();
  const std::size_t pos = tokenizer.encode(prefix).size();
  if (pos >= tokens.size()) fail(ErrorKind::pairing, "identity token lies beyond the prompt");
  const auto expected = tokenizer.encode(identity_piece(identity.surface));
  if (expected.empty() || tokens[pos] != expected.front()) {
    fail(ErrorKind::pairing, "identity '" + identity.surface + "' is not aligned to a token boundary");
  }
  return pos;
}

struct PromptPair {
  std::string question_id;
  std::string id1;
  std::string id2;
  TokenIds clean_tokens;
  TokenIds corrupt_tokens;
  std::vector<std::size_t> diff_positions;
  std::size_t identity_position = 0;
  std::array<std::uint32_t, 4> option_token_ids{};
  std::size_t correct_option = 0;
};

/// Clean prompt from id1, corrupt prompt from id2. Differences are found by
/// token-wise comparison; the two sequences must have equal length.
inline PromptPair make_pair(const Identity& id1, const Identity& id2, const QuestionRecord& q,
                            const PromptTemplate& tmpl, const Tokenizer& tokenizer) {
  for (const Identity* id : {&id1, &id2}) {
    if (id->is_base()) continue;
    const auto ids = tokenizer.encode(identity_piece(id->surface));
    if (ids.size() != 1) {
      fail(ErrorKind::identity, "'" + id->surface + "' tokenizes to " +
                                    std::to_string(ids.size()) + " tokens, expected 1");
    }
  }
  PromptPair p;
  p.question_id = q.id;
  p.id1 = id1.surface;
  p.id2 = id2.surface;
  p.clean_tokens = tokenizer.encode(render_prompt(id1, q, tmpl));
  p.corrupt_tokens = tokenizer.encode(render_prompt(id2, q, tmpl));
  if (p.clean_tokens.size() != p.corrupt_tokens.size()) {
    fail(ErrorKind::pairing, "'" + id1.surface + "' and '" + id2.surface +
                                 "' prompts differ in length (" +
                                 std::to_string(p.clean_tokens.size()) + " vs " +
                                 std::to_string(p.corrupt_tokens.size()) + " tokens)");
  }
  for (std::size_t i = 0; i < p.clean_tokens.size(); ++i) {
    if (p.clean_tokens[i] != p.corrupt_tokens[i]) p.diff_positions.push_back(i);
  }
  p.identity_position = find_identity_position(id1, q, tmpl, tokenizer, p.clean_tokens);
  if (!p.diff_positions.empty() &&
      !std::binary_search(p.diff_positions.begin(), p.diff_positions.end(), p.identity_position)) {
    fail(ErrorKind::pairing, "identity position is not among the differing tokens");
  }
  p.option_token_ids = option_token_ids(tokenizer);
  p.correct_option = q.answer;
  return p;
}

}  // namespace plab
