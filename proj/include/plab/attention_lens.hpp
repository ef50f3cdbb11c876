#pragma once

// Value-weighted attention at the identity token: how much content a head
// moves from the identity position into the answer-emission position.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "plab/hooks.hpp"
#include "plab/model.hpp"
#include "plab/patch.hpp"
#include "plab/prompt.hpp"

namespace plab {

/// Which vector's norm weights the attention probability.
enum class ValueNorm {
  value,             // the head's value vector (pre output projection)
  output_projected,  // the value vector pushed through the head's slice of W_o
};

/// a(dest -> src) * ||v_src||_2 for one head, read from a cache holding the
/// head's attn_pattern and value_vectors. `model` is required only for
/// ValueNorm::output_projected.
inline double value_weighted_attention(const ActivationCache& cache, std::size_t layer,
                                       std::size_t head, std::size_t dest, std::size_t src,
                                       ValueNorm norm = ValueNorm::value,
                                       const Model* model = nullptr) {
  const auto& row = cache.at(HookSite::attn_pattern(layer, head), dest);
  const auto& value = cache.at(HookSite::value_vectors(layer, head), src);
  if (src >= row.size()) fail(ErrorKind::input, "source position beyond the attention row");
  double len = 0.0;
  if (norm == ValueNorm::value) {
    for (float v : value) len += static_cast<double>(v) * v;
  } else {
    if (!model) fail(ErrorKind::config, "output-projected value norm needs the model");
    for (float v : model->head_contribution(layer, head, value)) len += static_cast<double>(v) * v;
  }
  return static_cast<double>(row[src]) * std::sqrt(len);
}

struct HeadId {
  std::size_t layer = 0;
  std::size_t head = 0;

  std::string label() const { return "H" + std::to_string(layer) + "^" + std::to_string(head); }
  auto operator<=>(const HeadId&) const = default;
};

struct HeadAttentionProfile {
  std::string question_id;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::map<std::string, double> per_identity_vw;
  std::map<std::string, double> relative_vw;

  HeadId id() const { return {layer, head}; }
};

/// Subtracts the mean over all identities from each value.
inline std::map<std::string, double> relative_vw_profile(const std::map<std::string, double>& per_identity) {
  if (per_identity.empty()) fail(ErrorKind::input, "relative profile of an empty map");
  double mean = 0.0;
  for (const auto& [k, v] : per_identity) mean += v;
  mean /= static_cast<double>(per_identity.size());
  std::map<std::string, double> out;
  for (const auto& [k, v] : per_identity) out[k] = v - mean;
  return out;
}

inline std::set<HookSite> lens_sites(std::span<const HeadId> heads) {
  std::set<HookSite> s;
  for (const auto& h : heads) {
    s.insert(HookSite::attn_pattern(h.layer, h.head));
    s.insert(HookSite::value_vectors(h.layer, h.head));
  }
  return s;
}

/// Per-identity value-weighted attention from the final position to the
/// identity token, for each listed head on one question.
inline std::vector<HeadAttentionProfile> build_head_profiles(
    const Model& model, std::span<const Identity> identities, const QuestionRecord& q,
    const PromptTemplate& tmpl, const Tokenizer& tokenizer, std::span<const HeadId> heads,
    ValueNorm norm = ValueNorm::value) {
  if (identities.size() < 2) fail(ErrorKind::input, "profiles need at least two identities");
  std::vector<HeadAttentionProfile> profiles;
  for (const auto& h : heads) {
    HeadAttentionProfile p;
    p.question_id = q.id;
    p.layer = h.layer;
    p.head = h.head;
    profiles.push_back(std::move(p));
  }
  const auto sites = lens_sites(heads);
  for (const auto& identity : identities) {
    const TokenIds tokens = tokenizer.encode(render_prompt(identity, q, tmpl));
    const std::size_t ident_pos = find_identity_position(identity, q, tmpl, tokenizer, tokens);
    const ActivationCache cache = capture(model, tokens, sites);
    for (std::size_t i = 0; i < heads.size(); ++i) {
      profiles[i].per_identity_vw[identity.surface] = value_weighted_attention(
          cache, heads[i].layer, heads[i].head, tokens.size() - 1, ident_pos, norm, &model);
    }
  }
  for (auto& p : profiles) p.relative_vw = relative_vw_profile(p.per_identity_vw);
  return profiles;
}

enum class CategoryAggregation { majority, mean };

/// Tags each head with every category whose identities receive, on average,
/// at least `margin` more relative attention than all other identities.
/// Profiles of one head across questions are combined by majority vote over
/// per-question decisions, or by averaging the relative profiles first.
inline std::map<HeadId, std::set<IdentityCategory>> categorize_heads(
    std::span<const HeadAttentionProfile> profiles,
    const std::map<std::string, IdentityCategory>& categories, double margin,
    CategoryAggregation aggregation = CategoryAggregation::majority) {
  if (!(margin > 0.0)) fail(ErrorKind::input, "categorization margin must be > 0");

  const auto tagged = [&](const std::map<std::string, double>& rel) {
    std::map<IdentityCategory, std::pair<double, std::size_t>> in;
    for (const auto& [identity, v] : rel) {
      auto it = categories.find(identity);
      if (it == categories.end()) fail(ErrorKind::input, "unknown identity '" + identity + "' in profile");
      in[it->second].first += v;
      in[it->second].second += 1;
    }
    std::set<IdentityCategory> out;
    double total = 0.0;
    for (const auto& [c, acc] : in) total += acc.first;
    for (const auto& [c, acc] : in) {
      const std::size_t others = rel.size() - acc.second;
      if (others == 0) continue;
      const double mean_in = acc.first / static_cast<double>(acc.second);
      const double mean_out = (total - acc.first) / static_cast<double>(others);
      if (mean_in - mean_out >= margin) out.insert(c);
    }
    return out;
  };

  std::map<HeadId, std::vector<const HeadAttentionProfile*>> by_head;
  for (const auto& p : profiles) by_head[p.id()].push_back(&p);

  std::map<HeadId, std::set<IdentityCategory>> result;
  for (const auto& [head, group] : by_head) {
    std::set<IdentityCategory>& cats = result[head];
    if (aggregation == CategoryAggregation::mean) {
      std::map<std::string, double> avg;
      for (const auto* p : group) {
        for (const auto& [k, v] : p->relative_vw) avg[k] += v / static_cast<double>(group.size());
      }
      cats = tagged(avg);
      continue;
    }
    std::map<IdentityCategory, std::size_t> votes;
    for (const auto* p : group) {
      for (auto c : tagged(p->relative_vw)) ++votes[c];
    }
    for (const auto& [c, n] : votes) {
      if (2 * n > group.size()) cats.insert(c);
    }
  }
  return result;
}

/// Value-weighted attention (final position -> identity position) of each
/// listed head in a corrupt run patched by `specs`. Every patched site must
/// sit in a layer strictly below every listed head.
inline std::map<HeadId, double> attention_after_patching(const Model& model, const PromptPair& pair,
                                                         const ActivationCache& cache,
                                                         std::span<const PatchSpec> specs,
                                                         std::span<const HeadId> heads,
                                                         ValueNorm norm = ValueNorm::value) {
  for (const auto& spec : specs) {
    for (const auto& h : heads) {
      if (h.layer <= spec.site.layer) {
        fail(ErrorKind::config, h.label() + " is not downstream of patched site " + spec.site.name());
      }
    }
  }
  const auto run = run_patched(model, pair.corrupt_tokens, cache, specs, pair.diff_positions,
                               lens_sites(heads));
  std::map<HeadId, double> out;
  for (const auto& h : heads) {
    out[h] = value_weighted_attention(run.cache, h.layer, h.head, pair.corrupt_tokens.size() - 1,
                                      pair.identity_position, norm, &model);
  }
  return out;
}

/// The k_pos heads with the largest positive mean effect and the k_neg with
/// the most negative, each ordered by decreasing magnitude.
inline std::pair<std::vector<HeadId>, std::vector<HeadId>> select_heads(
    const std::map<HeadId, double>& mean_effect, std::size_t k_pos = 8, std::size_t k_neg = 4) {
  std::vector<std::pair<double, HeadId>> pos, neg;
  for (const auto& [h, v] : mean_effect) {
    if (v > 0.0) pos.emplace_back(v, h);
    if (v < 0.0) neg.emplace_back(v, h);
  }
  std::stable_sort(pos.begin(), pos.end(), [](auto& a, auto& b) { return a.first > b.first; });
  std::stable_sort(neg.begin(), neg.end(), [](auto& a, auto& b) { return a.first < b.first; });
  std::pair<std::vector<HeadId>, std::vector<HeadId>> out;
  for (std::size_t i = 0; i < std::min(k_pos, pos.size()); ++i) out.first.push_back(pos[i].second);
  for (std::size_t i = 0; i < std::min(k_neg, neg.size()); ++i) out.second.push_back(neg[i].second);
  return out;
}

}  // namespace plab
