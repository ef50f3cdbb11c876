#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace plab;
using namespace plab::testing;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorKind::usage;
}

std::map<std::string, IdentityCategory> category_map(const IdentityRegistry& r) {
  std::map<std::string, IdentityCategory> m;
  for (const auto& id : r.personas()) m[id.surface] = id.category;
  return m;
}

HeadAttentionProfile profile_of(HeadId h, std::map<std::string, double> per) {
  HeadAttentionProfile p;
  p.layer = h.layer;
  p.head = h.head;
  p.relative_vw = relative_vw_profile(per);
  p.per_identity_vw = std::move(per);
  return p;
}

}  // namespace

TEST(ValueWeightedAttention, ZeroWeightAndUniformExamples) {
  ActivationCache cache;
  cache.token_len = 4;
  cache.entries[{HookSite::attn_pattern(0, 0), 3}] = {0.25f, 0.25f, 0.25f, 0.25f};
  cache.entries[{HookSite::attn_pattern(0, 0), 1}] = {0.0f, 1.0f, 0.0f, 0.0f};
  for (std::size_t s = 0; s < 4; ++s) cache.entries[{HookSite::value_vectors(0, 0), s}] = {0.6f, 0.8f};
  cache.entries[{HookSite::value_vectors(0, 0), 0}] = {30.0f, 40.0f};
  for (std::size_t s = 1; s < 4; ++s) EXPECT_NEAR(value_weighted_attention(cache, 0, 0, 3, s), 0.25, 1e-7);
  EXPECT_EQ(value_weighted_attention(cache, 0, 0, 1, 0), 0.0);
  EXPECT_EQ(kind_of([&] { value_weighted_attention(cache, 0, 1, 3, 0); }), ErrorKind::cache_miss);
  EXPECT_EQ(kind_of([&] { value_weighted_attention(cache, 0, 0, 3, 0, ValueNorm::output_projected); }), ErrorKind::config);
}

TEST(ValueWeightedAttention, MatchesRecomputationFromRawWeights) {
  const Workspace& ws = toy();
  const auto& c = ws.model.config();
  std::vector<HeadId> heads;
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (std::size_t h = 0; h < c.n_heads; ++h) heads.push_back({l, h});
  for (std::size_t q : {0u, 21u}) {
    const TokenIds tokens = ws.tokenizer->encode(render_prompt(ws.identities.at("Brown"), ws.questions[q], ws.tmpl));
    const auto cache = capture(ws.model, tokens, lens_sites(heads));
    const auto ref = reference_forward<double>(ws.model, tokens);
    const std::size_t dest = tokens.size() - 1;
    for (const auto& h : heads) {
      const auto& attn = ref.attn[h.layer * c.n_heads + h.head];
      const auto& vals = ref.values[h.layer * c.n_heads + h.head];
      double bound = 0.0;
      for (std::size_t src = 0; src <= dest; ++src) {
        double norm = 0.0;
        for (double v : vals[src]) norm += v * v;
        norm = std::sqrt(norm);
        bound = std::max(bound, norm);
        const double got = value_weighted_attention(cache, h.layer, h.head, dest, src);
        EXPECT_NEAR(got, attn[dest][src] * norm, 1e-5) << h.label() << " src " << src;
        EXPECT_GE(got, 0.0);
      }
      for (std::size_t src = 0; src <= dest; ++src) {
        EXPECT_LE(value_weighted_attention(cache, h.layer, h.head, dest, src), bound + 1e-5);
      }
    }
  }
}

TEST(ValueWeightedAttention, OutputProjectedNormUsesHeadSliceOfWo) {
  const Workspace& ws = toy();
  const TokenIds tokens = ws.tokenizer->encode(render_prompt(ws.identities.at("good"), ws.questions[1], ws.tmpl));
  const std::vector<HeadId> heads{{1, 2}};
  const auto cache = capture(ws.model, tokens, lens_sites(heads));
  const std::size_t dest = tokens.size() - 1, src = 7;
  const auto& v = cache.at(HookSite::value_vectors(1, 2), src);
  const auto& wo = ws.model.weight("layers.1.wo");
  const std::size_t hd = ws.model.config().head_dim;
  double norm = 0.0;
  for (std::size_t j = 0; j < wo.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < hd; ++i) s += static_cast<double>(v[i]) * wo(2 * hd + i, j);
    norm += s * s;
  }
  EXPECT_NEAR(value_weighted_attention(cache, 1, 2, dest, src, ValueNorm::output_projected, &ws.model),
              cache.at(HookSite::attn_pattern(1, 2), dest)[src] * std::sqrt(norm), 1e-5);
}

TEST(RelativeProfile, Examples) {
  for (const auto& [k, v] : relative_vw_profile({{"a", 2.5}, {"b", 2.5}, {"c", 2.5}})) EXPECT_EQ(v, 0.0) << k;
  const auto r = relative_vw_profile({{"x", 3}, {"y", 1}});
  EXPECT_EQ(r.at("x"), 1.0);
  EXPECT_EQ(r.at("y"), -1.0);
  EXPECT_EQ(kind_of([] { relative_vw_profile({}); }), ErrorKind::input);
}

TEST(RelativeProfile, CentersAndIsIdempotent) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    std::map<std::string, double> m;
    for (int i = 0; i < 16; ++i) m["id" + std::to_string(i)] = rng.uniform(0, 50);
    const auto r = relative_vw_profile(m);
    double s = 0.0;
    for (const auto& [k, v] : r) s += v;
    EXPECT_NEAR(s, 0.0, 1e-6);
    for (const auto& [k, v] : relative_vw_profile(r)) EXPECT_NEAR(v, r.at(k), 1e-9);
  }
}

TEST(Categorize, ConstructedSeparation) {
  const auto cats = category_map(toy().identities);
  const double m = 0.3;
  std::map<std::string, double> rel;
  for (const auto& [id, c] : cats) rel[id] = c == IdentityCategory::racial ? m : -m / 3;
  HeadAttentionProfile p;
  p.relative_vw = rel;
  const auto got = categorize_heads(std::span(&p, 1), cats, 4 * m / 3 - 1e-9);
  EXPECT_EQ(got.at({0, 0}), std::set<IdentityCategory>{IdentityCategory::racial});
  EXPECT_TRUE(categorize_heads(std::span(&p, 1), cats, 4 * m / 3 + 1e-6).at({0, 0}).empty());
  for (auto& [k, v] : p.relative_vw) v = 0.0;
  EXPECT_TRUE(categorize_heads(std::span(&p, 1), cats, 0.05).at({0, 0}).empty());
}

TEST(Categorize, InvariantToConstantOffset) {
  const auto cats = category_map(toy().identities);
  Rng rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<HeadAttentionProfile> a, b;
    const double offset = rng.uniform(0, 10);
    for (int q = 0; q < 5; ++q) {
      std::map<std::string, double> per, shifted;
      for (const auto& [id, c] : cats) {
        per[id] = rng.uniform(0, 1) + (c == IdentityCategory::negative ? 0.3 : 0.0);
        shifted[id] = per[id] + offset;
      }
      a.push_back(profile_of({1, 3}, per));
      b.push_back(profile_of({1, 3}, shifted));
    }
    for (auto agg : {CategoryAggregation::majority, CategoryAggregation::mean}) {
      EXPECT_EQ(categorize_heads(a, cats, 0.05, agg), categorize_heads(b, cats, 0.05, agg));
    }
  }
}

TEST(Categorize, MajorityNeedsMoreThanHalfTheQuestions) {
  const auto cats = category_map(toy().identities);
  std::map<std::string, double> racial, flat;
  for (const auto& [id, c] : cats) {
    racial[id] = c == IdentityCategory::racial ? 1.0 : 0.0;
    flat[id] = 0.0;
  }
  std::vector<HeadAttentionProfile> two_of_four{profile_of({0, 1}, racial), profile_of({0, 1}, racial),
                                                profile_of({0, 1}, flat), profile_of({0, 1}, flat)};
  EXPECT_TRUE(categorize_heads(two_of_four, cats, 0.05).at({0, 1}).empty());
  // the mean of the four profiles still separates by 0.5 * 4/3
  EXPECT_EQ(categorize_heads(two_of_four, cats, 0.05, CategoryAggregation::mean).at({0, 1}),
            std::set<IdentityCategory>{IdentityCategory::racial});
  two_of_four.push_back(profile_of({0, 1}, racial));
  EXPECT_EQ(categorize_heads(two_of_four, cats, 0.05).at({0, 1}), std::set<IdentityCategory>{IdentityCategory::racial});
}

TEST(Categorize, Errors) {
  const auto cats = category_map(toy().identities);
  const auto p = profile_of({0, 0}, {{"Martian", 1.0}, {"Asian", 0.0}});
  EXPECT_EQ(kind_of([&] { categorize_heads(std::span(&p, 1), cats, 0.05); }), ErrorKind::input);
  EXPECT_EQ(kind_of([&] { categorize_heads({}, cats, 0.0); }), ErrorKind::input);
}

TEST(Categorize, PlantedRacialHeadIsTaggedRacial) {
  const Workspace& ws = toy();
  const Model planted = plant_racial_head(ws);
  const auto personas = ws.identities.personas();
  const std::vector<HeadId> heads{{0, 0}, {0, 1}};
  std::vector<HeadAttentionProfile> profiles;
  for (std::size_t q = 0; q < ws.questions.size(); q += 8) {
    auto ps = build_head_profiles(planted, personas, ws.questions[q], ws.tmpl, *ws.tokenizer, heads);
    for (auto& p : ps) {
      for (const auto& [id, v] : p.per_identity_vw) EXPECT_GE(v, 0.0);
      profiles.push_back(std::move(p));
    }
  }
  const auto cats = categorize_heads(profiles, category_map(ws.identities), 0.05);
  for (const auto& h : heads) EXPECT_EQ(cats.at(h), std::set<IdentityCategory>{IdentityCategory::racial}) << h.label();
}

TEST(AttentionAfterPatching, NoOpEqualsPlainCapture) {
  const Workspace& ws = toy();
  const auto p = make_pair(ws.identities.at("dumb"), ws.identities.at("dumb"), ws.questions[9], ws.tmpl, *ws.tokenizer);
  const std::vector<HeadId> heads{{1, 0}, {1, 3}};
  const auto cache = capture(ws.model, p.clean_tokens, all_component_sites(ws.model.config()));
  const auto plain = capture(ws.model, p.clean_tokens, lens_sites(heads));
  const PatchSpec spec = PatchSpec::total(HookSite::mlp_out(0));
  const auto got = attention_after_patching(ws.model, p, cache, std::span(&spec, 1), heads);
  for (const auto& h : heads) {
    EXPECT_EQ(got.at(h), value_weighted_attention(plain, h.layer, h.head, p.clean_tokens.size() - 1, p.identity_position));
  }
}

// Restoring every layer below the head restores its value vectors wherever
// the prompts agree. At the differing positions the corrupt token embedding
// still reaches the head through the residual stream, so those are excluded.
TEST(AttentionAfterPatching, FullRestorationBelowTheHead) {
  const Workspace& ws = toy();
  const auto p = make_pair(ws.identities.at("Asian"), ws.identities.at("Indian"), ws.questions[4], ws.tmpl, *ws.tokenizer);
  std::vector<HeadId> heads;
  for (std::size_t h = 0; h < ws.model.config().n_heads; ++h) heads.push_back({1, h});
  auto sites = all_component_sites(ws.model.config());
  for (const auto& s : lens_sites(heads)) sites.insert(s);
  const auto cache = capture(ws.model, p.clean_tokens, sites);
  const std::vector<PatchSpec> specs{PatchSpec::total(HookSite::attn_out(0)), PatchSpec::total(HookSite::mlp_out(0))};
  const auto got = attention_after_patching(ws.model, p, cache, specs, heads);
  const auto run = run_patched(ws.model, p.corrupt_tokens, cache, specs, p.diff_positions, lens_sites(heads));
  const std::size_t dest = p.corrupt_tokens.size() - 1;
  for (const auto& h : heads) {
    EXPECT_EQ(got.at(h), value_weighted_attention(run.cache, 1, h.head, dest, p.identity_position));
    for (std::size_t src = 0; src <= dest; ++src) {
      const auto site = HookSite::value_vectors(1, h.head);
      if (std::binary_search(p.diff_positions.begin(), p.diff_positions.end(), src)) {
        EXPECT_GT(max_abs_diff(run.cache.at(site, src), cache.at(site, src)), 1e-3f);
      } else {
        EXPECT_LT(max_abs_diff(run.cache.at(site, src), cache.at(site, src)), 1e-4f) << h.label() << " " << src;
      }
    }
  }
}

TEST(AttentionAfterPatching, HeadMustBeDownstream) {
  const Workspace& ws = toy();
  const auto p = make_pair(ws.identities.at("Asian"), ws.identities.at("Indian"), ws.questions[4], ws.tmpl, *ws.tokenizer);
  const auto cache = capture(ws.model, p.clean_tokens, all_component_sites(ws.model.config()));
  const PatchSpec spec = PatchSpec::total(HookSite::mlp_out(1));
  const std::vector<HeadId> heads{{1, 0}};
  EXPECT_EQ(kind_of([&] { attention_after_patching(ws.model, p, cache, std::span(&spec, 1), heads); }), ErrorKind::config);
}

TEST(SelectHeads, TopKBySignedEffect) {
  const std::map<HeadId, double> eff{{{0, 0}, 0.5}, {{0, 1}, -0.2}, {{0, 2}, 0.9}, {{1, 0}, 0.0}, {{1, 1}, -0.7}, {{1, 2}, 0.1}};
  const auto [pos, neg] = select_heads(eff, 2, 4);
  EXPECT_EQ(pos, (std::vector<HeadId>{{0, 2}, {0, 0}}));
  EXPECT_EQ(neg, (std::vector<HeadId>{{1, 1}, {0, 1}}));
}
