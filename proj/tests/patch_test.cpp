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

PromptPair pair_of(const Workspace& ws, const std::string& a, const std::string& b, std::size_t q = 0) {
  return make_pair(ws.identities.at(a), ws.identities.at(b), ws.questions[q], ws.tmpl, *ws.tokenizer);
}

std::vector<float> plain_last(const Model& m, const TokenIds& t) {
  ForwardOptions o;
  o.all_logits = false;
  const auto r = m.forward(t, o);
  const auto s = r.last_logits();
  return {s.begin(), s.end()};
}

std::vector<PatchSpec> every_spec(const ModelConfig& c, std::size_t token_len) {
  std::vector<PatchSpec> out;
  for (const auto& site : all_component_sites(c)) {
    for (auto mode : {EffectMode::total, EffectMode::direct}) {
      for (auto scope : {PositionScope::all, PositionScope::identity_only}) out.push_back({site, scope, {}, mode});
      out.push_back({site, PositionScope::explicit_list, {0, token_len - 1}, mode});
    }
  }
  return out;
}

std::vector<PatchSpec> full_restoration_specs(const ModelConfig& c) {
  std::vector<PatchSpec> specs;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    specs.push_back(PatchSpec::total(HookSite::mlp_out(l)));
    specs.push_back(PatchSpec::total(HookSite::attn_out(l)));
  }
  return specs;
}

}  // namespace

TEST(Capture, DeterministicAndBitIdentical) {
  const Workspace& ws = toy();
  const auto p = pair_of(ws, "Asian", "Indian");
  const auto sites = all_component_sites(ws.model.config());
  EXPECT_EQ(capture(ws.model, p.clean_tokens, sites), capture(ws.model, p.clean_tokens, sites));
}

TEST(Capture, SizeIsSitesTimesPositions) {
  const Workspace& ws = toy();
  const auto p = pair_of(ws, "Asian", "Indian");
  const auto sites = all_component_sites(ws.model.config());
  const auto cache = capture(ws.model, p.clean_tokens, sites);
  EXPECT_EQ(cache.size(), sites.size() * p.clean_tokens.size());
  EXPECT_EQ(cache.token_len, p.clean_tokens.size());
  EXPECT_EQ(cache.model_fingerprint, ws.model.fingerprint());
  EXPECT_EQ(cache.logits.size(), ws.model.config().vocab_size);
  for (const auto& [key, v] : cache.entries) {
    EXPECT_EQ(v.size(), key.site.kind == SiteKind::head_out ? ws.model.config().head_dim : ws.model.config().d_model);
  }
}

TEST(Capture, MatchesObserverDuringPlainForward) {
  const Workspace& ws = toy();
  const auto p = pair_of(ws, "good", "bad");
  const auto cache = capture(ws.model, p.clean_tokens, {HookSite::mlp_out(1), HookSite::head_out(0, 3)});
  std::size_t seen = 0;
  ForwardOptions o;
  o.observer = [&](const HookSite& site, std::size_t pos, std::span<const float> v) {
    if (cache.contains(site, pos)) {
      EXPECT_TRUE(bit_equal(v, cache.at(site, pos))) << site.name() << " " << pos;
      ++seen;
    }
  };
  ws.model.forward(p.clean_tokens, o);
  EXPECT_EQ(seen, cache.size());
}

TEST(Capture, UnsupportedSiteIsConfigError) {
  const Workspace& ws = toy();
  const auto p = pair_of(ws, "good", "bad");
  EXPECT_EQ(kind_of([&] { capture(ws.model, p.clean_tokens, {HookSite::mlp_out(9)}); }), ErrorKind::config);
  EXPECT_EQ(kind_of([&] { capture(ws.model, p.clean_tokens, {HookSite{SiteKind::mlp_out, 0, 1}}); }), ErrorKind::config);
}

TEST(PatchTotal, NoOpForEverySpecWhenCleanEqualsCorrupt) {
  const Workspace& ws = toy();
  for (std::size_t q : {0u, 17u, 39u}) {
    const auto p = pair_of(ws, "Black", "Black", q);
    const auto cache = capture(ws.model, p.clean_tokens, all_component_sites(ws.model.config()));
    const auto base = plain_last(ws.model, p.corrupt_tokens);
    for (const auto& spec : every_spec(ws.model.config(), p.corrupt_tokens.size())) {
      ASSERT_TRUE(bit_equal(patch(ws.model, p, cache, spec), base)) << spec.site.name() << " " << to_string(spec.scope);
    }
  }
}

TEST(PatchTotal, FullOverwriteRestoresCleanLogits) {
  const Workspace& ws = toy();
  for (const auto& [a, b] : {std::pair{"helpful", "Asian"}, {"Asian", "Indian"}, {"good", "bad"}}) {
    const auto p = pair_of(ws, a, b, 3);
    const auto cache = capture(ws.model, p.clean_tokens, all_component_sites(ws.model.config()));
    const auto specs = full_restoration_specs(ws.model.config());
    const auto patched = patch_total(ws.model, p.corrupt_tokens, cache, specs, p.diff_positions);
    EXPECT_LT(max_abs_diff(patched, cache.logits), 1e-4f) << a << "->" << b;
    // the patch matters: corrupt logits are not already clean
    EXPECT_GT(max_abs_diff(plain_last(ws.model, p.corrupt_tokens), cache.logits), 1e-3f);
  }
}

TEST(PatchTotal, AttnOutEqualsAllHeadsOfTheLayer) {
  const Workspace& ws = toy();
  const auto& c = ws.model.config();
  const auto p = pair_of(ws, "helpful", "White", 8);
  const auto cache = capture(ws.model, p.clean_tokens, all_component_sites(c));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (auto scope : {PositionScope::all, PositionScope::identity_only}) {
      std::vector<PatchSpec> heads;
      for (std::size_t h = 0; h < c.n_heads; ++h) heads.push_back(PatchSpec::total(HookSite::head_out(l, h), scope));
      const auto a = patch_total(ws.model, p.corrupt_tokens, cache, PatchSpec::total(HookSite::attn_out(l), scope), p.diff_positions);
      const auto b = patch_total(ws.model, p.corrupt_tokens, cache, heads, p.diff_positions);
      EXPECT_LT(max_abs_diff(a, b), 1e-4f) << l;
    }
  }
}

TEST(PatchTotal, OnlyDownstreamActivationsChange) {
  const Workspace& ws = toy();
  const auto p = pair_of(ws, "Asian", "Indian", 2);
  const auto cache = capture(ws.model, p.clean_tokens, all_component_sites(ws.model.config()));
  const auto record = [&](const Substitutions* subs) {
    std::map<CacheKey, std::vector<float>> seen;
    ForwardOptions o;
    o.substitutions = subs;
    o.observer = [&](const HookSite& s, std::size_t pos, std::span<const float> v) {
      if (s.kind != SiteKind::resid_final) seen[{s, pos}].assign(v.begin(), v.end());
    };
    ws.model.forward(p.corrupt_tokens, o);
    return seen;
  };
  const auto plain = record(nullptr);
  Substitutions subs;
  for (std::size_t pos = 0; pos < p.corrupt_tokens.size(); ++pos) subs[{HookSite::mlp_out(1), pos}] = cache.at(HookSite::mlp_out(1), pos);
  const auto patched = record(&subs);
  for (const auto& [key, v] : plain) {
    if (key.site.layer == 0 || (key.site.kind != SiteKind::mlp_out)) {
      EXPECT_TRUE(bit_equal(v, patched.at(key))) << key.site.name() << " " << key.position;
    }
  }
}

TEST(PatchTotal, IdentityOnlyEqualsAllWhenLayerZeroAttentionIsOff) {
  ToyModelOptions o;
  o.attention_disabled_layers = {0};
  const Workspace ws = toy_workspace(7, o);
  for (std::size_t q = 0; q < ws.questions.size(); q += 7) {
    const auto p = pair_of(ws, "Asian", "Indian", q);
    ASSERT_EQ(p.diff_positions, std::vector<std::size_t>{p.identity_position});
    const auto cache = capture(ws.model, p.clean_tokens, all_component_sites(ws.model.config()));
    const auto corrupt = OptionLogits::from_logits(plain_last(ws.model, p.corrupt_tokens), p.option_token_ids, p.correct_option);
    const auto delta = [&](PositionScope scope) {
      const auto l = patch_total(ws.model, p, cache, PatchSpec::total(HookSite::mlp_out(0), scope));
      return relative_logit_diff(OptionLogits::from_logits(l, p.option_token_ids, p.correct_option), corrupt);
    };
    EXPECT_NEAR(delta(PositionScope::identity_only), delta(PositionScope::all), 1e-4);
  }
}

TEST(PatchTotal, Errors) {
  const Workspace& ws = toy();
  const auto p = pair_of(ws, "good", "bad");
  const auto cache = capture(ws.model, p.clean_tokens, {HookSite::mlp_out(0)});
  EXPECT_EQ(kind_of([&] { patch_total(ws.model, p, cache, PatchSpec::total(HookSite::mlp_out(1))); }), ErrorKind::cache_miss);
  const Model other = make_toy_model(8, [&] {
    ToyModelOptions o;
    o.vocab_size = ws.model.config().vocab_size;
    return o;
  }());
  EXPECT_EQ(kind_of([&] { patch_total(other, p, cache, PatchSpec::total(HookSite::mlp_out(0))); }), ErrorKind::model);
  TokenIds longer = p.corrupt_tokens;
  longer.push_back(longer.back());
  EXPECT_EQ(kind_of([&] { patch_total(ws.model, longer, cache, PatchSpec::total(HookSite::mlp_out(0))); }), ErrorKind::input);
  EXPECT_EQ(kind_of([&] { patch_total(ws.model, p, cache, PatchSpec::total(HookSite::resid_final())); }), ErrorKind::config);
  EXPECT_EQ(kind_of([&] { patch_total(ws.model, p, cache, PatchSpec::total(HookSite::attn_pattern(0, 0))); }), ErrorKind::config);
  EXPECT_EQ(kind_of([&] { patch_total(ws.model, p, cache, PatchSpec::at(HookSite::mlp_out(0), {p.corrupt_tokens.size()})); }),
            ErrorKind::config);
}

TEST(PatchDirect, LastLayerMlpEqualsTotal) {
  const Workspace& ws = toy();
  const std::size_t last = ws.model.config().n_layers - 1;
  for (std::size_t q = 0; q < ws.questions.size(); q += 5) {
    const auto p = pair_of(ws, "helpful", "Asian", q);
    const auto cache = capture(ws.model, p.clean_tokens, all_component_sites(ws.model.config()));
    for (auto scope : {PositionScope::all, PositionScope::identity_only}) {
      const auto t = patch_total(ws.model, p, cache, PatchSpec::total(HookSite::mlp_out(last), scope));
      const auto d = patch_direct(ws.model, p, cache, PatchSpec::direct(HookSite::mlp_out(last), scope));
      EXPECT_LT(max_abs_diff(t, d), 1e-4f);
    }
  }
}

TEST(PatchDirect, NoOpIsBitExact) {
  const Workspace& ws = toy();
  const auto p = pair_of(ws, "Yellow", "Yellow", 11);
  const auto cache = capture(ws.model, p.clean_tokens, all_component_sites(ws.model.config()));
  const auto base = plain_last(ws.model, p.corrupt_tokens);
  for (const auto& site : all_component_sites(ws.model.config())) {
    EXPECT_TRUE(bit_equal(patch_direct(ws.model, p, cache, PatchSpec::direct(site)), base)) << site.name();
  }
}

// Oracle: read the corrupt run's final residual and both component outputs
// through an observer, then add the scaled delta by hand.
TEST(PatchDirect, MatchesManualResidualEdit) {
  const Workspace& ws = toy();
  const auto p = pair_of(ws, "Asian", "Brown", 6);
  const std::size_t last = p.corrupt_tokens.size() - 1;
  const auto cache = capture(ws.model, p.clean_tokens, all_component_sites(ws.model.config()));
  for (const auto& site : {HookSite::mlp_out(0), HookSite::attn_out(1), HookSite::head_out(0, 2)}) {
    std::vector<float> resid, corrupt_part;
    ForwardOptions o;
    o.observer = [&](const HookSite& s, std::size_t pos, std::span<const float> v) {
      if (pos != last) return;
      if (s == HookSite::resid_final()) resid.assign(v.begin(), v.end());
      if (s == site) corrupt_part.assign(v.begin(), v.end());
    };
    ws.model.forward(p.corrupt_tokens, o);
    std::vector<float> clean_part = cache.at(site, last);
    if (site.head) {
      // head output times its rows of wo
      const auto& wo = ws.model.weight("layers." + std::to_string(site.layer) + ".wo");
      const std::size_t hd = ws.model.config().head_dim;
      const auto project = [&](const std::vector<float>& h) {
        std::vector<float> out(wo.cols(), 0.0f);
        for (std::size_t i = 0; i < hd; ++i)
          for (std::size_t j = 0; j < wo.cols(); ++j) out[j] += h[i] * wo(*site.head * hd + i, j);
        return out;
      };
      clean_part = project(clean_part);
      corrupt_part = project(corrupt_part);
    }
    const PatchSpec spec = PatchSpec::direct(site);
    for (float scale : {0.0f, 1.0f, 2.0f}) {
      const auto got = direct_effect_residual(ws.model, p.corrupt_tokens, cache, std::span(&spec, 1), p.diff_positions, scale);
      std::vector<float> want = resid;
      for (std::size_t j = 0; j < want.size(); ++j) want[j] += scale * (clean_part[j] - corrupt_part[j]);
      EXPECT_LT(max_abs_diff(got, want), 1e-5f) << site.name() << " x" << scale;
      if (scale == 0.0f) {
        EXPECT_TRUE(bit_equal(ws.model.unembed(got), plain_last(ws.model, p.corrupt_tokens)));
      }
    }
    // doubling the delta doubles the pre-norm shift
    const auto r1 = direct_effect_residual(ws.model, p.corrupt_tokens, cache, std::span(&spec, 1), p.diff_positions, 1.0f);
    const auto r2 = direct_effect_residual(ws.model, p.corrupt_tokens, cache, std::span(&spec, 1), p.diff_positions, 2.0f);
    for (std::size_t j = 0; j < resid.size(); ++j) EXPECT_NEAR(r2[j] - resid[j], 2.0f * (r1[j] - resid[j]), 1e-5);
  }
}

TEST(PatchDirect, SpecMissingTheLastPositionHasNoEffect) {
  const Workspace& ws = toy();
  const auto p = pair_of(ws, "Asian", "Indian", 1);
  const auto cache = capture(ws.model, p.clean_tokens, all_component_sites(ws.model.config()));
  const auto d = patch_direct(ws.model, p, cache, PatchSpec::direct(HookSite::mlp_out(0), PositionScope::identity_only));
  EXPECT_TRUE(bit_equal(d, plain_last(ws.model, p.corrupt_tokens)));
}

TEST(IndirectEffect, Arithmetic) {
  EXPECT_DOUBLE_EQ(indirect_effect(0.8, 0.8), 0.0);
  EXPECT_NEAR(indirect_effect(1.5, 0.2), 1.3, 1e-15);
}

TEST(IndirectEffect, NearZeroForLastLayerMlp) {
  const Workspace& ws = toy();
  const auto p = pair_of(ws, "helpful", "Black", 4);
  const auto cache = capture(ws.model, p.clean_tokens, all_component_sites(ws.model.config()));
  const auto corrupt = OptionLogits::from_logits(plain_last(ws.model, p.corrupt_tokens), p.option_token_ids, p.correct_option);
  const auto metric = [&](const std::vector<float>& l) {
    return relative_logit_diff(OptionLogits::from_logits(l, p.option_token_ids, p.correct_option), corrupt);
  };
  const auto site = HookSite::mlp_out(ws.model.config().n_layers - 1);
  const double total = metric(patch_total(ws.model, p, cache, PatchSpec::total(site)));
  const double direct = metric(patch_direct(ws.model, p, cache, PatchSpec::direct(site)));
  EXPECT_LE(std::abs(indirect_effect(total, direct)), 2e-4);
}

TEST(ResolvePositions, Scopes) {
  const std::vector<std::size_t> diff{3, 5};
  EXPECT_EQ(resolve_positions(PatchSpec::total(HookSite::mlp_out(0)), 4, diff), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(resolve_positions(PatchSpec::total(HookSite::mlp_out(0), PositionScope::identity_only), 9, diff), diff);
  EXPECT_EQ(resolve_positions(PatchSpec::at(HookSite::mlp_out(0), {4, 1, 4}), 9, diff), (std::vector<std::size_t>{1, 4}));
  EXPECT_EQ(kind_of([&] { resolve_positions(PatchSpec::at(HookSite::mlp_out(0), {9}), 9, diff); }), ErrorKind::config);
}

TEST(CacheSpill, RoundTripsAndRejectsModelFiles) {
  const Workspace& ws = toy();
  const auto p = pair_of(ws, "good", "bad");
  std::set<HookSite> sites = all_component_sites(ws.model.config());
  sites.insert(HookSite::resid_final());
  sites.insert(HookSite::attn_pattern(1, 2));
  const auto cache = capture(ws.model, p.clean_tokens, sites);
  const auto dir = temp_dir("cache");
  save_cache(cache, (dir / "c.plabc").string());
  EXPECT_EQ(load_cache((dir / "c.plabc").string()), cache);
  save_model(ws.model, (dir / "m.plab").string());
  EXPECT_EQ(kind_of([&] { load_cache((dir / "m.plab").string()); }), ErrorKind::load);
}
