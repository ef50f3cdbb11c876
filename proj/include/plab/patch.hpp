#pragma once

// De-noising activation patching: capture a clean run, then replay the
// corrupt prompt with selected component outputs overwritten by their clean
// values (total effect), or inject only the component's additive change at
// the final residual stream (direct effect).

#include <algorithm>
#include <cstdio>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "plab/container.hpp"
#include "plab/hooks.hpp"
#include "plab/model.hpp"
#include "plab/prompt.hpp"

namespace plab {

enum class PositionScope { all, identity_only, explicit_list };
enum class EffectMode { total, direct };

inline const char* to_string(PositionScope s) {
  switch (s) {
    case PositionScope::all: return "all";
    case PositionScope::identity_only: return "identity_only";
    case PositionScope::explicit_list: return "explicit";
  }
  return "?";
}

inline const char* to_string(EffectMode m) { return m == EffectMode::total ? "total" : "direct"; }

struct PatchSpec {
  HookSite site;
  PositionScope scope = PositionScope::all;
  std::vector<std::size_t> positions;  // used when scope is explicit_list
  EffectMode mode = EffectMode::total;

  static PatchSpec total(HookSite site, PositionScope scope = PositionScope::all) {
    return {site, scope, {}, EffectMode::total};
  }
  static PatchSpec direct(HookSite site, PositionScope scope = PositionScope::all) {
    return {site, scope, {}, EffectMode::direct};
  }
  static PatchSpec at(HookSite site, std::vector<std::size_t> positions,
                      EffectMode mode = EffectMode::total) {
    return {site, PositionScope::explicit_list, std::move(positions), mode};
  }
};

inline bool is_patchable(SiteKind k) {
  return k == SiteKind::mlp_out || k == SiteKind::attn_out || k == SiteKind::head_out;
}

/// Concrete positions a spec covers. identity_only resolves to every position
/// where the clean and corrupt prompts differ.
inline std::vector<std::size_t> resolve_positions(const PatchSpec& spec, std::size_t token_len,
                                                  std::span<const std::size_t> diff_positions) {
  std::vector<std::size_t> out;
  switch (spec.scope) {
    case PositionScope::all:
      for (std::size_t p = 0; p < token_len; ++p) out.push_back(p);
      break;
    case PositionScope::identity_only:
      out.assign(diff_positions.begin(), diff_positions.end());
      break;
    case PositionScope::explicit_list:
      out = spec.positions;
      std::sort(out.begin(), out.end());
      out.erase(std::unique(out.begin(), out.end()), out.end());
      break;
  }
  for (auto p : out) {
    if (p >= token_len) {
      fail(ErrorKind::config, "patch position " + std::to_string(p) +
                                  " outside a sequence of " + std::to_string(token_len));
    }
  }
  return out;
}

/// Runs the clean prompt once and keeps the requested sites at every
/// position, plus the last-position logits.
inline ActivationCache capture(const Model& model, const TokenIds& clean_tokens,
                               const std::set<HookSite>& sites) {
  ForwardOptions opts;
  opts.capture = sites;
  opts.all_logits = false;
  return model.forward(clean_tokens, opts).cache;
}

/// Every patchable site of a model: all mlp_out, attn_out and head_out.
inline std::set<HookSite> all_component_sites(const ModelConfig& c) {
  std::set<HookSite> s;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    s.insert(HookSite::mlp_out(l));
    s.insert(HookSite::attn_out(l));
    for (std::size_t h = 0; h < c.n_heads; ++h) s.insert(HookSite::head_out(l, h));
  }
  return s;
}

namespace detail {

inline void check_cache(const Model& model, const TokenIds& tokens, const ActivationCache& cache) {
  if (cache.model_fingerprint != model.fingerprint()) {
    fail(ErrorKind::model, "activation cache was captured on a different model");
  }
  if (cache.token_len != tokens.size()) {
    fail(ErrorKind::input, "cache covers " + std::to_string(cache.token_len) +
                               " tokens but the corrupt prompt has " +
                               std::to_string(tokens.size()));
  }
}

inline void check_spec(const Model& model, const PatchSpec& spec) {
  spec.site.validate(model.config().n_layers, model.config().n_heads);
  if (!is_patchable(spec.site.kind)) {
    fail(ErrorKind::config, std::string("cannot patch site kind ") + to_string(spec.site.kind));
  }
}

}  // namespace detail

/// Corrupt forward with every spec's component output overwritten by its
/// clean value at the spec's positions; downstream computation proceeds from
/// the altered state. `extra_capture` sites are recorded from this run.
inline ForwardResult run_patched(const Model& model, const TokenIds& corrupt_tokens,
                                 const ActivationCache& cache, std::span<const PatchSpec> specs,
                                 std::span<const std::size_t> diff_positions,
                                 const std::set<HookSite>& extra_capture = {}) {
  detail::check_cache(model, corrupt_tokens, cache);
  Substitutions subs;
  for (const auto& spec : specs) {
    detail::check_spec(model, spec);
    if (spec.mode != EffectMode::total) fail(ErrorKind::config, "run_patched takes total-effect specs");
    for (auto p : resolve_positions(spec, corrupt_tokens.size(), diff_positions)) {
      subs[CacheKey{spec.site, p}] = cache.at(spec.site, p);
    }
  }
  ForwardOptions opts;
  opts.capture = extra_capture;
  opts.substitutions = &subs;
  opts.all_logits = false;
  return model.forward(corrupt_tokens, opts);
}

/// Total-effect patching; returns the last-position logits.
inline std::vector<float> patch_total(const Model& model, const TokenIds& corrupt_tokens,
                                      const ActivationCache& cache, std::span<const PatchSpec> specs,
                                      std::span<const std::size_t> diff_positions = {}) {
  const auto r = run_patched(model, corrupt_tokens, cache, specs, diff_positions);
  const auto last = r.last_logits();
  return {last.begin(), last.end()};
}

inline std::vector<float> patch_total(const Model& model, const TokenIds& corrupt_tokens,
                                      const ActivationCache& cache, const PatchSpec& spec,
                                      std::span<const std::size_t> diff_positions = {}) {
  return patch_total(model, corrupt_tokens, cache, std::span<const PatchSpec>(&spec, 1),
                     diff_positions);
}

inline std::vector<float> patch_total(const Model& model, const PromptPair& pair,
                                      const ActivationCache& cache, const PatchSpec& spec) {
  return patch_total(model, pair.corrupt_tokens, cache, spec, pair.diff_positions);
}

/// Final-position residual stream (pre final norm) of the corrupt run plus
/// `delta_scale` times each component's clean-minus-corrupt additive
/// contribution at the last position. Components whose spec does not cover
/// the last position contribute nothing.
inline std::vector<float> direct_effect_residual(const Model& model, const TokenIds& corrupt_tokens,
                                                 const ActivationCache& cache,
                                                 std::span<const PatchSpec> specs,
                                                 std::span<const std::size_t> diff_positions = {},
                                                 float delta_scale = 1.0f) {
  detail::check_cache(model, corrupt_tokens, cache);
  const std::size_t last = corrupt_tokens.size() - 1;
  std::set<HookSite> sites{HookSite::resid_final()};
  for (const auto& spec : specs) {
    detail::check_spec(model, spec);
    sites.insert(spec.site);
  }
  ForwardOptions opts;
  opts.capture = sites;
  opts.all_logits = false;
  const ActivationCache corrupt = model.forward(corrupt_tokens, opts).cache;

  std::vector<float> resid = corrupt.at(HookSite::resid_final(), last);
  for (const auto& spec : specs) {
    const auto positions = resolve_positions(spec, corrupt_tokens.size(), diff_positions);
    if (!std::binary_search(positions.begin(), positions.end(), last)) continue;
    std::vector<float> clean_part = cache.at(spec.site, last);
    std::vector<float> corrupt_part = corrupt.at(spec.site, last);
    if (spec.site.kind == SiteKind::head_out) {
      clean_part = model.head_contribution(spec.site.layer, *spec.site.head, clean_part);
      corrupt_part = model.head_contribution(spec.site.layer, *spec.site.head, corrupt_part);
    }
    for (std::size_t j = 0; j < resid.size(); ++j) {
      resid[j] += delta_scale * (clean_part[j] - corrupt_part[j]);
    }
  }
  return resid;
}

/// Direct-effect patching; returns the last-position logits.
inline std::vector<float> patch_direct(const Model& model, const TokenIds& corrupt_tokens,
                                       const ActivationCache& cache, std::span<const PatchSpec> specs,
                                       std::span<const std::size_t> diff_positions = {}) {
  return model.unembed(direct_effect_residual(model, corrupt_tokens, cache, specs, diff_positions));
}

inline std::vector<float> patch_direct(const Model& model, const TokenIds& corrupt_tokens,
                                       const ActivationCache& cache, const PatchSpec& spec,
                                       std::span<const std::size_t> diff_positions = {}) {
  return patch_direct(model, corrupt_tokens, cache, std::span<const PatchSpec>(&spec, 1),
                      diff_positions);
}

inline std::vector<float> patch_direct(const Model& model, const PromptPair& pair,
                                       const ActivationCache& cache, const PatchSpec& spec) {
  return patch_direct(model, pair.corrupt_tokens, cache, spec, pair.diff_positions);
}

/// Dispatches on spec.mode.
inline std::vector<float> patch(const Model& model, const PromptPair& pair,
                                const ActivationCache& cache, const PatchSpec& spec) {
  return spec.mode == EffectMode::total ? patch_total(model, pair, cache, spec)
                                        : patch_direct(model, pair, cache, spec);
}

inline double indirect_effect(double total_metric, double direct_metric) {
  return total_metric - direct_metric;
}

// Cache spill files: same container as model files, magic PLABCCH1, one
// [1, n] tensor per entry named `<site>.<position>` (e.g. `mlp_out.3.12`,
// `head_out.1.5.12`) and the last-position logits under `logits`.

inline void save_cache(const ActivationCache& cache, const std::string& path) {
  Container c;
  char fp[32];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(cache.model_fingerprint));
  c.config = {{"token_len", cache.token_len}, {"model_fingerprint", fp}};
  for (const auto& [key, v] : cache.entries) {
    c.tensors.emplace(key.site.name() + "." + std::to_string(key.position),
                      Tensor2D(1, v.size(), v));
  }
  if (!cache.logits.empty()) c.tensors.emplace("logits", Tensor2D(1, cache.logits.size(), cache.logits));
  write_container(path, c, kCacheMagic);
}

inline ActivationCache load_cache(const std::string& path) {
  Container c = read_container(path, kCacheMagic);
  ActivationCache cache;
  try {
    cache.token_len = c.config.at("token_len").get<std::size_t>();
    cache.model_fingerprint =
        std::stoull(c.config.at("model_fingerprint").get<std::string>(), nullptr, 16);
  } catch (const std::exception& e) {
    fail(ErrorKind::load, path + ": bad cache header: " + e.what());
  }
  for (auto& [name, t] : c.tensors) {
    const auto& data = t.buffer();
    if (name == "logits") {
      cache.logits = data;
      continue;
    }
    std::vector<std::string> parts;
    std::stringstream ss(name);
    for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
    try {
      HookSite site;
      std::size_t position = 0;
      site.kind = site_kind_from_string(parts.at(0));
      if (site.kind == SiteKind::resid_final) {
        if (parts.size() != 2) throw std::invalid_argument("arity");
        position = std::stoull(parts[1]);
      } else if (site_has_head(site.kind)) {
        if (parts.size() != 4) throw std::invalid_argument("arity");
        site.layer = std::stoull(parts[1]);
        site.head = std::stoull(parts[2]);
        position = std::stoull(parts[3]);
      } else {
        if (parts.size() != 3) throw std::invalid_argument("arity");
        site.layer = std::stoull(parts[1]);
        position = std::stoull(parts[2]);
      }
      if (position >= cache.token_len) throw std::out_of_range("position");
      cache.entries[CacheKey{site, position}] = data;
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      fail(ErrorKind::load, path + ": malformed cache entry name '" + name + "'");
    }
  }
  return cache;
}

}  // namespace plab
