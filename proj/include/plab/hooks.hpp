#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "plab/error.hpp"

namespace plab {

enum class SiteKind {
  mlp_out,
  attn_out,
  head_out,
  attn_pattern,
  value_vectors,
  resid_final,
};

inline const char* to_string(SiteKind k) {
  switch (k) {
    case SiteKind::mlp_out: return "mlp_out";
    case SiteKind::attn_out: return "attn_out";
    case SiteKind::head_out: return "head_out";
    case SiteKind::attn_pattern: return "attn_pattern";
    case SiteKind::value_vectors: return "value_vectors";
    case SiteKind::resid_final: return "resid_final";
  }
  return "?";
}

inline SiteKind site_kind_from_string(const std::string& s) {
  for (auto k : {SiteKind::mlp_out, SiteKind::attn_out, SiteKind::head_out,
                 SiteKind::attn_pattern, SiteKind::value_vectors, SiteKind::resid_final}) {
    if (s == to_string(k)) return k;
  }
  fail(ErrorKind::config, "unknown hook site kind '" + s + "'");
}

inline bool site_has_head(SiteKind k) {
  return k == SiteKind::head_out || k == SiteKind::attn_pattern ||
         k == SiteKind::value_vectors;
}

/// A named activation location. `head` is set iff the kind is per-head.
/// resid_final (the last residual stream before the final norm) is always
/// keyed with layer 0.
struct HookSite {
  SiteKind kind = SiteKind::mlp_out;
  std::size_t layer = 0;
  std::optional<std::size_t> head;

  static HookSite mlp_out(std::size_t layer) { return {SiteKind::mlp_out, layer, {}}; }
  static HookSite attn_out(std::size_t layer) { return {SiteKind::attn_out, layer, {}}; }
  static HookSite head_out(std::size_t layer, std::size_t head) {
    return {SiteKind::head_out, layer, head};
  }
  static HookSite attn_pattern(std::size_t layer, std::size_t head) {
    return {SiteKind::attn_pattern, layer, head};
  }
  static HookSite value_vectors(std::size_t layer, std::size_t head) {
    return {SiteKind::value_vectors, layer, head};
  }
  static HookSite resid_final() { return {SiteKind::resid_final, 0, {}}; }

  /// Checks the head/kind pairing and bounds against a model shape.
  void validate(std::size_t n_layers, std::size_t n_heads) const {
    if (layer >= n_layers) {
      fail(ErrorKind::config, name() + ": layer out of range (model has " +
                                  std::to_string(n_layers) + ")");
    }
    if (site_has_head(kind) != head.has_value()) {
      fail(ErrorKind::config, std::string(to_string(kind)) +
                                  (head ? " takes no head index" : " requires a head index"));
    }
    if (head && *head >= n_heads) {
      fail(ErrorKind::config, name() + ": head out of range (model has " +
                                  std::to_string(n_heads) + ")");
    }
  }

  /// `mlp_out.3`, `head_out.1.5`, `resid_final`.
  std::string name() const {
    if (kind == SiteKind::resid_final) return "resid_final";
    std::string s = std::string(to_string(kind)) + "." + std::to_string(layer);
    if (head) s += "." + std::to_string(*head);
    return s;
  }

  /// Head label in H{layer}^{head} notation.
  std::string head_label() const {
    return "H" + std::to_string(layer) + "^" + std::to_string(head.value_or(0));
  }

  auto operator<=>(const HookSite&) const = default;
  bool operator==(const HookSite&) const = default;
};

struct CacheKey {
  HookSite site;
  std::size_t position = 0;

  auto operator<=>(const CacheKey&) const = default;
  bool operator==(const CacheKey&) const = default;
};

/// Activations captured from one forward pass, keyed by (site, position).
///
/// For attn_pattern the position is the destination and the vector is the
/// full attention row over sources (zeros on future positions). For
/// value_vectors the position is the source.
struct ActivationCache {
  std::map<CacheKey, std::vector<float>> entries;
  std::size_t token_len = 0;
  std::uint64_t model_fingerprint = 0;
  /// Last-position logits of the run that produced the cache.
  std::vector<float> logits;

  bool contains(const HookSite& site, std::size_t position) const {
    return entries.contains(CacheKey{site, position});
  }

  const std::vector<float>& at(const HookSite& site, std::size_t position) const {
    auto it = entries.find(CacheKey{site, position});
    if (it == entries.end()) {
      fail(ErrorKind::cache_miss,
           site.name() + " at position " + std::to_string(position));
    }
    return it->second;
  }

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }

  bool operator==(const ActivationCache&) const = default;
};

}  // namespace plab
