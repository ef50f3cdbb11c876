#pragma once

// Experiment orchestration: persona evaluation, S1-S4 partitioning, patching
// sweeps and attention profiling over a corpus, with JSONL persistence.
//
// Every writer sorts its rows before serializing, so the thread count never
// changes output bytes.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "plab/attention_lens.hpp"
#include "plab/corpus.hpp"
#include "plab/metrics.hpp"
#include "plab/model.hpp"
#include "plab/parallel.hpp"
#include "plab/patch.hpp"
#include "plab/prompt.hpp"
#include "plab/tokenizer.hpp"

namespace plab {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kMhaConvention =
    "attn_out is post output projection; head_out is pre output projection";
inline constexpr const char* kScoringNote =
    "answers scored by strict is_max over the four option-token logits only";

inline std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Everything a run needs, loaded once and shared read-only across workers.
struct Workspace {
  Model model;
  std::shared_ptr<const Tokenizer> tokenizer;
  IdentityRegistry identities;
  std::vector<IdentityPairSpec> pairs;
  PromptTemplate tmpl{"{helper}{identity_1}{identity_2}{question}{option_A}{option_B}{option_C}{option_D}"};
  std::vector<QuestionRecord> questions;
  std::size_t threads = 1;
};

/// Closed word-level vocabulary covering every prompt the corpus can render
/// for the base identity and every registered persona.
inline WordTokenizer build_word_tokenizer(const std::vector<QuestionRecord>& questions,
                                          const IdentityRegistry& identities,
                                          const PromptTemplate& tmpl) {
  std::vector<std::string> texts;
  for (const auto& id : identities.all()) {
    for (const auto& q : questions) texts.push_back(render_prompt(id, q, tmpl));
  }
  std::vector<std::string> extra = {" A", " B", " C", " D"};
  for (const auto& id : identities.all()) extra.push_back(identity_piece(id.surface));
  return WordTokenizer::build(texts, extra);
}

// ---------------------------------------------------------------------------
// Persona evaluation

struct EvalRecord {
  std::string identity;
  IdentityCategory category = IdentityCategory::base;
  std::string question_id;
  std::string subject;
  double prob = 0.0;
  bool is_max = false;
  OptionLogits logits;
};

struct EvalOptions {
  bool renormalize = false;
  bool welch = false;
};

inline EvalRecord evaluate_prompt(const Workspace& ws, const Identity& identity,
                                  const QuestionRecord& q, const EvalOptions& opts = {}) {
  const TokenIds tokens = ws.tokenizer->encode(render_prompt(identity, q, ws.tmpl));
  ForwardOptions fo;
  fo.all_logits = false;
  const auto result = ws.model.forward(tokens, fo);
  const auto ids = option_token_ids(*ws.tokenizer);
  EvalRecord r;
  r.identity = identity.surface;
  r.category = identity.category;
  r.question_id = q.id;
  r.subject = q.subject;
  r.logits = OptionLogits::from_logits(result.last_logits(), ids, q.answer);
  r.prob = correct_answer_prob(result.last_logits(), ids, q.answer, opts.renormalize);
  r.is_max = is_max(r.logits);
  return r;
}

/// One record per (identity, question), ordered by identity registry order
/// then question order.
inline std::vector<EvalRecord> evaluate_identities(const Workspace& ws,
                                                   const std::vector<Identity>& identities,
                                                   const EvalOptions& opts = {}) {
  const std::size_t nq = ws.questions.size();
  std::vector<EvalRecord> out(identities.size() * nq);
  parallel_for(out.size(), ws.threads, [&](std::size_t i) {
    out[i] = evaluate_prompt(ws, identities[i / nq], ws.questions[i % nq], opts);
  });
  return out;
}

inline nlohmann::json to_json(const EvalRecord& r) {
  return {{"schema_version", kSchemaVersion},
          {"identity", r.identity},
          {"category", to_string(r.category)},
          {"question_id", r.question_id},
          {"subject", r.subject},
          {"prob", r.prob},
          {"is_max", r.is_max},
          {"correct", r.logits.correct},
          {"option_logits", r.logits.values}};
}

inline EvalRecord eval_record_from_json(const nlohmann::json& j) {
  EvalRecord r;
  r.identity = j.at("identity").get<std::string>();
  r.category = category_from_string(j.at("category").get<std::string>());
  r.question_id = j.at("question_id").get<std::string>();
  r.subject = j.at("subject").get<std::string>();
  r.prob = j.at("prob").get<double>();
  r.is_max = j.at("is_max").get<bool>();
  r.logits.correct = j.at("correct").get<std::size_t>();
  r.logits.values = j.at("option_logits").get<std::array<double, 4>>();
  return r;
}

struct IdentitySummary {
  std::string identity;
  IdentityCategory category = IdentityCategory::base;
  double mean_prob = 0.0;
  double accuracy = 0.0;
  double mean_prob_delta_vs_base = 0.0;
  double accuracy_delta_vs_base = 0.0;
};

struct GroupTest {
  std::string group_x;
  std::string group_y;
  std::string kind;
  std::optional<TTestResult> result;
  std::size_t n = 0;
  std::string note;
};

struct EvalSummary {
  std::vector<IdentitySummary> identities;
  /// pairwise[a][b]: mean over subjects of the within-subject mean of
  /// prob(a) - prob(b).
  std::map<std::string, std::map<std::string, double>> pairwise;
  std::vector<GroupTest> tests;
};

/// Aggregates per-question records. Identities are compared to the base
/// identity question by question; category groups are compared with a
/// paired t-test over per-question group means (Welch on request).
inline EvalSummary summarize_eval(const std::vector<EvalRecord>& records,
                                  const std::vector<Identity>& identities,
                                  const EvalOptions& opts = {}) {
  std::map<std::string, std::map<std::string, const EvalRecord*>> by_identity;
  for (const auto& r : records) by_identity[r.identity][r.question_id] = &r;
  const std::string base(kBaseSurface);
  const auto base_it = by_identity.find(base);

  EvalSummary s;
  for (const auto& id : identities) {
    const auto it = by_identity.find(id.surface);
    if (it == by_identity.end()) continue;
    IdentitySummary row;
    row.identity = id.surface;
    row.category = id.category;
    double prob = 0.0, correct = 0.0, dprob = 0.0, dacc = 0.0;
    for (const auto& [qid, r] : it->second) {
      prob += r->prob;
      correct += r->is_max ? 1.0 : 0.0;
      if (base_it != by_identity.end()) {
        const auto b = base_it->second.find(qid);
        if (b == base_it->second.end()) fail(ErrorKind::input, "base identity lacks question " + qid);
        dprob += r->prob - b->second->prob;
        dacc += (r->is_max ? 1.0 : 0.0) - (b->second->is_max ? 1.0 : 0.0);
      }
    }
    const double n = static_cast<double>(it->second.size());
    row.mean_prob = prob / n;
    row.accuracy = correct / n;
    row.mean_prob_delta_vs_base = dprob / n;
    row.accuracy_delta_vs_base = dacc / n;
    s.identities.push_back(row);
  }

  for (const auto& a : identities) {
    for (const auto& b : identities) {
      const auto ia = by_identity.find(a.surface);
      const auto ib = by_identity.find(b.surface);
      if (ia == by_identity.end() || ib == by_identity.end()) continue;
      std::map<std::string, std::pair<double, std::size_t>> per_subject;
      for (const auto& [qid, ra] : ia->second) {
        const auto rb = ib->second.find(qid);
        if (rb == ib->second.end()) continue;
        auto& acc = per_subject[ra->subject];
        acc.first += ra->prob - rb->second->prob;
        acc.second += 1;
      }
      double total = 0.0;
      for (const auto& [subject, acc] : per_subject) total += acc.first / static_cast<double>(acc.second);
      s.pairwise[a.surface][b.surface] =
          per_subject.empty() ? 0.0 : total / static_cast<double>(per_subject.size());
    }
  }

  // per-question category means
  std::map<IdentityCategory, std::map<std::string, std::pair<double, std::size_t>>> group;
  for (const auto& r : records) {
    if (r.category == IdentityCategory::base) continue;
    auto& acc = group[r.category][r.question_id];
    acc.first += r.prob;
    acc.second += 1;
  }
  const IdentityCategory cats[] = {IdentityCategory::racial, IdentityCategory::color,
                                   IdentityCategory::positive, IdentityCategory::negative};
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = i + 1; j < 4; ++j) {
      const auto gx = group.find(cats[i]);
      const auto gy = group.find(cats[j]);
      if (gx == group.end() || gy == group.end()) continue;
      std::vector<double> x, y;
      for (const auto& [qid, acc] : gx->second) {
        const auto other = gy->second.find(qid);
        if (other == gy->second.end()) continue;
        x.push_back(acc.first / static_cast<double>(acc.second));
        y.push_back(other->second.first / static_cast<double>(other->second.second));
      }
      GroupTest t;
      t.group_x = to_string(cats[i]);
      t.group_y = to_string(cats[j]);
      t.kind = opts.welch ? "welch" : "paired";
      t.n = x.size();
      try {
        t.result = opts.welch ? welch_t_test(x, y) : paired_t_test(x, y);
      } catch (const Error& e) {
        t.note = e.what();
      }
      s.tests.push_back(std::move(t));
    }
  }
  return s;
}

inline nlohmann::json to_json(const EvalSummary& s, std::uint64_t fingerprint,
                              const EvalOptions& opts) {
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& r : s.identities) {
    ids.push_back({{"identity", r.identity},
                   {"category", to_string(r.category)},
                   {"mean_prob", r.mean_prob},
                   {"accuracy", r.accuracy},
                   {"mean_prob_delta_vs_base", r.mean_prob_delta_vs_base},
                   {"accuracy_delta_vs_base", r.accuracy_delta_vs_base}});
  }
  nlohmann::json tests = nlohmann::json::array();
  for (const auto& t : s.tests) {
    nlohmann::json j = {{"group_x", t.group_x}, {"group_y", t.group_y}, {"kind", t.kind}, {"n", t.n}};
    if (t.result) {
      j["t"] = t.result->t;
      j["p"] = t.result->p;
      j["df"] = t.result->df;
    } else {
      j["t"] = nullptr;
      j["p"] = nullptr;
      j["note"] = t.note;
    }
    tests.push_back(std::move(j));
  }
  return {{"schema_version", kSchemaVersion},
          {"model_fingerprint", hex64(fingerprint)},
          {"metadata",
           {{"probability", opts.renormalize ? "softmax renormalized over the four option tokens"
                                             : "full-vocabulary softmax at the correct option token"},
            {"accuracy", kScoringNote},
            {"t_test", opts.welch ? "welch (unequal variances)" : "paired"},
            {"p_value", "two-sided"}}},
          {"identities", ids},
          {"pairwise_prob_delta", s.pairwise},
          {"t_tests", tests}};
}

// ---------------------------------------------------------------------------
// Subsets

inline std::map<std::string, bool> correctness(const std::vector<EvalRecord>& records,
                                               const std::string& identity) {
  std::map<std::string, bool> out;
  for (const auto& r : records) {
    if (r.identity == identity) out[r.question_id] = r.is_max;
  }
  return out;
}

inline nlohmann::json to_json(const SubsetPartition& p) {
  return {{"S1", p.s1}, {"S2", p.s2}, {"S3", p.s3}, {"S4", p.s4}};
}

enum class Subset { s1, s2, s3, s4, all };

inline Subset subset_from_string(const std::string& s) {
  if (s == "S1") return Subset::s1;
  if (s == "S2") return Subset::s2;
  if (s == "S3") return Subset::s3;
  if (s == "S4") return Subset::s4;
  if (s == "all") return Subset::all;
  fail(ErrorKind::usage, "unknown subset '" + s + "' (expected S1..S4 or all)");
}

inline const char* to_string(Subset s) {
  switch (s) {
    case Subset::s1: return "S1";
    case Subset::s2: return "S2";
    case Subset::s3: return "S3";
    case Subset::s4: return "S4";
    case Subset::all: return "all";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Patching sweeps

enum class TargetFamily { mlp_layers, mha_layers, heads, mlp_identity_position, full_restore };

inline const char* to_string(TargetFamily f) {
  switch (f) {
    case TargetFamily::mlp_layers: return "mlp_layers";
    case TargetFamily::mha_layers: return "mha_layers";
    case TargetFamily::heads: return "heads";
    case TargetFamily::mlp_identity_position: return "mlp_identity_position";
    case TargetFamily::full_restore: return "full_restore";
  }
  return "?";
}

inline TargetFamily target_family_from_string(const std::string& s) {
  for (auto f : {TargetFamily::mlp_layers, TargetFamily::mha_layers, TargetFamily::heads,
                 TargetFamily::mlp_identity_position, TargetFamily::full_restore}) {
    if (s == to_string(f)) return f;
  }
  fail(ErrorKind::usage, "unknown target family '" + s + "'");
}

/// One patch applied per question. full_restore overwrites every mlp_out and
/// attn_out site at every position at once.
struct PatchTarget {
  TargetFamily family = TargetFamily::mlp_layers;
  EffectMode mode = EffectMode::total;
  std::optional<std::size_t> layer;
  std::optional<std::size_t> head;
  PositionScope scope = PositionScope::all;
  std::vector<PatchSpec> specs;

  /// Ordering key: family, mode, layer, head.
  auto key() const {
    return std::tuple{static_cast<int>(family), static_cast<int>(mode),
                      layer ? static_cast<long long>(*layer) : -1LL,
                      head ? static_cast<long long>(*head) : -1LL};
  }

  std::string site_name() const {
    return specs.size() == 1 ? specs.front().site.name() : std::string("all_mlp_out+attn_out");
  }
};

inline std::vector<PatchTarget> build_targets(const ModelConfig& c,
                                              const std::vector<TargetFamily>& families,
                                              const std::vector<EffectMode>& modes) {
  std::vector<PatchTarget> out;
  for (auto mode : modes) {
    for (auto family : families) {
      const auto add = [&](HookSite site, PositionScope scope, std::optional<std::size_t> head) {
        PatchTarget t;
        t.family = family;
        t.mode = mode;
        t.layer = site.layer;
        t.head = head;
        t.scope = scope;
        t.specs = {PatchSpec{site, scope, {}, mode}};
        out.push_back(std::move(t));
      };
      switch (family) {
        case TargetFamily::mlp_layers:
          for (std::size_t l = 0; l < c.n_layers; ++l) add(HookSite::mlp_out(l), PositionScope::all, {});
          break;
        case TargetFamily::mha_layers:
          for (std::size_t l = 0; l < c.n_layers; ++l) add(HookSite::attn_out(l), PositionScope::all, {});
          break;
        case TargetFamily::heads:
          for (std::size_t l = 0; l < c.n_layers; ++l)
            for (std::size_t h = 0; h < c.n_heads; ++h)
              add(HookSite::head_out(l, h), PositionScope::all, h);
          break;
        case TargetFamily::mlp_identity_position:
          for (std::size_t l = 0; l < c.n_layers; ++l)
            add(HookSite::mlp_out(l), PositionScope::identity_only, {});
          break;
        case TargetFamily::full_restore: {
          PatchTarget t;
          t.family = family;
          t.mode = mode;
          for (std::size_t l = 0; l < c.n_layers; ++l) {
            t.specs.push_back(PatchSpec{HookSite::attn_out(l), PositionScope::all, {}, mode});
            t.specs.push_back(PatchSpec{HookSite::mlp_out(l), PositionScope::all, {}, mode});
          }
          out.push_back(std::move(t));
          break;
        }
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.key() < b.key(); });
  return out;
}

/// One (pair, question, target) outcome.
struct MetricRecord {
  std::string id1;
  std::string id2;
  std::string question_id;
  std::string subject;
  TargetFamily family = TargetFamily::mlp_layers;
  std::string site;
  std::optional<std::size_t> layer;
  std::optional<std::size_t> head;
  PositionScope scope = PositionScope::all;
  EffectMode mode = EffectMode::total;
  double delta_r = 0.0;
  bool is_max = false;
  OptionLogits patched;
  OptionLogits corrupt;
  OptionLogits clean;
  std::string model_fingerprint;

  std::string pair_label() const { return id1 + "," + id2; }

  auto sort_key() const {
    return std::tuple{pair_label(), question_id, static_cast<int>(family), static_cast<int>(mode),
                      layer ? static_cast<long long>(*layer) : -1LL,
                      head ? static_cast<long long>(*head) : -1LL};
  }
};

inline nlohmann::json to_json(const MetricRecord& r) {
  return {{"schema_version", kSchemaVersion},
          {"model_fingerprint", r.model_fingerprint},
          {"id1", r.id1},
          {"id2", r.id2},
          {"question_id", r.question_id},
          {"subject", r.subject},
          {"family", to_string(r.family)},
          {"site", r.site},
          {"layer", r.layer ? nlohmann::json(*r.layer) : nlohmann::json(nullptr)},
          {"head", r.head ? nlohmann::json(*r.head) : nlohmann::json(nullptr)},
          {"positions", to_string(r.scope)},
          {"mode", to_string(r.mode)},
          {"delta_r", r.delta_r},
          {"is_max", r.is_max},
          {"correct", r.patched.correct},
          {"patched_logits", r.patched.values},
          {"corrupt_logits", r.corrupt.values},
          {"clean_logits", r.clean.values},
          {"mha_convention", kMhaConvention}};
}

inline MetricRecord metric_record_from_json(const nlohmann::json& j) {
  MetricRecord r;
  r.model_fingerprint = j.value("model_fingerprint", "");
  r.id1 = j.at("id1").get<std::string>();
  r.id2 = j.at("id2").get<std::string>();
  r.question_id = j.at("question_id").get<std::string>();
  r.subject = j.at("subject").get<std::string>();
  r.family = target_family_from_string(j.at("family").get<std::string>());
  r.site = j.at("site").get<std::string>();
  if (!j.at("layer").is_null()) r.layer = j["layer"].get<std::size_t>();
  if (!j.at("head").is_null()) r.head = j["head"].get<std::size_t>();
  const auto pos = j.at("positions").get<std::string>();
  r.scope = pos == "all" ? PositionScope::all
            : pos == "identity_only" ? PositionScope::identity_only
                                     : PositionScope::explicit_list;
  r.mode = j.at("mode").get<std::string>() == "direct" ? EffectMode::direct : EffectMode::total;
  r.delta_r = j.at("delta_r").get<double>();
  r.is_max = j.at("is_max").get<bool>();
  const auto correct = j.at("correct").get<std::size_t>();
  r.patched = {j.at("patched_logits").get<std::array<double, 4>>(), correct};
  r.corrupt = {j.at("corrupt_logits").get<std::array<double, 4>>(), correct};
  r.clean = {j.at("clean_logits").get<std::array<double, 4>>(), correct};
  return r;
}

struct SweepOptions {
  std::vector<TargetFamily> families = {TargetFamily::mlp_layers, TargetFamily::mha_layers};
  std::vector<EffectMode> modes = {EffectMode::total};
  Subset subset = Subset::s3;
};

/// Questions of `subset` for a pair, in corpus order.
inline std::vector<const QuestionRecord*> select_subset(const Workspace& ws, const Identity& id1,
                                                        const Identity& id2, Subset subset) {
  std::vector<const QuestionRecord*> out;
  if (subset == Subset::all) {
    for (const auto& q : ws.questions) out.push_back(&q);
    return out;
  }
  const auto records = evaluate_identities(ws, {id1, id2});
  const auto part = partition_subsets(correctness(records, id1.surface), correctness(records, id2.surface));
  const auto& ids = subset == Subset::s1 ? part.s1
                    : subset == Subset::s2 ? part.s2
                    : subset == Subset::s3 ? part.s3
                                           : part.s4;
  const std::set<std::string> keep(ids.begin(), ids.end());
  for (const auto& q : ws.questions) {
    if (keep.contains(q.id)) out.push_back(&q);
  }
  return out;
}

using CellKey = std::tuple<std::string, std::string, int, int, long long, long long>;

inline CellKey cell_key(const MetricRecord& r) { return r.sort_key(); }

/// Runs every target on every selected question of one pair, skipping cells
/// already present in `done`.
inline std::vector<MetricRecord> run_patching_sweep(const Workspace& ws, const IdentityPairSpec& pair,
                                                    const SweepOptions& opts,
                                                    const std::set<CellKey>& done = {}) {
  const Identity& id1 = ws.identities.at(pair.id1);
  const Identity& id2 = ws.identities.at(pair.id2);
  const auto questions = select_subset(ws, id1, id2, opts.subset);
  const auto targets = build_targets(ws.model.config(), opts.families, opts.modes);
  std::set<HookSite> sites;
  for (const auto& t : targets) {
    for (const auto& s : t.specs) sites.insert(s.site);
  }
  const std::string fingerprint = hex64(ws.model.fingerprint());

  std::vector<std::vector<MetricRecord>> per_question(questions.size());
  parallel_for(questions.size(), ws.threads, [&](std::size_t qi) {
    const QuestionRecord& q = *questions[qi];
    const auto make_key = [&](const PatchTarget& t) {
      MetricRecord r;
      r.id1 = id1.surface;
      r.id2 = id2.surface;
      r.question_id = q.id;
      r.family = t.family;
      r.mode = t.mode;
      r.layer = t.layer;
      r.head = t.head;
      return cell_key(r);
    };
    std::vector<const PatchTarget*> todo;
    for (const auto& t : targets) {
      if (!done.contains(make_key(t))) todo.push_back(&t);
    }
    if (todo.empty()) return;

    const PromptPair pp = make_pair(id1, id2, q, ws.tmpl, *ws.tokenizer);
    const ActivationCache cache = capture(ws.model, pp.clean_tokens, sites);
    ForwardOptions fo;
    fo.all_logits = false;
    const auto corrupt_run = ws.model.forward(pp.corrupt_tokens, fo);
    const auto clean = OptionLogits::from_logits(cache.logits, pp.option_token_ids, pp.correct_option);
    const auto corrupt =
        OptionLogits::from_logits(corrupt_run.last_logits(), pp.option_token_ids, pp.correct_option);

    for (const PatchTarget* t : todo) {
      const auto logits =
          t->mode == EffectMode::total
              ? patch_total(ws.model, pp.corrupt_tokens, cache, t->specs, pp.diff_positions)
              : patch_direct(ws.model, pp.corrupt_tokens, cache, t->specs, pp.diff_positions);
      MetricRecord r;
      r.id1 = id1.surface;
      r.id2 = id2.surface;
      r.question_id = q.id;
      r.subject = q.subject;
      r.family = t->family;
      r.site = t->site_name();
      r.layer = t->layer;
      r.head = t->head;
      r.scope = t->scope;
      r.mode = t->mode;
      r.patched = OptionLogits::from_logits(logits, pp.option_token_ids, pp.correct_option);
      r.corrupt = corrupt;
      r.clean = clean;
      r.delta_r = relative_logit_diff(r.patched, r.corrupt);
      r.is_max = is_max(r.patched);
      r.model_fingerprint = fingerprint;
      per_question[qi].push_back(std::move(r));
    }
  });
  std::vector<MetricRecord> out;
  for (auto& v : per_question) {
    for (auto& r : v) out.push_back(std::move(r));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.sort_key() < b.sort_key(); });
  return out;
}

struct TargetAggregate {
  std::string pair;
  TargetFamily family = TargetFamily::mlp_layers;
  EffectMode mode = EffectMode::total;
  std::optional<std::size_t> layer;
  std::optional<std::size_t> head;
  std::size_t n = 0;
  double mean_delta_r = 0.0;
  double is_max_pct = 0.0;
};

/// Per (pair, target) means, plus rows with pair "*" averaging the per-pair
/// means across pairs.
inline std::vector<TargetAggregate> aggregate_records(const std::vector<MetricRecord>& records) {
  using Key = std::tuple<std::string, int, int, long long, long long>;
  std::map<Key, TargetAggregate> rows;
  for (const auto& r : records) {
    const Key k{r.pair_label(), static_cast<int>(r.family), static_cast<int>(r.mode),
                r.layer ? static_cast<long long>(*r.layer) : -1LL,
                r.head ? static_cast<long long>(*r.head) : -1LL};
    auto& a = rows[k];
    a.pair = r.pair_label();
    a.family = r.family;
    a.mode = r.mode;
    a.layer = r.layer;
    a.head = r.head;
    a.n += 1;
    a.mean_delta_r += r.delta_r;
    a.is_max_pct += r.is_max ? 1.0 : 0.0;
  }
  std::map<Key, std::pair<TargetAggregate, std::size_t>> across;
  std::vector<TargetAggregate> out;
  for (auto& [k, a] : rows) {
    a.mean_delta_r /= static_cast<double>(a.n);
    a.is_max_pct = 100.0 * a.is_max_pct / static_cast<double>(a.n);
    out.push_back(a);
    Key ak = k;
    std::get<0>(ak) = "*";
    auto& [sum, count] = across[ak];
    sum.pair = "*";
    sum.family = a.family;
    sum.mode = a.mode;
    sum.layer = a.layer;
    sum.head = a.head;
    sum.n += a.n;
    sum.mean_delta_r += a.mean_delta_r;
    sum.is_max_pct += a.is_max_pct;
    count += 1;
  }
  for (auto& [k, v] : across) {
    v.first.mean_delta_r /= static_cast<double>(v.second);
    v.first.is_max_pct /= static_cast<double>(v.second);
    out.push_back(v.first);
  }
  return out;
}

inline nlohmann::json to_json(const TargetAggregate& a) {
  return {{"pair", a.pair},
          {"family", to_string(a.family)},
          {"mode", to_string(a.mode)},
          {"layer", a.layer ? nlohmann::json(*a.layer) : nlohmann::json(nullptr)},
          {"head", a.head ? nlohmann::json(*a.head) : nlohmann::json(nullptr)},
          {"n", a.n},
          {"mean_delta_r", a.mean_delta_r},
          {"is_max_pct", a.is_max_pct}};
}

// ---------------------------------------------------------------------------
// JSONL persistence

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::usage, "cannot write " + path.string());
  f << text;
}

template <typename T>
std::string to_jsonl(const std::vector<T>& rows) {
  std::string out;
  for (const auto& r : rows) out += to_json(r).dump() + "\n";
  return out;
}

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::vector<nlohmann::json> out;
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::parse, "cannot open " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse, path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention profiles

struct AttentionPatchedRecord {
  std::string id1;
  std::string id2;
  std::string question_id;
  std::string patched_site;
  PositionScope scope = PositionScope::all;
  HeadId head;
  double vw_patched = 0.0;
  double vw_corrupt = 0.0;
  double vw_clean = 0.0;

  auto sort_key() const { return std::tuple{question_id, patched_site, head}; }
};

inline nlohmann::json to_json(const HeadAttentionProfile& p) {
  return {{"schema_version", kSchemaVersion},
          {"question_id", p.question_id},
          {"head", HeadId{p.layer, p.head}.label()},
          {"layer", p.layer},
          {"head_index", p.head},
          {"per_identity_vw", p.per_identity_vw},
          {"relative_vw", p.relative_vw}};
}

inline HeadAttentionProfile profile_from_json(const nlohmann::json& j) {
  HeadAttentionProfile p;
  p.question_id = j.at("question_id").get<std::string>();
  p.layer = j.at("layer").get<std::size_t>();
  p.head = j.at("head_index").get<std::size_t>();
  p.per_identity_vw = j.at("per_identity_vw").get<std::map<std::string, double>>();
  p.relative_vw = j.at("relative_vw").get<std::map<std::string, double>>();
  return p;
}

inline nlohmann::json to_json(const AttentionPatchedRecord& r) {
  return {{"schema_version", kSchemaVersion},
          {"id1", r.id1},
          {"id2", r.id2},
          {"question_id", r.question_id},
          {"patched_site", r.patched_site},
          {"positions", to_string(r.scope)},
          {"head", r.head.label()},
          {"layer", r.head.layer},
          {"head_index", r.head.head},
          {"vw_patched", r.vw_patched},
          {"vw_corrupt", r.vw_corrupt},
          {"vw_clean", r.vw_clean}};
}

/// The first `per_subject` questions of every subject, in corpus order.
inline std::vector<const QuestionRecord*> sample_per_subject(const std::vector<QuestionRecord>& qs,
                                                             std::size_t per_subject) {
  std::map<std::string, std::size_t> taken;
  std::vector<const QuestionRecord*> out;
  for (const auto& q : qs) {
    if (taken[q.subject]++ < per_subject) out.push_back(&q);
  }
  return out;
}

/// Profiles for each listed head over the sampled questions, across every
/// registered persona (the base identity is excluded).
inline std::vector<HeadAttentionProfile> run_attention_profiles(
    const Workspace& ws, const std::vector<const QuestionRecord*>& questions,
    const std::vector<HeadId>& heads, ValueNorm norm = ValueNorm::value) {
  const auto personas = ws.identities.personas();
  std::vector<std::vector<HeadAttentionProfile>> per_q(questions.size());
  parallel_for(questions.size(), ws.threads, [&](std::size_t i) {
    per_q[i] = build_head_profiles(ws.model, personas, *questions[i], ws.tmpl, *ws.tokenizer, heads, norm);
  });
  std::vector<HeadAttentionProfile> out;
  for (auto& v : per_q) {
    for (auto& p : v) out.push_back(std::move(p));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return std::tuple{a.question_id, a.layer, a.head} < std::tuple{b.question_id, b.layer, b.head};
  });
  return out;
}

/// For each MLP layer below a listed head, patches that layer's clean
/// mlp_out into the corrupt run and reads the heads' value-weighted attention
/// at the identity position.
inline std::vector<AttentionPatchedRecord> run_attention_patched(
    const Workspace& ws, const IdentityPairSpec& pair,
    const std::vector<const QuestionRecord*>& questions, const std::vector<HeadId>& heads,
    PositionScope scope, ValueNorm norm = ValueNorm::value) {
  const Identity& id1 = ws.identities.at(pair.id1);
  const Identity& id2 = ws.identities.at(pair.id2);
  std::vector<std::vector<AttentionPatchedRecord>> per_q(questions.size());
  parallel_for(questions.size(), ws.threads, [&](std::size_t qi) {
    const QuestionRecord& q = *questions[qi];
    const PromptPair pp = make_pair(id1, id2, q, ws.tmpl, *ws.tokenizer);
    std::set<HookSite> sites = lens_sites(heads);
    for (std::size_t l = 0; l < ws.model.config().n_layers; ++l) sites.insert(HookSite::mlp_out(l));
    const ActivationCache clean_cache = capture(ws.model, pp.clean_tokens, sites);
    const ActivationCache corrupt_cache = capture(ws.model, pp.corrupt_tokens, lens_sites(heads));
    const std::size_t last = pp.clean_tokens.size() - 1;
    for (std::size_t l = 0; l < ws.model.config().n_layers; ++l) {
      std::vector<HeadId> downstream;
      for (const auto& h : heads) {
        if (h.layer > l) downstream.push_back(h);
      }
      if (downstream.empty()) continue;
      const PatchSpec spec{HookSite::mlp_out(l), scope, {}, EffectMode::total};
      const auto vw = attention_after_patching(ws.model, pp, clean_cache,
                                               std::span<const PatchSpec>(&spec, 1), downstream, norm);
      for (const auto& h : downstream) {
        AttentionPatchedRecord r;
        r.id1 = id1.surface;
        r.id2 = id2.surface;
        r.question_id = q.id;
        r.patched_site = spec.site.name();
        r.scope = scope;
        r.head = h;
        r.vw_patched = vw.at(h);
        r.vw_corrupt = value_weighted_attention(corrupt_cache, h.layer, h.head, last,
                                                pp.identity_position, norm, &ws.model);
        r.vw_clean = value_weighted_attention(clean_cache, h.layer, h.head, last,
                                              pp.identity_position, norm, &ws.model);
        per_q[qi].push_back(r);
      }
    }
  });
  std::vector<AttentionPatchedRecord> out;
  for (auto& v : per_q) {
    for (auto& r : v) out.push_back(r);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.sort_key() < b.sort_key(); });
  return out;
}

inline HeadId parse_head_label(const std::string& s) {
  // H{layer}^{head}
  const auto caret = s.find('^');
  if (s.size() < 4 || s[0] != 'H' || caret == std::string::npos) {
    fail(ErrorKind::usage, "bad head label '" + s + "' (expected H<layer>^<head>)");
  }
  try {
    return {std::stoull(s.substr(1, caret - 1)), std::stoull(s.substr(caret + 1))};
  } catch (const std::exception&) {
    fail(ErrorKind::usage, "bad head label '" + s + "'");
  }
}

}  // namespace plab
