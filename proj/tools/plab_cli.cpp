// plab: persona activation-patching workbench.
//
// Exit codes: 0 success, 2 usage, 3 parse, 4 model/load, 5 empty result.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "plab/plab.hpp"

#ifndef PLAB_DATA_DIR
#define PLAB_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using namespace plab;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitParse = 3;
constexpr int kExitModel = 4;
constexpr int kExitEmpty = 5;

struct GlobalArgs {
  std::string model;
  std::string corpus = std::string(PLAB_DATA_DIR) + "/toy/corpus";
  std::string identities = std::string(PLAB_DATA_DIR) + "/toy/identities.json";
  std::string pairs = std::string(PLAB_DATA_DIR) + "/toy/pairs.json";
  std::string tmpl = std::string(PLAB_DATA_DIR) + "/toy/template.txt";
  std::string tokenizer;
  std::string out = "plab_out";
  std::uint64_t seed = 7;
  std::size_t threads = 1;

  std::string model_path() const { return model.empty() ? (fs::path(out) / "toy_model.plab").string() : model; }
};

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage: return kExitUsage;
    case ErrorKind::parse:
    case ErrorKind::template_text:
    case ErrorKind::identity:
    case ErrorKind::tokenization:
    case ErrorKind::pairing:
    case ErrorKind::input: return kExitParse;
    case ErrorKind::load:
    case ErrorKind::model:
    case ErrorKind::config:
    case ErrorKind::shape: return kExitModel;
    default: return 1;
  }
}

nlohmann::json read_json_file(const std::string& path) {
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::parse, path + ": " + e.what());
  }
}

struct Inputs {
  std::vector<QuestionRecord> questions;
  IdentityRegistry identities;
  std::vector<IdentityPairSpec> pairs;
  PromptTemplate tmpl{"{helper}{identity_1}{identity_2}{question}{option_A}{option_B}{option_C}{option_D}"};
};

Inputs load_inputs(const GlobalArgs& g) {
  Inputs in;
  in.questions = load_questions(g.corpus);
  in.identities = IdentityRegistry::from_json(read_json_file(g.identities));
  in.pairs = pairs_from_json(read_json_file(g.pairs));
  in.tmpl = PromptTemplate(read_text_file(g.tmpl));
  for (const auto& p : in.pairs) {
    in.identities.at(p.id1);
    in.identities.at(p.id2);
  }
  return in;
}

Workspace load_workspace(const GlobalArgs& g) {
  Inputs in = load_inputs(g);
  Workspace ws;
  ws.model = load_model(g.model_path());
  if (!g.tokenizer.empty()) {
    ws.tokenizer = std::make_shared<BpeTokenizer>(BpeTokenizer::load(g.tokenizer));
  } else if (ws.model.metadata().contains("tokenizer")) {
    ws.tokenizer = tokenizer_from_json(ws.model.metadata()["tokenizer"]);
  } else {
    fail(ErrorKind::usage, "model carries no tokenizer; pass --tokenizer <tokenizer.json>");
  }
  if (ws.tokenizer->vocab_size() > ws.model.config().vocab_size) {
    fail(ErrorKind::model, "tokenizer vocabulary exceeds the model's vocab_size");
  }
  in.identities.validate(*ws.tokenizer);
  ws.identities = std::move(in.identities);
  ws.pairs = std::move(in.pairs);
  ws.tmpl = std::move(in.tmpl);
  ws.questions = std::move(in.questions);
  ws.threads = std::max<std::size_t>(1, g.threads);
  return ws;
}

std::vector<std::string> split_list(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  for (const auto& item : items) {
    std::size_t start = 0;
    while (start <= item.size()) {
      const auto comma = item.find(',', start);
      const auto piece = item.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (!piece.empty()) out.push_back(piece);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  return out;
}

std::vector<IdentityPairSpec> selected_pairs(const Workspace& ws, const std::vector<std::string>& pair_args) {
  if (pair_args.empty()) return ws.pairs;
  std::vector<IdentityPairSpec> out;
  for (const auto& a : pair_args) {
    const auto comma = a.find(',');
    if (comma == std::string::npos) fail(ErrorKind::usage, "--pair expects ID1,ID2, got '" + a + "'");
    IdentityPairSpec p{a.substr(0, comma), a.substr(comma + 1)};
    ws.identities.at(p.id1);
    ws.identities.at(p.id2);
    out.push_back(p);
  }
  return out;
}

std::vector<HeadId> all_heads(const ModelConfig& c) {
  std::vector<HeadId> out;
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (std::size_t h = 0; h < c.n_heads; ++h) out.push_back({l, h});
  return out;
}

/// Heads from explicit labels, or the top positive/negative heads of a
/// summary.json produced by a `heads` sweep, or every head.
std::vector<HeadId> resolve_heads(const Workspace& ws, const std::vector<std::string>& labels,
                                  const std::string& from_summary, std::size_t k_pos, std::size_t k_neg) {
  std::vector<HeadId> heads;
  if (!labels.empty()) {
    for (const auto& l : split_list(labels)) heads.push_back(parse_head_label(l));
  } else if (!from_summary.empty()) {
    const auto summary = read_json_file(from_summary);
    std::map<HeadId, double> effect;
    for (const auto& row : summary.at("targets")) {
      if (row.at("pair") != "*" || row.at("family") != "heads" || row.at("mode") != "total") continue;
      effect[{row.at("layer").get<std::size_t>(), row.at("head").get<std::size_t>()}] =
          row.at("mean_delta_r").get<double>();
    }
    auto [pos, neg] = select_heads(effect, k_pos, k_neg);
    heads = pos;
    heads.insert(heads.end(), neg.begin(), neg.end());
  } else {
    heads = all_heads(ws.model.config());
  }
  const auto& c = ws.model.config();
  for (const auto& h : heads) HookSite::head_out(h.layer, h.head).validate(c.n_layers, c.n_heads);
  std::sort(heads.begin(), heads.end());
  heads.erase(std::unique(heads.begin(), heads.end()), heads.end());
  return heads;
}

ValueNorm value_norm_from_string(const std::string& s) {
  if (s == "value") return ValueNorm::value;
  if (s == "output_projected") return ValueNorm::output_projected;
  fail(ErrorKind::usage, "unknown value norm '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"plab: persona activation-patching workbench"};
  app.require_subcommand(1);
  GlobalArgs g;
  app.add_option("--model", g.model, "Model container (default <out>/toy_model.plab)");
  app.add_option("--corpus", g.corpus, "Question corpus: .csv, .jsonl, or a directory of .csv")->capture_default_str();
  app.add_option("--identities", g.identities, "Identities JSON")->capture_default_str();
  app.add_option("--pairs", g.pairs, "Identity pairs JSON")->capture_default_str();
  app.add_option("--template", g.tmpl, "Prompt template")->capture_default_str();
  app.add_option("--tokenizer", g.tokenizer, "tokenizer.json for models without an embedded vocabulary");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--seed", g.seed, "Seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads")->capture_default_str();

  // make-toy-model
  auto* toy = app.add_subcommand("make-toy-model", "Generate the seeded toy model with an embedded word vocabulary");
  ToyModelOptions toy_opts;
  std::vector<std::size_t> disabled_attn;
  toy->add_option("--layers", toy_opts.n_layers)->capture_default_str();
  toy->add_option("--d-model", toy_opts.d_model)->capture_default_str();
  toy->add_option("--heads", toy_opts.n_heads)->capture_default_str();
  toy->add_option("--kv-heads", toy_opts.n_kv_heads)->capture_default_str();
  toy->add_option("--d-ff", toy_opts.d_ff)->capture_default_str();
  toy->add_option("--disable-attention", disabled_attn, "Layers whose attention output is zeroed");

  // eval
  auto* eval = app.add_subcommand("eval", "Score every identity on every question");
  EvalOptions eval_opts;
  eval->add_flag("--renormalize", eval_opts.renormalize, "Softmax over the four options only");
  eval->add_flag("--welch", eval_opts.welch, "Welch t-tests instead of paired");

  // partition
  auto* part = app.add_subcommand("partition", "Split questions into S1-S4 for each pair");
  std::vector<std::string> part_pairs;
  part->add_option("--pair", part_pairs, "ID1,ID2 (repeatable; default: pairs file)");

  // patch-sweep
  auto* sweep = app.add_subcommand("patch-sweep", "Activation patching over layers, heads or identity positions");
  std::vector<std::string> sweep_pairs, sweep_targets{"mlp_layers,mha_layers"}, sweep_modes{"total"};
  std::string sweep_subset = "S3";
  sweep->add_option("--pair", sweep_pairs, "ID1,ID2 (repeatable; default: pairs file)");
  sweep->add_option("--targets", sweep_targets,
                    "mlp_layers, mha_layers, heads, mlp_identity_position, full_restore")->capture_default_str();
  sweep->add_option("--modes", sweep_modes, "total, direct")->capture_default_str();
  sweep->add_option("--subset", sweep_subset, "S1..S4 or all")->capture_default_str();

  // attn-profile
  auto* profile = app.add_subcommand("attn-profile", "Value-weighted attention at the identity position");
  std::vector<std::string> profile_heads;
  std::string heads_from;
  std::size_t per_subject = 5, k_pos = 8, k_neg = 4;
  double margin = 0.05;
  std::string aggregate = "majority", value_norm = "value";
  profile->add_option("--heads", profile_heads, "Head labels H<layer>^<head>");
  profile->add_option("--heads-from", heads_from, "summary.json of a heads sweep");
  profile->add_option("--k-pos", k_pos)->capture_default_str();
  profile->add_option("--k-neg", k_neg)->capture_default_str();
  profile->add_option("--per-subject", per_subject)->capture_default_str();
  profile->add_option("--margin", margin)->capture_default_str();
  profile->add_option("--aggregate", aggregate, "majority or mean")->capture_default_str();
  profile->add_option("--value-norm", value_norm, "value or output_projected")->capture_default_str();

  // attn-patched
  auto* patched = app.add_subcommand("attn-patched", "Value-weighted attention after MLP-layer patching");
  std::string patched_pair = "good,Asian", patched_positions = "all";
  std::vector<std::string> patched_heads;
  std::string patched_heads_from;
  std::size_t patched_per_subject = 1;
  patched->add_option("--pair", patched_pair, "ID1,ID2 (clean, corrupt)")->capture_default_str();
  patched->add_option("--heads", patched_heads, "Head labels H<layer>^<head>");
  patched->add_option("--heads-from", patched_heads_from, "summary.json of a heads sweep");
  patched->add_option("--positions", patched_positions, "all or identity_only")->capture_default_str();
  patched->add_option("--per-subject", patched_per_subject)->capture_default_str();
  patched->add_option("--value-norm", value_norm, "value or output_projected")->capture_default_str();

  // figures
  auto* figures = app.add_subcommand("figures", "Render SVG figures from results in --out");
  std::vector<std::string> figure_kinds;
  figures->add_option("--kind", figure_kinds, "layer_heatmap, head_grid, identity_bars, attention_bars");

  // convert-corpus
  auto* convert = app.add_subcommand("convert-corpus", "Convert a corpus between CSV and JSONL");
  std::string convert_to = "jsonl", convert_output;
  convert->add_option("--to", convert_to, "jsonl or csv")->capture_default_str();
  convert->add_option("--output", convert_output, "Output file (jsonl) or directory (csv)")->required();

  // export-csv
  auto* export_csv = app.add_subcommand("export-csv", "Write patch_records.jsonl as CSV");

  // logits
  auto* logits = app.add_subcommand("logits", "Print next-token logits for a token-id sequence as JSON");
  std::vector<std::uint32_t> logit_tokens;
  bool logits_all = false;
  logits->add_option("--tokens", logit_tokens, "Token ids")->delimiter(',')->required();
  logits->add_flag("--all-positions", logits_all, "One row per position instead of the last only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    const fs::path out(g.out);

    if (*toy) {
      Inputs in = load_inputs(g);
      const WordTokenizer tok = build_word_tokenizer(in.questions, in.identities, in.tmpl);
      toy_opts.vocab_size = tok.vocab_size();
      toy_opts.attention_disabled_layers.insert(disabled_attn.begin(), disabled_attn.end());
      toy_opts.metadata["tokenizer"] = tok.to_json();
      const Model model = make_toy_model(g.seed, toy_opts);
      const fs::path path = g.model_path();
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      save_model(model, path.string());
      std::printf("wrote %s (%zu layers, d_model %zu, vocab %zu, fingerprint %s)\n", path.string().c_str(),
                  model.config().n_layers, model.config().d_model, model.config().vocab_size,
                  hex64(model.fingerprint()).c_str());
      return 0;
    }

    if (*convert) {
      const auto qs = load_questions(g.corpus);
      if (convert_to == "jsonl") {
        write_text_file(convert_output, questions_to_jsonl(qs));
      } else if (convert_to == "csv") {
        write_questions_csv_dir(qs, convert_output);
      } else {
        fail(ErrorKind::usage, "--to must be jsonl or csv");
      }
      std::printf("converted %zu questions\n", qs.size());
      return 0;
    }

    if (*export_csv) {
      std::string csv = "id1,id2,question_id,family,site,layer,head,positions,mode,delta_r,is_max\n";
      for (const auto& j : read_jsonl(out / "patch_records.jsonl")) {
        const auto r = metric_record_from_json(j);
        char dr[64];
        std::snprintf(dr, sizeof dr, "%.17g", r.delta_r);
        csv += r.id1 + "," + r.id2 + "," + r.question_id + "," + to_string(r.family) + "," + r.site + "," +
               (r.layer ? std::to_string(*r.layer) : "") + "," + (r.head ? std::to_string(*r.head) : "") + "," +
               to_string(r.scope) + "," + to_string(r.mode) + "," + dr + "," + (r.is_max ? "1" : "0") + "\n";
      }
      write_text_file(out / "patch_records.csv", csv);
      return 0;
    }

    if (*logits) {
      const Model model = load_model(g.model_path());
      for (auto id : logit_tokens) {
        if (id >= model.config().vocab_size) fail(ErrorKind::input, "token id " + std::to_string(id) + " out of range");
      }
      ForwardOptions fo;
      fo.all_logits = logits_all;
      const auto result = model.forward(logit_tokens, fo);
      nlohmann::json rows = nlohmann::json::array();
      for (std::size_t t = 0; t < result.logits.rows(); ++t) {
        const auto row = result.logits.row(t);
        rows.push_back(std::vector<float>(row.begin(), row.end()));
      }
      std::printf("%s\n", nlohmann::json{{"fingerprint", hex64(model.fingerprint())}, {"logits", rows}}.dump().c_str());
      return 0;
    }

    if (*figures) {
      if (figure_kinds.empty()) figure_kinds = {"layer_heatmap", "head_grid", "identity_bars", "attention_bars"};
      const fs::path dir = out / "figures";
      std::vector<MetricRecord> records;
      if (fs::exists(out / "patch_records.jsonl")) {
        for (const auto& j : read_jsonl(out / "patch_records.jsonl")) records.push_back(metric_record_from_json(j));
      }
      for (const auto& kind_name : split_list(figure_kinds)) {
        switch (figure_kind_from_string(kind_name)) {
          case FigureKind::layer_heatmap:
            write_text_file(dir / "layer_heatmap_delta_r.svg", svg::render_heatmap(layer_heatmap(records, "delta_r")));
            write_text_file(dir / "layer_heatmap_is_max.svg", svg::render_heatmap(layer_heatmap(records, "is_max")));
            break;
          case FigureKind::head_grid:
            write_text_file(dir / "head_grid.svg", svg::render_heatmap(head_grid(records)));
            break;
          case FigureKind::identity_bars: {
            nlohmann::json summary;
            if (fs::exists(out / "eval_summary.json")) summary = read_json_file((out / "eval_summary.json").string());
            write_text_file(dir / "identity_bars.svg", svg::render_bars(identity_bars(summary)));
            break;
          }
          case FigureKind::attention_bars: {
            std::vector<HeadAttentionProfile> profiles;
            if (fs::exists(out / "profiles.jsonl")) {
              for (const auto& j : read_jsonl(out / "profiles.jsonl")) profiles.push_back(profile_from_json(j));
            }
            write_text_file(dir / "attention_bars.svg", svg::render_bars(attention_bars(profiles)));
            std::vector<nlohmann::json> rows;
            if (fs::exists(out / "attn_patched.jsonl")) rows = read_jsonl(out / "attn_patched.jsonl");
            write_text_file(dir / "attention_patched_bars.svg", svg::render_bars(attention_patched_bars(rows)));
            break;
          }
        }
      }
      std::printf("figures written to %s\n", dir.string().c_str());
      return 0;
    }

    const Workspace ws = load_workspace(g);

    if (*eval) {
      const auto& ids = ws.identities.all();
      const auto records = evaluate_identities(ws, ids, eval_opts);
      const auto summary = summarize_eval(records, ids, eval_opts);
      write_text_file(out / "eval.jsonl", to_jsonl(records));
      write_text_file(out / "eval_summary.json", to_json(summary, ws.model.fingerprint(), eval_opts).dump(2) + "\n");
      std::printf("eval: %zu identities x %zu questions\n", ids.size(), ws.questions.size());
      return 0;
    }

    if (*part) {
      nlohmann::json doc = {{"schema_version", kSchemaVersion}, {"scoring", kScoringNote}, {"pairs", nlohmann::json::object()}};
      for (const auto& p : selected_pairs(ws, part_pairs)) {
        const auto records = evaluate_identities(ws, {ws.identities.at(p.id1), ws.identities.at(p.id2)});
        const auto partition = partition_subsets(correctness(records, p.id1), correctness(records, p.id2));
        doc["pairs"][p.label()] = to_json(partition);
        std::printf("%-24s S1=%zu S2=%zu S3=%zu S4=%zu\n", p.label().c_str(), partition.s1.size(),
                    partition.s2.size(), partition.s3.size(), partition.s4.size());
      }
      write_text_file(out / "partition.json", doc.dump(2) + "\n");
      return 0;
    }

    if (*sweep) {
      SweepOptions so;
      so.families.clear();
      for (const auto& t : split_list(sweep_targets)) so.families.push_back(target_family_from_string(t));
      so.modes.clear();
      for (const auto& m : split_list(sweep_modes)) {
        if (m == "total") so.modes.push_back(EffectMode::total);
        else if (m == "direct") so.modes.push_back(EffectMode::direct);
        else fail(ErrorKind::usage, "unknown mode '" + m + "'");
      }
      so.subset = subset_from_string(sweep_subset);

      const fs::path records_path = out / "patch_records.jsonl";
      const std::string fingerprint = hex64(ws.model.fingerprint());
      std::vector<MetricRecord> all;
      std::set<CellKey> done;
      if (fs::exists(records_path)) {
        for (const auto& j : read_jsonl(records_path)) {
          auto r = metric_record_from_json(j);
          if (r.model_fingerprint != fingerprint) continue;
          done.insert(cell_key(r));
          all.push_back(std::move(r));
        }
      }
      const std::size_t resumed = all.size();
      std::size_t fresh = 0;
      for (const auto& p : selected_pairs(ws, sweep_pairs)) {
        auto records = run_patching_sweep(ws, p, so, done);
        fresh += records.size();
        for (auto& r : records) all.push_back(std::move(r));
      }
      std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.sort_key() < b.sort_key(); });
      write_text_file(records_path, to_jsonl(all));
      nlohmann::json targets = nlohmann::json::array();
      for (const auto& a : aggregate_records(all)) targets.push_back(to_json(a));
      const nlohmann::json summary = {{"schema_version", kSchemaVersion},
                                      {"model_fingerprint", fingerprint},
                                      {"subset", to_string(so.subset)},
                                      {"metadata", {{"mha_convention", kMhaConvention}, {"scoring", kScoringNote}}},
                                      {"records", all.size()},
                                      {"targets", targets}};
      write_text_file(out / "summary.json", summary.dump(2) + "\n");
      std::printf("patch-sweep: %zu new records, %zu resumed\n", fresh, resumed);
      if (all.empty()) {
        std::fprintf(stderr, "warning: no questions in subset %s for the selected pairs\n", to_string(so.subset));
        return kExitEmpty;
      }
      return 0;
    }

    if (*profile) {
      const auto heads = resolve_heads(ws, profile_heads, heads_from, k_pos, k_neg);
      const auto questions = sample_per_subject(ws.questions, per_subject);
      const auto profiles = run_attention_profiles(ws, questions, heads, value_norm_from_string(value_norm));
      write_text_file(out / "profiles.jsonl", to_jsonl(profiles));
      if (aggregate != "mean" && aggregate != "majority") fail(ErrorKind::usage, "--aggregate must be majority or mean");
      const auto agg = aggregate == "mean" ? CategoryAggregation::mean : CategoryAggregation::majority;
      const auto cats = categorize_heads(profiles, ws.identities.categories(), margin, agg);
      nlohmann::json heads_json = nlohmann::json::object();
      for (const auto& [h, set] : cats) {
        std::vector<std::string> names;
        for (auto c : set) names.push_back(to_string(c));
        heads_json[h.label()] = names;
      }
      const nlohmann::json doc = {{"schema_version", kSchemaVersion},
                                  {"margin", margin},
                                  {"aggregation", aggregate},
                                  {"value_norm", value_norm},
                                  {"destination", "final prompt position"},
                                  {"questions", questions.size()},
                                  {"heads", heads_json}};
      write_text_file(out / "head_categories.json", doc.dump(2) + "\n");
      std::printf("attn-profile: %zu heads x %zu questions\n", heads.size(), questions.size());
      return 0;
    }

    if (*patched) {
      const auto pairs = selected_pairs(ws, {patched_pair});
      const auto heads = resolve_heads(ws, patched_heads, patched_heads_from, k_pos, k_neg);
      PositionScope scope;
      if (patched_positions == "all") scope = PositionScope::all;
      else if (patched_positions == "identity_only") scope = PositionScope::identity_only;
      else fail(ErrorKind::usage, "--positions must be all or identity_only");
      const auto questions = sample_per_subject(ws.questions, patched_per_subject);
      const auto rows = run_attention_patched(ws, pairs.front(), questions, heads, scope,
                                              value_norm_from_string(value_norm));
      write_text_file(out / "attn_patched.jsonl", to_jsonl(rows));
      std::printf("attn-patched: %zu records\n", rows.size());
      if (rows.empty()) return kExitEmpty;
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "plab: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "plab: %s\n", e.what());
    return 1;
  }
  return 0;
}
