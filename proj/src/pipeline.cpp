#include "rflx/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <memory>
#include <set>
#include <sstream>

#include "rflx/detector.hpp"
#include "rflx/error.hpp"
#include "rflx/kernels.hpp"
#include "rflx/planted.hpp"
#include "rflx/probing.hpp"
#include "rflx/util.hpp"
#include "rflx/weights_io.hpp"

namespace rflx {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- config parsing ---------------------------------------------------------

namespace {

[[noreturn]] void config_error(const std::string& msg) { throw Error(Errc::InvalidConfig, msg); }

void allow_keys(const json& obj, const std::string& where, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) config_error(where + " must be an object");
  for (const auto& [k, v] : obj.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; })) {
      config_error("unknown key '" + k + "' in " + where);
    }
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    config_error(std::string("bad value for '") + key + "'");
  }
}

bool section_enabled(const json& root, const char* name) {
  if (!root.contains(name)) return false;
  return get_or(root.at(name), "enabled", true);
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

fs::path existing_file(const fs::path& base, const json& obj, const char* key) {
  if (!obj.contains(key)) config_error(std::string("missing '") + key + "'");
  const fs::path p = resolve(base, get_or(obj, key, std::string()));
  if (!fs::is_regular_file(p)) throw Error(Errc::UnreadablePath, "missing file " + p.string());
  return p;
}

std::string value_text(const json& v) {
  return v.is_string() ? v.get<std::string>() : v.dump();
}

std::string substitute(std::string s, const std::string& value) {
  for (std::size_t at = s.find("{n}"); at != std::string::npos; at = s.find("{n}", at + value.size())) {
    s.replace(at, 3, value);
  }
  return s;
}

std::vector<PromptItem> parse_items(const json& obj, const std::string& where) {
  std::vector<PromptItem> items;
  if (obj.contains("items")) {
    for (const json& it : obj.at("items")) {
      allow_keys(it, where + ".items[]", {"id", "question", "prefix"});
      PromptItem p;
      p.question = get_or(it, "question", std::string());
      p.prefix = get_or(it, "prefix", std::string());
      p.id = get_or(it, "id", where + "-" + std::to_string(items.size()));
      items.push_back(std::move(p));
    }
  }
  if (obj.contains("templates")) {
    for (const json& t : obj.at("templates")) {
      allow_keys(t, where + ".templates[]", {"id", "question", "prefix", "values"});
      const std::string id = get_or(t, "id", where + "-{n}");
      for (const json& v : t.at("values")) {
        const std::string n = value_text(v);
        items.push_back({substitute(id, n), substitute(get_or(t, "question", std::string()), n),
                         substitute(get_or(t, "prefix", std::string()), n)});
      }
    }
  }
  std::set<std::string> ids;
  for (const PromptItem& p : items) {
    if (!ids.insert(p.id).second) config_error("duplicate prompt id '" + p.id + "' in " + where);
  }
  return items;
}

Sampler parse_sampler(const json& obj) {
  try {
    return Sampler::parse(get_or(obj, "sampler", std::string("greedy")));
  } catch (const Error& e) {
    config_error(e.what());
  }
}

std::size_t parse_max_new(const json& obj, std::size_t cap) {
  const std::size_t n = get_or(obj, "max_new", cap);
  if (n == 0 || n > cap) config_error("max_new must be in [1, " + std::to_string(cap) + "]");
  return n;
}

EvalSpec parse_eval(const json& obj, const std::string& where, std::size_t cap) {
  if (!obj.contains("eval")) config_error(where + " needs an 'eval' section");
  const json& e = obj.at("eval");
  allow_keys(e, where + ".eval",
             {"items", "templates", "max_new", "window", "sampler", "think_token", "positions", "normalize"});
  EvalSpec s;
  s.items = parse_items(e, where);
  if (s.items.empty()) config_error(where + ".eval has no prompts");
  s.max_new = parse_max_new(e, cap);
  s.window = get_or(e, "window", std::size_t{100});
  if (s.window == 0) config_error(where + ".eval.window must be >= 1");
  s.sampler = parse_sampler(e);
  s.think_token = get_or(e, "think_token", false);
  const std::string positions = get_or(e, "positions", std::string("all"));
  if (positions != "all" && positions != "last_only") config_error("positions must be all or last_only");
  s.last_only = positions == "last_only";
  s.normalize = get_or(e, "normalize", false);
  return s;
}

CorpusSpec parse_corpus(const json& obj, const fs::path& base, const std::string& where,
                        std::size_t cap) {
  allow_keys(obj, where, {"enabled", "generate", "ingest"});
  CorpusSpec c;
  if (obj.contains("generate") == obj.contains("ingest")) {
    config_error(where + " needs exactly one of 'generate' or 'ingest'");
  }
  if (obj.contains("generate")) {
    const json& g = obj.at("generate");
    allow_keys(g, where + ".generate", {"items", "templates", "max_new", "sampler", "think_token"});
    c.kind = CorpusSpec::Kind::Generate;
    c.generate.items = parse_items(g, where);
    if (c.generate.items.empty()) config_error(where + ".generate has no prompts");
    c.generate.max_new = parse_max_new(g, cap);
    c.generate.sampler = parse_sampler(g);
    c.generate.think_token = get_or(g, "think_token", false);
  } else {
    const json& i = obj.at("ingest");
    allow_keys(i, where + ".ingest", {"path", "format"});
    c.kind = CorpusSpec::Kind::Ingest;
    c.path = existing_file(base, i, "path");
    c.format = parse_corpus_format(get_or(i, "format", std::string("jsonl-text")));
  }
  return c;
}

std::vector<std::uint32_t> parse_layers(const json& obj, const char* key) {
  return get_or(obj, key, std::vector<std::uint32_t>{});
}

}  // namespace

ExperimentConfig parse_experiment_config(std::string_view json_text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    config_error(std::string("config is not valid JSON: ") + e.what());
  }
  allow_keys(root, "config",
             {"seed", "vocab", "keywords", "output_dir", "max_new_cap", "model", "corpus", "detect",
              "collect", "extract", "probe", "sweep_alpha", "sweep_layer", "transfer", "project",
              "protocols"});
  ExperimentConfig c;
  if (!root.contains("seed")) config_error("config needs an explicit 'seed'");
  c.seed = get_or(root, "seed", std::uint64_t{0});
  c.vocab = existing_file(base_dir, root, "vocab");
  c.keywords = existing_file(base_dir, root, "keywords");
  c.output_dir = resolve(base_dir, get_or(root, "output_dir", std::string("out")));
  c.max_new_cap = get_or(root, "max_new_cap", std::size_t{32784});
  const std::size_t cap = c.max_new_cap;

  if (!root.contains("model")) config_error("config needs a 'model' section");
  {
    const json& m = root.at("model");
    allow_keys(m, "model", {"enabled", "path", "planted"});
    c.model.export_files = get_or(m, "enabled", true);
    if (m.contains("path") == m.contains("planted")) config_error("model needs exactly one of 'path' or 'planted'");
    if (m.contains("path")) {
      c.model.planted = false;
      c.model.path = existing_file(base_dir, m, "path");
    } else {
      const json& p = m.at("planted");
      allow_keys(p, "model.planted", {"n_layers", "hidden_dim", "n_heads", "max_seq_len", "mlp_hidden",
                                      "pos_dim", "trigger", "theta", "beta", "seed"});
      ModelConfig& mc = c.model.config;
      mc.n_layers = get_or(p, "n_layers", 6u);
      mc.hidden_dim = get_or(p, "hidden_dim", 32u);
      mc.n_heads = get_or(p, "n_heads", 4u);
      mc.max_seq_len = get_or(p, "max_seq_len", 128u);
      mc.mlp_hidden = get_or(p, "mlp_hidden", 64u);
      mc.pos_dim = get_or(p, "pos_dim", 8u);
      mc.layer_norm = 0;
      if (p.contains("trigger")) {
        const auto t = get_or(p, "trigger", std::vector<std::string>{});
        if (t.size() != 2) config_error("model.planted.trigger must list two tokens");
        c.model.trigger_first = t[0];
        c.model.trigger_second = t[1];
      }
      c.model.theta = get_or(p, "theta", 1.0);
      c.model.beta = get_or(p, "beta", 50.0);
      if (p.contains("seed")) c.model.seed = get_or(p, "seed", std::uint64_t{0});
    }
  }

  c.corpus_enabled = section_enabled(root, "corpus");
  if (root.contains("corpus")) c.corpus = parse_corpus(root.at("corpus"), base_dir, "corpus", cap);

  c.detect_enabled = section_enabled(root, "detect");
  if (root.contains("detect")) {
    allow_keys(root.at("detect"), "detect", {"enabled", "window"});
    c.window = get_or(root.at("detect"), "window", std::size_t{100});
    if (c.window == 0) config_error("detect.window must be >= 1");
  }
  c.collect_enabled = section_enabled(root, "collect");
  if (root.contains("collect")) {
    allow_keys(root.at("collect"), "collect", {"enabled", "layers"});
    c.collect_layers = parse_layers(root.at("collect"), "layers");
  }
  c.extract_enabled = section_enabled(root, "extract");
  if (root.contains("extract")) allow_keys(root.at("extract"), "extract", {"enabled"});

  c.probe_enabled = section_enabled(root, "probe");
  if (root.contains("probe")) {
    const json& p = root.at("probe");
    allow_keys(p, "probe", {"enabled", "cases", "questions", "max_new", "window", "sampler", "think_token"});
    if (c.probe_enabled) c.probe_cases = existing_file(base_dir, p, "cases");
    c.probe_questions = get_or(p, "questions", std::vector<std::string>{});
    c.probe_max_new = parse_max_new(p, cap);
    c.probe_window = get_or(p, "window", std::size_t{100});
    c.probe_sampler = parse_sampler(p);
    c.probe_think_token = get_or(p, "think_token", false);
  }

  c.sweep_alpha_enabled = section_enabled(root, "sweep_alpha");
  if (root.contains("sweep_alpha")) {
    const json& s = root.at("sweep_alpha");
    allow_keys(s, "sweep_alpha", {"enabled", "layer", "grid", "val_fraction", "eval"});
    if (s.contains("layer")) c.sweep_alpha_layer = get_or(s, "layer", 0u);
    c.alpha_grid = get_or(s, "grid", std::vector<double>{-0.2, -0.1, 0.0, 0.1, 0.2});
    c.val_fraction = get_or(s, "val_fraction", 0.0);
    if (!(c.val_fraction >= 0.0 && c.val_fraction < 1.0)) config_error("val_fraction must be in [0, 1)");
    c.sweep_alpha_eval = parse_eval(s, "sweep_alpha", cap);
  }
  c.sweep_layer_enabled = section_enabled(root, "sweep_layer");
  if (root.contains("sweep_layer")) {
    const json& s = root.at("sweep_layer");
    allow_keys(s, "sweep_layer", {"enabled", "alpha", "groups", "eval"});
    c.layer_sweep_alpha = get_or(s, "alpha", 0.01);
    c.layer_groups = get_or(s, "groups", std::vector<std::vector<std::uint32_t>>{});
    c.sweep_layer_eval = parse_eval(s, "sweep_layer", cap);
  }
  c.transfer_enabled = section_enabled(root, "transfer");
  if (root.contains("transfer")) {
    const json& t = root.at("transfer");
    allow_keys(t, "transfer", {"enabled", "corpus"});
    if (!t.contains("corpus")) config_error("transfer needs a 'corpus' section");
    c.transfer_corpus = parse_corpus(t.at("corpus"), base_dir, "transfer.corpus", cap);
  }
  c.project_enabled = section_enabled(root, "project");
  if (root.contains("project")) {
    allow_keys(root.at("project"), "project", {"enabled", "layers"});
    c.project_layers = parse_layers(root.at("project"), "layers");
  }
  c.protocols_enabled = section_enabled(root, "protocols");
  if (root.contains("protocols")) {
    const json& p = root.at("protocols");
    allow_keys(p, "protocols", {"enabled", "layer", "alpha_enhance", "alpha_suppress", "bf_waits",
                                "bf_segment_len", "eval"});
    if (p.contains("layer")) c.protocols_layer = get_or(p, "layer", 0u);
    c.alpha_enhance = get_or(p, "alpha_enhance", 0.1);
    c.alpha_suppress = get_or(p, "alpha_suppress", -0.1);
    c.bf_waits = get_or(p, "bf_waits", std::size_t{1});
    c.bf_segment_len = get_or(p, "bf_segment_len", std::size_t{8});
    if (c.bf_segment_len == 0) config_error("protocols.bf_segment_len must be >= 1");
    c.protocols_eval = parse_eval(p, "protocols", cap);
  }

  // Stage dependencies.
  auto need = [](bool stage, bool dep, const char* a, const char* b) {
    if (stage && !dep) config_error(std::string(a) + " requires " + b);
  };
  need(c.detect_enabled, c.corpus_enabled, "detect", "corpus");
  need(c.collect_enabled, c.detect_enabled, "collect", "detect");
  need(c.extract_enabled, c.collect_enabled, "extract", "collect");
  need(c.sweep_alpha_enabled, c.extract_enabled, "sweep_alpha", "extract");
  need(c.sweep_layer_enabled, c.collect_enabled, "sweep_layer", "collect");
  need(c.transfer_enabled, c.extract_enabled, "transfer", "extract");
  need(c.project_enabled, c.collect_enabled, "project", "collect");
  need(c.protocols_enabled, c.extract_enabled, "protocols", "extract");
  if (c.collect_enabled && c.corpus.kind == CorpusSpec::Kind::Ingest &&
      c.corpus.format != CorpusFormat::JsonlWithStates) {
    config_error("collect needs hidden states: ingested jsonl-text corpora carry none");
  }
  if (c.transfer_enabled && c.transfer_corpus.kind == CorpusSpec::Kind::Ingest &&
      c.transfer_corpus.format != CorpusFormat::JsonlWithStates) {
    config_error("transfer corpus needs hidden states: use jsonl-with-states or generate");
  }
  if (!c.model.planted) {
    if (c.sweep_alpha_enabled && !c.sweep_alpha_layer) config_error("sweep_alpha.layer required for a loaded model");
    if (c.protocols_enabled && !c.protocols_layer) config_error("protocols.layer required for a loaded model");
  }

  json canon = root;
  canon.erase("output_dir");
  c.canonical = canon.dump();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw Error(Errc::UnreadablePath, "cannot read " + path.string());
  ExperimentConfig c = parse_experiment_config(read_file(path), path.parent_path());
  c.source = path;
  return c;
}

std::string ExperimentConfig::hash() const { return sha256_hex(canonical); }

std::string model_id(const Model& model) {
  return sha256_hex(encode_weights(model.config(), model.weights())).substr(0, 16);
}

// ---- projection ---------------------------------------------------------------

ProjectionReport projection_report(const HiddenStateSets& sets, std::uint32_t layer) {
  const LayerSets& ls = sets.at(layer);
  std::vector<Vector> all = ls.reflect;
  all.insert(all.end(), ls.non_reflect.begin(), ls.non_reflect.end());
  std::vector<PointLabel> labels(ls.reflect.size(), PointLabel::Reflect);
  labels.resize(all.size(), PointLabel::NonReflect);

  ProjectionReport r;
  r.cloud = pca_project_2d(all, labels);
  r.fisher = fisher_separability(ls.reflect, ls.non_reflect);
  auto stats = [&](PointLabel which) {
    std::vector<double> xs;
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (labels[i] == which) xs.push_back(r.cloud.x[i]);
    }
    std::sort(xs.begin(), xs.end());
    const double mean = kernels::sum(xs) / static_cast<double>(xs.size());
    std::vector<double> sq;
    for (double x : xs) sq.push_back((x - mean) * (x - mean));
    std::sort(sq.begin(), sq.end());
    return std::pair{mean, kernels::sum(sq)};
  };
  const auto [m_pos, ss_pos] = stats(PointLabel::Reflect);
  const auto [m_neg, ss_neg] = stats(PointLabel::NonReflect);
  r.projected_gap = std::abs(m_pos - m_neg);
  const double dof = static_cast<double>(all.size()) - 2.0;
  r.pooled_std = dof > 0 ? std::sqrt((ss_pos + ss_neg) / dof) : 0.0;
  return r;
}

std::vector<fs::path> emit_projection_report(const HiddenStateSets& sets, std::uint32_t layer,
                                             std::uint32_t n_layers, const fs::path& dir) {
  if (layer >= n_layers) {
    config_error("projection layer " + std::to_string(layer) + " is outside the model");
  }
  if (!sets.layers.contains(layer)) {
    config_error("projection layer " + std::to_string(layer) + " was not collected");
  }
  const ProjectionReport r = projection_report(sets, layer);
  char stem[32];
  std::snprintf(stem, sizeof stem, "layer_%02u", layer);
  fs::create_directories(dir);
  std::ostringstream csv;
  csv << "x,y,label\n";
  for (std::size_t i = 0; i < r.cloud.x.size(); ++i) {
    csv << format_double(r.cloud.x[i]) << ',' << format_double(r.cloud.y[i]) << ','
        << (r.cloud.labels[i] == PointLabel::Reflect ? "reflect" : "non-reflect") << '\n';
  }
  json j;
  j["layer"] = layer;
  j["fisher_separability"] = r.fisher;
  j["explained_variance"] = {r.cloud.explained_variance[0], r.cloud.explained_variance[1]};
  j["projected_gap"] = r.projected_gap;
  j["pooled_within_std"] = r.pooled_std;
  j["gap_over_std"] = r.pooled_std > 0 ? json(r.projected_gap / r.pooled_std) : json(nullptr);
  j["degenerate"] = r.cloud.degenerate;
  j["n_reflect"] = sets.at(layer).reflect.size();
  j["n_nonreflect"] = sets.at(layer).non_reflect.size();
  const fs::path csv_path = dir / (std::string(stem) + ".csv");
  const fs::path json_path = dir / (std::string(stem) + ".json");
  write_file_atomic(csv_path, csv.str());
  write_file_atomic(json_path, j.dump(1) + "\n");
  return {csv_path, json_path};
}

// ---- manifest -------------------------------------------------------------------

std::string Manifest::to_json() const {
  json j;
  j["format"] = "rflx-manifest-1";
  j["config_hash"] = config_hash;
  j["completed_stages"] = completed_stages;
  json arts = json::array();
  for (const ManifestArtifact& a : artifacts) {
    arts.push_back({{"path", a.path}, {"sha256", a.sha256}, {"bytes", a.bytes}});
  }
  j["artifacts"] = std::move(arts);
  j["status"] = status;
  if (status != "ok") {
    j["failed_stage"] = failed_stage;
    j["error"] = error;
  }
  return j.dump(1) + "\n";
}

// ---- pipeline -------------------------------------------------------------------

namespace {

struct Run {
  const ExperimentConfig& cfg;
  Vocab vocab;
  KeywordSet keywords;
  std::unique_ptr<Model> model;
  std::optional<PlantedGroundTruth> truth;
  TraceCorpus corpus;
  CorpusDetection detection;
  std::optional<HiddenStateSets> sets;
  std::vector<SteeringVector> vectors;
  std::vector<fs::path> written;

  fs::path out(const std::string& rel) const { return cfg.output_dir / rel; }
  void write(const std::string& rel, std::string_view contents) {
    const fs::path p = out(rel);
    fs::create_directories(p.parent_path());
    write_file_atomic(p, contents);
    written.push_back(p);
  }

  std::uint32_t planted_layer(const std::optional<std::uint32_t>& chosen, const char* what) const {
    if (chosen) return *chosen;
    if (!truth) config_error(std::string(what) + " needs an explicit layer");
    return truth->trigger_layer;
  }

  TokenSeq prompt_for(const PromptItem& item, bool think) const {
    TokenSeq p = build_prompt(vocab, item.question, think);
    const TokenSeq pre = vocab.encode(item.prefix);
    p.insert(p.end(), pre.begin(), pre.end());
    return p;
  }

  std::vector<TokenSeq> prompts_for(const EvalSpec& spec) const {
    std::vector<TokenSeq> out;
    for (const PromptItem& item : spec.items) out.push_back(prompt_for(item, spec.think_token));
    return out;
  }

  EvalOptions eval_options(const EvalSpec& spec, std::uint64_t seed) const {
    EvalOptions o;
    o.max_new = spec.max_new;
    o.window = spec.window;
    o.sampler = spec.sampler;
    o.seed = seed;
    o.eos = vocab.special().eos;
    o.last_only = spec.last_only;
    o.normalize = spec.normalize;
    return o;
  }

  TraceCorpus build_corpus(const CorpusSpec& spec, std::uint64_t seed, const std::string& id,
                           std::vector<std::string>* rejects) const {
    if (spec.kind == CorpusSpec::Kind::Ingest) {
      IngestResult r = ingest_corpus(spec.path, spec.format, vocab);
      if (rejects) *rejects = r.rejects;
      return std::move(r.corpus);
    }
    TraceCorpus corpus;
    corpus.id = id;
    corpus.entries.resize(spec.generate.items.size());
    parallel_for(corpus.entries.size(), [&](std::size_t i) {
      const PromptItem& item = spec.generate.items[i];
      const TokenSeq prompt = prompt_for(item, spec.generate.think_token);
      GenerateOptions g;
      g.max_new = spec.generate.max_new;
      g.sampler = spec.generate.sampler;
      g.seed = derive_seed(seed, i);
      g.eos = vocab.special().eos;
      const GenerationTrace trace = generate(*model, prompt, {}, g);
      TraceEntry& e = corpus.entries[i];
      e.id = item.id;
      e.question = item.question;
      e.tokens = trace.all_tokens();
      e.prompt_len = prompt.size();
      e.source = TraceSource::Internal;
      finalize_entry(e, vocab);
    });
    return corpus;
  }

  HiddenStateSets collect_from(const TraceCorpus& corpus, const CorpusDetection& det) const {
    std::vector<std::uint32_t> layers = cfg.collect_layers;
    if (layers.empty()) {
      for (std::uint32_t l = 0; l < model->config().n_layers; ++l) layers.push_back(l);
    }
    SetProvenance prov{corpus.id, model_id(*model), detector_config_hash(keywords, cfg.window)};
    if (corpus.all_have_states()) {
      std::vector<StateDump> dumps;
      for (const TraceEntry& e : corpus.entries) dumps.push_back(*e.states);
      return collect_sets_from_dumps(dumps, det.traces, layers, std::move(prov));
    }
    return collect_sets(*model, corpus.token_seqs(), det.traces, layers, std::move(prov));
  }
};

std::string layer_file(const char* dir, std::uint32_t layer, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s/layer_%02u.%s", dir, layer, ext);
  return buf;
}

void stage_model(Run& r) {
  const ExperimentConfig& c = r.cfg;
  if (c.model.planted) {
    ModelConfig mc = c.model.config;
    mc.vocab_size = static_cast<std::uint32_t>(r.vocab.size());
    PlantedParams p;
    p.trigger_first = r.vocab.id(c.model.trigger_first);
    p.trigger_second = r.vocab.id(c.model.trigger_second);
    p.seed = c.model.seed.value_or(derive_seed(c.seed, "planted"));
    p.gate_threshold = c.model.theta;
    p.write_gain = c.model.beta;
    auto [weights, truth] = build_planted_model(mc, r.vocab, p);
    r.model = std::make_unique<Model>(mc, std::move(weights));
    r.truth = std::move(truth);
  } else {
    r.model = std::make_unique<Model>(load_model(c.model.path));
    if (r.model->config().vocab_size != r.vocab.size()) {
      throw Error(Errc::InvalidConfig, "model vocab size differs from the vocabulary");
    }
  }
  if (c.model.export_files) {
    r.write("model/model.rflxw", encode_weights(r.model->config(), r.model->weights()));
    if (r.truth) r.write("model/planted.json", r.truth->to_json() + "\n");
  }
}

void stage_corpus(Run& r) {
  std::vector<std::string> rejects;
  r.corpus = r.build_corpus(r.cfg.corpus, derive_seed(r.cfg.seed, "corpus"), "corpus", &rejects);
  r.write("corpus/corpus.jsonl", export_corpus(r.corpus));
  if (r.cfg.corpus.kind == CorpusSpec::Kind::Ingest) {
    json j{{"accepted", r.corpus.entries.size()}, {"rejected", rejects.size()}, {"rejects", rejects}};
    r.write("corpus/rejects.json", j.dump(1) + "\n");
  }
}

void stage_detect(Run& r) {
  r.detection = detect_corpus(r.vocab, r.corpus.token_seqs(), r.keywords, r.cfg.window);
  r.write("detect/detection.json", r.detection.to_json() + "\n");
}

void stage_collect(Run& r) {
  r.sets = r.collect_from(r.corpus, r.detection);
  for (const fs::path& p : r.sets->save(r.out("sets"))) r.written.push_back(p);
}

std::vector<SteeringVector> extract_all(Run& r, const HiddenStateSets& sets, const char* dir) {
  std::vector<SteeringVector> out;
  for (const auto& [layer, ls] : sets.layers) {
    out.push_back(extract_vector(sets, layer));
    r.write(layer_file(dir, layer, "json"), out.back().to_json());
  }
  return out;
}

void stage_extract(Run& r) { r.vectors = extract_all(r, *r.sets, "vectors"); }

void stage_probe(Run& r) {
  const ProbeLoadResult loaded = load_probe_cases(r.cfg.probe_cases, r.vocab, r.keywords);
  ProbeOptions o;
  o.max_new = r.cfg.probe_max_new;
  o.success_window = r.cfg.probe_window;
  o.sampler = r.cfg.probe_sampler;
  o.seed = derive_seed(r.cfg.seed, "probe");
  o.think_token = r.cfg.probe_think_token;
  o.eos = r.vocab.special().eos;
  std::vector<std::string> questions = r.cfg.probe_questions;
  if (questions.empty()) {
    for (const ProbeCase& pc : loaded.cases) questions.push_back(pc.question);
  }
  const ProbeResult probe = run_probe(*r.model, r.vocab, loaded.cases, r.keywords, o);
  const ProbeResult base = baseline_frequency(*r.model, r.vocab, questions, r.keywords, o);
  json j;
  j["probe"] = json::parse(probe.to_json(o, "probe"));
  j["baseline"] = json::parse(base.to_json(o, "baseline"));
  j["uplift"] = probe.frequency - base.frequency;
  j["rejects"] = loaded.rejects;
  std::size_t text_level = 0;
  for (const ProbeCase& pc : loaded.cases) text_level += pc.text_level_graft ? 1 : 0;
  j["text_level_grafts"] = text_level;
  r.write("probe/probe.json", j.dump(1) + "\n");
}

const SteeringVector& vector_at(const Run& r, std::uint32_t layer) {
  for (const SteeringVector& sv : r.vectors) {
    if (sv.layer == layer) return sv;
  }
  throw Error(Errc::LayerVectorMismatch, "no steering vector for layer " + std::to_string(layer));
}

void stage_sweep_alpha(Run& r) {
  const ExperimentConfig& c = r.cfg;
  const SteeringVector& sv = vector_at(r, r.planted_layer(c.sweep_alpha_layer, "sweep_alpha"));
  const std::uint64_t seed = derive_seed(c.seed, "sweep_alpha");
  const EvalOptions o = r.eval_options(c.sweep_alpha_eval, seed);
  std::vector<TokenSeq> prompts = r.prompts_for(c.sweep_alpha_eval);

  if (c.val_fraction > 0.0) {
    // Shuffled split: the first ceil(f * n) prompts of the permutation validate.
    Rng rng(derive_seed(c.seed, "val_split"));
    for (std::size_t i = prompts.size(); i > 1; --i) {
      std::swap(prompts[i - 1], prompts[rng.next_u64() % i]);
    }
    const auto n_val = static_cast<std::size_t>(std::ceil(c.val_fraction * static_cast<double>(prompts.size())));
    if (n_val == 0 || n_val >= prompts.size()) config_error("val_fraction leaves an empty split");
    const std::vector<TokenSeq> val(prompts.begin(), prompts.begin() + static_cast<std::ptrdiff_t>(n_val));
    prompts.erase(prompts.begin(), prompts.begin() + static_cast<std::ptrdiff_t>(n_val));
    const SweepResult vr = alpha_sweep(*r.model, r.vocab, sv, c.alpha_grid, val, r.keywords, o);
    r.write("sweeps/alpha_val.csv", vr.to_csv());
    r.write("sweeps/alpha_val.json", vr.to_json(o));
  }
  const SweepResult res = alpha_sweep(*r.model, r.vocab, sv, c.alpha_grid, prompts, r.keywords, o);
  r.write("sweeps/alpha.csv", res.to_csv());
  r.write("sweeps/alpha.json", res.to_json(o));
}

void stage_sweep_layer(Run& r) {
  const ExperimentConfig& c = r.cfg;
  const EvalOptions o = r.eval_options(c.sweep_layer_eval, derive_seed(c.seed, "sweep_layer"));
  const SweepResult res = layer_sweep(*r.model, r.vocab, *r.sets, c.layer_sweep_alpha,
                                      r.prompts_for(c.sweep_layer_eval), r.keywords, o, c.layer_groups);
  r.write("sweeps/layer.csv", res.to_csv());
  r.write("sweeps/layer.json", res.to_json(o));
}

void stage_transfer(Run& r) {
  const TraceCorpus other =
      r.build_corpus(r.cfg.transfer_corpus, derive_seed(r.cfg.seed, "transfer"), "transfer", nullptr);
  r.write("transfer/corpus.jsonl", export_corpus(other));
  const CorpusDetection det = detect_corpus(r.vocab, other.token_seqs(), r.keywords, r.cfg.window);
  const HiddenStateSets sets = r.collect_from(other, det);
  const std::vector<SteeringVector> vb = extract_all(r, sets, "transfer/vectors");
  const std::vector<Vector> waits = wait_variant_embeddings(r.vocab, r.model->weights().token_embedding);
  r.write("transfer/transfer.json", transfer_to_json(transfer_analysis(r.vectors, vb, waits)));
}

void stage_project(Run& r) {
  for (std::uint32_t layer : r.cfg.project_layers) {
    for (const fs::path& p :
         emit_projection_report(*r.sets, layer, r.model->config().n_layers, r.out("projection"))) {
      r.written.push_back(p);
    }
  }
}

void stage_protocols(Run& r) {
  const ExperimentConfig& c = r.cfg;
  const std::uint32_t layer = r.planted_layer(c.protocols_layer, "protocols");
  const SteeringVector& sv = vector_at(r, layer);
  const std::uint64_t seed = derive_seed(c.seed, "protocols");
  const EvalOptions o = r.eval_options(c.protocols_eval, seed);
  const std::vector<TokenSeq> prompts = r.prompts_for(c.protocols_eval);
  const std::span<const SteeringVector> one(&sv, 1);

  struct Row {
    std::string name;
    double freq;
    double len;
  };
  std::vector<Row> rows;
  const EvalMetrics vanilla = evaluate_config(*r.model, r.vocab, prompts, {}, one, r.keywords, o);
  rows.push_back({"vanilla", vanilla.reflection_frequency, vanilla.mean_len});

  const TokenId wait = r.truth ? r.truth->wait_token : r.vocab.id(" wait");
  std::vector<std::size_t> lens(prompts.size());
  std::vector<char> hits(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    BudgetOptions b;
    b.sampler = o.sampler;
    b.seed = derive_seed(seed, i);
    b.n_waits = c.bf_waits;
    b.segment_len = c.bf_segment_len;
    b.wait_token = wait;
    b.eos = o.eos;
    const GenerationTrace t = budget_forcing(*r.model, prompts[i], b);
    lens[i] = t.generated_tokens.size();
    hits[i] = first_marker_in_window(r.vocab, t.all_tokens(), r.keywords, t.prompt_tokens.size(), o.window)
                  .has_value();
  });
  double bf_len = 0.0, bf_hits = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    bf_len += static_cast<double>(lens[i]);
    bf_hits += hits[i];
  }
  const double n = static_cast<double>(prompts.size());
  rows.push_back({"budget_forcing", bf_hits / n, bf_len / n});

  for (const auto& [name, alpha] : {std::pair{"reflection_enhanced", c.alpha_enhance},
                                    std::pair{"reflection_suppressed", c.alpha_suppress}}) {
    InterventionConfig ic;
    ic.entries = {{layer, alpha}};
    const EvalMetrics m = evaluate_config(*r.model, r.vocab, prompts, ic, one, r.keywords, o);
    rows.push_back({name, m.reflection_frequency, m.mean_len});
  }
  std::ostringstream csv;
  csv << "protocol,reflection_frequency,mean_len\n";
  json j;
  j["layer"] = layer;
  j["alpha_enhance"] = c.alpha_enhance;
  j["alpha_suppress"] = c.alpha_suppress;
  j["bf_waits"] = c.bf_waits;
  j["bf_segment_len"] = c.bf_segment_len;
  json jr = json::array();
  for (const Row& row : rows) {
    csv << row.name << ',' << format_double(row.freq) << ',' << format_double(row.len) << '\n';
    jr.push_back({{"protocol", row.name}, {"reflection_frequency", row.freq}, {"mean_len", row.len}});
  }
  j["rows"] = std::move(jr);
  r.write("protocols/protocols.csv", csv.str());
  r.write("protocols/protocols.json", j.dump(1) + "\n");
}

}  // namespace

Manifest run_pipeline(const ExperimentConfig& config) {
  Run r{config, Vocab::load(config.vocab), KeywordSet::load(config.keywords), {}, {}, {}, {}, {}, {}, {}};
  Manifest m;
  m.config_hash = config.hash();
  fs::create_directories(config.output_dir);

  const std::vector<std::pair<const char*, bool>> plan = {
      {"model", true},
      {"corpus", config.corpus_enabled},
      {"detect", config.detect_enabled},
      {"collect", config.collect_enabled},
      {"extract", config.extract_enabled},
      {"probe", config.probe_enabled},
      {"sweep_alpha", config.sweep_alpha_enabled},
      {"sweep_layer", config.sweep_layer_enabled},
      {"transfer", config.transfer_enabled},
      {"project", config.project_enabled},
      {"protocols", config.protocols_enabled},
  };
  const std::vector<void (*)(Run&)> fns = {stage_model,       stage_corpus,      stage_detect,
                                           stage_collect,     stage_extract,     stage_probe,
                                           stage_sweep_alpha, stage_sweep_layer, stage_transfer,
                                           stage_project,     stage_protocols};
  for (std::size_t s = 0; s < plan.size(); ++s) {
    if (!plan[s].second) continue;
    try {
      fns[s](r);
      const bool model_stage = s == 0;
      if (!model_stage || config.model.export_files) m.completed_stages.push_back(plan[s].first);
    } catch (const std::exception& e) {
      m.status = "failed";
      m.failed_stage = plan[s].first;
      m.error = e.what();
      const auto* err = dynamic_cast<const Error*>(&e);
      m.error_code = err ? static_cast<int>(err->code()) : static_cast<int>(Errc::StageFailure);
      break;
    }
  }

  std::sort(r.written.begin(), r.written.end());
  r.written.erase(std::unique(r.written.begin(), r.written.end()), r.written.end());
  for (const fs::path& p : r.written) {
    m.artifacts.push_back({fs::relative(p, config.output_dir).generic_string(), sha256_file(p),
                           fs::file_size(p)});
  }
  write_file_atomic(config.output_dir / "manifest.json", m.to_json());
  return m;
}

}  // namespace rflx
