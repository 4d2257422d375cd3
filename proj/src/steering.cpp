#include "rflx/steering.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <set>
#include <sstream>

#include "rflx/error.hpp"
#include "rflx/kernels.hpp"
#include "rflx/probing.hpp"
#include "rflx/util.hpp"

namespace rflx {

// ---- hidden-state sets ----------------------------------------------------

const LayerSets& HiddenStateSets::at(std::uint32_t layer) const {
  const auto it = layers.find(layer);
  if (it == layers.end()) {
    throw Error(Errc::MissingSnapshots, "no hidden states collected at layer " + std::to_string(layer));
  }
  return it->second;
}

namespace {

StateDump pack(const std::map<std::uint32_t, LayerSets>& layers, bool reflect) {
  StateDump dump;
  dump.layer_count = static_cast<std::uint32_t>(layers.size());
  for (const auto& [layer, sets] : layers) {
    const std::vector<Vector>& vs = reflect ? sets.reflect : sets.non_reflect;
    if (layer == layers.begin()->first) {
      dump.n_positions = static_cast<std::uint32_t>(vs.size());
      dump.dim = vs.empty() ? 0 : static_cast<std::uint32_t>(vs.front().dim());
    }
    if (vs.size() != dump.n_positions) {
      throw Error(Errc::DimensionMismatch, "set sizes differ across layers");
    }
    for (const Vector& v : vs) dump.data.insert(dump.data.end(), v.begin(), v.end());
  }
  return dump;
}

}  // namespace

std::vector<std::filesystem::path> HiddenStateSets::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["format"] = "rflx-sets-1";
  std::vector<std::uint32_t> ids;
  for (const auto& [layer, sets] : layers) ids.push_back(layer);
  j["layers"] = ids;
  j["n_reflect"] = layers.empty() ? 0 : layers.begin()->second.reflect.size();
  j["n_nonreflect"] = layers.empty() ? 0 : layers.begin()->second.non_reflect.size();
  j["provenance"] = {{"corpus", provenance.corpus_id},
                     {"model_id", provenance.model_id},
                     {"detector_hash", provenance.detector_hash}};
  const std::vector<std::filesystem::path> files = {dir / "reflect.rflxh", dir / "non_reflect.rflxh",
                                                    dir / "sets.json"};
  save_states(files[0], pack(layers, true));
  save_states(files[1], pack(layers, false));
  write_file_atomic(files[2], j.dump(1) + "\n");
  return files;
}

HiddenStateSets HiddenStateSets::load(const std::filesystem::path& dir) {
  HiddenStateSets sets;
  std::vector<std::uint32_t> ids;
  try {
    const nlohmann::json j = nlohmann::json::parse(read_file(dir / "sets.json"));
    if (j.at("format") != "rflx-sets-1") throw Error(Errc::InvalidFormat, "not an rflx-sets-1 file");
    ids = j.at("layers").get<std::vector<std::uint32_t>>();
    sets.provenance.corpus_id = j.at("provenance").at("corpus").get<std::string>();
    sets.provenance.model_id = j.at("provenance").at("model_id").get<std::string>();
    sets.provenance.detector_hash = j.at("provenance").at("detector_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidFormat, std::string("sets.json: ") + e.what());
  }
  const StateDump pos = load_states(dir / "reflect.rflxh");
  const StateDump neg = load_states(dir / "non_reflect.rflxh");
  if (pos.layer_count != ids.size() || neg.layer_count != ids.size()) {
    throw Error(Errc::InvalidFormat, "set dumps disagree with sets.json");
  }
  for (std::size_t l = 0; l < ids.size(); ++l) {
    LayerSets& ls = sets.layers[ids[l]];
    for (std::size_t p = 0; p < pos.n_positions; ++p) ls.reflect.emplace_back(pos.at(l, p));
    for (std::size_t p = 0; p < neg.n_positions; ++p) ls.non_reflect.emplace_back(neg.at(l, p));
  }
  return sets;
}

namespace {

void require_nonempty(const HiddenStateSets& sets) {
  std::size_t pos = 0, neg = 0;
  for (const auto& [layer, ls] : sets.layers) {
    pos += ls.reflect.size();
    neg += ls.non_reflect.size();
  }
  if (pos == 0) throw Error(Errc::EmptyPositiveSet, "corpus has no reflection-inducing positions");
  if (neg == 0) throw Error(Errc::EmptyNegativeSet, "corpus has no non-reflection-inducing positions");
}

}  // namespace

HiddenStateSets collect_sets(const Model& model, std::span<const TokenSeq> traces,
                             std::span<const DetectionResult> detections,
                             std::span<const std::uint32_t> layers, SetProvenance provenance) {
  if (traces.size() != detections.size()) {
    throw Error(Errc::DimensionMismatch, "one detection result per trace required");
  }
  for (std::uint32_t l : layers) {
    if (l >= model.config().n_layers) {
      throw Error(Errc::MissingSnapshots, "layer " + std::to_string(l) + " is not in the model");
    }
  }
  std::vector<StateDump> dumps(traces.size());
  parallel_for(traces.size(), [&](std::size_t t) {
    if (detections[t].inducing.empty() && detections[t].negatives.empty()) return;
    ForwardOptions fo;
    fo.last_logits_only = true;
    for (std::uint32_t l = 0; l < model.config().n_layers; ++l) fo.capture.emplace_back(l, Stage::PostMlp);
    const ForwardResult fr = model.forward(traces[t], {}, fo);
    StateDump& d = dumps[t];
    d.layer_count = model.config().n_layers;
    d.n_positions = static_cast<std::uint32_t>(traces[t].size());
    d.dim = model.config().hidden_dim;
    d.data.resize(static_cast<std::size_t>(d.layer_count) * d.n_positions * d.dim);
    for (const ResidualSnapshot& s : fr.snapshots) {
      std::copy(s.state.begin(), s.state.end(),
                d.data.begin() + static_cast<std::ptrdiff_t>(
                                     (static_cast<std::size_t>(s.layer) * d.n_positions + s.position) * d.dim));
    }
  });
  return collect_sets_from_dumps(dumps, detections, layers, std::move(provenance));
}

HiddenStateSets collect_sets_from_dumps(std::span<const StateDump> dumps,
                                        std::span<const DetectionResult> detections,
                                        std::span<const std::uint32_t> layers,
                                        SetProvenance provenance) {
  if (dumps.size() != detections.size()) {
    throw Error(Errc::DimensionMismatch, "one detection result per state dump required");
  }
  HiddenStateSets sets;
  sets.provenance = std::move(provenance);
  for (std::uint32_t l : layers) sets.layers[l];
  for (std::size_t t = 0; t < dumps.size(); ++t) {
    const DetectionResult& det = detections[t];
    if (det.inducing.empty() && det.negatives.empty()) continue;
    const StateDump& d = dumps[t];
    for (std::uint32_t l : layers) {
      if (l >= d.layer_count) {
        throw Error(Errc::MissingSnapshots, "trace " + std::to_string(t) + " has no states at layer " +
                                                std::to_string(l));
      }
      LayerSets& ls = sets.layers[l];
      auto take = [&](std::size_t p, std::vector<Vector>& into) {
        if (p >= d.n_positions) {
          throw Error(Errc::MissingSnapshots, "trace " + std::to_string(t) + " has no state at position " +
                                                  std::to_string(p));
        }
        into.emplace_back(d.at(l, p));
      };
      for (std::size_t p : det.inducing) take(p, ls.reflect);
      for (std::size_t p : det.negatives) take(p, ls.non_reflect);
    }
  }
  require_nonempty(sets);
  return sets;
}

// ---- vectors ----------------------------------------------------------------

std::string SteeringVector::to_json() const {
  nlohmann::json j;
  j["format"] = "rflx-sv-1";
  j["model_id"] = model_id;
  j["layer"] = layer;
  j["dim"] = v.dim();
  std::vector<std::string> values;
  for (double x : v) values.push_back(format_double(x));
  j["values"] = values;
  j["norm"] = format_double(norm);
  j["provenance"] = {{"corpus", corpus},
                     {"n_reflect", n_reflect},
                     {"n_nonreflect", n_nonreflect},
                     {"detector_hash", detector_hash}};
  return j.dump(1) + "\n";
}

SteeringVector SteeringVector::from_json(std::string_view text) {
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    if (j.at("format") != "rflx-sv-1") throw Error(Errc::InvalidFormat, "not an rflx-sv-1 vector");
    SteeringVector sv;
    sv.model_id = j.at("model_id").get<std::string>();
    sv.layer = j.at("layer").get<std::uint32_t>();
    std::vector<double> values;
    for (const auto& s : j.at("values")) values.push_back(parse_double(s.get<std::string>()));
    if (values.size() != j.at("dim").get<std::size_t>()) {
      throw Error(Errc::InvalidFormat, "vector length differs from dim");
    }
    sv.v = Vector(std::move(values));
    check_finite(sv.v.values(), "steering vector");
    sv.norm = parse_double(j.at("norm").get<std::string>());
    const auto& p = j.at("provenance");
    sv.corpus = p.at("corpus").get<std::string>();
    sv.n_reflect = p.at("n_reflect").get<std::size_t>();
    sv.n_nonreflect = p.at("n_nonreflect").get<std::size_t>();
    sv.detector_hash = p.at("detector_hash").get<std::string>();
    return sv;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidFormat, std::string("steering vector: ") + e.what());
  }
}

SteeringVector SteeringVector::load(const std::filesystem::path& path) {
  return from_json(read_file(path));
}

SteeringVector extract_vector(const HiddenStateSets& sets, std::uint32_t layer) {
  const LayerSets& ls = sets.at(layer);
  if (ls.reflect.empty() || ls.non_reflect.empty()) {
    throw Error(Errc::EmptySet, "both sets must be non-empty at layer " + std::to_string(layer));
  }
  SteeringVector sv;
  sv.layer = layer;
  sv.v = sub(mean_vector(ls.reflect), mean_vector(ls.non_reflect));
  sv.norm = norm(sv.v);
  sv.model_id = sets.provenance.model_id;
  sv.corpus = sets.provenance.corpus_id;
  sv.n_reflect = ls.reflect.size();
  sv.n_nonreflect = ls.non_reflect.size();
  sv.detector_hash = sets.provenance.detector_hash;
  return sv;
}

// ---- intervention -----------------------------------------------------------

HookSpec make_intervention_hook(const SteeringVector& sv, double alpha, PositionSelector positions,
                                bool normalize) {
  if (!std::isfinite(alpha)) throw Error(Errc::InvalidConfig, "alpha must be finite");
  if (!sv.usable()) throw Error(Errc::ZeroVector, "steering vector has zero norm");
  Vector v = normalize ? scale(sv.v, 1.0 / sv.norm) : sv.v;
  if (alpha == 0.0) {
    return HookSpec::write(sv.layer, [](const Vector& h) { return h; }, std::move(positions));
  }
  return HookSpec::write(
      sv.layer,
      [v = std::move(v), alpha](const Vector& h) {
        const double c = alpha * dot(h, v);
        Vector out = h;
        for (std::size_t i = 0; i < out.dim(); ++i) out[i] = h[i] + c * v[i];
        return out;
      },
      std::move(positions));
}

void InterventionConfig::validate() const {
  std::set<std::uint32_t> seen;
  for (const InterventionEntry& e : entries) {
    if (!seen.insert(e.layer).second) {
      throw Error(Errc::InvalidConfig, "layer " + std::to_string(e.layer) + " listed twice");
    }
    if (!std::isfinite(e.alpha)) throw Error(Errc::InvalidConfig, "alpha must be finite");
    if (std::abs(e.alpha) > alpha_max) {
      throw Error(Errc::InvalidConfig, "|alpha| exceeds " + format_double(alpha_max));
    }
  }
}

std::string InterventionConfig::to_json() const {
  nlohmann::json j;
  nlohmann::json es = nlohmann::json::array();
  for (const InterventionEntry& e : entries) es.push_back({{"layer", e.layer}, {"alpha", format_double(e.alpha)}});
  j["entries"] = std::move(es);
  j["positions"] = last_only ? "last_only" : "all";
  j["normalize"] = normalize;
  j["alpha_max"] = format_double(alpha_max);
  return j.dump();
}

std::string InterventionConfig::hash() const { return sha256_hex(to_json()).substr(0, 16); }

namespace {

std::vector<HookSpec> build_hooks(const InterventionConfig& config,
                                  std::span<const SteeringVector> vectors) {
  config.validate();
  std::vector<HookSpec> hooks;
  for (const InterventionEntry& e : config.entries) {
    const auto it = std::find_if(vectors.begin(), vectors.end(),
                                 [&](const SteeringVector& sv) { return sv.layer == e.layer; });
    if (it == vectors.end()) {
      throw Error(Errc::LayerVectorMismatch, "no steering vector for layer " + std::to_string(e.layer));
    }
    hooks.push_back(make_intervention_hook(
        *it, e.alpha, config.last_only ? PositionSelector::last_only() : PositionSelector::all(),
        config.normalize));
  }
  return hooks;
}

}  // namespace

GenerationTrace steer_generate(const Model& model, std::span<const TokenId> prompt,
                               const InterventionConfig& config,
                               std::span<const SteeringVector> vectors,
                               const GenerateOptions& options) {
  const std::vector<HookSpec> hooks = build_hooks(config, vectors);
  GenerationTrace trace = generate(model, prompt, hooks, options);
  if (!config.entries.empty()) trace.intervention_hash = config.hash();
  return trace;
}

// ---- sweeps -----------------------------------------------------------------

namespace {

struct Job {
  const InterventionConfig* config;
  std::span<const SteeringVector> vectors;
};

std::vector<EvalMetrics> evaluate_many(const Model& model, const Vocab& vocab,
                                       std::span<const TokenSeq> prompts, std::span<const Job> jobs,
                                       const KeywordSet& keywords, const EvalOptions& options,
                                       std::vector<std::string>* errors) {
  if (prompts.empty()) throw Error(Errc::EmptyBatch, "no evaluation prompts");
  const std::size_t n = prompts.size();
  std::vector<std::vector<HookSpec>> hooks(jobs.size());
  std::vector<std::string> job_errors(jobs.size());
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    try {
      InterventionConfig c = *jobs[j].config;
      c.last_only = options.last_only;
      c.normalize = options.normalize;
      hooks[j] = build_hooks(c, jobs[j].vectors);
    } catch (const Error& e) {
      if (!errors) throw;
      job_errors[j] = e.what();
    }
  }
  struct Cell {
    bool reflected = false;
    std::size_t len = 0;
    std::uint64_t digest = 0;
    std::string error;
  };
  std::vector<Cell> cells(jobs.size() * n);
  parallel_for(cells.size(), [&](std::size_t idx) {
    const std::size_t j = idx / n;
    const std::size_t i = idx % n;
    if (!job_errors[j].empty()) return;
    Cell& cell = cells[idx];
    try {
      GenerateOptions g;
      g.max_new = options.max_new;
      g.sampler = options.sampler;
      g.seed = derive_seed(options.seed, i);
      g.eos = options.eos;
      const GenerationTrace trace = generate(model, prompts[i], hooks[j], g);
      cell.len = trace.generated_tokens.size();
      const TokenSeq all = trace.all_tokens();
      cell.reflected = first_marker_in_window(vocab, all, keywords, trace.prompt_tokens.size(),
                                              options.window)
                           .has_value();
      std::uint64_t h = fnv1a64(std::as_bytes(std::span(trace.generated_tokens)));
      h = fnv1a64(std::as_bytes(std::span(trace.logits_hashes)), h);
      cell.digest = h;
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  });
  std::vector<EvalMetrics> out(jobs.size());
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    if (!job_errors[j].empty()) {
      (*errors)[j] = job_errors[j];
      continue;
    }
    EvalMetrics& m = out[j];
    std::size_t hits = 0, total_len = 0;
    std::uint64_t digest = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
      const Cell& c = cells[j * n + i];
      if (!c.error.empty()) {
        if (!errors) throw Error(Errc::StageFailure, c.error);
        (*errors)[j] = c.error;
        break;
      }
      m.reflected.push_back(c.reflected);
      hits += c.reflected ? 1 : 0;
      total_len += c.len;
      digest = fnv1a64(std::as_bytes(std::span(&c.digest, 1)), digest);
    }
    m.reflection_frequency = static_cast<double>(hits) / static_cast<double>(n);
    m.mean_len = static_cast<double>(total_len) / static_cast<double>(n);
    m.digest = digest;
  }
  return out;
}

}  // namespace

EvalMetrics evaluate_config(const Model& model, const Vocab& vocab,
                            std::span<const TokenSeq> prompts, const InterventionConfig& config,
                            std::span<const SteeringVector> vectors, const KeywordSet& keywords,
                            const EvalOptions& options) {
  const Job job{&config, vectors};
  return evaluate_many(model, vocab, prompts, std::span(&job, 1), keywords, options, nullptr).front();
}

SweepResult alpha_sweep(const Model& model, const Vocab& vocab, const SteeringVector& vector,
                        std::span<const double> grid, std::span<const TokenSeq> prompts,
                        const KeywordSet& keywords, const EvalOptions& options) {
  std::vector<double> alphas(grid.begin(), grid.end());
  std::sort(alphas.begin(), alphas.end());
  alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());
  if (std::find(alphas.begin(), alphas.end(), 0.0) == alphas.end()) {
    throw Error(Errc::InvalidConfig, "alpha grid must contain 0");
  }
  for (double a : alphas) {
    if (!std::isfinite(a) || std::abs(a) > 1.0) {
      throw Error(Errc::InvalidConfig, "alpha grid values must lie in [-1, 1]");
    }
  }
  std::vector<InterventionConfig> configs(alphas.size() + 1);  // last one is vanilla
  for (std::size_t p = 0; p < alphas.size(); ++p) configs[p].entries = {{vector.layer, alphas[p]}};
  std::vector<Job> jobs;
  for (const InterventionConfig& c : configs) jobs.push_back({&c, std::span(&vector, 1)});
  std::vector<std::string> errors(jobs.size());
  std::vector<EvalMetrics> metrics =
      evaluate_many(model, vocab, prompts, jobs, keywords, options, &errors);
  if (!errors.back().empty()) throw Error(Errc::StageFailure, "vanilla evaluation failed: " + errors.back());

  SweepResult r;
  r.axis = "alpha";
  r.seed = options.seed;
  r.fixed_layer = vector.layer;
  r.vanilla = metrics.back();
  for (std::size_t p = 0; p < alphas.size(); ++p) {
    SweepPoint pt;
    pt.value = alphas[p];
    pt.label = format_double(alphas[p]);
    pt.layers = {vector.layer};
    pt.metrics = std::move(metrics[p]);
    pt.error = errors[p];
    if (alphas[p] == 0.0 && (pt.metrics.digest != r.vanilla.digest || !pt.error.empty())) {
      throw Error(Errc::StageFailure, "alpha = 0 row differs from vanilla generation");
    }
    r.points.push_back(std::move(pt));
  }
  return r;
}

SweepResult layer_sweep(const Model& model, const Vocab& vocab, const HiddenStateSets& sets,
                        double alpha, std::span<const TokenSeq> prompts,
                        const KeywordSet& keywords, const EvalOptions& options,
                        std::span<const std::vector<std::uint32_t>> groups) {
  const std::uint32_t L = model.config().n_layers;
  std::vector<SteeringVector> vectors;
  std::vector<std::string> extract_errors(L);
  for (std::uint32_t l = 0; l < L; ++l) {
    SteeringVector sv = extract_vector(sets, l);
    if (!sv.usable()) extract_errors[l] = "zero steering vector";
    vectors.push_back(std::move(sv));
  }
  std::vector<std::vector<std::uint32_t>> rows;
  for (std::uint32_t l = 0; l < L; ++l) rows.push_back({l});
  for (const auto& g : groups) {
    for (std::uint32_t l : g) {
      if (l >= L) throw Error(Errc::InvalidConfig, "group layer " + std::to_string(l) + " out of range");
    }
    rows.push_back(g);
  }
  std::vector<InterventionConfig> configs(rows.size() + 1);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::uint32_t l : rows[r]) configs[r].entries.push_back({l, alpha});
  }
  std::vector<Job> jobs;
  for (const InterventionConfig& c : configs) jobs.push_back({&c, vectors});
  std::vector<std::string> errors(jobs.size());
  std::vector<EvalMetrics> metrics =
      evaluate_many(model, vocab, prompts, jobs, keywords, options, &errors);
  if (!errors.back().empty()) throw Error(Errc::StageFailure, "vanilla evaluation failed: " + errors.back());

  SweepResult res;
  res.axis = "layer";
  res.seed = options.seed;
  res.fixed_alpha = alpha;
  res.vanilla = metrics.back();
  double best = -1.0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    SweepPoint pt;
    pt.layers = rows[r];
    pt.value = static_cast<double>(rows[r].empty() ? 0 : rows[r].front());
    for (std::size_t i = 0; i < rows[r].size(); ++i) {
      pt.label += (i ? "+" : "") + std::to_string(rows[r][i]);
    }
    pt.metrics = std::move(metrics[r]);
    pt.error = errors[r];
    if (pt.error.empty()) {
      const double effect = std::abs(pt.metrics.reflection_frequency - res.vanilla.reflection_frequency);
      if (effect > best) {
        best = effect;
        res.peak = r;
      }
    }
    res.points.push_back(std::move(pt));
  }
  return res;
}

std::string SweepResult::to_csv() const {
  std::ostringstream out;
  out << "axis,point,reflection_frequency,mean_len,seed\n";
  for (const SweepPoint& p : points) {
    out << axis << ',' << p.label << ',';
    if (p.error.empty()) {
      out << format_double(p.metrics.reflection_frequency) << ',' << format_double(p.metrics.mean_len);
    } else {
      out << "nan,nan";
    }
    out << ',' << seed << '\n';
  }
  return out.str();
}

std::string SweepResult::to_json(const EvalOptions& options) const {
  nlohmann::json j;
  j["axis"] = axis;
  j["seed"] = seed;
  j["config"] = {{"max_new", options.max_new},
                 {"window", options.window},
                 {"sampler", options.sampler.describe()},
                 {"positions", options.last_only ? "last_only" : "all"},
                 {"normalize", options.normalize}};
  if (axis == "alpha") j["layer"] = fixed_layer;
  if (axis == "layer") j["alpha"] = fixed_alpha;
  j["vanilla"] = {{"reflection_frequency", vanilla.reflection_frequency},
                  {"mean_len", vanilla.mean_len}};
  nlohmann::json pts = nlohmann::json::array();
  for (const SweepPoint& p : points) {
    nlohmann::json e = {{"point", p.label}, {"layers", p.layers}};
    if (p.error.empty()) {
      e["reflection_frequency"] = p.metrics.reflection_frequency;
      e["mean_len"] = p.metrics.mean_len;
    } else {
      e["error"] = p.error;
    }
    pts.push_back(std::move(e));
  }
  j["points"] = std::move(pts);
  if (peak) j["peak"] = points[*peak].label;
  return j.dump(1) + "\n";
}

// ---- transfer ---------------------------------------------------------------

std::vector<TransferRow> transfer_analysis(std::span<const SteeringVector> vectors_a,
                                           std::span<const SteeringVector> vectors_b,
                                           std::span<const Vector> wait_embeddings) {
  std::vector<TransferRow> rows;
  if (vectors_a.size() != vectors_b.size()) {
    throw Error(Errc::DimensionMismatch, "vector lists cover different layer sets");
  }
  for (const SteeringVector& a : vectors_a) {
    const auto it = std::find_if(vectors_b.begin(), vectors_b.end(),
                                 [&](const SteeringVector& b) { return b.layer == a.layer; });
    if (it == vectors_b.end()) {
      throw Error(Errc::DimensionMismatch, "layer " + std::to_string(a.layer) + " missing from second list");
    }
    TransferRow row;
    row.layer = a.layer;
    row.cross_cosine = cosine(a.v, it->v);
    for (const Vector& e : wait_embeddings) row.wait_cosines.push_back(cosine(a.v, e));
    if (!row.wait_cosines.empty()) {
      const double n = static_cast<double>(row.wait_cosines.size());
      std::vector<double> sorted = row.wait_cosines;
      std::sort(sorted.begin(), sorted.end());
      row.wait_cos_mean = kernels::sum(sorted) / n;
      std::vector<double> sq;
      for (double c : sorted) sq.push_back((c - row.wait_cos_mean) * (c - row.wait_cos_mean));
      std::sort(sq.begin(), sq.end());
      row.wait_cos_var = kernels::sum(sq) / n;
    }
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [](const TransferRow& x, const TransferRow& y) { return x.layer < y.layer; });
  return rows;
}

std::string transfer_to_json(std::span<const TransferRow> rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const TransferRow& r : rows) {
    j.push_back({{"layer", r.layer},
                 {"cross_cosine", r.cross_cosine},
                 {"wait_cos_mean", r.wait_cos_mean},
                 {"wait_cos_var", r.wait_cos_var},
                 {"wait_cosines", r.wait_cosines}});
  }
  return nlohmann::json{{"layers", j}}.dump(1) + "\n";
}

// ---- budget forcing ---------------------------------------------------------

GenerationTrace budget_forcing(const Model& model, std::span<const TokenId> prompt,
                               const BudgetOptions& options) {
  if (prompt.empty()) throw Error(Errc::SequenceTooLong, "prompt must be non-empty");
  if (options.segment_len == 0) throw Error(Errc::InvalidConfig, "segment_len must be >= 1");
  GenerationTrace trace;
  trace.prompt_tokens.assign(prompt.begin(), prompt.end());
  trace.sampler = options.sampler.describe();
  trace.seed = options.seed;
  Rng rng(options.seed);
  TokenSeq tokens = trace.prompt_tokens;
  const bool stop = options.eos.has_value();
  for (std::size_t seg = 0; seg <= options.n_waits; ++seg) {
    bool hit_eos = false;
    extend(model, tokens, options.segment_len, {}, options.sampler, rng, stop,
           options.eos.value_or(0), &trace.logits_hashes, &hit_eos, &trace.context_full);
    if (seg == options.n_waits || trace.context_full) {
      trace.stopped_at_eos = hit_eos;
      break;
    }
    if (hit_eos) tokens.pop_back();
    if (tokens.size() >= model.config().max_seq_len) {
      trace.context_full = true;
      break;
    }
    tokens.push_back(options.wait_token);
    trace.forced_positions.push_back(tokens.size() - 1 - prompt.size());
  }
  trace.generated_tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(prompt.size()), tokens.end());
  return trace;
}

}  // namespace rflx
