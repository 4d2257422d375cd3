// Command-line front end. Exit codes: 0 success, 2 config error, 3 data
// error, 4 stage failure.
#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "rflx/corpus.hpp"
#include "rflx/detector.hpp"
#include "rflx/error.hpp"
#include "rflx/kernels.hpp"
#include "rflx/pipeline.hpp"
#include "rflx/planted.hpp"
#include "rflx/probing.hpp"
#include "rflx/steering.hpp"
#include "rflx/util.hpp"
#include "rflx/weights_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rflx;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitStage = 4;

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::InvalidConfig:
    case Errc::ConfigTooSmall:
    case Errc::InvalidKeywordSet:
      return kExitConfig;
    case Errc::StageFailure:
      return kExitStage;
    default:
      return kExitData;
  }
}

struct Common {
  std::string vocab = std::string(RFLX_ASSET_DIR) + "/vocab.json";
  std::string keywords = std::string(RFLX_ASSET_DIR) + "/keywords.json";
  std::string simd = "auto";
};

void add_common(CLI::App* sub, Common& c, bool with_keywords) {
  sub->add_option("--vocab", c.vocab, "Vocabulary JSON")->capture_default_str();
  if (with_keywords) sub->add_option("--keywords", c.keywords, "Reflection keyword JSON")->capture_default_str();
}

std::vector<std::uint32_t> parse_layer_list(const std::string& s) {
  std::vector<std::uint32_t> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    try {
      out.push_back(static_cast<std::uint32_t>(std::stoul(item)));
    } catch (const std::exception&) {
      throw Error(Errc::InvalidConfig, "bad layer '" + item + "'");
    }
  }
  return out;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(parse_double(item));
  }
  return out;
}

std::vector<PromptItem> read_prompt_items(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::UnreadablePath, "cannot read " + path.string());
  std::vector<PromptItem> items;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      items.push_back({j.value("id", "p" + std::to_string(items.size())), j.value("question", ""),
                       j.value("prefix", "")});
    } catch (const json::exception& e) {
      throw Error(Errc::InvalidFormat, path.string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  if (items.empty()) throw Error(Errc::EmptyBatch, "no prompts in " + path.string());
  return items;
}

TokenSeq prompt_tokens(const Vocab& vocab, const PromptItem& item, bool think) {
  TokenSeq p = build_prompt(vocab, item.question, think);
  const TokenSeq pre = vocab.encode(item.prefix);
  p.insert(p.end(), pre.begin(), pre.end());
  return p;
}

std::string trace_json(const Vocab& vocab, const GenerationTrace& t) {
  json j;
  j["prompt_tokens"] = t.prompt_tokens;
  j["generated_tokens"] = t.generated_tokens;
  j["prompt_text"] = vocab.decode(t.prompt_tokens);
  j["generated_text"] = vocab.decode(t.generated_tokens);
  std::vector<std::string> hashes;
  for (std::uint64_t h : t.logits_hashes) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    hashes.emplace_back(buf);
  }
  j["logits_hashes"] = hashes;
  j["sampler"] = t.sampler;
  j["seed"] = t.seed;
  j["stopped_at_eos"] = t.stopped_at_eos;
  j["context_full"] = t.context_full;
  if (!t.forced_positions.empty()) j["forced_positions"] = t.forced_positions;
  if (!t.intervention_hash.empty()) j["intervention_hash"] = t.intervention_hash;
  return j.dump(1) + "\n";
}

void emit(const std::string& out, const std::string& contents) {
  if (out.empty() || out == "-") {
    std::cout << contents;
  } else {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    write_file_atomic(out, contents);
  }
}

std::vector<SteeringVector> load_vectors(const std::vector<std::string>& paths) {
  std::vector<SteeringVector> out;
  for (const std::string& p : paths) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.path().extension() == ".json") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const fs::path& f : files) out.push_back(SteeringVector::load(f));
    } else {
      out.push_back(SteeringVector::load(p));
    }
  }
  if (out.empty()) throw Error(Errc::InvalidConfig, "no steering vectors given");
  return out;
}

TraceCorpus load_corpus(const std::string& path, const std::string& format, const Vocab& vocab,
                        std::vector<std::string>* rejects = nullptr) {
  IngestResult r = ingest_corpus(path, parse_corpus_format(format), vocab);
  for (const std::string& rej : r.rejects) std::cerr << "rejected " << rej << "\n";
  if (rejects) *rejects = r.rejects;
  return std::move(r.corpus);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-reflection steering laboratory: detection, probing, hidden-state "
               "collection, difference-in-means steering and sweeps on a desk-scale transformer."};
  app.require_subcommand(1);
  std::string simd = "auto";
  app.add_option("--simd", simd, "Kernel level: auto, scalar or avx2")->capture_default_str();

  Common c;
  std::function<void()> action;

  // plant
  auto* plant = app.add_subcommand(
      "plant", "Planted model: build the analytic transformer whose reflection direction is known, "
               "write RFLXW1 weights plus a ground-truth sidecar.");
  ModelConfig pc;
  pc.n_layers = 6;
  pc.hidden_dim = 32;
  pc.n_heads = 4;
  pc.max_seq_len = 128;
  pc.mlp_hidden = 64;
  pc.pos_dim = 8;
  pc.layer_norm = 0;
  std::string trig_a = " odd", trig_b = ".", plant_out;
  double theta = 1.0, beta = 50.0;
  std::uint64_t plant_seed = 7;
  add_common(plant, c, false);
  plant->add_option("--layers", pc.n_layers, "Number of layers")->capture_default_str();
  plant->add_option("--dim", pc.hidden_dim, "Hidden dimension")->capture_default_str();
  plant->add_option("--heads", pc.n_heads, "Attention heads")->capture_default_str();
  plant->add_option("--max-seq", pc.max_seq_len, "Context length")->capture_default_str();
  plant->add_option("--mlp", pc.mlp_hidden, "MLP width")->capture_default_str();
  plant->add_option("--pos-dim", pc.pos_dim, "Position-code dimensions")->capture_default_str();
  plant->add_option("--trigger-first", trig_a, "First trigger token")->capture_default_str();
  plant->add_option("--trigger-second", trig_b, "Second trigger token")->capture_default_str();
  plant->add_option("--theta", theta, "Gate threshold")->capture_default_str();
  plant->add_option("--beta", beta, "Gate write gain")->capture_default_str();
  plant->add_option("--seed", plant_seed, "Construction seed")->capture_default_str();
  plant->add_option("--out", plant_out, "Output weights file (.rflxw)")->required();
  plant->callback([&] {
    action = [&] {
      const Vocab vocab = Vocab::load(c.vocab);
      pc.vocab_size = static_cast<std::uint32_t>(vocab.size());
      PlantedParams p;
      p.trigger_first = vocab.id(trig_a);
      p.trigger_second = vocab.id(trig_b);
      p.seed = plant_seed;
      p.gate_threshold = theta;
      p.write_gain = beta;
      auto [w, truth] = build_planted_model(pc, vocab, p);
      save_model(plant_out, Model(pc, std::move(w)));
      fs::path sidecar = plant_out;
      sidecar.replace_extension(".planted.json");
      write_file_atomic(sidecar, truth.to_json() + "\n");
      std::cout << "planted layer " << truth.trigger_layer << ", wrote " << plant_out << " and "
                << sidecar.string() << "\n";
    };
  });

  // generate
  auto* gen = app.add_subcommand(
      "generate", "Trace generation: autoregressive sampling (greedy or seeded temperature) from "
                  "the question template, to one trace or a JSONL corpus.");
  std::string gen_model, gen_question, gen_prefix, gen_prompts, gen_out, gen_sampler = "greedy";
  std::size_t gen_max_new = 32;
  std::uint64_t gen_seed = 0;
  bool gen_think = false;
  add_common(gen, c, false);
  gen->add_option("--model", gen_model, "Weights file")->required();
  gen->add_option("--question", gen_question, "Question text");
  gen->add_option("--prefix", gen_prefix, "Answer prefix appended after the template");
  gen->add_option("--prompts", gen_prompts, "JSONL of {id, question, prefix}; writes a corpus");
  gen->add_option("--max-new", gen_max_new, "Tokens to generate")->capture_default_str();
  gen->add_option("--sampler", gen_sampler, "greedy or temperature:T")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Sampling seed")->capture_default_str();
  gen->add_flag("--think-token", gen_think, "Append the think-open token to the prompt");
  gen->add_option("--out", gen_out, "Output file (default stdout)");
  gen->callback([&] {
    action = [&] {
      const Vocab vocab = Vocab::load(c.vocab);
      const Model model = load_model(gen_model);
      GenerateOptions g;
      g.max_new = gen_max_new;
      g.sampler = Sampler::parse(gen_sampler);
      g.eos = vocab.special().eos;
      if (gen_prompts.empty()) {
        g.seed = gen_seed;
        const TokenSeq prompt = prompt_tokens(vocab, {"", gen_question, gen_prefix}, gen_think);
        emit(gen_out, trace_json(vocab, generate(model, prompt, {}, g)));
        return;
      }
      const std::vector<PromptItem> items = read_prompt_items(gen_prompts);
      TraceCorpus corpus;
      corpus.entries.resize(items.size());
      parallel_for(items.size(), [&](std::size_t i) {
        GenerateOptions gi = g;
        gi.seed = derive_seed(gen_seed, i);
        const TokenSeq prompt = prompt_tokens(vocab, items[i], gen_think);
        TraceEntry& e = corpus.entries[i];
        e.id = items[i].id;
        e.question = items[i].question;
        e.tokens = generate(model, prompt, {}, gi).all_tokens();
        e.prompt_len = prompt.size();
        e.source = TraceSource::Internal;
        finalize_entry(e, vocab);
      });
      emit(gen_out, export_corpus(corpus));
    };
  });

  // detect
  auto* det = app.add_subcommand(
      "detect", "Reflection detection: keyword markers at word boundaries, reflection-inducing "
                "positions, and same-form negatives with a token exclusion window.");
  std::string det_corpus, det_format = "jsonl-text", det_text, det_out;
  std::size_t det_window = 100;
  add_common(det, c, true);
  det->add_option("--corpus", det_corpus, "Corpus JSONL");
  det->add_option("--format", det_format, "jsonl-text or jsonl-with-states")->capture_default_str();
  det->add_option("--text", det_text, "Detect in a single text instead");
  det->add_option("--window", det_window, "Negative exclusion window (tokens)")->capture_default_str();
  det->add_option("--out", det_out, "Output JSON (default stdout)");
  det->callback([&] {
    action = [&] {
      const Vocab vocab = Vocab::load(c.vocab);
      const KeywordSet kw = KeywordSet::load(c.keywords);
      std::vector<TokenSeq> traces;
      if (!det_text.empty()) {
        traces.push_back(vocab.encode(det_text));
      } else if (!det_corpus.empty()) {
        traces = load_corpus(det_corpus, det_format, vocab).token_seqs();
      } else {
        throw Error(Errc::InvalidConfig, "detect needs --corpus or --text");
      }
      emit(det_out, detect_corpus(vocab, traces, kw, det_window).to_json() + "\n");
    };
  });

  // probe
  auto* probe = app.add_subcommand(
      "probe", "Reflection-inducing probing: graft each donor's pre-reflection prefix onto the "
               "question prompt and compare marker frequency against the un-grafted baseline.");
  std::string probe_model, probe_cases, probe_out, probe_sampler = "greedy";
  std::size_t probe_max_new = 32, probe_window = 100;
  std::uint64_t probe_seed = 0;
  bool probe_think = false;
  add_common(probe, c, true);
  probe->add_option("--model", probe_model, "Weights file")->required();
  probe->add_option("--cases", probe_cases, "JSONL of {id, question, donor_text}")->required();
  probe->add_option("--max-new", probe_max_new, "Tokens to generate per case")->capture_default_str();
  probe->add_option("--window", probe_window, "Success window (generated tokens)")->capture_default_str();
  probe->add_option("--sampler", probe_sampler, "greedy or temperature:T")->capture_default_str();
  probe->add_option("--seed", probe_seed, "Seed")->capture_default_str();
  probe->add_flag("--think-token", probe_think, "Append the think-open token to prompts");
  probe->add_option("--out", probe_out, "Output JSON (default stdout)");
  probe->callback([&] {
    action = [&] {
      const Vocab vocab = Vocab::load(c.vocab);
      const KeywordSet kw = KeywordSet::load(c.keywords);
      const Model model = load_model(probe_model);
      const ProbeLoadResult loaded = load_probe_cases(probe_cases, vocab, kw);
      for (const std::string& r : loaded.rejects) std::cerr << "rejected " << r << "\n";
      ProbeOptions o;
      o.max_new = probe_max_new;
      o.success_window = probe_window;
      o.sampler = Sampler::parse(probe_sampler);
      o.seed = probe_seed;
      o.think_token = probe_think;
      o.eos = vocab.special().eos;
      std::vector<std::string> questions;
      for (const ProbeCase& pc2 : loaded.cases) questions.push_back(pc2.question);
      const ProbeResult pr = run_probe(model, vocab, loaded.cases, kw, o);
      const ProbeResult base = baseline_frequency(model, vocab, questions, kw, o);
      json j;
      j["probe"] = json::parse(pr.to_json(o, "probe"));
      j["baseline"] = json::parse(base.to_json(o, "baseline"));
      j["uplift"] = pr.frequency - base.frequency;
      j["rejects"] = loaded.rejects;
      emit(probe_out, j.dump(1) + "\n");
    };
  });

  // collect
  auto* col = app.add_subcommand(
      "collect", "Contrastive state collection: post-MLP residuals at reflection-inducing and "
                 "non-inducing positions, per layer, saved as RFLXH1 sets.");
  std::string col_model, col_corpus, col_format = "jsonl-text", col_layers, col_out;
  std::size_t col_window = 100;
  add_common(col, c, true);
  col->add_option("--model", col_model, "Weights file (used when the corpus has no state dumps)");
  col->add_option("--corpus", col_corpus, "Corpus JSONL")->required();
  col->add_option("--format", col_format, "jsonl-text or jsonl-with-states")->capture_default_str();
  col->add_option("--window", col_window, "Negative exclusion window")->capture_default_str();
  col->add_option("--layers", col_layers, "Comma-separated layers (default all)");
  col->add_option("--out", col_out, "Output directory")->required();
  col->callback([&] {
    action = [&] {
      const Vocab vocab = Vocab::load(c.vocab);
      const KeywordSet kw = KeywordSet::load(c.keywords);
      const TraceCorpus corpus = load_corpus(col_corpus, col_format, vocab);
      const CorpusDetection d = detect_corpus(vocab, corpus.token_seqs(), kw, col_window);
      std::vector<std::uint32_t> layers = parse_layer_list(col_layers);
      HiddenStateSets sets;
      if (corpus.all_have_states()) {
        if (layers.empty()) {
          for (std::uint32_t l = 0; l < corpus.entries.front().states->layer_count; ++l) layers.push_back(l);
        }
        std::vector<StateDump> dumps;
        for (const TraceEntry& e : corpus.entries) dumps.push_back(*e.states);
        sets = collect_sets_from_dumps(dumps, d.traces, layers,
                                       {corpus.id, "external", detector_config_hash(kw, col_window)});
      } else {
        if (col_model.empty()) throw Error(Errc::InvalidConfig, "--model needed for a corpus without states");
        const Model model = load_model(col_model);
        if (layers.empty()) {
          for (std::uint32_t l = 0; l < model.config().n_layers; ++l) layers.push_back(l);
        }
        sets = collect_sets(model, corpus.token_seqs(), d.traces, layers,
                            {corpus.id, model_id(model), detector_config_hash(kw, col_window)});
      }
      sets.save(col_out);
      const LayerSets& first = sets.layers.begin()->second;
      std::cout << "collected " << first.reflect.size() << " reflect / " << first.non_reflect.size()
                << " non-reflect states at " << sets.layers.size() << " layers\n";
    };
  });

  // extract
  auto* ext = app.add_subcommand(
      "extract", "Difference-in-means extraction: mean reflect state minus mean non-reflect "
                 "state per layer, written as rflx-sv-1 vectors.");
  std::string ext_sets, ext_layers, ext_out;
  ext->add_option("--sets", ext_sets, "Sets directory from collect")->required();
  ext->add_option("--layers", ext_layers, "Comma-separated layers (default all collected)");
  ext->add_option("--out", ext_out, "Output directory")->required();
  ext->callback([&] {
    action = [&] {
      const HiddenStateSets sets = HiddenStateSets::load(ext_sets);
      std::vector<std::uint32_t> layers = parse_layer_list(ext_layers);
      if (layers.empty()) {
        for (const auto& [l, ls] : sets.layers) layers.push_back(l);
      }
      fs::create_directories(ext_out);
      for (std::uint32_t l : layers) {
        const SteeringVector sv = extract_vector(sets, l);
        char name[32];
        std::snprintf(name, sizeof name, "layer_%02u.json", l);
        write_file_atomic(fs::path(ext_out) / name, sv.to_json());
        std::cout << "layer " << l << " norm " << format_double(sv.norm)
                  << (sv.usable() ? "" : " (unusable: zero vector)") << "\n";
      }
    };
  });

  // steer
  auto* steer = app.add_subcommand(
      "steer", "Steering intervention: generate with h <- h + alpha * <h, v> * v applied to the "
               "residual stream after each chosen layer.");
  std::string st_model, st_question, st_prefix, st_out, st_sampler = "greedy";
  std::vector<std::string> st_vectors, st_entries;
  std::size_t st_max_new = 32;
  std::uint64_t st_seed = 0;
  bool st_normalize = false, st_last_only = false, st_think = false;
  add_common(steer, c, false);
  steer->add_option("--model", st_model, "Weights file")->required();
  steer->add_option("--vectors", st_vectors, "Vector files or directories")->required();
  steer->add_option("--intervene", st_entries, "layer:alpha entry, repeatable")->required();
  steer->add_option("--question", st_question, "Question text");
  steer->add_option("--prefix", st_prefix, "Answer prefix");
  steer->add_option("--max-new", st_max_new, "Tokens to generate")->capture_default_str();
  steer->add_option("--sampler", st_sampler, "greedy or temperature:T")->capture_default_str();
  steer->add_option("--seed", st_seed, "Seed")->capture_default_str();
  steer->add_flag("--normalize", st_normalize, "Divide v by its norm before hooking");
  steer->add_flag("--last-only", st_last_only, "Intervene at the last position only");
  steer->add_flag("--think-token", st_think, "Append the think-open token to the prompt");
  steer->add_option("--out", st_out, "Output trace JSON (default stdout)");
  steer->callback([&] {
    action = [&] {
      const Vocab vocab = Vocab::load(c.vocab);
      const Model model = load_model(st_model);
      const std::vector<SteeringVector> vectors = load_vectors(st_vectors);
      InterventionConfig ic;
      ic.normalize = st_normalize;
      ic.last_only = st_last_only;
      for (const std::string& e : st_entries) {
        const auto colon = e.find(':');
        if (colon == std::string::npos) throw Error(Errc::InvalidConfig, "expected layer:alpha, got " + e);
        ic.entries.push_back({parse_layer_list(e.substr(0, colon)).at(0), parse_double(e.substr(colon + 1))});
      }
      GenerateOptions g;
      g.max_new = st_max_new;
      g.sampler = Sampler::parse(st_sampler);
      g.seed = st_seed;
      g.eos = vocab.special().eos;
      const TokenSeq prompt = prompt_tokens(vocab, {"", st_question, st_prefix}, st_think);
      emit(st_out, trace_json(vocab, steer_generate(model, prompt, ic, vectors, g)));
    };
  });

  // sweeps share their evaluation flags
  struct SweepFlags {
    std::string model, prompts, out, sampler = "greedy";
    std::size_t max_new = 32, window = 100;
    std::uint64_t seed = 0;
    bool normalize = false, last_only = false, think = false;
  };
  auto add_sweep_flags = [&](CLI::App* sub, SweepFlags& f) {
    add_common(sub, c, true);
    sub->add_option("--model", f.model, "Weights file")->required();
    sub->add_option("--prompts", f.prompts, "JSONL of {id, question, prefix}")->required();
    sub->add_option("--max-new", f.max_new, "Tokens per prompt")->capture_default_str();
    sub->add_option("--window", f.window, "Marker window (generated tokens)")->capture_default_str();
    sub->add_option("--sampler", f.sampler, "greedy or temperature:T")->capture_default_str();
    sub->add_option("--seed", f.seed, "Seed")->capture_default_str();
    sub->add_flag("--normalize", f.normalize, "Divide v by its norm before hooking");
    sub->add_flag("--last-only", f.last_only, "Intervene at the last position only");
    sub->add_flag("--think-token", f.think, "Append the think-open token to prompts");
    sub->add_option("--out", f.out, "Output prefix; writes PREFIX.csv and PREFIX.json")->required();
  };
  auto eval_opts = [](const SweepFlags& f, const Vocab& vocab) {
    EvalOptions o;
    o.max_new = f.max_new;
    o.window = f.window;
    o.sampler = Sampler::parse(f.sampler);
    o.seed = f.seed;
    o.eos = vocab.special().eos;
    o.normalize = f.normalize;
    o.last_only = f.last_only;
    return o;
  };
  auto prompts_of = [](const SweepFlags& f, const Vocab& vocab) {
    std::vector<TokenSeq> out;
    for (const PromptItem& item : read_prompt_items(f.prompts)) out.push_back(prompt_tokens(vocab, item, f.think));
    return out;
  };
  auto write_sweep = [](const SweepFlags& f, const SweepResult& r, const EvalOptions& o) {
    if (fs::path(f.out).has_parent_path()) fs::create_directories(fs::path(f.out).parent_path());
    write_file_atomic(f.out + ".csv", r.to_csv());
    write_file_atomic(f.out + ".json", r.to_json(o));
    std::cout << r.to_csv();
  };

  auto* sa = app.add_subcommand(
      "sweep-alpha", "Scaling search: reflection frequency and generation length over an alpha "
                     "grid that must contain the vanilla anchor alpha = 0.");
  SweepFlags saf;
  std::string sa_vector, sa_grid = "-0.2,-0.1,0,0.1,0.2";
  add_sweep_flags(sa, saf);
  sa->add_option("--vector", sa_vector, "Steering vector file")->required();
  sa->add_option("--grid", sa_grid, "Comma-separated alphas in [-1, 1]")->capture_default_str();
  sa->callback([&] {
    action = [&] {
      const Vocab vocab = Vocab::load(c.vocab);
      const KeywordSet kw = KeywordSet::load(c.keywords);
      const Model model = load_model(saf.model);
      const EvalOptions o = eval_opts(saf, vocab);
      const std::vector<double> grid = parse_grid(sa_grid);
      write_sweep(saf, alpha_sweep(model, vocab, SteeringVector::load(sa_vector), grid,
                                   prompts_of(saf, vocab), kw, o), o);
    };
  });

  auto* sl = app.add_subcommand(
      "sweep-layer", "Layer selection: inject each layer's vector at a fixed alpha, plus optional "
                     "multi-layer groups, and report the layer with the largest effect.");
  SweepFlags slf;
  std::string sl_sets, sl_groups;
  double sl_alpha = 0.01;
  add_sweep_flags(sl, slf);
  sl->add_option("--sets", sl_sets, "Sets directory covering every layer")->required();
  sl->add_option("--alpha", sl_alpha, "Fixed alpha")->capture_default_str();
  sl->add_option("--groups", sl_groups, "Multi-layer groups, e.g. 2+3,3+4");
  sl->callback([&] {
    action = [&] {
      const Vocab vocab = Vocab::load(c.vocab);
      const KeywordSet kw = KeywordSet::load(c.keywords);
      const Model model = load_model(slf.model);
      const EvalOptions o = eval_opts(slf, vocab);
      std::vector<std::vector<std::uint32_t>> groups;
      std::stringstream ss(sl_groups);
      for (std::string g; std::getline(ss, g, ',');) {
        std::replace(g.begin(), g.end(), '+', ',');
        if (!g.empty()) groups.push_back(parse_layer_list(g));
      }
      write_sweep(slf, layer_sweep(model, vocab, HiddenStateSets::load(sl_sets), sl_alpha,
                                   prompts_of(slf, vocab), kw, o, groups), o);
    };
  });

  // transfer
  auto* tr = app.add_subcommand(
      "transfer", "Cross-corpus transfer: per-layer cosine between vectors from two corpora, and "
                  "cosine statistics against every \"wait\" token embedding.");
  std::vector<std::string> tr_a, tr_b;
  std::string tr_model, tr_out;
  add_common(tr, c, false);
  tr->add_option("--vectors-a", tr_a, "Vector files or directory, corpus A")->required();
  tr->add_option("--vectors-b", tr_b, "Vector files or directory, corpus B")->required();
  tr->add_option("--model", tr_model, "Weights file providing the token embeddings")->required();
  tr->add_option("--out", tr_out, "Output JSON (default stdout)");
  tr->callback([&] {
    action = [&] {
      const Vocab vocab = Vocab::load(c.vocab);
      const Model model = load_model(tr_model);
      const auto waits = wait_variant_embeddings(vocab, model.weights().token_embedding);
      emit(tr_out, transfer_to_json(transfer_analysis(load_vectors(tr_a), load_vectors(tr_b), waits)));
    };
  });

  // project
  auto* pj = app.add_subcommand(
      "project", "Separability report: 2-D principal-component projection of reflect vs "
                 "non-reflect states with a Fisher-style score, one file pair per layer.");
  std::string pj_sets, pj_layers, pj_out;
  std::uint32_t pj_n_layers = 0;
  pj->add_option("--sets", pj_sets, "Sets directory")->required();
  pj->add_option("--layers", pj_layers, "Comma-separated layers")->required();
  pj->add_option("--n-layers", pj_n_layers, "Model depth (default: highest collected layer + 1)");
  pj->add_option("--out", pj_out, "Output directory")->required();
  pj->callback([&] {
    action = [&] {
      const HiddenStateSets sets = HiddenStateSets::load(pj_sets);
      const std::uint32_t n = pj_n_layers ? pj_n_layers : sets.layers.rbegin()->first + 1;
      for (std::uint32_t l : parse_layer_list(pj_layers)) {
        for (const fs::path& p : emit_projection_report(sets, l, n, pj_out)) std::cout << p.string() << "\n";
      }
    };
  });

  // pipeline
  auto* pl = app.add_subcommand(
      "pipeline", "End-to-end protocol: generate or ingest traces, detect, collect, extract, then "
                  "probe, sweep, transfer, project and compare steering protocols; writes a manifest.");
  std::string pl_config, pl_out;
  std::optional<std::uint64_t> pl_seed;
  pl->add_option("--config", pl_config, "Experiment config JSON")->required();
  pl->add_option("--out", pl_out, "Output directory (overrides the config)");
  pl->add_option("--seed", pl_seed, "Top-level seed (overrides the config)");
  pl->callback([&] {
    action = [&] {
      if (!fs::is_regular_file(pl_config)) throw Error(Errc::InvalidConfig, "cannot read " + pl_config);
      json raw;
      try {
        raw = json::parse(read_file(pl_config));
      } catch (const json::exception& e) {
        throw Error(Errc::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
      }
      if (pl_seed) raw["seed"] = *pl_seed;
      ExperimentConfig cfg = parse_experiment_config(raw.dump(), fs::path(pl_config).parent_path());
      cfg.source = pl_config;
      if (!pl_out.empty()) cfg.output_dir = pl_out;
      const Manifest m = run_pipeline(cfg);
      std::cout << m.to_json();
      if (m.status != "ok") {
        throw Error(Errc::StageFailure, "stage " + m.failed_stage + " failed: " + m.error);
      }
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  try {
    kernels::set_level(kernels::parse_level(simd));
    action();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
