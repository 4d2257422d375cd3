#include "rflx/probing.hpp"

#include <fstream>
#include <json.hpp>

#include "rflx/error.hpp"
#include "rflx/util.hpp"

namespace rflx {

TokenSeq build_prompt(const Vocab& vocab, std::string_view question, bool think_token) {
  std::string text = "Question: ";
  text += question;
  text += "\nAnswer:";
  TokenSeq ids = vocab.encode(text);
  if (think_token) ids.push_back(vocab.special().think_open);
  return ids;
}

MarkerSplit split_at_first_marker(const Vocab& vocab, std::span<const TokenId> trace,
                                  const KeywordSet& keywords) {
  const std::vector<MarkerSpan> markers = find_markers(vocab, trace, keywords);
  if (markers.empty()) throw Error(Errc::NoReflectionFound, "trace contains no reflection marker");
  const MarkerSpan& m = markers.front();
  MarkerSplit s;
  s.r1.assign(trace.begin(), trace.begin() + static_cast<std::ptrdiff_t>(m.start));
  s.marker.assign(trace.begin() + static_cast<std::ptrdiff_t>(m.start),
                  trace.begin() + static_cast<std::ptrdiff_t>(m.end));
  s.r2.assign(trace.begin() + static_cast<std::ptrdiff_t>(m.end), trace.end());
  s.phrase = m.phrase;
  return s;
}

ProbeCase make_probe_case(const Vocab& vocab, const KeywordSet& keywords, std::string id,
                          std::string question, std::string_view donor_text) {
  ProbeCase c;
  c.id = std::move(id);
  c.question = std::move(question);
  c.donor_tokens = vocab.encode(donor_text);
  MarkerSplit split = split_at_first_marker(vocab, c.donor_tokens, keywords);
  c.marker_phrase = split.phrase;
  const TokenSeq regrafted = vocab.encode(vocab.decode(split.r1));
  c.text_level_graft = regrafted != split.r1;
  c.r1 = c.text_level_graft ? regrafted : std::move(split.r1);
  return c;
}

ProbeLoadResult load_probe_cases(const std::filesystem::path& path, const Vocab& vocab,
                                 const KeywordSet& keywords) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::UnreadablePath, "cannot read " + path.string());
  ProbeLoadResult out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      out.cases.push_back(make_probe_case(vocab, keywords, j.at("id").get<std::string>(),
                                          j.at("question").get<std::string>(),
                                          j.at("donor_text").get<std::string>()));
    } catch (const std::exception& e) {
      out.rejects.push_back("line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::optional<MarkerSpan> first_marker_in_window(const Vocab& vocab,
                                                 std::span<const TokenId> tokens,
                                                 const KeywordSet& keywords, std::size_t from,
                                                 std::size_t window) {
  for (MarkerSpan& m : find_markers(vocab, tokens, keywords)) {
    if (m.start >= from && m.start < from + window) return std::move(m);
  }
  return std::nullopt;
}

namespace {

ProbeResult run_prompts(const Model& model, const Vocab& vocab,
                        const std::vector<std::pair<std::string, TokenSeq>>& prompts,
                        const KeywordSet& keywords, const ProbeOptions& options) {
  if (prompts.empty()) throw Error(Errc::EmptyBatch, "no probe cases");
  ProbeResult result;
  result.success_window = options.success_window;
  result.per_case.resize(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    ProbeCaseResult& r = result.per_case[i];
    r.id = prompts[i].first;
    r.seed = derive_seed(options.seed, i);
    try {
      GenerateOptions g;
      g.max_new = options.max_new;
      g.sampler = options.sampler;
      g.seed = r.seed;
      g.eos = options.eos;
      const GenerationTrace trace = generate(model, prompts[i].second, {}, g);
      r.generated_len = trace.generated_tokens.size();
      const TokenSeq all = trace.all_tokens();
      const std::size_t from = trace.prompt_tokens.size();
      if (auto m = first_marker_in_window(vocab, all, keywords, from, options.success_window)) {
        r.reflected = true;
        r.first_marker_offset = m->start - from;
        r.phrase = m->phrase;
      }
    } catch (const std::exception& e) {
      r.error = e.what();
    }
  });
  for (const ProbeCaseResult& r : result.per_case) {
    if (!r.error.empty()) {
      ++result.failures;
      continue;
    }
    ++result.n_cases;
    if (r.reflected) {
      ++result.n_reflected;
      ++result.phrase_counts[r.phrase];
    }
  }
  if (result.n_cases > 0) {
    result.frequency = static_cast<double>(result.n_reflected) / static_cast<double>(result.n_cases);
  }
  return result;
}

}  // namespace

ProbeResult run_probe(const Model& model, const Vocab& vocab, std::span<const ProbeCase> cases,
                      const KeywordSet& keywords, const ProbeOptions& options) {
  std::vector<std::pair<std::string, TokenSeq>> prompts;
  for (const ProbeCase& c : cases) {
    TokenSeq p = build_prompt(vocab, c.question, options.think_token);
    p.insert(p.end(), c.r1.begin(), c.r1.end());
    prompts.emplace_back(c.id, std::move(p));
  }
  return run_prompts(model, vocab, prompts, keywords, options);
}

ProbeResult baseline_frequency(const Model& model, const Vocab& vocab,
                               std::span<const std::string> questions,
                               const KeywordSet& keywords, const ProbeOptions& options) {
  std::vector<std::pair<std::string, TokenSeq>> prompts;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    prompts.emplace_back("q" + std::to_string(i),
                         build_prompt(vocab, questions[i], options.think_token));
  }
  return run_prompts(model, vocab, prompts, keywords, options);
}

std::string ProbeResult::to_json(const ProbeOptions& options, std::string_view kind) const {
  nlohmann::json j;
  j["kind"] = kind;
  j["config"] = {{"max_new", options.max_new},
                 {"success_window", options.success_window},
                 {"sampler", options.sampler.describe()},
                 {"seed", options.seed},
                 {"think_token", options.think_token}};
  j["frequency"] = frequency;
  j["n_cases"] = n_cases;
  j["n_reflected"] = n_reflected;
  j["failures"] = failures;
  j["phrase_counts"] = phrase_counts;
  nlohmann::json cases = nlohmann::json::array();
  for (const ProbeCaseResult& r : per_case) {
    nlohmann::json c = {{"id", r.id}, {"reflected", r.reflected},
                        {"generated_len", r.generated_len}, {"seed", r.seed}};
    if (r.first_marker_offset) c["first_marker_offset"] = *r.first_marker_offset;
    if (!r.phrase.empty()) c["phrase"] = r.phrase;
    if (!r.error.empty()) c["error"] = r.error;
    cases.push_back(std::move(c));
  }
  j["per_case"] = std::move(cases);
  return j.dump(1);
}

}  // namespace rflx
