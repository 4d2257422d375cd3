#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rflx/detector.hpp"
#include "rflx/model.hpp"

namespace rflx {

/// "Question: {q}\nAnswer:" with an optional trailing think-open token.
TokenSeq build_prompt(const Vocab& vocab, std::string_view question, bool think_token);

struct MarkerSplit {
  TokenSeq r1;
  TokenSeq marker;
  TokenSeq r2;
  std::string phrase;
};

/// Throws NoReflectionFound when the trace has no marker.
MarkerSplit split_at_first_marker(const Vocab& vocab, std::span<const TokenId> trace,
                                  const KeywordSet& keywords);

struct ProbeCase {
  std::string id;
  std::string question;
  TokenSeq donor_tokens;
  TokenSeq r1;
  std::string marker_phrase;
  /// Set when r1 could not be reproduced token-for-token by decode/encode;
  /// the case is then grafted by text.
  bool text_level_graft = false;
};

/// Builds a case from donor text. Throws NoReflectionFound.
ProbeCase make_probe_case(const Vocab& vocab, const KeywordSet& keywords, std::string id,
                          std::string question, std::string_view donor_text);

struct ProbeLoadResult {
  std::vector<ProbeCase> cases;
  std::vector<std::string> rejects;  // "line N: reason"
};

/// JSONL rows {id, question, donor_text}. Rows without a marker or with
/// missing fields are rejected, not fatal.
ProbeLoadResult load_probe_cases(const std::filesystem::path& path, const Vocab& vocab,
                                 const KeywordSet& keywords);

struct ProbeOptions {
  std::size_t max_new = 100;
  std::size_t success_window = 100;
  Sampler sampler;
  std::uint64_t seed = 0;
  bool think_token = false;
  std::optional<TokenId> eos;
};

struct ProbeCaseResult {
  std::string id;
  bool reflected = false;
  std::optional<std::size_t> first_marker_offset;  // in generated tokens
  std::string phrase;
  std::size_t generated_len = 0;
  std::uint64_t seed = 0;
  std::string error;  // non-empty when the case failed
};

struct ProbeResult {
  std::size_t n_cases = 0;
  std::size_t n_reflected = 0;
  double frequency = 0.0;
  std::size_t success_window = 0;
  std::size_t failures = 0;
  std::map<std::string, std::size_t> phrase_counts;
  std::vector<ProbeCaseResult> per_case;

  std::string to_json(const ProbeOptions& options, std::string_view kind) const;
};

/// Grafts each case's r1 onto the question prompt and generates. Success
/// means a marker starts within the first success_window generated tokens.
/// Case i uses seed derive_seed(options.seed, i). Failed cases are recorded
/// and excluded from n_cases. Throws EmptyBatch when `cases` is empty.
ProbeResult run_probe(const Model& model, const Vocab& vocab, std::span<const ProbeCase> cases,
                      const KeywordSet& keywords, const ProbeOptions& options);

/// The un-grafted control: prompt is the question template alone.
ProbeResult baseline_frequency(const Model& model, const Vocab& vocab,
                               std::span<const std::string> questions,
                               const KeywordSet& keywords, const ProbeOptions& options);

/// First marker starting in [from, from + window) of `tokens`, if any.
std::optional<MarkerSpan> first_marker_in_window(const Vocab& vocab,
                                                 std::span<const TokenId> tokens,
                                                 const KeywordSet& keywords, std::size_t from,
                                                 std::size_t window);

}  // namespace rflx
