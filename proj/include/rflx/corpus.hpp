#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rflx/tokenizer.hpp"
#include "rflx/weights_io.hpp"

namespace rflx {

enum class TraceSource { Internal, Ingested };

struct TraceEntry {
  std::string id;
  std::string question;
  std::string text;
  TokenSeq tokens;
  std::size_t prompt_len = 0;
  TraceSource source = TraceSource::Ingested;
  /// RFLXH1 dump path as written in the row (relative to the corpus file).
  std::string states_ref;
  std::optional<StateDump> states;
  /// SHA-256 of the canonical row.
  std::string checksum;
};

struct TraceCorpus {
  std::string id;
  std::vector<TraceEntry> entries;

  std::vector<TokenSeq> token_seqs() const;
  bool all_have_states() const;
};

enum class CorpusFormat { JsonlText, JsonlWithStates };
/// "jsonl-text" or "jsonl-with-states"; throws InvalidConfig.
CorpusFormat parse_corpus_format(std::string_view name);
std::string_view corpus_format_name(CorpusFormat format) noexcept;

/// One canonical JSONL row (keys sorted, no whitespace).
std::string canonical_row(const TraceEntry& entry);
/// Fills tokens/text from each other and sets the checksum.
void finalize_entry(TraceEntry& entry, const Vocab& vocab);

struct IngestResult {
  TraceCorpus corpus;
  std::vector<std::string> rejects;  // "line N: reason"

  std::string rejects_json() const;
};

/// Rows: {id, question?, text?, tokens?, prompt_len?, source?, states?}.
/// At least one of text/tokens is required; when both are present they
/// must agree. jsonl-with-states rows need "states" pointing at an RFLXH1
/// file whose position count equals the token count. Malformed rows go to
/// the rejects list. Throws UnreadablePath, or EmptyCorpus when no row is
/// valid.
IngestResult ingest_corpus(const std::filesystem::path& path, CorpusFormat format,
                           const Vocab& vocab);

/// Canonical JSONL, one row per entry.
std::string export_corpus(const TraceCorpus& corpus);

}  // namespace rflx
