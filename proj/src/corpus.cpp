#include "rflx/corpus.hpp"

#include <fstream>
#include <json.hpp>
#include <set>

#include "rflx/error.hpp"
#include "rflx/util.hpp"

namespace rflx {

std::vector<TokenSeq> TraceCorpus::token_seqs() const {
  std::vector<TokenSeq> out;
  out.reserve(entries.size());
  for (const TraceEntry& e : entries) out.push_back(e.tokens);
  return out;
}

bool TraceCorpus::all_have_states() const {
  for (const TraceEntry& e : entries) {
    if (!e.states) return false;
  }
  return !entries.empty();
}

CorpusFormat parse_corpus_format(std::string_view name) {
  if (name == "jsonl-text") return CorpusFormat::JsonlText;
  if (name == "jsonl-with-states") return CorpusFormat::JsonlWithStates;
  throw Error(Errc::InvalidConfig, "unknown corpus format '" + std::string(name) + "'");
}

std::string_view corpus_format_name(CorpusFormat format) noexcept {
  return format == CorpusFormat::JsonlText ? "jsonl-text" : "jsonl-with-states";
}

std::string canonical_row(const TraceEntry& e) {
  nlohmann::json j;
  j["id"] = e.id;
  j["question"] = e.question;
  j["text"] = e.text;
  j["tokens"] = e.tokens;
  j["prompt_len"] = e.prompt_len;
  j["source"] = e.source == TraceSource::Internal ? "internal" : "ingested";
  if (!e.states_ref.empty()) j["states"] = e.states_ref;
  return j.dump();
}

void finalize_entry(TraceEntry& e, const Vocab& vocab) {
  if (e.tokens.empty() && !e.text.empty()) e.tokens = vocab.encode(e.text);
  e.text = vocab.decode(e.tokens);
  e.checksum = sha256_hex(canonical_row(e));
}

namespace {

TraceEntry parse_row(const std::string& line, CorpusFormat format, const Vocab& vocab,
                     const std::filesystem::path& base) {
  const nlohmann::json j = nlohmann::json::parse(line);
  TraceEntry e;
  e.id = j.at("id").get<std::string>();
  if (e.id.empty()) throw Error(Errc::InvalidFormat, "empty id");
  e.question = j.value("question", std::string());
  const bool has_text = j.contains("text");
  const bool has_tokens = j.contains("tokens");
  if (!has_text && !has_tokens) throw Error(Errc::InvalidFormat, "row needs text or tokens");
  if (has_tokens) {
    e.tokens = j.at("tokens").get<TokenSeq>();
    for (TokenId t : e.tokens) {
      if (t >= vocab.size()) throw Error(Errc::TokenOutOfVocab, "token id " + std::to_string(t));
    }
  } else {
    e.tokens = vocab.encode(j.at("text").get<std::string>());
  }
  if (has_text && has_tokens && vocab.decode(e.tokens) != j.at("text").get<std::string>()) {
    throw Error(Errc::InvalidFormat, "text and tokens disagree");
  }
  if (e.tokens.empty()) throw Error(Errc::InvalidFormat, "empty trace");
  e.prompt_len = j.value("prompt_len", std::size_t{0});
  if (e.prompt_len > e.tokens.size()) throw Error(Errc::InvalidFormat, "prompt_len exceeds trace");
  const std::string source = j.value("source", std::string("ingested"));
  if (source != "internal" && source != "ingested") throw Error(Errc::InvalidFormat, "bad source");
  e.source = source == "internal" ? TraceSource::Internal : TraceSource::Ingested;
  if (format == CorpusFormat::JsonlWithStates) {
    e.states_ref = j.at("states").get<std::string>();
    StateDump dump = load_states(base / e.states_ref);
    if (dump.n_positions != e.tokens.size()) {
      throw Error(Errc::InvalidFormat, "state dump has " + std::to_string(dump.n_positions) +
                                           " positions for " + std::to_string(e.tokens.size()) +
                                           " tokens");
    }
    e.states = std::move(dump);
  } else if (j.contains("states")) {
    e.states_ref = j.at("states").get<std::string>();
  }
  finalize_entry(e, vocab);
  return e;
}

}  // namespace

IngestResult ingest_corpus(const std::filesystem::path& path, CorpusFormat format,
                           const Vocab& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::UnreadablePath, "cannot read " + path.string());
  IngestResult out;
  out.corpus.id = path.filename().string();
  std::set<std::string> ids;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      TraceEntry e = parse_row(line, format, vocab, path.parent_path());
      if (!ids.insert(e.id).second) throw Error(Errc::InvalidFormat, "duplicate id '" + e.id + "'");
      out.corpus.entries.push_back(std::move(e));
    } catch (const std::exception& e) {
      out.rejects.push_back("line " + std::to_string(n) + ": " + e.what());
    }
  }
  if (out.corpus.entries.empty()) {
    throw Error(Errc::EmptyCorpus, "no valid rows in " + path.string());
  }
  return out;
}

std::string IngestResult::rejects_json() const {
  nlohmann::json j;
  j["accepted"] = corpus.entries.size();
  j["rejected"] = rejects.size();
  j["rejects"] = rejects;
  return j.dump(1) + "\n";
}

std::string export_corpus(const TraceCorpus& corpus) {
  std::string out;
  for (const TraceEntry& e : corpus.entries) {
    out += canonical_row(e);
    out += '\n';
  }
  return out;
}

}  // namespace rflx
