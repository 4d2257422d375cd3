#include "rflx/detector.hpp"

#include <algorithm>
#include <json.hpp>

#include "rflx/error.hpp"
#include "rflx/util.hpp"

namespace rflx {
namespace {

bool is_word_char(char c) noexcept {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_';
}

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

}  // namespace

KeywordSet KeywordSet::defaults() {
  KeywordSet k;
  for (std::string_view p : default_reflection_keywords()) k.phrases.emplace_back(p);
  return k;
}

KeywordSet KeywordSet::from_json(std::string_view text) {
  KeywordSet k;
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    for (const auto& p : j.at("phrases")) k.phrases.push_back(ascii_lower(p.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidFormat, std::string("keyword file: ") + e.what());
  }
  k.validate();
  return k;
}

KeywordSet KeywordSet::load(const std::filesystem::path& path) { return from_json(read_file(path)); }

std::string KeywordSet::to_json() const {
  nlohmann::json j;
  j["version"] = "rflx-keywords-1";
  j["phrases"] = phrases;
  return j.dump(1);
}

void KeywordSet::validate() const {
  if (phrases.empty()) throw Error(Errc::InvalidKeywordSet, "keyword set is empty");
  if (std::find(phrases.begin(), phrases.end(), "wait") == phrases.end()) {
    throw Error(Errc::InvalidKeywordSet, "keyword set must contain \"wait\"");
  }
  for (std::size_t i = 0; i < phrases.size(); ++i) {
    const std::string& a = phrases[i];
    if (a.empty() || !is_word_char(a.front()) || !is_word_char(a.back())) {
      throw Error(Errc::InvalidKeywordSet, "phrase must start and end with a word character: '" + a + "'");
    }
    if (a != ascii_lower(a)) throw Error(Errc::InvalidKeywordSet, "phrase not lowercase: '" + a + "'");
    for (std::size_t j = 0; j < phrases.size(); ++j) {
      if (i != j && phrases[j].find(a) != std::string::npos) {
        throw Error(Errc::InvalidKeywordSet,
                    "phrase '" + a + "' is contained in '" + phrases[j] + "'");
      }
    }
  }
}

std::vector<MarkerSpan> find_markers(const Vocab& vocab, std::span<const TokenId> tokens,
                                     const KeywordSet& keywords) {
  // Decoded text plus the token that owns each byte.
  std::string text;
  std::vector<std::size_t> owner;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const std::string s = vocab.surface(tokens[t]);
    text += s;
    owner.insert(owner.end(), s.size(), t);
  }
  const std::string lower = ascii_lower(text);

  std::vector<MarkerSpan> found;
  for (const std::string& phrase : keywords.phrases) {
    for (std::size_t at = lower.find(phrase); at != std::string::npos;
         at = lower.find(phrase, at + 1)) {
      const std::size_t end = at + phrase.size();
      if (at > 0 && is_word_char(lower[at - 1])) continue;
      if (end < lower.size() && is_word_char(lower[end])) continue;
      found.push_back({owner[at], owner[end - 1] + 1, phrase, at, end});
    }
  }
  std::sort(found.begin(), found.end(), [](const MarkerSpan& a, const MarkerSpan& b) {
    if (a.char_start != b.char_start) return a.char_start < b.char_start;
    return a.char_end > b.char_end;
  });
  std::vector<MarkerSpan> kept;
  for (MarkerSpan& m : found) {
    if (!kept.empty() && m.char_start < kept.back().char_end) continue;
    kept.push_back(std::move(m));
  }
  return kept;
}

std::vector<std::size_t> inducing_positions(std::span<const MarkerSpan> markers) {
  std::vector<std::size_t> out;
  for (const MarkerSpan& m : markers) {
    if (m.start >= 1 && (out.empty() || out.back() != m.start - 1)) out.push_back(m.start - 1);
  }
  return out;
}

std::set<std::string> surface_forms(const Vocab& vocab, std::span<const TokenId> tokens,
                                    std::span<const std::size_t> positions) {
  std::set<std::string> forms;
  for (std::size_t p : positions) forms.insert(vocab.token(tokens[p]));
  return forms;
}

std::vector<std::size_t> negative_positions(const Vocab& vocab, std::span<const TokenId> tokens,
                                            std::span<const std::size_t> inducing,
                                            std::span<const MarkerSpan> markers,
                                            const std::set<std::string>& forms,
                                            std::size_t window) {
  if (window == 0) throw Error(Errc::InvalidConfig, "window must be >= 1");
  std::vector<std::size_t> starts;
  for (const MarkerSpan& m : markers) starts.push_back(m.start);
  std::sort(starts.begin(), starts.end());
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    if (!forms.contains(vocab.token(tokens[p]))) continue;
    if (std::find(inducing.begin(), inducing.end(), p) != inducing.end()) continue;
    const auto next = std::upper_bound(starts.begin(), starts.end(), p);
    if (next != starts.end() && *next <= p + window) continue;
    out.push_back(p);
  }
  return out;
}

std::vector<std::size_t> negative_positions(const Vocab& vocab, std::span<const TokenId> tokens,
                                            std::span<const std::size_t> inducing,
                                            std::span<const MarkerSpan> markers,
                                            std::size_t window) {
  return negative_positions(vocab, tokens, inducing, markers,
                            surface_forms(vocab, tokens, inducing), window);
}

DetectionResult detect(const Vocab& vocab, std::span<const TokenId> tokens,
                       const KeywordSet& keywords, std::size_t window) {
  DetectionResult r;
  r.window = window;
  r.markers = find_markers(vocab, tokens, keywords);
  r.inducing = inducing_positions(r.markers);
  r.negatives = negative_positions(vocab, tokens, r.inducing, r.markers, window);
  return r;
}

double CorpusDetection::wait_share() const {
  if (total_markers == 0) return 0.0;
  const auto it = phrase_counts.find("wait");
  const std::size_t n = it == phrase_counts.end() ? 0 : it->second;
  return static_cast<double>(n) / static_cast<double>(total_markers);
}

CorpusDetection detect_corpus(const Vocab& vocab, std::span<const TokenSeq> traces,
                              const KeywordSet& keywords, std::size_t window) {
  CorpusDetection c;
  c.window = window;
  c.traces.resize(traces.size());
  parallel_for(traces.size(), [&](std::size_t i) {
    DetectionResult& r = c.traces[i];
    r.window = window;
    r.markers = find_markers(vocab, traces[i], keywords);
    r.inducing = inducing_positions(r.markers);
  });
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto forms = surface_forms(vocab, traces[i], c.traces[i].inducing);
    c.inducing_forms.insert(forms.begin(), forms.end());
    for (const MarkerSpan& m : c.traces[i].markers) ++c.phrase_counts[m.phrase];
    c.total_markers += c.traces[i].markers.size();
  }
  parallel_for(traces.size(), [&](std::size_t i) {
    DetectionResult& r = c.traces[i];
    r.negatives = negative_positions(vocab, traces[i], r.inducing, r.markers, c.inducing_forms, window);
  });
  return c;
}

std::string CorpusDetection::to_json() const {
  nlohmann::json j;
  j["window"] = window;
  j["total_markers"] = total_markers;
  j["phrase_counts"] = phrase_counts;
  j["wait_share"] = wait_share();
  j["inducing_forms"] = inducing_forms;
  nlohmann::json traces_json = nlohmann::json::array();
  for (const DetectionResult& r : traces) {
    nlohmann::json t;
    nlohmann::json markers = nlohmann::json::array();
    for (const MarkerSpan& m : r.markers) {
      markers.push_back({{"start", m.start}, {"end", m.end}, {"phrase", m.phrase}});
    }
    t["markers"] = std::move(markers);
    t["inducing"] = r.inducing;
    t["negatives"] = r.negatives;
    traces_json.push_back(std::move(t));
  }
  j["traces"] = std::move(traces_json);
  return j.dump(1);
}

std::string detector_config_hash(const KeywordSet& keywords, std::size_t window) {
  nlohmann::json j;
  j["phrases"] = keywords.phrases;
  j["window"] = window;
  return sha256_hex(j.dump());
}

}  // namespace rflx
