#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "rflx/tokenizer.hpp"

namespace rflx {

/// Reflection phrases, matched case-insensitively at word boundaries
/// ([A-Za-z0-9_] counts as a word character).
struct KeywordSet {
  std::vector<std::string> phrases;  // stored lowercase

  static KeywordSet defaults();
  /// {"version": ..., "phrases": [...]}. Throws InvalidKeywordSet / InvalidFormat.
  static KeywordSet from_json(std::string_view text);
  static KeywordSet load(const std::filesystem::path& path);
  std::string to_json() const;

  /// Non-empty, contains "wait", no duplicates and no phrase contained in
  /// another. Throws InvalidKeywordSet.
  void validate() const;
};

struct MarkerSpan {
  std::size_t start = 0;  // first token
  std::size_t end = 0;    // one past the last token
  std::string phrase;
  std::size_t char_start = 0;
  std::size_t char_end = 0;

  bool operator==(const MarkerSpan&) const = default;
};

struct DetectionResult {
  std::vector<MarkerSpan> markers;
  std::vector<std::size_t> inducing;
  std::vector<std::size_t> negatives;
  std::size_t window = 100;

  bool operator==(const DetectionResult&) const = default;
};

/// Marker spans over the decoded text, sorted by start. Overlapping matches
/// keep the earliest start, then the longest.
std::vector<MarkerSpan> find_markers(const Vocab& vocab, std::span<const TokenId> tokens,
                                     const KeywordSet& keywords);

/// Token before each marker; markers at position 0 have none.
std::vector<std::size_t> inducing_positions(std::span<const MarkerSpan> markers);

/// Surface forms of the tokens at `positions`.
std::set<std::string> surface_forms(const Vocab& vocab, std::span<const TokenId> tokens,
                                    std::span<const std::size_t> positions);

/// Positions p whose token has one of `forms`, p is not inducing, and no
/// marker starts in (p, p + window]. Ascending.
std::vector<std::size_t> negative_positions(const Vocab& vocab, std::span<const TokenId> tokens,
                                            std::span<const std::size_t> inducing,
                                            std::span<const MarkerSpan> markers,
                                            const std::set<std::string>& forms,
                                            std::size_t window = 100);
/// Same, with the forms taken from this trace's own inducing positions.
std::vector<std::size_t> negative_positions(const Vocab& vocab, std::span<const TokenId> tokens,
                                            std::span<const std::size_t> inducing,
                                            std::span<const MarkerSpan> markers,
                                            std::size_t window = 100);

/// Single-trace detection with trace-local negative forms.
DetectionResult detect(const Vocab& vocab, std::span<const TokenId> tokens,
                       const KeywordSet& keywords, std::size_t window = 100);

struct CorpusDetection {
  std::vector<DetectionResult> traces;
  /// Surface forms pooled over every trace's inducing positions.
  std::set<std::string> inducing_forms;
  std::map<std::string, std::size_t> phrase_counts;
  std::size_t total_markers = 0;
  std::size_t window = 100;

  /// Share of markers whose phrase is "wait" (0 when there are none).
  double wait_share() const;
  std::string to_json() const;
};

/// Corpus-level detection: negatives in every trace are matched against the
/// inducing forms of the whole corpus.
CorpusDetection detect_corpus(const Vocab& vocab, std::span<const TokenSeq> traces,
                              const KeywordSet& keywords, std::size_t window = 100);

/// Hex digest identifying the keyword set and window.
std::string detector_config_hash(const KeywordSet& keywords, std::size_t window);

}  // namespace rflx
