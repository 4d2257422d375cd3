#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rflx/numerics.hpp"

namespace rflx {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

struct SpecialTokens {
  TokenId bos = 0;
  TokenId eos = 0;
  TokenId think_open = 0;
  TokenId think_close = 0;
};

/// The reflection keyword list used for default detection.
std::span<const std::string_view> default_reflection_keywords() noexcept;

/// Lowercase ASCII, leading whitespace stripped.
std::string normalize_surface(std::string_view s);

/// Word-piece vocabulary with greedy longest-match encoding and byte
/// fallback. Token strings are matched literally except special tokens and
/// the 256 "<0xNN>" byte tokens, which are only produced by id.
class Vocab {
 public:
  static Vocab load(const std::filesystem::path& path);
  static Vocab from_json(std::string_view json_text);
  std::string to_json() const;

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view s) const;
  /// Throws UnknownTokenId when absent.
  TokenId id(std::string_view s) const;
  const SpecialTokens& special() const noexcept { return special_; }
  const std::string& version() const noexcept { return version_; }

  bool is_byte_token(TokenId id) const noexcept;
  bool is_special(TokenId id) const noexcept;
  TokenId byte_token(unsigned char b) const noexcept { return byte_ids_[b]; }

  /// Ids whose surface form normalizes to a reflection keyword.
  const std::vector<TokenId>& reflection_variants() const noexcept { return reflection_variants_; }
  /// Variants of one keyword, in vocab order.
  std::vector<TokenId> variants_of(std::string_view keyword) const;

  /// Surface text of one token (raw byte for byte tokens).
  std::string surface(TokenId id) const;

  TokenSeq encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

 private:
  std::string version_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::unordered_map<std::string, TokenId> matchable_;
  std::vector<unsigned char> byte_value_;  // 0 unless is_byte_
  std::vector<bool> is_byte_;
  std::vector<bool> is_special_;
  TokenId byte_ids_[256] = {};
  SpecialTokens special_;
  std::vector<TokenId> reflection_variants_;
  std::size_t max_match_len_ = 0;
};

/// Token-embedding rows of the "wait" surface variants, in vocab order.
std::vector<Vector> wait_variant_embeddings(const Vocab& vocab, const Matrix& token_embedding);

}  // namespace rflx
