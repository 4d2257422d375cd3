#include "rflx/tokenizer.hpp"

#include <array>
#include <cctype>
#include <cstdio>
#include <json.hpp>

#include "rflx/error.hpp"
#include "rflx/util.hpp"

namespace rflx {
namespace {

constexpr std::array<std::string_view, 17> kKeywords = {
    "wait",        "re-check",    "recheck",    "check again",    "rethink",
    "re-think",    "reconsider",  "re-consider", "try again",     "re-examine",
    "reexamine",   "re-evaluate", "reevaluate", "think again",    "consider again",
    "evaluate again", "examine again"};

bool parse_byte_token(std::string_view s, unsigned char& out) {
  if (s.size() != 6 || s.substr(0, 3) != "<0x" || s.back() != '>') return false;
  unsigned value = 0;
  for (char c : s.substr(3, 2)) {
    value <<= 4;
    if (c >= '0' && c <= '9') value |= static_cast<unsigned>(c - '0');
    else if (c >= 'A' && c <= 'F') value |= static_cast<unsigned>(c - 'A' + 10);
    else return false;
  }
  out = static_cast<unsigned char>(value);
  return true;
}

}  // namespace

std::span<const std::string_view> default_reflection_keywords() noexcept { return kKeywords; }

std::string normalize_surface(std::string_view s) {
  std::size_t start = 0;
  while (start < s.size() && std::isspace(static_cast<unsigned char>(s[start]))) ++start;
  std::string out(s.substr(start));
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

Vocab Vocab::load(const std::filesystem::path& path) { return from_json(read_file(path)); }

Vocab Vocab::from_json(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidFormat, std::string("vocab json: ") + e.what());
  }
  Vocab v;
  try {
    v.version_ = j.at("version").get<std::string>();
    v.tokens_ = j.at("tokens").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidFormat, std::string("vocab json: ") + e.what());
  }
  const std::size_t n = v.tokens_.size();
  v.is_byte_.assign(n, false);
  v.is_special_.assign(n, false);
  v.byte_value_.assign(n, 0);
  std::array<bool, 256> seen_byte{};
  for (TokenId id = 0; id < n; ++id) {
    const std::string& s = v.tokens_[id];
    if (!v.index_.emplace(s, id).second) {
      throw Error(Errc::InvalidFormat, "duplicate vocab entry '" + s + "'");
    }
    unsigned char b = 0;
    if (parse_byte_token(s, b)) {
      v.is_byte_[id] = true;
      v.byte_value_[id] = b;
      v.byte_ids_[b] = id;
      seen_byte[b] = true;
    }
  }
  for (bool seen : seen_byte) {
    if (!seen) throw Error(Errc::InvalidFormat, "vocab lacks byte-fallback tokens");
  }
  auto special = [&](const char* key) {
    const std::string name = j.at("special").at(key).get<std::string>();
    const TokenId id = v.id(name);
    v.is_special_[id] = true;
    return id;
  };
  try {
    v.special_.bos = special("bos");
    v.special_.eos = special("eos");
    v.special_.think_open = special("think_open");
    v.special_.think_close = special("think_close");
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidFormat, std::string("vocab special tokens: ") + e.what());
  }
  for (TokenId id = 0; id < n; ++id) {
    if (v.is_byte_[id] || v.is_special_[id] || v.tokens_[id].empty()) continue;
    v.matchable_.emplace(v.tokens_[id], id);
    v.max_match_len_ = std::max(v.max_match_len_, v.tokens_[id].size());
    const std::string norm = normalize_surface(v.tokens_[id]);
    for (std::string_view k : kKeywords) {
      if (norm == k) {
        v.reflection_variants_.push_back(id);
        break;
      }
    }
  }
  for (std::string_view k : kKeywords) {
    if (!v.matchable_.contains(std::string(k))) {
      throw Error(Errc::InvalidFormat, "keyword '" + std::string(k) + "' is not a single token");
    }
  }
  return v;
}

std::string Vocab::to_json() const {
  nlohmann::json j;
  j["version"] = version_;
  j["tokens"] = tokens_;
  j["special"] = {{"bos", tokens_[special_.bos]},
                  {"eos", tokens_[special_.eos]},
                  {"think_open", tokens_[special_.think_open]},
                  {"think_close", tokens_[special_.think_close]}};
  return j.dump(1);
}

const std::string& Vocab::token(TokenId id) const {
  if (id >= tokens_.size()) throw Error(Errc::UnknownTokenId, std::to_string(id));
  return tokens_[id];
}

std::optional<TokenId> Vocab::find(std::string_view s) const {
  auto it = index_.find(std::string(s));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::id(std::string_view s) const {
  if (auto found = find(s)) return *found;
  throw Error(Errc::UnknownTokenId, "no token '" + std::string(s) + "'");
}

bool Vocab::is_byte_token(TokenId id) const noexcept { return id < size() && is_byte_[id]; }
bool Vocab::is_special(TokenId id) const noexcept { return id < size() && is_special_[id]; }

std::vector<TokenId> Vocab::variants_of(std::string_view keyword) const {
  std::vector<TokenId> out;
  for (TokenId id : reflection_variants_) {
    if (normalize_surface(tokens_[id]) == keyword) out.push_back(id);
  }
  return out;
}

std::string Vocab::surface(TokenId id) const {
  if (id >= tokens_.size()) throw Error(Errc::UnknownTokenId, std::to_string(id));
  if (is_byte_[id]) return std::string(1, static_cast<char>(byte_value_[id]));
  return tokens_[id];
}

TokenSeq Vocab::encode(std::string_view text) const {
  TokenSeq out;
  std::size_t pos = 0;
  std::string probe;
  while (pos < text.size()) {
    const std::size_t longest = std::min(max_match_len_, text.size() - pos);
    bool matched = false;
    for (std::size_t len = longest; len > 0; --len) {
      probe.assign(text.substr(pos, len));
      if (auto it = matchable_.find(probe); it != matchable_.end()) {
        out.push_back(it->second);
        pos += len;
        matched = true;
        break;
      }
    }
    if (!matched) {
      out.push_back(byte_ids_[static_cast<unsigned char>(text[pos])]);
      ++pos;
    }
  }
  return out;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id >= tokens_.size()) throw Error(Errc::UnknownTokenId, std::to_string(id));
    if (is_byte_[id]) out.push_back(static_cast<char>(byte_value_[id]));
    else out += tokens_[id];
  }
  return out;
}

std::vector<Vector> wait_variant_embeddings(const Vocab& vocab, const Matrix& token_embedding) {
  const std::vector<TokenId> ids = vocab.variants_of("wait");
  if (ids.empty()) throw Error(Errc::MissingVariant, "vocab has no 'wait' variants");
  std::vector<Vector> out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id >= token_embedding.rows) throw Error(Errc::TokenOutOfVocab, "embedding too small");
    out.emplace_back(token_embedding.row(id));
  }
  return out;
}

}  // namespace rflx
