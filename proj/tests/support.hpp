#pragma once

#include <filesystem>
#include <string>

#include "rflx/detector.hpp"
#include "rflx/tokenizer.hpp"

namespace rflx::test {

inline const Vocab& vocab() {
  static const Vocab v = Vocab::load(std::string(RFLX_ASSET_DIR) + "/vocab.json");
  return v;
}

inline const KeywordSet& keywords() {
  static const KeywordSet k = KeywordSet::load(std::string(RFLX_ASSET_DIR) + "/keywords.json");
  return k;
}

/// Fresh, empty scratch directory unique to `name`.
inline std::filesystem::path scratch(const std::string& name) {
  const std::filesystem::path p = std::filesystem::path(RFLX_SCRATCH_DIR) / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace rflx::test
