#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rflx {

enum class Errc {
  // numerics
  DimensionMismatch,
  ZeroNormVector,
  EmptySet,
  // model
  SequenceTooLong,
  TokenOutOfVocab,
  HookDimMismatch,
  ConfigTooSmall,
  InvalidConfig,
  // tokenizer
  UnknownTokenId,
  MissingVariant,
  // detector / probing
  InvalidKeywordSet,
  NoReflectionFound,
  EmptyBatch,
  // steering
  MissingSnapshots,
  EmptyPositiveSet,
  EmptyNegativeSet,
  ZeroVector,
  LayerVectorMismatch,
  // experiments
  UnreadablePath,
  EmptyCorpus,
  InvalidFormat,
  StageFailure,
};

std::string_view errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace rflx
