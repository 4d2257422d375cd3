#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rflx/model.hpp"
#include "rflx/tokenizer.hpp"

namespace rflx {

struct PlantedParams {
  TokenId trigger_first = 0;
  TokenId trigger_second = 0;
  std::uint64_t seed = 0;
  /// Gate opens when <h, t> exceeds this (token scale is 1; a lone trigger
  /// token gives 1/sqrt(2), the full bigram sqrt(2)).
  double gate_threshold = 1.0;
  double write_gain = 50.0;

  /// Trigger " odd" followed by "." from the shipped vocab.
  static PlantedParams defaults(const Vocab& vocab, std::uint64_t seed);
};

/// What the construction guarantees, for oracle comparisons.
struct PlantedGroundTruth {
  Vector direction;            // w, unit norm
  Vector trigger_direction;    // t, unit norm
  std::uint32_t trigger_layer = 0;  // k: the MLP of layer k writes w
  std::uint32_t copy_layer = 0;     // k - 1: attention copies the previous token
  double gate_threshold = 0.0;
  double write_gain = 0.0;
  std::uint64_t seed = 0;
  TokenId trigger_first = 0;
  TokenId trigger_second = 0;
  TokenId wait_token = 0;
  /// Output scaling of the reflection subspace after layer k (1 when k is last).
  double downstream_attenuation = 1.0;

  std::string to_json() const;
  static PlantedGroundTruth from_json(std::string_view text);
};

/// Analytic transformer in which one residual direction causally drives
/// "wait" emission:
///  - embeddings put every token on a constant channel plus content
///    directions; the trigger pair gets dedicated orthogonal directions,
///  - layer k-1 attention copies the previous token's first-trigger
///    component forward using the position code, and its MLP shrinks the
///    position code,
///  - layer k MLP is relu(<h, t> - theta) * beta * w,
///  - layer k+1 MLP (if present) scales the reflection subspace down,
///  - the unembedding column of "wait" is aligned with w, every other
///    column is orthogonal to w and encodes a fixed successor cycle
///    " so the value is 42." for ordinary text.
/// Requires layer_norm = 0, n_layers >= 3, hidden_dim >= 16, pos_dim >= 4,
/// head_dim >= pos_dim.
std::pair<Weights, PlantedGroundTruth> build_planted_model(const ModelConfig& config,
                                                           const Vocab& vocab,
                                                           const PlantedParams& params);

}  // namespace rflx
