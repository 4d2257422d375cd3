#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rflx/detector.hpp"
#include "rflx/model.hpp"
#include "rflx/weights_io.hpp"

namespace rflx {

struct LayerSets {
  std::vector<Vector> reflect;
  std::vector<Vector> non_reflect;
};

struct SetProvenance {
  std::string corpus_id;
  std::string model_id;
  std::string detector_hash;
};

/// Post-MLP residual states at inducing (reflect) and negative (non-reflect)
/// positions, per layer.
struct HiddenStateSets {
  std::map<std::uint32_t, LayerSets> layers;
  SetProvenance provenance;

  /// Throws MissingSnapshots when the layer was not collected.
  const LayerSets& at(std::uint32_t layer) const;

  /// Writes reflect.rflxh, non_reflect.rflxh and sets.json into `dir`;
  /// returns the files written.
  std::vector<std::filesystem::path> save(const std::filesystem::path& dir) const;
  static HiddenStateSets load(const std::filesystem::path& dir);
};

/// Runs one forward pass per trace and keeps the post-MLP state of each
/// requested layer at the detected positions. Throws EmptyPositiveSet /
/// EmptyNegativeSet when the corpus has no positions of that kind.
HiddenStateSets collect_sets(const Model& model, std::span<const TokenSeq> traces,
                             std::span<const DetectionResult> detections,
                             std::span<const std::uint32_t> layers, SetProvenance provenance);

/// Same, reading states from per-trace dumps instead of running a model.
/// Throws MissingSnapshots when a dump lacks a layer or position.
HiddenStateSets collect_sets_from_dumps(std::span<const StateDump> dumps,
                                        std::span<const DetectionResult> detections,
                                        std::span<const std::uint32_t> layers,
                                        SetProvenance provenance);

struct SteeringVector {
  std::uint32_t layer = 0;
  Vector v;  // raw difference of means
  double norm = 0.0;
  std::string model_id;
  std::string corpus;
  std::size_t n_reflect = 0;
  std::size_t n_nonreflect = 0;
  std::string detector_hash;

  bool usable() const noexcept { return norm > 0.0; }
  /// rflx-sv-1; values are shortest round-trip decimal strings.
  std::string to_json() const;
  static SteeringVector from_json(std::string_view text);
  static SteeringVector load(const std::filesystem::path& path);
};

/// mean(reflect) - mean(non_reflect). Throws MissingSnapshots / EmptySet.
SteeringVector extract_vector(const HiddenStateSets& sets, std::uint32_t layer);

/// h + alpha * <h, v> * v, with v divided by its norm first when
/// `normalize` is set. alpha == 0 returns h untouched. Throws ZeroVector.
HookSpec make_intervention_hook(const SteeringVector& sv, double alpha,
                                PositionSelector positions = PositionSelector::all(),
                                bool normalize = false);

struct InterventionEntry {
  std::uint32_t layer = 0;
  double alpha = 0.0;
  bool operator==(const InterventionEntry&) const = default;
};

struct InterventionConfig {
  std::vector<InterventionEntry> entries;
  bool last_only = false;
  bool normalize = false;
  double alpha_max = 1.0;

  /// Distinct layers, finite alphas within alpha_max. Throws InvalidConfig.
  void validate() const;
  std::string to_json() const;
  std::string hash() const;
};

/// Vanilla generate with one intervention hook per config entry. Throws
/// LayerVectorMismatch when an entry's layer has no vector.
GenerationTrace steer_generate(const Model& model, std::span<const TokenId> prompt,
                               const InterventionConfig& config,
                               std::span<const SteeringVector> vectors,
                               const GenerateOptions& options);

struct EvalOptions {
  std::size_t max_new = 32;
  /// A prompt counts as reflected when a marker starts within this many
  /// generated tokens.
  std::size_t window = 100;
  Sampler sampler;
  std::uint64_t seed = 0;
  std::optional<TokenId> eos;
  bool last_only = false;
  bool normalize = false;
};

struct EvalMetrics {
  double reflection_frequency = 0.0;
  double mean_len = 0.0;  // generated tokens only
  std::vector<bool> reflected;
  /// Digest of every generated token and logits hash, for bit-exact comparisons.
  std::uint64_t digest = 0;
};

/// Generates from every prompt under `config`. Prompt i uses seed
/// derive_seed(options.seed, i) regardless of the config, so different
/// configs are compared on common random numbers.
EvalMetrics evaluate_config(const Model& model, const Vocab& vocab,
                            std::span<const TokenSeq> prompts, const InterventionConfig& config,
                            std::span<const SteeringVector> vectors, const KeywordSet& keywords,
                            const EvalOptions& options);

struct SweepPoint {
  std::string label;
  double value = 0.0;
  std::vector<std::uint32_t> layers;
  EvalMetrics metrics;
  std::string error;
};

struct SweepResult {
  std::string axis;  // "alpha" or "layer"
  std::vector<SweepPoint> points;
  EvalMetrics vanilla;
  std::uint64_t seed = 0;
  double fixed_alpha = 0.0;            // layer sweeps
  std::uint32_t fixed_layer = 0;       // alpha sweeps
  std::optional<std::size_t> peak;     // layer sweeps: largest |freq - vanilla|

  /// axis,point,reflection_frequency,mean_len,seed
  std::string to_csv() const;
  std::string to_json(const EvalOptions& options) const;
};

/// One row per grid value (sorted, deduplicated). The grid must contain 0
/// and every |alpha| <= 1; the 0 row is checked bit-for-bit against vanilla
/// (StageFailure otherwise).
SweepResult alpha_sweep(const Model& model, const Vocab& vocab, const SteeringVector& vector,
                        std::span<const double> grid, std::span<const TokenSeq> prompts,
                        const KeywordSet& keywords, const EvalOptions& options);

/// One row per layer of the model (vector extracted from `sets` at that
/// layer, intervention at `alpha`), then one row per multi-layer group with
/// the same alpha at each member layer. Sets must cover every layer.
SweepResult layer_sweep(const Model& model, const Vocab& vocab, const HiddenStateSets& sets,
                        double alpha, std::span<const TokenSeq> prompts,
                        const KeywordSet& keywords, const EvalOptions& options,
                        std::span<const std::vector<std::uint32_t>> groups = {});

struct TransferRow {
  std::uint32_t layer = 0;
  double cross_cosine = 0.0;
  double wait_cos_mean = 0.0;
  double wait_cos_var = 0.0;  // population variance over variants
  std::vector<double> wait_cosines;
};

/// Per shared layer: cos(v_a, v_b) and cosine statistics of v_a against each
/// "wait" embedding. Both lists must cover the same layers with equal dims.
std::vector<TransferRow> transfer_analysis(std::span<const SteeringVector> vectors_a,
                                           std::span<const SteeringVector> vectors_b,
                                           std::span<const Vector> wait_embeddings);
std::string transfer_to_json(std::span<const TransferRow> rows);

struct BudgetOptions {
  Sampler sampler;
  std::uint64_t seed = 0;
  std::size_t n_waits = 1;
  std::size_t segment_len = 16;
  TokenId wait_token = 0;
  std::optional<TokenId> eos;
};

/// segment_len tokens, then a forced "wait", repeated n_waits times, then a
/// final segment. A segment that ends in eos has the eos replaced by the
/// forced token. n_waits = 0 is plain generation of segment_len tokens.
GenerationTrace budget_forcing(const Model& model, std::span<const TokenId> prompt,
                               const BudgetOptions& options);

}  // namespace rflx
