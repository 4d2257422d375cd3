#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rflx/numerics.hpp"
#include "rflx/tokenizer.hpp"
#include "rflx/util.hpp"

namespace rflx {

/// Field order is the on-disk order of the RFLXW1 header.
struct ModelConfig {
  std::uint32_t n_layers = 4;
  std::uint32_t hidden_dim = 32;
  std::uint32_t n_heads = 4;
  std::uint32_t vocab_size = 0;
  std::uint32_t max_seq_len = 256;
  std::uint32_t mlp_hidden = 128;
  /// Leading residual dimensions that carry the sinusoidal position code
  /// (even, <= hidden_dim; 0 disables positions).
  std::uint32_t pos_dim = 32;
  /// 1: pre-norm blocks plus final norm. 0: the bare residual recurrence.
  std::uint32_t layer_norm = 1;

  std::uint32_t head_dim() const noexcept { return hidden_dim / n_heads; }
  /// Throws InvalidConfig.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Matrix q, k, v, o;    // d x d
  Matrix w_in;          // d x mlp_hidden
  Matrix w_out;         // mlp_hidden x d

  bool operator==(const LayerWeights&) const = default;
};

/// All projections use row-vector convention: y = x * W.
struct Weights {
  Matrix token_embedding;  // V x d
  std::vector<LayerWeights> layers;
  Vector final_norm_gain;  // d
  Vector final_norm_bias;  // d
  Matrix unembedding;      // d x V

  static Weights zeros(const ModelConfig& config);
  /// Entries ~ N(0, scale^2), norm gain 1 / bias 0.
  static Weights random(const ModelConfig& config, std::uint64_t seed, double scale = 0.2);
  /// Shapes match config and every entry is finite; throws InvalidConfig / InvalidFormat.
  void validate(const ModelConfig& config) const;
  bool operator==(const Weights&) const = default;
};

enum class Stage { PreAttn, PostAttn, PostMlp };
const char* stage_name(Stage stage) noexcept;

struct ResidualSnapshot {
  std::uint32_t layer = 0;
  std::uint32_t position = 0;
  Stage stage = Stage::PostMlp;
  Vector state;
};

struct PositionSelector {
  enum class Kind { All, LastOnly, Explicit };
  Kind kind = Kind::All;
  std::vector<std::size_t> positions;

  static PositionSelector all() { return {}; }
  static PositionSelector last_only() { return {Kind::LastOnly, {}}; }
  static PositionSelector only(std::vector<std::size_t> p) { return {Kind::Explicit, std::move(p)}; }
  bool selects(std::size_t pos, std::size_t n_positions) const;
};

enum class HookMode { Read, Write };

/// Residual-stream hook. Fires on h^(layer+1), i.e. the post-MLP output of
/// `layer`, before the next layer reads it.
struct HookSpec {
  std::uint32_t layer = 0;
  HookMode mode = HookMode::Read;
  PositionSelector positions;
  std::function<Vector(const Vector&)> transform;                    // write
  std::function<void(std::size_t position, const Vector&)> observer;  // read

  static HookSpec write(std::uint32_t layer, std::function<Vector(const Vector&)> fn,
                        PositionSelector positions = PositionSelector::all());
  static HookSpec read(std::uint32_t layer, std::function<void(std::size_t, const Vector&)> fn,
                       PositionSelector positions = PositionSelector::all());
};

struct ForwardOptions {
  /// (layer, stage) pairs to capture at every position. Layer == n_layers is
  /// allowed with Stage::PreAttn and means the final residual.
  std::vector<std::pair<std::uint32_t, Stage>> capture;
  bool last_logits_only = false;
};

struct ForwardResult {
  Matrix logits;  // positions x V (1 x V with last_logits_only)
  std::vector<ResidualSnapshot> snapshots;
};

class Model {
 public:
  Model(ModelConfig config, Weights weights);

  const ModelConfig& config() const noexcept { return config_; }
  const Weights& weights() const noexcept { return weights_; }

  ForwardResult forward(std::span<const TokenId> tokens, std::span<const HookSpec> hooks = {},
                        const ForwardOptions& options = {}) const;

  /// Runs layers [start_layer, L) on an explicit residual matrix (rows are
  /// positions; no embedding or position code is added), then the output head.
  ForwardResult forward_from(Matrix residual, std::uint32_t start_layer,
                             std::span<const HookSpec> hooks = {},
                             const ForwardOptions& options = {}) const;

  /// Sinusoidal position code for one position (length pos_dim).
  std::vector<double> position_code(std::size_t position) const;

  /// Multi-head causal attention output of `layer` for residual rows `h`
  /// (pre-norm applied inside when enabled).
  Matrix attention(std::uint32_t layer, const Matrix& h) const;
  Matrix mlp(std::uint32_t layer, const Matrix& h) const;

 private:
  ModelConfig config_;
  Weights weights_;
};

struct Sampler {
  enum class Kind { Greedy, Temperature };
  Kind kind = Kind::Greedy;
  double temperature = 1.0;

  static Sampler greedy() { return {}; }
  static Sampler with_temperature(double t);
  std::string describe() const;
  static Sampler parse(const std::string& description);
};

/// Greedy pick; the lowest id wins exact ties.
TokenId argmax_token(std::span<const double> logits);
TokenId sample_token(std::span<const double> logits, const Sampler& sampler, Rng& rng);

struct GenerationTrace {
  TokenSeq prompt_tokens;
  TokenSeq generated_tokens;
  std::vector<std::uint64_t> logits_hashes;  // one per sampled token
  std::vector<ResidualSnapshot> snapshots;
  std::string sampler;
  std::uint64_t seed = 0;
  bool stopped_at_eos = false;
  bool context_full = false;
  /// Indices into generated_tokens of tokens inserted rather than sampled.
  std::vector<std::size_t> forced_positions;
  /// Hash of the intervention config used, empty for vanilla runs.
  std::string intervention_hash;

  TokenSeq all_tokens() const;
};

struct GenerateOptions {
  std::size_t max_new = 32;
  Sampler sampler;
  std::uint64_t seed = 0;
  bool stop_at_eos = true;
  std::optional<TokenId> eos;
  /// Snapshots taken from one forward pass over the final sequence.
  std::vector<std::pair<std::uint32_t, Stage>> capture;
};

/// Autoregressive generation without a KV cache: every step re-runs the full
/// forward pass with all hooks active. Stops at max_new, at eos, or when the
/// context is full.
GenerationTrace generate(const Model& model, std::span<const TokenId> prompt,
                         std::span<const HookSpec> hooks, const GenerateOptions& options);

/// Continue `tokens` in place for up to max_new steps with an external RNG;
/// used by multi-segment schedules. Returns the number of tokens appended.
std::size_t extend(const Model& model, TokenSeq& tokens, std::size_t max_new,
                   std::span<const HookSpec> hooks, const Sampler& sampler, Rng& rng,
                   bool stop_at_eos, TokenId eos, std::vector<std::uint64_t>* logits_hashes,
                   bool* stopped_at_eos, bool* context_full);

std::uint64_t hash_logits(std::span<const double> logits) noexcept;

}  // namespace rflx
