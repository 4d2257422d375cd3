#include "rflx/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>

#include "rflx/error.hpp"
#include "rflx/kernels.hpp"

namespace rflx {
namespace {

constexpr double kNormEps = 1e-5;

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale) {
  Matrix m(r, c);
  for (double& x : m.data) x = scale * rng.normal();
  return m;
}

void require_shape(const Matrix& m, std::size_t r, std::size_t c, const char* what) {
  if (m.rows != r || m.cols != c || m.data.size() != r * c) {
    throw Error(Errc::InvalidConfig, std::string(what) + " has shape " + std::to_string(m.rows) +
                                         "x" + std::to_string(m.cols) + ", expected " +
                                         std::to_string(r) + "x" + std::to_string(c));
  }
  check_finite(m.data, what);
}

// Affine-free layer norm of one row.
void normalize_row(std::span<const double> in, std::span<double> out) {
  const double n = static_cast<double>(in.size());
  const double mean = kernels::sum(in) / n;
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] - mean;
  const double var = kernels::dot(out, out) / n;
  const double inv = 1.0 / std::sqrt(var + kNormEps);
  for (double& x : out) x *= inv;
}

Matrix maybe_norm(const Matrix& h, bool enabled) {
  if (!enabled) return h;
  Matrix out(h.rows, h.cols);
  for (std::size_t r = 0; r < h.rows; ++r) normalize_row(h.row(r), out.row(r));
  return out;
}

Matrix project(const Matrix& x, const Matrix& w) {
  Matrix out(x.rows, w.cols);
  for (std::size_t r = 0; r < x.rows; ++r) kernels::vec_mat(x.row(r), w.data, w.cols, out.row(r));
  return out;
}

void capture_rows(const Matrix& h, std::uint32_t layer, Stage stage,
                  const std::vector<std::pair<std::uint32_t, Stage>>& wanted,
                  std::vector<ResidualSnapshot>& out) {
  const bool want = std::any_of(wanted.begin(), wanted.end(), [&](const auto& p) {
    return p.first == layer && p.second == stage;
  });
  if (!want) return;
  for (std::size_t i = 0; i < h.rows; ++i) {
    out.push_back({layer, static_cast<std::uint32_t>(i), stage, Vector(h.row(i))});
  }
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(Errc::InvalidConfig, msg); };
  if (n_layers == 0) fail("n_layers must be positive");
  if (hidden_dim == 0) fail("hidden_dim must be positive");
  if (n_heads == 0 || hidden_dim % n_heads != 0) fail("n_heads must divide hidden_dim");
  if (vocab_size < 8) fail("vocab_size must be >= 8");
  if (max_seq_len < 2) fail("max_seq_len must be >= 2");
  if (mlp_hidden == 0) fail("mlp_hidden must be positive");
  if (pos_dim % 2 != 0 || pos_dim > hidden_dim) fail("pos_dim must be even and <= hidden_dim");
  if (layer_norm > 1) fail("layer_norm must be 0 or 1");
}

Weights Weights::zeros(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.hidden_dim;
  Weights w;
  w.token_embedding = Matrix(config.vocab_size, d);
  w.layers.resize(config.n_layers);
  for (LayerWeights& l : w.layers) {
    l.q = l.k = l.v = l.o = Matrix(d, d);
    l.w_in = Matrix(d, config.mlp_hidden);
    l.w_out = Matrix(config.mlp_hidden, d);
  }
  w.final_norm_gain = Vector(d, 1.0);
  w.final_norm_bias = Vector(d, 0.0);
  w.unembedding = Matrix(d, config.vocab_size);
  return w;
}

Weights Weights::random(const ModelConfig& config, std::uint64_t seed, double scale) {
  config.validate();
  const std::size_t d = config.hidden_dim;
  Rng rng(seed);
  Weights w;
  w.token_embedding = random_matrix(config.vocab_size, d, rng, scale * 5.0);
  w.layers.resize(config.n_layers);
  for (LayerWeights& l : w.layers) {
    l.q = random_matrix(d, d, rng, scale);
    l.k = random_matrix(d, d, rng, scale);
    l.v = random_matrix(d, d, rng, scale);
    l.o = random_matrix(d, d, rng, scale);
    l.w_in = random_matrix(d, config.mlp_hidden, rng, scale);
    l.w_out = random_matrix(config.mlp_hidden, d, rng, scale);
  }
  w.final_norm_gain = Vector(d, 1.0);
  w.final_norm_bias = Vector(d, 0.0);
  w.unembedding = random_matrix(d, config.vocab_size, rng, scale * 5.0);
  return w;
}

void Weights::validate(const ModelConfig& config) const {
  config.validate();
  const std::size_t d = config.hidden_dim;
  require_shape(token_embedding, config.vocab_size, d, "token_embedding");
  if (layers.size() != config.n_layers) throw Error(Errc::InvalidConfig, "layer count mismatch");
  for (const LayerWeights& l : layers) {
    require_shape(l.q, d, d, "attn.q");
    require_shape(l.k, d, d, "attn.k");
    require_shape(l.v, d, d, "attn.v");
    require_shape(l.o, d, d, "attn.o");
    require_shape(l.w_in, d, config.mlp_hidden, "mlp.w_in");
    require_shape(l.w_out, config.mlp_hidden, d, "mlp.w_out");
  }
  if (final_norm_gain.dim() != d || final_norm_bias.dim() != d) {
    throw Error(Errc::InvalidConfig, "final norm parameters must have dim d");
  }
  check_finite(final_norm_gain.values(), "final_norm_gain");
  check_finite(final_norm_bias.values(), "final_norm_bias");
  require_shape(unembedding, d, config.vocab_size, "unembedding");
}

const char* stage_name(Stage stage) noexcept {
  switch (stage) {
    case Stage::PreAttn: return "pre_attn";
    case Stage::PostAttn: return "post_attn";
    case Stage::PostMlp: return "post_mlp";
  }
  return "?";
}

bool PositionSelector::selects(std::size_t pos, std::size_t n_positions) const {
  switch (kind) {
    case Kind::All: return true;
    case Kind::LastOnly: return pos + 1 == n_positions;
    case Kind::Explicit: return std::find(positions.begin(), positions.end(), pos) != positions.end();
  }
  return false;
}

HookSpec HookSpec::write(std::uint32_t layer, std::function<Vector(const Vector&)> fn,
                         PositionSelector positions) {
  HookSpec h;
  h.layer = layer;
  h.mode = HookMode::Write;
  h.positions = std::move(positions);
  h.transform = std::move(fn);
  return h;
}

HookSpec HookSpec::read(std::uint32_t layer, std::function<void(std::size_t, const Vector&)> fn,
                        PositionSelector positions) {
  HookSpec h;
  h.layer = layer;
  h.mode = HookMode::Read;
  h.positions = std::move(positions);
  h.observer = std::move(fn);
  return h;
}

Model::Model(ModelConfig config, Weights weights)
    : config_(config), weights_(std::move(weights)) {
  weights_.validate(config_);
}

std::vector<double> Model::position_code(std::size_t position) const {
  const std::size_t p = config_.pos_dim;
  std::vector<double> code(p);
  for (std::size_t f = 0; f < p / 2; ++f) {
    const double omega = std::pow(10000.0, -2.0 * static_cast<double>(f) / static_cast<double>(p));
    const double angle = omega * static_cast<double>(position);
    code[2 * f] = std::sin(angle);
    code[2 * f + 1] = std::cos(angle);
  }
  return code;
}

Matrix Model::attention(std::uint32_t layer, const Matrix& h) const {
  const LayerWeights& lw = weights_.layers.at(layer);
  const std::size_t n = h.rows;
  const std::size_t d = config_.hidden_dim;
  const std::size_t hd = config_.head_dim();
  const Matrix x = maybe_norm(h, config_.layer_norm != 0);
  const Matrix q = project(x, lw.q);
  const Matrix k = project(x, lw.k);
  const Matrix v = project(x, lw.v);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Matrix context(n, d);
  std::vector<double> scores(n);
  for (std::size_t head = 0; head < config_.n_heads; ++head) {
    const std::size_t off = head * hd;
    for (std::size_t i = 0; i < n; ++i) {
      const std::span<const double> qi = q.row(i).subspan(off, hd);
      double max_score = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        scores[j] = kernels::dot(qi, k.row(j).subspan(off, hd)) * inv_scale;
        max_score = std::max(max_score, scores[j]);
      }
      for (std::size_t j = 0; j <= i; ++j) scores[j] = std::exp(scores[j] - max_score);
      const double z = kernels::sum(std::span<const double>(scores.data(), i + 1));
      for (std::size_t j = 0; j <= i; ++j) scores[j] /= z;
      kernels::vec_mat(std::span<const double>(scores.data(), i + 1),
                       std::span<const double>(v.data).subspan(off), d,
                       context.row(i).subspan(off, hd));
    }
  }
  return project(context, lw.o);
}

Matrix Model::mlp(std::uint32_t layer, const Matrix& h) const {
  const LayerWeights& lw = weights_.layers.at(layer);
  const Matrix x = maybe_norm(h, config_.layer_norm != 0);
  Matrix hidden = project(x, lw.w_in);
  for (double& a : hidden.data) a = a > 0.0 ? a : 0.0;
  return project(hidden, lw.w_out);
}

ForwardResult Model::forward(std::span<const TokenId> tokens, std::span<const HookSpec> hooks,
                             const ForwardOptions& options) const {
  if (tokens.empty()) throw Error(Errc::SequenceTooLong, "empty token sequence");
  if (tokens.size() > config_.max_seq_len) {
    throw Error(Errc::SequenceTooLong, std::to_string(tokens.size()) + " > max_seq_len " +
                                           std::to_string(config_.max_seq_len));
  }
  const std::size_t d = config_.hidden_dim;
  Matrix h(tokens.size(), d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= config_.vocab_size) {
      throw Error(Errc::TokenOutOfVocab, "token " + std::to_string(tokens[i]));
    }
    std::span<double> row = h.row(i);
    const std::span<const double> emb = weights_.token_embedding.row(tokens[i]);
    std::copy(emb.begin(), emb.end(), row.begin());
    if (config_.pos_dim > 0) {
      const std::vector<double> code = position_code(i);
      for (std::size_t c = 0; c < code.size(); ++c) row[c] = row[c] + code[c];
    }
  }
  return forward_from(std::move(h), 0, hooks, options);
}

ForwardResult Model::forward_from(Matrix h, std::uint32_t start_layer,
                                  std::span<const HookSpec> hooks,
                                  const ForwardOptions& options) const {
  const std::size_t d = config_.hidden_dim;
  if (h.cols != d) throw Error(Errc::DimensionMismatch, "residual width != hidden_dim");
  if (h.rows == 0 || h.rows > config_.max_seq_len) {
    throw Error(Errc::SequenceTooLong, "residual has " + std::to_string(h.rows) + " rows");
  }
  if (start_layer > config_.n_layers) throw Error(Errc::InvalidConfig, "start_layer out of range");
  for (const HookSpec& hook : hooks) {
    if (hook.layer >= config_.n_layers) {
      throw Error(Errc::InvalidConfig, "hook layer " + std::to_string(hook.layer) + " out of range");
    }
  }

  ForwardResult result;
  const std::size_t n = h.rows;
  for (std::uint32_t layer = start_layer; layer < config_.n_layers; ++layer) {
    capture_rows(h, layer, Stage::PreAttn, options.capture, result.snapshots);
    const Matrix attn = attention(layer, h);
    for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] = h.data[i] + attn.data[i];
    capture_rows(h, layer, Stage::PostAttn, options.capture, result.snapshots);
    const Matrix m = mlp(layer, h);
    for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] = h.data[i] + m.data[i];

    for (const HookSpec& hook : hooks) {
      if (hook.layer != layer) continue;
      for (std::size_t i = 0; i < n; ++i) {
        if (!hook.positions.selects(i, n)) continue;
        if (hook.mode == HookMode::Write) {
          const Vector updated = hook.transform(Vector(h.row(i)));
          if (updated.dim() != d) {
            throw Error(Errc::HookDimMismatch, "write hook returned dim " +
                                                   std::to_string(updated.dim()));
          }
          std::copy(updated.begin(), updated.end(), h.row(i).begin());
        } else if (hook.observer) {
          hook.observer(i, Vector(h.row(i)));
        }
      }
    }
    capture_rows(h, layer, Stage::PostMlp, options.capture, result.snapshots);
  }
  capture_rows(h, config_.n_layers, Stage::PreAttn, options.capture, result.snapshots);

  const std::size_t first = options.last_logits_only ? n - 1 : 0;
  result.logits = Matrix(n - first, config_.vocab_size);
  std::vector<double> normed(d);
  for (std::size_t i = first; i < n; ++i) {
    std::span<const double> src = h.row(i);
    if (config_.layer_norm != 0) {
      normalize_row(src, normed);
      for (std::size_t c = 0; c < d; ++c) {
        normed[c] = normed[c] * weights_.final_norm_gain[c] + weights_.final_norm_bias[c];
      }
      src = normed;
    }
    kernels::vec_mat(src, weights_.unembedding.data, config_.vocab_size,
                     result.logits.row(i - first));
  }
  return result;
}

Sampler Sampler::with_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) {
    throw Error(Errc::InvalidConfig, "temperature must be positive and finite");
  }
  return {Kind::Temperature, t};
}

std::string Sampler::describe() const {
  if (kind == Kind::Greedy) return "greedy";
  return "temperature:" + format_double(temperature);
}

Sampler Sampler::parse(const std::string& description) {
  if (description == "greedy") return greedy();
  const std::string prefix = "temperature:";
  if (description.rfind(prefix, 0) == 0) {
    return with_temperature(parse_double(std::string_view(description).substr(prefix.size())));
  }
  throw Error(Errc::InvalidConfig, "unknown sampler '" + description + "'");
}

TokenId argmax_token(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

TokenId sample_token(std::span<const double> logits, const Sampler& sampler, Rng& rng) {
  if (sampler.kind == Sampler::Kind::Greedy) return argmax_token(logits);
  const double max_logit = logits[argmax_token(logits)];
  std::vector<double> weights(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    weights[i] = std::exp((logits[i] - max_logit) / sampler.temperature);
  }
  const double total = kernels::sum(weights);
  const double target = rng.uniform() * total;
  double cumulative = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    cumulative += weights[i];
    if (target < cumulative) return static_cast<TokenId>(i);
  }
  // Rounding left target at the very top; take the last non-zero weight.
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0.0) return static_cast<TokenId>(i);
  }
  return 0;
}

std::uint64_t hash_logits(std::span<const double> logits) noexcept {
  return fnv1a64(std::as_bytes(logits));
}

TokenSeq GenerationTrace::all_tokens() const {
  TokenSeq out = prompt_tokens;
  out.insert(out.end(), generated_tokens.begin(), generated_tokens.end());
  return out;
}

std::size_t extend(const Model& model, TokenSeq& tokens, std::size_t max_new,
                   std::span<const HookSpec> hooks, const Sampler& sampler, Rng& rng,
                   bool stop_at_eos, TokenId eos, std::vector<std::uint64_t>* logits_hashes,
                   bool* stopped_at_eos, bool* context_full) {
  ForwardOptions opts;
  opts.last_logits_only = true;
  std::size_t appended = 0;
  while (appended < max_new) {
    if (tokens.size() >= model.config().max_seq_len) {
      if (context_full) *context_full = true;
      break;
    }
    const ForwardResult fr = model.forward(tokens, hooks, opts);
    const std::span<const double> logits = fr.logits.row(0);
    const TokenId next = sample_token(logits, sampler, rng);
    if (logits_hashes) logits_hashes->push_back(hash_logits(logits));
    tokens.push_back(next);
    ++appended;
    if (stop_at_eos && next == eos) {
      if (stopped_at_eos) *stopped_at_eos = true;
      break;
    }
  }
  return appended;
}

GenerationTrace generate(const Model& model, std::span<const TokenId> prompt,
                         std::span<const HookSpec> hooks, const GenerateOptions& options) {
  if (prompt.empty()) throw Error(Errc::SequenceTooLong, "prompt must be non-empty");
  if (options.max_new == 0) throw Error(Errc::InvalidConfig, "max_new must be >= 1");
  GenerationTrace trace;
  trace.prompt_tokens.assign(prompt.begin(), prompt.end());
  trace.sampler = options.sampler.describe();
  trace.seed = options.seed;

  Rng rng(options.seed);
  TokenSeq tokens = trace.prompt_tokens;
  const bool stop = options.stop_at_eos && options.eos.has_value();
  extend(model, tokens, options.max_new, hooks, options.sampler, rng, stop,
         options.eos.value_or(0), &trace.logits_hashes, &trace.stopped_at_eos,
         &trace.context_full);
  trace.generated_tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                                tokens.end());
  if (!options.capture.empty()) {
    ForwardOptions fo;
    fo.capture = options.capture;
    fo.last_logits_only = true;
    trace.snapshots = model.forward(tokens, hooks, fo).snapshots;
  }
  return trace;
}

}  // namespace rflx
