#include "rflx/planted.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numbers>

#include "rflx/error.hpp"
#include "rflx/util.hpp"

namespace rflx {
namespace {

// Fixed scales of the construction; token content vectors have unit scale.
constexpr double kSuccessorGain = 4.0;     // unembedding weight of the successor cycle
constexpr double kWaitGain = 2.0;          // unembedding weight of "wait" along w
constexpr double kPositionShrink = 0.1;    // position code scale after the copy layer
constexpr double kDownstreamScale = 0.25;  // reflection subspace scale after layer k+1
constexpr double kAttentionMargin = 40.0;  // logit gap between previous token and the rest
constexpr double kOtherCycleWeight = 0.6;
constexpr double kOtherSpareWeight = 0.8;

constexpr std::string_view kCycleWords[] = {" so", " the", " value", " is", " 42"};

Vector unit_in_span(const std::vector<Vector>& basis, Rng& rng, std::size_t d) {
  Vector out(d);
  double n2 = 0.0;
  while (n2 == 0.0) {
    out = Vector(d);
    for (const Vector& b : basis) {
      const double c = rng.normal();
      for (std::size_t i = 0; i < d; ++i) out[i] += c * b[i];
    }
    n2 = 0.0;
    for (double x : out) n2 += x * x;
  }
  return scale(out, 1.0 / std::sqrt(n2));
}

void add_scaled(std::span<double> dst, const Vector& v, double s) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * v[i];
}

}  // namespace

PlantedParams PlantedParams::defaults(const Vocab& vocab, std::uint64_t seed) {
  PlantedParams p;
  p.trigger_first = vocab.id(" odd");
  p.trigger_second = vocab.id(".");
  p.seed = seed;
  return p;
}

std::pair<Weights, PlantedGroundTruth> build_planted_model(const ModelConfig& config,
                                                           const Vocab& vocab,
                                                           const PlantedParams& params) {
  config.validate();
  if (config.layer_norm != 0) {
    throw Error(Errc::InvalidConfig, "planted construction needs layer_norm = 0");
  }
  if (config.n_layers < 3 || config.hidden_dim < 16) {
    throw Error(Errc::ConfigTooSmall, "planted model needs n_layers >= 3 and hidden_dim >= 16");
  }
  if (config.pos_dim < 4 || config.head_dim() < config.pos_dim) {
    throw Error(Errc::ConfigTooSmall, "planted model needs pos_dim >= 4 and head_dim >= pos_dim");
  }
  if (config.vocab_size != vocab.size()) {
    throw Error(Errc::InvalidConfig, "vocab_size does not match the vocabulary");
  }
  if (params.trigger_first >= vocab.size() || params.trigger_second >= vocab.size()) {
    throw Error(Errc::TokenOutOfVocab, "trigger token outside vocabulary");
  }
  if (params.trigger_first == params.trigger_second) {
    throw Error(Errc::InvalidConfig, "trigger tokens must differ");
  }
  if (!(params.write_gain > 0.0) || !std::isfinite(params.gate_threshold)) {
    throw Error(Errc::InvalidConfig, "write_gain must be positive and threshold finite");
  }

  const std::size_t d = config.hidden_dim;
  const std::size_t pos = config.pos_dim;
  // Non-position directions: const, prev-copy, first, second, wait-successor.
  const std::size_t avail = d - pos - 5;
  const std::size_t n_reflect = std::max<std::size_t>(1, avail / 4);
  if (avail < n_reflect + 2) throw Error(Errc::ConfigTooSmall, "hidden_dim too small for layout");
  const std::size_t n_cycle = std::min<std::size_t>(std::size(kCycleWords), avail - n_reflect - 1);
  const std::size_t n_spare = avail - n_reflect - n_cycle;
  if (config.mlp_hidden < std::max(2 * pos, 2 * n_reflect)) {
    throw Error(Errc::ConfigTooSmall, "mlp_hidden must be >= max(2*pos_dim, 2*reflect_dims)");
  }

  const std::vector<TokenId> wait_ids = vocab.variants_of("wait");
  if (wait_ids.empty()) throw Error(Errc::MissingVariant, "vocab has no 'wait' variants");
  const TokenId wait = vocab.find(" wait").value_or(wait_ids.front());
  std::vector<TokenId> cycle;
  for (std::size_t j = 0; j < n_cycle; ++j) cycle.push_back(vocab.id(kCycleWords[j]));
  for (TokenId t : {params.trigger_first, params.trigger_second}) {
    if (std::find(cycle.begin(), cycle.end(), t) != cycle.end() ||
        std::find(wait_ids.begin(), wait_ids.end(), t) != wait_ids.end()) {
      throw Error(Errc::InvalidConfig, "trigger token collides with the planted cycle or 'wait'");
    }
  }

  Rng rng(params.seed);

  // Random orthonormal basis of the non-position coordinates.
  const std::size_t free_dims = d - pos;
  std::vector<Vector> basis;
  for (std::size_t b = 0; b < free_dims; ++b) {
    Vector v(d);
    for (std::size_t i = pos; i < d; ++i) v[i] = rng.normal();
    for (const Vector& prev : basis) {
      double c = 0.0;
      for (std::size_t i = 0; i < d; ++i) c += v[i] * prev[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= c * prev[i];
    }
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    basis.push_back(scale(v, 1.0 / std::sqrt(n2)));
  }
  std::size_t next = 0;
  const Vector e_const = basis[next++];
  const Vector e_prev = basis[next++];
  const Vector e_first = basis[next++];
  const Vector e_second = basis[next++];
  const Vector e_after_wait = basis[next++];
  std::vector<Vector> e_cycle(basis.begin() + next, basis.begin() + next + n_cycle);
  next += n_cycle;
  std::vector<Vector> e_reflect(basis.begin() + next, basis.begin() + next + n_reflect);
  next += n_reflect;
  std::vector<Vector> e_spare(basis.begin() + next, basis.begin() + next + n_spare);

  const Vector w = unit_in_span(e_reflect, rng, d);
  const Vector t = scale(add(e_second, e_prev), 1.0 / std::numbers::sqrt2);

  Weights weights = Weights::zeros(config);
  const std::uint32_t k = config.n_layers / 2;
  const std::uint32_t copy_layer = k - 1;

  // Embeddings.
  for (TokenId id = 0; id < vocab.size(); ++id) {
    std::span<double> row = weights.token_embedding.row(id);
    add_scaled(row, e_const, 1.0);
    if (id == params.trigger_first) {
      add_scaled(row, e_first, 1.0);
    } else if (id == params.trigger_second) {
      add_scaled(row, e_second, 1.0);
    } else if (auto it = std::find(cycle.begin(), cycle.end(), id); it != cycle.end()) {
      add_scaled(row, e_cycle[static_cast<std::size_t>(it - cycle.begin())], 1.0);
    } else if (std::find(wait_ids.begin(), wait_ids.end(), id) != wait_ids.end()) {
      add_scaled(row, e_after_wait, kOtherCycleWeight);
      add_scaled(row, unit_in_span(e_spare, rng, d), kOtherSpareWeight);
    } else {
      const std::size_t h = static_cast<std::size_t>(rng.next_u64() % n_cycle);
      add_scaled(row, e_cycle[h], kOtherCycleWeight);
      add_scaled(row, unit_in_span(e_spare, rng, d), kOtherSpareWeight);
    }
  }

  // Copy layer attention, head 0: query is the position code rotated back
  // one step, key the position code, value the first-trigger component.
  {
    LayerWeights& lw = weights.layers[copy_layer];
    const double hd = static_cast<double>(config.head_dim());
    std::vector<double> omegas(pos / 2);
    for (std::size_t f = 0; f < pos / 2; ++f) {
      omegas[f] = std::pow(10000.0, -2.0 * static_cast<double>(f) / static_cast<double>(pos));
    }
    auto similarity = [&](double delta) {
      double s = 0.0;
      for (double om : omegas) s += std::cos(om * delta);
      return s;
    };
    double runner_up = similarity(-1.0);
    for (std::size_t delta = 1; delta + 1 < config.max_seq_len; ++delta) {
      runner_up = std::max(runner_up, similarity(static_cast<double>(delta)));
    }
    const double margin = static_cast<double>(pos / 2) - runner_up;
    if (!(margin > 1e-6)) throw Error(Errc::ConfigTooSmall, "position code cannot separate neighbours");
    const double sharp = kAttentionMargin * std::sqrt(hd) / margin;
    for (std::size_t f = 0; f < pos / 2; ++f) {
      const double c = std::cos(omegas[f]);
      const double s = std::sin(omegas[f]);
      const std::size_t a = 2 * f;
      const std::size_t b = 2 * f + 1;
      lw.q.at(a, a) = sharp * c;
      lw.q.at(b, a) = -sharp * s;
      lw.q.at(a, b) = sharp * s;
      lw.q.at(b, b) = sharp * c;
      lw.k.at(a, a) = 1.0;
      lw.k.at(b, b) = 1.0;
    }
    for (std::size_t i = 0; i < d; ++i) {
      lw.v.at(i, 0) = e_first[i];
      lw.o.at(0, i) = e_prev[i];
    }
    // MLP: h_pos <- kPositionShrink * h_pos via relu(x) - relu(-x) pairs.
    for (std::size_t i = 0; i < pos; ++i) {
      lw.w_in.at(i, 2 * i) = 1.0;
      lw.w_in.at(i, 2 * i + 1) = -1.0;
      lw.w_out.at(2 * i, i) = -(1.0 - kPositionShrink);
      lw.w_out.at(2 * i + 1, i) = 1.0 - kPositionShrink;
    }
  }

  // Gate: relu(<h, t> - theta) * beta * w, threshold carried by the constant channel.
  {
    LayerWeights& lw = weights.layers[k];
    for (std::size_t i = 0; i < d; ++i) {
      lw.w_in.at(i, 0) = t[i] - params.gate_threshold * e_const[i];
      lw.w_out.at(0, i) = params.write_gain * w[i];
    }
  }

  double attenuation = 1.0;
  if (k + 1 < config.n_layers) {
    LayerWeights& lw = weights.layers[k + 1];
    for (std::size_t j = 0; j < n_reflect; ++j) {
      for (std::size_t i = 0; i < d; ++i) {
        lw.w_in.at(i, 2 * j) = e_reflect[j][i];
        lw.w_in.at(i, 2 * j + 1) = -e_reflect[j][i];
        lw.w_out.at(2 * j, i) = -(1.0 - kDownstreamScale) * e_reflect[j][i];
        lw.w_out.at(2 * j + 1, i) = (1.0 - kDownstreamScale) * e_reflect[j][i];
      }
    }
    attenuation = kDownstreamScale;
  }

  // Unembedding: successor cycle plus "wait" along w.
  auto column_add = [&](TokenId col, const Vector& v, double s) {
    for (std::size_t i = 0; i < d; ++i) weights.unembedding.at(i, col) += s * v[i];
  };
  column_add(cycle.front(), e_second, kSuccessorGain);
  column_add(cycle.front(), e_after_wait, kSuccessorGain);
  for (std::size_t j = 1; j < n_cycle; ++j) column_add(cycle[j], e_cycle[j - 1], kSuccessorGain);
  column_add(params.trigger_second, e_cycle.back(), kSuccessorGain);
  column_add(params.trigger_second, e_first, kSuccessorGain);
  column_add(wait, w, kWaitGain);

  PlantedGroundTruth truth;
  truth.direction = w;
  truth.trigger_direction = t;
  truth.trigger_layer = k;
  truth.copy_layer = copy_layer;
  truth.gate_threshold = params.gate_threshold;
  truth.write_gain = params.write_gain;
  truth.seed = params.seed;
  truth.trigger_first = params.trigger_first;
  truth.trigger_second = params.trigger_second;
  truth.wait_token = wait;
  truth.downstream_attenuation = attenuation;
  return {std::move(weights), std::move(truth)};
}

std::string PlantedGroundTruth::to_json() const {
  nlohmann::json j;
  j["direction"] = direction.raw();
  j["trigger_direction"] = trigger_direction.raw();
  j["layer"] = trigger_layer;
  j["copy_layer"] = copy_layer;
  j["theta"] = gate_threshold;
  j["beta"] = write_gain;
  j["seed"] = seed;
  j["trigger"] = {trigger_first, trigger_second};
  j["wait_token"] = wait_token;
  j["downstream_attenuation"] = downstream_attenuation;
  return j.dump(1);
}

PlantedGroundTruth PlantedGroundTruth::from_json(std::string_view text) {
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    PlantedGroundTruth t;
    t.direction = Vector(j.at("direction").get<std::vector<double>>());
    t.trigger_direction = Vector(j.at("trigger_direction").get<std::vector<double>>());
    t.trigger_layer = j.at("layer").get<std::uint32_t>();
    t.copy_layer = j.at("copy_layer").get<std::uint32_t>();
    t.gate_threshold = j.at("theta").get<double>();
    t.write_gain = j.at("beta").get<double>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.trigger_first = j.at("trigger").at(0).get<TokenId>();
    t.trigger_second = j.at("trigger").at(1).get<TokenId>();
    t.wait_token = j.at("wait_token").get<TokenId>();
    t.downstream_attenuation = j.at("downstream_attenuation").get<double>();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidFormat, std::string("planted sidecar: ") + e.what());
  }
}

}  // namespace rflx
