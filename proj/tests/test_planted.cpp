#include <doctest.h>

#include <cmath>

#include "rflx/error.hpp"
#include "rflx/planted.hpp"
#include "rflx/probing.hpp"
#include "support.hpp"

using namespace rflx;
using rflx::test::vocab;

namespace {

ModelConfig planted_config() {
  ModelConfig c;
  c.n_layers = 6;
  c.hidden_dim = 32;
  c.n_heads = 4;
  c.max_seq_len = 128;
  c.mlp_hidden = 64;
  c.pos_dim = 8;
  c.layer_norm = 0;
  c.vocab_size = static_cast<std::uint32_t>(vocab().size());
  return c;
}

struct Planted {
  Model model;
  PlantedGroundTruth truth;
};

const Planted& planted() {
  static const Planted p = [] {
    auto [w, t] = build_planted_model(planted_config(), vocab(), PlantedParams::defaults(vocab(), 7));
    return Planted{Model(planted_config(), std::move(w)), std::move(t)};
  }();
  return p;
}

TokenSeq prompt_with(std::string_view prefix) {
  TokenSeq p = build_prompt(vocab(), "Is 5 odd?", false);
  const TokenSeq tail = vocab().encode(prefix);
  p.insert(p.end(), tail.begin(), tail.end());
  return p;
}

Vector last_state(const Model& m, const TokenSeq& toks, std::uint32_t layer, Stage stage) {
  ForwardOptions o;
  o.capture.push_back({layer, stage});
  const ForwardResult r = m.forward(toks, {}, o);
  return r.snapshots.back().state;
}

}  // namespace

TEST_CASE("planted ground truth is well formed") {
  const auto& [m, t] = planted();
  CHECK(t.trigger_layer == 3);
  CHECK(t.copy_layer == 2);
  CHECK(norm(t.direction) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(norm(t.trigger_direction) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(dot(t.direction, t.trigger_direction)) <= 1e-12);
  CHECK(t.wait_token == vocab().id(" wait"));
  const PlantedGroundTruth back = PlantedGroundTruth::from_json(t.to_json());
  CHECK(back.direction == t.direction);
  CHECK(back.trigger_layer == t.trigger_layer);
  CHECK(back.wait_token == t.wait_token);
}

TEST_CASE("trigger bigram makes wait the next token") {
  const auto& [m, t] = planted();
  const TokenSeq p = prompt_with(" 5 is odd.");
  const ForwardResult r = m.forward(p, {}, {.capture = {}, .last_logits_only = true});
  CHECK(argmax_token(r.logits.row(0)) == t.wait_token);

  GenerateOptions g;
  g.max_new = 5;
  const GenerationTrace tr = generate(m, p, {}, g);
  REQUIRE(!tr.generated_tokens.empty());
  CHECK(tr.generated_tokens.front() == t.wait_token);
}

TEST_CASE("gate writes beta times the margin along w") {
  const auto& [m, t] = planted();
  const TokenSeq p = prompt_with(" 5 is odd.");
  const Vector in = last_state(m, p, t.trigger_layer, Stage::PostAttn);
  const Vector out = last_state(m, p, t.trigger_layer, Stage::PostMlp);
  const double gap = dot(in, t.trigger_direction) - t.gate_threshold;
  CHECK(gap > 0.0);
  CHECK(dot(out, t.direction) >= t.write_gain * gap - 1e-9);
}

TEST_CASE("without the trigger the gate stays closed") {
  const auto& [m, t] = planted();
  for (std::string_view prefix : {" 5 is even.", " the sum is 42", " odd odd", ". odd"}) {
    const Vector out = last_state(m, prompt_with(prefix), t.trigger_layer, Stage::PostMlp);
    CHECK(std::abs(dot(out, t.direction)) <= 1e-9);
  }
  const ForwardResult r = m.forward(prompt_with(" 5 is even."), {}, {.capture = {}, .last_logits_only = true});
  CHECK(argmax_token(r.logits.row(0)) != t.wait_token);
}

TEST_CASE("same seed gives bit-identical weights; other seeds differ") {
  const ModelConfig c = planted_config();
  auto a = build_planted_model(c, vocab(), PlantedParams::defaults(vocab(), 7)).first;
  auto b = build_planted_model(c, vocab(), PlantedParams::defaults(vocab(), 7)).first;
  auto d = build_planted_model(c, vocab(), PlantedParams::defaults(vocab(), 8)).first;
  CHECK(a == b);
  CHECK_FALSE(a == d);
}

TEST_CASE("wait probability is non-decreasing in the gate pre-activation") {
  const auto& [m, t] = planted();
  const std::uint32_t k = t.trigger_layer;
  // The gate reads <h, g> with g = t - theta * const. Moving h along the part
  // of g orthogonal to t changes the pre-activation and nothing the
  // unembedding can see directly.
  const Matrix& w_in = m.weights().layers[k].w_in;
  Vector g(w_in.rows);
  for (std::size_t i = 0; i < w_in.rows; ++i) g[i] = w_in.at(i, 0);
  Vector dir = sub(g, scale(t.trigger_direction, dot(g, t.trigger_direction)));
  dir = scale(dir, 1.0 / norm(dir));

  const TokenSeq p = prompt_with(" 5 is even.");
  ForwardOptions o;
  o.capture.push_back({k, Stage::PostAttn});
  const Vector base_in = m.forward(p, {}, o).snapshots.back().state;
  double prev = -1.0, prev_pre = -1e300;
  for (double shift = -2.0; shift <= 3.0; shift += 0.125) {
    // Apply the shift just before layer k reads the residual.
    const HookSpec h = HookSpec::write(
        k - 1, [&](const Vector& x) { return add(x, scale(dir, shift)); }, PositionSelector::last_only());
    const ForwardResult r = m.forward(p, std::span(&h, 1), o);
    const double pre = dot(r.snapshots.back().state, g);
    CHECK(pre > prev_pre);
    prev_pre = pre;
    const auto row = r.logits.row(r.logits.rows - 1);
    double mx = row[0];
    for (double x : row) mx = std::max(mx, x);
    double z = 0;
    for (double x : row) z += std::exp(x - mx);
    const double pw = std::exp(row[t.wait_token] - mx) / z;
    CHECK(pw >= prev - 1e-15);
    prev = pw;
  }
  CHECK(dot(base_in, g) < 0.0);
  CHECK(prev > 0.5);
}

TEST_CASE("planted construction rejects small or unsuitable configs") {
  const PlantedParams params = PlantedParams::defaults(vocab(), 7);
  auto code = [&](ModelConfig c) {
    try {
      build_planted_model(c, vocab(), params);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::InvalidFormat;
  };
  ModelConfig c = planted_config();
  c.n_layers = 2;
  CHECK(code(c) == Errc::ConfigTooSmall);
  c = planted_config();
  c.hidden_dim = 12;
  c.n_heads = 2;
  CHECK(code(c) == Errc::ConfigTooSmall);
  c = planted_config();
  c.layer_norm = 1;
  CHECK(code(c) == Errc::InvalidConfig);
  PlantedParams bad = params;
  bad.trigger_first = static_cast<TokenId>(vocab().size() + 1);
  CHECK_THROWS_AS(build_planted_model(planted_config(), vocab(), bad), Error);
}
