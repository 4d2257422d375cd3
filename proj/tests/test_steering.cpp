#include <doctest.h>

#include <cmath>

#include "rflx/error.hpp"
#include "rflx/planted.hpp"
#include "rflx/probing.hpp"
#include "rflx/steering.hpp"
#include "support.hpp"

using namespace rflx;
using rflx::test::keywords;
using rflx::test::vocab;

namespace {

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected rflx::Error");
  return Errc::InvalidFormat;
}

SteeringVector make_sv(Vector v, std::uint32_t layer = 0) {
  SteeringVector sv;
  sv.layer = layer;
  sv.norm = norm(v);
  sv.v = std::move(v);
  return sv;
}

Vector apply(const HookSpec& h, const Vector& x) { return h.transform(x); }

Vector random_vector(Rng& rng, std::size_t d) {
  Vector v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = rng.normal();
  return v;
}

struct PlantedFixture {
  Model model;
  PlantedGroundTruth truth;
  std::vector<TokenSeq> traces;
  CorpusDetection detection;
  HiddenStateSets sets;
  std::vector<TokenSeq> trigger_prompts;
};

TokenSeq prompt(const std::string& q, const std::string& prefix) {
  TokenSeq p = build_prompt(vocab(), q, false);
  const TokenSeq t = vocab().encode(prefix);
  p.insert(p.end(), t.begin(), t.end());
  return p;
}

const PlantedFixture& planted() {
  static const PlantedFixture f = [] {
    ModelConfig c;
    c.n_layers = 6;
    c.hidden_dim = 32;
    c.n_heads = 4;
    c.max_seq_len = 128;
    c.mlp_hidden = 64;
    c.pos_dim = 8;
    c.layer_norm = 0;
    c.vocab_size = static_cast<std::uint32_t>(vocab().size());
    auto [w, truth] = build_planted_model(c, vocab(), PlantedParams::defaults(vocab(), 7));
    PlantedFixture out{Model(c, std::move(w)), truth, {}, {}, {}, {}};
    GenerateOptions g;
    g.max_new = 20;
    g.eos = vocab().special().eos;
    for (int n = 1; n <= 12; ++n) {
      const std::string s = std::to_string(n);
      const TokenSeq p = n % 2 ? prompt("Is " + s + " odd?", " " + s + " is odd.")
                               : prompt("What is " + s + " plus 2?", " the sum is even.");
      out.traces.push_back(generate(out.model, p, {}, g).all_tokens());
    }
    for (int n = 21; n <= 29; n += 2) {
      const std::string s = std::to_string(n);
      out.trigger_prompts.push_back(prompt("Is " + s + " odd?", " yes, " + s + " is odd."));
    }
    out.detection = detect_corpus(vocab(), out.traces, keywords());
    const std::vector<std::uint32_t> layers{0, 1, 2, 3, 4, 5};
    out.sets = collect_sets(out.model, out.traces, out.detection.traces, layers, {"planted", "m", "d"});
    return out;
  }();
  return f;
}

EvalOptions eval_options() {
  EvalOptions o;
  o.max_new = 8;
  o.eos = vocab().special().eos;
  return o;
}

}  // namespace

TEST_CASE("intervention hook examples") {
  const SteeringVector sv = make_sv({1, 0});
  CHECK(apply(make_intervention_hook(sv, 1.0), {1, 1}) == Vector{2, 1});
  CHECK(apply(make_intervention_hook(sv, 0.0), {0.3, -7}) == Vector{0.3, -7});
  CHECK(apply(make_intervention_hook(sv, 0.7), {0, 5}) == Vector{0, 5});
  CHECK(code_of([] { make_intervention_hook(make_sv({0, 0}), 1.0); }) == Errc::ZeroVector);
}

TEST_CASE("hook satisfies the update identity and is orthogonality neutral") {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const Vector v = random_vector(rng, 16), h = random_vector(rng, 16);
    const double alpha = 2 * rng.uniform() - 1;
    const Vector out = apply(make_intervention_hook(make_sv(v), alpha), h);
    const double proj = dot(h, v);
    for (std::size_t i = 0; i < 16; ++i) CHECK(std::abs(out[i] - h[i] - alpha * proj * v[i]) <= 1e-12);
    // Remove the v component from h: the hook must then leave it alone.
    const Vector hp = sub(h, scale(v, proj / dot(v, v)));
    const Vector outp = apply(make_intervention_hook(make_sv(v), alpha), hp);
    for (std::size_t i = 0; i < 16; ++i) CHECK(std::abs(outp[i] - hp[i]) <= 1e-12);
  }
}

TEST_CASE("scale covariance: (s v, alpha / s^2) gives the same hook") {
  Rng rng(2);
  for (double s : {0.5, 2.0, 10.0}) {
    const Vector v = random_vector(rng, 8), h = random_vector(rng, 8);
    const Vector a = apply(make_intervention_hook(make_sv(v), 0.3), h);
    const Vector b = apply(make_intervention_hook(make_sv(scale(v, s)), 0.3 / (s * s)), h);
    for (std::size_t i = 0; i < 8; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
}

TEST_CASE("normalize divides v by its norm first") {
  const SteeringVector sv = make_sv({3, 0});
  const Vector out = apply(make_intervention_hook(sv, 0.5, PositionSelector::all(), true), {2, 1});
  CHECK(out == Vector{3, 1});
}

TEST_CASE("extract_vector examples") {
  HiddenStateSets sets;
  sets.layers[0].reflect = {{2, 0}};
  sets.layers[0].non_reflect = {{0, 0}};
  sets.layers[1].reflect = {{1, 2}, {3, 4}};
  sets.layers[1].non_reflect = {{1, 2}, {3, 4}};
  const SteeringVector a = extract_vector(sets, 0);
  CHECK(a.v == Vector{2, 0});
  CHECK(a.norm == 2.0);
  CHECK(a.usable());
  const SteeringVector b = extract_vector(sets, 1);
  CHECK(b.v == Vector{0, 0});
  CHECK_FALSE(b.usable());
  CHECK(code_of([&] { extract_vector(sets, 7); }) == Errc::MissingSnapshots);
  sets.layers[2].reflect = {{1, 1}};
  CHECK(code_of([&] { extract_vector(sets, 2); }) == Errc::EmptySet);
}

TEST_CASE("difference of means recovers a planted direction") {
  const std::size_t d = 64, n = 1000;
  Rng rng(555);
  const Vector w0 = random_vector(rng, d);
  const Vector w = scale(w0, 1.0 / norm(w0));
  HiddenStateSets sets;
  for (std::size_t i = 0; i < n; ++i) sets.layers[0].reflect.push_back(add(random_vector(rng, d), scale(w, 5.0)));
  for (std::size_t i = 0; i < n; ++i) sets.layers[0].non_reflect.push_back(random_vector(rng, d));
  const SteeringVector sv = extract_vector(sets, 0);
  CHECK(cosine(sv.v, w) >= 0.95);
  CHECK(std::abs(sv.norm - norm(sv.v)) <= 1e-12);
  // Independent recomputation: naive long double accumulation.
  for (std::size_t j = 0; j < d; ++j) {
    long double ra = 0, rb = 0;
    for (const Vector& x : sets.layers[0].reflect) ra += x[j];
    for (const Vector& x : sets.layers[0].non_reflect) rb += x[j];
    CHECK(std::abs(static_cast<double>(ra / n - rb / n) - sv.v[j]) <= 1e-10);
  }
}

TEST_CASE("steering vector files round trip bit for bit") {
  Rng rng(3);
  SteeringVector sv = make_sv(random_vector(rng, 32), 4);
  sv.v[0] = 0.1 + 0.2;  // a value with no short decimal form
  sv.norm = norm(sv.v);
  sv.model_id = "abc";
  sv.corpus = "c";
  sv.n_reflect = 3;
  sv.n_nonreflect = 9;
  sv.detector_hash = "h";
  const SteeringVector back = SteeringVector::from_json(sv.to_json());
  CHECK(back.v == sv.v);
  CHECK(back.norm == sv.norm);
  CHECK(back.layer == 4);
  CHECK(back.n_nonreflect == 9);
  CHECK(back.to_json() == sv.to_json());
  CHECK_THROWS_AS(SteeringVector::from_json(R"({"format":"other"})"), Error);
}

TEST_CASE("intervention config validation") {
  InterventionConfig c;
  c.entries = {{1, 0.5}, {2, -1.0}};
  CHECK_NOTHROW(c.validate());
  c.entries = {{1, 0.5}, {1, 0.1}};
  CHECK(code_of([&] { c.validate(); }) == Errc::InvalidConfig);
  c.entries = {{1, 1.5}};
  CHECK(code_of([&] { c.validate(); }) == Errc::InvalidConfig);
  c.entries = {{1, std::nan("")}};
  CHECK(code_of([&] { c.validate(); }) == Errc::InvalidConfig);
  InterventionConfig a, b;
  a.entries = b.entries = {{3, 0.1}};
  CHECK(a.hash() == b.hash());
  b.entries[0].alpha = 0.2;
  CHECK(a.hash() != b.hash());
}

TEST_CASE("collect_sets counts and errors") {
  ModelConfig c;
  c.n_layers = 6;
  c.vocab_size = static_cast<std::uint32_t>(vocab().size());
  c.pos_dim = 8;
  const Model m(c, Weights::random(c, 4));
  const Vocab& v = vocab();
  // "." at 1, 4, 7, 10, 13; markers after 4 and 10.
  TokenSeq t;
  for (int i = 0; i < 5; ++i) {
    t.push_back(v.id(" the"));
    t.push_back(v.id("."));
    t.push_back(i == 1 || i == 3 ? v.id(" wait") : v.id(" so"));
  }
  const std::vector<TokenSeq> traces{t};
  const DetectionResult d = detect(v, t, keywords(), 1);
  REQUIRE(d.inducing.size() == 2);
  REQUIRE(d.negatives.size() == 3);
  const std::vector<std::uint32_t> layers{5};
  const HiddenStateSets s = collect_sets(m, traces, std::vector{d}, layers, {});
  CHECK(s.at(5).reflect.size() == 2);
  CHECK(s.at(5).non_reflect.size() == 3);
  CHECK(code_of([&] { s.at(2); }) == Errc::MissingSnapshots);

  const std::vector<TokenSeq> none{v.encode(" the sum is 42.")};
  const auto dn = detect(v, none[0], keywords());
  CHECK(code_of([&] { collect_sets(m, none, std::vector{dn}, layers, {}); }) == Errc::EmptyPositiveSet);

  SUBCASE("state dumps give the same sets") {
    ForwardOptions o;
    for (std::uint32_t l = 0; l < 6; ++l) o.capture.push_back({l, Stage::PostMlp});
    const ForwardResult r = m.forward(t, {}, o);
    StateDump dump{6, static_cast<std::uint32_t>(t.size()), c.hidden_dim, {}};
    dump.data.resize(6 * t.size() * c.hidden_dim);
    for (const ResidualSnapshot& sn : r.snapshots) {
      std::copy(sn.state.begin(), sn.state.end(),
                dump.data.begin() + static_cast<std::ptrdiff_t>((sn.layer * t.size() + sn.position) * c.hidden_dim));
    }
    const HiddenStateSets s2 = collect_sets_from_dumps(std::vector{dump}, std::vector{d}, layers, {});
    CHECK(s2.at(5).reflect == s.at(5).reflect);
    CHECK(s2.at(5).non_reflect == s.at(5).non_reflect);
  }
  SUBCASE("sets survive a save and load") {
    const auto dir = rflx::test::scratch("sets_roundtrip");
    s.save(dir);
    const HiddenStateSets back = HiddenStateSets::load(dir);
    CHECK(back.at(5).reflect == s.at(5).reflect);
    CHECK(back.at(5).non_reflect == s.at(5).non_reflect);
  }
}

TEST_CASE("planted sets: reflect states carry w, non-reflect states do not") {
  const PlantedFixture& f = planted();
  const LayerSets& ls = f.sets.at(f.truth.trigger_layer);
  REQUIRE(!ls.reflect.empty());
  REQUIRE(!ls.non_reflect.empty());
  for (const Vector& h : ls.reflect) CHECK(dot(h, f.truth.direction) > f.truth.write_gain * 0.1);
  for (const Vector& h : ls.non_reflect) CHECK(std::abs(dot(h, f.truth.direction)) <= 1e-9);
  const SteeringVector sv = extract_vector(f.sets, f.truth.trigger_layer);
  CHECK(cosine(sv.v, f.truth.direction) >= 0.95);
}

TEST_CASE("steer_generate with an empty or zero-alpha config matches vanilla") {
  const PlantedFixture& f = planted();
  GenerateOptions g;
  g.max_new = 10;
  g.sampler = Sampler::with_temperature(0.9);
  g.seed = 17;
  std::vector<SteeringVector> vecs;
  InterventionConfig zero;
  for (std::uint32_t l = 0; l < 6; ++l) {
    vecs.push_back(extract_vector(f.sets, l));
    zero.entries.push_back({l, 0.0});
  }
  for (const TokenSeq& p : f.trigger_prompts) {
    const GenerationTrace van = generate(f.model, p, {}, g);
    const GenerationTrace e = steer_generate(f.model, p, {}, vecs, g);
    const GenerationTrace z = steer_generate(f.model, p, zero, vecs, g);
    CHECK(e.generated_tokens == van.generated_tokens);
    CHECK(z.generated_tokens == van.generated_tokens);
    CHECK(z.logits_hashes == van.logits_hashes);
    CHECK_FALSE(z.intervention_hash.empty());
  }
  InterventionConfig missing;
  missing.entries = {{2, 0.1}};
  const std::vector<SteeringVector> only3{extract_vector(f.sets, 3)};
  CHECK(code_of([&] { steer_generate(f.model, f.trigger_prompts[0], missing, only3, g); }) ==
        Errc::LayerVectorMismatch);
}

TEST_CASE("planted: wait probability is non-decreasing in alpha and suppressible") {
  const PlantedFixture& f = planted();
  const SteeringVector sv = make_sv(f.truth.direction, f.truth.trigger_layer);
  const TokenSeq& p = f.trigger_prompts[0];
  double prev = -1;
  bool suppressed = false;
  for (double alpha = -1.0; alpha <= 1.0; alpha += 0.05) {
    const HookSpec h = make_intervention_hook(sv, alpha);
    const ForwardResult r = f.model.forward(p, std::span(&h, 1), {.capture = {}, .last_logits_only = true});
    const auto row = r.logits.row(0);
    double mx = row[0];
    for (double x : row) mx = std::max(mx, x);
    double z = 0;
    for (double x : row) z += std::exp(x - mx);
    const double pw = std::exp(row[f.truth.wait_token] - mx) / z;
    CHECK(pw >= prev - 1e-12);
    prev = pw;
    if (alpha < 0 && argmax_token(row) != f.truth.wait_token) suppressed = true;
  }
  CHECK(suppressed);
}

TEST_CASE("alpha sweep shape, anchor and planted monotonicity") {
  const PlantedFixture& f = planted();
  const SteeringVector sv = extract_vector(f.sets, f.truth.trigger_layer);
  const EvalOptions o = eval_options();
  const std::vector<double> grid{0.5, -0.5, 0.0};
  const SweepResult r = alpha_sweep(f.model, vocab(), sv, grid, f.trigger_prompts, keywords(), o);
  REQUIRE(r.points.size() == 3);
  CHECK(r.points[0].value == -0.5);
  CHECK(r.points[2].value == 0.5);
  CHECK(r.points[1].metrics.digest == r.vanilla.digest);
  CHECK(r.points[1].metrics.reflection_frequency == r.vanilla.reflection_frequency);
  CHECK(r.points[1].metrics.mean_len == r.vanilla.mean_len);

  const std::vector<double> fine{-0.2, -0.1, 0.0, 0.1, 0.2};
  const SweepResult m = alpha_sweep(f.model, vocab(), sv, fine, f.trigger_prompts, keywords(), o);
  bool some_zero = false;
  for (std::size_t i = 0; i < m.points.size(); ++i) {
    if (i > 0) CHECK(m.points[i].metrics.reflection_frequency >= m.points[i - 1].metrics.reflection_frequency);
    if (m.points[i].value < 0 && m.points[i].metrics.reflection_frequency == 0.0) some_zero = true;
  }
  CHECK(some_zero);
  CHECK(m.to_csv().rfind("axis,point,reflection_frequency,mean_len,seed\n", 0) == 0);

  const std::vector<double> no_anchor{-0.1, 0.1};
  CHECK_THROWS_AS(alpha_sweep(f.model, vocab(), sv, no_anchor, f.trigger_prompts, keywords(), o), Error);
  const std::vector<double> too_big{0.0, 1.5};
  CHECK_THROWS_AS(alpha_sweep(f.model, vocab(), sv, too_big, f.trigger_prompts, keywords(), o), Error);
}

TEST_CASE("layer sweep: one row per layer plus groups, peak at the planted layer") {
  const PlantedFixture& f = planted();
  const std::vector<std::vector<std::uint32_t>> groups{{2, 3}};
  const SweepResult r =
      layer_sweep(f.model, vocab(), f.sets, -0.01, f.trigger_prompts, keywords(), eval_options(), groups);
  REQUIRE(r.points.size() == 7);
  CHECK(r.points[6].layers == std::vector<std::uint32_t>{2, 3});
  REQUIRE(r.peak.has_value());
  CHECK(r.points[*r.peak].layers == std::vector<std::uint32_t>{f.truth.trigger_layer});

  HiddenStateSets partial;
  partial.layers[3] = f.sets.at(3);
  CHECK_THROWS_AS(layer_sweep(f.model, vocab(), partial, -0.01, f.trigger_prompts, keywords(), eval_options()),
                  Error);
}

TEST_CASE("transfer analysis") {
  Rng rng(6);
  std::vector<SteeringVector> a;
  for (std::uint32_t l = 0; l < 3; ++l) a.push_back(make_sv(random_vector(rng, 4), l));
  const std::vector<Vector> waits{{0, 0, 1, 0}, {0, 0, 0, 1}};
  for (const TransferRow& row : transfer_analysis(a, a, waits)) CHECK(row.cross_cosine == doctest::Approx(1.0));

  std::vector<SteeringVector> ortho{make_sv({1, 1, 0, 0}, 0)};
  const auto rows = transfer_analysis(ortho, ortho, waits);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].wait_cos_mean == 0.0);
  CHECK(rows[0].wait_cos_var == 0.0);
  CHECK(rows[0].wait_cosines.size() == 2);

  std::vector<SteeringVector> wrong{make_sv({1, 1, 0}, 0)};
  CHECK(code_of([&] { transfer_analysis(ortho, wrong, waits); }) == Errc::DimensionMismatch);
}

TEST_CASE("budget forcing") {
  const PlantedFixture& f = planted();
  const TokenSeq p = prompt("What is 4 plus 2?", " the sum is even.");
  BudgetOptions b;
  b.segment_len = 6;
  b.wait_token = f.truth.wait_token;

  SUBCASE("no waits equals vanilla") {
    b.n_waits = 0;
    GenerateOptions g;
    g.max_new = 6;
    g.stop_at_eos = false;
    CHECK(budget_forcing(f.model, p, b).generated_tokens == generate(f.model, p, {}, g).generated_tokens);
  }
  SUBCASE("forced tokens sit at the scheduled positions") {
    b.n_waits = 2;
    const GenerationTrace t = budget_forcing(f.model, p, b);
    CHECK(t.forced_positions == std::vector<std::size_t>{6, 13});
    for (std::size_t i : t.forced_positions) CHECK(t.generated_tokens[i] == f.truth.wait_token);
    CHECK(t.generated_tokens.size() == 20);
  }
  SUBCASE("forcing never shortens a trace") {
    b.n_waits = 1;
    b.eos = vocab().special().eos;
    GenerateOptions g;
    g.max_new = 6;
    g.eos = b.eos;
    CHECK(budget_forcing(f.model, p, b).generated_tokens.size() >=
          generate(f.model, p, {}, g).generated_tokens.size());
  }
}
