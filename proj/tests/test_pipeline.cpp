#include <doctest.h>

#include <json.hpp>

#include "rflx/error.hpp"
#include "rflx/pipeline.hpp"
#include "support.hpp"

using namespace rflx;
using nlohmann::json;

namespace {

json base_config(const std::filesystem::path& out) {
  return {{"seed", 5},
          {"vocab", std::string(RFLX_ASSET_DIR) + "/vocab.json"},
          {"keywords", std::string(RFLX_ASSET_DIR) + "/keywords.json"},
          {"output_dir", out.string()},
          {"model", {{"enabled", false}, {"planted", json::object()}}}};
}

Errc config_code(const json& j) {
  try {
    parse_experiment_config(j.dump(), RFLX_CONFIG_DIR);
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::StageFailure;  // i.e. no error
}

json small_corpus(int from, int to, const std::string& sum_prefix = " the sum is even.") {
  std::vector<int> odd, even;
  for (int n = from; n <= to; ++n) (n % 2 ? odd : even).push_back(n);
  return {{"generate",
           {{"templates",
             json::array({{{"id", "o-{n}"}, {"question", "Is {n} odd?"}, {"prefix", " {n} is odd."}, {"values", odd}},
                          {{"id", "s-{n}"}, {"question", "What is {n} plus 1?"}, {"prefix", sum_prefix},
                           {"values", even}}})},
            {"max_new", 12}}}};
}

}  // namespace

TEST_CASE("all stages disabled gives an empty manifest") {
  const auto out = rflx::test::scratch("pipeline_empty");
  const Manifest m = run_pipeline(parse_experiment_config(base_config(out).dump(), RFLX_CONFIG_DIR));
  CHECK(m.status == "ok");
  CHECK(m.artifacts.empty());
  CHECK(m.completed_stages.empty());
  CHECK(std::filesystem::exists(out / "manifest.json"));
  CHECK(json::parse(read_file(out / "manifest.json"))["format"] == "rflx-manifest-1");
}

TEST_CASE("config validation errors") {
  const auto out = rflx::test::scratch("pipeline_cfg");
  json j = base_config(out);
  CHECK(config_code(j) == Errc::StageFailure);

  json unknown = j;
  unknown["sede"] = 1;
  CHECK(config_code(unknown) == Errc::InvalidConfig);

  json no_seed = j;
  no_seed.erase("seed");
  CHECK(config_code(no_seed) == Errc::InvalidConfig);

  json detect_only = j;
  detect_only["detect"] = {{"window", 100}};
  CHECK(config_code(detect_only) == Errc::InvalidConfig);

  json bad_file = j;
  bad_file["vocab"] = "/nonexistent/vocab.json";
  CHECK_THROWS_AS(parse_experiment_config(bad_file.dump(), RFLX_CONFIG_DIR), Error);

  json text_collect = j;
  text_collect["corpus"] = {{"ingest", {{"path", std::string(RFLX_CONFIG_DIR) + "/probe_cases.jsonl"},
                                        {"format", "jsonl-text"}}}};
  text_collect["detect"] = json::object();
  text_collect["collect"] = json::object();
  CHECK(config_code(text_collect) == Errc::InvalidConfig);

  json over_cap = j;
  over_cap["corpus"] = small_corpus(1, 2);
  over_cap["corpus"]["generate"]["max_new"] = 40000;
  CHECK(config_code(over_cap) == Errc::InvalidConfig);

  CHECK_THROWS_AS(parse_experiment_config("{not json", RFLX_CONFIG_DIR), Error);
}

TEST_CASE("config hash ignores the output directory only") {
  json a = base_config("/tmp/a"), b = base_config("/tmp/b"), c = base_config("/tmp/a");
  c["seed"] = 6;
  const auto ha = parse_experiment_config(a.dump(), RFLX_CONFIG_DIR).hash();
  CHECK(ha == parse_experiment_config(b.dump(), RFLX_CONFIG_DIR).hash());
  CHECK(ha != parse_experiment_config(c.dump(), RFLX_CONFIG_DIR).hash());
  CHECK(ha.size() == 64);
}

TEST_CASE("a failing stage stops the run and is recorded") {
  const auto out = rflx::test::scratch("pipeline_fail");
  json j = base_config(out);
  j["model"] = {{"planted", json::object()}};
  j["corpus"] = small_corpus(2, 2);  // no odd prompt: no reflection anywhere
  j["corpus"]["generate"]["templates"][0]["values"] = json::array();
  j["detect"] = json::object();
  j["collect"] = json::object();
  const Manifest m = run_pipeline(parse_experiment_config(j.dump(), RFLX_CONFIG_DIR));
  CHECK(m.status == "failed");
  CHECK(m.failed_stage == "collect");
  CHECK(m.error_code == static_cast<int>(Errc::EmptyPositiveSet));
  CHECK(m.completed_stages == std::vector<std::string>{"model", "corpus", "detect"});
  const json disk = json::parse(read_file(out / "manifest.json"));
  CHECK(disk["status"] == "failed");
}

TEST_CASE("small planted run with a validation split") {
  const auto out = rflx::test::scratch("pipeline_small");
  json j = base_config(out);
  j["model"] = {{"planted", json::object()}};
  j["corpus"] = small_corpus(1, 12);
  j["detect"] = json::object();
  j["collect"] = json::object();
  j["extract"] = json::object();
  j["sweep_alpha"] = {{"grid", {-0.2, 0, 0.2}},
                      {"val_fraction", 0.25},
                      {"eval",
                       {{"items", json::array({{{"id", "a"}, {"question", "Is 3 odd?"}, {"prefix", " 3 is odd."}},
                                               {{"id", "b"}, {"question", "Is 5 odd?"}, {"prefix", " 5 is odd."}},
                                               {{"id", "c"}, {"question", "Is 7 odd?"}, {"prefix", " 7 is odd."}},
                                               {{"id", "d"}, {"question", "Is 9 odd?"}, {"prefix", " 9 is odd."}}})},
                        {"max_new", 6}}}};
  j["project"] = {{"layers", {0, 3}}};
  const Manifest m = run_pipeline(parse_experiment_config(j.dump(), RFLX_CONFIG_DIR));
  REQUIRE(m.status == "ok");
  std::set<std::string> paths;
  for (const ManifestArtifact& a : m.artifacts) {
    paths.insert(a.path);
    CHECK(sha256_file(out / a.path) == a.sha256);
  }
  for (const char* p : {"model/model.rflxw", "model/planted.json", "corpus/corpus.jsonl", "detect/detection.json",
                        "sets/sets.json", "vectors/layer_03.json", "sweeps/alpha.csv", "sweeps/alpha_val.csv",
                        "projection/layer_00.csv", "projection/layer_03.json"}) {
    CHECK_MESSAGE(paths.count(p) == 1, p);
  }
  CHECK(std::is_sorted(m.artifacts.begin(), m.artifacts.end(),
                       [](const ManifestArtifact& a, const ManifestArtifact& b) { return a.path < b.path; }));
}

TEST_CASE("projection report") {
  HiddenStateSets same;
  same.layers[0].reflect = {{0, 0, 1}, {1, 0, 0}, {0, 2, 1}};
  same.layers[0].non_reflect = same.layers[0].reflect;
  CHECK(projection_report(same, 0).fisher == 0.0);
  const auto dir = rflx::test::scratch("projection");
  const auto files = emit_projection_report(same, 0, 4, dir);
  CHECK(files.size() == 2);
  const json j = json::parse(read_file(dir / "layer_00.json"));
  CHECK(j["fisher_separability"] == 0.0);
  CHECK(read_file(dir / "layer_00.csv").rfind("x,y,label\n", 0) == 0);
  try {
    emit_projection_report(same, 4, 4, dir);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::InvalidConfig);
  }
}
