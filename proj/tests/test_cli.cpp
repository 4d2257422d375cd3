#include <doctest.h>

#include <cstdlib>
#include <json.hpp>
#include <sys/wait.h>

#include "rflx/util.hpp"
#include "support.hpp"

using namespace rflx;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const auto dir = std::filesystem::path(RFLX_SCRATCH_DIR) / "cli";
  std::filesystem::create_directories(dir);
  const auto log = dir / "out.txt";
  const std::string cmd = std::string("\"") + RFLX_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(log);
  return r;
}

}  // namespace

TEST_CASE("every subcommand's help names the protocol it implements") {
  const std::pair<const char*, const char*> expected[] = {
      {"plant", "Planted model"},
      {"generate", "Trace generation"},
      {"detect", "Reflection detection"},
      {"probe", "Reflection-inducing probing"},
      {"collect", "Contrastive state collection"},
      {"extract", "Difference-in-means extraction"},
      {"steer", "Steering intervention"},
      {"sweep-alpha", "Scaling search"},
      {"sweep-layer", "Layer selection"},
      {"transfer", "Cross-corpus transfer"},
      {"project", "Separability report"},
      {"pipeline", "End-to-end protocol"},
  };
  for (const auto& [cmd, protocol] : expected) {
    const Run r = run(std::string(cmd) + " --help");
    CHECK_MESSAGE(r.code == 0, cmd);
    CHECK_MESSAGE(r.out.find(protocol) != std::string::npos, cmd);
  }
}

TEST_CASE("exit codes") {
  CHECK(run("").code == 2);
  CHECK(run("steer --bogus-flag").code == 2);
  CHECK(run("pipeline --config /nonexistent/config.json").code == 2);
  CHECK(run("extract --sets /nonexistent/sets --out /tmp/x").code == 3);
  CHECK(run("--simd scalar detect --text \"Wait, re-check.\"").code == 0);

  const auto dir = rflx::test::scratch("cli_codes");
  nlohmann::json cfg = {
      {"seed", 1},
      {"vocab", std::string(RFLX_ASSET_DIR) + "/vocab.json"},
      {"keywords", std::string(RFLX_ASSET_DIR) + "/keywords.json"},
      {"output_dir", (dir / "out").string()},
      {"model", {{"planted", nlohmann::json::object()}}},
      {"corpus",
       {{"generate",
         {{"items", nlohmann::json::array({{{"id", "a"}, {"question", "Hi"}, {"prefix", " the sum"}}})},
          {"max_new", 4}}}}},
      {"detect", nlohmann::json::object()},
      {"collect", nlohmann::json::object()}};
  write_file_atomic(dir / "fail.json", cfg.dump());
  CHECK(run("pipeline --config \"" + (dir / "fail.json").string() + "\"").code == 4);
  cfg["sede"] = 3;
  write_file_atomic(dir / "bad.json", cfg.dump());
  CHECK(run("pipeline --config \"" + (dir / "bad.json").string() + "\"").code == 2);
}

TEST_CASE("plant, collect, extract and steer chain through files") {
  const auto dir = rflx::test::scratch("cli_chain");
  const std::string d = "\"" + dir.string() + "\"";
  REQUIRE(run("plant --out " + d + "/m.rflxw").code == 0);
  CHECK(std::filesystem::exists(dir / "m.planted.json"));
  {
    std::string prompts;
    for (int n = 1; n <= 8; ++n) {
      prompts += nlohmann::json{{"id", "p" + std::to_string(n)},
                                {"question", "Is " + std::to_string(n) + " odd?"},
                                {"prefix", n % 2 ? " " + std::to_string(n) + " is odd." : " the sum is even."}}
                     .dump() +
                 "\n";
    }
    write_file_atomic(dir / "prompts.jsonl", prompts);
  }
  REQUIRE(run("generate --model " + d + "/m.rflxw --prompts " + d + "/prompts.jsonl --max-new 12 --out " + d +
              "/corpus.jsonl")
              .code == 0);
  REQUIRE(run("collect --model " + d + "/m.rflxw --corpus " + d + "/corpus.jsonl --out " + d + "/sets").code == 0);
  REQUIRE(run("extract --sets " + d + "/sets --out " + d + "/vectors").code == 0);
  CHECK(std::filesystem::exists(dir / "vectors" / "layer_03.json"));
  const Run s = run("steer --model " + d + "/m.rflxw --vectors " + d + "/vectors --intervene 3:-0.5 --question \"Is 3 odd?\" --prefix \" 3 is odd.\" --max-new 4");
  CHECK(s.code == 0);
  const auto trace = nlohmann::json::parse(s.out);
  CHECK(trace["generated_text"].get<std::string>().find("wait") == std::string::npos);
  CHECK_FALSE(trace["intervention_hash"].get<std::string>().empty());
}
