#include <doctest.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <json.hpp>

#include "rflx/error.hpp"
#include "rflx/util.hpp"
#include "support.hpp"

using namespace rflx;
using rflx::test::keywords;
using rflx::test::vocab;

namespace {

TokenSeq ids_of(const std::vector<std::string>& surfaces) {
  TokenSeq t;
  for (const std::string& s : surfaces) t.push_back(vocab().id(s));
  return t;
}

MarkerSpan span_at(std::size_t s) { return {s, s + 1, "wait", 0, 0}; }

std::vector<std::string> phrases_of(const std::vector<MarkerSpan>& spans) {
  std::vector<std::string> out;
  for (const MarkerSpan& m : spans) out.push_back(m.phrase);
  return out;
}

}  // namespace

TEST_CASE("find_markers examples") {
  const Vocab& v = vocab();
  CHECK(find_markers(v, v.encode("the answer is 42."), keywords()).empty());

  const TokenSeq t = v.encode("Wait, that is wrong.");
  const auto spans = find_markers(v, t, keywords());
  REQUIRE(spans.size() == 1);
  CHECK(spans[0].start == 0);
  CHECK(spans[0].end == 1);
  CHECK(spans[0].phrase == "wait");

  const auto three = find_markers(v, v.encode("Let me re-check. Wait \xE2\x80\x94 try again."), keywords());
  CHECK(phrases_of(three) == std::vector<std::string>{"re-check", "wait", "try again"});
  CHECK(std::is_sorted(three.begin(), three.end(),
                       [](const MarkerSpan& a, const MarkerSpan& b) { return a.start < b.start; }));
}

TEST_CASE("markers respect word boundaries across token splits") {
  const Vocab& v = vocab();
  // "w" "a" "i" "t" as separate tokens still read as the word wait.
  const TokenSeq split{v.id(" the"), v.id(" "), v.id("w"), v.id("a"), v.id("i"), v.id("t"), v.id(".")};
  const auto spans = find_markers(v, split, keywords());
  REQUIRE(spans.size() == 1);
  CHECK(spans[0].start == 2);
  CHECK(spans[0].end == 6);
  CHECK(find_markers(v, v.encode("await weights"), keywords()).empty());
}

TEST_CASE("overlapping matches keep the earliest then the longest") {
  KeywordSet kw;
  kw.phrases = {"wait", "check again", "again we"};
  const Vocab& v = vocab();
  const auto spans = find_markers(v, v.encode("check again we wait"), kw);
  CHECK(phrases_of(spans) == std::vector<std::string>{"check again", "wait"});
}

TEST_CASE("inducing_positions examples") {
  CHECK(inducing_positions(std::vector{span_at(10)}) == std::vector<std::size_t>{9});
  CHECK(inducing_positions(std::vector{span_at(0)}).empty());
  CHECK(inducing_positions(std::vector{span_at(5), span_at(20), span_at(21)}) ==
        std::vector<std::size_t>{4, 19, 20});
}

TEST_CASE("negative_positions examples") {
  const Vocab& v = vocab();
  SUBCASE("every candidate is followed by a marker") {
    const TokenSeq t = ids_of({" the", ".", " wait", " the", ".", " Wait", " so", ".", " so", " wait"});
    const DetectionResult d = detect(v, t, keywords());
    CHECK(d.inducing == std::vector<std::size_t>{1, 4, 8});
    CHECK(d.negatives.empty());
  }
  SUBCASE("form taken from another trace") {
    const TokenSeq t = ids_of({" the", " sum", " is", ".", " so"});
    const std::set<std::string> forms{"."};
    CHECK(negative_positions(v, t, {}, {}, forms) == std::vector<std::size_t>{3});
  }
  SUBCASE("hand-labelled 300-token fixture") {
    const auto fx = nlohmann::json::parse(read_file(std::string(RFLX_FIXTURE_DIR) + "/detector_300.json"));
    const TokenSeq t = ids_of(fx["tokens"].get<std::vector<std::string>>());
    REQUIRE(t.size() == 300);
    const DetectionResult d = detect(v, t, keywords(), fx["window"].get<std::size_t>());
    std::vector<std::size_t> starts;
    for (const MarkerSpan& m : d.markers) starts.push_back(m.start);
    CHECK(starts == fx["markers"].get<std::vector<std::size_t>>());
    CHECK(d.inducing == fx["inducing"].get<std::vector<std::size_t>>());
    CHECK(d.negatives == fx["negatives"].get<std::vector<std::size_t>>());
  }
}

TEST_CASE("window boundary is (p, p + window]") {
  const Vocab& v = vocab();
  // "." at 0 and 5; marker at 10; window 5 means 5 is excluded and 0 kept.
  TokenSeq t(12, v.id(" the"));
  t[0] = t[5] = t[9] = v.id(".");
  t[10] = v.id(" wait");
  const DetectionResult d = detect(v, t, keywords(), 5);
  CHECK(d.inducing == std::vector<std::size_t>{9});
  CHECK(d.negatives == std::vector<std::size_t>{0});
  const DetectionResult d2 = detect(v, t, keywords(), 4);
  CHECK(d2.negatives == std::vector<std::size_t>{0, 5});
}

TEST_CASE("detection invariants on random traces") {
  const Vocab& v = vocab();
  const TokenSeq pool = ids_of({" the", ".", " wait", " so", " Wait", ",", " is", " re-check", " odd", " try again"});
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    TokenSeq t(1 + rng.next_u64() % 150);
    for (TokenId& x : t) x = pool[rng.next_u64() % pool.size()];
    const std::size_t window = 1 + rng.next_u64() % 40;
    const DetectionResult d = detect(v, t, keywords(), window);
    std::set<std::size_t> starts;
    for (const MarkerSpan& m : d.markers) starts.insert(m.start);
    std::set<std::string> forms;
    for (std::size_t p : d.inducing) {
      CHECK(starts.count(p + 1) == 1);  // soundness
      forms.insert(v.token(t[p]));
    }
    for (std::size_t p : d.negatives) {
      CHECK(forms.count(v.token(t[p])) == 1);
      CHECK(std::find(d.inducing.begin(), d.inducing.end(), p) == d.inducing.end());
      for (std::size_t s : starts) CHECK_FALSE((s > p && s <= p + window));
    }
    CHECK(std::is_sorted(d.negatives.begin(), d.negatives.end()));
  }
}

TEST_CASE("every keyword is detected in any letter case") {
  const Vocab& v = vocab();
  const KeywordSet& kw = keywords();
  REQUIRE(kw.phrases.size() == 17);
  for (const std::string& p : kw.phrases) {
    std::string upper = p, title = p;
    std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
    title[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(title[0])));
    for (const std::string& form : {p, upper, title}) {
      const auto spans = find_markers(v, v.encode("So, " + form + ". Then 42"), kw);
      REQUIRE_MESSAGE(spans.size() == 1, form);
      CHECK(spans[0].phrase == p);
    }
  }
}

TEST_CASE("no false positives on the negative sentence fixture") {
  std::ifstream in(std::string(RFLX_FIXTURE_DIR) + "/negative_sentences.txt");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    CHECK_MESSAGE(find_markers(vocab(), vocab().encode(line), keywords()).empty(), line);
  }
  CHECK(n == 50);
}

TEST_CASE("keyword set validation") {
  auto code = [](std::string json) {
    try {
      KeywordSet::from_json(json);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::InvalidFormat;
  };
  CHECK(code(R"({"phrases": []})") == Errc::InvalidKeywordSet);
  CHECK(code(R"({"phrases": ["recheck"]})") == Errc::InvalidKeywordSet);
  CHECK(code(R"({"phrases": ["wait", "wait a"]})") == Errc::InvalidKeywordSet);
  CHECK(code(R"({"phrases": ["wait", "Wait"]})") == Errc::InvalidKeywordSet);
  CHECK(code(R"({"phrases": ["wait", " x"]})") == Errc::InvalidKeywordSet);
  CHECK(code("not json") == Errc::InvalidFormat);
  // "re-check" and "check again" overlap in text but neither contains the other.
  CHECK_NOTHROW(KeywordSet::from_json(R"({"phrases": ["wait", "re-check", "check again"]})"));
  CHECK(KeywordSet::from_json(keywords().to_json()).phrases == keywords().phrases);
  CHECK(KeywordSet::defaults().phrases == keywords().phrases);
}

TEST_CASE("corpus detection pools inducing forms across traces") {
  const Vocab& v = vocab();
  const std::vector<TokenSeq> traces{ids_of({" the", ".", " wait"}), ids_of({" so", ".", " the", " is"})};
  const CorpusDetection cd = detect_corpus(v, traces, keywords());
  CHECK(cd.inducing_forms == std::set<std::string>{"."});
  CHECK(cd.traces[1].negatives == std::vector<std::size_t>{1});
  CHECK(cd.total_markers == 1);
  CHECK(cd.wait_share() == 1.0);
  CHECK(cd.phrase_counts.at("wait") == 1);
  const auto j = nlohmann::json::parse(cd.to_json());
  CHECK(j["total_markers"] == 1);
  CHECK(detector_config_hash(keywords(), 100) != detector_config_hash(keywords(), 99));
}
