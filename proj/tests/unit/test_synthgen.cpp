#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "lddpo/synthgen.hpp"
#include "oracles.hpp"

using namespace lddpo;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "lddpo_test_synthgen";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct GapStats {
  double mean, se;
};

GapStats length_gap(const Dataset& d) {
  double s = 0.0, s2 = 0.0;
  for (const auto& p : d) {
    const double g = static_cast<double>(p.chosen.size()) - static_cast<double>(p.rejected.size());
    s += g;
    s2 += g * g;
  }
  const double n = static_cast<double>(d.size());
  const double m = s / n;
  return {m, std::sqrt((s2 / n - m * m) / n)};
}

}  // namespace

TEST_CASE("default world") {
  const auto w = WorldSpec::make_default();
  CHECK_NOTHROW(w.validate());
  CHECK(w.relevance.size() == 4);
  std::set<TokenId> seen;
  for (const auto& r : w.relevance) {
    CHECK(r.size() == 2);
    for (TokenId t : r) CHECK(seen.insert(t).second);
  }
  CHECK(w.prompt_index(w.prompt(2)) == 2);
  CHECK_THROWS_AS(w.prompt_index(TokenSeq{0}), InputError);
}

TEST_CASE("world validation") {
  auto w = WorldSpec::make_default();
  w.mean_len_w = -1.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = WorldSpec::make_default();
  w.quality_gap = 0.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w.quality_gap = 1.5;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = WorldSpec::make_default();
  w.relevance[0].push_back(w.vocab.filler_ids[0]);
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = WorldSpec::make_default();
  w.mean_len_w = 20.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = WorldSpec::make_default(2, 4, 0);
  CHECK_THROWS_AS(w.validate(), ConfigError);
}

TEST_CASE("quality") {
  const auto w = WorldSpec::make_default();
  const TokenSeq x = w.prompt(0);
  const auto& fill = w.vocab.filler_ids;
  const auto& rel = w.relevance[0];
  CHECK(quality(x, TokenSeq{fill[0], fill[1], 1}, w) == 0.0);
  CHECK(quality(x, TokenSeq{rel[0], rel[1], rel[0], 1}, w) == 1.0);
  CHECK(quality(x, TokenSeq{1}, w) == 0.0);
  CHECK_THROWS_AS(quality(TokenSeq{0}, TokenSeq{1}, w), InputError);

  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const std::size_t pi = rng.below(4);
    TokenSeq y;
    const auto n = rng.below(15);
    for (std::size_t j = 0; j < n; ++j) {
      y.push_back(static_cast<TokenId>(2 + rng.below(static_cast<std::uint64_t>(w.vocab.size - 2))));
    }
    y.push_back(1);
    const std::set<TokenId> content(w.vocab.content_ids.begin(), w.vocab.content_ids.end());
    const std::set<TokenId> relevant(w.relevance[pi].begin(), w.relevance[pi].end());
    int c = 0, r = 0;
    for (TokenId t : y) {
      c += content.count(t) ? 1 : 0;
      r += relevant.count(t) ? 1 : 0;
    }
    const double expect = c == 0 ? 0.0 : static_cast<double>(r) / c;
    CHECK(quality(w.prompt(pi), y, w) == expect);
  }
}

TEST_CASE("gen_dataset structure") {
  const auto w = WorldSpec::make_default();
  const auto d = gen_dataset(w, 500, 3);
  REQUIRE(d.size() == 500);
  for (const auto& p : d) {
    CHECK(p.q_w > p.q_l);
    CHECK(p.chosen.back() == w.vocab.eos_id);
    CHECK(p.rejected.back() == w.vocab.eos_id);
    CHECK(static_cast<int>(p.chosen.size()) <= w.max_len);
    CHECK(static_cast<int>(p.rejected.size()) <= w.max_len);
    CHECK(quality(p.prompt, p.chosen, w) == p.q_w);
    for (std::size_t i = 0; i + 1 < p.chosen.size(); ++i) CHECK(p.chosen[i] != w.vocab.eos_id);
  }
  CHECK(gen_dataset(w, 50, 9) == gen_dataset(w, 50, 9));
  CHECK_FALSE(gen_dataset(w, 50, 9) == gen_dataset(w, 50, 10));
  CHECK_THROWS_AS(gen_dataset(w, 0, 1), ConfigError);
}

TEST_CASE("length gap follows the truncated geometric law") {
  SECTION("equal means") {
    auto w = WorldSpec::make_default();
    w.mean_len_w = w.mean_len_l = 8.0;
    const auto g = length_gap(gen_dataset(w, 10000, 4));
    CHECK(std::abs(g.mean) < 3.0 * g.se);
  }
  SECTION("12 vs 6") {
    const auto w = WorldSpec::make_default();
    const int cap = w.max_len - 1;
    // The calibrated stop probabilities reproduce the configured means.
    for (double m : {1.5, 6.0, 12.0, 19.0}) {
      const double p = geometric_p_for_mean(m, cap);
      CHECK_THAT(oracle::truncated_geometric(p, cap).mean, Catch::Matchers::WithinAbs(m, 1e-9));
    }
    const auto g = length_gap(gen_dataset(w, 10000, 5));
    CHECK(std::abs(g.mean - 6.0) < 3.0 * g.se);
  }
}

TEST_CASE("JSONL persistence") {
  const auto w = WorldSpec::make_default();

  SECTION("empty dataset") {
    const auto f = temp_file("empty.jsonl");
    write_jsonl({}, f.string());
    CHECK(fs::file_size(f) == 0);
    CHECK(read_jsonl(f.string()).empty());
  }

  SECTION("round trip with header") {
    const auto d = gen_dataset(w, 1000, 6);
    const auto f = temp_file("rt.jsonl");
    write_jsonl(d, f.string(), "config_hash=0 seed=6");
    CHECK(read_jsonl(f.string()) == d);
  }

  SECTION("byte-identical across runs") {
    const auto a = temp_file("a.jsonl");
    const auto b = temp_file("b.jsonl");
    write_jsonl(gen_dataset(w, 200, 7), a.string());
    write_jsonl(gen_dataset(w, 200, 7), b.string());
    CHECK(slurp(a) == slurp(b));
  }

  SECTION("truncated final line") {
    std::ostringstream s;
    write_jsonl(s, gen_dataset(w, 3, 8));
    std::string text = s.str();
    text.resize(text.size() - 10);
    std::istringstream in(text);
    try {
      read_jsonl(in);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
  }

  SECTION("extra keys are rejected") {
    std::istringstream in(
        R"({"prompt":[2],"chosen":[1],"rejected":[1],"q_w":1,"q_l":0,"x":1})"
        "\n");
    CHECK_THROWS_AS(read_jsonl(in), ParseError);
  }

  SECTION("missing file") {
    CHECK_THROWS_AS(read_jsonl(temp_file("nope.jsonl").string()), MissingArtifactError);
  }
}

TEST_CASE("summary") {
  Dataset d(2);
  d[0] = {{2}, {4, 4, 1}, {1}, 1.0, 0.0};
  d[1] = {{2}, {1}, {4, 1}, 0.5, 0.0};
  const auto s = summarize(d);
  CHECK(s.n_pairs == 2);
  CHECK(s.mean_len_w == 2.0);
  CHECK(s.mean_len_l == 1.5);
  CHECK(s.mean_q_w == 0.75);
  CHECK(s.chosen_longer == 1);
  CHECK(s.rejected_longer == 1);
}
