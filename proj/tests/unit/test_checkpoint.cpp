#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <limits>

#include "lddpo/checkpoint.hpp"
#include "oracles.hpp"

using namespace lddpo;
namespace fs = std::filesystem;

TEST_CASE("checkpoint round trip is bit-exact") {
  Rng rng(1);
  const auto dir = fs::temp_directory_path() / "lddpo_test_checkpoint";
  fs::create_directories(dir);
  for (int order : {1, 2, 3}) {
    auto p = oracle::random_policy(Vocab::make(2, 3, 2), order, rng, 50.0);
    p.logits()[0] = -0.0;
    p.logits()[1] = std::numeric_limits<double>::denorm_min();
    p.logits()[2] = 1.0 / 3.0;
    const auto path = (dir / ("p" + std::to_string(order) + ".ckpt")).string();
    save_checkpoint(p, path, "stage=sft");
    const auto ck = load_checkpoint(path);
    CHECK(ck.policy == p);
    CHECK(ck.note == "stage=sft");
    CHECK(std::signbit(ck.policy.logits()[0]));
    CHECK(checkpoint_bytes(ck.policy, ck.note) == checkpoint_bytes(p, "stage=sft"));
  }
}

TEST_CASE("corrupt checkpoints are rejected") {
  const PolicyModel p(Vocab::make(1, 2, 1), 1);
  const std::string good = checkpoint_bytes(p, "n");
  CHECK(checkpoint_from_bytes(good).policy == p);

  std::string bad = good;
  bad[0] = 'X';
  CHECK_THROWS_AS(checkpoint_from_bytes(bad), IoError);
  CHECK_THROWS_AS(checkpoint_from_bytes(good.substr(0, good.size() - 3)), IoError);
  CHECK_THROWS_AS(checkpoint_from_bytes(good + "x"), IoError);
  CHECK_THROWS_AS(checkpoint_from_bytes(""), IoError);
}

TEST_CASE("missing checkpoint") {
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/p.ckpt"), MissingArtifactError);
}
