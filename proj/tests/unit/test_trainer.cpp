#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <sstream>

#include "lddpo/analysis.hpp"
#include "lddpo/checkpoint.hpp"
#include "lddpo/trainer.hpp"
#include "oracles.hpp"

using namespace lddpo;
using Catch::Matchers::WithinAbs;

namespace {

TrainConfig small_cfg() {
  TrainConfig c;
  c.epochs_sft = 5;
  c.epochs_po = 3;
  c.seed = 1;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.method.alpha = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_po = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr_po = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("cosine schedule with warmup") {
  CHECK(scheduled_lr(1.0, LrSchedule::kConstant, 0.1, 5, 100) == 1.0);
  CHECK_THAT(scheduled_lr(1.0, LrSchedule::kCosine, 0.1, 0, 100), WithinAbs(0.1, 1e-15));
  CHECK_THAT(scheduled_lr(1.0, LrSchedule::kCosine, 0.1, 9, 100), WithinAbs(1.0, 1e-15));
  CHECK_THAT(scheduled_lr(1.0, LrSchedule::kCosine, 0.1, 10, 100), WithinAbs(1.0, 1e-15));
  CHECK_THAT(scheduled_lr(1.0, LrSchedule::kCosine, 0.1, 55, 100), WithinAbs(0.5, 1e-15));
  for (std::size_t s = 10; s + 1 < 100; ++s) {
    CHECK(scheduled_lr(1.0, LrSchedule::kCosine, 0.1, s + 1, 100) <=
          scheduled_lr(1.0, LrSchedule::kCosine, 0.1, s, 100));
  }
}

TEST_CASE("batches partition the data") {
  const auto b = make_batches(10, 4, 3, 0);
  REQUIRE(b.size() == 3);
  CHECK(b[2].size() == 2);
  std::set<std::size_t> all;
  for (const auto& x : b) all.insert(x.begin(), x.end());
  CHECK(all.size() == 10);
  CHECK(make_batches(10, 4, 3, 1) != b);
  CHECK(make_batches(10, 4, 3, 0) == b);
}

TEST_CASE("train_sft") {
  const auto w = WorldSpec::make_default();
  const auto train = gen_dataset(w, 500, 1);
  const auto held = gen_dataset(w, 500, 2);

  SECTION("improves held-out likelihood over the uniform start") {
    const auto p = train_sft(w.vocab, train, small_cfg());
    CHECK(sft_nll(p, held) < sft_nll(PolicyModel(w.vocab, 1), held));
  }

  SECTION("point mass is reproduced by greedy decoding") {
    const PreferencePair pair{{2}, {6, 7, 6, 1}, {6, 7, 6, 1}, 1.0, 0.0};
    const Dataset d(16, pair);
    TrainConfig c = small_cfg();
    c.order = 2;
    c.epochs_sft = 30;
    const auto p = train_sft(w.vocab, d, c);
    CHECK(greedy(p, pair.prompt, 10).tokens == pair.chosen);
  }

  SECTION("deterministic checkpoint bytes") {
    CHECK(checkpoint_bytes(train_sft(w.vocab, train, small_cfg())) ==
          checkpoint_bytes(train_sft(w.vocab, train, small_cfg())));
  }

  SECTION("record shape") {
    RunRecord r;
    train_sft(w.vocab, train, small_cfg(), &r);
    CHECK(r.steps() == 5 * 4);
    CHECK(r.epoch_loss.size() == 5);
    CHECK(r.epoch_logp_w.back() > r.epoch_logp_w.front());
    CHECK(r.epoch_loss.back() < r.epoch_loss.front());
  }

  SECTION("empty dataset") { CHECK_THROWS_AS(train_sft(w.vocab, {}, small_cfg()), ConfigError); }
}

TEST_CASE("train_po") {
  const auto w = WorldSpec::make_default();
  const auto data = gen_dataset(w, 300, 3);
  const auto sft = train_sft(w.vocab, data, small_cfg());

  SECTION("zero learning rate leaves the policy unchanged") {
    TrainConfig c = small_cfg();
    c.lr_po = 0.0;
    CHECK(train_po(sft, sft, data, c) == sft);
  }

  SECTION("single pair overfit raises the margin") {
    const Dataset one{data[0]};
    TrainConfig c = small_cfg();
    c.epochs_po = 50;
    c.batch_po = 1;
    const auto p = train_po(sft, sft, one, c);
    auto margin = [&](const PolicyModel& m) {
      return seq_logprob(m, one[0].prompt, one[0].chosen).sum_full() -
             seq_logprob(m, one[0].prompt, one[0].rejected).sum_full();
    };
    CHECK(margin(p) > margin(sft) + 1.0);
  }

  SECTION("ld-dpo at alpha 1 reproduces dpo step for step") {
    TrainConfig a = small_cfg(), b = small_cfg();
    b.method.method = Method::kLdDpo;
    b.method.alpha = 1.0;
    RunRecord ra, rb;
    CHECK(train_po(sft, sft, data, a, &ra) == train_po(sft, sft, data, b, &rb));
    CHECK(ra.step_loss == rb.step_loss);
    CHECK(ra.step_logp_w == rb.step_logp_w);
  }

  SECTION("every method lowers its own objective") {
    for (Method k : {Method::kDpo, Method::kLdDpo, Method::kRDpo, Method::kSimPo,
                     Method::kLdChosen, Method::kLdRejected}) {
      TrainConfig c = small_cfg();
      c.method.method = k;
      c.method.alpha = 0.5;
      const auto p = train_po(sft, sft, data, c);
      CHECK(dataset_objective(p, sft, data, c.method) < dataset_objective(sft, sft, data, c.method));
    }
  }

  SECTION("shape mismatch and empty data") {
    const PolicyModel other(Vocab::make(1, 1, 1), 1);
    CHECK_THROWS_AS(train_po(sft, other, data, small_cfg()), ConfigError);
    CHECK_THROWS_AS(train_po(sft, sft, {}, small_cfg()), ConfigError);
  }
}

TEST_CASE("dataset_objective gradient matches central differences") {
  const auto w = WorldSpec::make_default(2, 2, 2);
  const auto data = gen_dataset(w, 6, 4);
  Rng rng(5);
  const auto pol = oracle::random_policy(w.vocab, 1, rng, 1.0);
  const auto ref = oracle::random_policy(w.vocab, 1, rng, 1.0);
  MethodConfig m;
  m.method = Method::kLdDpo;
  m.alpha = 0.3;
  std::vector<double> g;
  dataset_objective(pol, ref, data, m, &g);
  auto f = [&](std::span<const double> theta) {
    PolicyModel q = pol;
    std::copy(theta.begin(), theta.end(), q.logits().begin());
    return dataset_objective(q, ref, data, m);
  };
  const std::vector<double> theta(pol.logits().begin(), pol.logits().end());
  const auto fd = finite_diff(f, theta, 1e-5);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(rel_error(g[i], fd[i], 1e-6) < 1e-5);
}

TEST_CASE("avg_sample_length") {
  const Vocab v = Vocab::make(1, 1, 0);
  const std::vector<TokenSeq> prompts{{2}};

  SECTION("eos-only policy") {
    PolicyModel p(v, 1);
    for (std::size_t c = 0; c < p.num_contexts(); ++c) p.row(c)[1] = 100.0;
    const auto s = avg_sample_length(p, prompts, 100, 1, 50);
    CHECK(s.mean == 1.0);
    CHECK(s.truncation_rate == 0.0);
  }

  SECTION("uniform policy") {
    const PolicyModel p(v, 1);
    const auto s = avg_sample_length(p, prompts, 10000, 2, 50);
    const auto m = oracle::truncated_geometric(0.25, 50);
    REQUIRE(s.mean.has_value());
    CHECK(std::abs(*s.mean - m.mean) < 3.0 * std::sqrt(m.var / static_cast<double>(s.kept)));
  }

  SECTION("deterministic") {
    const PolicyModel p(v, 1);
    CHECK(avg_sample_length(p, prompts, 500, 3, 50).mean ==
          avg_sample_length(p, prompts, 500, 3, 50).mean);
  }

  SECTION("all truncated") {
    PolicyModel p(v, 1);
    for (std::size_t c = 0; c < p.num_contexts(); ++c) p.row(c)[1] = -100.0;
    const auto s = avg_sample_length(p, prompts, 50, 4, 5);
    CHECK_FALSE(s.mean.has_value());
    CHECK(s.truncation_rate == 1.0);
  }
}

TEST_CASE("evaluate_samples agrees with avg_sample_length") {
  const auto w = WorldSpec::make_default();
  Rng rng(6);
  const auto p = oracle::random_policy(w.vocab, 1, rng, 1.0);
  const auto e = evaluate_samples(p, w, 200, 7, 60);
  const auto s = avg_sample_length(p, world_prompts(w), 200, 7, 60);
  CHECK(e.length.mean == s.mean);
  CHECK(e.length.truncation_rate == s.truncation_rate);
  CHECK(e.mean_quality >= 0.0);
  CHECK(e.mean_quality <= 1.0);
}
