#include <catch_amalgamated.hpp>

#include <cmath>

#include "lddpo/analysis.hpp"
#include "lddpo/losses.hpp"
#include "oracles.hpp"

using namespace lddpo;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

SeqLogProb seq(std::vector<double> v) { return SeqLogProb(std::move(v)); }

SeqLogProb random_seq(Rng& rng, std::size_t len) {
  std::vector<double> v(len);
  for (double& x : v) x = rng.uniform(-4.0, -0.01);
  return SeqLogProb(std::move(v));
}

PairLogProbs random_pair(Rng& rng, std::size_t lw, std::size_t ll) {
  return {random_seq(rng, lw), random_seq(rng, ll), random_seq(rng, lw), random_seq(rng, ll)};
}

// Loss as a function of the two policy-side per-token sums, shifting the
// first token so the sums move one-for-one.
double loss_at(const PairLogProbs& p, const MethodConfig& m, double dw, double dl) {
  auto w = p.policy_w.per_token();
  auto l = p.policy_l.per_token();
  w[0] += dw;
  l[0] += dl;
  return evaluate_loss({seq(w), seq(l), p.ref_w, p.ref_l}, m).loss;
}

}  // namespace

TEST_CASE("public_length") {
  CHECK(public_length(5, 3) == 3);
  CHECK(public_length(4, 4) == 4);
  CHECK(public_length(1, 7) == 1);
}

TEST_CASE("ld_logprob") {
  const auto s = seq({-1, -1, -1, -1});
  CHECK(ld_logprob(s, 2, 0.5) == -3.0);
  CHECK(ld_logprob(s, 4, 0.3) == s.sum_full());
  CHECK(ld_logprob(s, 2, 1.0) == s.sum_full());
  CHECK(ld_logprob(s, 2, 0.0) == s.sum_prefix(2));
  CHECK_THROWS_AS(ld_logprob(s, 5, 0.5), InputError);
}

TEST_CASE("dpo_loss") {
  const auto z = seq({-1, -2});
  const PairLogProbs same{z, z, z, z};
  const auto r = dpo_loss(same, 0.1);
  CHECK_THAT(r.loss, WithinAbs(std::log(2.0), 1e-15));
  CHECK_THAT(r.d_loss_d_sw, WithinAbs(-0.05, 1e-15));
  CHECK_THAT(r.d_loss_d_sl, WithinAbs(0.05, 1e-15));
}

TEST_CASE("analytic scalar derivatives match central differences") {
  Rng rng(1);
  std::vector<MethodConfig> methods;
  for (Method k : {Method::kDpo, Method::kLdDpo, Method::kRDpo, Method::kSimPo, Method::kLdChosen,
                   Method::kLdRejected}) {
    MethodConfig m;
    m.method = k;
    m.alpha = 0.35;
    methods.push_back(m);
  }
  for (const auto& m : methods) {
    for (int i = 0; i < 200; ++i) {
      const auto p = random_pair(rng, 1 + rng.below(10), 1 + rng.below(10));
      const auto r = evaluate_loss(p, m);
      const double h = 1e-5;
      const double fw = (loss_at(p, m, h, 0) - loss_at(p, m, -h, 0)) / (2 * h);
      const double fl = (loss_at(p, m, 0, h) - loss_at(p, m, 0, -h)) / (2 * h);
      CHECK(rel_error(r.d_loss_d_sw, fw, 1e-8) < 1e-6);
      CHECK(rel_error(r.d_loss_d_sl, fl, 1e-8) < 1e-6);
    }
  }
}

TEST_CASE("ld_dpo_loss endpoints") {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const auto p = random_pair(rng, 1 + rng.below(12), 1 + rng.below(12));
    const auto d = dpo_loss(p, 0.1);
    const auto l = ld_dpo_loss(p, {1.0, 0.1, LdTarget::kBoth});
    CHECK(d.loss == l.loss);
    CHECK(d.d_loss_d_sw == l.d_loss_d_sw);
    const auto len = 1 + rng.below(12);
    const auto q = random_pair(rng, len, len);
    for (double a : {0.0, 0.25, 0.5, 0.9}) {
      CHECK(ld_dpo_loss(q, {a, 0.1, LdTarget::kBoth}).loss == dpo_loss(q, 0.1).loss);
    }
  }
}

TEST_CASE("ld_dpo_loss at alpha 0 on a hand-built pair") {
  const auto w = seq({-1, -1, -1, -1});
  const auto l = seq({-1, -1});
  const PairLogProbs p{w, l, w, l};
  const auto r = ld_dpo_loss(p, {0.0, 0.1, LdTarget::kBoth});
  CHECK(r.z == 0.0);
  CHECK_THAT(r.loss, WithinAbs(std::log(2.0), 1e-15));
}

TEST_CASE("ld target variants only touch the selected side") {
  // Policy differs from the reference only on the chosen excess, so
  // chosen-only at alpha 0 ignores the difference and rejected-only does not.
  const auto ref_w = seq({-1, -1, -1, -1});
  const auto pol_w = seq({-1, -1, -3, -3});
  const auto l = seq({-1, -1});
  const PairLogProbs p{pol_w, l, ref_w, l};
  CHECK(ld_dpo_loss(p, {0.0, 0.1, LdTarget::kChosenOnly}).z == 0.0);
  CHECK_THAT(ld_dpo_loss(p, {0.0, 0.1, LdTarget::kRejectedOnly}).z, WithinAbs(-0.4, 1e-15));
}

TEST_CASE("r_dpo_loss") {
  Rng rng(3);
  const auto p = random_pair(rng, 7, 3);
  CHECK(r_dpo_loss(p, 0.1, 0.0).loss == dpo_loss(p, 0.1).loss);
  const auto q = random_pair(rng, 5, 5);
  CHECK(r_dpo_loss(q, 0.1, 0.3).loss == dpo_loss(q, 0.1).loss);

  const auto w = seq(std::vector<double>(10, -0.5));
  const auto l = seq(std::vector<double>(5, -0.5));
  const auto r = r_dpo_loss({w, l, w, l}, 0.1, 0.05);
  CHECK_THAT(r.z, WithinAbs(-0.25, 1e-15));
  CHECK_THAT(r.loss, WithinRel(oracle::softplus(0.25), 1e-14));
  CHECK_THAT(r.loss, WithinAbs(0.8259394198788, 1e-12));
}

TEST_CASE("simpo_loss") {
  const auto w = seq({-2, -2, -2});
  const auto l = seq({-2, -2, -2, -2, -2});
  CHECK_THAT(simpo_loss({w, l, w, l}, 2.0, 0.0).loss, WithinAbs(std::log(2.0), 1e-15));

  const auto w5 = seq({-2, -2, -2, -2, -2});
  const auto l3 = seq({-3, -3, -3});
  const auto r = simpo_loss({w5, l3, w5, l3}, 2.0, 1.0);
  CHECK_THAT(r.z, WithinAbs(1.0, 1e-15));
  CHECK_THAT(r.loss, WithinRel(oracle::softplus(-1.0), 1e-14));
  CHECK_THAT(r.loss, WithinAbs(0.313262, 1e-6));
}

TEST_CASE("position weights") {
  MethodConfig m;
  m.method = Method::kLdDpo;
  m.alpha = 0.25;
  CHECK(position_weights(m, true, 4, 2) == std::vector<double>{1, 1, 0.25, 0.25});
  m.method = Method::kLdRejected;
  CHECK(position_weights(m, true, 4, 2) == std::vector<double>{1, 1, 1, 1});
  m.method = Method::kDpo;
  CHECK(position_weights(m, false, 3, 1) == std::vector<double>{1, 1, 1});
}

TEST_CASE("method names round-trip") {
  for (Method k : {Method::kDpo, Method::kLdDpo, Method::kRDpo, Method::kSimPo, Method::kLdChosen,
                   Method::kLdRejected}) {
    CHECK(parse_method(method_name(k)) == k);
  }
  CHECK_FALSE(parse_method("ppo").has_value());
}

TEST_CASE("scalar closed forms") {
  const ScalarPoint sym{0.5, 0.5, 0.5, 0.5, 0.1};
  const auto g = scalar_partials(sym);
  CHECK_THAT(g.d_x1, WithinAbs(-0.1, 1e-15));
  CHECK_THAT(g.d_x2, WithinAbs(0.1, 1e-15));
  const auto so = scalar_second_order(sym);
  CHECK(so.g1_x1 > 0);
  CHECK(so.g1_x2 < 0);
  CHECK(so.g2_x1 < 0);
  CHECK(so.g2_x2 < 0);

  CHECK_THROWS_AS(scalar_partials({0.0, 0.5, 0.5, 0.5, 0.1}), DomainError);
  CHECK_THROWS_AS(scalar_partials({0.5, 0.5, 1.0, 0.5, 0.1}), DomainError);
  CHECK_THROWS_AS(scalar_second_order({0.5, 0.5, 0.5, 0.5, 1.5}), DomainError);
  CHECK_NOTHROW(scalar_partials({0.5, 0.5, 0.5, 0.5, 1.0}));

  Rng rng(4);
  auto u = [&] {
    double x = 0.0;
    while (x <= 0.0) x = rng.uniform();
    return x;
  };
  for (int i = 0; i < 1000; ++i) {
    const ScalarPoint p{u(), u(), u(), u(), i % 10 == 0 ? 1.0 : u()};
    const auto d = scalar_partials(p);
    CHECK_THAT(std::abs(d.d_x1 / d.d_x2), WithinRel(p.x2 / p.x1, 1e-12));
    auto f = [&](std::span<const double> x) {
      ScalarPoint q = p;
      q.x1 = x[0];
      q.x2 = x[1];
      return scalar_dpo_loss(q);
    };
    // Five-point stencil per coordinate, step scaled to the distance from
    // the domain boundary.
    auto fd = [&](int axis) {
      const double x0 = axis == 0 ? p.x1 : p.x2;
      const double h = 1e-2 * std::min(x0, 1 - x0);
      auto at = [&](double dx) {
        double v[2] = {p.x1, p.x2};
        v[axis] += dx;
        return f(v);
      };
      return (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
    };
    CHECK(rel_error(d.d_x1, fd(0)) < 1e-7);
    CHECK(rel_error(d.d_x2, fd(1)) < 1e-7);
    if (p.beta == 1.0) {
      const auto s = scalar_second_order(p);
      CHECK((s.g1_x1 > 0 && s.g1_x2 < 0 && s.g2_x1 < 0 && s.g2_x2 < 0));
    }
  }
}
