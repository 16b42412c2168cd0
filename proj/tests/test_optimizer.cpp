#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "dyneval/optimizer.hpp"

using namespace dyneval;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Textbook Adam on one scalar, stepped by hand.
struct ScalarAdam {
  double theta, m = 0, v = 0;
  int t = 0;
  void step(double g, double lr, double b1, double b2, double eps) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    theta = theta - lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace

TEST_CASE("adamw_step examples", "[optimizer][adamw]") {
  SECTION("zero grads, no decay: unchanged, step incremented") {
    auto w = Tensor<float>::from_values({3}, {1.5f, -2.0f, 0.25f}, true);
    w.grad();
    AdamW<float> opt({w}, {.lr = 0.1});
    const auto before = w.data();
    CHECK(opt.step());
    CHECK(w.data() == before);
    CHECK(opt.state().step == 1);
  }
  SECTION("zero grads, decay only") {
    auto w = Tensor<float>::from_values({3}, {1.5f, -2.0f, 0.25f}, true);
    w.grad();
    AdamW<float> opt({w}, {.lr = 0.01, .weight_decay = 0.1});
    const auto before = w.data();
    opt.step();
    for (std::size_t i = 0; i < 3; ++i) CHECK(w.data()[i] == static_cast<float>(before[i] * (1.0 - 0.001)));
  }
  SECTION("first step from zero") {
    auto w = Tensor<double>::from_values({1}, {0.0}, true);
    w.grad()[0] = 1.0;
    AdamW<double> opt({w}, {.lr = 0.1});
    opt.step();
    ScalarAdam ref{0.0};
    ref.step(1.0, 0.1, 0.9, 0.999, 1e-8);
    CHECK(w.data()[0] == ref.theta);
    CHECK_THAT(w.data()[0], WithinRel(-0.1 / (1.0 + 1e-8), 1e-12));
  }
}

TEST_CASE("adamw matches hand-stepped Adam on random scalar trajectories", "[optimizer][adamw][property]") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> lr_pick(1e-4, 1e-1);
  for (int traj = 0; traj < 100; ++traj) {
    const double lr = lr_pick(rng);
    const double theta0 = normal(rng);
    auto w = Tensor<double>::from_values({1}, {theta0}, true);
    AdamW<double> opt({w}, {.lr = lr});
    ScalarAdam ref{theta0};
    for (int s = 0; s < 25; ++s) {
      const double g = normal(rng) + 0.3 * w.data()[0];
      w.grad()[0] = g;
      opt.step();
      ref.step(g, lr, 0.9, 0.999, 1e-8);
    }
    CHECK_THAT(w.data()[0], WithinAbs(ref.theta, 1e-10));
    CHECK(opt.state().step == 25);
  }
}

TEST_CASE("non-finite gradients skip the update", "[optimizer][adamw][errors]") {
  auto a = Tensor<float>::from_values({2}, {1.0f, 2.0f}, true);
  auto b = Tensor<float>::from_values({1}, {3.0f}, true);
  a.grad() = {0.5f, 0.5f};
  b.grad()[0] = std::numeric_limits<float>::quiet_NaN();
  AdamW<float> opt({a, b}, {.lr = 0.1});
  CHECK_FALSE(opt.step());
  CHECK(a.data() == std::vector<float>{1.0f, 2.0f});
  CHECK(opt.state().step == 0);
  CHECK(opt.skipped_updates() == 1);
  b.grad()[0] = std::numeric_limits<float>::infinity();
  CHECK_FALSE(opt.step());
}

TEST_CASE("moments mirror parameter shapes", "[optimizer][adamw]") {
  auto a = Tensor<float>::zeros({2, 3}, true);
  auto b = Tensor<float>::zeros({5}, true);
  AdamW<float> opt({a, b}, {});
  REQUIRE(opt.state().m.size() == 2);
  CHECK(opt.state().m[0].size() == 6);
  CHECK(opt.state().v[1].size() == 5);
  CHECK(opt.num_params() == 11);
}

TEST_CASE("global-norm clipping bounds the effective gradient", "[optimizer][adamw]") {
  auto w = Tensor<double>::from_values({2}, {0.0, 0.0}, true);
  w.grad() = {30.0, 40.0};
  AdamW<double> clipped({w}, {.lr = 0.1, .clip_norm = 5.0});
  clipped.step();
  CHECK_THAT(clipped.state().m[0][0], WithinAbs(0.1 * 3.0, 1e-12));
  CHECK_THAT(clipped.state().m[0][1], WithinAbs(0.1 * 4.0, 1e-12));
}

TEST_CASE("lr_at examples", "[optimizer][schedule]") {
  const ScheduleConfig wc{ScheduleKind::warmup_cosine, 100, 1100, 2e-3};
  CHECK(lr_at(0, wc) == 0.0);
  CHECK(lr_at(100, wc) == 2e-3);
  CHECK_THAT(lr_at(50, wc), WithinRel(1e-3, 1e-12));
  const double mid_expected = 2e-3 * (1.0 + std::cos(std::numbers::pi / 2.0)) / 2.0;
  CHECK_THAT(lr_at((100 + 1100) / 2, wc), WithinAbs(mid_expected, 1e-15));
  CHECK_THAT(lr_at((100 + 1100) / 2, wc), WithinAbs(1e-3, 1e-15));
  CHECK(lr_at(1100, wc) == 0.0);
  CHECK(lr_at(5000, wc) == 0.0);

  const ScheduleConfig constant{ScheduleKind::constant, 0, 0, 3e-4};
  CHECK(lr_at(0, constant) == 3e-4);
  CHECK(lr_at(123456, constant) == 3e-4);

  const ScheduleConfig degenerate{ScheduleKind::warmup_cosine, 10, 10, 1.0};
  CHECK(lr_at(10, degenerate) == 1.0);
  CHECK(lr_at(11, degenerate) == 0.0);

  CHECK_THROWS_AS((ScheduleConfig{ScheduleKind::warmup_cosine, 20, 10, 1.0}.validate()), ConfigError);
}

TEST_CASE("lr schedule is monotone in each phase", "[optimizer][schedule][property]") {
  const ScheduleConfig wc{ScheduleKind::warmup_cosine, 37, 411, 1.0};
  for (std::int64_t s = 1; s <= 37; ++s) CHECK(lr_at(s, wc) >= lr_at(s - 1, wc));
  for (std::int64_t s = 38; s <= 420; ++s) CHECK(lr_at(s, wc) <= lr_at(s - 1, wc));
}

TEST_CASE("throttled_update", "[optimizer][throttle]") {
  for (int i = 0; i < 10; ++i) CHECK(throttled_update(i, 1).do_update);

  std::vector<int> updates;
  for (int i = 0; i < 10; ++i) {
    const auto d = throttled_update(i, 4);
    CHECK(d.compute_grad == d.do_update);
    if (d.do_update) updates.push_back(i);
  }
  CHECK(updates == std::vector<int>{3, 7});

  for (int n = 1; n <= 9; ++n)
    for (int total = 0; total < 40; ++total) {
      int count = 0;
      for (int i = 0; i < total; ++i) count += throttled_update(i, n).do_update;
      CHECK(count == total / n);
    }

  CHECK(throttled_update(0, 4, true).compute_grad);
  CHECK_FALSE(throttled_update(0, 4, true).do_update);
  CHECK_THROWS_AS(throttled_update(0, 0), ConfigError);
  CHECK_THROWS_AS(throttled_update(0, -3), ConfigError);
}
