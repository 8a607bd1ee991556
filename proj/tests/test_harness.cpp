#include <gtest/gtest.h>

#include <cmath>

#include "icm/harness.hpp"
#include "icm/synthetic.hpp"
#include "test_support.hpp"

using namespace icm;
using icm::testing::F;
using icm::testing::T;

TEST(BruteForce, SingleExampleUniform) {
  auto ds = icm::testing::plain_dataset(1);
  UniformPredictor u{LabelSpace{}};
  auto r = brute_force_optimum(ds, u);
  EXPECT_EQ(r.evaluated, 2u);
  EXPECT_EQ(r.assignment.label(0), T());  // tie: first label wins
  EXPECT_NEAR(r.score.utility, 50.0 * std::log(0.5), 1e-12);
}

TEST(BruteForce, CountsAndLimits) {
  auto ds = icm::testing::plain_dataset(5);
  UniformPredictor u{LabelSpace{}};
  EXPECT_EQ(brute_force_optimum(ds, u).evaluated, 32u);
  EXPECT_THROW(brute_force_optimum(icm::testing::plain_dataset(17), u), ConfigError);
}

TEST(BruteForce, PlantedLabelingAttainsOptimum) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto spec = icm::testing::planted_spec(8, seed, 1.0);
    auto task = generate_synthetic_task(spec);
    auto oracle = make_synthetic_oracle(spec, task);
    auto r = brute_force_optimum(task.dataset, *oracle);
    Scorer sc(task.dataset, std::make_shared<const LinkTopology>(derive_links(task.dataset), 8), *oracle,
              ScorerConfig{50.0, ScoringMode::exact, kDefaultContextBudget, 0});
    Assignment planted(8);
    for (std::size_t i = 0; i < 8; ++i) planted.set(i, *task.planted[i]);
    EXPECT_NEAR(sc.exact_utility(planted).utility, r.score.utility, 1e-9) << seed;
    EXPECT_EQ(r.score.inconsistency, 0u);
  }
}

TEST(BruteForce, MajorityAllTrueIsNotOptimal) {
  auto spec = icm::testing::planted_spec(8, 1, 1.0, OracleMode::majority_bias);
  auto task = generate_synthetic_task(spec);
  auto oracle = make_synthetic_oracle(spec, task);
  auto r = brute_force_optimum(task.dataset, derive_links(task.dataset), *oracle, 1.0, kDefaultContextBudget, 0);
  Scorer sc(task.dataset, std::make_shared<const LinkTopology>(derive_links(task.dataset), 8), *oracle,
            ScorerConfig{1.0, ScoringMode::exact, kDefaultContextBudget, 0});
  Assignment all_true(8);
  for (std::size_t i = 0; i < 8; ++i) all_true.set(i, T());
  EXPECT_LT(sc.exact_utility(all_true).utility, r.score.utility);
}

TEST(PerturbLabels, ExactFlipCounts) {
  auto task = icm::testing::planted_task(100, 3);
  const auto golden = golden_labels(task.dataset);
  for (double target : {1.0, 0.9, 0.8, 0.5}) {
    auto p = perturb_labels(golden, task.dataset.label_space(), target, 7);
    std::size_t flips = 0;
    for (std::size_t i = 0; i < 100; ++i) flips += p[i] != golden[i] ? 1 : 0;
    EXPECT_EQ(flips, static_cast<std::size_t>(std::llround((1.0 - target) * 100)));
  }
  auto small = icm::testing::planted_task(10, 3);
  const auto g10 = golden_labels(small.dataset);
  auto p = perturb_labels(g10, small.dataset.label_space(), 0.8, 1);
  Assignment a(10);
  for (std::size_t i = 0; i < 10; ++i) a.set(i, *p[i]);
  EXPECT_DOUBLE_EQ(accuracy(a, small.dataset), 0.8);
  EXPECT_EQ(perturb_labels(g10, small.dataset.label_space(), 0.8, 1), p);
}

TEST(PerturbLabels, Errors) {
  auto task = icm::testing::planted_task(10, 3);
  const auto golden = golden_labels(task.dataset);
  EXPECT_THROW(perturb_labels(golden, task.dataset.label_space(), 1.5, 0), ConfigError);
  EXPECT_THROW(perturb_labels(golden, LabelSpace({"a", "b", "c"}), 0.5, 0), ConfigError);
  auto missing = golden;
  missing[2].reset();
  EXPECT_THROW(perturb_labels(missing, task.dataset.label_space(), 0.5, 0), EvaluationError);
}

TEST(ZeroShot, EmptyContextArgmax) {
  auto spec = icm::testing::planted_spec(20, 4, 0.5);
  auto task = generate_synthetic_task(spec);
  auto oracle = make_synthetic_oracle(spec, task);
  auto a = zero_shot_labels(task.dataset, *oracle);
  EXPECT_EQ(a.labeled_count(), 20u);
  a.for_each_labeled([](std::size_t, Label l) { EXPECT_EQ(l, T()); });
}

TEST(Report, AverageForwardPassesAndBalance) {
  auto task = icm::testing::planted_task(100, 1);
  Assignment a(100);
  for (std::size_t i = 0; i < 100; ++i) a.set(i, T());
  std::vector<TraceRecord> trace(3);
  for (std::size_t k = 0; k < 3; ++k) {
    trace[k].iteration = k + 1;
    trace[k].accepted = k != 1;
    trace[k].utility = -10.0 + static_cast<double>(k);
    trace[k].forward_passes = 100 * (k + 1);
  }
  auto r = run_report(trace, a, task.dataset, task.planted);
  EXPECT_DOUBLE_EQ(r.avg_forward_passes, 3.0);
  EXPECT_NEAR(r.acceptance_rate, 2.0 / 3.0, 1e-12);
  ASSERT_EQ(r.label_balance.size(), 2u);
  EXPECT_EQ(r.label_balance[0], (std::pair<std::string, double>{"True", 1.0}));
  EXPECT_EQ(r.label_balance[1], (std::pair<std::string, double>{"False", 0.0}));
  ASSERT_TRUE(r.accuracy_golden);
  EXPECT_EQ(*r.accuracy_golden, *r.accuracy_planted);
  EXPECT_DOUBLE_EQ(r.best_utility, -8.0);

  auto flat = to_flat(r);
  EXPECT_NE(flat.find("avg_forward_passes=3.0\n"), std::string::npos);
  EXPECT_NE(flat.find("label_balance.True=1.0\n"), std::string::npos);

  auto plain = run_report(trace, Assignment(3), icm::testing::plain_dataset(3));
  EXPECT_FALSE(plain.accuracy_golden);
  EXPECT_FALSE(to_json(plain).contains("accuracy_golden"));
}
