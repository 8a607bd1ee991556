#include <gtest/gtest.h>

#include <random>

#include "icm/scorer.hpp"
#include "icm/synthetic.hpp"
#include "test_support.hpp"

using namespace icm;
using icm::testing::F;
using icm::testing::T;

namespace {

// log P(y_i | every other label) summed directly from the oracle, no scorer.
double direct_p(const Dataset& ds, const Assignment& a, Predictor& oracle) {
  double p = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!a.is_labeled(i)) continue;
    ContextWindow w;
    w.budget = kDefaultContextBudget;
    for (std::size_t j : a.insertion_order())
      if (j != i) w.entries.push_back({j, &ds[j], *a.label(j)});
    p += oracle.label_distribution(w, ds[i]).log_prob(*a.label(i));
  }
  return p;
}

Assignment random_assignment(std::size_t n, std::mt19937_64& rng, bool complete = true) {
  Assignment a(n);
  for (std::size_t i = 0; i < n; ++i)
    if (complete || rng() % 3) a.set(i, Label{static_cast<std::uint16_t>(rng() % 2)});
  return a;
}

}  // namespace

TEST(ScoreBreakdown, UtilityFormula) {
  auto s = ScoreBreakdown::make(50.0, -2.0, 3, ScoringMode::exact);
  EXPECT_DOUBLE_EQ(s.utility, -103.0);
  EXPECT_DOUBLE_EQ(ScoreBreakdown::make(0.0, -9.0, 2, ScoringMode::exact).utility, -2.0);
}

TEST(Scorer, ExactMatchesDirectSum) {
  auto spec = icm::testing::planted_spec(10, 4, 1.0);
  auto task = generate_synthetic_task(spec);
  auto oracle = make_synthetic_oracle(spec, task);
  auto links = derive_links(task.dataset);
  auto topo = std::make_shared<const LinkTopology>(links, 10);
  Scorer sc(task.dataset, topo, *oracle, ScorerConfig{50.0, ScoringMode::exact, 160, 0});
  std::mt19937_64 rng(2);
  for (int k = 0; k < 10; ++k) {
    auto a = random_assignment(10, rng, k % 2);
    auto s = sc.exact_utility(a);
    const double p = direct_p(task.dataset, a, *oracle);
    EXPECT_NEAR(s.mutual_predictability, p, 1e-12);
    EXPECT_EQ(s.inconsistency, inconsistency_count(a, links));
    EXPECT_NEAR(s.utility, 50.0 * p - static_cast<double>(s.inconsistency), 1e-9);
  }
}

TEST(Scorer, EmptyAssignmentScoresZero) {
  auto ds = icm::testing::plain_dataset(3);
  UniformPredictor u{LabelSpace{}};
  Scorer sc(ds, std::make_shared<const LinkTopology>(LinkSet{}, 3), u, ScorerConfig{});
  EXPECT_DOUBLE_EQ(sc.exact_utility(Assignment(3)).utility, 0.0);
  EXPECT_EQ(u.forward_passes(), 0u);
}

TEST(Scorer, EvaluateDoesNotMutate) {
  auto spec = icm::testing::planted_spec(8, 1, 1.0);
  auto task = generate_synthetic_task(spec);
  auto oracle = make_synthetic_oracle(spec, task);
  auto topo = std::make_shared<const LinkTopology>(derive_links(task.dataset), 8);
  for (auto mode : {ScoringMode::exact, ScoringMode::cached}) {
    Scorer sc(task.dataset, topo, *oracle, ScorerConfig{50.0, mode, 160, 3});
    auto s = sc.make_state();
    sc.begin_step(1);
    const LabelChange ch[] = {{0, T()}, {1, T()}, {2, F()}};
    sc.commit(s, sc.evaluate(s, ch));
    auto before = s;
    const LabelChange more[] = {{3, F()}, {0, F()}};
    auto cand = sc.evaluate(s, more);
    EXPECT_EQ(s, before);
    sc.commit(s, cand);
    EXPECT_EQ(s.assignment.labeled_count(), 4u);
    EXPECT_EQ(s.assignment.label(0), F());
  }
}

TEST(Scorer, CachedEqualsExactAfterFullRefresh) {
  std::mt19937_64 rng(99);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto spec = icm::testing::planted_spec(8, seed, 1.0);
    auto task = generate_synthetic_task(spec);
    auto oracle = make_synthetic_oracle(spec, task);
    auto topo = std::make_shared<const LinkTopology>(derive_links(task.dataset), 8);
    Scorer cached(task.dataset, topo, *oracle, ScorerConfig{50.0, ScoringMode::cached, 160, seed});
    Scorer exact(task.dataset, topo, *oracle, ScorerConfig{50.0, ScoringMode::exact, 160, seed});
    auto s = cached.make_state();
    for (std::uint64_t step = 1; step <= 12; ++step) {
      cached.begin_step(step);
      const LabelChange ch{static_cast<std::size_t>(rng() % 8), Label{static_cast<std::uint16_t>(rng() % 2)}};
      cached.commit(s, cached.evaluate(s, std::span(&ch, 1)));
    }
    cached.begin_step(100);
    cached.refresh_all(s);
    EXPECT_NEAR(s.score.utility, exact.exact_utility(s.assignment).utility, 1e-9);
  }
}

TEST(Scorer, UnchangedWindowCostsNothing) {
  auto spec = icm::testing::planted_spec(6, 2, 1.0);
  auto task = generate_synthetic_task(spec);
  auto oracle = make_synthetic_oracle(spec, task);
  auto topo = std::make_shared<const LinkTopology>(derive_links(task.dataset), 6);
  Scorer sc(task.dataset, topo, *oracle, ScorerConfig{50.0, ScoringMode::cached, 160, 0});
  auto s = sc.make_state();
  sc.begin_step(1);
  const LabelChange ch[] = {{0, T()}, {1, F()}};
  sc.commit(s, sc.evaluate(s, ch));
  const auto passes = oracle->forward_passes();
  sc.begin_step(2);
  EXPECT_FALSE(sc.refresh_term(s, 0));
  EXPECT_EQ(oracle->forward_passes(), passes);
}

TEST(Scorer, FailedRefreshMarksStaleAndUtilityRecovers) {
  auto spec = icm::testing::planted_spec(6, 2, 1.0);
  auto task = generate_synthetic_task(spec);
  auto inner = make_synthetic_oracle(spec, task);
  icm::testing::FlakyPredictor flaky(*inner, 2);
  auto topo = std::make_shared<const LinkTopology>(derive_links(task.dataset), 6);
  Scorer sc(task.dataset, topo, flaky, ScorerConfig{50.0, ScoringMode::cached, 160, 0});
  auto s = sc.make_state();
  sc.begin_step(1);
  const LabelChange ch[] = {{0, T()}, {1, F()}};
  sc.commit(s, sc.evaluate(s, ch));
  s.assignment.set(2, T());
  s.index.update(s.assignment, 2);
  sc.begin_step(2);
  EXPECT_THROW(sc.refresh_term(s, 0), BackendError);
  ASSERT_TRUE(s.cache[0]);
  EXPECT_TRUE(s.cache[0]->stale);
  flaky.heal();
  s.cache[2] = std::nullopt;
  sc.utility(s);
  EXPECT_FALSE(s.cache[0]->stale);
  EXPECT_TRUE(s.cache[2].has_value());
}
