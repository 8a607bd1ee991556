#include <gtest/gtest.h>

#include <random>

#include "icm/consistency.hpp"
#include "icm/scorer.hpp"
#include "icm/synthetic.hpp"
#include "test_support.hpp"

using namespace icm;
using icm::testing::F;
using icm::testing::T;

namespace {

ConsistencyLink asym(std::size_t a, std::size_t b) { return {a, b, LinkKind::asymmetry, {{T(), T()}}}; }

// Fixture: n examples with the given links, a scorer over any predictor.
struct Bench {
  Dataset ds;
  std::shared_ptr<const LinkTopology> topo;
  std::unique_ptr<Predictor> predictor;
  std::unique_ptr<Scorer> scorer;

  Bench(Dataset d, LinkSet links, std::unique_ptr<Predictor> p, ScoringMode mode = ScoringMode::exact,
        double alpha = 50.0)
      : ds(std::move(d)), predictor(std::move(p)) {
    topo = std::make_shared<const LinkTopology>(std::move(links), ds.size());
    scorer = std::make_unique<Scorer>(ds, topo, *predictor, ScorerConfig{alpha, mode, 160, 1});
  }

  SearchState state(const std::vector<std::pair<std::size_t, Label>>& labels) {
    SearchState s = scorer->make_state();
    std::vector<LabelChange> ch;
    for (auto [i, l] : labels) ch.push_back({i, l});
    scorer->commit(s, scorer->evaluate(s, ch));
    return s;
  }
};

}  // namespace

TEST(Violates, AsymmetryTable) {
  auto l = asym(0, 1);
  EXPECT_TRUE(violates(l, T(), T()));
  EXPECT_FALSE(violates(l, T(), F()));
  EXPECT_FALSE(violates(l, F(), T()));
  EXPECT_FALSE(violates(l, F(), F()));
}

TEST(ConsistentOptions, AsymmetryAndSinglePair) {
  LabelSpace ls;
  EXPECT_EQ(consistent_options(asym(0, 1), ls), (std::vector<LabelPair>{{T(), F()}, {F(), T()}, {F(), F()}}));
  ConsistencyLink only{0, 1, LinkKind::custom, {{T(), T()}, {T(), F()}, {F(), F()}}};
  EXPECT_EQ(consistent_options(only, ls), (std::vector<LabelPair>{{F(), T()}}));
}

TEST(InconsistencyCount, Basics) {
  LinkSet links = {asym(0, 1), asym(2, 3), asym(4, 5), asym(6, 7)};
  Assignment empty(8);
  EXPECT_EQ(inconsistency_count(empty, links), 0u);
  Assignment all_true(8);
  for (std::size_t i = 0; i < 8; ++i) all_true.set(i, T());
  EXPECT_EQ(inconsistency_count(all_true, links), 4u);
  Assignment ok(8);
  for (std::size_t i = 0; i < 8; ++i) ok.set(i, i % 2 ? T() : F());
  EXPECT_EQ(inconsistency_count(ok, links), 0u);

  Assignment one(8);
  one.set(4, T());
  one.set(5, T());
  one.set(0, T());
  auto pairs = inconsistent_pairs(one, links);
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0], links[2]);
}

TEST(InconsistencyCount, AgreesWithPairsAndIndexOnRandomAssignments) {
  auto ds = icm::testing::planted_task(30, 4, 1.0).dataset;
  auto links = derive_links(ds);
  auto topo = std::make_shared<const LinkTopology>(links, ds.size());
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    Assignment a(ds.size());
    InconsistencyIndex idx(topo);
    idx.rebuild(a);
    for (int k = 0; k < 40; ++k) {
      std::size_t i = rng() % ds.size();
      a.set(i, Label{static_cast<std::uint16_t>(rng() % 2)});
      idx.update(a, i);
    }
    EXPECT_EQ(inconsistency_count(a, links), inconsistent_pairs(a, links).size());
    EXPECT_EQ(idx.count(), inconsistency_count(a, links));
    InconsistencyIndex fresh(topo);
    fresh.rebuild(a);
    EXPECT_EQ(fresh.violated(), idx.violated());
  }
}

TEST(ConsistencyFix, SinglePairPicksBestOption) {
  // Planted oracle on a single linked pair, scored exactly.
  auto task = icm::testing::planted_task(2, 3, 1.0);
  auto oracle = make_synthetic_oracle(icm::testing::planted_spec(2, 3, 1.0), task);
  Bench b(task.dataset, derive_links(task.dataset), std::move(oracle));
  auto s = b.state({{0, T()}, {1, T()}});
  ASSERT_EQ(s.index.count(), 1u);
  const double before = s.score.utility;

  double best = -1e300;
  for (auto opt : consistent_options(b.topo->link(0), b.ds.label_space())) {
    Assignment a(2);
    a.set(0, opt.first);
    a.set(1, opt.second);
    best = std::max(best, b.scorer->exact_utility(a).utility);
  }
  std::mt19937_64 rng(1);
  auto out = consistency_fix(s, *b.scorer, 8, rng);
  EXPECT_EQ(out.remaining, 0u);
  EXPECT_GE(s.score.utility, before);
  EXPECT_DOUBLE_EQ(s.score.utility, best);
  EXPECT_FALSE(violates(b.topo->link(0), *s.assignment.label(0), *s.assignment.label(1)));
}

TEST(ConsistencyFix, NoViolationsNoWork) {
  Bench b(icm::testing::plain_dataset(4), {asym(0, 1)}, std::make_unique<UniformPredictor>(LabelSpace{}));
  auto s = b.state({{0, T()}, {1, F()}});
  auto copy = s;
  std::mt19937_64 rng(1);
  auto out = consistency_fix(s, *b.scorer, 100, rng);
  EXPECT_EQ(out.iterations, 0u);
  EXPECT_EQ(s, copy);
}

TEST(ConsistencyFix, ZeroBudgetUnchanged) {
  Bench b(icm::testing::plain_dataset(4), {asym(0, 1)}, std::make_unique<UniformPredictor>(LabelSpace{}));
  auto s = b.state({{0, T()}, {1, T()}});
  auto copy = s;
  std::mt19937_64 rng(1);
  consistency_fix(s, *b.scorer, 0, rng);
  EXPECT_EQ(s, copy);
}

TEST(ConsistencyFix, UniformPredictorClearsAllViolations) {
  LinkSet links;
  for (std::size_t i = 0; i < 20; i += 2) links.push_back(asym(i, i + 1));
  for (auto mode : {ScoringMode::exact, ScoringMode::cached}) {
    Bench b(icm::testing::plain_dataset(20), links, std::make_unique<UniformPredictor>(LabelSpace{}), mode);
    std::vector<std::pair<std::size_t, Label>> all;
    for (std::size_t i = 0; i < 20; ++i) all.emplace_back(i, T());
    auto s = b.state(all);
    ASSERT_EQ(s.index.count(), 10u);
    std::mt19937_64 rng(5);
    auto out = consistency_fix(s, *b.scorer, default_fix_iterations(s.index.count()), rng);
    EXPECT_EQ(out.remaining, 0u);
    EXPECT_EQ(out.applied, 10u);
  }
}

TEST(ConsistencyFix, NeverDecreasesUtility) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 25; ++trial) {
    auto spec = icm::testing::planted_spec(8, trial, 1.0, trial % 2 ? OracleMode::majority_bias : OracleMode::planted_concept);
    auto task = generate_synthetic_task(spec);
    Bench b(task.dataset, derive_links(task.dataset), make_synthetic_oracle(spec, task), ScoringMode::exact,
            trial % 3 ? 50.0 : 0.5);
    std::vector<std::pair<std::size_t, Label>> labels;
    for (std::size_t i = 0; i < 8; ++i) labels.emplace_back(i, Label{static_cast<std::uint16_t>(rng() % 2)});
    auto s = b.state(labels);
    const double before = s.score.utility;
    consistency_fix(s, *b.scorer, default_fix_iterations(s.index.count()), rng);
    EXPECT_GE(s.score.utility, before);
  }
}

TEST(DefaultFixIterations, Policy) {
  EXPECT_EQ(default_fix_iterations(0), 8u);
  EXPECT_EQ(default_fix_iterations(1), 10u);
  EXPECT_EQ(default_fix_iterations(7), 70u);
}
