#include <gtest/gtest.h>

#include "oracles.hpp"
#include "softreason/analytics.hpp"
#include "test_util.hpp"

using namespace softreason;

namespace {

Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

LatentTrace trace_of(std::initializer_list<Vec> dists) {
  LatentTrace t;
  t.distributions = dists;
  t.termination_step = t.distributions.size() - 1;
  return t;
}

std::vector<LatentTrace> random_traces(std::uint64_t seed, std::size_t n) {
  SplitMix64 rng(seed);
  std::vector<LatentTrace> out;
  for (std::size_t i = 0; i < n; ++i) {
    LatentTrace t;
    const std::size_t steps = 1 + rng.index(4);
    for (std::size_t s = 0; s < steps; ++s) {
      Vec l(12);
      const double sharp = 0.5 + 6 * rng.uniform_open();
      for (Eigen::Index v = 0; v < 12; ++v) l(v) = sharp * rng.uniform_open();
      t.distributions.push_back(softmax(l));
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

TEST(StepStatistics, PointMassAndUniform) {
  const Vec point = vec({0, 0, 1, 0});
  EXPECT_EQ(step_top1(point), std::make_pair(1.0, TokenId{2}));
  EXPECT_EQ(step_entropy(point), 0.0);
  const Vec flat = Vec::Constant(8, 0.125);
  EXPECT_EQ(step_top1(flat).second, 0);
  EXPECT_NEAR(step_entropy(flat), std::log(8.0), 1e-15);
  EXPECT_NEAR(step_entropy(vec({0.5, 0.5})), 0.693147180559945, 1e-15);
}

TEST(StepStatistics, TiesAndNearTies) {
  EXPECT_EQ(step_top1(Vec::Constant(4, 0.25)), std::make_pair(0.25, TokenId{0}));
  EXPECT_EQ(step_top1(vec({0.51, 0.49})), std::make_pair(0.51, TokenId{0}));
  const auto u = cumulative_topk(Vec::Constant(10, 0.1), {3});
  EXPECT_NEAR(u.at(3), 0.3, 1e-15);
  const auto c = cumulative_topk(vec({0.5, 0.3, 0.2}), {1, 2});
  EXPECT_NEAR(c.at(1), 0.5, 1e-15);
  EXPECT_NEAR(c.at(2), 0.8, 1e-15);
}

TEST(StepStatistics, CumulativeTopK) {
  const auto c = cumulative_topk(vec({0.1, 0.4, 0.2, 0.3}), {1, 3, 5, 10});
  EXPECT_NEAR(c.at(1), 0.4, 1e-15);
  EXPECT_NEAR(c.at(3), 0.9, 1e-15);
  EXPECT_NEAR(c.at(5), 1.0, 1e-15);
  EXPECT_NEAR(c.at(10), 1.0, 1e-15);
}

TEST(StepStatistics, EntropyBoundsAndMonotoneCumulative) {
  for (const auto& t : random_traces(3, 40)) {
    for (const Vec& q : t.distributions) {
      const auto s = compute_step_stats(q, 1);
      EXPECT_GE(s.entropy, 0.0);
      EXPECT_LE(s.entropy, std::log(12.0) + 1e-12);
      double prev = 0;
      for (const auto& [k, v] : s.cumulative) {
        EXPECT_GE(v, prev);
        prev = v;
      }
      EXPECT_EQ(s.cumulative.at(1), s.top1_prob);
    }
  }
}

TEST(TokenFrequency, CountsArgmaxWithTieOrder) {
  const auto traces = std::vector<LatentTrace>{
      trace_of({vec({0, 0, 0, 0.1, 0.9}), vec({0, 0, 0, 1, 0})}),
      trace_of({vec({0, 0, 0, 0.2, 0.8}), vec({0, 0.7, 0, 0.3, 0})}),
  };
  const auto f = token_frequency(traces);
  const std::vector<std::pair<TokenId, std::size_t>> expected{{4, 2}, {1, 1}, {3, 1}};
  EXPECT_EQ(f, expected);
}

TEST(TokenFrequency, RepeatedTokenAndTerminations) {
  const Vec eq = vec({0, 0, 0, 0, 0, 1});
  EXPECT_EQ(token_frequency({trace_of({eq, eq, eq})}), (std::vector<std::pair<TokenId, std::size_t>>{{5, 3}}));
  std::vector<LatentTrace> ended;
  for (int i = 0; i < 50; ++i) ended.push_back(trace_of({eq, vec({0, 0, 0, 1, 0, 0})}));
  const auto f = token_frequency(ended);
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f[0], std::make_pair(TokenId{3}, std::size_t{50}));
  EXPECT_TRUE(token_frequency({LatentTrace{}}).empty());
}

TEST(Pearson, MatchesTwoPassOracle) {
  SplitMix64 rng(12);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> x, y;
    for (int i = 0; i < 250; ++i) {
      const double a = rng.uniform_open();
      x.push_back(a);
      y.push_back(-2 * a + 0.5 * rng.uniform_open() + 100);
    }
    EXPECT_NEAR(pearson_r(x, y), oracle::two_pass_pearson(x, y), 1e-12);
  }
  EXPECT_NEAR(pearson_r({1, 2, 3}, {2, 4, 6}), 1.0, 1e-15);
  EXPECT_NEAR(pearson_r({1, 2, 3}, {3, 2, 1}), -1.0, 1e-15);
  EXPECT_EQ(pearson_r({1, 1, 1}, {1, 2, 3}), 0.0);
  EXPECT_THROW(pearson_r({1}, {1, 2}), Error);
}

TEST(BatchStats, PoolsPerStep) {
  const auto traces = std::vector<LatentTrace>{
      trace_of({vec({0.5, 0.5}), vec({1, 0})}),
      trace_of({vec({0.9, 0.1})}),
  };
  const BatchStats b = compute_batch_stats(traces);
  EXPECT_EQ(b.samples, 3u);
  ASSERT_EQ(b.steps.size(), 2u);
  EXPECT_EQ(b.steps[0].count, 2u);
  EXPECT_NEAR(b.steps[0].mean_top1, 0.7, 1e-15);
  EXPECT_EQ(b.steps[1].count, 1u);
  EXPECT_EQ(b.steps[1].mean_top1, 1.0);
  EXPECT_NEAR(b.mean_top1, (0.5 + 1 + 0.9) / 3, 1e-15);
  EXPECT_LT(b.pearson_r, 0.0);
}

TEST(BatchStats, SharperStepsHaveLowerEntropy) {
  const BatchStats b = compute_batch_stats(random_traces(9, 100));
  EXPECT_GE(b.samples, 200u);
  EXPECT_LT(b.pearson_r, -0.5);
}

TEST(Reports, EmptyBatchGivesHeaderOnly) {
  const BatchStats b = compute_batch_stats({});
  EXPECT_EQ(stats_to_csv(b), "step,count,mean_top1,mean_entropy,cum_top1,cum_top3,cum_top5,cum_top10\n");
  EXPECT_EQ(b.samples, 0u);
  EXPECT_TRUE(b.token_frequency.empty());
}

TEST(Reports, ByteIdenticalAcrossRuns) {
  testutil::TempDir dir;
  const auto traces = random_traces(5, 50);
  emit_report(compute_batch_stats(traces), dir.file("a.csv"), ReportFormat::Csv);
  emit_report(compute_batch_stats(traces), dir.file("b.csv"), ReportFormat::Csv);
  emit_report(compute_batch_stats(traces), dir.file("a.json"), ReportFormat::Json);
  emit_report(compute_batch_stats(traces), dir.file("b.json"), ReportFormat::Json);
  EXPECT_EQ(testutil::read_file(dir.file("a.csv")), testutil::read_file(dir.file("b.csv")));
  EXPECT_EQ(testutil::read_file(dir.file("a.json")), testutil::read_file(dir.file("b.json")));
}

TEST(Reports, JsonRoundTripAtReportPrecision) {
  const BatchStats b = compute_batch_stats(random_traces(7, 30));
  const auto back = stats_from_json(nlohmann::json::parse(stats_to_json(b).dump()));
  EXPECT_TRUE(back == rounded(b));
  EXPECT_EQ(stats_to_csv(back), stats_to_csv(b));
}

TEST(Reports, TraceDumpKeepsTopEntries) {
  LatentTrace t = trace_of({vec({0.1, 0.6, 0.3})});
  t.answer_ids = {1, 2};
  const auto j = trace_to_json(t, 4, nullptr, 2);
  EXPECT_EQ(j["index"], 4);
  const auto& top = j["steps"][0]["top"];
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0][0], 1);
  EXPECT_EQ(top[1][0], 2);
  EXPECT_NEAR(top[0][1].get<double>(), 0.6, 1e-12);
}
