#include <gtest/gtest.h>

#include "oracles.hpp"
#include "softreason/objective.hpp"

using namespace softreason;

namespace {

struct Fixture {
  Dataset data;
  Vocabulary vocab;
  std::vector<InstancePriors> priors;
};

Fixture small_task(std::size_t count, std::size_t max_steps, PriorMethod method = PriorMethod::Mix) {
  SynthConfig sc;
  sc.count = count;
  sc.max_steps = max_steps;
  sc.seed = 31;
  Fixture f;
  f.data = gen_synthetic(sc);
  f.vocab = build_vocab(f.data);
  tokenize_dataset(f.data, f.vocab);
  PriorConfig pc;
  pc.method = method;
  f.priors = build_dataset_priors(f.data, f.vocab, pc);
  return f;
}

// Index of the first instance with the requested step count.
std::size_t with_steps(const Dataset& d, std::size_t n) {
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.instances[i].step_count == n) return i;
  }
  throw Error("no instance with the requested step count");
}

Vec logits_for(std::initializer_list<double> probs) {
  Vec l(static_cast<Eigen::Index>(probs.size()));
  Eigen::Index i = 0;
  for (double p : probs) l(i++) = std::log(p);
  return l;
}

ReasonerParams gradient_of(const ReasonerParams& p, const Instance& inst, const InstancePriors& pr,
                           const RolloutConfig& cfg) {
  ReasonerParams g = ReasonerParams::zeros(p.vocab, p.embed_dim, p.hidden);
  evaluate_instance(p, inst, pr, cfg, &g);
  return g;
}

double max_abs_diff(const ReasonerParams& a, const ReasonerParams& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.parameter_count(); ++i) {
    m = std::max(m, std::abs(a.at(i) - b.at(i)));
  }
  return m;
}

}  // namespace

TEST(AnswerCe, HandDerivedCases) {
  EXPECT_NEAR(loss_answer_ce({logits_for({0.5, 0.25, 0.25}), logits_for({0.25, 0.5, 0.25})}, {0, 2}),
              1.03972077083992, 1e-12);
  Vec sure = Vec::Constant(5, -1e4);
  sure(3) = 0;
  EXPECT_NEAR(loss_answer_ce({sure, sure}, {3, 3}), 0.0, 1e-12);
  EXPECT_NEAR(loss_answer_ce({Vec::Zero(7), Vec::Constant(7, 2.5)}, {1, 6}), std::log(7.0), 1e-12);
  EXPECT_THROW(loss_answer_ce({Vec::Zero(3)}, {0, 1}), Error);
  EXPECT_THROW(loss_answer_ce({Vec::Zero(3)}, {3}), Error);
}

TEST(FocusedKl, HandDerivedValue) {
  SparsePrior prior{{{0, 0.8}, {1, 0.2}}, 1};
  FocusSet focus{1, 0.0, {0}};
  Vec q(2);
  q << 0.5, 0.5;
  EXPECT_NEAR(loss_focused_kl({q}, {prior}, {focus}), 0.376002903396588, 1e-12);
  EXPECT_NEAR(0.8 * std::log(1.6), 0.376002903396588, 1e-12);
}

TEST(FocusedKl, EmptyFocusContributesZeroAndNoStepsIsAnError) {
  SparsePrior prior{{{0, 1.0}}, 1};
  Vec q = Vec::Constant(3, 1.0 / 3);
  EXPECT_EQ(loss_focused_kl({q}, {prior}, {FocusSet{5, 0.99, {}}}), 0.0);
  EXPECT_THROW(loss_focused_kl({}, {}, {}), Error);
}

TEST(FocusedKl, FullSupportMatchesDenseKl) {
  SplitMix64 rng(2024);
  const std::size_t V = 6;
  for (int trial = 0; trial < 100; ++trial) {
    SparseLogits l;
    for (std::size_t v = 0; v < V; ++v) {
      if (rng.uniform_open() < 0.6 || l.empty()) l.push_back({static_cast<TokenId>(v), 3 * rng.uniform_open()});
    }
    const SparsePrior prior = prior_temperature(l, 0.3 + rng.uniform_open());
    const FocusSet focus = select_focus(prior, prior.entries.size(), 0.0);
    Vec logits(static_cast<Eigen::Index>(V));
    for (std::size_t v = 0; v < V; ++v) logits(static_cast<Eigen::Index>(v)) = 4 * rng.uniform_open() - 2;
    const Vec q = softmax(logits);

    std::vector<double> pd(V, 0.0), qd(q.data(), q.data() + V);
    for (const auto& e : prior.entries) pd[static_cast<std::size_t>(e.id)] = e.value;
    EXPECT_NEAR(loss_focused_kl({q}, {prior}, {focus}), oracle::dense_kl(pd, qd), 1e-10);
  }
}

TEST(FocusedKl, GibbsInequalityBothDirections) {
  const SparsePrior prior = prior_temperature({{1, 2.0}, {2, 2.0}, {4, 2.8}}, 0.5);
  const FocusSet focus = select_focus(prior, 3, 0.0);
  const Vec exact = to_dense(prior, 5);
  EXPECT_NEAR(loss_focused_kl({exact}, {prior}, {focus}), 0.0, 1e-15);
  SplitMix64 rng(4);
  for (int i = 0; i < 50; ++i) {
    Vec l(5);
    for (Eigen::Index v = 0; v < 5; ++v) l(v) = 3 * rng.uniform_open();
    EXPECT_GT(loss_focused_kl({softmax(l)}, {prior}, {focus}), 0.0);
  }
}

TEST(SemanticLoss, HandDerivedAndInvariances) {
  Vec a(2), b(2);
  a << 1, 0;
  b << 0, 1;
  EXPECT_NEAR(loss_semantic(a, {b}), 0.462117157260010, 1e-12);
  EXPECT_EQ(loss_semantic(a, {a, a}), 0.0);
  SplitMix64 rng(6);
  for (int t = 0; t < 20; ++t) {
    Vec h(8), z1(8), z2(8);
    for (Eigen::Index i = 0; i < 8; ++i) {
      h(i) = rng.uniform_open() - 0.5;
      z1(i) = rng.uniform_open() - 0.5;
      z2(i) = rng.uniform_open() - 0.5;
    }
    const double c = 5 * rng.uniform_open();
    EXPECT_NEAR(loss_semantic(h, {(h.array() + c).matrix()}), 0.0, 1e-12);
    const double base = loss_semantic(h, {z1, z2});
    const Vec sh = (h.array() + c).matrix();
    const Vec s1 = (z1.array() - c).matrix();
    const Vec s2 = (z2.array() + 2 * c).matrix();
    EXPECT_NEAR(loss_semantic(sh, {s1, s2}), base, 1e-12);
    EXPECT_GE(base, 0.0);
  }
  EXPECT_THROW(loss_semantic(a, {}), Error);
  EXPECT_THROW(loss_semantic(a, {Vec::Zero(3)}), Error);
}

TEST(LossTotal, WeightedSum) {
  EXPECT_DOUBLE_EQ(loss_total({1, 1, 1}, 0.5, 0.2, 0.3), 1.0);
  EXPECT_DOUBLE_EQ(loss_total({1, 0, 1}, 0.5, 123.0, 0.3), 0.8);
  EXPECT_DOUBLE_EQ(loss_total({1, 0.3, 1}, 0.5, 0.2, 0.3), 0.5 + 0.3 * 0.2 + 0.3);
  EXPECT_THROW(validate(LossWeights{0, 0, 0}), Error);
  EXPECT_THROW(validate(LossWeights{1, -1, 0}), Error);
}

TEST(EvaluateInstance, ReportIsAdditiveAndPerStep) {
  Fixture f = small_task(30, 2);
  const ReasonerParams p = ReasonerParams::init(f.vocab.size(), 8, 12, 5, 0.3);
  for (bool tf : {false, true}) {
    for (LossWeights w : {LossWeights{1, 1, 1}, LossWeights{0.7, 0.3, 2.0}}) {
      for (std::size_t i = 0; i < f.data.size(); ++i) {
        const LossReport r = evaluate_instance(p, f.data.instances[i], f.priors[i], {w, tf, SemSpace::Hidden});
        EXPECT_NEAR(r.l_total, w.ce * r.l_ce + w.kl * r.l_kl + w.sem * r.l_sem, 1e-12);
        EXPECT_EQ(r.step_kl.size(), f.data.instances[i].step_count);
        EXPECT_GE(r.l_kl, 0.0);
        EXPECT_GE(r.l_sem, 0.0);
        EXPECT_TRUE(std::isfinite(r.l_ce));
      }
    }
  }
}

TEST(EvaluateInstance, GradientAccumulationIsScaled) {
  Fixture f = small_task(5, 2);
  const ReasonerParams p = ReasonerParams::init(f.vocab.size(), 6, 7, 5, 0.3);
  const RolloutConfig cfg;
  const ReasonerParams g1 = gradient_of(p, f.data.instances[0], f.priors[0], cfg);
  ReasonerParams g2 = ReasonerParams::zeros(p.vocab, p.embed_dim, p.hidden);
  evaluate_instance(p, f.data.instances[0], f.priors[0], cfg, &g2, 0.5);
  evaluate_instance(p, f.data.instances[0], f.priors[0], cfg, &g2, 0.5);
  EXPECT_LT(max_abs_diff(g1, g2), 1e-14);
}

class GradientCheck : public ::testing::TestWithParam<std::tuple<LossWeights, bool, SemSpace>> {};

TEST_P(GradientCheck, AnalyticMatchesCentralDifferences) {
  const auto [w, tf, space] = GetParam();
  Fixture f = small_task(20, 2);
  const ReasonerParams p = ReasonerParams::init(f.vocab.size(), 6, 8, 13, 0.5);
  const std::size_t i = with_steps(f.data, 2);
  const auto res = gradient_check(p, f.data.instances[i], f.priors[i], {w, tf, space}, 1e-5, 300);
  EXPECT_EQ(res.checked, 300u);
  EXPECT_LT(res.max_relative_error, 1e-4) << "index " << res.worst_index << " analytic " << res.worst_analytic
                                          << " numeric " << res.worst_numeric;
}

INSTANTIATE_TEST_SUITE_P(
    WeightConfigs, GradientCheck,
    ::testing::Values(std::make_tuple(LossWeights{1, 0, 0}, false, SemSpace::Hidden),
                      std::make_tuple(LossWeights{0, 1, 0}, false, SemSpace::Hidden),
                      std::make_tuple(LossWeights{0, 0, 1}, false, SemSpace::Hidden),
                      std::make_tuple(LossWeights{1, 1, 1}, false, SemSpace::Hidden),
                      std::make_tuple(LossWeights{1, 1, 1}, true, SemSpace::Hidden),
                      std::make_tuple(LossWeights{0, 1, 0}, true, SemSpace::Hidden),
                      std::make_tuple(LossWeights{1, 1, 1}, false, SemSpace::Vocab),
                      std::make_tuple(LossWeights{1, 0.3, 1}, true, SemSpace::Vocab)));

TEST(GradientCheckContract, RejectsBadEps) {
  Fixture f = small_task(3, 1);
  const ReasonerParams p = ReasonerParams::init(f.vocab.size(), 4, 4, 1);
  EXPECT_THROW(gradient_check(p, f.data.instances[0], f.priors[0], {}, 0.0), Error);
  EXPECT_THROW(gradient_check(p, f.data.instances[0], f.priors[0], {}, 1e-2), Error);
}

// With the KL weight at zero the priors only enter through the KL term in the
// autoregressive rollout, so swapping them must leave the gradient unchanged.
TEST(ZeroWeightAblation, KlWeightZeroIgnoresPriors) {
  Fixture mix = small_task(10, 2, PriorMethod::Mix);
  Fixture uni = small_task(10, 2, PriorMethod::Uniform);
  const ReasonerParams p = ReasonerParams::init(mix.vocab.size(), 6, 8, 3, 0.3);
  const RolloutConfig cfg{{1, 0, 1}, false, SemSpace::Hidden};
  for (std::size_t i = 0; i < mix.data.size(); ++i) {
    const auto ga = gradient_of(p, mix.data.instances[i], mix.priors[i], cfg);
    const auto gb = gradient_of(p, uni.data.instances[i], uni.priors[i], cfg);
    EXPECT_TRUE(ga == gb);
  }
}

// Gradients are linear in the weights, so dropping a term equals summing the
// single-term gradients of the remaining ones.
TEST(ZeroWeightAblation, DroppedTermMatchesOmission) {
  Fixture f = small_task(10, 2);
  const ReasonerParams p = ReasonerParams::init(f.vocab.size(), 6, 8, 3, 0.3);
  const auto& inst = f.data.instances[with_steps(f.data, 2)];
  const auto& pr = f.priors[with_steps(f.data, 2)];
  for (bool tf : {false, true}) {
    const auto ce = gradient_of(p, inst, pr, {{1, 0, 0}, tf, SemSpace::Hidden});
    const auto kl = gradient_of(p, inst, pr, {{0, 1, 0}, tf, SemSpace::Hidden});
    const auto sem = gradient_of(p, inst, pr, {{0, 0, 1}, tf, SemSpace::Hidden});
    ReasonerParams ce_kl = ce, ce_sem = ce;
    ce_kl.for_each_tensor([&](const char* name, auto& t) {
      kl.for_each_tensor([&](const char* other, const auto& u) {
        if (std::string(name) == other) t += u;
      });
    });
    ce_sem.for_each_tensor([&](const char* name, auto& t) {
      sem.for_each_tensor([&](const char* other, const auto& u) {
        if (std::string(name) == other) t += u;
      });
    });
    EXPECT_LT(max_abs_diff(gradient_of(p, inst, pr, {{1, 1, 0}, tf, SemSpace::Hidden}), ce_kl), 1e-12);
    EXPECT_LT(max_abs_diff(gradient_of(p, inst, pr, {{1, 0, 1}, tf, SemSpace::Hidden}), ce_sem), 1e-12);
  }
}

TEST(TrainEpochs, ZeroEpochsReturnsInitialParams) {
  Fixture f = small_task(20, 1);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.embed_dim = 4;
  cfg.hidden = 6;
  const auto res = train_epochs(f.data, f.data, f.priors, f.vocab.size(), cfg);
  EXPECT_TRUE(res.history.empty());
  EXPECT_EQ(res.best_epoch, 0u);
  EXPECT_TRUE(res.params == ReasonerParams::init(f.vocab.size(), 4, 6, cfg.seed, cfg.init_scale));
}

TEST(TrainEpochs, DeterministicAndLossDecreases) {
  Fixture f = small_task(64, 2);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.embed_dim = 8;
  cfg.hidden = 16;
  std::vector<std::size_t> seen;
  const auto a = train_epochs(f.data, f.data, f.priors, f.vocab.size(), cfg,
                              [&](const EpochRecord& r) { seen.push_back(r.epoch); });
  const auto b = train_epochs(f.data, f.data, f.priors, f.vocab.size(), cfg);
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(history_csv(a.history), history_csv(b.history));
  EXPECT_TRUE(a.params == b.params);
  ASSERT_EQ(a.history.size(), 4u);
  EXPECT_LT(a.history.back().l_total, a.history.front().l_total);
  for (const auto& r : a.history) EXPECT_NEAR(r.l_total, r.l_ce + r.l_kl + r.l_sem, 1e-9);

  TrainConfig other = cfg;
  other.seed = 778;
  EXPECT_NE(history_csv(train_epochs(f.data, f.data, f.priors, f.vocab.size(), other).history),
            history_csv(a.history));
}

TEST(TrainEpochs, RejectsMissingOrMismatchedPriors) {
  Fixture f = small_task(10, 2);
  TrainConfig cfg;
  cfg.epochs = 1;
  auto fewer = f.priors;
  fewer.pop_back();
  EXPECT_THROW(train_epochs(f.data, f.data, fewer, f.vocab.size(), cfg), Error);
  auto wrong = f.priors;
  wrong[0].steps.push_back(wrong[0].steps[0]);
  wrong[0].focus.push_back(wrong[0].focus[0]);
  EXPECT_THROW(train_epochs(f.data, f.data, wrong, f.vocab.size(), cfg), Error);
}

TEST(TrainConfigJson, RoundTripAndErrors) {
  TrainConfig c;
  c.epochs = 7;
  c.weights = {1, 0.3, 1};
  c.sem_space = SemSpace::Vocab;
  c.prior.method = PriorMethod::Uniform;
  c.sampling.max_latent_steps = 5;
  const auto back = train_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"optimizer", "lbfgs"}}), Error);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"sem_space", "x"}}), Error);
}

TEST(HistoryCsv, HeaderAndRounding) {
  EXPECT_EQ(history_csv({}), "epoch,l_ce,l_kl,l_sem,l_total,val_acc\n");
  EpochRecord r{3, 0.1234567, 0, 1, 1.1234567, 0.5};
  EXPECT_EQ(history_csv({r}), "epoch,l_ce,l_kl,l_sem,l_total,val_acc\n3,0.123457,0.000000,1.000000,1.123457,0.500000\n");
}
