#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "softreason/chain_parser.hpp"
#include "softreason/common.hpp"
#include "softreason/corpus.hpp"
#include "softreason/priors.hpp"
#include "softreason/reasoner.hpp"

namespace softreason {

struct LossWeights {
  double ce = 1.0;
  double kl = 1.0;
  double sem = 1.0;
};

inline void validate(const LossWeights& w) {
  if (w.ce < 0 || w.kl < 0 || w.sem < 0) throw Error("loss weights must be nonnegative");
  if (w.ce == 0 && w.kl == 0 && w.sem == 0) throw Error("loss weights must not all be zero");
}

struct LossReport {
  double l_ce = 0, l_kl = 0, l_sem = 0, l_total = 0;
  std::vector<double> step_kl;             // unweighted focused KL per latent step
  std::vector<std::size_t> focus_counts;   // |T_j| per latent step
};

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

// Mean negative log-likelihood of each target under its logit vector.
inline double loss_answer_ce(const std::vector<Vec>& logits, const std::vector<TokenId>& targets) {
  if (logits.size() != targets.size()) throw Error("loss_answer_ce: length mismatch");
  if (targets.empty()) throw Error("loss_answer_ce: no supervised positions");
  double sum = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || targets[i] >= logits[i].size()) throw Error("loss_answer_ce: target out of range");
    sum -= log_softmax(logits[i])(targets[i]);
  }
  return sum / static_cast<double>(targets.size());
}

// One step of the truncated KL: sum over the focus set of p (log p - log q).
inline double focused_kl_term(const Vec& log_q, const SparsePrior& prior, const FocusSet& focus) {
  double s = 0;
  for (TokenId v : focus.selected_ids) {
    const double p = prior.prob(v);
    if (p > 0) s += p * (std::log(p) - log_q(v));
  }
  return s;
}

inline double loss_focused_kl(const std::vector<Vec>& q, const std::vector<SparsePrior>& priors,
                              const std::vector<FocusSet>& focus) {
  if (q.empty()) throw Error("loss_focused_kl: no latent steps");
  if (priors.size() != q.size() || focus.size() != q.size()) throw Error("loss_focused_kl: length mismatch");
  double sum = 0;
  for (std::size_t j = 0; j < q.size(); ++j) sum += focused_kl_term(q[j].array().log().matrix(), priors[j], focus[j]);
  return sum / static_cast<double>(q.size());
}

// KL(softmax(a) || softmax(b)) over the coordinates of a and b.
inline double softmax_kl(const Vec& a, const Vec& b) {
  const Vec la = log_softmax(a);
  const Vec lb = log_softmax(b);
  return (la.array().exp() * (la - lb).array()).sum();
}

inline double loss_semantic(const Vec& h_q, const std::vector<Vec>& h_z) {
  if (h_z.empty()) throw Error("loss_semantic: empty latent sequence");
  double sum = 0;
  for (const Vec& h : h_z) {
    if (h.size() != h_q.size()) throw Error("loss_semantic: dimension mismatch");
    sum += softmax_kl(h_q, h);
  }
  return sum / static_cast<double>(h_z.size());
}

inline double loss_total(const LossWeights& w, double l_ce, double l_kl, double l_sem) {
  return w.ce * l_ce + w.kl * l_kl + w.sem * l_sem;
}

// ---------------------------------------------------------------------------
// Teacher-forced rollout with exact backpropagation
// ---------------------------------------------------------------------------

enum class SemSpace { Hidden, Vocab };

struct RolloutConfig {
  LossWeights weights;
  bool teacher_forcing = false;
  SemSpace sem_space = SemSpace::Hidden;
};

// Rolls out exactly N latent steps for one tokenized instance, then supervises
// [THINK_END, answer..., PAD]. Soft inputs are mixed from the model's own dense
// distribution, or from the prior under teacher forcing. When `grad` is given,
// d(l_total)/d(theta) * grad_scale is accumulated into it.
inline LossReport evaluate_instance(const ReasonerParams& p, const Instance& inst, const InstancePriors& priors,
                                    const RolloutConfig& cfg, ReasonerParams* grad = nullptr,
                                    double grad_scale = 1.0) {
  const std::size_t N = priors.steps.size();
  if (N == 0) throw Error("evaluate_instance: no latent steps");
  if (priors.focus.size() != N) throw Error("evaluate_instance: focus/steps length mismatch");
  if (inst.question_ids.empty() || inst.answer_ids.empty()) throw Error("evaluate_instance: instance not tokenized");
  const auto H = static_cast<Eigen::Index>(p.hidden);
  const LossWeights& w = cfg.weights;

  // Position t consumes input t and produces hidden[t]; hidden[0] is the zero state.
  struct Input {
    TokenId token = -1;     // >= 0 for a discrete token
    std::size_t soft = 0;   // latent index j (1-based) for a soft token
  };
  std::vector<Input> inputs{{}};  // dummy slot so indices match positions
  std::vector<Vec> hidden{Vec::Zero(H)};
  std::vector<GruCache> caches(1);

  auto feed = [&](const Vec& x, Input in) {
    GruCache k;
    hidden.push_back(gru_forward(p, x, hidden.back(), &k));
    caches.push_back(std::move(k));
    inputs.push_back(in);
  };

  feed(embed_token(p, special::kBos), {special::kBos, 0});
  for (TokenId id : inst.question_ids) feed(embed_token(p, id), {id, 0});
  const std::size_t P = hidden.size() - 1;  // position of h_q

  std::vector<Vec> log_q(N + 1);
  std::vector<Vec> q(N + 1);
  std::vector<Vec> dense_prior(N + 1);
  for (std::size_t j = 1; j <= N; ++j) {
    log_q[j] = log_softmax(head_logits(p, hidden[P + j - 1]));
    q[j] = log_q[j].array().exp().matrix();
    Vec z;
    if (cfg.teacher_forcing) {
      dense_prior[j] = to_dense(priors.steps[j - 1], p.vocab);
      z = mix_embedding(dense_prior[j], p.embed);
    } else {
      z = p.embed.transpose() * q[j];
    }
    feed(z, {-1, j});
  }

  std::vector<TokenId> targets{special::kThinkEnd};
  targets.insert(targets.end(), inst.answer_ids.begin(), inst.answer_ids.end());
  targets.push_back(special::kPad);
  feed(embed_token(p, special::kAnswerSep), {special::kAnswerSep, 0});
  for (TokenId id : inst.answer_ids) feed(embed_token(p, id), {id, 0});
  const std::size_t T = hidden.size() - 1;
  const std::size_t ce_start = P + N;  // hidden[ce_start + i] predicts targets[i]

  // Logits at every position from P onward.
  std::vector<Vec> logits(T + 1);
  for (std::size_t t = P; t <= T; ++t) logits[t] = head_logits(p, hidden[t]);

  LossReport rep;
  std::vector<Vec> dlogits(T + 1);
  std::vector<Vec> dhidden(T + 1);
  const bool backprop = grad != nullptr;
  auto add_dlogits = [&](std::size_t t, const Vec& g) {
    if (dlogits[t].size() == 0) dlogits[t] = Vec::Zero(g.size());
    dlogits[t] += g;
  };
  auto add_dhidden = [&](std::size_t t, const Vec& g) {
    if (dhidden[t].size() == 0) dhidden[t] = Vec::Zero(H);
    dhidden[t] += g;
  };

  // Answer consistency.
  {
    const double M = static_cast<double>(targets.size());
    double sum = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const std::size_t t = ce_start + i;
      const Vec ls = log_softmax(logits[t]);
      sum -= ls(targets[i]);
      if (backprop && w.ce != 0) {
        Vec g = ls.array().exp().matrix();
        g(targets[i]) -= 1.0;
        add_dlogits(t, g * (grad_scale * w.ce / M));
      }
    }
    rep.l_ce = sum / M;
  }

  // Focused prior alignment.
  {
    double sum = 0;
    for (std::size_t j = 1; j <= N; ++j) {
      const auto& prior = priors.steps[j - 1];
      const auto& focus = priors.focus[j - 1];
      const double term = focused_kl_term(log_q[j], prior, focus);
      rep.step_kl.push_back(term);
      rep.focus_counts.push_back(focus.selected_ids.size());
      sum += term;
      if (backprop && w.kl != 0 && !focus.selected_ids.empty()) {
        // d/dlogits of -sum_T p log q = (sum_T p) q - p_T
        double mass = 0;
        Vec g = Vec::Zero(q[j].size());
        for (TokenId v : focus.selected_ids) {
          const double pv = prior.prob(v);
          mass += pv;
          g(v) -= pv;
        }
        g += mass * q[j];
        add_dlogits(P + j - 1, g * (grad_scale * w.kl / static_cast<double>(N)));
      }
    }
    rep.l_kl = sum / static_cast<double>(N);
  }

  // Problem-thought alignment.
  {
    const bool vocab_space = cfg.sem_space == SemSpace::Vocab;
    const Vec& a = vocab_space ? logits[P] : hidden[P];
    const Vec ls = log_softmax(a);
    const Vec s = ls.array().exp().matrix();
    double sum = 0;
    Vec d_a = Vec::Zero(a.size());
    const double scale = grad_scale * w.sem / static_cast<double>(N);
    for (std::size_t j = 1; j <= N; ++j) {
      const Vec& b = vocab_space ? logits[P + j] : hidden[P + j];
      const Vec lt = log_softmax(b);
      const Vec gap = ls - lt;
      sum += s.dot(gap);
      if (backprop && w.sem != 0) {
        d_a += s.cwiseProduct((gap.array() - s.dot(gap)).matrix());
        const Vec d_b = (lt.array().exp().matrix() - s) * scale;
        if (vocab_space) {
          add_dlogits(P + j, d_b);
        } else {
          add_dhidden(P + j, d_b);
        }
      }
    }
    if (backprop && w.sem != 0) {
      if (vocab_space) {
        add_dlogits(P, d_a * scale);
      } else {
        add_dhidden(P, d_a * scale);
      }
    }
    rep.l_sem = sum / static_cast<double>(N);
  }

  rep.l_total = loss_total(w, rep.l_ce, rep.l_kl, rep.l_sem);
  if (!backprop) return rep;

  Vec dh_carry = Vec::Zero(H);
  for (std::size_t t = T; t >= 1; --t) {
    Vec dh = dh_carry;
    if (dhidden[t].size() != 0) dh += dhidden[t];
    if (dlogits[t].size() != 0) {
      grad->w_out.noalias() += dlogits[t] * hidden[t].transpose();
      grad->b_out += dlogits[t];
      dh.noalias() += p.w_out.transpose() * dlogits[t];
    }
    Vec dh_prev;
    const Vec dx = gru_backward(p, caches[t], dh, *grad, dh_prev);
    const Input& in = inputs[t];
    if (in.token >= 0) {
      grad->embed.row(in.token) += dx.transpose();
    } else if (cfg.teacher_forcing) {
      const Vec& pr = dense_prior[in.soft];
      for (Eigen::Index v = 0; v < pr.size(); ++v) {
        if (pr(v) != 0.0) grad->embed.row(v) += pr(v) * dx.transpose();
      }
    } else {
      const Vec& qj = q[in.soft];
      grad->embed.noalias() += qj * dx.transpose();
      const Vec dq = p.embed * dx;
      const Vec g = qj.cwiseProduct((dq.array() - qj.dot(dq)).matrix());
      add_dlogits(t - 1, g);
    }
    dh_carry = std::move(dh_prev);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

struct GradientCheckResult {
  double max_relative_error = 0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0, worst_numeric = 0;
};

// Compares analytic gradients of l_total against central differences on
// `samples` distinct randomly chosen parameters. Relative error uses
// max(|analytic|, |numeric|, 1e-8) as the denominator.
inline GradientCheckResult gradient_check(const ReasonerParams& params, const Instance& inst,
                                          const InstancePriors& priors, const RolloutConfig& cfg, double eps,
                                          std::size_t samples = 200, std::uint64_t seed = 777) {
  if (!(eps >= 1e-6 && eps <= 1e-4)) throw Error("gradient_check: eps must be in [1e-6, 1e-4]");
  ReasonerParams grad = ReasonerParams::zeros(params.vocab, params.embed_dim, params.hidden);
  const double base = evaluate_instance(params, inst, priors, cfg, &grad).l_total;
  if (!std::isfinite(base)) throw Error("gradient_check: non-finite loss");

  const std::size_t total = params.parameter_count();
  std::vector<std::size_t> indices(total);
  for (std::size_t i = 0; i < total; ++i) indices[i] = i;
  SplitMix64 rng(seed);
  shuffle_in_place(indices, rng);
  indices.resize(std::min(samples, total));

  GradientCheckResult res;
  ReasonerParams probe = params;
  for (std::size_t idx : indices) {
    double& slot = probe.at(idx);
    const double orig = slot;
    slot = orig + eps;
    const double up = evaluate_instance(probe, inst, priors, cfg).l_total;
    slot = orig - eps;
    const double down = evaluate_instance(probe, inst, priors, cfg).l_total;
    slot = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) throw Error("gradient_check: non-finite loss");
    const double numeric = (up - down) / (2 * eps);
    const double analytic = grad.at(idx);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel > res.max_relative_error || res.checked == 0) {
      res.max_relative_error = std::max(rel, res.max_relative_error);
      res.worst_index = idx;
      res.worst_analytic = analytic;
      res.worst_numeric = numeric;
    }
    ++res.checked;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class OptimizerKind { Sgd, Adam };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 777;
  LossWeights weights;
  PriorConfig prior;
  bool teacher_forcing = false;
  double gradient_clip = 1.0;
  SemSpace sem_space = SemSpace::Hidden;
  std::size_t embed_dim = 32;
  std::size_t hidden = 64;
  double init_scale = 0.08;
  SamplingConfig sampling;
  double val_fraction = 0.1;  // used only when no validation set is supplied
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size == 0) throw Error("train config: batch_size must be positive");
  if (!(c.learning_rate > 0)) throw Error("train config: learning_rate must be positive");
  if (!(c.gradient_clip > 0)) throw Error("train config: gradient_clip must be positive");
  if (c.embed_dim == 0 || c.hidden == 0) throw Error("train config: model dimensions must be positive");
  validate(c.weights);
  validate(c.sampling);
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["optimizer"] = c.optimizer == OptimizerKind::Adam ? "adam" : "sgd";
  j["seed"] = c.seed;
  j["weights"] = {{"ce", c.weights.ce}, {"kl", c.weights.kl}, {"sem", c.weights.sem}};
  j["prior"] = to_json(c.prior);
  j["teacher_forcing"] = c.teacher_forcing;
  j["gradient_clip"] = c.gradient_clip;
  j["sem_space"] = c.sem_space == SemSpace::Hidden ? "hidden" : "vocab";
  j["embed_dim"] = c.embed_dim;
  j["hidden"] = c.hidden;
  j["init_scale"] = c.init_scale;
  j["sampling"] = {{"temperature", c.sampling.temperature},
                   {"top_p", c.sampling.top_p},
                   {"max_latent_steps", c.sampling.max_latent_steps},
                   {"greedy", c.sampling.greedy}};
  j["val_fraction"] = c.val_fraction;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  if (j.contains("optimizer")) {
    const auto s = j["optimizer"].get<std::string>();
    if (s == "adam") {
      c.optimizer = OptimizerKind::Adam;
    } else if (s == "sgd") {
      c.optimizer = OptimizerKind::Sgd;
    } else {
      throw Error("train config: unknown optimizer '" + s + "'");
    }
  }
  c.seed = j.value("seed", c.seed);
  if (j.contains("weights")) {
    const auto& w = j["weights"];
    c.weights.ce = w.value("ce", c.weights.ce);
    c.weights.kl = w.value("kl", c.weights.kl);
    c.weights.sem = w.value("sem", c.weights.sem);
  }
  if (j.contains("prior")) c.prior = prior_config_from_json(j["prior"]);
  c.teacher_forcing = j.value("teacher_forcing", c.teacher_forcing);
  c.gradient_clip = j.value("gradient_clip", c.gradient_clip);
  if (j.contains("sem_space")) {
    const auto s = j["sem_space"].get<std::string>();
    if (s == "hidden") {
      c.sem_space = SemSpace::Hidden;
    } else if (s == "vocab") {
      c.sem_space = SemSpace::Vocab;
    } else {
      throw Error("train config: unknown sem_space '" + s + "'");
    }
  }
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.init_scale = j.value("init_scale", c.init_scale);
  if (j.contains("sampling")) {
    const auto& s = j["sampling"];
    c.sampling.temperature = s.value("temperature", c.sampling.temperature);
    c.sampling.top_p = s.value("top_p", c.sampling.top_p);
    c.sampling.max_latent_steps = s.value("max_latent_steps", c.sampling.max_latent_steps);
    c.sampling.greedy = s.value("greedy", c.sampling.greedy);
  }
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  return c;
}

// Adam with bias correction, or plain SGD.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, const ReasonerParams& shape)
      : kind_(kind),
        lr_(lr),
        m_(ReasonerParams::zeros(shape.vocab, shape.embed_dim, shape.hidden)),
        v_(ReasonerParams::zeros(shape.vocab, shape.embed_dim, shape.hidden)) {}

  void step(ReasonerParams& p, const ReasonerParams& g) {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    auto apply = [&](Eigen::Ref<Mat> param, const Eigen::Ref<const Mat>& grad, Eigen::Ref<Mat> m, Eigen::Ref<Mat> v) {
      if (kind_ == OptimizerKind::Sgd) {
        param -= lr_ * grad;
        return;
      }
      m = kBeta1 * m + (1 - kBeta1) * grad;
      v = kBeta2 * v + (1 - kBeta2) * grad.cwiseProduct(grad);
      param.array() -= lr_ * (m.array() / bc1) / ((v.array() / bc2).sqrt() + kEps);
    };
    apply(p.embed, g.embed, m_.embed, v_.embed);
    apply(p.w_input, g.w_input, m_.w_input, v_.w_input);
    apply(p.w_hidden, g.w_hidden, m_.w_hidden, v_.w_hidden);
    apply(p.bias, g.bias, m_.bias, v_.bias);
    apply(p.w_out, g.w_out, m_.w_out, v_.w_out);
    apply(p.b_out, g.b_out, m_.b_out, v_.b_out);
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  OptimizerKind kind_;
  double lr_;
  ReasonerParams m_, v_;
  std::size_t t_ = 0;
};

inline double global_norm(const ReasonerParams& g) {
  double s = 0;
  g.for_each_tensor([&](const char*, const auto& t) { s += t.squaredNorm(); });
  return std::sqrt(s);
}

inline void scale_params(ReasonerParams& g, double k) {
  g.for_each_tensor([&](const char*, auto& t) { t *= k; });
}

struct EpochRecord {
  std::size_t epoch = 0;
  double l_ce = 0, l_kl = 0, l_sem = 0, l_total = 0;
  double val_acc = 0;
};

struct TrainResult {
  ReasonerParams params;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 when no epoch ran
};

// Exact-match accuracy broken down by reasoning-step count.
struct Evaluation {
  std::size_t total = 0, correct = 0;
  std::size_t termination_matches = 0;  // termination_step == step_count
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> by_steps;  // N -> (correct, total)

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
  double accuracy_for(std::size_t n) const {
    auto it = by_steps.find(n);
    if (it == by_steps.end() || it->second.second == 0) return 0.0;
    return static_cast<double>(it->second.first) / static_cast<double>(it->second.second);
  }
  double termination_rate() const {
    return total ? static_cast<double>(termination_matches) / static_cast<double>(total) : 0.0;
  }
};

inline Evaluation evaluate(const Dataset& d, const ReasonerParams& p, const SamplingConfig& cfg,
                           std::vector<LatentTrace>* traces = nullptr) {
  Evaluation ev;
  for (const Instance& inst : d.instances) {
    LatentTrace t = infer(inst.question_ids, p, cfg);
    const bool ok = t.answer_ids == inst.answer_ids;
    ++ev.total;
    ev.correct += ok;
    ev.termination_matches += (!t.truncated && t.termination_step == inst.step_count);
    auto& slot = ev.by_steps[inst.step_count];
    slot.first += ok;
    ++slot.second;
    if (traces) traces->push_back(std::move(t));
  }
  return ev;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

// Single-stage training: every instance rolls out exactly its N latent steps
// and is optimized on the joint objective. Returns the parameters from the
// epoch with the best validation accuracy (earliest on ties).
inline TrainResult train_epochs(const Dataset& train, const Dataset& val, const std::vector<InstancePriors>& priors,
                                std::size_t vocab_size, const TrainConfig& cfg,
                                const EpochCallback& on_epoch = nullptr) {
  validate(cfg);
  if (priors.size() != train.size()) throw Error("train: priors missing for some training instances");
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (priors[i].steps.size() != train.instances[i].step_count) {
      throw Error("train: priors for instance " + std::to_string(i) + " do not match its step count");
    }
  }
  TrainResult res;
  res.params = ReasonerParams::init(vocab_size, cfg.embed_dim, cfg.hidden, cfg.seed, cfg.init_scale);
  if (cfg.epochs == 0 || train.empty()) return res;

  const RolloutConfig rollout{cfg.weights, cfg.teacher_forcing, cfg.sem_space};
  ReasonerParams params = res.params;
  Optimizer opt(cfg.optimizer, cfg.learning_rate, params);
  ReasonerParams grad = ReasonerParams::zeros(vocab_size, cfg.embed_dim, cfg.hidden);
  SplitMix64 rng(derive_seed(cfg.seed, {0x5348554646ULL}));
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double best_acc = -1;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      grad.set_zero();
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = order[b];
        const LossReport r = evaluate_instance(params, train.instances[i], priors[i], rollout, &grad, scale);
        if (!std::isfinite(r.l_total)) {
          throw Error("train: non-finite loss at epoch " + std::to_string(epoch) + ", instance " + std::to_string(i));
        }
        rec.l_ce += r.l_ce;
        rec.l_kl += r.l_kl;
        rec.l_sem += r.l_sem;
        rec.l_total += r.l_total;
      }
      const double norm = global_norm(grad);
      if (!std::isfinite(norm)) throw Error("train: non-finite gradient at epoch " + std::to_string(epoch));
      if (norm > cfg.gradient_clip) scale_params(grad, cfg.gradient_clip / norm);
      opt.step(params, grad);
    }
    const double n = static_cast<double>(train.size());
    rec.l_ce /= n;
    rec.l_kl /= n;
    rec.l_sem /= n;
    rec.l_total /= n;
    rec.val_acc = val.empty() ? 0.0 : evaluate(val, params, cfg.sampling).accuracy();
    res.history.push_back(rec);
    if (rec.val_acc > best_acc) {
      best_acc = rec.val_acc;
      res.params = params;
      res.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(rec);
  }
  return res;
}

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,l_ce,l_kl,l_sem,l_total,val_acc\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + format_fixed(r.l_ce, 6) + "," + format_fixed(r.l_kl, 6) + "," +
           format_fixed(r.l_sem, 6) + "," + format_fixed(r.l_total, 6) + "," + format_fixed(r.val_acc, 6) + "\n";
  }
  return out;
}

}  // namespace softreason
