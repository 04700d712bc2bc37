#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "softreason/chain_parser.hpp"
#include "softreason/common.hpp"
#include "softreason/priors.hpp"

namespace softreason {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Trainable parameters of the latent reasoner: token embeddings, one gated
// recurrent layer, and a vocabulary head. The recurrent weights stack the
// reset, update and candidate gates in that order (3*hidden rows).
struct ReasonerParams {
  std::size_t vocab = 0;
  std::size_t embed_dim = 0;
  std::size_t hidden = 0;

  Mat embed;     // vocab x embed_dim
  Mat w_input;   // 3*hidden x embed_dim
  Mat w_hidden;  // 3*hidden x hidden
  Vec bias;      // 3*hidden
  Mat w_out;     // vocab x hidden
  Vec b_out;     // vocab

  static ReasonerParams zeros(std::size_t vocab, std::size_t embed_dim, std::size_t hidden) {
    ReasonerParams p;
    p.vocab = vocab;
    p.embed_dim = embed_dim;
    p.hidden = hidden;
    p.embed = Mat::Zero(vocab, embed_dim);
    p.w_input = Mat::Zero(3 * hidden, embed_dim);
    p.w_hidden = Mat::Zero(3 * hidden, hidden);
    p.bias = Vec::Zero(3 * hidden);
    p.w_out = Mat::Zero(vocab, hidden);
    p.b_out = Vec::Zero(vocab);
    return p;
  }

  // Uniform in [-scale, scale], tensors filled in declaration order, row-major.
  static ReasonerParams init(std::size_t vocab, std::size_t embed_dim, std::size_t hidden, std::uint64_t seed,
                             double scale = 0.08) {
    if (vocab < special::kCount + 1 || embed_dim == 0 || hidden == 0) throw Error("reasoner: invalid dimensions");
    ReasonerParams p = zeros(vocab, embed_dim, hidden);
    SplitMix64 rng(seed);
    p.for_each_tensor([&](const char*, auto& t) {
      for (Eigen::Index r = 0; r < t.rows(); ++r) {
        for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = scale * (2.0 * rng.uniform_open() - 1.0);
      }
    });
    return p;
  }

  template <typename F>
  void for_each_tensor(F&& f) {
    f("embed", embed);
    f("w_input", w_input);
    f("w_hidden", w_hidden);
    f("bias", bias);
    f("w_out", w_out);
    f("b_out", b_out);
  }

  template <typename F>
  void for_each_tensor(F&& f) const {
    f("embed", embed);
    f("w_input", w_input);
    f("w_hidden", w_hidden);
    f("bias", bias);
    f("w_out", w_out);
    f("b_out", b_out);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const char*, const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  // Flat access in for_each_tensor order (column-major within a tensor).
  double& at(std::size_t flat) {
    double* out = nullptr;
    for_each_tensor([&](const char*, auto& t) {
      const auto n = static_cast<std::size_t>(t.size());
      if (!out && flat < n) out = t.data() + flat;
      if (!out) flat -= n;
    });
    if (!out) throw Error("parameter index out of range");
    return *out;
  }

  double at(std::size_t flat) const { return const_cast<ReasonerParams&>(*this).at(flat); }

  void set_zero() {
    for_each_tensor([](const char*, auto& t) { t.setZero(); });
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const char*, const auto& t) { ok = ok && t.allFinite(); });
    return ok;
  }

  bool operator==(const ReasonerParams& o) const {
    return vocab == o.vocab && embed_dim == o.embed_dim && hidden == o.hidden && embed == o.embed &&
           w_input == o.w_input && w_hidden == o.w_hidden && bias == o.bias && w_out == o.w_out &&
           b_out == o.b_out;
  }
};

// ---------------------------------------------------------------------------
// Recurrent core
// ---------------------------------------------------------------------------

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Values saved by the forward pass of one recurrent step.
struct GruCache {
  Vec x, h_prev, r, u, c, h;
};

// r = sig(Wx_r x + Wh_r h + b_r)
// u = sig(Wx_u x + Wh_u h + b_u)
// c = tanh(Wx_c x + Wh_c (r*h) + b_c)
// h' = (1 - u) * h + u * c
inline Vec gru_forward(const ReasonerParams& p, const Vec& x, const Vec& h, GruCache* cache = nullptr) {
  const auto H = static_cast<Eigen::Index>(p.hidden);
  const Vec gx = p.w_input * x + p.bias;
  const Vec gh = p.w_hidden.topRows(2 * H) * h;
  Vec r(H), u(H);
  for (Eigen::Index i = 0; i < H; ++i) {
    r(i) = sigmoid(gx(i) + gh(i));
    u(i) = sigmoid(gx(H + i) + gh(H + i));
  }
  const Vec rh = r.cwiseProduct(h);
  const Vec pre_c = gx.tail(H) + p.w_hidden.bottomRows(H) * rh;
  const Vec c = pre_c.array().tanh().matrix();
  Vec out = (Vec::Ones(H) - u).cwiseProduct(h) + u.cwiseProduct(c);
  if (cache) {
    cache->x = x;
    cache->h_prev = h;
    cache->r = std::move(r);
    cache->u = std::move(u);
    cache->c = c;
    cache->h = out;
  }
  return out;
}

// Accumulates parameter gradients into `grad`; returns d/dx and writes d/dh_prev.
inline Vec gru_backward(const ReasonerParams& p, const GruCache& k, const Vec& dh, ReasonerParams& grad,
                        Vec& dh_prev) {
  const auto H = static_cast<Eigen::Index>(p.hidden);
  const Vec du = dh.cwiseProduct(k.c - k.h_prev);
  const Vec dc = dh.cwiseProduct(k.u);
  dh_prev = dh.cwiseProduct(Vec::Ones(H) - k.u);

  Vec da(3 * H);
  da.tail(H) = dc.cwiseProduct((Vec::Ones(H) - k.c.cwiseProduct(k.c)));
  const Vec rh = k.r.cwiseProduct(k.h_prev);
  const Vec d_rh = p.w_hidden.bottomRows(H).transpose() * da.tail(H);
  const Vec dr = d_rh.cwiseProduct(k.h_prev);
  dh_prev += d_rh.cwiseProduct(k.r);
  da.segment(H, H) = du.cwiseProduct(k.u.cwiseProduct(Vec::Ones(H) - k.u));
  da.head(H) = dr.cwiseProduct(k.r.cwiseProduct(Vec::Ones(H) - k.r));

  grad.w_input.noalias() += da * k.x.transpose();
  grad.bias += da;
  grad.w_hidden.topRows(2 * H).noalias() += da.head(2 * H) * k.h_prev.transpose();
  grad.w_hidden.bottomRows(H).noalias() += da.tail(H) * rh.transpose();
  dh_prev.noalias() += p.w_hidden.topRows(2 * H).transpose() * da.head(2 * H);
  return p.w_input.transpose() * da;
}

inline Vec head_logits(const ReasonerParams& p, const Vec& h) { return p.w_out * h + p.b_out; }

inline Vec softmax(const Vec& logits) {
  const double mx = logits.maxCoeff();
  Vec e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

inline Vec log_softmax(const Vec& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

// ---------------------------------------------------------------------------
// Soft tokens
// ---------------------------------------------------------------------------

// z = sum_i pi_i e_i over the nonzero entries of the distribution.
inline Vec mix_embedding(const Vec& dist, const Mat& table) {
  if (dist.size() != table.rows()) throw Error("mix_embedding: distribution length does not match table rows");
  Vec z = Vec::Zero(table.cols());
  for (Eigen::Index i = 0; i < dist.size(); ++i) {
    if (dist(i) != 0.0) z.noalias() += dist(i) * table.row(i).transpose();
  }
  return z;
}

inline Vec mix_embedding(const SparsePrior& dist, const Mat& table) {
  Vec z = Vec::Zero(table.cols());
  for (const auto& e : dist.entries) {
    if (e.id < 0 || e.id >= table.rows()) throw Error("mix_embedding: token id out of range");
    z.noalias() += e.value * table.row(e.id).transpose();
  }
  return z;
}

inline Vec to_dense(const SparsePrior& p, std::size_t vocab) {
  Vec v = Vec::Zero(static_cast<Eigen::Index>(vocab));
  for (const auto& e : p.entries) {
    if (e.id < 0 || static_cast<std::size_t>(e.id) >= vocab) throw Error("prior token id out of range");
    v(e.id) = e.value;
  }
  return v;
}

struct SoftToken {
  Vec dist;
  Vec z;
};

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct SamplingConfig {
  double temperature = 0.6;
  double top_p = 0.95;
  std::size_t max_latent_steps = 8;
  bool greedy = false;
};

inline void validate(const SamplingConfig& c) {
  if (!(c.temperature > 0)) throw Error("sampling config: temperature must be positive");
  if (!(c.top_p > 0 && c.top_p <= 1)) throw Error("sampling config: top_p must be in (0, 1]");
  if (c.max_latent_steps < 1) throw Error("sampling config: max_latent_steps must be positive");
}

// Lowest id wins ties.
inline Eigen::Index argmax(const Vec& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

// Temperature as p^(1/T) renormalized, then the smallest descending-probability
// prefix whose mass reaches top_p, renormalized. Greedy returns the argmax
// point mass.
inline Vec apply_sampling_filter(const Vec& q, const SamplingConfig& cfg) {
  const auto n = q.size();
  Vec out = Vec::Zero(n);
  if (cfg.greedy) {
    out(argmax(q)) = 1.0;
    return out;
  }
  validate(cfg);
  Vec scaled = Vec::Zero(n);
  double max_log = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (q(i) > 0) max_log = std::max(max_log, std::log(q(i)) / cfg.temperature);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (q(i) > 0) scaled(i) = std::exp(std::log(q(i)) / cfg.temperature - max_log);
  }
  scaled /= scaled.sum();

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return scaled(a) > scaled(b); });
  double cum = 0;
  for (Eigen::Index idx : order) {
    if (scaled(idx) <= 0) break;
    out(idx) = scaled(idx);
    cum += scaled(idx);
    if (cum >= cfg.top_p - 1e-12) break;
  }
  return out / out.sum();
}

inline bool should_terminate(const Vec& filtered) { return argmax(filtered) == special::kThinkEnd; }

// Hidden state of the core plus the number of positions consumed.
struct CoreState {
  Vec hidden;
  std::size_t position = 0;
};

struct QuestionEncoding {
  Vec h_q;
  CoreState state;
};

inline Vec embed_token(const ReasonerParams& p, TokenId id) {
  if (id < 0 || static_cast<std::size_t>(id) >= p.vocab) throw Error("token id out of range: " + std::to_string(id));
  return p.embed.row(id).transpose();
}

inline CoreState advance(const CoreState& s, const Vec& input, const ReasonerParams& p) {
  return CoreState{gru_forward(p, input, s.hidden), s.position + 1};
}

// Runs the core over BOS followed by the question tokens.
inline QuestionEncoding encode_question(const std::vector<TokenId>& question_ids, const ReasonerParams& p) {
  if (question_ids.empty()) throw Error("encode_question: empty question");
  CoreState s{Vec::Zero(static_cast<Eigen::Index>(p.hidden)), 0};
  s = advance(s, embed_token(p, special::kBos), p);
  for (TokenId id : question_ids) s = advance(s, embed_token(p, id), p);
  return QuestionEncoding{s.hidden, s};
}

// Distribution over the vocabulary for the next position.
inline Vec next_distribution(const CoreState& s, const ReasonerParams& p) {
  return softmax(head_logits(p, s.hidden));
}

struct LatentStepResult {
  Vec q;    // distribution for the following position
  Vec h_z;  // hidden state after consuming the soft token
  CoreState state;
};

// Consumes one soft token (the previous position's output) and returns the
// model's next distribution.
inline LatentStepResult latent_step(const CoreState& s, const Vec& soft_input, const ReasonerParams& p) {
  CoreState next = advance(s, soft_input, p);
  Vec q = next_distribution(next, p);
  Vec hz = next.hidden;
  return LatentStepResult{std::move(q), std::move(hz), std::move(next)};
}

inline constexpr std::size_t kAnswerCap = 16;

struct LatentTrace {
  Vec h_q;
  std::vector<Vec> distributions;  // raw model distribution at every latent decision point
  std::vector<Vec> filtered;       // the same after the sampling filter
  std::vector<SoftToken> soft_tokens;
  std::vector<Vec> h_z;
  std::size_t termination_step = 0;  // number of soft tokens fed
  bool truncated = false;            // max_latent_steps reached without THINK_END
  std::vector<TokenId> answer_ids;
};

inline std::vector<TokenId> decode_answer(CoreState s, const ReasonerParams& p) {
  std::vector<TokenId> out;
  s = advance(s, embed_token(p, special::kAnswerSep), p);
  while (out.size() < kAnswerCap) {
    const auto tok = static_cast<TokenId>(argmax(head_logits(p, s.hidden)));
    if (tok == special::kPad) break;
    out.push_back(tok);
    s = advance(s, embed_token(p, tok), p);
  }
  return out;
}

inline LatentTrace infer(const std::vector<TokenId>& question_ids, const ReasonerParams& p, const SamplingConfig& cfg) {
  validate(cfg);
  LatentTrace t;
  auto enc = encode_question(question_ids, p);
  t.h_q = enc.h_q;
  CoreState s = enc.state;
  Vec q = next_distribution(s, p);
  while (true) {
    Vec f = apply_sampling_filter(q, cfg);
    t.distributions.push_back(q);
    t.filtered.push_back(f);
    if (should_terminate(f)) break;
    if (t.soft_tokens.size() == cfg.max_latent_steps) {
      t.truncated = true;
      break;
    }
    Vec z = mix_embedding(f, p.embed);
    auto step = latent_step(s, z, p);
    t.soft_tokens.push_back(SoftToken{std::move(f), std::move(z)});
    t.h_z.push_back(step.h_z);
    s = std::move(step.state);
    q = std::move(step.q);
  }
  t.termination_step = t.soft_tokens.size();
  t.answer_ids = decode_answer(s, p);
  return t;
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------
//
// Little-endian binary layout:
//   8 bytes  magic "SRCKPT\0\1"
//   u32      format version (1)
//   u64      vocab, embed_dim, hidden
//   u32      tensor count
//   per tensor: u32 name length, name bytes, u64 rows, u64 cols,
//               rows*cols f64 values in row-major order

inline constexpr char kCheckpointMagic[8] = {'S', 'R', 'C', 'K', 'P', 'T', '\0', '\1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw Error("checkpoint: truncated file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const ReasonerParams& p) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, p.vocab);
  detail::put<std::uint64_t>(out, p.embed_dim);
  detail::put<std::uint64_t>(out, p.hidden);
  detail::put<std::uint32_t>(out, 6);
  p.for_each_tensor([&](const char* name, const auto& t) {
    const std::string n(name);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(n.size()));
    out += n;
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(t.rows()));
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(t.cols()));
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) detail::put<double>(out, t(r, c));
    }
  });
  return out;
}

inline ReasonerParams deserialize_checkpoint(const std::string& in) {
  if (in.size() < sizeof kCheckpointMagic || std::memcmp(in.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw Error("checkpoint: bad magic");
  }
  std::size_t pos = sizeof kCheckpointMagic;
  const auto version = detail::take<std::uint32_t>(in, pos);
  if (version != kCheckpointVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
  const auto vocab = detail::take<std::uint64_t>(in, pos);
  const auto embed_dim = detail::take<std::uint64_t>(in, pos);
  const auto hidden = detail::take<std::uint64_t>(in, pos);
  const auto count = detail::take<std::uint32_t>(in, pos);
  if (count != 6) throw Error("checkpoint: unexpected tensor count");
  ReasonerParams p = ReasonerParams::zeros(vocab, embed_dim, hidden);
  p.for_each_tensor([&](const char* name, auto& t) {
    const auto len = detail::take<std::uint32_t>(in, pos);
    if (pos + len > in.size()) throw Error("checkpoint: truncated file");
    const std::string got = in.substr(pos, len);
    pos += len;
    if (got != name) throw Error("checkpoint: expected tensor '" + std::string(name) + "', found '" + got + "'");
    const auto rows = detail::take<std::uint64_t>(in, pos);
    const auto cols = detail::take<std::uint64_t>(in, pos);
    if (rows != static_cast<std::uint64_t>(t.rows()) || cols != static_cast<std::uint64_t>(t.cols())) {
      throw Error("checkpoint: shape mismatch for '" + got + "'");
    }
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = detail::take<double>(in, pos);
    }
  });
  if (pos != in.size()) throw Error("checkpoint: trailing bytes");
  return p;
}

inline void save_checkpoint(const ReasonerParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint: " + path);
  const std::string bytes = serialize_checkpoint(p);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path);
}

inline ReasonerParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace softreason
