#include "semivar/variational.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <limits>

#include "semivar/error.hpp"
#include "semivar/rng.hpp"

namespace semivar {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Distribution probs_of(const ad::Graph& g, ad::Var lp) {
  Distribution out(g.value(lp).begin(), g.value(lp).end());
  for (double& v : out) v = std::exp(v);
  return out;
}

double log_floor(double floor) {
  return floor > 0.0 ? std::log(floor) : -std::numeric_limits<double>::infinity();
}

// Feeds ids in order; only the last position produces output, if wanted.
ad::Var feed_ids(ModelRun& run, DecodingState& st, const TokenIds& ids, bool want_last) {
  ad::Var out;
  for (std::size_t i = 0; i < ids.size(); ++i) out = run.step(st, InputRow::id(ids[i]), want_last && i + 1 == ids.size());
  return out;
}

void check_inputs(const ModelParameters& p, const ModelParameters& q, const ObservedSession& s) {
  if (p.config().vocab_size != q.config().vocab_size) throw ContractError("p and q disagree on vocabulary size");
  if (s.stop_token < 0 || s.stop_token >= p.config().vocab_size) throw ContractError("stop token out of range");
  for (const auto& t : s.turns)
    if (t.user.empty() || t.response.empty()) throw ContractError("observed turn with empty user or response");
}

void check_sample(const ObservedSession& s, const LatentSample& h) {
  if (h.turns.size() != s.turns.size())
    throw ContractError(fmt::format("latent sample has {} turns, session has {}", h.turns.size(), s.turns.size()));
  for (const auto& t : h.turns)
    if (t.empty()) throw ContractError("empty latent turn");
}

// Scalar term for one latent position.
ad::Var position_term(ad::Graph& g, EstimatorKind kind, ad::Var lq, ad::Var lp, int token, double floor,
                      std::size_t& clamps) {
  if (kind == EstimatorKind::kNaiveMc) return g.add(g.pick(lp, token), g.scale(g.pick(lq, token), -1.0));
  const auto vq = g.value(lq);
  const auto vp = g.value(lp);
  for (std::size_t v = 0; v < vq.size(); ++v)
    if (std::exp(vq[v]) > 0.0 && vp[v] < floor) ++clamps;
  return g.kl_term(lq, lp, floor);
}

InputRow latent_row(ad::Graph& g, int token, ad::Var lq, bool use_stt) {
  if (!use_stt) return InputRow::id(token);
  return InputRow::row(stt_wrap(g, token, g.exp(lq)));
}

struct TurnEnumerator {
  ad::Graph& g;
  ModelRun& qrun;
  ModelRun& prun;
  int vocab;
  int stop;
  int max_len;
  std::vector<ad::Var> terms;

  void run(const DecodingState& qs, const DecodingState& ps, ad::Var lq, ad::Var lp, ad::Var acc_q, ad::Var acc_p,
           int depth) {
    for (int v = 0; v < vocab; ++v) {
      const ad::Var sq = depth == 0 ? g.pick(lq, v) : g.add(acc_q, g.pick(lq, v));
      const ad::Var sp = depth == 0 ? g.pick(lp, v) : g.add(acc_p, g.pick(lp, v));
      if (v == stop || depth + 1 == max_len) {
        terms.push_back(g.mul(g.exp(sq), g.add(sp, g.scale(sq, -1.0))));
        continue;
      }
      DecodingState q2 = qs;
      DecodingState p2 = ps;
      const ad::Var nq = qrun.step(q2, InputRow::id(v));
      const ad::Var np = prun.step(p2, InputRow::id(v));
      run(q2, p2, nq, np, sq, sp, depth + 1);
    }
  }
};

}  // namespace

ObservedSession observe(const DialogSession& session, const Vocabulary& vocab) {
  ObservedSession out;
  out.stop_token = vocab.id(tok::kEosA);
  for (auto& t : encode_turns(session, vocab)) out.turns.push_back({std::move(t.user), std::move(t.response)});
  return out;
}

LatentSample labeled_latents(const DialogSession& session, const Vocabulary& vocab) {
  if (!session.labeled) throw ContractError("labeled_latents on unlabeled session " + session.id);
  LatentSample out;
  for (auto& t : encode_turns(session, vocab)) {
    out.turns.push_back(std::move(t.latent));
    out.source.emplace_back();
    out.truncated.push_back(false);
  }
  return out;
}

void EstimatorConfig::validate() const {
  if (max_latent_len < 1) throw ConfigError("max_latent_len must be >= 1");
  if (prob_floor < 0.0 || prob_floor >= 1.0) throw ConfigError("prob_floor must be in [0, 1)");
}

const char* to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::kNaiveMc: return "naive_mc";
    case EstimatorKind::kRmcaToken: return "rmca_token";
    case EstimatorKind::kRmcaTurn: return "rmca_turn";
  }
  return "?";
}

EstimatorKind estimator_kind_from_string(const std::string& s) {
  if (s == "naive_mc") return EstimatorKind::kNaiveMc;
  if (s == "rmca_token") return EstimatorKind::kRmcaToken;
  if (s == "rmca_turn") return EstimatorKind::kRmcaTurn;
  throw ConfigError("unknown estimator kind '" + s + "'");
}

ForceHook make_db_requery_hook(const World& world, const Vocabulary& vocab) {
  const int sos_db = vocab.id(tok::kSosD);
  const int sos_b = vocab.id(tok::kSosB);
  const int eos_b = vocab.id(tok::kEosB);
  return [&world, &vocab, sos_db, sos_b, eos_b](int, std::span<const int> prefix) -> std::optional<int> {
    if (prefix.empty() || prefix.back() != sos_db) return std::nullopt;
    Tokens belief;
    bool inside = false;
    for (int id : prefix) {
      if (id == sos_b) inside = true;
      else if (inside) {
        belief.push_back(vocab.token(id));
        if (id == eos_b) break;
      }
    }
    return vocab.id(db_bucket(db_query_tokens(belief, world.ontology, world.db).size()));
  };
}

ad::Var stt_wrap(ad::Graph& graph, int token, ad::Var probs) { return graph.straight_through(token, probs); }

KlResult kl_position_term(std::span<const double> q, std::span<const double> p) {
  if (q.size() != p.size()) throw ContractError("kl_position_term: size mismatch");
  KlResult out;
  double sum = 0.0;
  double comp = 0.0;
  for (std::size_t v = 0; v < q.size(); ++v) {
    if (q[v] <= 0.0) continue;
    if (p[v] <= 0.0) {
      out.support_violation = true;
      out.value = -std::numeric_limits<double>::infinity();
      return out;
    }
    const double x = q[v] * (std::log(p[v]) - std::log(q[v]));
    const double t = sum + x;
    comp += std::abs(sum) >= std::abs(x) ? (sum - t) + x : (x - t) + sum;
    sum = t;
  }
  out.value = std::min(0.0, sum + comp);
  return out;
}

std::size_t count_turn_values(int vocab_size, int max_len) {
  constexpr std::size_t kCap = std::numeric_limits<std::size_t>::max() / 4;
  const auto branch = static_cast<std::size_t>(vocab_size - 1);
  std::size_t total = 0;
  std::size_t width = 1;  // (K-1)^(l-1)
  for (int l = 1; l <= max_len; ++l) {
    total += width;
    if (total > kCap) return kCap;
    width = branch == 0 ? 0 : (width > kCap / branch ? kCap : width * branch);
  }
  return std::min(kCap, total + width);
}

LatentSample sample_latents(const ModelParameters& q, const ObservedSession& session, const EstimatorConfig& cfg,
                            std::uint64_t seed) {
  cfg.validate();
  check_inputs(q, q, session);
  ad::Graph g(false);
  ModelRun run(q, g, nullptr);
  DecodingState st = run.start();
  Rng rng(seed);
  LatentSample out;
  std::size_t truncated = 0;
  const std::size_t T = session.turns.size();
  for (std::size_t t = 0; t < T; ++t) {
    feed_ids(run, st, session.turns[t].user, false);
    ad::Var lq = feed_ids(run, st, session.turns[t].response, true);
    TokenIds h;
    std::vector<Distribution> src;
    bool trunc = false;
    for (;;) {
      Distribution probs = probs_of(g, lq);
      std::optional<int> forced = cfg.force ? cfg.force(static_cast<int>(t), h) : std::nullopt;
      const int token = forced ? *forced
                        : cfg.sample_mode == SampleMode::kGreedy ? argmax_token(probs)
                                                                 : sample_categorical(probs, rng);
      h.push_back(token);
      src.push_back(std::move(probs));
      const bool done = token == session.stop_token;
      trunc = !done && static_cast<int>(h.size()) == cfg.max_latent_len;
      const bool end = done || trunc;
      if (!(end && t + 1 == T)) lq = run.step(st, InputRow::id(token), !end);
      if (end) break;
    }
    if (trunc) ++truncated;
    out.turns.push_back(std::move(h));
    out.source.push_back(std::move(src));
    out.truncated.push_back(trunc);
  }
  if (T > 0 && truncated == T)
    spdlog::debug("sample_latents: all {} turns hit max_latent_len {}", T, cfg.max_latent_len);
  return out;
}

ElboBreakdown evaluate_objective(EstimatorKind kind, const ModelParameters& p, const ModelParameters& q,
                                 const ObservedSession& session, const LatentSample& h, const ObjectiveOptions& opts,
                                 Gradients* grad_p, Gradients* grad_q, double grad_seed, ObjectiveStats* stats) {
  check_inputs(p, q, session);
  check_sample(session, h);
  const int K = p.config().vocab_size;
  if (kind == EstimatorKind::kRmcaTurn) {
    const std::size_t n = count_turn_values(K, opts.max_latent_len);
    if (n > opts.max_turn_values)
      throw CapabilityError(fmt::format("turn-level enumeration needs {} values per turn (limit {})", n,
                                        opts.max_turn_values));
  }
  const auto t0 = Clock::now();
  ad::Graph g(grad_p != nullptr || grad_q != nullptr);
  ModelRun qrun(q, g, grad_q);
  ModelRun prun(p, g, grad_p);
  DecodingState qs = qrun.start();
  DecodingState ps = prun.start();
  const double floor = kind == EstimatorKind::kRmcaToken ? log_floor(opts.prob_floor)
                                                         : -std::numeric_limits<double>::infinity();
  std::size_t clamps = 0;
  std::vector<ad::Var> recon;
  std::vector<ad::Var> kl;
  const std::size_t T = session.turns.size();
  for (std::size_t t = 0; t < T; ++t) {
    const ObservedTurn& turn = session.turns[t];
    const TokenIds& ht = h.turns[t];
    const bool last_turn = t + 1 == T;
    feed_ids(qrun, qs, turn.user, false);
    ad::Var lq = feed_ids(qrun, qs, turn.response, true);
    ad::Var lp = feed_ids(prun, ps, turn.user, true);
    if (kind == EstimatorKind::kRmcaTurn) {
      TurnEnumerator en{g, qrun, prun, K, session.stop_token, opts.max_latent_len, {}};
      en.run(qs, ps, lq, lp, {}, {}, 0);
      kl.push_back(g.sum(en.terms));
    }
    for (std::size_t i = 0; i < ht.size(); ++i) {
      if (kind != EstimatorKind::kRmcaTurn) kl.push_back(position_term(g, kind, lq, lp, ht[i], floor, clamps));
      const InputRow row = latent_row(g, ht[i], lq, opts.use_stt);
      const bool more = i + 1 < ht.size();
      if (more || !last_turn) lq = qrun.step(qs, row, more);
      lp = prun.step(ps, row, true);
    }
    for (std::size_t j = 0; j < turn.response.size(); ++j) {
      recon.push_back(g.pick(lp, turn.response[j]));
      const bool more = j + 1 < turn.response.size();
      if (more || !last_turn) lp = prun.step(ps, InputRow::id(turn.response[j]), more);
    }
  }
  const ad::Var r = g.sum(recon);
  const ad::Var k = g.sum(kl);
  const ad::Var total = g.add(r, k);
  ElboBreakdown out{g.scalar(r), g.scalar(k), g.scalar(total)};
  const double forward = seconds_since(t0);
  const auto t1 = Clock::now();
  if (g.tracking()) g.backward(total, grad_seed);
  if (stats) {
    stats->graph_nodes = g.tracked_nodes();
    stats->retained_bytes = g.retained_bytes();
    stats->support_clamps = clamps;
    stats->forward_seconds = forward;
    stats->backward_seconds = seconds_since(t1);
  }
  if (clamps > 0) spdlog::debug("objective: {} support violations clamped", clamps);
  return out;
}

ElboBreakdown rmca_objective_token(const ModelParameters& p, const ModelParameters& q, const ObservedSession& session,
                                   const LatentSample& h, bool use_stt) {
  ObjectiveOptions o;
  o.use_stt = use_stt;
  return evaluate_objective(EstimatorKind::kRmcaToken, p, q, session, h, o);
}

ElboBreakdown rmca_objective_turn(const ModelParameters& p, const ModelParameters& q, const ObservedSession& session,
                                  const LatentSample& h, bool use_stt, int max_latent_len) {
  ObjectiveOptions o;
  o.use_stt = use_stt;
  o.max_latent_len = max_latent_len;
  return evaluate_objective(EstimatorKind::kRmcaTurn, p, q, session, h, o);
}

ElboBreakdown naive_mc_objective(const ModelParameters& p, const ModelParameters& q, const ObservedSession& session,
                                 const LatentSample& h) {
  return evaluate_objective(EstimatorKind::kNaiveMc, p, q, session, h, ObjectiveOptions{});
}

StepResult unsupervised_step(const ModelParameters& p, const ModelParameters& q, const ObservedSession& session,
                             const EstimatorConfig& cfg, std::uint64_t seed, Gradients* grad_p, Gradients* grad_q,
                             double grad_seed) {
  StepResult out;
  const auto t0 = Clock::now();
  out.sample = sample_latents(q, session, cfg, seed);
  out.sample_seconds = seconds_since(t0);
  ObjectiveOptions o;
  o.use_stt = cfg.use_stt;
  o.prob_floor = cfg.prob_floor;
  o.max_latent_len = cfg.max_latent_len;
  out.elbo = evaluate_objective(cfg.kind, p, q, session, out.sample, o, grad_p, grad_q, grad_seed, &out.stats);
  return out;
}

StepResult coupled_one_pass_step(const ModelParameters& p, const ModelParameters& q, const ObservedSession& session,
                                 const EstimatorConfig& cfg, std::uint64_t seed, Gradients* grad_p, Gradients* grad_q,
                                 double grad_seed) {
  cfg.validate();
  check_inputs(p, q, session);
  if (cfg.kind == EstimatorKind::kRmcaTurn) throw ContractError("coupled one-pass supports token-level estimators only");
  StepResult out;
  const auto t0 = Clock::now();
  ad::Graph g(grad_p != nullptr || grad_q != nullptr);
  ModelRun qrun(q, g, grad_q);
  ModelRun prun(p, g, grad_p);
  Rng rng(seed);
  const double floor = cfg.kind == EstimatorKind::kRmcaToken ? log_floor(cfg.prob_floor)
                                                             : -std::numeric_limits<double>::infinity();
  std::size_t clamps = 0;
  std::vector<ad::Var> recon;
  std::vector<ad::Var> kl;
  const std::size_t T = session.turns.size();
  for (std::size_t t = 0; t < T; ++t) {
    // q re-encodes the history with grad on, then samples h_t in the graph.
    DecodingState qs = qrun.start();
    std::vector<std::vector<InputRow>> rows(t + 1);
    ad::Var lq;
    for (std::size_t s = 0; s <= t; ++s) {
      feed_ids(qrun, qs, session.turns[s].user, false);
      lq = feed_ids(qrun, qs, session.turns[s].response, true);
      if (s == t) break;
      const TokenIds& hs = out.sample.turns[s];
      for (std::size_t i = 0; i < hs.size(); ++i) {
        rows[s].push_back(latent_row(g, hs[i], lq, cfg.use_stt));
        lq = qrun.step(qs, rows[s].back(), i + 1 < hs.size());
      }
    }
    TokenIds h;
    std::vector<Distribution> src;
    std::vector<ad::Var> lqs;
    bool trunc = false;
    for (;;) {
      Distribution probs = probs_of(g, lq);
      std::optional<int> forced = cfg.force ? cfg.force(static_cast<int>(t), h) : std::nullopt;
      const int token = forced ? *forced
                        : cfg.sample_mode == SampleMode::kGreedy ? argmax_token(probs)
                                                                 : sample_categorical(probs, rng);
      h.push_back(token);
      src.push_back(std::move(probs));
      lqs.push_back(lq);
      rows[t].push_back(latent_row(g, token, lq, cfg.use_stt));
      const bool done = token == session.stop_token;
      trunc = !done && static_cast<int>(h.size()) == cfg.max_latent_len;
      if (done || trunc) break;
      lq = qrun.step(qs, rows[t].back(), true);
    }
    // p re-encodes the history through the same relaxed rows.
    DecodingState ps = prun.start();
    for (std::size_t s = 0; s < t; ++s) {
      feed_ids(prun, ps, session.turns[s].user, false);
      for (const InputRow& row : rows[s]) prun.step(ps, row, false);
      feed_ids(prun, ps, session.turns[s].response, false);
    }
    ad::Var lp = feed_ids(prun, ps, session.turns[t].user, true);
    for (std::size_t i = 0; i < h.size(); ++i) {
      kl.push_back(position_term(g, cfg.kind, lqs[i], lp, h[i], floor, clamps));
      lp = prun.step(ps, rows[t][i], true);
    }
    const TokenIds& resp = session.turns[t].response;
    for (std::size_t j = 0; j < resp.size(); ++j) {
      recon.push_back(g.pick(lp, resp[j]));
      if (j + 1 < resp.size()) lp = prun.step(ps, InputRow::id(resp[j]), true);
    }
    out.sample.turns.push_back(std::move(h));
    out.sample.source.push_back(std::move(src));
    out.sample.truncated.push_back(trunc);
  }
  const ad::Var r = g.sum(recon);
  const ad::Var k = g.sum(kl);
  const ad::Var total = g.add(r, k);
  out.elbo = {g.scalar(r), g.scalar(k), g.scalar(total)};
  out.stats.forward_seconds = seconds_since(t0);
  const auto t1 = Clock::now();
  if (g.tracking()) g.backward(total, grad_seed);
  out.stats.backward_seconds = seconds_since(t1);
  out.stats.graph_nodes = g.tracked_nodes();
  out.stats.retained_bytes = g.retained_bytes();
  out.stats.support_clamps = clamps;
  return out;
}

}  // namespace semivar
