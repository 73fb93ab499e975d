#include "semivar/verification.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "semivar/error.hpp"
#include "semivar/rng.hpp"

namespace semivar {

namespace {

struct Neumaier {
  double sum = 0.0;
  double comp = 0.0;
  void add(double x) {
    const double t = sum + x;
    comp += std::abs(sum) >= std::abs(x) ? (sum - t) + x : (x - t) + sum;
    sum = t;
  }
  double value() const { return sum + comp; }
};

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

ModelConfig instance_config(int vocab, std::uint64_t seed, double init_std) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.layers = 1;
  c.heads = 2;
  c.hidden = 8;
  c.context_len = 64;
  c.seed = seed;
  c.init_std = init_std;
  return c;
}

ObservedSession random_session(int vocab, int turns, int user_len, int response_len, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  ObservedSession s;
  s.stop_token = 0;
  for (int t = 0; t < turns; ++t) {
    ObservedTurn turn;
    for (int i = 0; i < user_len; ++i) turn.user.push_back(tok(rng));
    for (int i = 0; i < response_len; ++i) turn.response.push_back(tok(rng));
    s.turns.push_back(std::move(turn));
  }
  return s;
}

// Sum of log p(ids[i] | ids[<i]) over scored positions, recomputed from scratch.
double score(const ModelParameters& m, const TokenIds& ids, const std::vector<bool>& scored) {
  ad::Graph g(false);
  ModelRun run(m, g, nullptr);
  DecodingState st = run.start();
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
    const bool want = scored[i + 1];
    const ad::Var lp = run.step(st, InputRow::id(ids[i]), want);
    if (want) acc += g.value(lp)[static_cast<std::size_t>(ids[i + 1])];
  }
  return acc;
}

std::vector<std::vector<TokenIds>> all_combinations(const EnumerableInstance& inst) {
  const auto values =
      turn_latent_values(inst.p.config().vocab_size, inst.session.stop_token, inst.max_latent_len);
  const std::size_t T = inst.session.turns.size();
  std::size_t total = 1;
  for (std::size_t t = 0; t < T; ++t) total *= values.size();
  std::vector<std::vector<TokenIds>> out(total);
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::size_t rest = idx;
    for (std::size_t t = 0; t < T; ++t) {
      out[idx].push_back(values[rest % values.size()]);
      rest /= values.size();
    }
  }
  return out;
}

LatentSample as_sample(const std::vector<TokenIds>& turns, int stop) {
  LatentSample h;
  h.turns = turns;
  h.source.resize(turns.size());
  for (const auto& t : turns) h.truncated.push_back(t.back() != stop);
  return h;
}

struct TreeWalker {
  const EnumerableInstance& inst;
  ad::Graph& g;
  ModelRun& qrun;
  ModelRun& prun;
  long double acc = 0.0L;

  void turn(std::size_t t, const DecodingState& qs, const DecodingState& ps, long double lq, long double lp) {
    const auto& turns = inst.session.turns;
    if (t == turns.size()) {
      const long double w = std::exp(lq);
      if (w > 0.0L) acc += w * (lp - lq);
      return;
    }
    DecodingState q2 = qs;
    DecodingState p2 = ps;
    ad::Var oq, op;
    for (std::size_t i = 0; i < turns[t].user.size(); ++i) {
      qrun.step(q2, InputRow::id(turns[t].user[i]), false);
      op = prun.step(p2, InputRow::id(turns[t].user[i]), i + 1 == turns[t].user.size());
    }
    for (std::size_t i = 0; i < turns[t].response.size(); ++i)
      oq = qrun.step(q2, InputRow::id(turns[t].response[i]), i + 1 == turns[t].response.size());
    latent(t, 0, q2, p2, oq, op, lq, lp);
  }

  void latent(std::size_t t, int depth, const DecodingState& qs, const DecodingState& ps, ad::Var oq, ad::Var op,
              long double lq, long double lp) {
    const int K = inst.p.config().vocab_size;
    const TokenIds& resp = inst.session.turns[t].response;
    for (int v = K - 1; v >= 0; --v) {
      const long double nq = lq + g.value(oq)[static_cast<std::size_t>(v)];
      const long double np = lp + g.value(op)[static_cast<std::size_t>(v)];
      DecodingState q2 = qs;
      DecodingState p2 = ps;
      if (v == inst.session.stop_token || depth + 1 == inst.max_latent_len) {
        qrun.step(q2, InputRow::id(v), false);
        ad::Var o = prun.step(p2, InputRow::id(v));
        long double r = np;
        for (std::size_t j = 0; j < resp.size(); ++j) {
          r += g.value(o)[static_cast<std::size_t>(resp[j])];
          o = prun.step(p2, InputRow::id(resp[j]), j + 1 < resp.size());
        }
        turn(t + 1, q2, p2, nq, r);
      } else {
        const ad::Var q3 = qrun.step(q2, InputRow::id(v));
        const ad::Var p3 = prun.step(p2, InputRow::id(v));
        latent(t, depth + 1, q2, p2, q3, p3, nq, np);
      }
    }
  }
};

// Value and (optionally) q-gradient of the analytic KL at turn 1, latent
// position 1, which depends on no sampled token.
double first_position_kl(const EnumerableInstance& inst, Gradients* grad_q) {
  ad::Graph g(grad_q != nullptr);
  ModelRun qrun(inst.q, g, grad_q);
  ModelRun prun(inst.p, g, nullptr);
  DecodingState qs = qrun.start();
  DecodingState ps = prun.start();
  const ObservedTurn& t0 = inst.session.turns.at(0);
  ad::Var lq, lp;
  for (std::size_t i = 0; i < t0.user.size(); ++i) {
    qrun.step(qs, InputRow::id(t0.user[i]), false);
    lp = prun.step(ps, InputRow::id(t0.user[i]), i + 1 == t0.user.size());
  }
  for (std::size_t i = 0; i < t0.response.size(); ++i)
    lq = qrun.step(qs, InputRow::id(t0.response[i]), i + 1 == t0.response.size());
  const ad::Var kl = g.kl_term(lq, lp, -std::numeric_limits<double>::infinity());
  if (grad_q) g.backward(kl);
  return g.scalar(kl);
}

double flat_of(const Gradients& g, std::size_t index) {
  for (const auto& t : g.tensors) {
    if (index < t.size()) return t[index];
    index -= t.size();
  }
  throw ContractError("gradient index out of range");
}

std::string flat_name(const ModelParameters& m, std::size_t index) {
  for (const auto& t : m.tensors()) {
    if (index < t.data.size()) return fmt::format("{}[{}]", t.name, index);
    index -= t.data.size();
  }
  return "?";
}

bool all_finite(const Gradients& g) {
  for (const auto& t : g.tensors)
    for (double v : t)
      if (!std::isfinite(v)) return false;
  return true;
}

// Up to `count` coordinates with non-negligible analytic gradient, in random order.
std::vector<std::size_t> pick_coordinates(const Gradients& g, int count, std::uint64_t seed) {
  std::vector<std::size_t> idx;
  std::size_t n = 0;
  for (const auto& t : g.tensors)
    for (double v : t) {
      if (std::abs(v) > 1e-6) idx.push_back(n);
      ++n;
    }
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  if (static_cast<int>(idx.size()) > count) idx.resize(static_cast<std::size_t>(count));
  return idx;
}

double central(const std::function<double()>& f, double& x, double h = 1e-5) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace

// ------------------------------------------------------------------ instances

std::size_t EnumerableInstance::num_latent_sequences() const {
  const std::size_t per_turn = count_turn_values(p.config().vocab_size, max_latent_len);
  std::size_t total = 1;
  for (std::size_t t = 0; t < session.turns.size(); ++t) {
    if (total > kEnumerationBudget) break;
    total *= per_turn;
  }
  return total;
}

void EnumerableInstance::validate() const {
  if (session.turns.empty() || session.turns.size() > 3)
    throw CapabilityError(fmt::format("instance {}: need 1..3 turns, got {}", name, session.turns.size()));
  if (p.config().vocab_size > 4 || q.config().vocab_size != p.config().vocab_size)
    throw CapabilityError(fmt::format("instance {}: latent alphabet must be <= 4", name));
  if (max_latent_len < 1 || max_latent_len > 3)
    throw CapabilityError(fmt::format("instance {}: max latent length must be in [1,3]", name));
  if (num_latent_sequences() > kEnumerationBudget)
    throw CapabilityError(fmt::format("instance {}: {} latent sequences exceed budget {}", name,
                                      num_latent_sequences(), kEnumerationBudget));
}

EnumerableInstance make_instance(const InstanceSpec& spec) {
  EnumerableInstance inst{spec.name,
                          ModelParameters(instance_config(spec.vocab, derive_seed(spec.seed, 1), spec.init_std),
                                          ModelRole::kGenerative),
                          ModelParameters(instance_config(spec.vocab, derive_seed(spec.seed, 2), spec.init_std),
                                          ModelRole::kInference),
                          random_session(spec.vocab, spec.turns, spec.user_len, spec.response_len,
                                         derive_seed(spec.seed, 3)),
                          spec.max_latent_len};
  inst.validate();
  return inst;
}

std::vector<InstanceSpec> builtin_instance_specs() {
  return {
      {"t1_k4_l3", 4, 1, 3, 2, 2, 0.2, 11},
      {"t1_k3_l3", 3, 1, 3, 2, 2, 0.2, 17},
      {"t2_k4_l2", 4, 2, 2, 2, 2, 0.2, 12},
      {"t2_k3_l2", 3, 2, 2, 2, 2, 0.2, 18},
      {"t2_k4_l2_b", 4, 2, 2, 3, 1, 0.2, 19},
      {"t3_k3_l2", 3, 3, 2, 2, 2, 0.2, 14},
      {"t3_k4_l2", 4, 3, 2, 2, 2, 0.2, 16},
      {"t1_k2_l2", 2, 1, 2, 2, 2, 0.7, 15},
      {"t2_k2_l1", 2, 2, 1, 2, 2, 0.9, 13},
  };
}

std::vector<InstanceSpec> variance_instance_specs() {
  std::vector<InstanceSpec> out;
  for (const auto& s : builtin_instance_specs())
    if (s.vocab >= 3 && s.turns >= 2) out.push_back(s);
  return out;
}

std::vector<TokenIds> turn_latent_values(int vocab, int stop, int max_len) {
  std::vector<TokenIds> out;
  TokenIds cur;
  std::function<void()> rec = [&] {
    for (int v = 0; v < vocab; ++v) {
      cur.push_back(v);
      if (v == stop || static_cast<int>(cur.size()) == max_len) out.push_back(cur);
      else rec();
      cur.pop_back();
    }
  };
  rec();
  return out;
}

// ------------------------------------------------------------------ enumerators

std::vector<EnumeratedLatent> enumerate_latents(const EnumerableInstance& inst) {
  inst.validate();
  const auto combos = all_combinations(inst);
  std::vector<EnumeratedLatent> out(combos.size());
  const auto& turns = inst.session.turns;
#pragma omp parallel for schedule(dynamic, 8)
  for (std::size_t i = 0; i < combos.size(); ++i) {
    TokenIds gen, inf;
    std::vector<bool> gen_scored, inf_scored;
    for (std::size_t t = 0; t < turns.size(); ++t) {
      const TokenIds& h = combos[i][t];
      auto put = [](TokenIds& ids, std::vector<bool>& sc, const TokenIds& seg, bool s) {
        ids.insert(ids.end(), seg.begin(), seg.end());
        sc.insert(sc.end(), seg.size(), s);
      };
      put(gen, gen_scored, turns[t].user, false);
      put(gen, gen_scored, h, true);
      put(gen, gen_scored, turns[t].response, true);
      put(inf, inf_scored, turns[t].user, false);
      put(inf, inf_scored, turns[t].response, false);
      put(inf, inf_scored, h, true);
    }
    out[i].h = as_sample(combos[i], inst.session.stop_token);
    out[i].log_joint = score(inst.p, gen, gen_scored);
    out[i].log_q = score(inst.q, inf, inf_scored);
  }
  return out;
}

double enumerate_elbo(const EnumerableInstance& inst) {
  Neumaier acc;
  for (const auto& e : enumerate_latents(inst)) {
    const double w = std::exp(e.log_q);
    if (w > 0.0) acc.add(w * (e.log_joint - e.log_q));
  }
  return acc.value();
}

double enumerate_elbo_prefix_tree(const EnumerableInstance& inst) {
  inst.validate();
  ad::Graph g(false);
  ModelRun qrun(inst.q, g, nullptr);
  ModelRun prun(inst.p, g, nullptr);
  TreeWalker w{inst, g, qrun, prun};
  w.turn(0, qrun.start(), prun.start(), 0.0L, 0.0L);
  return static_cast<double>(w.acc);
}

// ------------------------------------------------------------------ checks

UnbiasednessReport check_unbiasedness(const EnumerableInstance& inst, double tol) {
  UnbiasednessReport rep;
  rep.instance = inst.name;
  const auto list = enumerate_latents(inst);
  rep.latent_count = list.size();
  Neumaier elbo;
  std::vector<double> weight(list.size());
  for (std::size_t i = 0; i < list.size(); ++i) {
    weight[i] = std::exp(list[i].log_q);
    if (weight[i] > 0.0) elbo.add(weight[i] * (list[i].log_joint - list[i].log_q));
  }
  rep.elbo = elbo.value();
  rep.elbo_second = enumerate_elbo_prefix_tree(inst);
  rep.enumerator_gap = std::abs(rep.elbo - rep.elbo_second);

  struct Variant {
    const char* name;
    EstimatorKind kind;
    bool stt;
  };
  const Variant variants[] = {{"rmca_token", EstimatorKind::kRmcaToken, true},
                              {"rmca_token_no_stt", EstimatorKind::kRmcaToken, false},
                              {"rmca_turn", EstimatorKind::kRmcaTurn, true},
                              {"naive_mc", EstimatorKind::kNaiveMc, true}};
  rep.passed = rep.enumerator_gap < 1e-10;
  for (const auto& v : variants) {
    ObjectiveOptions o;
    o.use_stt = v.stt;
    o.prob_floor = 0.0;
    o.max_latent_len = inst.max_latent_len;
    std::vector<double> j(list.size(), 0.0);
#pragma omp parallel for schedule(dynamic, 4)
    for (std::size_t i = 0; i < list.size(); ++i)
      if (weight[i] > 0.0) j[i] = evaluate_objective(v.kind, inst.p, inst.q, inst.session, list[i].h, o).total;
    Neumaier acc;
    for (std::size_t i = 0; i < list.size(); ++i)
      if (weight[i] > 0.0) acc.add(weight[i] * j[i]);
    UnbiasednessEntry e;
    e.estimator = v.name;
    e.expected = acc.value();
    e.abs_error = std::abs(e.expected - rep.elbo);
    e.passed = std::isfinite(e.expected) && e.abs_error < tol;
    if (!e.passed) {
      std::size_t worst = 0;
      double worst_gap = -1.0;
      for (std::size_t i = 0; i < list.size(); ++i) {
        const double gap = std::abs(weight[i] * (j[i] - (list[i].log_joint - list[i].log_q)));
        if (gap > worst_gap) worst_gap = gap, worst = i;
      }
      std::string hs;
      for (const auto& t : list[worst].h.turns) hs += fmt::format("[{}]", fmt::join(t, " "));
      e.worst = fmt::format("h={} q={:.6g} J={:.10g} log-ratio={:.10g}", hs, weight[worst], j[worst],
                            list[worst].log_joint - list[worst].log_q);
    }
    rep.passed = rep.passed && e.passed;
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

GradientReport check_gradients(const EnumerableInstance& inst, int coordinates, double tol, std::uint64_t seed) {
  GradientReport rep;
  rep.instance = inst.name;
  const auto list = enumerate_latents(inst);
  ObjectiveOptions o;
  o.use_stt = true;
  o.prob_floor = 0.0;
  o.max_latent_len = inst.max_latent_len;
  Gradients gp = inst.p.zero_gradients();
  Gradients gq = inst.q.zero_gradients();
  for (const auto& e : list) {
    const double w = std::exp(e.log_q);
    if (w > 0.0) evaluate_objective(EstimatorKind::kRmcaToken, inst.p, inst.q, inst.session, e.h, o, &gp, &gq, w);
  }
  Gradients gkl = inst.q.zero_gradients();
  first_position_kl(inst, &gkl);
  rep.finite = all_finite(gp) && all_finite(gq) && all_finite(gkl);

  EnumerableInstance work = inst;
  const auto elbo = [&] { return enumerate_elbo(work); };
  for (std::size_t i : pick_coordinates(gp, coordinates, seed)) {
    GradientEntry e{flat_name(work.p, i), flat_of(gp, i), central(elbo, work.p.flat(i)), 0.0};
    e.rel_error = rel_err(e.analytic, e.finite_difference);
    rep.theta_max_rel = std::max(rep.theta_max_rel, e.rel_error);
    rep.theta.push_back(e);
  }
  for (std::size_t i : pick_coordinates(gq, coordinates, seed + 1)) {
    GradientEntry e{flat_name(work.q, i), flat_of(gq, i), central(elbo, work.q.flat(i)), 0.0};
    e.rel_error = rel_err(e.analytic, e.finite_difference);
    rep.phi_stt.push_back(e);
  }
  if (!rep.phi_stt.empty()) {
    double s = 0.0;
    for (const auto& e : rep.phi_stt) s += e.rel_error;
    rep.phi_stt_mean_rel = s / static_cast<double>(rep.phi_stt.size());
  }
  const auto kl = [&] { return first_position_kl(work, nullptr); };
  for (std::size_t i : pick_coordinates(gkl, coordinates, seed + 2)) {
    GradientEntry e{flat_name(work.q, i), flat_of(gkl, i), central(kl, work.q.flat(i)), 0.0};
    e.rel_error = rel_err(e.analytic, e.finite_difference);
    rep.phi_kl_max_rel = std::max(rep.phi_kl_max_rel, e.rel_error);
    rep.phi_kl.push_back(e);
  }
  rep.passed = rep.finite && !rep.theta.empty() && !rep.phi_kl.empty() && rep.theta_max_rel < tol &&
               rep.phi_kl_max_rel < tol;
  spdlog::info("gradients {}: theta max rel {:.3g}, phi KL max rel {:.3g}, phi STT mean rel (bias) {:.3g}",
               inst.name, rep.theta_max_rel, rep.phi_kl_max_rel, rep.phi_stt_mean_rel);
  return rep;
}

VarianceRow variance_harness(const EnumerableInstance& inst, int n_samples, const std::vector<std::uint64_t>& seeds) {
  VarianceRow row;
  row.instance = inst.name;
  row.elbo = enumerate_elbo(inst);
  EstimatorConfig cfg;
  cfg.sample_mode = SampleMode::kSample;
  cfg.max_latent_len = inst.max_latent_len;
  ObjectiveOptions o;
  o.use_stt = false;
  o.prob_floor = 0.0;
  o.max_latent_len = inst.max_latent_len;
  const std::size_t n = static_cast<std::size_t>(n_samples) * seeds.size();
  std::vector<double> jr(n), jn(n);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::size_t k = 0; k < n; ++k) {
    const std::uint64_t s = derive_seed(seeds[k / static_cast<std::size_t>(n_samples)], k % static_cast<std::size_t>(n_samples));
    const LatentSample h = sample_latents(inst.q, inst.session, cfg, s);
    jr[k] = evaluate_objective(EstimatorKind::kRmcaToken, inst.p, inst.q, inst.session, h, o).total;
    jn[k] = evaluate_objective(EstimatorKind::kNaiveMc, inst.p, inst.q, inst.session, h, o).total;
  }
  auto stats = [](const std::vector<double>& v) {
    Neumaier s;
    for (double x : v) s.add(x);
    const double mean = s.value() / static_cast<double>(v.size());
    Neumaier ss;
    for (double x : v) ss.add((x - mean) * (x - mean));
    return std::pair{mean, v.size() > 1 ? ss.value() / static_cast<double>(v.size() - 1) : 0.0};
  };
  std::tie(row.mean_rmca, row.var_rmca) = stats(jr);
  std::tie(row.mean_naive, row.var_naive) = stats(jn);
  row.samples = n;
  const auto within = [&](double mean, double var) {
    const double bound = 4.0 * std::sqrt(var / static_cast<double>(n));
    return std::abs(mean - row.elbo) <= std::max(bound, 1e-9);
  };
  row.rmca_mean_ok = within(row.mean_rmca, row.var_rmca);
  row.naive_mean_ok = within(row.mean_naive, row.var_naive);
  row.ordering_holds = row.var_rmca <= row.var_naive + 1e-12;
  return row;
}

// ------------------------------------------------------------------ probes

Fit polyfit(const std::vector<double>& x, const std::vector<double>& y, int degree) {
  const auto m = static_cast<std::size_t>(degree + 1);
  if (x.size() != y.size() || x.size() < m) throw ContractError("polyfit: not enough points");
  // normal equations, solved by Gaussian elimination with partial pivoting
  std::vector<std::vector<double>> a(m, std::vector<double>(m + 1, 0.0));
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> pw(2 * m, 1.0);
    for (std::size_t k = 1; k < 2 * m; ++k) pw[k] = pw[k - 1] * x[i];
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < m; ++c) a[r][c] += pw[r + c];
      a[r][m] += pw[r] * y[i];
    }
  }
  for (std::size_t c = 0; c < m; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < m; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    for (std::size_t r = 0; r < m; ++r) {
      if (r == c) continue;
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k <= m; ++k) a[r][k] -= f * a[c][k];
    }
  }
  Fit fit;
  for (std::size_t r = 0; r < m; ++r) fit.coefficients.push_back(a[r][m] / a[r][r]);
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double pred = 0.0, pw = 1.0;
    for (double c : fit.coefficients) pred += c * pw, pw *= x[i];
    ss_res += (y[i] - pred) * (y[i] - pred);
    ss_tot += (y[i] - mean) * (y[i] - mean);
  }
  fit.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
  return fit;
}

namespace {

// Fixed-length latents so every turn does the same amount of work.
ForceHook fixed_latent(int vocab, int length) {
  return [vocab, length](int, std::span<const int> prefix) -> std::optional<int> {
    const int i = static_cast<int>(prefix.size());
    if (i + 1 >= length) return 0;
    return 1 + (i % (vocab - 1));
  };
}

StepResult run_strategy(Strategy s, const ModelParameters& p, const ModelParameters& q, const ObservedSession& session,
                        const EstimatorConfig& cfg, std::uint64_t seed) {
  Gradients gp = p.zero_gradients();
  Gradients gq = q.zero_gradients();
  return s == Strategy::kSamplingThenForward ? unsupervised_step(p, q, session, cfg, seed, &gp, &gq)
                                             : coupled_one_pass_step(p, q, session, cfg, seed, &gp, &gq);
}

}  // namespace

GraphSizeReport graph_size_probe(Strategy strategy, const GraphProbeConfig& cfg) {
  ModelConfig mc;
  mc.vocab_size = cfg.vocab;
  mc.layers = cfg.layers;
  mc.heads = 2;
  mc.hidden = cfg.hidden;
  mc.context_len = 1024;
  mc.seed = cfg.seed;
  const ModelParameters p(mc, ModelRole::kGenerative);
  mc.seed = cfg.seed + 1;
  const ModelParameters q(mc, ModelRole::kInference);
  EstimatorConfig ec;
  ec.max_latent_len = cfg.latent_len;
  ec.force = fixed_latent(cfg.vocab, cfg.latent_len);
  GraphSizeReport rep;
  rep.strategy = strategy == Strategy::kSamplingThenForward ? "sampling_then_forward" : "coupled_one_pass";
  std::vector<double> xs;
  for (int T : cfg.turns) {
    const auto session = random_session(cfg.vocab, T, cfg.user_len, cfg.response_len, derive_seed(cfg.seed, 9));
    const auto r = run_strategy(strategy, p, q, session, ec, cfg.seed);
    rep.turns.push_back(T);
    xs.push_back(T);
    rep.nodes.push_back(static_cast<double>(r.stats.graph_nodes));
    rep.bytes.push_back(static_cast<double>(r.stats.retained_bytes));
  }
  if (xs.size() >= 3) {
    rep.linear = polyfit(xs, rep.nodes, 1);
    rep.quadratic = polyfit(xs, rep.nodes, 2);
    const double tmax = *std::max_element(xs.begin(), xs.end());
    const double quad = rep.quadratic.coefficients[2] * tmax * tmax;
    const double lin = std::abs(rep.quadratic.coefficients[1]) * tmax;
    rep.dominant = quad > 0.5 * lin ? "quadratic" : "linear";
  }
  return rep;
}

ThroughputReport throughput_probe(const ThroughputConfig& cfg) {
  ModelConfig mc;
  mc.vocab_size = cfg.vocab;
  mc.layers = cfg.layers;
  mc.heads = 2;
  mc.hidden = cfg.hidden;
  mc.context_len = 1024;
  mc.seed = cfg.seed;
  const ModelParameters p(mc, ModelRole::kGenerative);
  mc.seed = cfg.seed + 1;
  const ModelParameters q(mc, ModelRole::kInference);
  EstimatorConfig ec;
  ec.max_latent_len = cfg.latent_len;
  ec.force = fixed_latent(cfg.vocab, cfg.latent_len);
  ThroughputReport rep;
  rep.sessions = cfg.sessions;
  rep.turns = cfg.turns;
  for (int s = 0; s < cfg.sessions; ++s) {
    const auto session = random_session(cfg.vocab, cfg.turns, cfg.user_len, cfg.response_len,
                                        derive_seed(cfg.seed, static_cast<std::uint64_t>(s)));
    const auto a = run_strategy(Strategy::kSamplingThenForward, p, q, session, ec, cfg.seed);
    rep.stf_sample += a.sample_seconds;
    rep.stf_forward += a.stats.forward_seconds;
    rep.stf_backward += a.stats.backward_seconds;
    const auto b = run_strategy(Strategy::kCoupledOnePass, p, q, session, ec, cfg.seed);
    rep.coupled_forward += b.stats.forward_seconds;
    rep.coupled_backward += b.stats.backward_seconds;
  }
  const double stf = rep.stf_sample + rep.stf_forward + rep.stf_backward;
  rep.ratio = stf > 0.0 ? (rep.coupled_forward + rep.coupled_backward) / stf : 0.0;
  rep.passed = rep.ratio > 1.0;
  return rep;
}

// ------------------------------------------------------------------ report

ProbeReport run_verification(const VerifyOptions& opts) {
  ProbeReport rep;
  std::vector<EnumerableInstance> instances;
  for (const auto& spec : builtin_instance_specs()) instances.push_back(make_instance(spec));
  bool ok = true;
  if (opts.unbiasedness)
    for (const auto& inst : instances) {
      rep.unbiasedness.push_back(check_unbiasedness(inst));
      ok = ok && rep.unbiasedness.back().passed;
    }
  if (opts.gradients)
    for (const auto& inst : instances) {
      rep.gradients.push_back(check_gradients(inst));
      ok = ok && rep.gradients.back().passed;
    }
  if (opts.variance)
    for (const auto& spec : variance_instance_specs()) {
      rep.variance.push_back(variance_harness(make_instance(spec), opts.variance_samples, opts.variance_seeds));
      const auto& v = rep.variance.back();
      ok = ok && v.ordering_holds && v.rmca_mean_ok && v.naive_mean_ok;
    }
  if (opts.graph_size) {
    GraphProbeConfig gc;
    for (auto s : {Strategy::kSamplingThenForward, Strategy::kCoupledOnePass})
      rep.graph_size.push_back(graph_size_probe(s, gc));
    ok = ok && rep.graph_size[0].linear.r2 > 0.99 && rep.graph_size[1].dominant == "quadratic" &&
         rep.graph_size[1].quadratic.coefficients[2] > 0.0;
    gc.turns = {1};
    const double a = graph_size_probe(Strategy::kSamplingThenForward, gc).nodes[0];
    const double b = graph_size_probe(Strategy::kCoupledOnePass, gc).nodes[0];
    rep.graph_t1_rel_gap = std::abs(a - b) / std::max(a, b);
    ok = ok && rep.graph_t1_rel_gap <= 0.05;
  }
  if (opts.throughput) {
    rep.throughput.push_back(throughput_probe(ThroughputConfig{}));
    ok = ok && rep.throughput.back().passed;
  }
  rep.passed = ok;
  return rep;
}

std::string ProbeReport::to_json() const {
  using nlohmann::json;
  json j;
  j["passed"] = passed;
  auto grad_entries = [](const std::vector<GradientEntry>& v) {
    json a = json::array();
    for (const auto& e : v)
      a.push_back({{"parameter", e.parameter},
                   {"analytic", e.analytic},
                   {"finite_difference", e.finite_difference},
                   {"rel_error", e.rel_error}});
    return a;
  };
  j["unbiasedness"] = json::array();
  for (const auto& u : unbiasedness) {
    json e = json::array();
    for (const auto& x : u.entries)
      e.push_back({{"estimator", x.estimator},
                   {"expected", x.expected},
                   {"abs_error", x.abs_error},
                   {"passed", x.passed},
                   {"worst", x.worst}});
    j["unbiasedness"].push_back({{"instance", u.instance},
                                 {"latent_count", u.latent_count},
                                 {"elbo", u.elbo},
                                 {"elbo_second_enumerator", u.elbo_second},
                                 {"enumerator_gap", u.enumerator_gap},
                                 {"estimators", e},
                                 {"passed", u.passed}});
  }
  j["gradients"] = json::array();
  for (const auto& g : gradients)
    j["gradients"].push_back({{"instance", g.instance},
                              {"theta_max_rel", g.theta_max_rel},
                              {"phi_kl_max_rel", g.phi_kl_max_rel},
                              {"phi_stt_mean_rel_bias", g.phi_stt_mean_rel},
                              {"finite", g.finite},
                              {"theta", grad_entries(g.theta)},
                              {"phi_kl", grad_entries(g.phi_kl)},
                              {"phi_stt", grad_entries(g.phi_stt)},
                              {"passed", g.passed}});
  j["variance"] = json::array();
  for (const auto& v : variance)
    j["variance"].push_back({{"instance", v.instance},
                             {"samples", v.samples},
                             {"elbo", v.elbo},
                             {"mean_rmca", v.mean_rmca},
                             {"var_rmca", v.var_rmca},
                             {"mean_naive", v.mean_naive},
                             {"var_naive", v.var_naive},
                             {"rmca_mean_ok", v.rmca_mean_ok},
                             {"naive_mean_ok", v.naive_mean_ok},
                             {"ordering_holds", v.ordering_holds}});
  j["graph_size"] = json::array();
  for (const auto& g : graph_size)
    j["graph_size"].push_back({{"strategy", g.strategy},
                               {"turns", g.turns},
                               {"nodes", g.nodes},
                               {"bytes", g.bytes},
                               {"linear", {{"coefficients", g.linear.coefficients}, {"r2", g.linear.r2}}},
                               {"quadratic", {{"coefficients", g.quadratic.coefficients}, {"r2", g.quadratic.r2}}},
                               {"dominant", g.dominant}});
  j["graph_t1_rel_gap"] = graph_t1_rel_gap;
  j["throughput"] = json::array();
  for (const auto& t : throughput)
    j["throughput"].push_back({{"sessions", t.sessions},
                               {"turns", t.turns},
                               {"sampling_then_forward",
                                {{"sample_s", t.stf_sample}, {"forward_s", t.stf_forward}, {"backward_s", t.stf_backward}}},
                               {"coupled_one_pass", {{"forward_s", t.coupled_forward}, {"backward_s", t.coupled_backward}}},
                               {"ratio", t.ratio},
                               {"passed", t.passed}});
  return j.dump(2);
}

std::string ProbeReport::summary() const {
  std::string s;
  for (const auto& u : unbiasedness) {
    s += fmt::format("unbiasedness {:<10} |h|={:<5} elbo={:.10f} enum-gap={:.2e}", u.instance, u.latent_count, u.elbo,
                     u.enumerator_gap);
    for (const auto& e : u.entries) s += fmt::format(" {}={:.1e}", e.estimator, e.abs_error);
    s += u.passed ? "  PASS\n" : "  FAIL\n";
  }
  for (const auto& g : gradients)
    s += fmt::format("gradients    {:<10} theta-rel={:.2e} phi-kl-rel={:.2e} phi-stt-bias={:.2e}  {}\n", g.instance,
                     g.theta_max_rel, g.phi_kl_max_rel, g.phi_stt_mean_rel, g.passed ? "PASS" : "FAIL");
  for (const auto& v : variance)
    s += fmt::format("variance     {:<10} n={} var(rmca)={:.4g} var(naive)={:.4g} means-ok={}/{}  {}\n", v.instance,
                     v.samples, v.var_rmca, v.var_naive, v.rmca_mean_ok, v.naive_mean_ok,
                     v.ordering_holds && v.rmca_mean_ok && v.naive_mean_ok ? "PASS" : "FAIL");
  for (const auto& g : graph_size)
    s += fmt::format("graph-size   {:<22} nodes={} linear-R2={:.5f} quad-coef={:.3g} dominant={}\n", g.strategy,
                     fmt::join(g.nodes, ","), g.linear.r2,
                     g.quadratic.coefficients.size() > 2 ? g.quadratic.coefficients[2] : 0.0, g.dominant);
  if (!graph_size.empty()) s += fmt::format("graph-size   T=1 relative gap {:.3f}\n", graph_t1_rel_gap);
  for (const auto& t : throughput)
    s += fmt::format("throughput   T={} sessions={} stf(sample/fwd/bwd)={:.3f}/{:.3f}/{:.3f}s coupled(fwd/bwd)={:.3f}/{:.3f}s "
                     "ratio={:.2f}  {}\n",
                     t.turns, t.sessions, t.stf_sample, t.stf_forward, t.stf_backward, t.coupled_forward,
                     t.coupled_backward, t.ratio, t.passed ? "PASS" : "FAIL");
  s += passed ? "verification PASSED\n" : "verification FAILED\n";
  return s;
}

}  // namespace semivar
