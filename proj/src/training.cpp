#include "semivar/training.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "semivar/error.hpp"
#include "semivar/rng.hpp"
#include "semivar/sequence.hpp"

namespace semivar {

using nlohmann::json;

const char* to_string(StScheme s) {
  switch (s) {
    case StScheme::kResponseStt: return "response_stt";
    case StScheme::kJointStt: return "joint_stt";
    case StScheme::kResponse: return "response";
    case StScheme::kJoint: return "joint";
  }
  return "?";
}

StScheme st_scheme_from_string(const std::string& s) {
  for (auto v : {StScheme::kResponseStt, StScheme::kJointStt, StScheme::kResponse, StScheme::kJoint})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown self-training scheme '" + s + "' (response_stt, joint_stt, response, joint)");
}

bool uses_stt(StScheme s) { return s == StScheme::kResponseStt || s == StScheme::kJointStt; }
bool uses_prior(StScheme s) { return s == StScheme::kJointStt || s == StScheme::kJoint; }

void TrainConfig::validate() const {
  if (epochs_sup < 0 || epochs_semi < 0) throw ConfigError("epoch counts must be >= 0");
  if (batch_size < 1 || grad_accum < 1 || batch_size % grad_accum != 0)
    throw ConfigError(fmt::format("batch_size {} must be a positive multiple of grad_accum {}", batch_size, grad_accum));
  if (!(max_lr > 0.0)) throw ConfigError("max_lr must be > 0");
  if (warmup_frac < 0.0 || warmup_frac > 1.0) throw ConfigError("warmup_frac must be in [0, 1]");
  if (eval_every < 0 || max_eval_sessions < 0) throw ConfigError("eval settings must be >= 0");
  estimator.validate();
}

ObservedSession fit_context(const ObservedSession& s, int context_len, int latent_budget) {
  ObservedSession out = s;
  auto need = [&] {
    std::size_t n = 0;
    for (const auto& t : out.turns) n += t.user.size() + t.response.size() + static_cast<std::size_t>(latent_budget);
    return n;
  };
  while (out.turns.size() > 1 && need() > static_cast<std::size_t>(context_len)) out.turns.erase(out.turns.begin());
  if (need() > static_cast<std::size_t>(context_len))
    throw ContractError(fmt::format("a single turn needs more than the context window of {}", context_len));
  return out;
}

namespace {

// ------------------------------------------------------------------ batching

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Cycles through a set in freshly shuffled passes.
class Cycler {
 public:
  Cycler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}
  std::vector<std::size_t> next(std::size_t k) {
    std::vector<std::size_t> out;
    while (out.size() < k && n_ > 0) {
      if (pos_ == order_.size()) {
        order_ = shuffled(n_, derive_seed(seed_, pass_++));
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t pass_ = 0;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// Splits `batch` into micro batches, runs `one(i, gp, gq)` per session in
// parallel, and merges per-session gradients in batch order so the result
// does not depend on the thread count.
template <class F>
void accumulate(const std::vector<std::size_t>& batch, int micro, const ModelParameters* p, const ModelParameters* q,
                Gradients* gp, Gradients* gq, F one) {
  for (std::size_t start = 0; start < batch.size(); start += static_cast<std::size_t>(micro)) {
    const std::size_t end = std::min(batch.size(), start + static_cast<std::size_t>(micro));
    std::vector<Gradients> lp(end - start), lq(end - start);
    const auto n = static_cast<std::ptrdiff_t>(end - start);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t k = 0; k < n; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      if (gp) lp[kk] = p->zero_gradients();
      if (gq) lq[kk] = q->zero_gradients();
      one(start + kk, batch[start + kk], gp ? &lp[kk] : nullptr, gq ? &lq[kk] : nullptr);
    }
    for (std::size_t k = 0; k < lp.size(); ++k) {
      if (gp) gp->add(lp[k]);
      if (gq) gq->add(lq[k]);
    }
  }
}

std::size_t masked(const TrainingSequence& s) {
  return static_cast<std::size_t>(std::count(s.loss_mask.begin(), s.loss_mask.end(), true));
}

struct Prepared {
  std::vector<TrainingSequence> gen;
  std::vector<TrainingSequence> inf;
};

Prepared prepare_labeled(const std::vector<DialogSession>& sessions, const Vocabulary& vocab, int context_p,
                         int context_q) {
  Prepared out;
  for (const auto& s : sessions) {
    if (!s.labeled) throw ContractError("supervised training on unlabeled session " + s.id);
    out.gen.push_back(truncate(build_generative_sequence(s, vocab), context_p));
    out.inf.push_back(truncate(build_inference_sequence(s, vocab), context_q));
  }
  return out;
}

struct SupResult {
  double nll_p = 0.0, nll_q = 0.0;
  std::size_t tok_p = 0, tok_q = 0;
};

// Per-token mean NLL gradients of one labeled batch.
SupResult supervised_batch(const Prepared& data, const std::vector<std::size_t>& batch, int micro,
                           const ModelParameters& p, const ModelParameters* q, Gradients& gp, Gradients* gq) {
  SupResult r;
  std::vector<double> np(batch.size()), nq(batch.size());
  accumulate(batch, micro, &p, q, &gp, gq, [&](std::size_t k, std::size_t i, Gradients* a, Gradients* b) {
    np[k] = teacher_forced_nll(p, data.gen[i], a);
    if (b) nq[k] = teacher_forced_nll(*q, data.inf[i], b);
  });
  for (std::size_t k = 0; k < batch.size(); ++k) {
    r.nll_p += np[k];
    r.nll_q += nq[k];
    r.tok_p += masked(data.gen[batch[k]]);
    if (q) r.tok_q += masked(data.inf[batch[k]]);
  }
  gp.scale(1.0 / static_cast<double>(std::max<std::size_t>(r.tok_p, 1)));
  if (gq) gq->scale(1.0 / static_cast<double>(std::max<std::size_t>(r.tok_q, 1)));
  return r;
}

// ------------------------------------------------------------------ bookkeeping

json epoch_json(const EpochRecord& e) {
  json j{{"phase", e.phase},
         {"epoch", e.epoch},
         {"sup_nll_p", e.sup_nll_p},
         {"sup_nll_q", e.sup_nll_q},
         {"reconstruction", e.reconstruction},
         {"kl", e.kl},
         {"unsup_loss", e.unsup_loss}};
  j["validation"] = e.validation ? json::parse(e.validation->to_json()) : json(nullptr);
  return j;
}

class Run {
 public:
  Run(std::string phase, ModelParameters& p, ModelParameters* q, const TrainContext& ctx, const TrainConfig& cfg)
      : phase_(std::move(phase)), p_(p), q_(q), ctx_(ctx), cfg_(cfg), best_p_(p) {
    if (q) best_q_ = *q;
    if (ctx.run_dir) std::filesystem::create_directories(*ctx.run_dir / "checkpoints");
  }

  void log_batch(int epoch, int step, char kind, const std::vector<std::size_t>& idx,
                 const std::vector<std::string>& ids) {
    BatchLogEntry e{phase_, epoch, step, kind, {}};
    for (std::size_t i : idx) e.sessions.push_back(ids[i]);
    record_.batch_log.push_back(std::move(e));
  }

  void end_epoch(EpochRecord e, bool last) {
    const bool eval = cfg_.eval_every > 0 && !ctx_.validation.empty() && (e.epoch % cfg_.eval_every == 0 || last);
    if (eval) {
      std::vector<DialogSession> val = ctx_.validation;
      if (cfg_.max_eval_sessions > 0 && val.size() > static_cast<std::size_t>(cfg_.max_eval_sessions))
        val.resize(static_cast<std::size_t>(cfg_.max_eval_sessions));
      e.validation = evaluate(p_, val, ctx_.world, ctx_.vocab, cfg_.rollout);
    }
    spdlog::info("{} epoch {}: nll_p {:.4f} nll_q {:.4f} rec {:.3f} kl {:.3f} unsup {:.4f}{}", phase_, e.epoch,
                 e.sup_nll_p, e.sup_nll_q, e.reconstruction, e.kl, e.unsup_loss,
                 e.validation ? fmt::format(" | val combined {:.2f} latent-EM {:.2f}", e.validation->combined,
                                            e.validation->latent_exact_match)
                              : "");
    record_.epochs.push_back(e);
    const bool use_val = cfg_.eval_every > 0 && !ctx_.validation.empty();
    // strict improvement keeps the earliest epoch on ties
    const bool better = use_val ? (e.validation && (!best_score_ || e.validation->combined > *best_score_)) : last;
    if (better) {
      if (e.validation) best_score_ = e.validation->combined;
      record_.selected = record_.epochs.size() - 1;
      best_p_ = p_;
      if (q_) best_q_ = *q_;
    }
    if (ctx_.run_dir) {
      std::ofstream f(*ctx_.run_dir / "metrics.jsonl", std::ios::app);
      f << epoch_json(e).dump() << "\n";
    }
  }

  RunRecord finish() {
    if (!record_.selected && !record_.epochs.empty()) record_.selected = record_.epochs.size() - 1;
    if (record_.selected) {
      p_ = best_p_;
      if (q_) *q_ = best_q_;
      record_.selected_checkpoint = fmt::format("{}_epoch{:03d}", phase_, record_.epochs[*record_.selected].epoch);
    }
    if (ctx_.run_dir && record_.selected) {
      const auto dir = *ctx_.run_dir / "checkpoints";
      save_checkpoint(dir / (record_.selected_checkpoint + "_p.ckpt"), p_);
      if (q_) save_checkpoint(dir / (record_.selected_checkpoint + "_q.ckpt"), *q_);
      std::ofstream f(*ctx_.run_dir / "batch_log.jsonl", std::ios::app);
      for (const auto& b : record_.batch_log)
        f << json{{"phase", b.phase}, {"epoch", b.epoch}, {"step", b.step}, {"kind", std::string(1, b.kind)},
                  {"sessions", b.sessions}}
                 .dump()
          << "\n";
    }
    return std::move(record_);
  }

 private:
  std::string phase_;
  ModelParameters& p_;
  ModelParameters* q_;
  const TrainContext& ctx_;
  const TrainConfig& cfg_;
  ModelParameters best_p_;
  ModelParameters best_q_;
  std::optional<double> best_score_;
  RunRecord record_;
};

std::vector<std::string> ids_of(const std::vector<DialogSession>& s) {
  std::vector<std::string> out;
  for (const auto& x : s) out.push_back(x.id);
  return out;
}

std::vector<ObservedSession> observe_all(const std::vector<DialogSession>& sessions, const Vocabulary& vocab,
                                         int context_len, int latent_budget) {
  std::vector<ObservedSession> out;
  for (const auto& s : sessions) {
    // only user inputs and responses survive; any stored latent is dropped here
    DialogSession visible;
    visible.id = s.id;
    visible.labeled = false;
    for (const auto& t : s.turns) {
      DialogTurn v;
      v.user = t.user;
      v.response = t.response;
      v.belief = {std::string(tok::kEosB)};
      v.db = {std::string(tok::kEosD)};
      v.act = {std::string(tok::kEosA)};
      visible.turns.push_back(std::move(v));
    }
    out.push_back(fit_context(observe(visible, vocab), context_len, latent_budget));
  }
  return out;
}

std::size_t observed_tokens(const ObservedSession& s, const LatentSample& h) {
  std::size_t n = 0;
  for (std::size_t t = 0; t < s.turns.size(); ++t) n += s.turns[t].response.size() + h.turns[t].size();
  return n;
}

}  // namespace

// ------------------------------------------------------------------ supervised

RunRecord supervised_train(ModelParameters& p, ModelParameters& q, const std::vector<DialogSession>& labeled,
                           const TrainContext& ctx, const TrainConfig& cfg) {
  cfg.validate();
  if (labeled.empty()) throw ConfigError("supervised training needs a non-empty labeled corpus");
  const Prepared data = prepare_labeled(labeled, ctx.vocab, p.config().context_len, q.config().context_len);
  const auto ids = ids_of(labeled);
  Run run("supervised", p, &q, ctx, cfg);
  AdamW opt_p(cfg.optimizer), opt_q(cfg.optimizer);
  const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (labeled.size() + B - 1) / B;
  const auto total = static_cast<std::int64_t>(steps_per_epoch) * cfg.epochs_sup;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs_sup; ++epoch) {
    const auto order = shuffled(labeled.size(), derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    EpochRecord rec;
    rec.phase = "supervised";
    rec.epoch = epoch;
    std::size_t tp = 0, tq = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(s * B),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), (s + 1) * B)));
      run.log_batch(epoch, static_cast<int>(s), 'L', batch, ids);
      Gradients gp = p.zero_gradients(), gq = q.zero_gradients();
      const auto r = supervised_batch(data, batch, cfg.micro_batch(), p, &q, gp, &gq);
      const double lr = lr_schedule(++step, total, cfg.max_lr, cfg.warmup_frac);
      opt_p.step(p, std::move(gp), lr);
      opt_q.step(q, std::move(gq), lr);
      rec.sup_nll_p += r.nll_p;
      rec.sup_nll_q += r.nll_q;
      tp += r.tok_p;
      tq += r.tok_q;
    }
    rec.sup_nll_p /= static_cast<double>(std::max<std::size_t>(tp, 1));
    rec.sup_nll_q /= static_cast<double>(std::max<std::size_t>(tq, 1));
    run.end_epoch(rec, epoch == cfg.epochs_sup);
  }
  return run.finish();
}

// ------------------------------------------------------------------ semi-supervised

RunRecord semi_supervised_train(ModelParameters& p, ModelParameters& q, const CorpusSplit& split,
                                const TrainContext& ctx, const TrainConfig& cfg) {
  cfg.validate();
  if (split.labeled.empty()) throw ConfigError("semi-supervised training needs labeled sessions");
  if (split.unlabeled.empty()) {
    spdlog::warn("no unlabeled sessions: continuing with supervised training only");
    TrainConfig c = cfg;
    c.epochs_sup = cfg.epochs_semi;
    return supervised_train(p, q, split.labeled, ctx, c);
  }
  const Prepared data = prepare_labeled(split.labeled, ctx.vocab, p.config().context_len, q.config().context_len);
  const int context = std::min(p.config().context_len, q.config().context_len);
  const auto unlabeled = observe_all(split.unlabeled, ctx.vocab, context, cfg.estimator.max_latent_len);
  const auto lids = ids_of(split.labeled), uids = ids_of(split.unlabeled);
  EstimatorConfig est = cfg.estimator;
  if (cfg.requery_db) est.force = make_db_requery_hook(ctx.world, ctx.vocab);

  Run run("semi_vl", p, &q, ctx, cfg);
  AdamW opt_p(cfg.optimizer), opt_q(cfg.optimizer);
  const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (unlabeled.size() + B - 1) / B;
  const auto total = 2 * static_cast<std::int64_t>(steps_per_epoch) * cfg.epochs_semi;
  Cycler labeled_batches(split.labeled.size(), derive_seed(cfg.seed, 0x1ab));
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs_semi; ++epoch) {
    const auto order = shuffled(unlabeled.size(), derive_seed(cfg.seed, 0x5e41 + static_cast<std::uint64_t>(epoch)));
    EpochRecord rec;
    rec.phase = "semi_vl";
    rec.epoch = epoch;
    std::size_t tp = 0, tq = 0, tu = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      // labeled batch
      const auto lb = labeled_batches.next(B);
      run.log_batch(epoch, static_cast<int>(s), 'L', lb, lids);
      {
        Gradients gp = p.zero_gradients(), gq = q.zero_gradients();
        const auto r = supervised_batch(data, lb, cfg.micro_batch(), p, &q, gp, &gq);
        const double lr = lr_schedule(++step, total, cfg.max_lr, cfg.warmup_frac);
        opt_p.step(p, std::move(gp), lr);
        opt_q.step(q, std::move(gq), lr);
        rec.sup_nll_p += r.nll_p;
        rec.sup_nll_q += r.nll_q;
        tp += r.tok_p;
        tq += r.tok_q;
      }
      // unlabeled batch
      const std::vector<std::size_t> ub(order.begin() + static_cast<std::ptrdiff_t>(s * B),
                                        order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), (s + 1) * B)));
      run.log_batch(epoch, static_cast<int>(s), 'U', ub, uids);
      {
        Gradients gp = p.zero_gradients(), gq = q.zero_gradients();
        std::vector<StepResult> res(ub.size());
        accumulate(ub, cfg.micro_batch(), &p, &q, &gp, &gq,
                   [&](std::size_t k, std::size_t i, Gradients* a, Gradients* b) {
                     const std::uint64_t seed =
                         derive_seed(cfg.seed, (static_cast<std::uint64_t>(epoch) << 32) ^ static_cast<std::uint64_t>(i));
                     res[k] = unsupervised_step(p, q, unlabeled[i], est, seed, a, b, -1.0);
                   });
        std::size_t tokens = 0;
        double j = 0.0;
        for (std::size_t k = 0; k < ub.size(); ++k) {
          tokens += observed_tokens(unlabeled[ub[k]], res[k].sample);
          j += res[k].elbo.total;
          rec.reconstruction += res[k].elbo.reconstruction;
          rec.kl += res[k].elbo.kl_term;
        }
        const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(tokens, 1));
        gp.scale(inv);
        gq.scale(inv);
        const double lr = lr_schedule(++step, total, cfg.max_lr, cfg.warmup_frac);
        opt_p.step(p, std::move(gp), lr);
        opt_q.step(q, std::move(gq), lr);
        rec.unsup_loss -= j;
        tu += tokens;
      }
    }
    rec.sup_nll_p /= static_cast<double>(std::max<std::size_t>(tp, 1));
    rec.sup_nll_q /= static_cast<double>(std::max<std::size_t>(tq, 1));
    rec.unsup_loss /= static_cast<double>(std::max<std::size_t>(tu, 1));
    rec.reconstruction /= static_cast<double>(unlabeled.size());
    rec.kl /= static_cast<double>(unlabeled.size());
    run.end_epoch(rec, epoch == cfg.epochs_semi);
  }
  return run.finish();
}

// ------------------------------------------------------------------ self-training

SelfTrainTerms self_train_objective(const ModelParameters& p, const ObservedSession& session, StScheme scheme,
                                    const EstimatorConfig& est, Gradients* grads, double grad_scale) {
  ad::Graph g(grads != nullptr);
  ModelRun run(p, g, grads);
  DecodingState st = run.start();
  std::vector<ad::Var> resp, prior;
  SelfTrainTerms out;
  for (std::size_t t = 0; t < session.turns.size(); ++t) {
    const auto& turn = session.turns[t];
    ad::Var lp;
    for (std::size_t i = 0; i < turn.user.size(); ++i)
      lp = run.step(st, InputRow::id(turn.user[i]), i + 1 == turn.user.size());
    TokenIds h;
    for (int i = 0; i < est.max_latent_len; ++i) {
      std::optional<int> forced = est.force ? est.force(static_cast<int>(t), h) : std::nullopt;
      const auto v = g.value(lp);
      const int tok = forced ? *forced : static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
      h.push_back(tok);
      if (uses_prior(scheme)) prior.push_back(g.pick(lp, tok));
      const InputRow row = uses_stt(scheme) ? InputRow::row(g.straight_through(tok, g.exp(lp))) : InputRow::id(tok);
      lp = run.step(st, row);
      if (tok == session.stop_token) break;
    }
    for (std::size_t j = 0; j < turn.response.size(); ++j) {
      resp.push_back(g.pick(lp, turn.response[j]));
      if (j + 1 < turn.response.size()) lp = run.step(st, InputRow::id(turn.response[j]));
      else run.step(st, InputRow::id(turn.response[j]), false);
    }
    out.pseudo_labels.push_back(std::move(h));
  }
  const ad::Var r = g.sum(resp);
  out.response = g.scalar(r);
  ad::Var total = r;
  if (!prior.empty()) {
    const ad::Var pr = g.sum(prior);
    out.prior = g.scalar(pr);
    total = g.add(r, pr);
  }
  if (grads) g.backward(total, -grad_scale);
  return out;
}

RunRecord self_train(ModelParameters& p, const CorpusSplit& split, const TrainContext& ctx, const TrainConfig& cfg) {
  cfg.validate();
  if (!cfg.st_scheme) throw ConfigError("self-training needs st_scheme");
  const StScheme scheme = *cfg.st_scheme;
  if (split.labeled.empty()) throw ConfigError("self-training needs labeled sessions");
  const Prepared data = prepare_labeled(split.labeled, ctx.vocab, p.config().context_len, p.config().context_len);
  const auto unlabeled = observe_all(split.unlabeled, ctx.vocab, p.config().context_len, cfg.estimator.max_latent_len);
  const auto lids = ids_of(split.labeled), uids = ids_of(split.unlabeled);
  EstimatorConfig est = cfg.estimator;
  if (cfg.requery_db) est.force = make_db_requery_hook(ctx.world, ctx.vocab);

  const std::string phase = std::string("self_train_") + to_string(scheme);
  Run run(phase, p, nullptr, ctx, cfg);
  AdamW opt(cfg.optimizer);
  const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = unlabeled.empty() ? (split.labeled.size() + B - 1) / B
                                                        : (unlabeled.size() + B - 1) / B;
  const auto total = (unlabeled.empty() ? 1 : 2) * static_cast<std::int64_t>(steps_per_epoch) * cfg.epochs_semi;
  if (unlabeled.empty()) spdlog::warn("no unlabeled sessions: self-training reduces to supervised updates of p");
  Cycler labeled_batches(split.labeled.size(), derive_seed(cfg.seed, 0x1ab));
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs_semi; ++epoch) {
    const auto order = shuffled(unlabeled.size(), derive_seed(cfg.seed, 0x5e41 + static_cast<std::uint64_t>(epoch)));
    EpochRecord rec;
    rec.phase = phase;
    rec.epoch = epoch;
    std::size_t tp = 0, tu = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const auto lb = labeled_batches.next(B);
      run.log_batch(epoch, static_cast<int>(s), 'L', lb, lids);
      {
        Gradients gp = p.zero_gradients();
        const auto r = supervised_batch(data, lb, cfg.micro_batch(), p, nullptr, gp, nullptr);
        opt.step(p, std::move(gp), lr_schedule(++step, total, cfg.max_lr, cfg.warmup_frac));
        rec.sup_nll_p += r.nll_p;
        tp += r.tok_p;
      }
      if (unlabeled.empty()) continue;
      const std::vector<std::size_t> ub(order.begin() + static_cast<std::ptrdiff_t>(s * B),
                                        order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), (s + 1) * B)));
      run.log_batch(epoch, static_cast<int>(s), 'U', ub, uids);
      Gradients gp = p.zero_gradients();
      std::vector<SelfTrainTerms> res(ub.size());
      accumulate(ub, cfg.micro_batch(), &p, nullptr, &gp, nullptr,
                 [&](std::size_t k, std::size_t i, Gradients* a, Gradients*) {
                   res[k] = self_train_objective(p, unlabeled[i], scheme, est, a, 1.0);
                 });
      std::size_t tokens = 0;
      double loss = 0.0;
      for (std::size_t k = 0; k < ub.size(); ++k) {
        const auto& sess = unlabeled[ub[k]];
        for (std::size_t t = 0; t < sess.turns.size(); ++t)
          tokens += sess.turns[t].response.size() + (uses_prior(scheme) ? res[k].pseudo_labels[t].size() : 0);
        loss -= res[k].response + res[k].prior;
        rec.reconstruction += res[k].response;
      }
      gp.scale(1.0 / static_cast<double>(std::max<std::size_t>(tokens, 1)));
      opt.step(p, std::move(gp), lr_schedule(++step, total, cfg.max_lr, cfg.warmup_frac));
      rec.unsup_loss += loss;
      tu += tokens;
    }
    rec.sup_nll_p /= static_cast<double>(std::max<std::size_t>(tp, 1));
    rec.unsup_loss /= static_cast<double>(std::max<std::size_t>(tu, 1));
    if (!unlabeled.empty()) rec.reconstruction /= static_cast<double>(unlabeled.size());
    run.end_epoch(rec, epoch == cfg.epochs_semi);
  }
  return run.finish();
}

std::string RunRecord::to_json() const {
  json j;
  j["epochs"] = json::array();
  for (const auto& e : epochs) j["epochs"].push_back(epoch_json(e));
  j["selected_epoch_index"] = selected ? json(*selected) : json(nullptr);
  j["selected_checkpoint"] = selected_checkpoint;
  j["batches"] = batch_log.size();
  return j.dump(2);
}

}  // namespace semivar
