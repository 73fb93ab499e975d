#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "semivar/error.hpp"
#include "semivar/sequence.hpp"
#include "semivar/training.hpp"

using namespace semivar;

namespace {

struct Toy {
  World world;
  std::vector<DialogSession> corpus;
  Vocabulary vocab;
};

const Toy& toy() {
  static const Toy t = [] {
    GeneratorConfig g;
    g.num_sessions = 50;
    Toy out;
    out.world = build_world(g, 5);
    out.corpus = generate_corpus(out.world, g, 5);
    out.vocab = build_vocabulary(out.world.ontology, out.corpus);
    return out;
  }();
  return t;
}

ModelConfig small_model(std::uint64_t seed) {
  ModelConfig c;
  c.vocab_size = toy().vocab.size();
  c.hidden = 16;
  c.layers = 1;
  c.heads = 2;
  c.context_len = 256;
  c.seed = seed;
  return c;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs_sup = 1;
  c.epochs_semi = 1;
  c.batch_size = 4;
  c.eval_every = 0;
  c.seed = 3;
  c.estimator.max_latent_len = 24;
  return c;
}

std::vector<DialogSession> head(std::size_t n) {
  return {toy().corpus.begin(), toy().corpus.begin() + static_cast<std::ptrdiff_t>(n)};
}

bool same_params(const ModelParameters& a, const ModelParameters& b) {
  for (std::size_t t = 0; t < a.tensors().size(); ++t)
    if (a.tensors()[t].data != b.tensors()[t].data) return false;
  return true;
}

double mean_token_nll(const ModelParameters& m, const std::vector<DialogSession>& sessions, Layout layout) {
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& s : sessions) {
    const auto seq = layout == Layout::kGenerative ? build_generative_sequence(s, toy().vocab)
                                                   : build_inference_sequence(s, toy().vocab);
    nll += teacher_forced_nll(m, seq);
    tokens += static_cast<std::size_t>(std::count(seq.loss_mask.begin(), seq.loss_mask.end(), true));
  }
  return nll / static_cast<double>(tokens);
}

// Latent-position NLL of q with every turn's latent taken from a different
// session (the paired control for the true latents).
double latent_nll(const ModelParameters& q, const std::vector<DialogSession>& sessions, bool shuffled) {
  std::vector<DialogTurn> pool;
  for (const auto& s : sessions)
    for (const auto& t : s.turns) pool.push_back(t);
  std::mt19937_64 rng(9);
  std::shuffle(pool.begin(), pool.end(), rng);
  double total = 0.0;
  std::size_t k = 0;
  for (const auto& s : sessions) {
    DialogSession c = s;
    if (shuffled)
      for (auto& t : c.turns) {
        const auto& donor = pool[k++ % pool.size()];
        t.belief = donor.belief;
        t.db = donor.db;
        t.act = donor.act;
      }
    total += teacher_forced_nll(q, build_inference_sequence(c, toy().vocab));
  }
  return total;
}

}  // namespace

TEST_CASE("supervised training lowers the loss; q prefers the true latents") {
  const auto sessions = head(50);
  ModelParameters p(small_model(1), ModelRole::kGenerative);
  ModelParameters q(small_model(2), ModelRole::kInference);
  const double before = mean_token_nll(p, sessions, Layout::kGenerative);
  TrainConfig cfg = quick_config();
  cfg.epochs_sup = 5;
  cfg.batch_size = 4;
  cfg.max_lr = 1e-2;
  TrainContext ctx{toy().world, toy().vocab, {}, std::nullopt};
  const auto rec = supervised_train(p, q, sessions, ctx, cfg);
  REQUIRE(rec.epochs.size() == 5);
  const double after = mean_token_nll(p, sessions, Layout::kGenerative);
  CHECK(after < 0.8 * before);
  CHECK(rec.epochs.back().sup_nll_p < rec.epochs.front().sup_nll_p);
  CHECK(latent_nll(q, sessions, false) < latent_nll(q, sessions, true));
}

TEST_CASE("zero epochs leave the parameters unchanged") {
  ModelParameters p(small_model(1), ModelRole::kGenerative), q(small_model(2), ModelRole::kInference);
  const ModelParameters p0 = p, q0 = q;
  TrainConfig cfg = quick_config();
  cfg.epochs_sup = 0;
  TrainContext ctx{toy().world, toy().vocab, {}, std::nullopt};
  const auto rec = supervised_train(p, q, head(6), ctx, cfg);
  CHECK(rec.epochs.empty());
  CHECK(same_params(p, p0));
  CHECK(same_params(q, q0));
}

TEST_CASE("configuration errors") {
  TrainConfig cfg = quick_config();
  cfg.batch_size = 6;
  cfg.grad_accum = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(st_scheme_from_string("pseudo"), ConfigError);
  for (auto s : {StScheme::kResponseStt, StScheme::kJointStt, StScheme::kResponse, StScheme::kJoint})
    CHECK(st_scheme_from_string(to_string(s)) == s);
  ModelParameters p(small_model(1), ModelRole::kGenerative);
  TrainContext ctx{toy().world, toy().vocab, {}, std::nullopt};
  const auto split = split_by_label_proportion(head(10), 0.3, 1);
  CHECK_THROWS_AS(self_train(p, split, ctx, quick_config()), ConfigError);  // no scheme
}

TEST_CASE("proportion 1.0 reduces to supervised continuation") {
  const auto split = split_by_label_proportion(head(8), 1.0, 4);
  REQUIRE(split.unlabeled.empty());
  TrainContext ctx{toy().world, toy().vocab, {}, std::nullopt};
  TrainConfig cfg = quick_config();
  cfg.epochs_semi = 2;
  ModelParameters p1(small_model(1), ModelRole::kGenerative), q1(small_model(2), ModelRole::kInference);
  ModelParameters p2 = p1, q2 = q1;
  semi_supervised_train(p1, q1, split, ctx, cfg);
  TrainConfig sup = cfg;
  sup.epochs_sup = cfg.epochs_semi;
  supervised_train(p2, q2, split.labeled, ctx, sup);
  CHECK(same_params(p1, p2));
  CHECK(same_params(q1, q2));
}

TEST_CASE("semi-supervised: strict L,U alternation and determinism") {
  const auto split = split_by_label_proportion(head(12), 0.25, 2);
  TrainContext ctx{toy().world, toy().vocab, {}, std::nullopt};
  TrainConfig cfg = quick_config();
  cfg.estimator.sample_mode = SampleMode::kSample;
  ModelParameters p(small_model(1), ModelRole::kGenerative), q(small_model(2), ModelRole::kInference);
  ModelParameters pa = p, qa = q;
  const auto rec = semi_supervised_train(p, q, split, ctx, cfg);
  const std::size_t steps = (split.unlabeled.size() + 3) / 4;
  REQUIRE(rec.batch_log.size() == 2 * steps);
  for (std::size_t i = 0; i < rec.batch_log.size(); ++i) CHECK(rec.batch_log[i].kind == (i % 2 == 0 ? 'L' : 'U'));
  // every unlabeled session appears once per epoch
  std::multiset<std::string> seen;
  for (const auto& b : rec.batch_log)
    if (b.kind == 'U') seen.insert(b.sessions.begin(), b.sessions.end());
  CHECK(seen.size() == split.unlabeled.size());
  for (const auto& s : split.unlabeled) CHECK(seen.count(s.id) == 1);

  const auto again = semi_supervised_train(pa, qa, split, ctx, cfg);
  REQUIRE(again.epochs.size() == rec.epochs.size());
  for (std::size_t e = 0; e < rec.epochs.size(); ++e) {
    CHECK(std::abs(again.epochs[e].unsup_loss - rec.epochs[e].unsup_loss) <= 1e-6);
    CHECK(std::abs(again.epochs[e].sup_nll_p - rec.epochs[e].sup_nll_p) <= 1e-6);
    CHECK(std::abs(again.epochs[e].kl - rec.epochs[e].kl) <= 1e-6);
  }
  CHECK(same_params(p, pa));
}

TEST_CASE("hidden latents of unlabeled sessions never reach the gradients") {
  auto split = split_by_label_proportion(head(10), 0.3, 6);
  auto tampered = split;
  for (auto& s : tampered.unlabeled)
    for (auto& t : s.turns) {
      t.belief = {"[general]", std::string(tok::kEosB)};
      t.act = {"[general]", "[bye]", std::string(tok::kEosA)};
      t.db = {"[db_3]", std::string(tok::kEosD)};
    }
  TrainContext ctx{toy().world, toy().vocab, {}, std::nullopt};
  TrainConfig cfg = quick_config();
  ModelParameters p1(small_model(1), ModelRole::kGenerative), q1(small_model(2), ModelRole::kInference);
  ModelParameters p2 = p1, q2 = q1;
  semi_supervised_train(p1, q1, split, ctx, cfg);
  semi_supervised_train(p2, q2, tampered, ctx, cfg);
  CHECK(same_params(p1, p2));
  CHECK(same_params(q1, q2));

  ModelParameters s1(small_model(1), ModelRole::kGenerative);
  ModelParameters s2 = s1;
  cfg.st_scheme = StScheme::kJointStt;
  self_train(s1, split, ctx, cfg);
  self_train(s2, tampered, ctx, cfg);
  CHECK(same_params(s1, s2));
}

TEST_CASE("self-training objectives: joint = response + prior, STT changes gradients only") {
  const ModelParameters p(small_model(4), ModelRole::kGenerative);
  const auto obs = observe(toy().corpus[3], toy().vocab);
  EstimatorConfig est;
  est.max_latent_len = 12;
  Gradients g_resp = p.zero_gradients(), g_joint = p.zero_gradients(), g_stt = p.zero_gradients();
  const auto resp = self_train_objective(p, obs, StScheme::kResponse, est, &g_resp);
  const auto joint = self_train_objective(p, obs, StScheme::kJoint, est, &g_joint);
  const auto stt = self_train_objective(p, obs, StScheme::kResponseStt, est, &g_stt);
  CHECK(resp.pseudo_labels == joint.pseudo_labels);
  CHECK(resp.prior == 0.0);
  CHECK(joint.response == doctest::Approx(resp.response).epsilon(1e-12));
  CHECK(joint.prior < 0.0);
  CHECK(stt.response == doctest::Approx(resp.response).epsilon(1e-12));

  // Independent recomputation of the prior term on the fixed pseudo labels.
  TrainingSequence seq;
  std::vector<std::size_t> latent_pos, resp_pos;
  for (std::size_t t = 0; t < obs.turns.size(); ++t) {
    for (int id : obs.turns[t].user) seq.token_ids.push_back(id);
    for (int id : resp.pseudo_labels[t]) {
      latent_pos.push_back(seq.token_ids.size());
      seq.token_ids.push_back(id);
    }
    for (int id : obs.turns[t].response) {
      resp_pos.push_back(seq.token_ids.size());
      seq.token_ids.push_back(id);
    }
  }
  seq.tags.assign(seq.token_ids.size(), SegmentTag::kDelim);
  seq.loss_mask.assign(seq.token_ids.size(), false);
  for (auto i : latent_pos) seq.loss_mask[i] = true;
  CHECK(-teacher_forced_nll(p, seq) == doctest::Approx(joint.prior).epsilon(1e-10));

  // Without STT the gradient is that of the response likelihood with the
  // pseudo labels fed as plain tokens.
  seq.loss_mask.assign(seq.token_ids.size(), false);
  for (auto i : resp_pos) seq.loss_mask[i] = true;
  CHECK(-teacher_forced_nll(p, seq) == doctest::Approx(resp.response).epsilon(1e-10));
  Gradients g_tf = p.zero_gradients();
  teacher_forced_nll(p, seq, &g_tf);
  double max_gap = 0.0, stt_gap = 0.0;
  for (std::size_t t = 0; t < g_tf.tensors.size(); ++t)
    for (std::size_t i = 0; i < g_tf.tensors[t].size(); ++i) {
      max_gap = std::max(max_gap, std::abs(g_tf.tensors[t][i] - g_resp.tensors[t][i]));
      stt_gap = std::max(stt_gap, std::abs(g_stt.tensors[t][i] - g_resp.tensors[t][i]));
    }
  CHECK(max_gap < 1e-10);
  CHECK(stt_gap > 1e-8);
}

TEST_CASE("checkpoint selection: first epoch with the best validation score, restored and saved") {
  const auto dir = std::filesystem::temp_directory_path() / "semivar_tests" / "selection";
  std::filesystem::remove_all(dir);
  TrainContext ctx{toy().world, toy().vocab, head(50), dir};
  ctx.validation.erase(ctx.validation.begin(), ctx.validation.begin() + 46);
  TrainConfig cfg = quick_config();
  cfg.epochs_sup = 4;
  cfg.eval_every = 1;
  cfg.max_lr = 1e-2;
  cfg.rollout.max_response_len = 8;
  ModelParameters p(small_model(1), ModelRole::kGenerative), q(small_model(2), ModelRole::kInference);
  const auto rec = supervised_train(p, q, head(12), ctx, cfg);
  REQUIRE(rec.selected.has_value());
  std::size_t best = 0;
  for (std::size_t e = 0; e < rec.epochs.size(); ++e)
    if (rec.epochs[e].validation->combined > rec.epochs[best].validation->combined) best = e;
  CHECK(*rec.selected == best);
  const auto saved = load_checkpoint(dir / "checkpoints" / (rec.selected_checkpoint + "_p.ckpt"), p.config());
  CHECK(same_params(saved, p));
  CHECK(std::filesystem::exists(dir / "metrics.jsonl"));
  CHECK(std::filesystem::exists(dir / "batch_log.jsonl"));
}

TEST_CASE("fit_context drops the earliest turns") {
  ObservedSession s;
  for (int t = 0; t < 4; ++t) s.turns.push_back({TokenIds(5, t), TokenIds(5, t)});
  const auto fit = fit_context(s, 45, 5);
  REQUIRE(fit.turns.size() == 3);
  CHECK(fit.turns.front().user.front() == 1);
  CHECK_THROWS_AS(fit_context(s, 12, 5), ContractError);
}
