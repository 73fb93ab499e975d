#pragma once

// Variational objective for sessions whose intermediate states are unobserved.
//
// Everything here is generic over token ids: a session is a list of turns,
// each with observed user ids and response ids, and the latent of a turn is a
// token sequence terminated by `stop_token`. The generative model p reads
// turns as U H R, the inference model q as U R H.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semivar/corpus.hpp"
#include "semivar/model.hpp"
#include "semivar/sequence.hpp"
#include "semivar/vocab.hpp"

namespace semivar {

struct ObservedTurn {
  TokenIds user;      // with its delimiters
  TokenIds response;  // with its delimiters
};

struct ObservedSession {
  std::vector<ObservedTurn> turns;
  int stop_token = 0;
};

ObservedSession observe(const DialogSession& session, const Vocabulary& vocab);

struct LatentSample {
  std::vector<TokenIds> turns;
  // q's distribution at each sampled position (probabilities).
  std::vector<std::vector<Distribution>> source;
  std::vector<bool> truncated;

  std::size_t num_turns() const { return turns.size(); }
};

// Ground-truth latents of a labeled session, in the same form as a sample.
LatentSample labeled_latents(const DialogSession& session, const Vocabulary& vocab);

struct ElboBreakdown {
  double reconstruction = 0.0;
  double kl_term = 0.0;
  double total = 0.0;
};

enum class EstimatorKind : std::uint8_t { kNaiveMc, kRmcaToken, kRmcaTurn };
enum class SampleMode : std::uint8_t { kSample, kGreedy };

// Returns a token to emit instead of sampling at this position, if any.
using ForceHook = std::function<std::optional<int>(int turn, std::span<const int> latent_prefix)>;

struct EstimatorConfig {
  EstimatorKind kind = EstimatorKind::kRmcaToken;
  bool use_stt = true;
  int max_latent_len = 32;
  SampleMode sample_mode = SampleMode::kGreedy;
  // Floor on p's probabilities inside the analytic KL; 0 disables it.
  double prob_floor = 1e-12;
  ForceHook force;

  void validate() const;
};

const char* to_string(EstimatorKind kind);
EstimatorKind estimator_kind_from_string(const std::string& s);

// Forces the db token right after <sos_db> to the bucket of a query on the
// belief sampled so far.
ForceHook make_db_requery_hook(const World& world, const Vocabulary& vocab);

// Forward value onehot(token); gradients flow into `probs`.
ad::Var stt_wrap(ad::Graph& graph, int token, ad::Var probs);

struct KlResult {
  double value = 0.0;  // sum_v q(v) log(p(v)/q(v)), or -inf on a support violation
  bool support_violation = false;
};
KlResult kl_position_term(std::span<const double> q, std::span<const double> p);

// Ancestral generation from q with tracking disabled.
LatentSample sample_latents(const ModelParameters& q, const ObservedSession& session, const EstimatorConfig& cfg,
                            std::uint64_t seed);

struct ObjectiveOptions {
  bool use_stt = true;
  double prob_floor = 0.0;
  // Per-turn enumeration limit for the turn-level estimator.
  std::size_t max_turn_values = 4096;
  int max_latent_len = 32;
};

struct ObjectiveStats {
  std::size_t graph_nodes = 0;
  std::size_t retained_bytes = 0;
  std::size_t support_clamps = 0;
  double forward_seconds = 0.0;
  double backward_seconds = 0.0;
};

// Evaluates J(h) for the given estimator. When gradient sinks are given the
// objective is differentiated with d(total) = grad_seed and gradients are
// accumulated into them (either may be null to freeze that model).
ElboBreakdown evaluate_objective(EstimatorKind kind, const ModelParameters& p, const ModelParameters& q,
                                 const ObservedSession& session, const LatentSample& h, const ObjectiveOptions& opts,
                                 Gradients* grad_p = nullptr, Gradients* grad_q = nullptr, double grad_seed = 1.0,
                                 ObjectiveStats* stats = nullptr);

ElboBreakdown rmca_objective_token(const ModelParameters& p, const ModelParameters& q, const ObservedSession& session,
                                   const LatentSample& h, bool use_stt);
ElboBreakdown rmca_objective_turn(const ModelParameters& p, const ModelParameters& q, const ObservedSession& session,
                                  const LatentSample& h, bool use_stt, int max_latent_len = 32);
ElboBreakdown naive_mc_objective(const ModelParameters& p, const ModelParameters& q, const ObservedSession& session,
                                 const LatentSample& h);

// Number of distinct per-turn latent values: sequences ending in the stop
// token plus unterminated ones of length max_len.
std::size_t count_turn_values(int vocab_size, int max_len);

enum class Strategy : std::uint8_t { kSamplingThenForward, kCoupledOnePass };

struct StepResult {
  ElboBreakdown elbo;
  LatentSample sample;
  ObjectiveStats stats;
  double sample_seconds = 0.0;
};

// Sampling-then-forward: sample h without a graph, build the objective graph
// with h given, then backpropagate.
StepResult unsupervised_step(const ModelParameters& p, const ModelParameters& q, const ObservedSession& session,
                             const EstimatorConfig& cfg, std::uint64_t seed, Gradients* grad_p, Gradients* grad_q,
                             double grad_seed = 1.0);

// Reference strategy: samples inside the tracked graph and re-encodes the
// whole history at every turn, so the retained graph grows quadratically in
// the number of turns. Token-level and naive estimators only.
StepResult coupled_one_pass_step(const ModelParameters& p, const ModelParameters& q, const ObservedSession& session,
                                 const EstimatorConfig& cfg, std::uint64_t seed, Gradients* grad_p, Gradients* grad_q,
                                 double grad_seed = 1.0);

}  // namespace semivar
