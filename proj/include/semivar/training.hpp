#pragma once

// Supervised pre-training, the alternating labeled/unlabeled variational loop
// and the self-training baselines.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "semivar/corpus.hpp"
#include "semivar/evaluation.hpp"
#include "semivar/model.hpp"
#include "semivar/optim.hpp"
#include "semivar/variational.hpp"

namespace semivar {

enum class StScheme : std::uint8_t { kResponseStt, kJointStt, kResponse, kJoint };

const char* to_string(StScheme s);
StScheme st_scheme_from_string(const std::string& s);
bool uses_stt(StScheme s);
bool uses_prior(StScheme s);

struct TrainConfig {
  int epochs_sup = 10;
  int epochs_semi = 10;
  int batch_size = 8;
  int grad_accum = 1;  // batch_size = micro batch * grad_accum
  double max_lr = 3e-3;
  double warmup_frac = 0.2;
  std::uint64_t seed = 0;
  EstimatorConfig estimator;
  std::optional<StScheme> st_scheme;
  AdamWConfig optimizer;
  // Replace the db token of sampled latents by a query on the sampled belief.
  bool requery_db = false;
  // Validation rollouts every this many epochs (0 = never); 0 sessions = all.
  int eval_every = 1;
  int max_eval_sessions = 0;
  RolloutConfig rollout;

  void validate() const;
  int micro_batch() const { return batch_size / grad_accum; }
};

struct TrainContext {
  const World& world;
  const Vocabulary& vocab;
  std::vector<DialogSession> validation;
  // When set: metrics.jsonl, batch_log.jsonl and checkpoints/ are written here.
  std::optional<std::filesystem::path> run_dir;
};

struct BatchLogEntry {
  std::string phase;
  int epoch = 0;
  int step = 0;
  char kind = 'L';  // 'L' labeled, 'U' unlabeled
  std::vector<std::string> sessions;
};

struct EpochRecord {
  std::string phase;  // "supervised", "semi_vl", "self_train"
  int epoch = 0;      // 1-based within the phase
  double sup_nll_p = 0.0;  // per token
  double sup_nll_q = 0.0;
  double reconstruction = 0.0;  // per unlabeled session
  double kl = 0.0;
  double unsup_loss = 0.0;  // per token
  std::optional<MetricReport> validation;
};

struct RunRecord {
  std::vector<EpochRecord> epochs;
  std::vector<BatchLogEntry> batch_log;
  std::optional<std::size_t> selected;  // index into epochs
  std::string selected_checkpoint;

  std::string to_json() const;
};

// Masked teacher-forced NLL on the generative layout for p and the inference
// layout for q. The selected parameters are left in p and q.
RunRecord supervised_train(ModelParameters& p, ModelParameters& q, const std::vector<DialogSession>& labeled,
                           const TrainContext& ctx, const TrainConfig& cfg);

// Strict alternation: one labeled batch (teacher forcing for both models)
// then one unlabeled batch (variational objective), until every unlabeled
// session was seen epochs_semi times. Unlabeled sessions contribute only their
// user inputs and responses.
RunRecord semi_supervised_train(ModelParameters& p, ModelParameters& q, const CorpusSplit& split,
                                const TrainContext& ctx, const TrainConfig& cfg);

// Pseudo-labels each unlabeled turn greedily from p's prior and maximizes
// the response (or joint) likelihood, with optional straight-through inputs
// on the pseudo-label tokens. The inference model is not used.
RunRecord self_train(ModelParameters& p, const CorpusSplit& split, const TrainContext& ctx, const TrainConfig& cfg);

struct SelfTrainTerms {
  double response = 0.0;  // sum of log p(r_t | ...)
  double prior = 0.0;     // sum of log p(h_t | ...) on the pseudo labels
  std::vector<TokenIds> pseudo_labels;
};

// One self-training objective evaluation; gradients of -(response [+ prior])
// times grad_scale go to `grads` when given.
SelfTrainTerms self_train_objective(const ModelParameters& p, const ObservedSession& session, StScheme scheme,
                                    const EstimatorConfig& est, Gradients* grads = nullptr, double grad_scale = 1.0);

// Drops the earliest turns until user + response tokens plus a latent budget
// per turn fit the context window.
ObservedSession fit_context(const ObservedSession& s, int context_len, int latent_budget);

}  // namespace semivar
