#pragma once

// End-to-end session rollout with the generative model and corpus metrics.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "semivar/corpus.hpp"
#include "semivar/model.hpp"
#include "semivar/vocab.hpp"

namespace semivar {

struct RolloutConfig {
  int max_belief_len = 24;
  int max_act_len = 16;
  int max_response_len = 32;
};

struct RolloutTurn {
  Tokens belief;    // generated, with <eos_b>
  Tokens db;        // substituted bucket, with <eos_db>
  Tokens act;       // generated, with <eos_a>
  Tokens response;  // generated, with <eos_r>
  std::size_t db_matches = 0;
  bool belief_parse_failed = false;
  bool truncated = false;
};

struct RolloutResult {
  std::string session_id;
  std::vector<RolloutTurn> turns;

  int parse_failures() const;
  bool any_truncated() const;
};

// Greedy per-turn generation of belief, act and response. The db segment is
// always the bucket of a query with the generated belief, and each turn's
// context holds the generated (not the reference) earlier turns.
RolloutResult rollout(const ModelParameters& p, const DialogSession& session, const World& world,
                      const Vocabulary& vocab, const RolloutConfig& cfg = {});
// Sessions in parallel; results in input order.
std::vector<RolloutResult> rollout_all(const ModelParameters& p, const std::vector<DialogSession>& sessions,
                                       const World& world, const Vocabulary& vocab, const RolloutConfig& cfg = {});

// The reference turns of a session in rollout form (upper-bound checks).
RolloutResult oracle_rollout(const DialogSession& session, const World& world);

struct InformSuccess {
  double inform = 0.0;
  double success = 0.0;
  std::size_t scored = 0;
  std::size_t without_goal = 0;
};

struct MatchReqSuc {
  std::optional<double> match;  // absent when no turn provides an entity
  double req_suc = 0.0;
  std::size_t entity_turns = 0;
  std::size_t attributes = 0;
};

// Entity offered at a turn: first record matching the generated belief, when
// the turn provides an entity (name placeholder in the response or an inform
// group carrying "name" in the act).
std::optional<Record> offered_entity(const RolloutTurn& turn, const World& world);

InformSuccess inform_success(const std::vector<RolloutResult>& rollouts, const std::vector<DialogSession>& sessions,
                             const World& world);
MatchReqSuc match_reqsuc(const std::vector<RolloutResult>& rollouts, const std::vector<DialogSession>& sessions,
                         const World& world);

// Corpus BLEU-4 with brevity penalty, x100. Delimiters are ignored.
double bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references);

double combined_score(double inform, double success, double bleu);
double combined_crosswoz(double match, double req_suc, double bleu);

struct LatentAccuracy {
  double latent_exact_match = 0.0;  // belief and act both match
  double joint_goal_accuracy = 0.0;  // belief matches
  std::size_t turns = 0;
};

std::string normalize_belief_tokens(const Tokens& belief, const Ontology& ontology);
std::string normalize_act_tokens(const Tokens& act, const Ontology& ontology);

LatentAccuracy latent_accuracy(const std::vector<RolloutResult>& rollouts, const std::vector<DialogSession>& sessions,
                               const World& world);

struct MetricReport {
  double inform = 0.0;
  double success = 0.0;
  double bleu = 0.0;
  double combined = 0.0;
  std::optional<double> match;
  double req_suc = 0.0;
  std::optional<double> combined_crosswoz;
  double latent_exact_match = 0.0;
  double joint_goal_accuracy = 0.0;
  std::size_t sessions = 0;
  std::size_t sessions_without_goal = 0;
  std::size_t turns = 0;
  int parse_failures = 0;

  std::string to_json() const;
  std::string table() const;
};

MetricReport score_rollouts(const std::vector<RolloutResult>& rollouts, const std::vector<DialogSession>& sessions,
                            const World& world);
MetricReport evaluate(const ModelParameters& p, const std::vector<DialogSession>& sessions, const World& world,
                      const Vocabulary& vocab, const RolloutConfig& cfg = {},
                      std::vector<RolloutResult>* rollouts = nullptr);

struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

// Minimal SVG line chart.
void write_svg_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series,
                    const std::string& title, const std::string& x_label, const std::string& y_label);

}  // namespace semivar
