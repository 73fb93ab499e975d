#pragma once

// Experiment configuration (JSON round-trip with dotted-key overrides), data
// preparation and the three training arms used by the CLI and the acceptance
// harness.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "semivar/corpus.hpp"
#include "semivar/evaluation.hpp"
#include "semivar/model.hpp"
#include "semivar/training.hpp"

namespace semivar {

struct DataConfig {
  GeneratorConfig generator;
  std::uint64_t world_seed = 1;  // ontology, database and corpus
  int valid_sessions = 30;
  int test_sessions = 60;
  double label_proportion = 0.1;
  // Load corpus files written by `synth` from here instead of regenerating.
  std::string dir;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;  // label split, initialization, sampling
  DataConfig data;
  ModelConfig model;  // vocab_size and seed are filled in from the data and seed
  TrainConfig train;
  // Run directory holding p.ckpt / q.ckpt to start from; empty = fresh weights.
  std::string init;

  ExperimentConfig();
  void validate() const;
};

std::string config_to_json(const ExperimentConfig& cfg);
// Unknown keys and type mismatches throw ConfigError.
ExperimentConfig config_from_json(const std::string& text);

// File values overridden by `key=value` pairs with dotted keys, e.g.
// "train.max_lr=1e-3". Values parse as JSON, falling back to a string.
ExperimentConfig resolve_config(const std::optional<std::filesystem::path>& file,
                                const std::vector<std::string>& overrides);

struct ExperimentData {
  World world;
  Vocabulary vocab;
  std::vector<DialogSession> train;
  std::vector<DialogSession> valid;
  std::vector<DialogSession> test;
  CorpusSplit split;  // of `train`
};

// Corpus order: first the training pool, then validation, then test.
ExperimentData prepare_data(const ExperimentConfig& cfg);
void write_data(const std::filesystem::path& dir, const ExperimentData& data);

ModelConfig model_config(const ExperimentConfig& cfg, const Vocabulary& vocab, ModelRole role);

// Labeled epochs giving SupOnly as many labeled updates as the semi phase
// receives through its alternation.
int matched_supervised_epochs(const TrainConfig& cfg, const CorpusSplit& split);

enum class Arm : std::uint8_t { kSupervised, kSupOnlyMatched, kSemiVl, kSemiSt };
const char* to_string(Arm arm);

struct ArmOutcome {
  Arm arm = Arm::kSupervised;
  RunRecord record;
  MetricReport test;
};

struct ModelPair {
  ModelParameters p;
  ModelParameters q;
};

ModelPair fresh_models(const ExperimentConfig& cfg, const Vocabulary& vocab);
ModelPair load_models(const std::filesystem::path& run_dir, const ExperimentConfig& cfg, const Vocabulary& vocab);

// Trains `models` in place with the arm's procedure and scores p on the test
// sessions. With a run directory: snapshot config.json first, then training
// artifacts, p.ckpt, q.ckpt and summary.json.
ArmOutcome run_arm(Arm arm, ModelPair& models, const ExperimentConfig& cfg, const ExperimentData& data,
                   const std::optional<std::filesystem::path>& run_dir = std::nullopt);

}  // namespace semivar
