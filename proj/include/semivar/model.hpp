#pragma once

// A small pre-norm causal transformer language model. The same class plays
// the generative role (p_theta) and the inference role (q_phi); only the
// training sequences differ.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semivar/autodiff.hpp"
#include "semivar/sequence.hpp"

namespace semivar {

struct ModelConfig {
  int vocab_size = 0;
  int layers = 2;
  int heads = 2;
  int hidden = 64;
  int context_len = 256;
  std::uint64_t seed = 0;
  double init_std = 0.02;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class ModelRole : std::uint8_t { kGenerative, kInference };

struct Tensor {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<double> data;
};

// Gradient buffers shaped like a ModelParameters' tensors.
struct Gradients {
  std::vector<std::vector<double>> tensors;

  void zero();
  void add(const Gradients& other);
  void scale(double c);
  double squared_norm() const;
  bool empty() const { return tensors.empty(); }
};

class ModelParameters {
 public:
  ModelParameters() = default;
  // Weights drawn from N(0, init_std^2) with a stream fixed by config.seed;
  // two instances with equal configs start identical regardless of role.
  ModelParameters(const ModelConfig& config, ModelRole role);

  const ModelConfig& config() const { return config_; }
  ModelRole role() const { return role_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::size_t num_parameters() const;
  // Flat view across all tensors, in tensor order.
  double& flat(std::size_t index);
  double flat(std::size_t index) const;

  Gradients zero_gradients() const;
  int index_of(const std::string& name) const;

 private:
  ModelConfig config_;
  ModelRole role_ = ModelRole::kGenerative;
  std::vector<Tensor> tensors_;
};

// One input position: a token id, or a relaxed length-K row living on the
// graph (used for straight-through latent tokens).
struct InputRow {
  int token = -1;
  ad::Var relaxed{};

  static InputRow id(int t) { return InputRow{t, {}}; }
  static InputRow row(ad::Var v) { return InputRow{-1, v}; }
};

// Per-layer cached keys and values for every position fed so far.
struct DecodingState {
  std::vector<std::vector<ad::Var>> keys;
  std::vector<std::vector<ad::Var>> values;
  int position = 0;
};

// Binds parameters (and optionally a gradient sink) to a graph.
class ModelRun {
 public:
  ModelRun(const ModelParameters& params, ad::Graph& graph, Gradients* grads);

  DecodingState start() const;
  // Feeds `row` at state.position and advances it. Returns log-probabilities
  // of the next token, or an invalid Var when want_output is false.
  ad::Var step(DecodingState& state, const InputRow& row, bool want_output = true);

  ad::Graph& graph() { return graph_; }
  const ModelParameters& params() const { return params_; }

 private:
  ad::ParamRef ref(int tensor) const;
  ad::ParamRef row_ref(int tensor, int row) const;

  const ModelParameters& params_;
  ad::Graph& graph_;
  Gradients* grads_;
};

using Distribution = std::vector<double>;

// Next-token distributions after each input (index i conditions on
// inputs[0..i]), for the requested positions (all when empty).
std::vector<Distribution> forward_distributions(const ModelParameters& params, std::span<const InputRow> inputs,
                                                ad::Graph& graph, std::span<const int> positions = {});
std::vector<Distribution> forward_distributions(const ModelParameters& params, std::span<const int> tokens);

// -sum over loss_mask positions of log p(token_i | tokens_<i). Accumulates the
// gradient into `grads` when given.
double teacher_forced_nll(const ModelParameters& params, const TrainingSequence& seq, Gradients* grads = nullptr,
                          double grad_scale = 1.0);
// Sum of log p over positions in [begin, end) of `tokens` (teacher forced).
double sequence_log_prob(const ModelParameters& params, std::span<const int> tokens, int begin, int end);

enum class DecodeMode : std::uint8_t { kGreedy, kSample };

struct DecodeResult {
  TokenIds tokens;
  bool truncated = false;
};

DecodeResult decode(const ModelParameters& params, std::span<const int> prefix, int stop_token, int max_new,
                    DecodeMode mode, std::uint64_t seed = 0);

// Greedy: argmax with ties to the lowest id.
int argmax_token(std::span<const double> probs);

struct OptimizerState;

void save_checkpoint(const std::filesystem::path& path, const ModelParameters& params,
                     const OptimizerState* optimizer = nullptr);
// Throws ConfigError if `expected` is given and differs from the stored config.
ModelParameters load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected,
                                OptimizerState* optimizer = nullptr);

}  // namespace semivar
