#include "semivar/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "semivar/error.hpp"
#include "semivar/optim.hpp"
#include "semivar/rng.hpp"

namespace semivar {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
  if (layers < 1 || heads < 1 || hidden < 1 || context_len < 1) throw ConfigError("model: sizes must be positive");
  if (hidden % heads != 0) throw ConfigError(fmt::format("model: hidden {} not divisible by heads {}", hidden, heads));
}

// ---------------------------------------------------------------- gradients

void Gradients::zero() {
  for (auto& t : tensors) std::fill(t.begin(), t.end(), 0.0);
}

void Gradients::add(const Gradients& other) {
  if (other.tensors.size() != tensors.size()) throw ContractError("Gradients::add shape mismatch");
  for (std::size_t t = 0; t < tensors.size(); ++t)
    for (std::size_t i = 0; i < tensors[t].size(); ++i) tensors[t][i] += other.tensors[t][i];
}

void Gradients::scale(double c) {
  for (auto& t : tensors)
    for (double& v : t) v *= c;
}

double Gradients::squared_norm() const {
  double acc = 0.0;
  for (const auto& t : tensors)
    for (double v : t) acc += v * v;
  return acc;
}

// ---------------------------------------------------------------- parameters

namespace {

// Tensor indices; per-layer tensors start at kLayerBase + l * kPerLayer.
enum : int { kTokEmb = 0, kPosEmb = 1, kLayerBase = 2 };
enum : int {
  kLn1G, kLn1B, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo, kLn2G, kLn2B, kWfc, kBfc, kWproj, kBproj, kPerLayer
};

int layer_tensor(int layer, int which) { return kLayerBase + layer * kPerLayer + which; }
int final_tensor(const ModelConfig& c, int which) { return kLayerBase + c.layers * kPerLayer + which; }
enum : int { kLnfG, kLnfB, kWout, kBout };

}  // namespace

ModelParameters::ModelParameters(const ModelConfig& config, ModelRole role) : config_(config), role_(role) {
  config_.validate();
  const int d = config.hidden;
  const int k = config.vocab_size;
  const int f = 4 * d;
  Rng rng(derive_seed(config.seed, 0x70de1));
  std::normal_distribution<double> normal(0.0, config.init_std);
  const double proj_std = config.init_std / std::sqrt(2.0 * config.layers);
  std::normal_distribution<double> proj_normal(0.0, proj_std);

  auto add = [&](std::string name, int rows, int cols, int kind) {
    Tensor t{std::move(name), rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols)};
    for (double& v : t.data) {
      if (kind == 0) v = normal(rng);
      else if (kind == 1) v = proj_normal(rng);
      else if (kind == 2) v = 1.0;
      else v = 0.0;
    }
    tensors_.push_back(std::move(t));
  };
  add("tok_emb", k, d, 0);
  add("pos_emb", config.context_len, d, 0);
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = fmt::format("h{}.", l);
    add(p + "ln1.g", 1, d, 2);
    add(p + "ln1.b", 1, d, 3);
    add(p + "attn.wq", d, d, 0);
    add(p + "attn.bq", 1, d, 3);
    add(p + "attn.wk", d, d, 0);
    add(p + "attn.bk", 1, d, 3);
    add(p + "attn.wv", d, d, 0);
    add(p + "attn.bv", 1, d, 3);
    add(p + "attn.wo", d, d, 1);
    add(p + "attn.bo", 1, d, 3);
    add(p + "ln2.g", 1, d, 2);
    add(p + "ln2.b", 1, d, 3);
    add(p + "mlp.wfc", f, d, 0);
    add(p + "mlp.bfc", 1, f, 3);
    add(p + "mlp.wproj", d, f, 1);
    add(p + "mlp.bproj", 1, d, 3);
  }
  add("lnf.g", 1, d, 2);
  add("lnf.b", 1, d, 3);
  add("out.w", k, d, 0);
  add("out.b", 1, k, 3);
}

std::size_t ModelParameters::num_parameters() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.data.size();
  return n;
}

double& ModelParameters::flat(std::size_t index) {
  for (auto& t : tensors_) {
    if (index < t.data.size()) return t.data[index];
    index -= t.data.size();
  }
  throw ContractError("flat parameter index out of range");
}

double ModelParameters::flat(std::size_t index) const { return const_cast<ModelParameters*>(this)->flat(index); }

Gradients ModelParameters::zero_gradients() const {
  Gradients g;
  for (const auto& t : tensors_) g.tensors.emplace_back(t.data.size(), 0.0);
  return g;
}

int ModelParameters::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    if (tensors_[i].name == name) return static_cast<int>(i);
  throw ContractError("no parameter tensor named " + name);
}

// ---------------------------------------------------------------- forward

ModelRun::ModelRun(const ModelParameters& params, ad::Graph& graph, Gradients* grads)
    : params_(params), graph_(graph), grads_(grads) {
  if (grads_ && grads_->tensors.size() != params.tensors().size())
    throw ContractError("ModelRun: gradient buffer does not match parameters");
}

ad::ParamRef ModelRun::ref(int tensor) const {
  const auto& t = params_.tensors()[static_cast<std::size_t>(tensor)];
  ad::ParamRef r{t.data, {}};
  if (grads_) r.grad = grads_->tensors[static_cast<std::size_t>(tensor)];
  return r;
}

ad::ParamRef ModelRun::row_ref(int tensor, int row) const {
  ad::ParamRef full = ref(tensor);
  const auto cols = static_cast<std::size_t>(params_.tensors()[static_cast<std::size_t>(tensor)].cols);
  const std::size_t off = static_cast<std::size_t>(row) * cols;
  ad::ParamRef r{full.value.subspan(off, cols), {}};
  if (full.trainable()) r.grad = full.grad.subspan(off, cols);
  return r;
}

DecodingState ModelRun::start() const {
  DecodingState s;
  s.keys.resize(static_cast<std::size_t>(params_.config().layers));
  s.values.resize(static_cast<std::size_t>(params_.config().layers));
  return s;
}

ad::Var ModelRun::step(DecodingState& state, const InputRow& row, bool want_output) {
  const ModelConfig& c = params_.config();
  if (state.position >= c.context_len)
    throw ContractError(fmt::format("input longer than context_len {}", c.context_len));
  const int d = c.hidden;
  ad::Graph& g = graph_;
  ad::Var x;
  if (row.relaxed.valid())
    x = g.relaxed_embedding(ref(kTokEmb), row.relaxed, d);
  else {
    if (row.token < 0 || row.token >= c.vocab_size) throw ContractError(fmt::format("token {} out of range", row.token));
    x = g.embedding(ref(kTokEmb), row.token, d);
  }
  x = g.add_param(x, row_ref(kPosEmb, state.position));
  for (int l = 0; l < c.layers; ++l) {
    auto p = [&](int which) { return ref(layer_tensor(l, which)); };
    const auto li = static_cast<std::size_t>(l);
    ad::Var h = g.layer_norm(x, p(kLn1G), p(kLn1B));
    ad::Var q = g.affine(p(kWq), p(kBq), h, d);
    state.keys[li].push_back(g.affine(p(kWk), p(kBk), h, d));
    state.values[li].push_back(g.affine(p(kWv), p(kBv), h, d));
    ad::Var att = g.attention(q, state.keys[li], state.values[li], c.heads);
    x = g.add(x, g.affine(p(kWo), p(kBo), att, d));
    ad::Var h2 = g.layer_norm(x, p(kLn2G), p(kLn2B));
    ad::Var f = g.gelu(g.affine(p(kWfc), p(kBfc), h2, 4 * d));
    x = g.add(x, g.affine(p(kWproj), p(kBproj), f, d));
  }
  ++state.position;
  if (!want_output) return {};
  ad::Var hf = g.layer_norm(x, ref(final_tensor(c, kLnfG)), ref(final_tensor(c, kLnfB)));
  ad::Var logits = g.affine(ref(final_tensor(c, kWout)), ref(final_tensor(c, kBout)), hf, c.vocab_size);
  return g.log_softmax(logits);
}

std::vector<Distribution> forward_distributions(const ModelParameters& params, std::span<const InputRow> inputs,
                                                ad::Graph& graph, std::span<const int> positions) {
  if (static_cast<int>(inputs.size()) > params.config().context_len)
    throw ContractError(fmt::format("input length {} exceeds context_len {}", inputs.size(),
                                    params.config().context_len));
  ModelRun run(params, graph, nullptr);
  DecodingState st = run.start();
  std::vector<bool> want(inputs.size(), positions.empty());
  for (int p : positions) want.at(static_cast<std::size_t>(p)) = true;
  std::vector<Distribution> out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    ad::Var lp = run.step(st, inputs[i], want[i]);
    if (!want[i]) continue;
    Distribution probs(graph.value(lp).begin(), graph.value(lp).end());
    for (double& v : probs) v = std::exp(v);
    out.push_back(std::move(probs));
  }
  return out;
}

std::vector<Distribution> forward_distributions(const ModelParameters& params, std::span<const int> tokens) {
  ad::Graph graph(false);
  std::vector<InputRow> rows;
  rows.reserve(tokens.size());
  for (int t : tokens) rows.push_back(InputRow::id(t));
  return forward_distributions(params, rows, graph);
}

double teacher_forced_nll(const ModelParameters& params, const TrainingSequence& seq, Gradients* grads,
                          double grad_scale) {
  const std::size_t n = seq.size();
  bool any = false;
  for (std::size_t i = 1; i < n; ++i) any = any || seq.loss_mask[i];
  if (!any) {
    spdlog::warn("teacher_forced_nll: empty loss mask, returning 0");
    return 0.0;
  }
  ad::Graph g(grads != nullptr);
  ModelRun run(params, g, grads);
  DecodingState st = run.start();
  std::vector<ad::Var> terms;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const bool scored = seq.loss_mask[i + 1];
    ad::Var lp = run.step(st, InputRow::id(seq.token_ids[i]), scored);
    if (scored) terms.push_back(g.pick(lp, seq.token_ids[i + 1]));
  }
  ad::Var total = g.sum(terms);
  if (grads) g.backward(total, -grad_scale);
  return -g.scalar(total);
}

double sequence_log_prob(const ModelParameters& params, std::span<const int> tokens, int begin, int end) {
  ad::Graph g(false);
  ModelRun run(params, g, nullptr);
  DecodingState st = run.start();
  double acc = 0.0;
  for (int i = 0; i + 1 < static_cast<int>(tokens.size()) && i + 1 < end; ++i) {
    const bool scored = i + 1 >= begin;
    ad::Var lp = run.step(st, InputRow::id(tokens[static_cast<std::size_t>(i)]), scored);
    if (scored) acc += g.value(lp)[static_cast<std::size_t>(tokens[static_cast<std::size_t>(i + 1)])];
  }
  return acc;
}

int argmax_token(std::span<const double> probs) {
  int best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i)
    if (probs[i] > probs[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

DecodeResult decode(const ModelParameters& params, std::span<const int> prefix, int stop_token, int max_new,
                    DecodeMode mode, std::uint64_t seed) {
  if (prefix.empty()) throw ContractError("decode: empty prefix");
  if (static_cast<int>(prefix.size()) + max_new > params.config().context_len)
    throw ContractError("decode: prefix + max_new exceeds context_len");
  ad::Graph g(false);
  ModelRun run(params, g, nullptr);
  DecodingState st = run.start();
  ad::Var lp;
  for (std::size_t i = 0; i < prefix.size(); ++i) lp = run.step(st, InputRow::id(prefix[i]), i + 1 == prefix.size());
  Rng rng(seed);
  DecodeResult out;
  for (int n = 0; n < max_new; ++n) {
    std::vector<double> probs(g.value(lp).begin(), g.value(lp).end());
    for (double& v : probs) v = std::exp(v);
    const int next = mode == DecodeMode::kGreedy ? argmax_token(probs) : sample_categorical(probs, rng);
    if (next == stop_token) return out;
    out.tokens.push_back(next);
    if (n + 1 < max_new) lp = run.step(st, InputRow::id(next));
  }
  out.truncated = true;
  return out;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'V', 'C', 'K', 'P', 'T', '0', '1'};

template <class T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ParseError("checkpoint truncated");
  return v;
}

void put_vec(std::ofstream& out, const std::vector<double>& v) {
  put<std::uint64_t>(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> get_vec(std::ifstream& in) {
  const auto n = get<std::uint64_t>(in);
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw ParseError("checkpoint truncated");
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParameters& params,
                     const OptimizerState* optimizer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const ModelConfig& c = params.config();
  put<std::int32_t>(out, c.vocab_size);
  put<std::int32_t>(out, c.layers);
  put<std::int32_t>(out, c.heads);
  put<std::int32_t>(out, c.hidden);
  put<std::int32_t>(out, c.context_len);
  put<std::uint64_t>(out, c.seed);
  put<double>(out, c.init_std);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(params.role()));
  put<std::uint64_t>(out, params.tensors().size());
  for (const auto& t : params.tensors()) {
    put<std::uint64_t>(out, t.name.size());
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::int32_t>(out, t.rows);
    put<std::int32_t>(out, t.cols);
    put_vec(out, t.data);
  }
  const bool has_opt = optimizer && !optimizer->m.empty();
  put<std::uint8_t>(out, has_opt ? 1 : 0);
  if (has_opt) {
    put<std::int64_t>(out, optimizer->step);
    for (std::size_t i = 0; i < optimizer->m.size(); ++i) {
      put_vec(out, optimizer->m[i]);
      put_vec(out, optimizer->v[i]);
    }
  }
}

ModelParameters load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected,
                                OptimizerState* optimizer) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw ParseError(path.string() + ": not a checkpoint");
  ModelConfig c;
  c.vocab_size = get<std::int32_t>(in);
  c.layers = get<std::int32_t>(in);
  c.heads = get<std::int32_t>(in);
  c.hidden = get<std::int32_t>(in);
  c.context_len = get<std::int32_t>(in);
  c.seed = get<std::uint64_t>(in);
  c.init_std = get<double>(in);
  if (expected && !(*expected == c))
    throw ConfigError(fmt::format("checkpoint {} config mismatch: stored vocab={} layers={} heads={} hidden={} ctx={}",
                                  path.string(), c.vocab_size, c.layers, c.heads, c.hidden, c.context_len));
  const auto role = static_cast<ModelRole>(get<std::uint8_t>(in));
  ModelParameters params(c, role);
  const auto count = get<std::uint64_t>(in);
  if (count != params.tensors().size()) throw ParseError("checkpoint tensor count mismatch");
  for (auto& t : params.tensors()) {
    const auto len = get<std::uint64_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(len));
    const int rows = get<std::int32_t>(in);
    const int cols = get<std::int32_t>(in);
    if (name != t.name || rows != t.rows || cols != t.cols) throw ParseError("checkpoint tensor layout mismatch at " + name);
    t.data = get_vec(in);
  }
  const bool has_opt = get<std::uint8_t>(in) != 0;
  if (has_opt) {
    OptimizerState st;
    st.step = get<std::int64_t>(in);
    for (std::size_t i = 0; i < params.tensors().size(); ++i) {
      st.m.push_back(get_vec(in));
      st.v.push_back(get_vec(in));
    }
    if (optimizer) *optimizer = std::move(st);
  }
  return params;
}

}  // namespace semivar
