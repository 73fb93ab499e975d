#include "semivar/experiment.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "semivar/error.hpp"
#include "semivar/rng.hpp"

namespace semivar {

using nlohmann::json;

namespace {

enum SeedStream : std::uint64_t { kSeedP = 1, kSeedQ = 2, kSeedSplit = 3, kSeedTrain = 4 };

const char* sample_mode_name(SampleMode m) { return m == SampleMode::kGreedy ? "greedy" : "sample"; }

SampleMode sample_mode_from(const std::string& s) {
  if (s == "greedy") return SampleMode::kGreedy;
  if (s == "sample") return SampleMode::kSample;
  throw ConfigError("unknown sample mode '" + s + "' (greedy, sample)");
}

json to_json_tree(const ExperimentConfig& c) {
  const auto& g = c.data.generator;
  const auto& t = c.train;
  const auto& e = t.estimator;
  return json{
      {"seed", c.seed},
      {"init", c.init},
      {"data",
       {{"generator",
         {{"num_domains", g.num_domains},
          {"slots_per_domain", g.slots_per_domain},
          {"values_per_slot", g.values_per_slot},
          {"entities_per_domain", g.entities_per_domain},
          {"num_sessions", g.num_sessions},
          {"max_constraints", g.max_constraints},
          {"id_prefix", g.id_prefix}}},
        {"world_seed", c.data.world_seed},
        {"valid_sessions", c.data.valid_sessions},
        {"test_sessions", c.data.test_sessions},
        {"label_proportion", c.data.label_proportion},
        {"dir", c.data.dir}}},
      {"model",
       {{"layers", c.model.layers},
        {"heads", c.model.heads},
        {"hidden", c.model.hidden},
        {"context_len", c.model.context_len},
        {"init_std", c.model.init_std}}},
      {"train",
       {{"epochs_sup", t.epochs_sup},
        {"epochs_semi", t.epochs_semi},
        {"batch_size", t.batch_size},
        {"grad_accum", t.grad_accum},
        {"max_lr", t.max_lr},
        {"warmup_frac", t.warmup_frac},
        {"st_scheme", t.st_scheme ? json(to_string(*t.st_scheme)) : json(nullptr)},
        {"requery_db", t.requery_db},
        {"eval_every", t.eval_every},
        {"max_eval_sessions", t.max_eval_sessions},
        {"estimator",
         {{"kind", to_string(e.kind)},
          {"use_stt", e.use_stt},
          {"max_latent_len", e.max_latent_len},
          {"sample_mode", sample_mode_name(e.sample_mode)},
          {"prob_floor", e.prob_floor}}},
        {"optimizer",
         {{"beta1", t.optimizer.beta1},
          {"beta2", t.optimizer.beta2},
          {"eps", t.optimizer.eps},
          {"weight_decay", t.optimizer.weight_decay},
          {"clip_norm", t.optimizer.clip_norm}}},
        {"rollout",
         {{"max_belief_len", t.rollout.max_belief_len},
          {"max_act_len", t.rollout.max_act_len},
          {"max_response_len", t.rollout.max_response_len}}}}}};
}

std::string type_name(const json& v) {
  if (v.is_number_integer()) return "integer";
  return v.type_name();
}

// `value` may replace `base` at `key`: same JSON type, except that a float
// slot takes any number and the optional scheme slot (null) takes a string.
void check_assignable(const json& base, const json& value, const std::string& key) {
  bool ok = false;
  if (base.is_number_float()) ok = value.is_number();
  else if (base.is_number_unsigned()) ok = value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
  else if (base.is_number_integer()) ok = value.is_number_integer();
  else if (base.is_null() || key == "train.st_scheme") ok = value.is_null() || value.is_string();
  else ok = base.type() == value.type();
  if (!ok) throw ConfigError(fmt::format("config key '{}' expects {}, got {}", key, type_name(base), type_name(value)));
}

void merge_checked(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError(fmt::format("config section '{}' must be an object", prefix));
  for (const auto& [k, v] : patch.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (!base.contains(k)) throw ConfigError(fmt::format("unknown config key '{}'", key));
    json& slot = base[k];
    if (slot.is_object()) {
      merge_checked(slot, v, key);
    } else {
      check_assignable(slot, v, key);
      slot = v;
    }
  }
}

ExperimentConfig from_json_tree(const json& j) {
  ExperimentConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.init = j.at("init").get<std::string>();
  const auto& d = j.at("data");
  const auto& g = d.at("generator");
  c.data.generator.num_domains = g.at("num_domains").get<int>();
  c.data.generator.slots_per_domain = g.at("slots_per_domain").get<int>();
  c.data.generator.values_per_slot = g.at("values_per_slot").get<int>();
  c.data.generator.entities_per_domain = g.at("entities_per_domain").get<int>();
  c.data.generator.num_sessions = g.at("num_sessions").get<int>();
  c.data.generator.max_constraints = g.at("max_constraints").get<int>();
  c.data.generator.id_prefix = g.at("id_prefix").get<std::string>();
  c.data.world_seed = d.at("world_seed").get<std::uint64_t>();
  c.data.valid_sessions = d.at("valid_sessions").get<int>();
  c.data.test_sessions = d.at("test_sessions").get<int>();
  c.data.label_proportion = d.at("label_proportion").get<double>();
  c.data.dir = d.at("dir").get<std::string>();
  const auto& m = j.at("model");
  c.model.layers = m.at("layers").get<int>();
  c.model.heads = m.at("heads").get<int>();
  c.model.hidden = m.at("hidden").get<int>();
  c.model.context_len = m.at("context_len").get<int>();
  c.model.init_std = m.at("init_std").get<double>();
  const auto& t = j.at("train");
  c.train.epochs_sup = t.at("epochs_sup").get<int>();
  c.train.epochs_semi = t.at("epochs_semi").get<int>();
  c.train.batch_size = t.at("batch_size").get<int>();
  c.train.grad_accum = t.at("grad_accum").get<int>();
  c.train.max_lr = t.at("max_lr").get<double>();
  c.train.warmup_frac = t.at("warmup_frac").get<double>();
  if (t.at("st_scheme").is_null()) c.train.st_scheme.reset();
  else c.train.st_scheme = st_scheme_from_string(t.at("st_scheme").get<std::string>());
  c.train.requery_db = t.at("requery_db").get<bool>();
  c.train.eval_every = t.at("eval_every").get<int>();
  c.train.max_eval_sessions = t.at("max_eval_sessions").get<int>();
  const auto& e = t.at("estimator");
  c.train.estimator.kind = estimator_kind_from_string(e.at("kind").get<std::string>());
  c.train.estimator.use_stt = e.at("use_stt").get<bool>();
  c.train.estimator.max_latent_len = e.at("max_latent_len").get<int>();
  c.train.estimator.sample_mode = sample_mode_from(e.at("sample_mode").get<std::string>());
  c.train.estimator.prob_floor = e.at("prob_floor").get<double>();
  const auto& o = t.at("optimizer");
  c.train.optimizer.beta1 = o.at("beta1").get<double>();
  c.train.optimizer.beta2 = o.at("beta2").get<double>();
  c.train.optimizer.eps = o.at("eps").get<double>();
  c.train.optimizer.weight_decay = o.at("weight_decay").get<double>();
  c.train.optimizer.clip_norm = o.at("clip_norm").get<double>();
  const auto& r = t.at("rollout");
  c.train.rollout.max_belief_len = r.at("max_belief_len").get<int>();
  c.train.rollout.max_act_len = r.at("max_act_len").get<int>();
  c.train.rollout.max_response_len = r.at("max_response_len").get<int>();
  return c;
}

json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", what, e.what()));
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text << "\n";
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  model.layers = 2;
  model.heads = 2;
  model.hidden = 32;
  model.context_len = 256;
  train.estimator.max_latent_len = 24;
}

void ExperimentConfig::validate() const {
  const int pool = data.generator.num_sessions - data.valid_sessions - data.test_sessions;
  if (data.valid_sessions < 0 || data.test_sessions < 0 || pool < 1)
    throw ConfigError(fmt::format("{} sessions cannot hold {} validation and {} test sessions",
                                  data.generator.num_sessions, data.valid_sessions, data.test_sessions));
  if (!(data.label_proportion > 0.0 && data.label_proportion <= 1.0))
    throw ConfigError(fmt::format("label proportion {} outside (0, 1]", data.label_proportion));
  train.validate();
  ModelConfig m = model;
  m.vocab_size = 16;
  m.validate();
}

std::string config_to_json(const ExperimentConfig& cfg) { return to_json_tree(cfg).dump(2); }

ExperimentConfig config_from_json(const std::string& text) {
  json base = to_json_tree(ExperimentConfig{});
  merge_checked(base, parse_json_text(text, "config"), "");
  ExperimentConfig c = from_json_tree(base);
  c.validate();
  return c;
}

ExperimentConfig resolve_config(const std::optional<std::filesystem::path>& file,
                                const std::vector<std::string>& overrides) {
  json tree = to_json_tree(ExperimentConfig{});
  if (file) {
    std::ifstream f(*file);
    if (!f) throw ConfigError("cannot read config file " + file->string());
    std::stringstream ss;
    ss << f.rdbuf();
    merge_checked(tree, parse_json_text(ss.str(), file->string()), "");
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + ov + "' is not key=value");
    const std::string key = ov.substr(0, eq);
    const std::string raw = ov.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;
    }
    json patch = value;
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1))
      parts.push_back(rest.substr(0, pos));
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    merge_checked(tree, patch, "");
  }
  ExperimentConfig c = from_json_tree(tree);
  c.validate();
  return c;
}

ExperimentData prepare_data(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentData d;
  std::vector<DialogSession> corpus;
  if (!cfg.data.dir.empty()) {
    const std::filesystem::path dir = cfg.data.dir;
    d.world = load_world(dir / "ontology.json", dir / "db.json");
    d.train = load_corpus(dir / "train.jsonl");
    d.valid = load_corpus(dir / "valid.jsonl");
    d.test = load_corpus(dir / "test.jsonl");
    corpus = d.train;
    corpus.insert(corpus.end(), d.valid.begin(), d.valid.end());
    corpus.insert(corpus.end(), d.test.begin(), d.test.end());
  } else {
    d.world = build_world(cfg.data.generator, cfg.data.world_seed);
    corpus = generate_corpus(d.world, cfg.data.generator, cfg.data.world_seed);
    const auto n_train = corpus.size() - static_cast<std::size_t>(cfg.data.valid_sessions + cfg.data.test_sessions);
    const auto n_valid = static_cast<std::size_t>(cfg.data.valid_sessions);
    d.train.assign(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(n_train));
    d.valid.assign(corpus.begin() + static_cast<std::ptrdiff_t>(n_train),
                   corpus.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
    d.test.assign(corpus.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), corpus.end());
  }
  d.vocab = build_vocabulary(d.world.ontology, corpus);
  d.split = split_by_label_proportion(d.train, cfg.data.label_proportion, derive_seed(cfg.seed, kSeedSplit));
  return d;
}

void write_data(const std::filesystem::path& dir, const ExperimentData& data) {
  std::filesystem::create_directories(dir);
  save_world(dir / "ontology.json", dir / "db.json", data.world);
  save_corpus(dir / "train.jsonl", data.train);
  save_corpus(dir / "valid.jsonl", data.valid);
  save_corpus(dir / "test.jsonl", data.test);
}

ModelConfig model_config(const ExperimentConfig& cfg, const Vocabulary& vocab, ModelRole role) {
  ModelConfig m = cfg.model;
  m.vocab_size = vocab.size();
  m.seed = derive_seed(cfg.seed, role == ModelRole::kGenerative ? kSeedP : kSeedQ);
  return m;
}

int matched_supervised_epochs(const TrainConfig& cfg, const CorpusSplit& split) {
  if (split.unlabeled.empty() || split.labeled.empty()) return cfg.epochs_semi;
  const auto b = static_cast<std::size_t>(cfg.batch_size);
  const double steps = static_cast<double>((split.unlabeled.size() + b - 1) / b);
  const double seen = static_cast<double>(cfg.epochs_semi) * steps * static_cast<double>(b);
  return std::max(1, static_cast<int>(std::lround(seen / static_cast<double>(split.labeled.size()))));
}

const char* to_string(Arm arm) {
  switch (arm) {
    case Arm::kSupervised: return "supervised";
    case Arm::kSupOnlyMatched: return "SupOnly";
    case Arm::kSemiVl: return "Semi-VL";
    case Arm::kSemiSt: return "Semi-ST";
  }
  return "?";
}

ModelPair fresh_models(const ExperimentConfig& cfg, const Vocabulary& vocab) {
  return {ModelParameters(model_config(cfg, vocab, ModelRole::kGenerative), ModelRole::kGenerative),
          ModelParameters(model_config(cfg, vocab, ModelRole::kInference), ModelRole::kInference)};
}

ModelPair load_models(const std::filesystem::path& run_dir, const ExperimentConfig& cfg, const Vocabulary& vocab) {
  // the stored seeds belong to the source run; only the shapes must agree
  auto shape_check = [&](const ModelParameters& m, ModelRole role) {
    ModelConfig want = model_config(cfg, vocab, role);
    want.seed = m.config().seed;
    if (!(m.config() == want))
      throw ConfigError(fmt::format("checkpoint in {} does not match the configured model", run_dir.string()));
  };
  ModelPair out{load_checkpoint(run_dir / "p.ckpt", std::nullopt), load_checkpoint(run_dir / "q.ckpt", std::nullopt)};
  shape_check(out.p, ModelRole::kGenerative);
  shape_check(out.q, ModelRole::kInference);
  return out;
}

ArmOutcome run_arm(Arm arm, ModelPair& models, const ExperimentConfig& cfg, const ExperimentData& data,
                   const std::optional<std::filesystem::path>& run_dir) {
  cfg.validate();
  if (arm == Arm::kSemiSt && !cfg.train.st_scheme)
    throw ConfigError("Semi-ST needs train.st_scheme (response_stt, joint_stt, response, joint)");
  if (run_dir) {
    std::filesystem::create_directories(*run_dir);
    for (const char* stale : {"metrics.jsonl", "batch_log.jsonl"}) std::filesystem::remove(*run_dir / stale);
    write_text(*run_dir / "config.json", config_to_json(cfg));
  }
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, kSeedTrain);
  if (arm == Arm::kSupOnlyMatched) tc.epochs_sup = matched_supervised_epochs(cfg.train, data.split);
  TrainContext ctx{data.world, data.vocab, data.valid, run_dir};

  ArmOutcome out;
  out.arm = arm;
  switch (arm) {
    case Arm::kSupervised:
    case Arm::kSupOnlyMatched: out.record = supervised_train(models.p, models.q, data.split.labeled, ctx, tc); break;
    case Arm::kSemiVl: out.record = semi_supervised_train(models.p, models.q, data.split, ctx, tc); break;
    case Arm::kSemiSt: out.record = self_train(models.p, data.split, ctx, tc); break;
  }
  out.test = evaluate(models.p, data.test, data.world, data.vocab, cfg.train.rollout);
  spdlog::info("{}: test combined {:.2f} latent-EM {:.2f}", to_string(arm), out.test.combined,
               out.test.latent_exact_match);

  if (run_dir) {
    save_checkpoint(*run_dir / "p.ckpt", models.p);
    save_checkpoint(*run_dir / "q.ckpt", models.q);
    write_text(*run_dir / "run.json", out.record.to_json());
    json summary{{"arm", to_string(arm)},
                 {"seed", cfg.seed},
                 {"label_proportion", cfg.data.label_proportion},
                 {"st_scheme", cfg.train.st_scheme ? json(to_string(*cfg.train.st_scheme)) : json(nullptr)},
                 {"labeled_sessions", data.split.labeled.size()},
                 {"unlabeled_sessions", data.split.unlabeled.size()},
                 {"supervised_epochs", tc.epochs_sup},
                 {"test", json::parse(out.test.to_json())}};
    write_text(*run_dir / "summary.json", summary.dump(2));
  }
  return out;
}

}  // namespace semivar
