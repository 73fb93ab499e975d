// semivar: corpus generation, training arms, evaluation, verification and
// plotting from the command line.

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "semivar/error.hpp"
#include "semivar/evaluation.hpp"
#include "semivar/experiment.hpp"
#include "semivar/verification.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace semivar;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr const char* kOutRootEnv = "SEMIVAR_OUT_ROOT";

struct CommonArgs {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
};

struct Extra {
  std::string data;
  std::string init;
  std::string scheme;
  bool matched = false;
  std::string checkpoint;
  std::string split = "test";
  std::vector<std::string> runs;
  std::string metric = "combined";
  bool quick = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, fmt::format("output directory (default ${}/<command>-seed<seed>)", kOutRootEnv));
  cmd->add_option("--seed", a.seed, "run seed (overrides the config)");
  cmd->add_option("--set", a.overrides, "override a config value, e.g. --set train.max_lr=1e-3")
      ->type_name("KEY=VALUE");
}

fs::path default_out(const std::string& command, std::uint64_t seed) {
  const char* root = std::getenv(kOutRootEnv);
  return fs::path(root && *root ? root : "runs") / fmt::format("{}-seed{}", command, seed);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return json::parse(ss.str());
}

int run_command(const std::string& name, const CommonArgs& a, const Extra& x, bool seed_given) {
  std::vector<std::string> overrides = a.overrides;
  if (!x.data.empty()) overrides.push_back("data.dir=" + json(fs::absolute(x.data).string()).dump());
  if (!x.init.empty()) overrides.push_back("init=" + json(fs::absolute(x.init).string()).dump());
  if (!x.scheme.empty()) overrides.push_back("train.st_scheme=" + json(x.scheme).dump());
  if (seed_given) overrides.push_back(fmt::format("seed={}", a.seed));
  const std::optional<fs::path> file = a.config.empty() ? std::nullopt : std::optional<fs::path>(a.config);

  if (name == "verify") {
    const fs::path out = a.out.empty() ? default_out(name, 0) : fs::path(a.out);
    VerifyOptions opts;
    if (x.quick) opts.variance_samples = 200;
    const ProbeReport report = run_verification(opts);
    write_text(out / "probe_report.json", report.to_json());
    write_text(out / "summary.txt", report.summary());
    std::cout << report.summary() << "\n";
    return report.passed ? kExitOk : kExitFailure;
  }

  if (name == "plot") {
    const fs::path out = a.out.empty() ? default_out(name, 0) / "scores.svg" : fs::path(a.out);
    std::map<std::string, PlotSeries> series;
    for (const auto& run : x.runs) {
      const json s = read_json(fs::path(run) / "summary.json");
      std::string label = s.at("arm").get<std::string>();
      if (!s.at("st_scheme").is_null() && label == "Semi-ST") label += " (" + s.at("st_scheme").get<std::string>() + ")";
      const json& t = s.at("test");
      if (!t.contains(x.metric) || !t.at(x.metric).is_number())
        throw ConfigError(fmt::format("{} has no numeric test metric '{}'", run, x.metric));
      auto& ser = series[label];
      ser.label = label;
      ser.points.emplace_back(100.0 * s.at("label_proportion").get<double>(), t.at(x.metric).get<double>());
    }
    std::vector<PlotSeries> list;
    for (auto& [_, s] : series) {
      std::sort(s.points.begin(), s.points.end());
      list.push_back(std::move(s));
    }
    write_svg_plot(out, list, fmt::format("{} vs label proportion", x.metric), "labeled sessions (%)",
                   x.metric);
    std::cout << out.string() << "\n";
    return kExitOk;
  }

  const ExperimentConfig cfg = resolve_config(file, overrides);
  const fs::path out = a.out.empty() ? default_out(name, cfg.seed) : fs::path(a.out);
  fs::create_directories(out);

  if (name == "synth" || name == "split" || name == "eval") write_text(out / "config.json", config_to_json(cfg));
  const ExperimentData data = prepare_data(cfg);

  if (name == "synth") {
    write_data(out, data);
    std::cout << fmt::format("{} train / {} valid / {} test sessions, vocabulary {} -> {}\n", data.train.size(),
                             data.valid.size(), data.test.size(), data.vocab.size(), out.string());
    return kExitOk;
  }
  if (name == "split") {
    save_corpus(out / "labeled.jsonl", data.split.labeled);
    save_corpus(out / "unlabeled.jsonl", data.split.unlabeled);
    std::cout << fmt::format("{} labeled / {} unlabeled -> {}\n", data.split.labeled.size(),
                             data.split.unlabeled.size(), out.string());
    return kExitOk;
  }
  if (name == "eval") {
    if (x.checkpoint.empty()) throw ConfigError("eval needs --checkpoint RUN_DIR");
    ModelPair m = load_models(x.checkpoint, cfg, data.vocab);
    const auto& sessions = x.split == "valid" ? data.valid : x.split == "train" ? data.train : data.test;
    std::vector<RolloutResult> rollouts;
    const MetricReport rep = evaluate(m.p, sessions, data.world, data.vocab, cfg.train.rollout, &rollouts);
    write_text(out / "eval.json", rep.to_json());
    std::cout << rep.table() << "\n";
    return kExitOk;
  }

  Arm arm = Arm::kSupervised;
  if (name == "train-sup") arm = x.matched ? Arm::kSupOnlyMatched : Arm::kSupervised;
  else if (name == "train-semi-vl") arm = Arm::kSemiVl;
  else arm = Arm::kSemiSt;
  ModelPair models = cfg.init.empty() ? fresh_models(cfg, data.vocab) : load_models(cfg.init, cfg, data.vocab);
  const ArmOutcome res = run_arm(arm, models, cfg, data, out);
  std::cout << res.test.table() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised variational training of latent-state dialog models"};
  app.require_subcommand(0, 1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "debug logging");

  CommonArgs common;
  Extra extra;
  std::map<std::string, CLI::App*> cmds;
  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* c = app.add_subcommand(name, help);
    add_common(c, common);
    cmds[name] = c;
    return c;
  };
  add("synth", "generate the synthetic world and corpus splits");
  add("split", "write the labeled/unlabeled partition of the training pool")
      ->add_option("--data", extra.data, "directory written by synth");
  for (const char* n : {"train-sup", "train-semi-vl", "train-semi-st"}) {
    CLI::App* c = add(n, n == std::string("train-sup") ? "supervised training on labeled sessions (SupOnly)"
                      : n == std::string("train-semi-vl") ? "variational semi-supervised training (Semi-VL)"
                                                          : "self-training baseline (Semi-ST)");
    c->add_option("--data", extra.data, "directory written by synth");
    c->add_option("--init", extra.init, "run directory to start from")->check(CLI::ExistingDirectory);
  }
  cmds["train-sup"]->add_flag("--matched", extra.matched, "as many labeled updates as the semi phase gets");
  cmds["train-semi-st"]
      ->add_option("--scheme", extra.scheme, "response_stt, joint_stt, response or joint")
      ->check(CLI::IsMember({"response_stt", "joint_stt", "response", "joint"}));
  CLI::App* ev = add("eval", "roll out a trained generative model and score it");
  ev->add_option("--data", extra.data, "directory written by synth");
  ev->add_option("--checkpoint", extra.checkpoint, "run directory with p.ckpt")->check(CLI::ExistingDirectory);
  ev->add_option("--split", extra.split, "train, valid or test")->check(CLI::IsMember({"train", "valid", "test"}));
  add("verify", "enumeration, gradient, variance and graph-size checks")
      ->add_flag("--quick", extra.quick, "fewer variance samples");
  add("plot", "score vs label proportion over run directories")->add_option("runs", extra.runs, "run directories")
      ->check(CLI::ExistingDirectory);
  cmds["plot"]->add_option("--metric", extra.metric, "summary test metric");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help() << "\n";
    return kExitUsage;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  CLI::App* sub = app.get_subcommands().front();
  const bool seed_given = sub->count("--seed") > 0;
  try {
    return run_command(sub->get_name(), common, extra, seed_given);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}
