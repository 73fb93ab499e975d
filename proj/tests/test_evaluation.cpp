#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <set>
#include <unordered_map>

#include "semivar/error.hpp"
#include "semivar/evaluation.hpp"
#include "semivar/training.hpp"

using namespace semivar;

namespace {

struct Data {
  World world;
  std::vector<DialogSession> corpus;
  Vocabulary vocab;
};

const Data& data() {
  static const Data d = [] {
    GeneratorConfig g;
    g.num_sessions = 80;
    Data out;
    out.world = build_world(g, 2);
    out.corpus = generate_corpus(out.world, g, 2);
    out.vocab = build_vocabulary(out.world.ontology, out.corpus);
    return out;
  }();
  return d;
}

std::vector<DialogSession> first(std::size_t n) {
  return {data().corpus.begin(), data().corpus.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::vector<RolloutResult> oracle_all(const std::vector<DialogSession>& s) {
  std::vector<RolloutResult> out;
  for (const auto& x : s) out.push_back(oracle_rollout(x, data().world));
  return out;
}

bool has(const Tokens& t, const std::string& x) { return std::find(t.begin(), t.end(), x) != t.end(); }

// ---- rule oracle, written against raw tokens rather than the parsers

// belief "[domain] slot v v [domain] ..." -> domain -> slot -> value (values
// may span tokens: everything up to the next slot or domain token)
std::map<std::string, std::map<std::string, std::string>> raw_belief(const Tokens& b) {
  const auto& ont = data().world.ontology;
  std::map<std::string, std::map<std::string, std::string>> out;
  std::string domain, slot;
  for (const auto& t : strip_delimiters(b)) {
    if (t.size() > 2 && t.front() == '[' &&
        std::find(ont.domains.begin(), ont.domains.end(), t.substr(1, t.size() - 2)) != ont.domains.end()) {
      domain = t.substr(1, t.size() - 2);
      out[domain];
      slot.clear();
    } else if (ont.values.count(t)) {
      slot = t;
      out[domain][slot];
    } else if (!slot.empty()) {
      auto& v = out[domain][slot];
      v += v.empty() ? t : " " + t;
    }
  }
  return out;
}

std::optional<Record> raw_entity(const RolloutTurn& t) {
  bool offers = has(t.response, "[value_name]");
  const Tokens a = strip_delimiters(t.act);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != "[inform]") continue;
    for (std::size_t j = i + 1; j < a.size() && a[j].front() != '['; ++j) offers = offers || a[j] == "name";
  }
  if (!offers) return std::nullopt;
  const auto bel = raw_belief(t.belief);
  if (bel.size() != 1) return Record{};
  const auto& [domain, cons] = *bel.begin();
  const auto* table = data().world.db.find(domain);
  if (!table) return Record{};
  for (const auto& e : table->entities) {
    bool ok = true;
    for (const auto& [s, v] : cons) ok = ok && e.count(s) && e.at(s) == v;
    if (ok) return e;
  }
  return Record{};
}

bool raw_satisfies(const Record& e, const std::string& domain, const std::map<std::string, std::string>& cons) {
  if (e.empty()) return false;
  const auto& ents = data().world.db.find(domain)->entities;
  if (std::find(ents.begin(), ents.end(), e) == ents.end()) return false;
  for (const auto& [s, v] : cons)
    if (!e.count(s) || e.at(s) != v) return false;
  return true;
}

// Random damage to an oracle rollout: swapped belief values, dropped name or
// request placeholders, emptied acts.
RolloutResult perturb(RolloutResult r, std::mt19937_64& rng) {
  const auto& ont = data().world.ontology;
  for (auto& t : r.turns) {
    switch (rng() % 5) {
      case 0: {
        for (auto& tok : t.belief)
          for (const auto& [slot, vals] : ont.values)
            if (std::find(vals.begin(), vals.end(), tok) != vals.end() && vals.size() > 1) {
              tok = vals[rng() % vals.size()];
              break;
            }
        break;
      }
      case 1: std::erase(t.response, "[value_name]"); break;
      case 2: {
        Tokens kept;
        for (const auto& tok : t.response)
          if (!(tok.size() > 7 && tok.rfind("[value_", 0) == 0) || rng() % 2) kept.push_back(tok);
        t.response = kept;
        break;
      }
      case 3: t.act = {"[general]", "[bye]", std::string(tok::kEosA)}; break;
      default: break;
    }
  }
  return r;
}

// Independent corpus BLEU: n-grams keyed by joined strings.
double reference_bleu(const std::vector<Tokens>& hyp, const std::vector<Tokens>& ref) {
  double match[4] = {}, count[4] = {}, hl = 0, rl = 0;
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    const Tokens h = strip_delimiters(hyp[i]), r = strip_delimiters(ref[i]);
    hl += static_cast<double>(h.size());
    rl += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      std::unordered_map<std::string, int> rc;
      for (std::size_t k = 0; k + n <= r.size(); ++k) {
        std::string key;
        for (std::size_t j = k; j < k + n; ++j) key += r[j] + "\x1f";
        ++rc[key];
      }
      for (std::size_t k = 0; k + n <= h.size(); ++k) {
        std::string key;
        for (std::size_t j = k; j < k + n; ++j) key += h[j] + "\x1f";
        count[n - 1] += 1;
        auto it = rc.find(key);
        if (it != rc.end() && it->second > 0) {
          --it->second;
          match[n - 1] += 1;
        }
      }
    }
  }
  double s = 0;
  for (int n = 0; n < 4; ++n) s += std::log(match[n] / count[n]) / 4.0;
  const double bp = hl < rl ? std::exp(1.0 - rl / hl) : 1.0;
  return 100.0 * bp * std::exp(s);
}

}  // namespace

TEST_CASE("oracle rollouts score 100 on every metric except BLEU's identity") {
  const auto s = first(40);
  const auto m = score_rollouts(oracle_all(s), s, data().world);
  CHECK(m.inform == 100.0);
  CHECK(m.success == 100.0);
  REQUIRE(m.match.has_value());
  CHECK(*m.match == 100.0);
  CHECK(m.req_suc == 100.0);
  CHECK(m.bleu == doctest::Approx(100.0));
  CHECK(m.latent_exact_match == 100.0);
  CHECK(m.joint_goal_accuracy == 100.0);
  CHECK(m.combined == doctest::Approx(200.0));
}

TEST_CASE("one of two sessions informed gives 50") {
  const auto s = first(2);
  auto r = oracle_all(s);
  for (auto& t : r[1].turns) {
    std::erase(t.response, "[value_name]");
    t.act = {"[general]", "[bye]", std::string(tok::kEosA)};
  }
  const auto is = inform_success(r, s, data().world);
  CHECK(is.inform == 50.0);
  CHECK(is.success == 50.0);
}

TEST_CASE("inform/success and match/req-suc agree with raw-token rule oracles") {
  std::mt19937_64 rng(11);
  const auto s = first(20);
  double lo = 100.0, hi = 0.0;
  for (int round = 0; round < 10; ++round) {
    std::vector<RolloutResult> r;
    for (const auto& x : s) r.push_back(perturb(oracle_rollout(x, data().world), rng));
    double inform = 0, success = 0;
    std::size_t entity_turns = 0, matched = 0, attrs = 0, hits = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const Goal& g = *s[i].goal;
      std::optional<Record> last;
      for (const auto& t : r[i].turns)
        if (auto e = raw_entity(t)) last = e;
      std::map<std::string, std::string> cons(g.constraints.begin(), g.constraints.end());
      const bool inf = last && raw_satisfies(*last, g.domain, cons);
      bool suc = inf;
      for (const auto& req : g.requests) {
        bool seen = false;
        for (const auto& t : r[i].turns) seen = seen || has(t.response, "[value_" + req + "]");
        suc = suc && seen;
      }
      inform += inf;
      success += suc;
      for (std::size_t t = 0; t < s[i].turns.size(); ++t) {
        if (auto e = raw_entity(r[i].turns[t])) {
          ++entity_turns;
          bool ok = false;
          for (const auto& [d, c] : raw_belief(s[i].turns[t].belief)) ok = ok || raw_satisfies(*e, d, c);
          matched += ok;
        }
        const Tokens a = strip_delimiters(s[i].turns[t].act);
        for (std::size_t k = 0; k < a.size(); ++k) {
          if (a[k] != "[inform]") continue;
          for (std::size_t j = k + 1; j < a.size() && a[j].front() != '['; ++j) {
            ++attrs;
            hits += has(r[i].turns[t].response, "[value_" + a[j] + "]");
          }
        }
      }
    }
    const auto is = inform_success(r, s, data().world);
    const auto mr = match_reqsuc(r, s, data().world);
    CHECK(is.inform == doctest::Approx(100.0 * inform / 20.0));
    CHECK(is.success == doctest::Approx(100.0 * success / 20.0));
    CHECK(is.inform >= is.success);
    lo = std::min(lo, is.success);
    hi = std::max(hi, is.inform);
    CHECK(mr.entity_turns == entity_turns);
    CHECK(mr.attributes == attrs);
    if (entity_turns) CHECK(*mr.match == doctest::Approx(100.0 * static_cast<double>(matched) / static_cast<double>(entity_turns)));
    CHECK(mr.req_suc == doctest::Approx(100.0 * static_cast<double>(hits) / static_cast<double>(attrs)));
  }
  // the perturbations produce both failures and successes
  CHECK(lo < 100.0);
  CHECK(hi > 0.0);
}

TEST_CASE("match scores each entity turn against its own constraints") {
  // Two offer turns in one domain with different constraints: the second
  // offers the first turn's entity.
  const auto& c = data().corpus;
  const auto offer = [](const DialogSession& s) -> std::optional<DialogTurn> {
    for (const auto& t : s.turns)
      if (has(t.response, "[value_name]")) return t;
    return std::nullopt;
  };
  bool found = false;
  for (std::size_t i = 0; i < c.size() && !found; ++i)
    for (std::size_t j = 0; j < c.size() && !found; ++j) {
      const auto a = offer(c[i]), b = offer(c[j]);
      if (!a || !b || i == j || c[i].goal->domain != c[j].goal->domain) continue;
      DialogSession s;
      s.id = "two_offers";
      s.turns = {*a, *b};
      RolloutResult r = oracle_rollout(s, data().world);
      r.turns[1].belief = a->belief;
      const auto e = offered_entity(r.turns[1], data().world);
      const auto truth = parse_belief(b->belief, data().world.ontology);
      bool ok_b = false;
      for (const auto& [d, cons] : truth->domains)
        for (const auto& rec : db_query(*truth, data().world.db)) ok_b = ok_b || rec == *e;
      if (ok_b) continue;
      found = true;
      const auto mr = match_reqsuc({r}, {s}, data().world);
      CHECK(mr.entity_turns == 2);
      CHECK(*mr.match == doctest::Approx(50.0));
    }
  CHECK(found);
}

TEST_CASE("BLEU: identity, disjoint, independent implementation") {
  const std::vector<Tokens> refs = {
      split_tokens("the [value_name] is a nice place in the [value_area] <eos_r>"),
      split_tokens("i have [value_choice] options for you . what price range would you like ?"),
      split_tokens("its phone number is [value_phone] and the address is [value_address] ."),
      split_tokens("is there anything else i can help you with today ?"),
      split_tokens("you are welcome , goodbye ."),
  };
  const std::vector<Tokens> hyps = {
      split_tokens("the [value_name] is in the [value_area] <eos_r>"),
      split_tokens("i have [value_choice] options . what area would you like ?"),
      split_tokens("the phone number is [value_phone] and the address is [value_address] ."),
      split_tokens("anything else i can help you with ?"),
      split_tokens("you are welcome , goodbye ."),
  };
  CHECK(bleu(refs, refs) == doctest::Approx(100.0));
  CHECK(bleu({split_tokens("a b c d e")}, {split_tokens("v w x y z")}) == 0.0);
  const double got = bleu(hyps, refs);
  CHECK(got == doctest::Approx(reference_bleu(hyps, refs)).epsilon(1e-12));
  CHECK(got > 0.0);
  CHECK(got < 100.0);
  CHECK_THROWS_AS(bleu(hyps, {refs[0]}), ContractError);
}

TEST_CASE("combined-score fixtures") {
  CHECK(combined_score(90.29, 81.58, 17.27) == doctest::Approx(103.21).epsilon(0.0001));
  CHECK(std::abs(combined_score(90.27, 81.44, 17.48) - 103.33) <= 0.01);
  CHECK(std::abs(combined_crosswoz(63.93, 77.33, 37.31) - 107.94) <= 0.01);
  std::ifstream f(std::filesystem::path(SEMIVAR_FIXTURE_DIR) / "combined_rows.json");
  const auto fixture = nlohmann::json::parse(f);
  int inconsistent = 0;
  for (const auto& r : fixture.at("rows")) {
    const double bleu_v = r.at("bleu").get<double>();
    const double got = r.at("formula") == "match_reqsuc"
                           ? combined_crosswoz(r.at("match").get<double>(), r.at("req_suc").get<double>(), bleu_v)
                           : combined_score(r.at("inform").get<double>(), r.at("success").get<double>(), bleu_v);
    const double gap = std::abs(got - r.at("combined").get<double>());
    INFO(r.at("label").get<std::string>());
    if (r.value("source_inconsistent", false)) {
      CHECK(gap > 0.01);
      ++inconsistent;
    } else {
      CHECK(gap <= 0.01);
    }
  }
  CHECK(inconsistent == 1);
}

TEST_CASE("latent normalization is order-invariant and matches a set comparison") {
  const auto& ont = data().world.ontology;
  std::mt19937_64 rng(5);
  int checked = 0;
  for (const auto& s : data().corpus) {
    for (const auto& t : s.turns) {
      const auto bel = parse_belief(t.belief, ont);
      REQUIRE(bel.has_value());
      if (bel->domains.empty()) continue;
      // rebuild with shuffled pairs and, sometimes, one changed value
      auto pairs = bel->domains.front().second;
      std::shuffle(pairs.begin(), pairs.end(), rng);
      const bool change = rng() % 2 && !pairs.empty();
      if (change) {
        auto& [slot, value] = pairs.front();
        const auto& vals = ont.values.at(slot);
        value = vals[(std::find(vals.begin(), vals.end(), value) - vals.begin() + 1) % static_cast<long>(vals.size())];
      }
      Tokens rebuilt{domain_token(bel->domains.front().first)};
      for (const auto& [slot, value] : pairs) {
        rebuilt.push_back(slot);
        for (const auto& v : split_tokens(value)) rebuilt.push_back(v);
      }
      rebuilt.push_back(std::string(tok::kEosB));
      std::set<std::pair<std::string, std::string>> a(bel->domains.front().second.begin(),
                                                      bel->domains.front().second.end());
      std::set<std::pair<std::string, std::string>> b(pairs.begin(), pairs.end());
      const bool set_equal = a == b && bel->domains.size() == 1;
      CHECK((normalize_belief_tokens(rebuilt, ont) == normalize_belief_tokens(t.belief, ont)) == set_equal);
      ++checked;
    }
    if (checked >= 100) break;
  }
  CHECK(checked >= 100);

  const Tokens act1 = split_tokens("[hotel] [inform] name area [hotel] [request] price <eos_a>");
  const Tokens act2 = split_tokens("[hotel] [inform] area name [hotel] [request] price <eos_a>");
  if (std::find(ont.domains.begin(), ont.domains.end(), "hotel") != ont.domains.end())
    CHECK(normalize_act_tokens(act1, ont) == normalize_act_tokens(act2, ont));
  CHECK(normalize_belief_tokens(split_tokens("nonsense words <eos_b>"), ont).rfind("<unparsed>", 0) == 0);
}

TEST_CASE("rollout contracts: executed db bucket, generated history only") {
  ModelConfig mc;
  mc.vocab_size = data().vocab.size();
  mc.hidden = 16;
  mc.layers = 1;
  mc.heads = 2;
  mc.context_len = 256;
  mc.seed = 3;
  mc.init_std = 0.3;
  const ModelParameters p(mc, ModelRole::kGenerative);
  RolloutConfig rc;
  rc.max_belief_len = 6;
  rc.max_act_len = 4;
  rc.max_response_len = 6;
  for (const auto& s : first(5)) {
    const auto r = rollout(p, s, data().world, data().vocab, rc);
    REQUIRE(r.turns.size() == s.turns.size());
    for (const auto& t : r.turns) {
      const auto n = db_query_tokens(t.belief, data().world.ontology, data().world.db).size();
      CHECK(t.db.front() == db_bucket(n));
      CHECK(t.db_matches == n);
    }
    DialogSession corrupted = s;
    for (auto& t : corrupted.turns) {
      t.response = {"[value_name]", std::string(tok::kEosR)};
      t.belief = {std::string(tok::kEosB)};
      t.act = {std::string(tok::kEosA)};
    }
    const auto r2 = rollout(p, corrupted, data().world, data().vocab, rc);
    for (std::size_t t = 0; t < r.turns.size(); ++t) {
      CHECK(r2.turns[t].belief == r.turns[t].belief);
      CHECK(r2.turns[t].act == r.turns[t].act);
      CHECK(r2.turns[t].response == r.turns[t].response);
    }
  }
}

TEST_CASE("a model trained on one session reproduces it") {
  const DialogSession s = data().corpus[0];
  ModelConfig mc;
  mc.vocab_size = data().vocab.size();
  mc.hidden = 32;
  mc.layers = 2;
  mc.heads = 2;
  mc.context_len = 256;
  mc.seed = 7;
  ModelParameters p(mc, ModelRole::kGenerative), q(mc, ModelRole::kInference);
  TrainConfig cfg;
  cfg.epochs_sup = 150;
  cfg.batch_size = 1;
  cfg.eval_every = 0;
  cfg.max_lr = 1e-2;
  cfg.warmup_frac = 0.1;
  TrainContext ctx{data().world, data().vocab, {}, std::nullopt};
  supervised_train(p, q, {s}, ctx, cfg);
  const auto r = rollout(p, s, data().world, data().vocab);
  REQUIRE(r.turns.size() == s.turns.size());
  for (std::size_t t = 0; t < s.turns.size(); ++t) {
    CHECK(r.turns[t].belief == s.turns[t].belief);
    CHECK(r.turns[t].act == s.turns[t].act);
    CHECK(r.turns[t].response == s.turns[t].response);
  }
}

TEST_CASE("metric report and plot output") {
  const auto s = first(3);
  const auto m = score_rollouts(oracle_all(s), s, data().world);
  const auto j = nlohmann::json::parse(m.to_json());
  CHECK(j.at("inform").get<double>() == 100.0);
  CHECK(m.table().find("inform") != std::string::npos);
  const auto path = std::filesystem::temp_directory_path() / "semivar_tests" / "plot.svg";
  std::filesystem::create_directories(path.parent_path());
  write_svg_plot(path, {{"a", {{10, 50}, {50, 80}}}, {"b", {{10, 60}}}}, "t", "x", "y");
  std::ifstream f(path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  CHECK(text.rfind("<svg", 0) == 0);
  CHECK(text.find("polyline") != std::string::npos);
}
