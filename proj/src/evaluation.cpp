#include "semivar/evaluation.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "semivar/error.hpp"

namespace semivar {

namespace {

int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

bool contains(const Tokens& toks, const std::string& t) { return std::find(toks.begin(), toks.end(), t) != toks.end(); }

void check_aligned(const std::vector<RolloutResult>& rollouts, const std::vector<DialogSession>& sessions) {
  if (rollouts.size() != sessions.size()) throw ContractError("rollouts and sessions differ in length");
  for (std::size_t i = 0; i < sessions.size(); ++i)
    if (rollouts[i].session_id != sessions[i].id || rollouts[i].turns.size() != sessions[i].turns.size())
      throw ContractError("rollout " + rollouts[i].session_id + " does not match session " + sessions[i].id);
}

struct Generator {
  ModelRun& run;
  ad::Graph& g;
  DecodingState st;

  // Feeds `open`, then extends greedily until `close`; a forced `close` after
  // max_len content tokens marks truncation.
  TokenIds segment(int open, int close, int max_len, bool& truncated) {
    ad::Var lp = run.step(st, InputRow::id(open));
    TokenIds out;
    for (int i = 0;; ++i) {
      int t = argmax(g.value(lp));
      if (i == max_len && t != close) {
        t = close;
        truncated = true;
      }
      out.push_back(t);
      if (t == close) {
        run.step(st, InputRow::id(t), false);
        return out;
      }
      lp = run.step(st, InputRow::id(t));
    }
  }

  void feed(const TokenIds& ids) {
    for (int id : ids) run.step(st, InputRow::id(id), false);
  }
};

}  // namespace

int RolloutResult::parse_failures() const {
  return static_cast<int>(std::count_if(turns.begin(), turns.end(), [](const auto& t) { return t.belief_parse_failed; }));
}

bool RolloutResult::any_truncated() const {
  return std::any_of(turns.begin(), turns.end(), [](const auto& t) { return t.truncated; });
}

RolloutResult rollout(const ModelParameters& p, const DialogSession& session, const World& world,
                      const Vocabulary& vocab, const RolloutConfig& cfg) {
  const int sos_u = vocab.id(tok::kSosU), sos_b = vocab.id(tok::kSosB), eos_b = vocab.id(tok::kEosB);
  const int sos_d = vocab.id(tok::kSosD), eos_d = vocab.id(tok::kEosD), sos_a = vocab.id(tok::kSosA);
  const int eos_a = vocab.id(tok::kEosA), sos_r = vocab.id(tok::kSosR), eos_r = vocab.id(tok::kEosR);
  const int context = p.config().context_len;

  ad::Graph g(false);
  ModelRun run(p, g, nullptr);
  Generator gen{run, g, run.start()};
  std::vector<TokenIds> history;  // generated turns so far, as fed

  RolloutResult out;
  out.session_id = session.id;
  for (const auto& turn : session.turns) {
    TokenIds user{sos_u};
    for (int id : vocab.encode(turn.user)) user.push_back(id);
    const int budget = static_cast<int>(user.size()) + cfg.max_belief_len + cfg.max_act_len + cfg.max_response_len + 9;
    if (budget > context) throw ContractError(fmt::format("rollout: turn budget {} exceeds context {}", budget, context));
    if (gen.st.position + budget > context) {
      // drop the earliest turns and re-encode what is left
      std::size_t first = 0;
      int used = 0;
      for (const auto& h : history) used += static_cast<int>(h.size());
      while (used + budget > context) used -= static_cast<int>(history[first++].size());
      history.erase(history.begin(), history.begin() + static_cast<std::ptrdiff_t>(first));
      gen.st = run.start();
      for (const auto& h : history) gen.feed(h);
    }

    RolloutTurn rt;
    TokenIds fed = user;
    gen.feed(user);
    const TokenIds b = gen.segment(sos_b, eos_b, cfg.max_belief_len, rt.truncated);
    rt.belief = vocab.decode(b);
    const auto parsed = parse_belief(rt.belief, world.ontology);
    rt.belief_parse_failed = !parsed.has_value();
    rt.db_matches = parsed ? db_query(*parsed, world.db).size() : 0;
    const std::string bucket = db_bucket(rt.db_matches);
    rt.db = {bucket, std::string(tok::kEosD)};
    const TokenIds d{sos_d, vocab.id(bucket), eos_d};
    gen.feed(d);
    const TokenIds a = gen.segment(sos_a, eos_a, cfg.max_act_len, rt.truncated);
    rt.act = vocab.decode(a);
    const TokenIds r = gen.segment(sos_r, eos_r, cfg.max_response_len, rt.truncated);
    rt.response = vocab.decode(r);

    fed.push_back(sos_b);
    fed.insert(fed.end(), b.begin(), b.end());
    fed.insert(fed.end(), d.begin(), d.end());
    fed.push_back(sos_a);
    fed.insert(fed.end(), a.begin(), a.end());
    fed.push_back(sos_r);
    fed.insert(fed.end(), r.begin(), r.end());
    history.push_back(std::move(fed));
    out.turns.push_back(std::move(rt));
  }
  return out;
}

std::vector<RolloutResult> rollout_all(const ModelParameters& p, const std::vector<DialogSession>& sessions,
                                       const World& world, const Vocabulary& vocab, const RolloutConfig& cfg) {
  std::vector<RolloutResult> out(sessions.size());
  const auto n = static_cast<std::ptrdiff_t>(sessions.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] = rollout(p, sessions[static_cast<std::size_t>(i)], world, vocab, cfg);
  return out;
}

RolloutResult oracle_rollout(const DialogSession& session, const World& world) {
  RolloutResult out;
  out.session_id = session.id;
  for (const auto& t : session.turns) {
    RolloutTurn rt;
    rt.belief = t.belief;
    rt.db = t.db;
    rt.act = t.act;
    rt.response = t.response;
    const auto parsed = parse_belief(t.belief, world.ontology);
    rt.belief_parse_failed = !parsed;
    rt.db_matches = parsed ? db_query(*parsed, world.db).size() : 0;
    out.turns.push_back(std::move(rt));
  }
  return out;
}

// ------------------------------------------------------------------ metrics

std::optional<Record> offered_entity(const RolloutTurn& turn, const World& world) {
  bool provides = contains(turn.response, placeholder_for("name"));
  if (!provides)
    if (auto groups = parse_act(turn.act, world.ontology))
      for (const auto& gr : *groups)
        if (gr.act == "[inform]" && std::find(gr.slots.begin(), gr.slots.end(), "name") != gr.slots.end())
          provides = true;
  if (!provides) return std::nullopt;
  const auto belief = parse_belief(turn.belief, world.ontology);
  if (!belief) return Record{};
  auto matches = db_query(*belief, world.db);
  if (matches.empty()) return Record{};
  return matches.front();
}

namespace {

bool satisfies(const Record& entity, const std::string& domain, const std::vector<std::pair<std::string, std::string>>& cons,
               const World& world) {
  if (entity.empty()) return false;
  const DatabaseTable* table = world.db.find(domain);
  if (!table) return false;
  // the entity must belong to the constrained domain
  if (std::find(table->entities.begin(), table->entities.end(), entity) == table->entities.end()) return false;
  for (const auto& [slot, value] : cons) {
    auto it = entity.find(slot);
    if (it == entity.end() || it->second != value) return false;
  }
  return true;
}

}  // namespace

InformSuccess inform_success(const std::vector<RolloutResult>& rollouts, const std::vector<DialogSession>& sessions,
                             const World& world) {
  check_aligned(rollouts, sessions);
  InformSuccess out;
  double inform = 0.0, success = 0.0;
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    const auto& goal = sessions[i].goal;
    if (!goal) {
      ++out.without_goal;
      continue;
    }
    ++out.scored;
    std::optional<Record> last;
    for (const auto& t : rollouts[i].turns)
      if (auto e = offered_entity(t, world)) last = std::move(e);
    const bool inf = last && satisfies(*last, goal->domain, goal->constraints, world);
    bool suc = inf;
    for (const auto& req : goal->requests) {
      const std::string ph = placeholder_for(req);
      bool seen = false;
      for (const auto& t : rollouts[i].turns) seen = seen || contains(t.response, ph);
      suc = suc && seen;
    }
    inform += inf;
    success += suc;
  }
  if (out.without_goal) spdlog::warn("inform/success: {} sessions without a goal excluded", out.without_goal);
  if (out.scored) {
    out.inform = 100.0 * inform / static_cast<double>(out.scored);
    out.success = 100.0 * success / static_cast<double>(out.scored);
  }
  return out;
}

MatchReqSuc match_reqsuc(const std::vector<RolloutResult>& rollouts, const std::vector<DialogSession>& sessions,
                         const World& world) {
  check_aligned(rollouts, sessions);
  MatchReqSuc out;
  std::size_t matched = 0, hit = 0;
  for (std::size_t i = 0; i < sessions.size(); ++i)
    for (std::size_t t = 0; t < sessions[i].turns.size(); ++t) {
      const auto& gen = rollouts[i].turns[t];
      const auto& ref = sessions[i].turns[t];
      if (auto e = offered_entity(gen, world)) {
        ++out.entity_turns;
        const auto truth = parse_belief(ref.belief, world.ontology);
        bool ok = false;
        if (truth)
          for (const auto& [domain, cons] : truth->domains) ok = ok || satisfies(*e, domain, cons, world);
        matched += ok;
      }
      if (auto groups = parse_act(ref.act, world.ontology))
        for (const auto& gr : *groups)
          if (gr.act == "[inform]")
            for (const auto& slot : gr.slots) {
              ++out.attributes;
              hit += contains(gen.response, placeholder_for(slot));
            }
    }
  if (out.entity_turns) out.match = 100.0 * static_cast<double>(matched) / static_cast<double>(out.entity_turns);
  if (out.attributes) out.req_suc = 100.0 * static_cast<double>(hit) / static_cast<double>(out.attributes);
  return out;
}

double bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references) {
  if (hypotheses.size() != references.size()) throw ContractError("bleu: hypothesis/reference count mismatch");
  if (hypotheses.empty()) {
    spdlog::warn("bleu: empty hypothesis set");
    return 0.0;
  }
  std::array<double, 4> clipped{}, total{};
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const Tokens h = strip_delimiters(hypotheses[i]);
    const Tokens r = strip_delimiters(references[i]);
    hyp_len += static_cast<double>(h.size());
    ref_len += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<Tokens, int> hc, rc;
      for (std::size_t k = 0; k + n <= h.size(); ++k) ++hc[Tokens(h.begin() + static_cast<std::ptrdiff_t>(k), h.begin() + static_cast<std::ptrdiff_t>(k + n))];
      for (std::size_t k = 0; k + n <= r.size(); ++k) ++rc[Tokens(r.begin() + static_cast<std::ptrdiff_t>(k), r.begin() + static_cast<std::ptrdiff_t>(k + n))];
      for (const auto& [gram, c] : hc) {
        auto it = rc.find(gram);
        clipped[n - 1] += std::min(c, it == rc.end() ? 0 : it->second);
        total[n - 1] += c;
      }
    }
  }
  double log_p = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (clipped[n] == 0.0 || total[n] == 0.0) return 0.0;
    log_p += 0.25 * std::log(clipped[n] / total[n]);
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return 100.0 * bp * std::exp(log_p);
}

double combined_score(double inform, double success, double bleu) { return bleu + 0.5 * (inform + success); }
double combined_crosswoz(double match, double req_suc, double bleu) { return bleu + 0.5 * (match + req_suc); }

std::string normalize_belief_tokens(const Tokens& belief, const Ontology& ontology) {
  if (auto b = parse_belief(belief, ontology)) return b->normalized();
  return "<unparsed> " + join_tokens(strip_delimiters(belief));
}

std::string normalize_act_tokens(const Tokens& act, const Ontology& ontology) {
  if (auto a = parse_act(act, ontology)) return normalize_act(*a);
  return "<unparsed> " + join_tokens(strip_delimiters(act));
}

LatentAccuracy latent_accuracy(const std::vector<RolloutResult>& rollouts, const std::vector<DialogSession>& sessions,
                               const World& world) {
  check_aligned(rollouts, sessions);
  LatentAccuracy out;
  std::size_t both = 0, belief = 0;
  for (std::size_t i = 0; i < sessions.size(); ++i)
    for (std::size_t t = 0; t < sessions[i].turns.size(); ++t) {
      const auto& gen = rollouts[i].turns[t];
      const auto& ref = sessions[i].turns[t];
      const bool b = normalize_belief_tokens(gen.belief, world.ontology) == normalize_belief_tokens(ref.belief, world.ontology);
      const bool a = normalize_act_tokens(gen.act, world.ontology) == normalize_act_tokens(ref.act, world.ontology);
      ++out.turns;
      belief += b;
      both += a && b;
    }
  if (out.turns) {
    out.latent_exact_match = 100.0 * static_cast<double>(both) / static_cast<double>(out.turns);
    out.joint_goal_accuracy = 100.0 * static_cast<double>(belief) / static_cast<double>(out.turns);
  }
  return out;
}

MetricReport score_rollouts(const std::vector<RolloutResult>& rollouts, const std::vector<DialogSession>& sessions,
                            const World& world) {
  MetricReport m;
  const auto is = inform_success(rollouts, sessions, world);
  const auto mr = match_reqsuc(rollouts, sessions, world);
  const auto la = latent_accuracy(rollouts, sessions, world);
  std::vector<Tokens> hyps, refs;
  for (std::size_t i = 0; i < sessions.size(); ++i)
    for (std::size_t t = 0; t < sessions[i].turns.size(); ++t) {
      hyps.push_back(rollouts[i].turns[t].response);
      refs.push_back(sessions[i].turns[t].response);
    }
  for (const auto& r : rollouts) m.parse_failures += r.parse_failures();
  m.inform = is.inform;
  m.success = is.success;
  m.bleu = bleu(hyps, refs);
  m.combined = combined_score(m.inform, m.success, m.bleu);
  m.match = mr.match;
  m.req_suc = mr.req_suc;
  if (m.match) m.combined_crosswoz = combined_crosswoz(*m.match, m.req_suc, m.bleu);
  m.latent_exact_match = la.latent_exact_match;
  m.joint_goal_accuracy = la.joint_goal_accuracy;
  m.sessions = sessions.size();
  m.sessions_without_goal = is.without_goal;
  m.turns = la.turns;
  return m;
}

MetricReport evaluate(const ModelParameters& p, const std::vector<DialogSession>& sessions, const World& world,
                      const Vocabulary& vocab, const RolloutConfig& cfg, std::vector<RolloutResult>* rollouts) {
  auto r = rollout_all(p, sessions, world, vocab, cfg);
  MetricReport m = score_rollouts(r, sessions, world);
  if (rollouts) *rollouts = std::move(r);
  return m;
}

std::string MetricReport::to_json() const {
  nlohmann::json j{{"inform", inform},
                   {"success", success},
                   {"bleu", bleu},
                   {"combined", combined},
                   {"req_suc", req_suc},
                   {"latent_exact_match", latent_exact_match},
                   {"joint_goal_accuracy", joint_goal_accuracy},
                   {"sessions", sessions},
                   {"sessions_without_goal", sessions_without_goal},
                   {"turns", turns},
                   {"parse_failures", parse_failures}};
  j["match"] = match ? nlohmann::json(*match) : nlohmann::json(nullptr);
  j["combined_crosswoz"] = combined_crosswoz ? nlohmann::json(*combined_crosswoz) : nlohmann::json(nullptr);
  return j.dump(2);
}

std::string MetricReport::table() const {
  auto opt = [](const std::optional<double>& v) { return v ? fmt::format("{:8.2f}", *v) : std::string("       -"); };
  std::string s;
  s += fmt::format("{:<22}{:>8}\n", "metric", "value");
  s += fmt::format("{:<22}{:8.2f}\n", "inform", inform);
  s += fmt::format("{:<22}{:8.2f}\n", "success", success);
  s += fmt::format("{:<22}{:8.2f}\n", "bleu", bleu);
  s += fmt::format("{:<22}{:8.2f}\n", "combined", combined);
  s += fmt::format("{:<22}{}\n", "match", opt(match));
  s += fmt::format("{:<22}{:8.2f}\n", "req_suc", req_suc);
  s += fmt::format("{:<22}{}\n", "combined (turn-level)", opt(combined_crosswoz));
  s += fmt::format("{:<22}{:8.2f}\n", "latent exact match", latent_exact_match);
  s += fmt::format("{:<22}{:8.2f}\n", "joint goal accuracy", joint_goal_accuracy);
  s += fmt::format("{:<22}{:>8}\n", "sessions / turns", fmt::format("{}/{}", sessions, turns));
  return s;
}

// ------------------------------------------------------------------ plot

void write_svg_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series,
                    const std::string& title, const std::string& x_label, const std::string& y_label) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      x0 = std::min(x0, x), x1 = std::max(x1, x);
      y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad, y1 += pad;
  const double W = 640, H = 420, L = 70, R = 170, T = 40, B = 60;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write plot " + path.string());
  f << fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">)", W, H)
    << "\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << fmt::format(R"(<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>)", (W - R + L) / 2, title) << "\n";
  f << fmt::format(R"(<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/><line x1="{0}" y1="{3}" x2="{0}" y2="{1}" stroke="black"/>)",
                   L, H - B, W - R, T)
    << "\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    f << fmt::format(R"(<text x="{}" y="{}" text-anchor="middle">{:.3g}</text>)", px(xv), H - B + 18, xv) << "\n";
    f << fmt::format(R"(<text x="{}" y="{}" text-anchor="end">{:.3g}</text>)", L - 6, py(yv) + 4, yv) << "\n";
    f << fmt::format(R"(<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="#ddd"/>)", L, py(yv), W - R) << "\n";
  }
  f << fmt::format(R"(<text x="{}" y="{}" text-anchor="middle">{}</text>)", (W - R + L) / 2, H - 15, x_label) << "\n";
  f << fmt::format(R"svg(<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>)svg", (H - B + T) / 2, y_label)
    << "\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* c = colors[s % 6];
    auto pts = series[s].points;
    std::sort(pts.begin(), pts.end());
    std::string poly;
    for (const auto& [x, y] : pts) poly += fmt::format("{:.1f},{:.1f} ", px(x), py(y));
    f << fmt::format(R"(<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>)", c, poly) << "\n";
    for (const auto& [x, y] : pts) f << fmt::format(R"(<circle cx="{:.1f}" cy="{:.1f}" r="3" fill="{}"/>)", px(x), py(y), c) << "\n";
    const double ly = T + 10 + 18.0 * static_cast<double>(s);
    f << fmt::format(R"(<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{3}" stroke-width="2"/><text x="{4}" y="{5}">{6}</text>)",
                     W - R + 15, ly, W - R + 35, c, W - R + 40, ly + 4, series[s].label)
      << "\n";
  }
  f << "</svg>\n";
}

}  // namespace semivar
