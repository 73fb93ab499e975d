#include "semivar/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "semivar/error.hpp"
#include "semivar/rng.hpp"

namespace semivar {

using nlohmann::json;

namespace {

const std::set<std::string>& act_tokens() {
  static const std::set<std::string> acts = {"[inform]", "[request]", "[nooffer]", "[reqmore]",
                                             "[bye]",    "[greet]",   "[select]",  "[recommend]"};
  return acts;
}

bool is_delimiter(const std::string& t) {
  return std::any_of(tok::kDelimiters.begin(), tok::kDelimiters.end(), [&](auto d) { return d == t; });
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

Tokens strip_trailing(const Tokens& tokens, std::string_view delimiter) {
  Tokens out = tokens;
  if (!out.empty() && out.back() == delimiter) out.pop_back();
  return out;
}

}  // namespace

std::string domain_token(const std::string& domain) { return "[" + domain + "]"; }
std::string placeholder_for(const std::string& slot) { return "[value_" + slot + "]"; }

Tokens strip_delimiters(const Tokens& tokens) {
  Tokens out;
  for (const auto& t : tokens)
    if (!is_delimiter(t)) out.push_back(t);
  return out;
}

// ---------------------------------------------------------------- ontology

void Ontology::validate() const {
  if (domains.empty()) throw ConfigError("ontology has no domains");
  std::set<std::string> placeholder_set;
  for (const auto& [slot, ph] : placeholders) placeholder_set.insert(ph);
  for (const auto& d : domains) {
    auto it = slots.find(d);
    if (it == slots.end() || it->second.empty()) throw ConfigError("domain '" + d + "' has no slots");
    for (const auto& s : it->second) {
      auto v = values.find(s);
      if (v == values.end() || v->second.empty()) throw ConfigError("slot '" + s + "' has no values");
      if (!placeholders.count(s)) throw ConfigError("slot '" + s + "' has no placeholder");
    }
    if (auto inf = informable.find(d); inf != informable.end())
      for (const auto& s : inf->second)
        if (std::find(it->second.begin(), it->second.end(), s) == it->second.end())
          throw ConfigError("informable slot '" + s + "' not a slot of '" + d + "'");
  }
  for (const auto& [slot, vals] : values)
    for (const auto& v : vals)
      for (const auto& t : split_tokens(v))
        if (placeholder_set.count(t)) throw ConfigError("value token '" + t + "' collides with a placeholder");
}

bool Ontology::is_slot(const std::string& token) const {
  for (const auto& [d, ss] : slots)
    if (std::find(ss.begin(), ss.end(), token) != ss.end()) return true;
  return false;
}

std::optional<std::string> Ontology::domain_of_token(const std::string& token) const {
  if (token.size() < 3 || token.front() != '[' || token.back() != ']') return std::nullopt;
  std::string name = token.substr(1, token.size() - 2);
  if (name == "general") return name;
  if (std::find(domains.begin(), domains.end(), name) != domains.end()) return name;
  return std::nullopt;
}

const DatabaseTable* Database::find(const std::string& domain) const {
  auto it = tables.find(domain);
  return it == tables.end() ? nullptr : &it->second;
}

void Database::validate(const Ontology& ontology) const {
  for (const auto& [domain, table] : tables) {
    auto it = ontology.slots.find(domain);
    if (it == ontology.slots.end()) throw ConfigError("database domain '" + domain + "' not in ontology");
    for (const auto& rec : table.entities)
      for (const auto& [slot, value] : rec)
        if (std::find(it->second.begin(), it->second.end(), slot) == it->second.end())
          throw ConfigError("record slot '" + slot + "' not in ontology for '" + domain + "'");
  }
}

// ---------------------------------------------------------------- grammars

std::string BeliefState::normalized() const {
  std::string out;
  for (const auto& [domain, cons] : domains) {
    if (!out.empty()) out.push_back(' ');
    out += lower(domain_token(domain));
    auto sorted = cons;
    for (auto& [s, v] : sorted) {
      s = lower(s);
      v = lower(v);
    }
    std::sort(sorted.begin(), sorted.end());
    for (const auto& [s, v] : sorted) out += " " + s + " " + v;
  }
  return out;
}

const std::vector<std::pair<std::string, std::string>>* BeliefState::constraints(const std::string& domain) const {
  for (const auto& [d, c] : domains)
    if (d == domain) return &c;
  return nullptr;
}

std::optional<BeliefState> parse_belief(const Tokens& tokens, const Ontology& ontology) {
  const Tokens body = strip_trailing(tokens, tok::kEosB);
  BeliefState out;
  std::size_t i = 0;
  while (i < body.size()) {
    auto domain = ontology.domain_of_token(body[i]);
    if (!domain || *domain == "general") return std::nullopt;
    ++i;
    std::vector<std::pair<std::string, std::string>> cons;
    while (i < body.size() && !ontology.domain_of_token(body[i])) {
      const std::string& slot = body[i];
      if (!ontology.is_slot(slot)) return std::nullopt;
      ++i;
      Tokens value;
      while (i < body.size() && !ontology.is_slot(body[i]) && !ontology.domain_of_token(body[i]) &&
             !is_delimiter(body[i]))
        value.push_back(body[i++]);
      if (value.empty()) return std::nullopt;
      cons.emplace_back(slot, join_tokens(value));
    }
    out.domains.emplace_back(*domain, std::move(cons));
  }
  return out;
}

std::optional<std::vector<ActGroup>> parse_act(const Tokens& tokens, const Ontology& ontology) {
  const Tokens body = strip_trailing(tokens, tok::kEosA);
  std::vector<ActGroup> groups;
  std::size_t i = 0;
  while (i < body.size()) {
    auto domain = ontology.domain_of_token(body[i]);
    if (!domain) return std::nullopt;
    ++i;
    if (i >= body.size() || !act_tokens().count(body[i])) return std::nullopt;
    while (i < body.size() && act_tokens().count(body[i])) {
      ActGroup g{*domain, body[i++], {}};
      while (i < body.size() && !act_tokens().count(body[i]) && !ontology.domain_of_token(body[i])) {
        if (!ontology.is_slot(body[i]) && body[i] != "choice") return std::nullopt;
        g.slots.push_back(body[i++]);
      }
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

std::string normalize_act(const std::vector<ActGroup>& groups) {
  std::string out;
  for (const auto& g : groups) {
    if (!out.empty()) out.push_back(' ');
    auto slots = g.slots;
    std::sort(slots.begin(), slots.end());
    out += lower(domain_token(g.domain)) + " " + lower(g.act);
    for (const auto& s : slots) out += " " + lower(s);
  }
  return out;
}

// ---------------------------------------------------------------- delexicalization

Tokens delexicalize(const Tokens& response, const Ontology& ontology) {
  struct Pattern {
    Tokens tokens;
    std::string placeholder;
  };
  std::vector<Pattern> patterns;
  for (const auto& [slot, vals] : ontology.values) {
    auto ph = ontology.placeholders.find(slot);
    if (ph == ontology.placeholders.end()) continue;
    for (const auto& v : vals) {
      Tokens t = split_tokens(v);
      if (!t.empty()) patterns.push_back({std::move(t), ph->second});
    }
  }
  const std::size_t n = response.size();
  // covered[i] = index of the pattern covering i, or -1; start marks the first token.
  std::vector<int> covered(n, -1);
  std::vector<bool> start(n, false);
  for (;;) {
    std::size_t best_len = 0;
    std::size_t best_pos = 0;
    int best_pat = -1;
    for (std::size_t pos = 0; pos < n; ++pos) {
      if (covered[pos] >= 0) continue;
      for (std::size_t p = 0; p < patterns.size(); ++p) {
        const auto& pt = patterns[p].tokens;
        if (pt.size() <= best_len || pos + pt.size() > n) continue;
        bool ok = true;
        for (std::size_t k = 0; k < pt.size() && ok; ++k) ok = covered[pos + k] < 0 && response[pos + k] == pt[k];
        if (ok) {
          best_len = pt.size();
          best_pos = pos;
          best_pat = static_cast<int>(p);
        }
      }
    }
    if (best_pat < 0) break;
    for (std::size_t k = 0; k < best_len; ++k) covered[best_pos + k] = best_pat;
    start[best_pos] = true;
  }
  Tokens out;
  for (std::size_t i = 0; i < n; ++i) {
    if (covered[i] < 0)
      out.push_back(response[i]);
    else if (start[i])
      out.push_back(patterns[static_cast<std::size_t>(covered[i])].placeholder);
  }
  return out;
}

// ---------------------------------------------------------------- database

std::vector<Record> db_query(const BeliefState& belief, const Database& db) {
  if (belief.domains.empty()) return {};
  const auto& [domain, cons] = belief.domains.back();
  const DatabaseTable* table = db.find(domain);
  if (!table) return {};
  std::vector<Record> out;
  for (const auto& rec : table->entities) {
    bool ok = true;
    for (const auto& [slot, value] : cons) {
      auto it = rec.find(slot);
      if (it == rec.end() || it->second != value) {
        ok = false;
        break;
      }
    }
    if (ok) out.push_back(rec);
  }
  return out;
}

std::vector<Record> db_query_tokens(const Tokens& belief_tokens, const Ontology& ontology, const Database& db) {
  auto belief = parse_belief(belief_tokens, ontology);
  if (!belief) return {};
  return db_query(*belief, db);
}

std::string db_bucket(std::size_t count) {
  if (count == 0) return std::string(tok::kDbBuckets[0]);
  if (count == 1) return std::string(tok::kDbBuckets[1]);
  if (count <= 3) return std::string(tok::kDbBuckets[2]);
  return std::string(tok::kDbBuckets[3]);
}

// ---------------------------------------------------------------- generator

namespace {

struct DomainLexicon {
  const char* name;
  std::vector<const char*> informable;
};

const std::vector<DomainLexicon>& domain_lexicon() {
  static const std::vector<DomainLexicon> lex = {
      {"restaurant", {"food", "area", "price"}},
      {"hotel", {"area", "price", "stars"}},
      {"attraction", {"area", "type", "price"}},
  };
  return lex;
}

const std::map<std::string, std::vector<const char*>>& value_pools() {
  static const std::map<std::string, std::vector<const char*>> pools = {
      {"food", {"spanish", "indian", "chinese", "italian", "thai", "french"}},
      {"area", {"centre", "north", "south", "east", "west"}},
      {"price", {"cheap", "moderate", "expensive", "luxury"}},
      {"stars", {"two", "three", "four", "five"}},
      {"type", {"museum", "gallery", "theatre", "college", "cinema"}},
  };
  return pools;
}

const std::vector<std::string>& requestable_slots() {
  static const std::vector<std::string> r = {"address", "phone", "postcode"};
  return r;
}

std::string constraint_phrase(const std::string& slot, const std::string& value) {
  if (slot == "food") return "serving " + value + " food";
  if (slot == "area") return "in the " + value;
  if (slot == "price") return "that is " + value;
  if (slot == "stars") return "with " + value + " stars";
  if (slot == "type") return "that is a " + value;
  return slot + " " + value;
}

std::string bucket_phrase(const std::string& bucket) {
  if (bucket == tok::kDbBuckets[1]) return "the only match";
  if (bucket == tok::kDbBuckets[2]) return "one of a few matches";
  return "one of many matches";
}

Tokens with_end(Tokens t, std::string_view end) {
  t.emplace_back(end);
  return t;
}

Tokens belief_tokens(const std::string& domain, const std::vector<std::pair<std::string, std::string>>& cons) {
  Tokens t{domain_token(domain)};
  for (const auto& [s, v] : cons) {
    t.push_back(s);
    for (auto& vt : split_tokens(v)) t.push_back(vt);
  }
  return t;
}

}  // namespace

World build_world(const GeneratorConfig& cfg, std::uint64_t seed) {
  const auto& lex = domain_lexicon();
  if (cfg.num_domains < 1) throw ConfigError("generator needs at least one domain (empty ontology)");
  if (cfg.num_domains > static_cast<int>(lex.size()))
    throw ConfigError(fmt::format("at most {} domains supported", lex.size()));
  if (cfg.slots_per_domain < 2 || cfg.slots_per_domain > 3) throw ConfigError("slots_per_domain must be 2 or 3");
  if (cfg.values_per_slot < 2 || cfg.values_per_slot > 4) throw ConfigError("values_per_slot must be in [2,4]");
  if (cfg.entities_per_domain < 1) throw ConfigError("entities_per_domain must be >= 1");
  if (cfg.max_constraints < 1) throw ConfigError("max_constraints must be >= 1");

  Rng rng(derive_seed(seed, 0xdb));
  World w;
  Ontology& o = w.ontology;
  for (int d = 0; d < cfg.num_domains; ++d) {
    const auto& dl = lex[static_cast<std::size_t>(d)];
    o.domains.emplace_back(dl.name);
    auto& inf = o.informable[dl.name];
    for (int s = 0; s < cfg.slots_per_domain; ++s) inf.emplace_back(dl.informable[static_cast<std::size_t>(s)]);
    auto& all = o.slots[dl.name];
    all = inf;
    all.emplace_back("name");
    for (const auto& r : requestable_slots()) all.push_back(r);
    for (const auto& s : inf)
      if (!o.values.count(s)) {
        const auto& pool = value_pools().at(s);
        o.values[s] = std::vector<std::string>(pool.begin(), pool.begin() + cfg.values_per_slot);
      }
  }

  static const std::vector<const char*> adjectives = {"golden", "royal", "blue",  "green", "silver", "lucky",
                                                      "little", "grand", "happy", "old",   "red",    "new"};
  static const std::vector<const char*> nouns = {"house", "garden", "palace", "lodge", "corner", "star",
                                                 "bridge", "tower", "inn",   "court", "hall",   "view"};
  static const std::vector<const char*> streets = {"milton", "regent", "mill", "king", "station", "market"};
  std::set<std::string> used_names;
  for (const auto& domain : o.domains) {
    DatabaseTable table{domain, {}};
    for (int e = 0; e < cfg.entities_per_domain; ++e) {
      Record rec;
      for (const auto& s : o.informable[domain]) {
        const auto& vals = o.values[s];
        rec[s] = vals[std::uniform_int_distribution<std::size_t>(0, vals.size() - 1)(rng)];
      }
      std::string name;
      do {
        name = std::string("the ") + adjectives[std::uniform_int_distribution<std::size_t>(0, adjectives.size() - 1)(rng)] +
               " " + nouns[std::uniform_int_distribution<std::size_t>(0, nouns.size() - 1)(rng)];
      } while (used_names.count(name));
      used_names.insert(name);
      rec["name"] = name;
      rec["address"] = fmt::format("{} {} road", std::uniform_int_distribution<int>(1, 99)(rng),
                                   streets[std::uniform_int_distribution<std::size_t>(0, streets.size() - 1)(rng)]);
      rec["phone"] = fmt::format("01223{:06d}", std::uniform_int_distribution<int>(0, 999999)(rng));
      rec["postcode"] = fmt::format("cb{}{}{}", std::uniform_int_distribution<int>(1, 9)(rng),
                                    std::uniform_int_distribution<int>(1, 9)(rng),
                                    static_cast<char>('a' + std::uniform_int_distribution<int>(0, 25)(rng)));
      for (const char* s : {"name", "address", "phone", "postcode"}) o.values[s].push_back(rec[s]);
      table.entities.push_back(std::move(rec));
    }
    w.db.tables.emplace(domain, std::move(table));
  }
  for (auto& [slot, vals] : o.values) {
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
  }
  for (const auto& [slot, vals] : o.values) o.placeholders[slot] = placeholder_for(slot);
  o.validate();
  w.db.validate(o);
  return w;
}

namespace {

DialogSession generate_session(const World& world, const GeneratorConfig& cfg, std::uint64_t seed, int index) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(index)));
  const Ontology& o = world.ontology;
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

  const std::string domain = o.domains[pick(o.domains.size())];
  const DatabaseTable& table = *world.db.find(domain);
  const Record& target = table.entities[pick(table.entities.size())];

  Goal goal;
  goal.domain = domain;
  std::vector<std::string> inf = o.informable.at(domain);
  std::shuffle(inf.begin(), inf.end(), rng);
  const std::size_t k = 1 + pick(std::min<std::size_t>(static_cast<std::size_t>(cfg.max_constraints), inf.size()));
  for (std::size_t i = 0; i < k; ++i) goal.constraints.emplace_back(inf[i], target.at(inf[i]));
  std::vector<std::string> req = requestable_slots();
  std::shuffle(req.begin(), req.end(), rng);
  req.resize(1 + pick(2));
  std::sort(req.begin(), req.end());
  goal.requests = req;

  DialogSession s;
  s.id = fmt::format("{}{:05d}", cfg.id_prefix, index);
  s.labeled = true;

  std::vector<std::pair<std::string, std::string>> informed;
  std::size_t next = 0;
  // Turn 1 opens with one or two constraints.
  const std::size_t first = (k >= 2 && uniform01(rng) < 0.5) ? 2 : 1;
  std::string user = "i need a " + domain;
  for (std::size_t i = 0; i < first; ++i) {
    user += (i ? " and " : " ") + constraint_phrase(goal.constraints[i].first, goal.constraints[i].second);
    informed.push_back(goal.constraints[i]);
  }
  user += " .";
  next = first;

  auto emit = [&](const std::string& u, const std::string& act, const std::string& raw_response) {
    DialogTurn t;
    t.user = with_end(split_tokens(u), tok::kEosU);
    t.belief = with_end(belief_tokens(domain, informed), tok::kEosB);
    BeliefState b{{{domain, informed}}};
    t.db = with_end(Tokens{db_bucket(db_query(b, world.db).size())}, tok::kEosD);
    t.act = with_end(split_tokens(act), tok::kEosA);
    t.response = with_end(delexicalize(split_tokens(raw_response), o), tok::kEosR);
    s.turns.push_back(std::move(t));
  };

  for (;;) {
    BeliefState b{{{domain, informed}}};
    auto matches = db_query(b, world.db);
    const std::string bucket = db_bucket(matches.size());
    if (matches.size() > 1 && next < k) {
      const std::string& slot = goal.constraints[next].first;
      const char* amount = bucket == tok::kDbBuckets[2] ? "a few" : "many";
      emit(user, domain_token(domain) + " [request] " + slot,
           fmt::format("i have {} options . what {} would you like ?", amount, slot));
      user = "i would like one " + constraint_phrase(goal.constraints[next].first, goal.constraints[next].second) + " .";
      informed.push_back(goal.constraints[next]);
      ++next;
      continue;
    }
    const Record& offered = matches.front();
    emit(user, domain_token(domain) + " [inform] name",
         offered.at("name") + " is " + bucket_phrase(bucket) + " .");
    break;
  }
  // The offered entity answers the requests.
  {
    BeliefState b{{{domain, informed}}};
    const Record offered = db_query(b, world.db).front();
    std::string u = "can i have the " + goal.requests[0];
    std::string act = domain_token(domain) + " [inform]";
    std::string resp = "the " + goal.requests[0] + " is " + offered.at(goal.requests[0]);
    for (std::size_t i = 1; i < goal.requests.size(); ++i) {
      u += " and the " + goal.requests[i];
      resp += " and the " + goal.requests[i] + " is " + offered.at(goal.requests[i]);
    }
    for (const auto& r : goal.requests) act += " " + r;
    emit(u + " ?", act, resp + " .");
  }
  if (uniform01(rng) < 0.5) emit("thanks , that is all .", "[general] [bye]", "you are welcome , goodbye .");
  s.goal = std::move(goal);
  return s;
}

}  // namespace

std::vector<DialogSession> generate_corpus(const World& world, const GeneratorConfig& cfg, std::uint64_t seed) {
  world.ontology.validate();
  if (cfg.num_sessions < 0) throw ConfigError("num_sessions must be >= 0");
  std::vector<DialogSession> out(static_cast<std::size_t>(cfg.num_sessions));
  const auto n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] = generate_session(world, cfg, seed, static_cast<int>(i));
  return out;
}

Vocabulary build_vocabulary(const Ontology& ontology, const std::vector<DialogSession>& corpus) {
  Vocabulary v;
  std::set<std::string> extra;
  for (const auto& d : ontology.domains) extra.insert(domain_token(d));
  extra.insert(domain_token("general"));
  for (const auto& a : act_tokens()) extra.insert(a);
  for (const auto& [slot, ph] : ontology.placeholders) extra.insert(ph);
  for (const auto& [d, ss] : ontology.slots)
    for (const auto& s : ss) extra.insert(s);
  for (const auto& [slot, vals] : ontology.informable)
    for (const auto& s : vals)
      for (const auto& val : ontology.values.at(s))
        for (const auto& t : split_tokens(val)) extra.insert(t);
  for (const auto& t : extra) v.add(t);
  std::set<std::string> words;
  for (const auto& s : corpus)
    for (const auto& t : s.turns)
      for (const Tokens* f : {&t.user, &t.belief, &t.db, &t.act, &t.response})
        for (const auto& w : *f) words.insert(w);
  for (const auto& w : words) v.add(w);
  return v;
}

CorpusSplit split_by_label_proportion(const std::vector<DialogSession>& corpus, double proportion,
                                      std::uint64_t seed) {
  if (!(proportion > 0.0 && proportion <= 1.0))
    throw ConfigError(fmt::format("label proportion {} outside (0, 1]", proportion));
  const std::size_t n = corpus.size();
  const auto n_labeled = static_cast<std::size_t>(std::llround(proportion * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5711));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> is_labeled(n, false);
  for (std::size_t i = 0; i < n_labeled && i < n; ++i) is_labeled[order[i]] = true;
  CorpusSplit split;
  split.proportion = proportion;
  split.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    DialogSession s = corpus[i];
    s.labeled = is_labeled[i];
    (is_labeled[i] ? split.labeled : split.unlabeled).push_back(std::move(s));
  }
  return split;
}

// ---------------------------------------------------------------- file I/O

namespace {

json session_to_json(const DialogSession& s) {
  json j;
  j["id"] = s.id;
  j["labeled"] = s.labeled;
  if (s.goal) {
    json cons = json::array();
    for (const auto& [k, v] : s.goal->constraints) cons.push_back({k, v});
    j["goal"] = {{"domain", s.goal->domain}, {"constraints", cons}, {"requests", s.goal->requests}};
  } else {
    j["goal"] = nullptr;
  }
  json turns = json::array();
  for (const auto& t : s.turns)
    turns.push_back({{"u", join_tokens(t.user)},
                     {"b", join_tokens(t.belief)},
                     {"d", join_tokens(t.db)},
                     {"a", join_tokens(t.act)},
                     {"r", join_tokens(t.response)}});
  j["turns"] = std::move(turns);
  return j;
}

const json& require(const json& j, const char* field, std::size_t line) {
  if (!j.is_object() || !j.contains(field))
    throw ParseError(fmt::format("line {}: missing required field '{}'", line, field));
  return j.at(field);
}

Tokens field_tokens(const json& turn, const char* field, std::string_view end, std::size_t line, std::size_t t) {
  const json& f = require(turn, field, line);
  if (!f.is_string()) throw ParseError(fmt::format("line {}: turn {} field '{}' must be a string", line, t, field));
  Tokens toks = split_tokens(f.get<std::string>());
  if (toks.empty() || toks.back() != end)
    throw ParseError(fmt::format("line {}: turn {} field '{}' must end with {}", line, t, field, end));
  return toks;
}

DialogSession session_from_json(const json& j, std::size_t line) {
  DialogSession s;
  const json& id = require(j, "id", line);
  if (!id.is_string()) throw ParseError(fmt::format("line {}: field 'id' must be a string", line));
  s.id = id.get<std::string>();
  const json& labeled = require(j, "labeled", line);
  if (!labeled.is_boolean()) throw ParseError(fmt::format("line {}: field 'labeled' must be a boolean", line));
  s.labeled = labeled.get<bool>();
  if (j.contains("goal") && !j.at("goal").is_null()) {
    const json& g = j.at("goal");
    try {
      Goal goal;
      goal.domain = g.at("domain").get<std::string>();
      for (const auto& c : g.at("constraints")) goal.constraints.emplace_back(c.at(0).get<std::string>(), c.at(1).get<std::string>());
      goal.requests = g.at("requests").get<std::vector<std::string>>();
      s.goal = std::move(goal);
    } catch (const json::exception& e) {
      throw ParseError(fmt::format("line {}: malformed field 'goal': {}", line, e.what()));
    }
  }
  const json& turns = require(j, "turns", line);
  if (!turns.is_array() || turns.empty())
    throw ParseError(fmt::format("line {}: field 'turns' must be a non-empty array", line));
  for (std::size_t t = 0; t < turns.size(); ++t) {
    const json& tj = turns[t];
    DialogTurn turn;
    turn.user = field_tokens(tj, "u", tok::kEosU, line, t);
    turn.belief = field_tokens(tj, "b", tok::kEosB, line, t);
    turn.db = field_tokens(tj, "d", tok::kEosD, line, t);
    turn.act = field_tokens(tj, "a", tok::kEosA, line, t);
    turn.response = field_tokens(tj, "r", tok::kEosR, line, t);
    s.turns.push_back(std::move(turn));
  }
  return s;
}

}  // namespace

void save_corpus(const std::filesystem::path& path, const std::vector<DialogSession>& corpus) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
  for (const auto& s : corpus) out << session_to_json(s).dump() << '\n';
}

std::vector<DialogSession> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open corpus file " + path.string());
  std::vector<DialogSession> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (split_tokens(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(fmt::format("line {}: invalid JSON: {}", line_no, e.what()));
    }
    out.push_back(session_from_json(j, line_no));
  }
  return out;
}

void save_world(const std::filesystem::path& ontology_path, const std::filesystem::path& db_path, const World& world) {
  const Ontology& o = world.ontology;
  json oj = {{"domains", o.domains},
             {"slots", o.slots},
             {"informable", o.informable},
             {"values", o.values},
             {"placeholders", o.placeholders}};
  std::ofstream(ontology_path) << oj.dump(2) << '\n';
  json ents = json::object();
  for (const auto& [d, t] : world.db.tables) ents[d] = t.entities;
  std::ofstream(db_path) << json{{"entities", ents}}.dump(2) << '\n';
}

World load_world(const std::filesystem::path& ontology_path, const std::filesystem::path& db_path) {
  World w;
  auto read = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ParseError("cannot open " + p.string());
    try {
      return json::parse(in);
    } catch (const json::parse_error& e) {
      throw ParseError(p.string() + ": " + e.what());
    }
  };
  const json oj = read(ontology_path);
  try {
    w.ontology.domains = oj.at("domains").get<std::vector<std::string>>();
    w.ontology.slots = oj.at("slots").get<std::map<std::string, std::vector<std::string>>>();
    w.ontology.informable = oj.value("informable", std::map<std::string, std::vector<std::string>>{});
    w.ontology.values = oj.at("values").get<std::map<std::string, std::vector<std::string>>>();
    w.ontology.placeholders = oj.at("placeholders").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw ParseError(ontology_path.string() + ": " + e.what());
  }
  const json dj = read(db_path);
  try {
    for (const auto& [d, ents] : dj.at("entities").items())
      w.db.tables[d] = DatabaseTable{d, ents.get<std::vector<Record>>()};
  } catch (const json::exception& e) {
    throw ParseError(db_path.string() + ": " + e.what());
  }
  w.ontology.validate();
  w.db.validate(w.ontology);
  return w;
}

}  // namespace semivar
