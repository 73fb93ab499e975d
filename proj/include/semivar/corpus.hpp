#pragma once

// Synthetic task-oriented dialog corpora: ontology, simulated database,
// delexicalization, the belief/act grammars, corpus files and label splits.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "semivar/vocab.hpp"

namespace semivar {

struct Ontology {
  std::vector<std::string> domains;
  // domain -> every slot an entity record may carry
  std::map<std::string, std::vector<std::string>> slots;
  // domain -> slots that may appear as belief constraints
  std::map<std::string, std::vector<std::string>> informable;
  // slot -> surface values; a value may span several tokens
  std::map<std::string, std::vector<std::string>> values;
  // slot -> placeholder token, e.g. "[value_name]"
  std::map<std::string, std::string> placeholders;

  // Throws ConfigError when an invariant is broken.
  void validate() const;
  bool is_slot(const std::string& token) const;
  std::optional<std::string> domain_of_token(const std::string& token) const;  // "[hotel]" -> "hotel"
};

std::string domain_token(const std::string& domain);
std::string placeholder_for(const std::string& slot);

using Record = std::map<std::string, std::string>;

struct DatabaseTable {
  std::string domain;
  std::vector<Record> entities;
};

struct Database {
  std::map<std::string, DatabaseTable> tables;
  const DatabaseTable* find(const std::string& domain) const;
  void validate(const Ontology& ontology) const;
};

// Parsed `[domain] slot value (slot value)* ([domain] ...)*`; domains and
// constraints keep their textual order.
struct BeliefState {
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> domains;
  // Lowercased, slot-sorted canonical token string (delimiter excluded).
  std::string normalized() const;
  const std::vector<std::pair<std::string, std::string>>* constraints(const std::string& domain) const;
};

struct ActGroup {
  std::string domain;
  std::string act;  // e.g. "[inform]"
  std::vector<std::string> slots;
};

// Strips a trailing delimiter if present. Returns nullopt on grammar failure.
std::optional<BeliefState> parse_belief(const Tokens& tokens, const Ontology& ontology);
std::optional<std::vector<ActGroup>> parse_act(const Tokens& tokens, const Ontology& ontology);
std::string normalize_act(const std::vector<ActGroup>& groups);

struct DialogTurn {
  Tokens user;      // ends with <eos_u>
  Tokens belief;    // ends with <eos_b>
  Tokens db;        // ends with <eos_db>
  Tokens act;       // ends with <eos_a>
  Tokens response;  // delexicalized, ends with <eos_r>

  bool operator==(const DialogTurn&) const = default;
};

struct Goal {
  std::string domain;
  std::vector<std::pair<std::string, std::string>> constraints;
  std::vector<std::string> requests;

  bool operator==(const Goal&) const = default;
};

struct DialogSession {
  std::string id;
  std::vector<DialogTurn> turns;
  bool labeled = true;
  std::optional<Goal> goal;

  bool operator==(const DialogSession&) const = default;
};

struct CorpusSplit {
  std::vector<DialogSession> labeled;
  std::vector<DialogSession> unlabeled;
  double proportion = 1.0;
  std::uint64_t seed = 0;
};

// Replaces ontology values by placeholders, longest match first, then leftmost.
Tokens delexicalize(const Tokens& response, const Ontology& ontology);

// Records of `db` matching every constraint of the belief for the belief's
// (single) domain. Unknown domain or unparseable belief -> empty.
std::vector<Record> db_query(const BeliefState& belief, const Database& db);
std::vector<Record> db_query_tokens(const Tokens& belief_tokens, const Ontology& ontology, const Database& db);

// 0 -> [db_0], 1 -> [db_1], 2..3 -> [db_2], >3 -> [db_3]
std::string db_bucket(std::size_t count);

struct GeneratorConfig {
  int num_domains = 2;
  int slots_per_domain = 3;  // informable slots
  int values_per_slot = 4;
  int entities_per_domain = 10;
  int num_sessions = 300;
  int max_constraints = 2;
  std::string id_prefix = "syn";
};

struct World {
  Ontology ontology;
  Database db;
};

// Deterministic ontology + database for a generator config.
World build_world(const GeneratorConfig& cfg, std::uint64_t seed);
// Sessions from a templated user simulator and rule-based policy; the hidden
// belief/db/act of each turn is recoverable from its user input and response.
std::vector<DialogSession> generate_corpus(const World& world, const GeneratorConfig& cfg, std::uint64_t seed);

// Vocabulary covering delimiters, ontology symbols and every corpus token, in
// a deterministic order.
Vocabulary build_vocabulary(const Ontology& ontology, const std::vector<DialogSession>& corpus);

CorpusSplit split_by_label_proportion(const std::vector<DialogSession>& corpus, double proportion,
                                      std::uint64_t seed);

void save_corpus(const std::filesystem::path& path, const std::vector<DialogSession>& corpus);
std::vector<DialogSession> load_corpus(const std::filesystem::path& path);

void save_world(const std::filesystem::path& ontology_path, const std::filesystem::path& db_path,
                const World& world);
World load_world(const std::filesystem::path& ontology_path, const std::filesystem::path& db_path);

// Drops delimiter tokens.
Tokens strip_delimiters(const Tokens& tokens);

}  // namespace semivar
