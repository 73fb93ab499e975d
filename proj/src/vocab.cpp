#include "semivar/vocab.hpp"

#include <sstream>

#include "semivar/error.hpp"

namespace semivar {

Tokens split_tokens(std::string_view text) {
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\n' || text[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != '\n' && text[j] != '\r') ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string join_tokens(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

Vocabulary::Vocabulary() {
  for (auto d : tok::kDelimiters) add(std::string(d));
  add(std::string(tok::kUnk));
  for (auto d : tok::kDbBuckets) add(std::string(d));
}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens_in_id_order) {
  for (const auto& t : tokens_in_id_order) {
    if (index_.count(t)) throw ParseError("duplicate vocabulary token '" + t + "'");
    add(t);
  }
  for (auto d : tok::kDelimiters)
    if (!contains(d)) throw ParseError("vocabulary lacks delimiter " + std::string(d));
  if (!contains(tok::kUnk)) throw ParseError("vocabulary lacks <unk>");
}

int Vocabulary::add(const std::string& token) {
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it != index_.end()) return it->second;
  return index_.at(std::string(tok::kUnk));
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

TokenIds Vocabulary::encode(const Tokens& tokens) const {
  TokenIds ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

Tokens Vocabulary::decode(const TokenIds& ids) const {
  Tokens out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

}  // namespace semivar
