#pragma once

#include <array>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace semivar {

using Tokens = std::vector<std::string>;
using TokenIds = std::vector<int>;

// Special tokens. The ten segment delimiters come first so their ids are
// stable across vocabularies.
namespace tok {
inline constexpr std::string_view kSosU = "<sos_u>";
inline constexpr std::string_view kEosU = "<eos_u>";
inline constexpr std::string_view kSosB = "<sos_b>";
inline constexpr std::string_view kEosB = "<eos_b>";
inline constexpr std::string_view kSosD = "<sos_db>";
inline constexpr std::string_view kEosD = "<eos_db>";
inline constexpr std::string_view kSosA = "<sos_a>";
inline constexpr std::string_view kEosA = "<eos_a>";
inline constexpr std::string_view kSosR = "<sos_r>";
inline constexpr std::string_view kEosR = "<eos_r>";
inline constexpr std::string_view kUnk = "<unk>";

inline constexpr std::array<std::string_view, 10> kDelimiters = {kSosU, kEosU, kSosB, kEosB, kSosD,
                                                                 kEosD, kSosA, kEosA, kSosR, kEosR};
inline constexpr std::array<std::string_view, 4> kDbBuckets = {"[db_0]", "[db_1]", "[db_2]", "[db_3]"};
}  // namespace tok

Tokens split_tokens(std::string_view text);
std::string join_tokens(const Tokens& tokens);

// Closed whitespace-token vocabulary. Ids 0..9 are the segment delimiters,
// followed by <unk> and the db-bucket tokens, then registered tokens in
// insertion order.
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& tokens_in_id_order);

  int add(const std::string& token);
  int id(std::string_view token) const;  // <unk> id if absent
  bool contains(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenIds encode(const Tokens& tokens) const;
  Tokens decode(const TokenIds& ids) const;

  int unk() const { return id(tok::kUnk); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace semivar
