#pragma once

// Session-level training sequences for the generative layout
// (u b d a r per turn) and the inference layout (u r b d a per turn).

#include <cstdint>
#include <utility>
#include <vector>

#include "semivar/corpus.hpp"
#include "semivar/vocab.hpp"

namespace semivar {

enum class SegmentTag : std::uint8_t { kUser, kBelief, kDb, kAct, kResponse, kDelim };

enum class Layout : std::uint8_t { kGenerative, kInference };

struct TrainingSequence {
  TokenIds token_ids;
  std::vector<SegmentTag> tags;
  std::vector<bool> loss_mask;
  std::vector<std::pair<int, int>> turn_boundaries;  // [start, end) per turn

  std::size_t size() const { return token_ids.size(); }
};

// One turn split into the pieces the variational code works with:
// user = <sos_u> u.. <eos_u>, latent = <sos_b> b.. <eos_b> <sos_db> d <eos_db> <sos_a> a.. <eos_a>,
// response = <sos_r> r.. <eos_r>.
struct TurnIds {
  TokenIds user;
  TokenIds latent;
  TokenIds response;
};

std::vector<TurnIds> encode_turns(const DialogSession& session, const Vocabulary& vocab);

TrainingSequence build_generative_sequence(const DialogSession& session, const Vocabulary& vocab);
TrainingSequence build_inference_sequence(const DialogSession& session, const Vocabulary& vocab);
TrainingSequence build_sequence(const std::vector<TurnIds>& turns, Layout layout, const Vocabulary& vocab);

// Drops the earliest whole turns until the sequence fits in max_len.
// Throws ContractError when even the last turn alone is too long.
TrainingSequence truncate(const TrainingSequence& seq, int max_len);

// Recovers the dialog turns of a built sequence from its delimiters.
std::vector<DialogTurn> parse_sequence(const TrainingSequence& seq, const Vocabulary& vocab);

}  // namespace semivar
