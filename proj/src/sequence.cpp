#include "semivar/sequence.hpp"

#include <fmt/format.h>

#include "semivar/error.hpp"

namespace semivar {

namespace {

// Prepends the start delimiter; fields already end with their end delimiter.
TokenIds segment(const Tokens& field, std::string_view sos, const Vocabulary& vocab) {
  TokenIds ids{vocab.id(sos)};
  for (const auto& t : field) ids.push_back(vocab.id(t));
  return ids;
}

void append(TrainingSequence& seq, const TokenIds& ids, SegmentTag tag, bool scored) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    seq.token_ids.push_back(ids[i]);
    const bool delim = i == 0 || i + 1 == ids.size();
    seq.tags.push_back(delim ? SegmentTag::kDelim : tag);
    seq.loss_mask.push_back(scored);
  }
}

// Latent ids hold three sub-segments; tag each by its delimiter pair.
void append_latent(TrainingSequence& seq, const TokenIds& ids, const Vocabulary& vocab) {
  SegmentTag current = SegmentTag::kBelief;
  for (int id : ids) {
    const std::string& t = vocab.token(id);
    SegmentTag tag = current;
    if (t == tok::kSosB) current = SegmentTag::kBelief, tag = SegmentTag::kDelim;
    else if (t == tok::kSosD) current = SegmentTag::kDb, tag = SegmentTag::kDelim;
    else if (t == tok::kSosA) current = SegmentTag::kAct, tag = SegmentTag::kDelim;
    else if (t == tok::kEosB || t == tok::kEosD || t == tok::kEosA) tag = SegmentTag::kDelim;
    seq.token_ids.push_back(id);
    seq.tags.push_back(tag);
    seq.loss_mask.push_back(true);
  }
}

}  // namespace

std::vector<TurnIds> encode_turns(const DialogSession& session, const Vocabulary& vocab) {
  std::vector<TurnIds> out;
  out.reserve(session.turns.size());
  for (const auto& t : session.turns) {
    TurnIds ids;
    ids.user = segment(t.user, tok::kSosU, vocab);
    ids.latent = segment(t.belief, tok::kSosB, vocab);
    const TokenIds d = segment(t.db, tok::kSosD, vocab);
    const TokenIds a = segment(t.act, tok::kSosA, vocab);
    ids.latent.insert(ids.latent.end(), d.begin(), d.end());
    ids.latent.insert(ids.latent.end(), a.begin(), a.end());
    ids.response = segment(t.response, tok::kSosR, vocab);
    out.push_back(std::move(ids));
  }
  return out;
}

TrainingSequence build_sequence(const std::vector<TurnIds>& turns, Layout layout, const Vocabulary& vocab) {
  TrainingSequence seq;
  for (const auto& t : turns) {
    const int start = static_cast<int>(seq.size());
    append(seq, t.user, SegmentTag::kUser, false);
    if (layout == Layout::kGenerative) {
      append_latent(seq, t.latent, vocab);
      append(seq, t.response, SegmentTag::kResponse, true);
    } else {
      append(seq, t.response, SegmentTag::kResponse, false);
      append_latent(seq, t.latent, vocab);
    }
    seq.turn_boundaries.emplace_back(start, static_cast<int>(seq.size()));
  }
  return seq;
}

TrainingSequence build_generative_sequence(const DialogSession& session, const Vocabulary& vocab) {
  if (!session.labeled) throw ContractError("generative sequence requested for unlabeled session " + session.id);
  return build_sequence(encode_turns(session, vocab), Layout::kGenerative, vocab);
}

TrainingSequence build_inference_sequence(const DialogSession& session, const Vocabulary& vocab) {
  if (!session.labeled) throw ContractError("inference sequence requested for unlabeled session " + session.id);
  return build_sequence(encode_turns(session, vocab), Layout::kInference, vocab);
}

TrainingSequence truncate(const TrainingSequence& seq, int max_len) {
  if (max_len < 1) throw ContractError("truncate: max_len must be >= 1");
  if (static_cast<int>(seq.size()) <= max_len) return seq;
  if (seq.turn_boundaries.empty()) throw ContractError("truncate: sequence has no turns");
  std::size_t first = seq.turn_boundaries.size();
  const int end = seq.turn_boundaries.back().second;
  while (first > 0 && end - seq.turn_boundaries[first - 1].first <= max_len) --first;
  if (first == seq.turn_boundaries.size()) {
    const auto [s, e] = seq.turn_boundaries.back();
    throw ContractError(fmt::format("truncate: last turn has {} tokens, exceeds max_len {}", e - s, max_len));
  }
  const int offset = seq.turn_boundaries[first].first;
  TrainingSequence out;
  out.token_ids.assign(seq.token_ids.begin() + offset, seq.token_ids.begin() + end);
  out.tags.assign(seq.tags.begin() + offset, seq.tags.begin() + end);
  out.loss_mask.assign(seq.loss_mask.begin() + offset, seq.loss_mask.begin() + end);
  for (std::size_t t = first; t < seq.turn_boundaries.size(); ++t)
    out.turn_boundaries.emplace_back(seq.turn_boundaries[t].first - offset, seq.turn_boundaries[t].second - offset);
  return out;
}

std::vector<DialogTurn> parse_sequence(const TrainingSequence& seq, const Vocabulary& vocab) {
  std::vector<DialogTurn> turns;
  for (const auto& [start, end] : seq.turn_boundaries) {
    DialogTurn turn;
    Tokens* field = nullptr;
    for (int i = start; i < end; ++i) {
      const std::string& t = vocab.token(seq.token_ids[static_cast<std::size_t>(i)]);
      if (t == tok::kSosU) field = &turn.user;
      else if (t == tok::kSosB) field = &turn.belief;
      else if (t == tok::kSosD) field = &turn.db;
      else if (t == tok::kSosA) field = &turn.act;
      else if (t == tok::kSosR) field = &turn.response;
      else if (field) field->push_back(t);
      else throw ParseError(fmt::format("parse_sequence: token '{}' outside any segment at {}", t, i));
    }
    turns.push_back(std::move(turn));
  }
  return turns;
}

}  // namespace semivar
