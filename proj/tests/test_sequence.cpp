#include <doctest.h>

#include <algorithm>

#include "semivar/corpus.hpp"
#include "semivar/error.hpp"
#include "semivar/sequence.hpp"

using namespace semivar;

namespace {

struct Fixture {
  World world;
  std::vector<DialogSession> corpus;
  Vocabulary vocab;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    GeneratorConfig cfg;
    cfg.num_sessions = 30;
    Fixture x;
    x.world = build_world(cfg, 2);
    x.corpus = generate_corpus(x.world, cfg, 2);
    x.vocab = build_vocabulary(x.world.ontology, x.corpus);
    return x;
  }();
  return f;
}

std::vector<SegmentTag> collapse(const TrainingSequence& seq) {
  std::vector<SegmentTag> out;
  for (SegmentTag t : seq.tags)
    if (t != SegmentTag::kDelim && (out.empty() || out.back() != t)) out.push_back(t);
  return out;
}

DialogSession first_turn_only(const DialogSession& s) {
  DialogSession one = s;
  one.turns.resize(1);
  return one;
}

}  // namespace

TEST_CASE("generative layout: tag order and loss mask") {
  const auto& f = fixture();
  const auto seq = build_generative_sequence(first_turn_only(f.corpus[0]), f.vocab);
  CHECK(collapse(seq) == std::vector<SegmentTag>{SegmentTag::kUser, SegmentTag::kBelief, SegmentTag::kDb,
                                                 SegmentTag::kAct, SegmentTag::kResponse});
  for (const auto& s : f.corpus) {
    const auto g = build_generative_sequence(s, f.vocab);
    REQUIRE(g.tags.size() == g.size());
    REQUIRE(g.loss_mask.size() == g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (g.tags[i] == SegmentTag::kUser) CHECK_FALSE(g.loss_mask[i]);
      if (g.tags[i] == SegmentTag::kBelief || g.tags[i] == SegmentTag::kResponse) CHECK(g.loss_mask[i]);
      const std::string& t = f.vocab.token(g.token_ids[i]);
      if (t == tok::kEosU || t == tok::kSosU) CHECK_FALSE(g.loss_mask[i]);
      if (t == tok::kEosA || t == tok::kEosR || t == tok::kEosB) CHECK(g.loss_mask[i]);
    }
  }
}

TEST_CASE("inference layout: tag order and loss mask") {
  const auto& f = fixture();
  const auto seq = build_inference_sequence(first_turn_only(f.corpus[0]), f.vocab);
  CHECK(collapse(seq) == std::vector<SegmentTag>{SegmentTag::kUser, SegmentTag::kResponse, SegmentTag::kBelief,
                                                 SegmentTag::kDb, SegmentTag::kAct});
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.tags[i] == SegmentTag::kResponse || seq.tags[i] == SegmentTag::kUser) CHECK_FALSE(seq.loss_mask[i]);
    if (seq.tags[i] == SegmentTag::kAct) CHECK(seq.loss_mask[i]);
    const std::string& t = f.vocab.token(seq.token_ids[i]);
    if (t == tok::kEosR) CHECK_FALSE(seq.loss_mask[i]);
    if (t == tok::kEosA) CHECK(seq.loss_mask[i]);
  }
}

TEST_CASE("sequence length equals an independent concatenation count") {
  const auto& f = fixture();
  for (const auto& s : f.corpus) {
    std::size_t expected = 0;
    for (const auto& t : s.turns)
      expected += t.user.size() + t.belief.size() + t.db.size() + t.act.size() + t.response.size() + 5;
    const auto g = build_generative_sequence(s, f.vocab);
    const auto q = build_inference_sequence(s, f.vocab);
    CHECK(g.size() == expected);
    auto a = g.token_ids;
    auto b = q.token_ids;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
    // boundaries partition the sequence
    int pos = 0;
    for (auto [st, en] : g.turn_boundaries) {
      CHECK(st == pos);
      pos = en;
    }
    CHECK(pos == static_cast<int>(g.size()));
  }
}

TEST_CASE("unlabeled sessions are rejected") {
  auto s = fixture().corpus[0];
  s.labeled = false;
  CHECK_THROWS_AS(build_generative_sequence(s, fixture().vocab), ContractError);
  CHECK_THROWS_AS(build_inference_sequence(s, fixture().vocab), ContractError);
}

TEST_CASE("round trip through parse_sequence") {
  const auto& f = fixture();
  for (const auto& s : f.corpus) {
    for (auto layout : {Layout::kGenerative, Layout::kInference}) {
      const auto seq = build_sequence(encode_turns(s, f.vocab), layout, f.vocab);
      CHECK(parse_sequence(seq, f.vocab) == s.turns);
    }
  }
}

TEST_CASE("truncate keeps a suffix of whole turns") {
  const auto& f = fixture();
  const DialogSession* three = nullptr;
  for (const auto& s : f.corpus)
    if (s.turns.size() >= 3) three = &s;
  REQUIRE(three != nullptr);
  const auto seq = build_generative_sequence(*three, f.vocab);
  CHECK(truncate(seq, static_cast<int>(seq.size())).token_ids == seq.token_ids);

  const std::size_t T = seq.turn_boundaries.size();
  const int last_two = seq.turn_boundaries.back().second - seq.turn_boundaries[T - 2].first;
  const auto cut = truncate(seq, last_two);
  CHECK(cut.turn_boundaries.size() == 2);
  CHECK(static_cast<int>(cut.size()) == last_two);

  const auto [ls, le] = seq.turn_boundaries.back();
  CHECK_THROWS_AS(truncate(seq, le - ls - 1), ContractError);
  CHECK_THROWS_AS(truncate(seq, 0), ContractError);
}

TEST_CASE("truncate matches rebuild-from-scratch") {
  const auto& f = fixture();
  for (const auto& s : f.corpus) {
    const auto seq = build_generative_sequence(s, f.vocab);
    for (int max_len : {40, 80, 120}) {
      // oracle: rebuild from the longest turn suffix that fits
      std::optional<TrainingSequence> expected;
      for (std::size_t first = 0; first < s.turns.size(); ++first) {
        DialogSession sub = s;
        sub.turns.assign(s.turns.begin() + static_cast<long>(first), s.turns.end());
        auto rebuilt = build_generative_sequence(sub, f.vocab);
        if (static_cast<int>(rebuilt.size()) <= max_len) {
          expected = rebuilt;
          break;
        }
      }
      if (!expected) {
        CHECK_THROWS_AS(truncate(seq, max_len), ContractError);
        continue;
      }
      const auto got = truncate(seq, max_len);
      CHECK(got.token_ids == expected->token_ids);
      CHECK(got.loss_mask == expected->loss_mask);
      CHECK(got.turn_boundaries == expected->turn_boundaries);
      CHECK(static_cast<int>(got.size()) <= max_len);
    }
  }
}
