#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "semivar/model.hpp"
#include "semivar/rng.hpp"
#include "semivar/variational.hpp"

namespace testutil {

inline semivar::ModelConfig tiny_config(int vocab, std::uint64_t seed, int hidden = 8, int layers = 1,
                                        double init_std = 0.3) {
  semivar::ModelConfig c;
  c.vocab_size = vocab;
  c.layers = layers;
  c.heads = 2;
  c.hidden = hidden;
  c.context_len = 64;
  c.seed = seed;
  c.init_std = init_std;
  return c;
}

// Random observed session over a K-token vocabulary.
inline semivar::ObservedSession random_session(int vocab, int turns, int stop, std::uint64_t seed, int user_len = 2,
                                               int resp_len = 2) {
  semivar::Rng rng(seed);
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  semivar::ObservedSession s;
  s.stop_token = stop;
  for (int t = 0; t < turns; ++t) {
    semivar::ObservedTurn turn;
    for (int i = 0; i < user_len; ++i) turn.user.push_back(tok(rng));
    for (int i = 0; i < resp_len; ++i) turn.response.push_back(tok(rng));
    s.turns.push_back(std::move(turn));
  }
  return s;
}

// Central difference of f with respect to x.
inline double central_difference(const std::function<double()>& f, double& x, double h = 1e-5) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

inline double rel_error(double a, double b, double abs_floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), abs_floor});
}

}  // namespace testutil
