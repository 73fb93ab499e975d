#include "semivar/autodiff.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "semivar/error.hpp"
#include "semivar/kernels.hpp"

namespace semivar::ad {

namespace {
constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;
}  // namespace

Var Graph::push(std::vector<double> value, bool requires_grad,
                std::function<void(Graph&, const std::vector<double>&)> backward) {
  Node node;
  node.requires_grad = track_ && requires_grad;
  if (node.requires_grad) {
    node.backward = std::move(backward);
    ++tracked_;
    retained_bytes_ += value.size() * sizeof(double);
  }
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

std::vector<double>& Graph::grad_buffer(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

Var Graph::constant(std::vector<double> value) { return push(std::move(value), false, nullptr); }

Var Graph::leaf(std::vector<double> value) {
  // Leaves need a (no-op) backward so they count as tracked and keep a grad.
  return push(std::move(value), true, [](Graph&, const std::vector<double>&) {});
}

Var Graph::one_hot(int index, int size) {
  std::vector<double> v(static_cast<std::size_t>(size), 0.0);
  v.at(static_cast<std::size_t>(index)) = 1.0;
  return constant(std::move(v));
}

Var Graph::embedding(ParamRef table, int row, int dim) {
  const auto d = static_cast<std::size_t>(dim);
  const auto offset = static_cast<std::size_t>(row) * d;
  if (offset + d > table.value.size()) throw ContractError("embedding row out of range");
  std::vector<double> out(table.value.begin() + static_cast<std::ptrdiff_t>(offset),
                          table.value.begin() + static_cast<std::ptrdiff_t>(offset + d));
  if (!needs(table)) return push(std::move(out), false, nullptr);
  return push(std::move(out), true, [table, offset, d](Graph&, const std::vector<double>& g) {
    for (std::size_t c = 0; c < d; ++c) table.grad[offset + c] += g[c];
  });
}

Var Graph::relaxed_embedding(ParamRef table, Var weights, int dim) {
  const auto d = static_cast<std::size_t>(dim);
  const std::span<const double> w = value(weights);
  if (w.size() * d != table.value.size()) throw ContractError("relaxed row width != vocabulary size");
  std::vector<double> out(d, 0.0);
  kernels::matvec_transposed_acc(table.value, w, out);
  const bool want_w = needs(weights);
  const bool want_t = needs(table);
  if (!want_w && !want_t) return push(std::move(out), false, nullptr);
  return push(std::move(out), true, [table, weights, d, want_w, want_t](Graph& gr, const std::vector<double>& g) {
    if (want_w) {
      std::vector<double> tmp(gr.value(weights).size());
      kernels::matvec(table.value, {}, g, tmp);
      auto& gw = gr.grad_buffer(weights);
      for (std::size_t k = 0; k < tmp.size(); ++k) gw[k] += tmp[k];
    }
    if (want_t) kernels::outer_acc(gr.value(weights), g, table.grad);
    (void)d;
  });
}

Var Graph::affine(ParamRef w, ParamRef b, Var x, int out_dim) {
  const auto rows = static_cast<std::size_t>(out_dim);
  std::vector<double> out(rows);
  kernels::matvec(w.value, b.value, value(x), out);
  const bool want_x = needs(x);
  const bool want_w = needs(w);
  const bool want_b = needs(b);
  if (!want_x && !want_w && !want_b) return push(std::move(out), false, nullptr);
  return push(std::move(out), true, [w, b, x, want_x, want_w, want_b](Graph& gr, const std::vector<double>& g) {
    if (want_x) kernels::matvec_transposed_acc(w.value, g, gr.grad_buffer(x));
    if (want_w) kernels::outer_acc(g, gr.value(x), w.grad);
    if (want_b)
      for (std::size_t r = 0; r < g.size(); ++r) b.grad[r] += g[r];
  });
}

Var Graph::add(Var a, Var b) {
  const auto va = value(a);
  const auto vb = value(b);
  if (va.size() != vb.size()) throw ContractError("add: size mismatch");
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  const bool want_a = needs(a);
  const bool want_b = needs(b);
  if (!want_a && !want_b) return push(std::move(out), false, nullptr);
  return push(std::move(out), true, [a, b, want_a, want_b](Graph& gr, const std::vector<double>& g) {
    if (want_a) {
      auto& ga = gr.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (want_b) {
      auto& gb = gr.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

Var Graph::add_param(Var a, ParamRef p) {
  const auto va = value(a);
  if (va.size() != p.value.size()) throw ContractError("add_param: size mismatch");
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + p.value[i];
  const bool want_a = needs(a);
  const bool want_p = needs(p);
  if (!want_a && !want_p) return push(std::move(out), false, nullptr);
  return push(std::move(out), true, [a, p, want_a, want_p](Graph& gr, const std::vector<double>& g) {
    if (want_a) {
      auto& ga = gr.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (want_p)
      for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
  });
}

Var Graph::scale(Var a, double c) {
  const auto va = value(a);
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * va[i];
  if (!needs(a)) return push(std::move(out), false, nullptr);
  return push(std::move(out), true, [a, c](Graph& gr, const std::vector<double>& g) {
    auto& ga = gr.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

Var Graph::mul(Var a, Var b) {
  const auto va = value(a);
  const auto vb = value(b);
  if (va.size() != vb.size()) throw ContractError("mul: size mismatch");
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  const bool want_a = needs(a);
  const bool want_b = needs(b);
  if (!want_a && !want_b) return push(std::move(out), false, nullptr);
  return push(std::move(out), true, [a, b, want_a, want_b](Graph& gr, const std::vector<double>& g) {
    const std::vector<double> xa(gr.value(a).begin(), gr.value(a).end());
    const std::vector<double> xb(gr.value(b).begin(), gr.value(b).end());
    if (want_a) {
      auto& ga = gr.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb[i];
    }
    if (want_b) {
      auto& gb = gr.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
    }
  });
}

Var Graph::layer_norm(Var x, ParamRef gain, ParamRef bias, double eps) {
  const auto vx = value(x);
  const std::size_t n = vx.size();
  const double mean = std::accumulate(vx.begin(), vx.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double v : vx) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double inv_std = 1.0 / std::sqrt(var + eps);
  std::vector<double> xhat(n);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    xhat[i] = (vx[i] - mean) * inv_std;
    out[i] = gain.value[i] * xhat[i] + bias.value[i];
  }
  const bool want_x = needs(x);
  const bool want_p = needs(gain) || needs(bias);
  if (!want_x && !want_p) return push(std::move(out), false, nullptr);
  return push(std::move(out), true,
              [x, gain, bias, xhat = std::move(xhat), inv_std, want_x](Graph& gr, const std::vector<double>& g) {
                const std::size_t n = g.size();
                if (gain.trainable())
                  for (std::size_t i = 0; i < n; ++i) gain.grad[i] += g[i] * xhat[i];
                if (bias.trainable())
                  for (std::size_t i = 0; i < n; ++i) bias.grad[i] += g[i];
                if (!want_x) return;
                double sum_g = 0.0;
                double sum_gx = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                  const double gh = g[i] * gain.value[i];
                  sum_g += gh;
                  sum_gx += gh * xhat[i];
                }
                const double inv_n = 1.0 / static_cast<double>(n);
                auto& gx = gr.grad_buffer(x);
                for (std::size_t i = 0; i < n; ++i) {
                  const double gh = g[i] * gain.value[i];
                  gx[i] += inv_std * (gh - inv_n * sum_g - xhat[i] * inv_n * sum_gx);
                }
              });
}

Var Graph::gelu(Var x) {
  const auto vx = value(x);
  std::vector<double> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = vx[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kSqrt2OverPi * (v + kGeluCubic * v * v * v)));
  }
  if (!needs(x)) return push(std::move(out), false, nullptr);
  return push(std::move(out), true, [x](Graph& gr, const std::vector<double>& g) {
    const auto vx = gr.value(x);
    auto& gx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = vx[i];
      const double t = std::tanh(kSqrt2OverPi * (v + kGeluCubic * v * v * v));
      const double dt = (1.0 - t * t) * kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * v * v);
      gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Var Graph::attention(Var query, std::span<const Var> keys, std::span<const Var> values, int heads) {
  if (keys.size() != values.size() || keys.empty()) throw ContractError("attention: bad key/value lists");
  const auto q = value(query);
  const std::size_t d = q.size();
  const auto h = static_cast<std::size_t>(heads);
  const std::size_t hd = d / h;
  const std::size_t n = keys.size();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> weights(h * n);
  std::vector<double> out(d, 0.0);
  for (std::size_t head = 0; head < h; ++head) {
    const std::size_t off = head * hd;
    double* w = weights.data() + head * n;
    double max_s = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      const auto k = value(keys[j]);
      double s = 0.0;
      for (std::size_t c = 0; c < hd; ++c) s += q[off + c] * k[off + c];
      w[j] = s * inv_scale;
      max_s = std::max(max_s, w[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      w[j] = std::exp(w[j] - max_s);
      z += w[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      w[j] /= z;
      const auto v = value(values[j]);
      for (std::size_t c = 0; c < hd; ++c) out[off + c] += w[j] * v[off + c];
    }
  }

  bool want = needs(query);
  for (std::size_t j = 0; j < n && !want; ++j) want = needs(keys[j]) || needs(values[j]);
  if (!want) return push(std::move(out), false, nullptr);

  std::vector<Var> k_ids(keys.begin(), keys.end());
  std::vector<Var> v_ids(values.begin(), values.end());
  return push(std::move(out), true,
              [query, k_ids = std::move(k_ids), v_ids = std::move(v_ids), weights = std::move(weights), h, hd,
               inv_scale](Graph& gr, const std::vector<double>& g) {
                const std::size_t n = k_ids.size();
                const auto q = gr.value(query);
                std::vector<double> ga(n);
                std::vector<double> gs(n);
                std::vector<double> gq(q.size(), 0.0);
                for (std::size_t head = 0; head < h; ++head) {
                  const std::size_t off = head * hd;
                  const double* w = weights.data() + head * n;
                  double dot = 0.0;
                  for (std::size_t j = 0; j < n; ++j) {
                    const auto v = gr.value(v_ids[j]);
                    double s = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) s += g[off + c] * v[off + c];
                    ga[j] = s;
                    dot += w[j] * s;
                  }
                  for (std::size_t j = 0; j < n; ++j) gs[j] = w[j] * (ga[j] - dot) * inv_scale;
                  for (std::size_t j = 0; j < n; ++j) {
                    if (gr.needs(v_ids[j])) {
                      auto& gv = gr.grad_buffer(v_ids[j]);
                      for (std::size_t c = 0; c < hd; ++c) gv[off + c] += w[j] * g[off + c];
                    }
                    const auto k = gr.value(k_ids[j]);
                    for (std::size_t c = 0; c < hd; ++c) gq[off + c] += gs[j] * k[off + c];
                    if (gr.needs(k_ids[j])) {
                      auto& gk = gr.grad_buffer(k_ids[j]);
                      for (std::size_t c = 0; c < hd; ++c) gk[off + c] += gs[j] * q[off + c];
                    }
                  }
                }
                if (gr.needs(query)) {
                  auto& gqb = gr.grad_buffer(query);
                  for (std::size_t c = 0; c < gq.size(); ++c) gqb[c] += gq[c];
                }
              });
}

Var Graph::log_softmax(Var logits) {
  const auto x = value(logits);
  const double m = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (double v : x) z += std::exp(v - m);
  const double lse = m + std::log(z);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - lse;
  if (!needs(logits)) return push(std::move(out), false, nullptr);
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(out), true, [logits, self](Graph& gr, const std::vector<double>& g) {
    const auto y = gr.value(Var{self});
    const double total = std::accumulate(g.begin(), g.end(), 0.0);
    auto& gx = gr.grad_buffer(logits);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] - std::exp(y[i]) * total;
  });
}

Var Graph::exp(Var x) {
  const auto vx = value(x);
  std::vector<double> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(vx[i]);
  if (!needs(x)) return push(std::move(out), false, nullptr);
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(out), true, [x, self](Graph& gr, const std::vector<double>& g) {
    const auto y = gr.value(Var{self});
    auto& gx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
  });
}

Var Graph::straight_through(int token, Var probs) {
  const std::size_t k = value(probs).size();
  if (token < 0 || static_cast<std::size_t>(token) >= k) throw ContractError("straight_through: token out of range");
  std::vector<double> out(k, 0.0);
  out[static_cast<std::size_t>(token)] = 1.0;
  if (!needs(probs)) return push(std::move(out), false, nullptr);
  return push(std::move(out), true, [probs](Graph& gr, const std::vector<double>& g) {
    auto& gp = gr.grad_buffer(probs);
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
  });
}

Var Graph::pick(Var v, int index) {
  const auto vv = value(v);
  const auto i = static_cast<std::size_t>(index);
  if (index < 0 || i >= vv.size()) throw ContractError("pick: index out of range");
  std::vector<double> out{vv[i]};
  if (!needs(v)) return push(std::move(out), false, nullptr);
  return push(std::move(out), true, [v, i](Graph& gr, const std::vector<double>& g) { gr.grad_buffer(v)[i] += g[0]; });
}

Var Graph::kl_term(Var log_q, Var log_p, double log_floor) {
  const auto lq = value(log_q);
  const auto lp = value(log_p);
  if (lq.size() != lp.size()) throw ContractError("kl_term: size mismatch");
  double acc = 0.0;
  for (std::size_t v = 0; v < lq.size(); ++v) {
    const double qv = std::exp(lq[v]);
    if (qv == 0.0) continue;
    acc += qv * (std::max(lp[v], log_floor) - lq[v]);
  }
  const bool want_q = needs(log_q);
  const bool want_p = needs(log_p);
  if (!want_q && !want_p) return push({acc}, false, nullptr);
  return push({acc}, true, [log_q, log_p, log_floor, want_q, want_p](Graph& gr, const std::vector<double>& g) {
    const auto lq = gr.value(log_q);
    const auto lp = gr.value(log_p);
    const std::size_t k = lq.size();
    std::vector<double> dq(k, 0.0);
    std::vector<double> dp(k, 0.0);
    for (std::size_t v = 0; v < k; ++v) {
      const double qv = std::exp(lq[v]);
      if (qv == 0.0) continue;
      const bool floored = lp[v] < log_floor;
      const double lpv = floored ? log_floor : lp[v];
      dq[v] = g[0] * qv * (lpv - lq[v] - 1.0);
      dp[v] = floored ? 0.0 : g[0] * qv;
    }
    if (want_q) {
      auto& gq = gr.grad_buffer(log_q);
      for (std::size_t v = 0; v < k; ++v) gq[v] += dq[v];
    }
    if (want_p) {
      auto& gp = gr.grad_buffer(log_p);
      for (std::size_t v = 0; v < k; ++v) gp[v] += dp[v];
    }
  });
}

Var Graph::sum(std::span<const Var> scalars) {
  double acc = 0.0;
  bool want = false;
  for (Var s : scalars) {
    acc += scalar(s);
    want = want || needs(s);
  }
  if (!want) return push({acc}, false, nullptr);
  std::vector<Var> ids(scalars.begin(), scalars.end());
  return push({acc}, true, [ids = std::move(ids)](Graph& gr, const std::vector<double>& g) {
    for (Var s : ids)
      if (gr.needs(s)) gr.grad_buffer(s)[0] += g[0];
  });
}

void Graph::backward(Var root, double seed) {
  if (!track_) throw ContractError("backward on a graph built without tracking");
  for (auto& n : nodes_) n.grad.clear();
  if (!needs(root)) return;
  auto& g = grad_buffer(root);
  for (double& v : g) v = seed;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

}  // namespace semivar::ad
