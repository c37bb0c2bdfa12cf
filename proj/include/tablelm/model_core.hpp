// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Recurrent language model over a p x p word table. Each word is fed as two
// half-steps sharing one set of recurrent weights: the previous word's column
// embedding produces the state that scores rows, then the current word's row
// embedding produces the state that scores columns. A word's probability is
// the product of its row probability and its column probability.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tablelm/corpus.hpp"
#include "tablelm/error.hpp"
#include "tablelm/parallel.hpp"
#include "tablelm/rng.hpp"
#include "tablelm/word_table.hpp"

namespace tablelm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class CellKind { Tanh, Lstm };

inline std::string to_string(CellKind k) { return k == CellKind::Lstm ? "lstm" : "tanh"; }

inline CellKind parse_cell_kind(const std::string& s) {
  if (s == "lstm") return CellKind::Lstm;
  if (s == "tanh") return CellKind::Tanh;
  throw Error("unknown cell kind '" + s + "' (expected lstm or tanh)");
}

/// Model parameters. Input embeddings Xr, Xc are n x p, output embeddings
/// Yr, Yc are m x p; column i belongs to row (or column) i of the table.
/// For LSTM the recurrent weights stack the input, forget, candidate and
/// output gates: W is 4m x n, U is 4m x m, b is 4m x 1.
struct ModelParams {
  std::size_t n = 0, m = 0, p = 0;
  CellKind kind = CellKind::Lstm;
  Matrix Xr, Xc, Yr, Yc, W, U, b;

  std::size_t gates() const { return kind == CellKind::Lstm ? 4 : 1; }
  std::size_t embedding_count() const { return 2 * (n + m) * p; }
  std::size_t count() const {
    std::size_t total = 0;
    for_each([&](const char*, const Matrix& t) { total += static_cast<std::size_t>(t.size()); });
    return total;
  }

  static ModelParams zeros(std::size_t n, std::size_t m, std::size_t p, CellKind kind) {
    ModelParams P;
    P.n = n, P.m = m, P.p = p, P.kind = kind;
    const auto g = static_cast<Eigen::Index>(P.gates() * m);
    const auto N = static_cast<Eigen::Index>(n), M = static_cast<Eigen::Index>(m), Pp = static_cast<Eigen::Index>(p);
    P.Xr = Matrix::Zero(N, Pp);
    P.Xc = Matrix::Zero(N, Pp);
    P.Yr = Matrix::Zero(M, Pp);
    P.Yc = Matrix::Zero(M, Pp);
    P.W = Matrix::Zero(g, N);
    P.U = Matrix::Zero(g, M);
    P.b = Matrix::Zero(g, 1);
    return P;
  }

  /// Entries uniform in [-scale, scale], drawn tensor by tensor in row-major order.
  static ModelParams uniform(std::size_t n, std::size_t m, std::size_t p, CellKind kind, std::uint64_t seed,
                             double scale = 0.05) {
    auto P = zeros(n, m, p, kind);
    Rng rng(seed);
    P.for_each([&](const char*, Matrix& t) {
      for (Eigen::Index r = 0; r < t.rows(); ++r)
        for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = rng.uniform(-scale, scale);
    });
    return P;
  }

  template <class F>
  void for_each(F&& f) {
    f("Xr", Xr), f("Xc", Xc), f("Yr", Yr), f("Yc", Yc), f("W", W), f("U", U), f("b", b);
  }
  template <class F>
  void for_each(F&& f) const {
    f("Xr", Xr), f("Xc", Xc), f("Yr", Yr), f("Yc", Yc), f("W", W), f("U", U), f("b", b);
  }

  void set_zero() {
    for_each([](const char*, Matrix& t) { t.setZero(); });
  }

  ModelParams& operator+=(const ModelParams& o) {
    Xr += o.Xr, Xc += o.Xc, Yr += o.Yr, Yc += o.Yc, W += o.W, U += o.U, b += o.b;
    return *this;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const char*, const Matrix& t) { ok = ok && t.allFinite(); });
    return ok;
  }

  bool same_shape(const ModelParams& o) const { return n == o.n && m == o.m && p == o.p && kind == o.kind; }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.same_shape(b) && a.Xr == b.Xr && a.Xc == b.Xc && a.Yr == b.Yr && a.Yc == b.Yc && a.W == b.W &&
           a.U == b.U && a.b == b.b;
  }
};

using Gradients = ModelParams;

struct HiddenState {
  Vector h;
  Vector c;  // cell memory; unused for tanh cells

  static HiddenState zeros(std::size_t m) {
    return {Vector::Zero(static_cast<Eigen::Index>(m)), Vector::Zero(static_cast<Eigen::Index>(m))};
  }
};

struct StepOutput {
  HiddenState state_c;  // after consuming the previous word's column embedding
  HiddenState state_r;  // after consuming the current word's row embedding
  Vector row_logits;
  Vector col_logits;

  const Vector& h_c() const { return state_c.h; }
  const Vector& h_r() const { return state_r.h; }
};

/// Max-subtracted softmax.
inline Vector softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

inline Vector log_softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

/// Lowest index of the maximum entry.
inline std::size_t argmax(const Vector& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<std::size_t>(best);
}

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Activations of one half-step, kept for the backward pass.
struct CellCache {
  Vector act;     // tanh: h; lstm: [i f g o] post-activation
  Vector tanh_c;  // lstm only
};

inline HiddenState cell_forward(const ModelParams& P, const Vector& x, const HiddenState& prev, CellCache* cache) {
  Vector z = P.W * x + P.U * prev.h + P.b.col(0);
  HiddenState next;
  if (P.kind == CellKind::Tanh) {
    next.h = z.array().tanh().matrix();
    next.c = prev.c;
    if (cache) cache->act = next.h;
    return next;
  }
  const auto m = static_cast<Eigen::Index>(P.m);
  Vector act(4 * m);
  for (Eigen::Index k = 0; k < m; ++k) {
    act[k] = sigmoid(z[k]);
    act[m + k] = sigmoid(z[m + k]);
    act[2 * m + k] = std::tanh(z[2 * m + k]);
    act[3 * m + k] = sigmoid(z[3 * m + k]);
  }
  next.c = act.segment(m, m).cwiseProduct(prev.c) + act.segment(0, m).cwiseProduct(act.segment(2 * m, m));
  Vector tc = next.c.array().tanh().matrix();
  next.h = act.segment(3 * m, m).cwiseProduct(tc);
  if (cache) {
    cache->act = std::move(act);
    cache->tanh_c = std::move(tc);
  }
  return next;
}

// Given dL/dh and dL/dc at the output of a half-step, returns dL/dz and fills
// the gradients flowing into the previous state.
inline Vector cell_backward(const ModelParams& P, const CellCache& cache, const HiddenState& prev, const Vector& dh,
                            const Vector& dc_in, Vector& dc_prev) {
  if (P.kind == CellKind::Tanh) {
    dc_prev = Vector::Zero(static_cast<Eigen::Index>(P.m));
    return dh.cwiseProduct((1.0 - cache.act.array().square()).matrix());
  }
  const auto m = static_cast<Eigen::Index>(P.m);
  const auto i = cache.act.segment(0, m).array();
  const auto f = cache.act.segment(m, m).array();
  const auto g = cache.act.segment(2 * m, m).array();
  const auto o = cache.act.segment(3 * m, m).array();
  const auto tc = cache.tanh_c.array();
  Eigen::ArrayXd dc = dh.array() * o * (1.0 - tc.square()) + dc_in.array();
  Vector dz(4 * m);
  dz.segment(0, m) = (dc * g * i * (1.0 - i)).matrix();
  dz.segment(m, m) = (dc * prev.c.array() * f * (1.0 - f)).matrix();
  dz.segment(2 * m, m) = (dc * i * (1.0 - g.square())).matrix();
  dz.segment(3 * m, m) = (dh.array() * tc * o * (1.0 - o)).matrix();
  dc_prev = (dc * f).matrix();
  return dz;
}

inline void check_index(std::size_t idx, std::size_t p, const char* what) {
  if (idx >= p)
    throw IndexOutOfRange(std::string(what) + " index " + std::to_string(idx) + " out of range for p=" +
                          std::to_string(p));
}

}  // namespace detail

/// One full word step of the two half-step recurrence.
inline StepOutput forward_step(const ModelParams& P, const HiddenState& prev, std::size_t prev_col,
                               std::size_t cur_row) {
  detail::check_index(prev_col, P.p, "column");
  detail::check_index(cur_row, P.p, "row");
  StepOutput out;
  out.state_c = detail::cell_forward(P, P.Xc.col(static_cast<Eigen::Index>(prev_col)), prev, nullptr);
  out.row_logits = P.Yr.transpose() * out.state_c.h;
  out.state_r = detail::cell_forward(P, P.Xr.col(static_cast<Eigen::Index>(cur_row)), out.state_c, nullptr);
  out.col_logits = P.Yc.transpose() * out.state_r.h;
  return out;
}

/// P(w) = P_r(row of w) * P_c(column of w).
inline double word_prob(const StepOutput& step, const WordTable& table, WordId w) {
  const Cell c = table.pos_of(w);
  return softmax(step.row_logits)[c.row] * softmax(step.col_logits)[c.col];
}

// ---------------------------------------------------------------------------
// Lane-level forward/backward with truncated BPTT.

struct ForwardOptions {
  double dropout = 0.0;         // applied to embeddings and pre-softmax states
  bool teacher_forcing = true;  // false: feed the argmax row instead of the true row
};

/// Everything the backward pass needs from one half-step.
struct HalfStepTrace {
  std::uint32_t in_index = 0;  // column (even half) or row (odd half) fed in
  std::uint32_t target = 0;    // row (even half) or column (odd half) scored
  Vector x;                    // input embedding after dropout
  Vector in_mask, out_mask;    // empty when dropout is off
  HiddenState prev;
  detail::CellCache cache;
  Vector h_out;  // state fed to the softmax, after dropout
  Vector logp;   // log-softmax of the logits
};

/// Half-steps 2t and 2t+1 belong to word step t.
struct LaneTrace {
  std::vector<HalfStepTrace> halves;
  std::vector<WordId> targets;
};

struct LaneResult {
  double nll = 0.0;
  std::size_t tokens = 0;
  HiddenState final_state;
};

namespace detail {

inline Vector dropout_mask(std::size_t size, double prob, Rng& rng) {
  Vector mask(static_cast<Eigen::Index>(size));
  const double keep = 1.0 / (1.0 - prob);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask[i] = rng.bernoulli(prob) ? 0.0 : keep;
  return mask;
}

}  // namespace detail

/// Runs one lane: inputs[t] is the previous word, targets[t] the predicted one.
/// `rng` is required only when opts.dropout > 0. Pass `trace` to record what
/// backward_lane needs; `on_step(w, row_logp, col_logp)` observes each word.
template <class OnStep>
LaneResult forward_lane(const ModelParams& P, const WordTable& table, std::span<const WordId> inputs,
                        std::span<const WordId> targets, HiddenState state, const ForwardOptions& opts, Rng* rng,
                        LaneTrace* trace, OnStep&& on_step) {
  if (inputs.size() != targets.size()) throw Error("forward_lane: inputs/targets length mismatch");
  if (opts.dropout < 0.0 || opts.dropout >= 1.0) throw Error("forward_lane: dropout must lie in [0, 1)");
  const bool drop = opts.dropout > 0.0;
  if (drop && rng == nullptr) throw Error("forward_lane: dropout requires an rng");
  if (trace) {
    trace->halves.clear();
    trace->halves.reserve(2 * inputs.size());
    trace->targets.assign(targets.begin(), targets.end());
  }
  LaneResult res;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const Cell prev_cell = table.pos_of(inputs[t]);
    const Cell tgt_cell = table.pos_of(targets[t]);
    Vector logp_row;
    std::uint32_t fed_row = tgt_cell.row;
    for (int half = 0; half < 2; ++half) {
      HalfStepTrace h;
      h.in_index = half == 0 ? prev_cell.col : fed_row;
      h.target = half == 0 ? tgt_cell.row : tgt_cell.col;
      const Matrix& E = half == 0 ? P.Xc : P.Xr;
      const Matrix& O = half == 0 ? P.Yr : P.Yc;
      h.x = E.col(h.in_index);
      if (drop) {
        h.in_mask = detail::dropout_mask(P.n, opts.dropout, *rng);
        h.x = h.x.cwiseProduct(h.in_mask);
      }
      h.prev = std::move(state);
      state = detail::cell_forward(P, h.x, h.prev, trace ? &h.cache : nullptr);
      h.h_out = state.h;
      if (drop) {
        h.out_mask = detail::dropout_mask(P.m, opts.dropout, *rng);
        h.h_out = h.h_out.cwiseProduct(h.out_mask);
      }
      const Vector logits = O.transpose() * h.h_out;
      h.logp = log_softmax(logits);
      res.nll -= h.logp[h.target];
      if (half == 0) {
        if (!opts.teacher_forcing) fed_row = static_cast<std::uint32_t>(argmax(logits));
        logp_row = h.logp;
      } else {
        on_step(targets[t], logp_row, h.logp);
      }
      if (trace) trace->halves.push_back(std::move(h));
    }
    ++res.tokens;
  }
  res.final_state = std::move(state);
  return res;
}

inline LaneResult forward_lane(const ModelParams& P, const WordTable& table, std::span<const WordId> inputs,
                               std::span<const WordId> targets, HiddenState state, const ForwardOptions& opts,
                               Rng* rng, LaneTrace* trace) {
  return forward_lane(P, table, inputs, targets, std::move(state), opts, rng, trace,
                      [](WordId, const Vector&, const Vector&) {});
}

inline constexpr std::size_t kFullBackprop = std::numeric_limits<std::size_t>::max();

/// Accumulates dNLL/dparams of one traced lane into `g`. The initial state of
/// the lane is treated as a constant. `max_backprop_steps` splits the lane into
/// windows of max_backprop_steps + 1 word steps; no gradient crosses a window
/// boundary (0 isolates every step).
inline void backward_lane(const ModelParams& P, const LaneTrace& trace, Gradients& g,
                          std::size_t max_backprop_steps = kFullBackprop) {
  const auto m = static_cast<Eigen::Index>(P.m);
  Vector dh_next = Vector::Zero(m), dc_next = Vector::Zero(m);
  Vector dc_prev;
  for (std::size_t k = trace.halves.size(); k-- > 0;) {
    const HalfStepTrace& h = trace.halves[k];
    const bool row_half = k % 2 == 0;
    Vector dlogits = h.logp.array().exp().matrix();
    dlogits[h.target] -= 1.0;
    Matrix& gO = row_half ? g.Yr : g.Yc;
    const Matrix& O = row_half ? P.Yr : P.Yc;
    gO.noalias() += h.h_out * dlogits.transpose();
    Vector dh = O * dlogits;
    if (h.out_mask.size()) dh = dh.cwiseProduct(h.out_mask);
    dh += dh_next;

    Vector dz = detail::cell_backward(P, h.cache, h.prev, dh, dc_next, dc_prev);
    g.W.noalias() += dz * h.x.transpose();
    g.U.noalias() += dz * h.prev.h.transpose();
    g.b.col(0) += dz;
    Vector dx = P.W.transpose() * dz;
    if (h.in_mask.size()) dx = dx.cwiseProduct(h.in_mask);
    (row_half ? g.Xc : g.Xr).col(h.in_index) += dx;

    dh_next = P.U.transpose() * dz;
    dc_next = std::move(dc_prev);
    if (row_half) {
      const std::size_t step = k / 2;
      const bool cut = max_backprop_steps != kFullBackprop && step % (max_backprop_steps + 1) == 0;
      if (cut) {
        dh_next.setZero();
        dc_next.setZero();
      }
    }
  }
}

/// Forward state of a whole block, one trace per lane.
struct BatchPass {
  std::vector<LaneTrace> traces;
  double nll = 0.0;
  std::size_t tokens = 0;
};

/// Forward over every lane of `batch`, updating `states` in place (one per
/// lane). Lane l draws dropout masks from Rng(lane_seeds[l]).
inline BatchPass forward_batch(const ModelParams& P, const WordTable& table, const Batch& batch,
                               std::vector<HiddenState>& states, const ForwardOptions& opts,
                               std::span<const std::uint64_t> lane_seeds = {}, std::size_t threads = 1) {
  if (states.size() != batch.lanes) throw Error("forward_batch: one state per lane required");
  if (opts.dropout > 0.0 && lane_seeds.size() != batch.lanes) throw Error("forward_batch: one seed per lane required");
  BatchPass pass;
  pass.traces.resize(batch.lanes);
  std::vector<LaneResult> results(batch.lanes);
  parallel_for(batch.lanes, threads, [&](std::size_t l) {
    Rng rng(lane_seeds.empty() ? 0 : lane_seeds[l]);
    std::span<const WordId> in(batch.inputs.data() + l * batch.steps, batch.steps);
    std::span<const WordId> tg(batch.targets.data() + l * batch.steps, batch.steps);
    results[l] = forward_lane(P, table, in, tg, states[l], opts, &rng, &pass.traces[l]);
  });
  for (std::size_t l = 0; l < batch.lanes; ++l) {
    pass.nll += results[l].nll;
    pass.tokens += results[l].tokens;
    states[l] = std::move(results[l].final_state);
  }
  return pass;
}

/// Gradients of the block NLL. Lane gradients are summed in lane order so the
/// result is independent of `threads`.
inline Gradients backward(const ModelParams& P, const BatchPass& pass, std::size_t max_backprop_steps = kFullBackprop,
                          std::size_t threads = 1) {
  auto total = Gradients::zeros(P.n, P.m, P.p, P.kind);
  if (pass.traces.size() == 1) {
    backward_lane(P, pass.traces[0], total, max_backprop_steps);
    return total;
  }
  std::vector<Gradients> lanes(pass.traces.size());
  parallel_for(lanes.size(), threads, [&](std::size_t l) {
    lanes[l] = Gradients::zeros(P.n, P.m, P.p, P.kind);
    backward_lane(P, pass.traces[l], lanes[l], max_backprop_steps);
  });
  for (const auto& g : lanes) total += g;
  return total;
}

/// NLL of `segment[1..]` given `segment[0]` as context, starting from `initial`
/// (zeros by default), with teacher forcing and no dropout.
inline std::pair<double, std::size_t> sequence_nll(const ModelParams& P, const WordTable& table,
                                                   std::span<const WordId> segment,
                                                   const HiddenState* initial = nullptr) {
  if (segment.size() < 2) throw EmptyInputError("sequence_nll: segment has no token to predict");
  auto state = initial ? *initial : HiddenState::zeros(P.m);
  auto r = forward_lane(P, table, segment.first(segment.size() - 1), segment.subspan(1), std::move(state),
                        ForwardOptions{}, nullptr, nullptr);
  return {r.nll, r.tokens};
}

struct Prediction {
  std::size_t row = 0;
  std::size_t col = 0;
  WordId word = WordTable::kVacant;  // kVacant when the chosen cell is empty
  HiddenState state;                 // state after the column half-step
};

/// Greedy two-stage decoding: the argmax row's embedding feeds the second
/// half-step, whose argmax picks the column.
inline Prediction predict_next(const ModelParams& P, const WordTable& table, const HiddenState& state,
                               std::size_t prev_col) {
  detail::check_index(prev_col, P.p, "column");
  Prediction out;
  auto hc = detail::cell_forward(P, P.Xc.col(static_cast<Eigen::Index>(prev_col)), state, nullptr);
  out.row = argmax(P.Yr.transpose() * hc.h);
  out.state = detail::cell_forward(P, P.Xr.col(static_cast<Eigen::Index>(out.row)), hc, nullptr);
  out.col = argmax(P.Yc.transpose() * out.state.h);
  out.word = table.word_at(out.row, out.col);
  return out;
}

}  // namespace tablelm
