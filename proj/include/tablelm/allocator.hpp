// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Word reallocation as minimum-weight perfect matching between words and
// table cells. Vacant cells are matched to zero-cost dummy words.
//
//   solve_exact   min-cost max-flow by successive shortest augmenting paths
//                 (Dijkstra on reduced costs with node potentials)
//   solve_approx  greedy matching of locally heaviest edges after turning
//                 costs into gains Cmax - l(w, i, j)
#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "tablelm/loss_ledger.hpp"
#include "tablelm/word_table.hpp"

namespace tablelm {

enum class SolverMode { Exact, Approx };

inline std::string to_string(SolverMode m) { return m == SolverMode::Exact ? "exact" : "approx"; }

inline SolverMode parse_solver_mode(const std::string& s) {
  if (s == "exact") return SolverMode::Exact;
  if (s == "approx") return SolverMode::Approx;
  throw Error("unknown solver '" + s + "' (expected exact or approx)");
}

inline constexpr std::size_t kDefaultExactCap = 4096;

/// Costs of placing each of `words()` words into each of `cells()` cells,
/// stored in the decomposed form cost(w, k) = R(w, k / stride) + C(w, k % stride).
/// A ledger gives R = Lr, C = Lc, stride = p. A dense matrix gives R = costs,
/// C = 0, stride = 1. The remaining cells() - words() slots are dummy words
/// whose cost is zero everywhere.
class AssignmentProblem {
 public:
  static AssignmentProblem from_ledger(const LossLedger& ledger) {
    AssignmentProblem P;
    P.row_cost_ = ledger.row_losses();
    P.col_cost_ = ledger.col_losses();
    P.stride_ = ledger.side();
    P.cells_ = ledger.side() * ledger.side();
    if (ledger.vocab_size() > P.cells_) throw ConstraintViolation("AssignmentProblem: more words than cells");
    return P;
  }

  /// `costs` is words x cells.
  static AssignmentProblem from_dense(const Matrix& costs) {
    if (costs.rows() > costs.cols()) throw ConstraintViolation("AssignmentProblem: more words than cells");
    AssignmentProblem P;
    P.row_cost_ = costs;
    P.col_cost_ = Matrix::Zero(costs.rows(), 1);
    P.stride_ = 1;
    P.cells_ = static_cast<std::size_t>(costs.cols());
    return P;
  }

  std::size_t words() const { return static_cast<std::size_t>(row_cost_.rows()); }
  std::size_t cells() const { return cells_; }
  std::size_t dummies() const { return cells_ - words(); }
  std::size_t stride() const { return stride_; }

  double cost(std::size_t w, std::size_t cell) const {
    const auto r = static_cast<Eigen::Index>(w);
    return row_cost_(r, static_cast<Eigen::Index>(cell / stride_)) +
           col_cost_(r, static_cast<Eigen::Index>(cell % stride_));
  }

  /// Same problem with a constant added to every cost of word `w`.
  AssignmentProblem shifted(std::size_t w, double c) const {
    AssignmentProblem P = *this;
    P.row_cost_.row(static_cast<Eigen::Index>(w)).array() += c;
    return P;
  }

 private:
  Matrix row_cost_, col_cost_;
  std::size_t stride_ = 1;
  std::size_t cells_ = 0;
};

/// The flow network the exact solver runs on: source -> word (cap 1, cost 0),
/// word -> position (cap 1, cost l(w, cell)), position -> sink (cap 1, cost 0).
/// Words include the dummies. Arcs are implicit; the network is complete
/// bipartite between word and position nodes.
class FlowNetwork {
 public:
  struct Arc {
    int capacity = 0;
    double cost = 0.0;
  };

  explicit FlowNetwork(const AssignmentProblem& problem) : problem_(&problem) {}

  std::size_t word_nodes() const { return problem_->cells(); }
  std::size_t position_nodes() const { return problem_->cells(); }
  std::size_t source() const { return 0; }
  std::size_t word(std::size_t w) const { return 1 + w; }
  std::size_t position(std::size_t k) const { return 1 + word_nodes() + k; }
  std::size_t sink() const { return 1 + word_nodes() + position_nodes(); }
  std::size_t node_count() const { return sink() + 1; }
  std::size_t arc_count() const { return word_nodes() + word_nodes() * position_nodes() + position_nodes(); }

  /// Total supply: one unit per word node, real or dummy.
  std::size_t supply() const { return word_nodes(); }

  /// Word -> position cost; dummy words cost nothing.
  double cost(std::size_t w, std::size_t k) const { return w < problem_->words() ? problem_->cost(w, k) : 0.0; }

  std::optional<Arc> arc(std::size_t from, std::size_t to) const {
    const std::size_t W = word_nodes(), C = position_nodes();
    const auto is_word = [&](std::size_t v) { return v >= 1 && v <= W; };
    const auto is_pos = [&](std::size_t v) { return v > W && v <= W + C; };
    if (from == source() && is_word(to)) return Arc{1, 0.0};
    if (is_word(from) && is_pos(to)) return Arc{1, cost(from - 1, to - 1 - W)};
    if (is_pos(from) && to == sink()) return Arc{1, 0.0};
    return std::nullopt;
  }

 private:
  const AssignmentProblem* problem_;
};

/// cell_of[w] for every real word; dummy words take the cells left over.
struct Assignment {
  std::vector<std::size_t> cell_of;
  double total_cost = 0.0;
};

inline double assignment_cost(const AssignmentProblem& P, const std::vector<std::size_t>& cell_of) {
  double total = 0.0;
  for (std::size_t w = 0; w < cell_of.size(); ++w) total += P.cost(w, cell_of[w]);
  return total;
}

/// Exact minimum-cost perfect matching.
///
/// Word nodes are added one at a time in id order; each addition augments one
/// unit of flow along a shortest source-sink path in the residual network.
/// Reduced costs l(w, k) + pi(w) - pi(k) stay nonnegative on every arc except
/// those leaving the newly added word, so each search is a dense Dijkstra that
/// stops at the first free position. Dummy words are
/// augmented last; each has a zero-cost direct arc to a free position, so they
/// take the free positions in increasing order. O(|V|^2 * cells).
inline Assignment solve_exact(const AssignmentProblem& problem, std::size_t cap = kDefaultExactCap) {
  const std::size_t W = problem.words(), C = problem.cells();
  if (C > cap)
    throw SolverCapExceeded("solve_exact: " + std::to_string(C) + " positions exceed the exact-solver cap of " +
                            std::to_string(cap) + "; use the approx solver");
  const FlowNetwork net(problem);
  constexpr double kInf = std::numeric_limits<double>::infinity();
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  // Free positions must share one potential for the first free position
  // reached to end a shortest path. Column minima are only safe when no
  // position stays free.
  std::vector<double> pot_w(W, 0.0), pot_c(C, 0.0);
  if (W == C)
    for (std::size_t k = 0; k < C; ++k) {
      double lo = kInf;
      for (std::size_t w = 0; w < W; ++w) lo = std::min(lo, net.cost(w, k));
      pot_c[k] = lo;
    }

  std::vector<std::size_t> match_w(W, kNone), match_c(C, kNone);
  std::vector<double> dist_c(C), dist_w(W);
  std::vector<std::size_t> from_c(C);
  std::vector<char> done_c(C), seen_w(W);
  for (std::size_t s = 0; s < W; ++s) {
    std::fill(dist_c.begin(), dist_c.end(), kInf);
    std::fill(done_c.begin(), done_c.end(), 0);
    std::fill(seen_w.begin(), seen_w.end(), 0);
    std::size_t u = s;
    double du = 0.0;
    dist_w[s] = 0.0;
    seen_w[s] = 1;
    std::size_t free_cell = kNone;
    while (true) {
      for (std::size_t k = 0; k < C; ++k) {
        if (done_c[k]) continue;
        const double d = du + net.cost(u, k) + pot_w[u] - pot_c[k];
        if (d < dist_c[k]) {
          dist_c[k] = d;
          from_c[k] = u;
        }
      }
      std::size_t best = kNone;
      for (std::size_t k = 0; k < C; ++k)
        if (!done_c[k] && (best == kNone || dist_c[k] < dist_c[best])) best = k;
      done_c[best] = 1;
      if (match_c[best] == kNone) {
        free_cell = best;
        break;
      }
      // Residual arc position -> matched word has reduced cost zero.
      u = match_c[best];
      du = dist_c[best];
      dist_w[u] = du;
      seen_w[u] = 1;
    }
    // pi <- pi + min(dist, D). Words not yet added may see negative reduced
    // costs, but only on arcs leaving the search root, which Dijkstra tolerates.
    const double D = dist_c[free_cell];
    for (std::size_t k = 0; k < C; ++k) pot_c[k] += done_c[k] ? dist_c[k] : D;
    for (std::size_t w = 0; w <= s; ++w) pot_w[w] += seen_w[w] ? dist_w[w] : D;
    for (std::size_t k = free_cell; k != kNone;) {
      const std::size_t w = from_c[k];
      const std::size_t prev = match_w[w];
      match_w[w] = k;
      match_c[k] = w;
      k = w == s ? kNone : prev;
    }
  }

  Assignment a;
  a.cell_of = std::move(match_w);
  a.total_cost = assignment_cost(problem, a.cell_of);
  return a;
}

/// Greedy matching of locally dominant edges. Gains are Cmax - l(w, k) with
/// Cmax = max l + 1. Edges are ordered by gain, then lower word id, then
/// lower cell. Each vertex points at its best free neighbour; mutual pointers
/// are matched and only vertices pointing at a newly matched vertex rescan.
/// Dummy words are not part of the greedy phase; they fill leftover cells.
inline Assignment solve_approx(const AssignmentProblem& problem) {
  const std::size_t W = problem.words(), C = problem.cells();
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  Assignment a;
  a.cell_of.assign(W, kNone);
  if (W == 0) return a;

  double cmax = -std::numeric_limits<double>::infinity();
  for (std::size_t w = 0; w < W; ++w)
    for (std::size_t k = 0; k < C; ++k) cmax = std::max(cmax, problem.cost(w, k));
  cmax += 1.0;
  const auto gain = [&](std::size_t w, std::size_t k) { return cmax - problem.cost(w, k); };

  std::vector<std::size_t> match_c(C, kNone);
  std::vector<std::size_t> cand_w(W, kNone), cand_c(C, kNone);

  const auto best_cell = [&](std::size_t w) {
    std::size_t best = kNone;
    double bg = 0.0;
    for (std::size_t k = 0; k < C; ++k) {
      if (match_c[k] != kNone) continue;
      const double g = gain(w, k);
      if (best == kNone || g > bg) best = k, bg = g;
    }
    return best;
  };
  const auto best_word = [&](std::size_t k) {
    std::size_t best = kNone;
    double bg = 0.0;
    for (std::size_t w = 0; w < W; ++w) {
      if (a.cell_of[w] != kNone) continue;
      const double g = gain(w, k);
      if (best == kNone || g > bg) best = w, bg = g;
    }
    return best;
  };

  std::vector<std::size_t> queue_words, queue_cells;
  const auto try_match = [&](std::size_t w, std::size_t k) {
    if (w == kNone || k == kNone || cand_w[w] != k || cand_c[k] != w) return;
    if (a.cell_of[w] != kNone || match_c[k] != kNone) return;
    a.cell_of[w] = k;
    match_c[k] = w;
    queue_words.push_back(w);
    queue_cells.push_back(k);
  };

  for (std::size_t w = 0; w < W; ++w) cand_w[w] = best_cell(w);
  for (std::size_t k = 0; k < C; ++k) cand_c[k] = best_word(k);
  for (std::size_t w = 0; w < W; ++w) try_match(w, cand_w[w]);

  std::size_t qw = 0, qc = 0;
  while (qw < queue_words.size() || qc < queue_cells.size()) {
    if (qc < queue_cells.size()) {
      const std::size_t k = queue_cells[qc++];
      for (std::size_t w = 0; w < W; ++w) {
        if (a.cell_of[w] != kNone || cand_w[w] != k) continue;
        cand_w[w] = best_cell(w);
        try_match(w, cand_w[w]);
      }
    }
    if (qw < queue_words.size()) {
      const std::size_t w = queue_words[qw++];
      for (std::size_t k = 0; k < C; ++k) {
        if (match_c[k] != kNone || cand_c[k] != w) continue;
        cand_c[k] = best_word(k);
        if (cand_c[k] != kNone) try_match(cand_c[k], k);
      }
    }
  }
  for (std::size_t w = 0; w < W; ++w)
    if (a.cell_of[w] == kNone) throw Error("solve_approx: word " + std::to_string(w) + " left unmatched");
  a.total_cost = assignment_cost(problem, a.cell_of);
  return a;
}

inline Assignment solve(const AssignmentProblem& problem, SolverMode mode, std::size_t cap = kDefaultExactCap) {
  return mode == SolverMode::Exact ? solve_exact(problem, cap) : solve_approx(problem);
}

struct ReallocationReport {
  WordTable table;
  double old_cost = 0.0;
  double new_cost = 0.0;
  std::size_t moved_words = 0;
  SolverMode mode = SolverMode::Exact;
  double seconds = 0.0;
  bool kept_incumbent = false;
};

/// Re-solves the placement of every word given the ledger's costs. The
/// incumbent allocation is kept whenever the solver does not strictly beat it.
inline ReallocationReport reallocate(const WordTable& table, const LossLedger& ledger, SolverMode mode,
                                     std::size_t cap = kDefaultExactCap) {
  if (ledger.table_hash() != table.hash() || ledger.vocab_size() != table.vocab_size() ||
      ledger.side() != table.side())
    throw HashMismatch("reallocate: ledger was collected against table " + hash_hex(ledger.table_hash()) +
                       ", got table " + hash_hex(table.hash()));
  const auto t0 = std::chrono::steady_clock::now();
  const auto problem = AssignmentProblem::from_ledger(ledger);
  const Assignment sol = solve(problem, mode, cap);

  ReallocationReport rep{table};
  rep.mode = mode;
  rep.old_cost = ledger.incumbent_cost(table);
  if (sol.total_cost < rep.old_cost) {
    const std::size_t p = table.side();
    std::vector<Cell> cells(sol.cell_of.size());
    for (std::size_t w = 0; w < cells.size(); ++w)
      cells[w] = Cell{static_cast<std::uint32_t>(sol.cell_of[w] / p), static_cast<std::uint32_t>(sol.cell_of[w] % p)};
    rep.table = apply_allocation(table, cells);
    rep.new_cost = sol.total_cost;
    for (std::size_t w = 0; w < cells.size(); ++w)
      if (!(cells[w] == table.pos_of(static_cast<WordId>(w)))) ++rep.moved_words;
  } else {
    rep.new_cost = rep.old_cost;
    rep.kept_incumbent = true;
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace tablelm
