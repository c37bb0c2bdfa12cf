// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails. Runtime budgets are part of each criterion.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "tablelm/tablelm.hpp"

#ifndef TABLELM_DATA_DIR
#error "TABLELM_DATA_DIR must point at the bundled corpus"
#endif

using namespace tablelm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;

void criterion(int id, const char* name, double budget_seconds, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = secs < budget_seconds;
  const bool pass = o.ok && in_time;
  if (!pass) ++failures;
  std::cout << "[" << id << "] " << (pass ? "PASS" : "FAIL") << " " << name << " ("
            << fmt("%.2f s of %.0f s budget", secs, budget_seconds) << (in_time ? "" : ", over budget") << "): "
            << o.detail << std::endl;
}

std::vector<WordId> random_tokens(std::size_t len, std::size_t vocab, Rng& rng) {
  std::vector<WordId> out(len);
  for (auto& w : out) w = static_cast<WordId>(rng.below(vocab));
  return out;
}

LossLedger random_ledger(const WordTable& table, Rng& rng) {
  auto L = LossLedger::for_table(table);
  const auto p = static_cast<Eigen::Index>(table.side());
  for (std::size_t w = 0; w < table.vocab_size(); ++w) {
    const std::size_t hits = rng.below(4);
    for (std::size_t k = 0; k < hits; ++k) {
      Vector r(p), c(p);
      for (Eigen::Index i = 0; i < p; ++i) r[i] = rng.uniform(-3, 3), c[i] = rng.uniform(-3, 3);
      L.accumulate(r, c, static_cast<WordId>(w));
    }
  }
  return L;
}

Outcome size_arithmetic() {
  const std::uint64_t n = 1024, m = 1024, v = 10'000'000;
  const std::uint64_t p = table_side(v);
  const auto r = audit_size(n, m, p, v, CellKind::Lstm);
  const bool ok = p == oracle::ceil_sqrt_search(v) &&
                  oracle::BigInt(r.vanilla_embedding_bytes) == oracle::vanilla_embedding_bytes(n, m, v) &&
                  oracle::BigInt(r.embedding_bytes) == oracle::table_embedding_bytes(n, m, p) &&
                  r.vanilla_embedding_bytes == 81'920'000'000ull;
  return {ok, fmt("p=%llu, vanilla=%llu B (%.1f GB), table=%llu B (%.1f MB)", (unsigned long long)p,
                  (unsigned long long)r.vanilla_embedding_bytes, r.vanilla_embedding_bytes / 1e9,
                  (unsigned long long)r.embedding_bytes, r.embedding_bytes / 1e6)};
}

Outcome normalization() {
  Rng rng(101);
  double worst_marg = 0.0, worst_joint = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t p = 1 + rng.below(64);
    const std::size_t n = 1 + rng.below(16), m = 1 + rng.below(16);
    const auto kind = trial % 2 ? CellKind::Lstm : CellKind::Tanh;
    const auto P = ModelParams::uniform(n, m, p, kind, rng.next_u64(), 1.0);
    HiddenState s = HiddenState::zeros(m);
    for (Eigen::Index i = 0; i < s.h.size(); ++i) s.h[i] = rng.uniform(-1, 1), s.c[i] = rng.uniform(-3, 3);
    const auto out = forward_step(P, s, rng.below(p), rng.below(p));
    const Vector pr = softmax(out.row_logits), pc = softmax(out.col_logits);
    worst_marg = std::max({worst_marg, std::abs(pr.sum() - 1.0), std::abs(pc.sum() - 1.0)});
    double joint = 0.0;
    for (Eigen::Index i = 0; i < pr.size(); ++i)
      for (Eigen::Index j = 0; j < pc.size(); ++j) joint += pr[i] * pc[j];
    worst_joint = std::max(worst_joint, std::abs(joint - 1.0));
  }
  return {worst_marg <= 1e-12 && worst_joint <= 1e-10,
          fmt("max |sum P_r - 1|, |sum P_c - 1| = %.2e (tol 1e-12); max |sum P_r P_c - 1| = %.2e (tol 1e-10)",
              worst_marg, worst_joint)};
}

Outcome gradients() {
  // Relative error |a - n| / max(|a|, |n|, floor); the floor keeps entries
  // whose true value is ~0 from dividing roundoff by roundoff.
  constexpr double kFloor = 1e-6;
  Rng rng(202);
  const std::size_t V = 14;  // p = 4
  double worst = 0.0;
  std::string where;
  for (auto kind : {CellKind::Tanh, CellKind::Lstm}) {
    for (int b = 0; b < 5; ++b) {
      const auto table = random_allocate(V, rng.next_u64());
      const auto P = ModelParams::uniform(8, 8, table.side(), kind, rng.next_u64(), 0.5);
      TokenStream s;
      s.ids = random_tokens(3 * 6 + 1, V, rng);
      const Batch batch = batch_iter(s, 3, 6).front();
      ForwardOptions opts;
      opts.dropout = b % 2 ? 0.3 : 0.0;
      const std::vector<std::uint64_t> seeds = {rng.next_u64(), rng.next_u64(), rng.next_u64()};
      auto loss = [&](const ModelParams& Q) {
        std::vector<HiddenState> st(3, HiddenState::zeros(8));
        return forward_batch(Q, table, batch, st, opts, seeds).nll;
      };
      std::vector<HiddenState> st(3, HiddenState::zeros(8));
      const auto g = backward(P, forward_batch(P, table, batch, st, opts, seeds));
      const auto cmp = oracle::compare_gradients(g, oracle::finite_difference(P, loss, 1e-5), kFloor);
      if (cmp.max_rel > worst) {
        worst = cmp.max_rel;
        where = to_string(kind) + " batch " + std::to_string(b) + " " + cmp.worst;
      }
    }
  }
  return {worst < 1e-4, fmt("max relative error %.2e over 10 batches (tol 1e-4, floor %.0e); worst: %s", worst, kFloor,
                            where.c_str())};
}

std::vector<std::string> first_tokens(const std::vector<std::string>& lines, std::size_t budget) {
  std::vector<std::string> out;
  std::size_t tokens = 0;
  for (const auto& l : lines) {
    if (tokens >= budget) break;
    out.push_back(l);
    tokens += split_tokens(l).size();
  }
  return out;
}

Outcome ledger_identity() {
  const auto lines = first_tokens(read_lines_file((fs::path(TABLELM_DATA_DIR) / "toy.train.txt").string()), 10'000);
  const auto vocab = build_vocab(lines, 1);
  const auto stream = encode(lines, vocab);
  const auto table = random_allocate(vocab.size(), 7);
  const auto P = ModelParams::uniform(16, 16, table.side(), CellKind::Lstm, 7, 0.3);

  // Whole stream as one sequence.
  auto L = LossLedger::for_table(table);
  std::span<const WordId> ids(stream.ids);
  Rng unused(0);
  forward_lane(P, table, ids.first(ids.size() - 1), ids.subspan(1), HiddenState::zeros(P.m), {}, &unused, nullptr,
               [&](WordId w, const Vector& r, const Vector& c) { L.accumulate_log_probs(w, r, c); });
  const double nll = sequence_nll(P, table, ids).first;
  const double rel1 = std::abs(L.incumbent_cost(table) - nll) / nll;

  // Trainer layout: contiguous lanes scored block by block.
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.bptt_len = 35;
  const auto lanes = collect_ledger(cfg, P, table, stream);
  const auto blocks = batch_iter(stream, cfg.batch_size, cfg.bptt_len);
  const std::size_t lane_len = (stream.size() - 1) / cfg.batch_size, used = blocks.size() * blocks.front().steps;
  double lane_nll = 0.0;
  for (std::size_t l = 0; l < cfg.batch_size; ++l) lane_nll += sequence_nll(P, table, ids.subspan(l * lane_len, used + 1)).first;
  const double rel2 = std::abs(lanes.incumbent_cost(table) - lane_nll) / lane_nll;
  return {rel1 <= 1e-6 && rel2 <= 1e-6 && L.total_occurrences() == ids.size() - 1,
          fmt("%zu tokens: single sequence rel diff %.2e, %zu-lane layout rel diff %.2e (tol 1e-6)", ids.size(), rel1,
              cfg.batch_size, rel2)};
}

Outcome exact_optimality() {
  Rng rng(505);
  int agree = 0;
  std::string bad;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t p = 2 + trial % 2;
    const std::size_t V = 1 + rng.below(p * p);
    LossLedger L(V, p);
    for (std::size_t w = 0; w < V; ++w) {
      Vector r(static_cast<Eigen::Index>(p)), c(static_cast<Eigen::Index>(p));
      for (Eigen::Index i = 0; i < r.size(); ++i) {
        // Half the instances use small integers so that ties occur.
        r[i] = trial % 4 < 2 ? -static_cast<double>(rng.below(4)) : -rng.uniform(0, 10);
        c[i] = trial % 4 < 2 ? -static_cast<double>(rng.below(4)) : -rng.uniform(0, 10);
      }
      L.accumulate_log_probs(static_cast<WordId>(w), r, c);
    }
    const auto prob = AssignmentProblem::from_ledger(L);
    const double e = solve_exact(prob).total_cost, b = oracle::brute_force_min_cost(prob);
    if (e == b) ++agree;
    else if (bad.empty()) bad = fmt("; first mismatch trial %d: exact %.17g vs %.17g", trial, e, b);
  }
  return {agree == 200, fmt("%d/200 instances equal to brute force%s", agree, bad.c_str())};
}

Outcome feasibility() {
  Rng rng(606);
  int feasible = 0, monotone = 0;
  double best_gain = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t V = 2 + rng.below(300);
    const auto table = random_allocate(V, rng.next_u64());
    const auto L = random_ledger(table, rng);
    const auto prob = AssignmentProblem::from_ledger(L);
    bool ok = true;
    for (auto mode : {SolverMode::Exact, SolverMode::Approx}) {
      const auto a = solve(prob, mode);
      std::vector<int> per_cell(prob.cells(), 0);
      ok = ok && a.cell_of.size() == V;  // every word placed exactly once
      for (auto k : a.cell_of) ok = ok && k < prob.cells() && ++per_cell[k] == 1;  // no cell reused
      std::vector<Cell> cells;
      for (auto k : a.cell_of)
        cells.push_back(Cell{static_cast<std::uint32_t>(k / table.side()), static_cast<std::uint32_t>(k % table.side())});
      if (ok) ok = apply_allocation(table, cells).vocab_size() == V;
    }
    feasible += ok;
    const auto rep = reallocate(table, L, SolverMode::Exact);
    const double after = L.incumbent_cost(rep.table), before = L.incumbent_cost(table);
    if (after <= before) ++monotone;
    best_gain = std::max(best_gain, (before - after) / std::max(1e-300, std::abs(before)));
  }
  return {feasible == 100 && monotone == 100,
          fmt("%d/100 ledgers with bijective exact and approx assignments; %d/100 reallocations did not increase the "
              "objective (largest relative decrease %.1f%%)",
              feasible, monotone, 100 * best_gain)};
}

Outcome bootstrap_efficacy() {
  const fs::path dir(TABLELM_DATA_DIR);
  const auto train_lines = read_lines_file((dir / "toy.train.txt").string());
  const auto vocab = build_vocab(train_lines, 3);
  TrainData data{encode(train_lines, vocab), encode(read_lines_file((dir / "toy.valid.txt").string()), vocab)};
  TrainConfig cfg;  // defaults
  cfg.rounds = 3;
  const auto res = bootstrap(cfg, data, vocab);
  std::string trace;
  bool ok = res.reports.size() == 3;
  for (std::size_t i = 0; i < res.reports.size(); ++i) {
    const auto& r = res.reports[i];
    trace += fmt("%sround %zu val %.2f (%zu epochs)", i ? ", " : "", r.round, r.val_ppl, r.epochs);
    if (i) ok = ok && r.val_ppl <= 1.02 * res.reports[i - 1].val_ppl;
  }
  const auto& first = res.reports.front();
  const bool improved = first.realloc_new_cost && *first.realloc_new_cost < *first.realloc_old_cost;
  return {ok && improved,
          fmt("|V|=%zu, %zu train tokens; %s; round-1 matching objective %.1f -> %.1f", vocab.size(), data.train.size(),
              trace.c_str(), first.realloc_old_cost.value_or(NAN), first.realloc_new_cost.value_or(NAN))};
}

Outcome memorization() {
  std::vector<std::string> lines(1000, "a b c d");
  const auto vocab = build_vocab(lines, 1);
  TrainData data{encode(lines, vocab), encode(lines, vocab)};
  TrainConfig cfg;
  cfg.rounds = 1;
  cfg.dropout = 0.0;
  const auto res = bootstrap(cfg, data, vocab);
  const double during = res.reports.front().train_ppl;
  const double after = evaluate(res.state.params, res.table, vocab, data.train).ppl;
  return {std::max(during, after) < 1.1,
          fmt("last-epoch training PPL %.4f, re-scored training PPL %.4f after %zu of %zu epochs (target < 1.1)", during,
              after, res.reports.front().epochs, cfg.epochs)};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

// Wall-clock fields are the only nondeterministic report content.
std::string strip_timings(const std::string& jsonl) {
  std::istringstream is(jsonl);
  std::string out;
  for (std::string line; std::getline(is, line);) {
    auto j = nlohmann::json::parse(line);
    for (const char* k : {"train_seconds", "realloc_seconds", "realloc_fraction"}) j.erase(k);
    out += j.dump() + "\n";
  }
  return out;
}

Outcome reproducibility() {
  const fs::path data_dir(TABLELM_DATA_DIR);
  const auto lines = first_tokens(read_lines_file((data_dir / "toy.train.txt").string()), 20'000);
  const auto vocab = build_vocab(lines, 3);
  TrainData data{encode(lines, vocab), encode(read_lines_file((data_dir / "toy.valid.txt").string()), vocab)};
  TrainConfig cfg;
  cfg.rounds = 2;
  cfg.epochs = 2;
  cfg.threads = 1;
  const auto root = fs::temp_directory_path() / "tablelm_acceptance_repro";
  fs::remove_all(root);
  for (const char* run : {"a", "b"}) {
    BootstrapOptions opts;
    opts.out_dir = root / run;
    opts.dump_ledgers = true;
    bootstrap(cfg, data, vocab, opts);
  }
  std::size_t files = 0, same = 0;
  for (const auto& entry : fs::directory_iterator(root / "a")) {
    const auto name = entry.path().filename();
    std::string a = slurp(root / "a" / name), b = slurp(root / "b" / name);
    if (name == "report.jsonl") a = strip_timings(a), b = strip_timings(b);
    ++files;
    same += !a.empty() && a == b;
  }
  fs::remove_all(root);
  return {files >= 8 && same == files,
          fmt("%zu/%zu artifacts bit-identical across two seeded single-thread runs (checkpoints, tables, ledgers, "
              "report without wall-clock fields)",
              same, files)};
}

}  // namespace

int main() {
  criterion(1, "size arithmetic", 1, size_arithmetic);
  criterion(2, "softmax normalization", 10, normalization);
  criterion(3, "gradient correctness", 60, gradients);
  criterion(4, "ledger reconstruction identity", 60, ledger_identity);
  criterion(5, "exact matching optimality", 60, exact_optimality);
  criterion(6, "matching feasibility and improvement", 60, feasibility);
  criterion(7, "bootstrap efficacy", 1800, bootstrap_efficacy);
  criterion(8, "memorization", 300, memorization);
  criterion(9, "reproducibility", 600, reproducibility);
  std::cout << (failures ? "acceptance: " + std::to_string(failures) + " criteria failed" : std::string("acceptance: all criteria passed"))
            << std::endl;
  return failures ? 1 : 0;
}
