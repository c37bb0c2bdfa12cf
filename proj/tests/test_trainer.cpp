// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "tablelm/trainer.hpp"

using namespace tablelm;

namespace {

struct Toy {
  Vocabulary vocab;
  TrainData data;
};

Toy toy_corpus(std::size_t sentences, std::uint64_t seed) {
  const std::vector<std::string> words = {"red", "green", "blue", "cat", "dog", "bird", "runs", "sleeps", "sings"};
  Rng rng(seed);
  std::vector<std::string> train, valid;
  for (std::size_t i = 0; i < sentences + sentences / 5; ++i) {
    const std::string line =
        words[rng.below(3)] + " " + words[3 + rng.below(3)] + " " + words[6 + rng.below(3)];
    (i < sentences ? train : valid).push_back(line);
  }
  Toy t{build_vocab(train, 1), {}};
  t.data.train = encode(train, t.vocab);
  t.data.valid = encode(valid, t.vocab);
  return t;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.n = cfg.m = 8;
  cfg.batch_size = 4;
  cfg.bptt_len = 6;
  cfg.epochs = 3;
  cfg.rounds = 1;
  cfg.dropout = 0.2;
  cfg.init_scale = 0.1;
  return cfg;
}

}  // namespace

TEST(SgdStep, ZeroGradientsLeaveParamsUnchanged) {
  auto P = ModelParams::uniform(2, 3, 2, CellKind::Lstm, 1);
  const auto before = P;
  EXPECT_EQ(sgd_step(P, Gradients::zeros(2, 3, 2, CellKind::Lstm), 1.0, 5.0), 0.0);
  EXPECT_EQ(P, before);
}

TEST(SgdStep, ClipsToGlobalNorm) {
  auto P = ModelParams::zeros(1, 1, 1, CellKind::Tanh);
  auto g = Gradients::zeros(1, 1, 1, CellKind::Tanh);
  g.b(0, 0) = 6.0;
  g.Xr(0, 0) = 8.0;
  EXPECT_DOUBLE_EQ(sgd_step(P, g, 1.0, 5.0), 10.0);
  EXPECT_DOUBLE_EQ(P.b(0, 0), -3.0);
  EXPECT_DOUBLE_EQ(P.Xr(0, 0), -4.0);
}

TEST(SgdStep, QuadraticLossDecreasesMonotonically) {
  auto P = ModelParams::zeros(1, 1, 1, CellKind::Tanh);
  P.b(0, 0) = -4.0;
  auto loss = [&] { return std::pow(P.b(0, 0) - 3.0, 2); };
  double prev = loss();
  for (int i = 0; i < 10; ++i) {
    auto g = Gradients::zeros(1, 1, 1, CellKind::Tanh);
    g.b(0, 0) = 2.0 * (P.b(0, 0) - 3.0);
    sgd_step(P, g, 0.1, 5.0);
    const double cur = loss();
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(SgdStep, NonFiniteGradientNamesTensor) {
  auto P = ModelParams::zeros(1, 1, 1, CellKind::Tanh);
  auto g = Gradients::zeros(1, 1, 1, CellKind::Tanh);
  g.U(0, 0) = std::nan("");
  try {
    sgd_step(P, g, 1.0, 5.0);
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("tensor U"), std::string::npos);
  }
  EXPECT_THROW(sgd_step(P, Gradients::zeros(2, 1, 1, CellKind::Tanh), 1.0, 5.0), Error);
}

TEST(LrSchedule, ImprovingKeepsRate) {
  LrSchedule s;
  for (double v : {100.0, 90.0, 80.0, 79.9}) EXPECT_EQ(s.update(v), 1.0);
}

TEST(LrSchedule, HalvesOncePerPatienceWindow) {
  LrSchedule s;
  s.patience = 3;
  s.update(50.0);
  std::vector<double> lrs;
  for (int i = 0; i < 7; ++i) lrs.push_back(s.update(50.0));
  EXPECT_EQ(lrs, (std::vector<double>{1.0, 1.0, 0.5, 0.5, 0.5, 0.25, 0.25}));
}

TEST(LrSchedule, ClosedFormAfterDecays) {
  LrSchedule s;
  s.lr = 0.8;
  s.update(10.0);
  for (int k = 1; k <= 12; ++k) EXPECT_EQ(s.update(11.0), 0.8 * std::ldexp(1.0, -k));
  const auto back = LrSchedule::from_json(s.to_json());
  EXPECT_EQ(back.lr, s.lr);
  EXPECT_EQ(back.decays, 12u);
}

TEST(ApplyDropout, IdentityCases) {
  Rng rng(1);
  const Vector v = Vector::LinSpaced(5, -1, 3);
  EXPECT_EQ(apply_dropout(v, 0.0, rng, true), v);
  EXPECT_EQ(apply_dropout(v, 0.7, rng, false), v);
  EXPECT_THROW(apply_dropout(v, 1.0, rng, true), Error);
}

TEST(ApplyDropout, ExpectationMatchesInput) {
  Rng rng(2);
  const Vector v = Vector::LinSpaced(8, 0.5, 4.0);
  for (double prob : {0.5, 0.2}) {
    Vector sum = Vector::Zero(8);
    const int masks = 100000;
    for (int i = 0; i < masks; ++i) sum += apply_dropout(v, prob, rng, true);
    const Vector mean = sum / masks;
    for (Eigen::Index i = 0; i < v.size(); ++i) EXPECT_NEAR(mean[i], v[i], 0.01 * v[i]);
  }
}

TEST(TrainConfig, ParsesKeyValueText) {
  std::istringstream is("# comment\n n = 16\nm=24 # trailing\ncell = tanh\nsolver = approx\ndropout = 0\n\nseed=7\n");
  const auto cfg = TrainConfig::parse(is);
  EXPECT_EQ(cfg.n, 16u);
  EXPECT_EQ(cfg.m, 24u);
  EXPECT_EQ(cfg.cell, CellKind::Tanh);
  EXPECT_EQ(cfg.solver, SolverMode::Approx);
  EXPECT_EQ(cfg.dropout, 0.0);
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_EQ(cfg.lr, 1.0);
  EXPECT_EQ(cfg.clip_norm, 5.0);
}

TEST(TrainConfig, RejectsBadInput) {
  std::istringstream unknown("bogus = 1\n");
  EXPECT_THROW(TrainConfig::parse(unknown), ConstraintViolation);
  TrainConfig cfg;
  EXPECT_THROW(cfg.set("n", "many"), Error);
  cfg.dropout = 1.0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(TrainConfig, JsonRoundTripsThroughSet) {
  TrainConfig a = small_config();
  a.cell = CellKind::Tanh;
  a.ledger = LedgerMode::FreshPass;
  TrainConfig b;
  const auto j = a.to_json();
  for (auto it = j.begin(); it != j.end(); ++it)
    b.set(it.key(), it->is_string() ? it->get<std::string>() : it->dump());
  EXPECT_EQ(a.to_json(), b.to_json());
}

TEST(TrainRound, ZeroEpochsChangeNothing) {
  auto toy = toy_corpus(40, 1);
  auto cfg = small_config();
  cfg.epochs = 0;
  const auto table = random_allocate(toy.vocab.size(), 1);
  auto state = TrainState::initial(cfg, table.side());
  const auto before = state.params;
  const auto rng_before = state.rng;
  const auto res = train_round(cfg, state, toy.data, toy.vocab, table);
  EXPECT_EQ(state.params, before);
  EXPECT_EQ(state.rng, rng_before);
  EXPECT_TRUE(res.val_trace.empty());
  EXPECT_EQ(res.epochs, 0u);
}

TEST(TrainRound, FrozenModelHasFlatValidationTrace) {
  auto toy = toy_corpus(60, 2);
  auto cfg = small_config();
  cfg.lr = 0.0;
  cfg.dropout = 0.0;
  cfg.converge_tol = -1.0;  // never stop early
  const auto table = random_allocate(toy.vocab.size(), 1);
  auto state = TrainState::initial(cfg, table.side());
  const auto res = train_round(cfg, state, toy.data, toy.vocab, table);
  ASSERT_EQ(res.val_trace.size(), 3u);
  EXPECT_EQ(res.val_trace[0], res.val_trace[1]);
  EXPECT_EQ(res.val_trace[1], res.val_trace[2]);
}

TEST(TrainRound, LearnsAndLeavesTableAlone) {
  auto toy = toy_corpus(200, 3);
  auto cfg = small_config();
  cfg.epochs = 6;
  cfg.dropout = 0.0;
  const auto table = random_allocate(toy.vocab.size(), 4);
  const auto hash = table.hash();
  auto state = TrainState::initial(cfg, table.side());
  const double before = evaluate(state.params, table, toy.vocab, toy.data.valid).ppl;
  const auto res = train_round(cfg, state, toy.data, toy.vocab, table);
  EXPECT_EQ(table.hash(), hash);
  EXPECT_LT(res.val_ppl, 0.8 * before);
  EXPECT_EQ(res.ledger.table_hash(), hash);
  EXPECT_GT(res.ledger.total_occurrences(), 0u);
  for (double v : res.val_trace) EXPECT_TRUE(std::isfinite(v) && v > 0);
}

TEST(TrainRound, ThreadCountDoesNotChangeBits) {
  auto toy = toy_corpus(80, 5);
  auto cfg = small_config();
  const auto table = random_allocate(toy.vocab.size(), 2);
  auto a = TrainState::initial(cfg, table.side());
  auto b = a;
  train_round(cfg, a, toy.data, toy.vocab, table);
  cfg.threads = 3;
  train_round(cfg, b, toy.data, toy.vocab, table);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.rng, b.rng);
}

TEST(TrainRound, CheckpointRestoreContinuesBitIdentically) {
  auto toy = toy_corpus(80, 6);
  auto cfg = small_config();
  cfg.epochs = 2;
  const auto table = random_allocate(toy.vocab.size(), 3);
  auto state = TrainState::initial(cfg, table.side());
  train_round(cfg, state, toy.data, toy.vocab, table);

  std::stringstream ss;
  write_checkpoint(ss, state.to_checkpoint(cfg, toy.vocab, table));
  auto restored = TrainState::from_checkpoint(read_checkpoint(ss));
  EXPECT_EQ(restored.params, state.params);

  const auto r1 = train_round(cfg, state, toy.data, toy.vocab, table);
  const auto r2 = train_round(cfg, restored, toy.data, toy.vocab, table);
  EXPECT_EQ(state.params, restored.params);
  EXPECT_EQ(state.rng, restored.rng);
  EXPECT_EQ(r1.val_trace, r2.val_trace);
  EXPECT_EQ(r1.ledger.row_losses(), r2.ledger.row_losses());
}

TEST(TrainRound, DivergenceRollsBackAndThrows) {
  auto toy = toy_corpus(40, 7);
  auto cfg = small_config();
  const auto table = random_allocate(toy.vocab.size(), 3);
  auto state = TrainState::initial(cfg, table.side());
  state.params.Yr(0, 0) = std::numeric_limits<double>::infinity();
  const auto batches = state.batches_done;
  EXPECT_THROW(train_round(cfg, state, toy.data, toy.vocab, table), DivergenceError);
  EXPECT_EQ(state.batches_done, batches);
  EXPECT_TRUE(std::isinf(state.params.Yr(0, 0)));
}

TEST(TrainRound, FreshPassLedgerMatchesCollectLedger) {
  auto toy = toy_corpus(60, 8);
  auto cfg = small_config();
  cfg.ledger = LedgerMode::FreshPass;
  const auto table = random_allocate(toy.vocab.size(), 3);
  auto state = TrainState::initial(cfg, table.side());
  const auto res = train_round(cfg, state, toy.data, toy.vocab, table);
  const auto again = collect_ledger(cfg, state.params, table, toy.data.train);
  EXPECT_EQ(res.ledger.row_losses(), again.row_losses());
  EXPECT_EQ(res.ledger.col_losses(), again.col_losses());
}

TEST(Bootstrap, OneRoundIsPlainTraining) {
  auto toy = toy_corpus(60, 9);
  auto cfg = small_config();
  const auto boot = bootstrap(cfg, toy.data, toy.vocab);
  const auto table = random_allocate(toy.vocab.size(), cfg.seed);
  auto state = TrainState::initial(cfg, table.side());
  train_round(cfg, state, toy.data, toy.vocab, table);
  EXPECT_EQ(boot.table, table);
  EXPECT_EQ(boot.state.params, state.params);
  ASSERT_EQ(boot.reports.size(), 1u);
  EXPECT_FALSE(boot.reports[0].realloc_old_cost.has_value());
}

TEST(Bootstrap, PersistsEveryRound) {
  auto toy = toy_corpus(60, 10);
  auto cfg = small_config();
  cfg.rounds = 2;
  cfg.epochs = 1;
  const auto dir = std::filesystem::temp_directory_path() / "tablelm_bootstrap_test";
  std::filesystem::remove_all(dir);
  BootstrapOptions opts;
  opts.out_dir = dir;
  opts.dump_ledgers = true;
  const auto res = bootstrap(cfg, toy.data, toy.vocab, opts);
  for (const char* f : {"round_1.table.tsv", "round_1.ckpt", "round_1.ledger", "round_2.table.tsv", "round_2.ckpt",
                        "report.jsonl", "final.table.tsv", "final.ckpt"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  ASSERT_EQ(res.reports.size(), 2u);
  EXPECT_TRUE(res.reports[0].realloc_new_cost.has_value());
  EXPECT_LE(*res.reports[0].realloc_new_cost, *res.reports[0].realloc_old_cost);
  EXPECT_EQ(res.tables[1], res.table);

  const auto ck = load_checkpoint(dir / "final.ckpt");
  EXPECT_EQ(ck.table_hash, res.table.hash());
  EXPECT_EQ(ck.params, res.state.params);
  std::ifstream ts(dir / "final.table.tsv");
  EXPECT_EQ(WordTable::read(ts, toy.vocab), res.table);
  std::filesystem::remove_all(dir);
}

TEST(Bootstrap, SameSeedSameResult) {
  auto toy = toy_corpus(60, 11);
  auto cfg = small_config();
  cfg.rounds = 2;
  cfg.epochs = 2;
  const auto a = bootstrap(cfg, toy.data, toy.vocab);
  const auto b = bootstrap(cfg, toy.data, toy.vocab);
  EXPECT_EQ(a.state.params, b.state.params);
  EXPECT_EQ(a.table, b.table);
  for (std::size_t i = 0; i < a.reports.size(); ++i) {
    EXPECT_EQ(a.reports[i].val_ppl, b.reports[i].val_ppl);
    EXPECT_EQ(a.reports[i].realloc_new_cost, b.reports[i].realloc_new_cost);
  }
}
