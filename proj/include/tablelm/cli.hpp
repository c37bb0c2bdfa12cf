// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tablelm/allocator.hpp"
#include "tablelm/checkpoint.hpp"
#include "tablelm/corpus.hpp"
#include "tablelm/evaluator.hpp"
#include "tablelm/loss_ledger.hpp"
#include "tablelm/trainer.hpp"
#include "tablelm/word_table.hpp"

namespace tablelm::cli {

namespace fs = std::filesystem;

inline Vocabulary load_vocab(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path);
  return Vocabulary::read(is);
}

inline WordTable load_table(const std::string& path, const Vocabulary& vocab) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path);
  return WordTable::read(is, vocab);
}

inline void write_file(const fs::path& path, const std::string& text) { detail::write_text_atomic(path, text); }

inline std::string format_bytes(std::uint64_t bytes) {
  static const char* units[] = {"B", "KB", "MB", "GB", "TB"};
  double v = static_cast<double>(bytes);
  int u = 0;
  while (v >= 1000.0 && u < 4) v /= 1000.0, ++u;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f %s", v, units[u]);
  return buf;
}

// Validates that the parent directory of an output path exists.
inline const auto kWritablePath = CLI::Validator(
    [](std::string& s) -> std::string {
      const auto parent = fs::path(s).parent_path();
      if (!parent.empty() && !fs::is_directory(parent)) return "directory does not exist: " + parent.string();
      return {};
    },
    "PATH");

/// Entry point of the `tablelm` tool. Returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Language modeling over a shared row/column word table"};
  app.require_subcommand(1, 1);
  std::uint64_t seed = 1;
  std::size_t threads = 1;

  // build-vocab
  auto* bv = app.add_subcommand("build-vocab", "Count words and write the vocabulary TSV");
  std::string bv_corpus, bv_out;
  std::uint64_t min_count = 3;
  bv->add_option("--corpus", bv_corpus, "Training text, one sentence per line")->required()->check(CLI::ExistingFile);
  bv->add_option("--vocab", bv_out, "Output vocabulary file")->required()->check(kWritablePath);
  bv->add_option("--min-count", min_count, "Drop words seen fewer times")->check(CLI::PositiveNumber);

  // allocate
  auto* al = app.add_subcommand("allocate", "Write a seeded random allocation table");
  std::string al_vocab, al_table;
  al->add_option("--vocab", al_vocab)->required()->check(CLI::ExistingFile);
  al->add_option("--table", al_table, "Output allocation file")->required()->check(kWritablePath);
  al->add_option("--seed", seed);

  // train
  auto* tr = app.add_subcommand("train", "Bootstrap training: train, reallocate, repeat");
  std::string tr_corpus, tr_valid, tr_vocab, tr_table, tr_config, tr_out, tr_ckpt;
  bool dump_ledger = false;
  tr->add_option("--corpus", tr_corpus, "Training text")->required()->check(CLI::ExistingFile);
  tr->add_option("--valid", tr_valid, "Validation text (default: the training text)")->check(CLI::ExistingFile);
  tr->add_option("--vocab", tr_vocab)->required()->check(CLI::ExistingFile);
  tr->add_option("--table", tr_table, "Initial allocation (default: random from --seed)")->check(CLI::ExistingFile);
  tr->add_option("--config", tr_config, "key = value config file")->check(CLI::ExistingFile);
  tr->add_option("--out-dir", tr_out, "Directory for per-round tables, checkpoints and report")->required();
  tr->add_option("--checkpoint", tr_ckpt, "Also write the final checkpoint here")->check(kWritablePath);
  tr->add_flag("--dump-ledger", dump_ledger, "Write each round's loss ledger");
  // Flags that mirror TrainConfig fields; applied on top of --config.
  std::map<std::string, std::string> overrides;
  static const char* kMirrors[] = {"n",          "m",          "cell",           "batch_size",  "bptt_len",
                                   "lr",         "lr_decay",   "clip_norm",      "dropout",     "patience",
                                   "eval_every", "rounds",     "epochs",         "converge_tol", "min_round_gain",
                                   "time_budget", "solver",    "exact_cap",      "ledger",      "teacher_forcing",
                                   "carry_state_eval", "init_scale", "seed",     "threads"};
  for (const char* key : kMirrors) {
    std::string flag = std::string("--") + key;
    for (auto& ch : flag)
      if (ch == '_') ch = '-';
    tr->add_option(flag, overrides[key], std::string("Overrides config key ") + key);
  }

  // reallocate
  auto* ra = app.add_subcommand("reallocate", "Re-solve the allocation from a dumped loss ledger");
  std::string ra_vocab, ra_table, ra_ledger, ra_out, ra_report, ra_solver = "exact";
  std::size_t ra_cap = kDefaultExactCap;
  ra->add_option("--vocab", ra_vocab)->required()->check(CLI::ExistingFile);
  ra->add_option("--table", ra_table, "Allocation the ledger was collected against")->required()->check(CLI::ExistingFile);
  ra->add_option("--ledger", ra_ledger)->required()->check(CLI::ExistingFile);
  ra->add_option("--solver", ra_solver)->check(CLI::IsMember({"exact", "approx"}));
  ra->add_option("--exact-cap", ra_cap);
  ra->add_option("--output", ra_out, "New allocation file")->required()->check(kWritablePath);
  ra->add_option("--report", ra_report, "Also write the JSON report here")->check(kWritablePath);

  // eval
  auto* ev = app.add_subcommand("eval", "Perplexity of a checkpoint on a corpus");
  std::string ev_vocab, ev_table, ev_ckpt, ev_corpus, ev_out;
  bool carry = false;
  ev->add_option("--vocab", ev_vocab)->required()->check(CLI::ExistingFile);
  ev->add_option("--table", ev_table)->required()->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", ev_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--corpus", ev_corpus)->required()->check(CLI::ExistingFile);
  ev->add_flag("--carry-state", carry, "Carry the hidden state across sentences");
  ev->add_option("--threads", threads)->check(CLI::PositiveNumber);
  ev->add_option("--output", ev_out, "Also write the JSON report here")->check(kWritablePath);

  // audit
  auto* au = app.add_subcommand("audit", "Model size arithmetic");
  std::uint64_t au_n = 0, au_m = 0, au_v = 0;
  std::string au_cell = "lstm";
  au->add_option("--n", au_n, "Input embedding size")->required();
  au->add_option("--m", au_m, "Hidden size")->required();
  au->add_option("--vocab-size", au_v)->required()->check(CLI::PositiveNumber);
  au->add_option("--cell", au_cell)->check(CLI::IsMember({"lstm", "tanh"}));

  // dump-table
  auto* dt = app.add_subcommand("dump-table", "Print the words of each table row");
  std::string dt_vocab, dt_table;
  std::size_t dt_rows = 0, dt_words = 10;
  dt->add_option("--vocab", dt_vocab)->required()->check(CLI::ExistingFile);
  dt->add_option("--table", dt_table)->required()->check(CLI::ExistingFile);
  dt->add_option("--rows", dt_rows, "Rows to print (0: all)");
  dt->add_option("--max-words", dt_words, "Words per row (0: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (bv->parsed()) {
      const auto vocab = build_vocab(read_lines_file(bv_corpus), min_count);
      std::ostringstream os;
      vocab.write(os);
      write_file(bv_out, os.str());
      out << "vocabulary: " << vocab.size() << " entries (" << vocab.size() - 3 << " words + 3 specials), hash "
          << hash_hex(vocab.hash()) << "\n";
    } else if (al->parsed()) {
      const auto vocab = load_vocab(al_vocab);
      const auto table = random_allocate(vocab.size(), seed);
      std::ostringstream os;
      table.write(os, vocab);
      write_file(al_table, os.str());
      out << "table: " << table.side() << "x" << table.side() << " for " << vocab.size() << " words, hash "
          << hash_hex(table.hash()) << "\n";
    } else if (tr->parsed()) {
      TrainConfig cfg;
      if (!tr_config.empty()) {
        std::ifstream is(tr_config);
        cfg = TrainConfig::parse(is);
      }
      for (const char* key : kMirrors) {
        std::string flag = std::string("--") + key;
        for (auto& ch : flag)
          if (ch == '_') ch = '-';
        if (tr->count(flag)) cfg.set(key, overrides[key]);
      }
      cfg.validate();
      const auto vocab = load_vocab(tr_vocab);
      TrainData data;
      data.train = encode(read_lines_file(tr_corpus), vocab);
      data.valid = encode(read_lines_file(tr_valid.empty() ? tr_corpus : tr_valid), vocab);
      BootstrapOptions opts;
      opts.out_dir = tr_out;
      opts.dump_ledgers = dump_ledger;
      if (!tr_table.empty()) opts.initial_table = load_table(tr_table, vocab);
      const auto res = bootstrap(cfg, data, vocab, opts);
      for (const auto& r : res.reports) out << r.to_json().dump() << "\n";
      if (!tr_ckpt.empty()) save_checkpoint(tr_ckpt, res.state.to_checkpoint(cfg, vocab, res.table));
    } else if (ra->parsed()) {
      const auto vocab = load_vocab(ra_vocab);
      const auto table = load_table(ra_table, vocab);
      std::ifstream is(ra_ledger, std::ios::binary);
      const auto ledger = LossLedger::read(is);
      const auto rep = reallocate(table, ledger, parse_solver_mode(ra_solver), ra_cap);
      std::ostringstream os;
      rep.table.write(os, vocab);
      write_file(ra_out, os.str());
      const nlohmann::json j = {{"old_cost", rep.old_cost},       {"new_cost", rep.new_cost},
                                {"moved_words", rep.moved_words}, {"solver", to_string(rep.mode)},
                                {"seconds", rep.seconds},         {"kept_incumbent", rep.kept_incumbent}};
      out << j.dump() << "\n";
      if (!ra_report.empty()) write_file(ra_report, j.dump(2) + "\n");
    } else if (ev->parsed()) {
      const auto vocab = load_vocab(ev_vocab);
      const auto table = load_table(ev_table, vocab);
      const auto ck = load_checkpoint(ev_ckpt);
      const auto stream = encode(read_lines_file(ev_corpus), vocab);
      const auto rep = evaluate(ck, table, vocab, stream, EvalOptions{carry, threads});
      const auto j = to_json(rep);
      out << j.dump(2) << "\n";
      if (!ev_out.empty()) write_file(ev_out, j.dump(2) + "\n");
    } else if (au->parsed()) {
      const std::uint64_t p = table_side(au_v);
      const auto rep = audit_size(au_n, au_m, p, au_v, parse_cell_kind(au_cell));
      auto j = to_json(rep);
      j["n"] = au_n, j["m"] = au_m, j["p"] = p, j["vocab_size"] = au_v;
      out << j.dump(2) << "\n";
      out << "table embeddings: " << format_bytes(rep.embedding_bytes) << " (" << rep.embedding_bytes
          << " bytes); one-vector-per-word embeddings: " << format_bytes(rep.vanilla_embedding_bytes) << " ("
          << rep.vanilla_embedding_bytes << " bytes)\n";
    } else if (dt->parsed()) {
      const auto vocab = load_vocab(dt_vocab);
      const auto table = load_table(dt_table, vocab);
      const std::size_t rows = dt_rows ? std::min(dt_rows, table.side()) : table.side();
      for (std::size_t r = 0; r < rows; ++r) {
        out << "row " << r << ":";
        std::size_t shown = 0;
        for (std::size_t c = 0; c < table.side(); ++c) {
          const auto w = table.word_at(r, c);
          if (w == WordTable::kVacant) continue;
          if (dt_words && shown == dt_words) {
            out << " ...";
            break;
          }
          out << ' ' << vocab.word(w);
          ++shown;
        }
        out << "\n";
      }
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace tablelm::cli
