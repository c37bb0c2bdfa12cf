// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training: SGD with gradient-norm clipping and truncated BPTT inside a
// round, and the bootstrap loop that alternates training with a fixed table
// and reallocating the table with fixed parameters.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tablelm/allocator.hpp"
#include "tablelm/checkpoint.hpp"
#include "tablelm/corpus.hpp"
#include "tablelm/evaluator.hpp"
#include "tablelm/loss_ledger.hpp"
#include "tablelm/model_core.hpp"
#include "tablelm/word_table.hpp"

namespace tablelm {

enum class LedgerMode {
  LastEpoch,  // reuse the losses of the final training epoch
  FreshPass,  // one extra pass over the training data with frozen parameters
};

inline std::string to_string(LedgerMode m) { return m == LedgerMode::FreshPass ? "fresh_pass" : "last_epoch"; }

inline LedgerMode parse_ledger_mode(const std::string& s) {
  if (s == "last_epoch") return LedgerMode::LastEpoch;
  if (s == "fresh_pass") return LedgerMode::FreshPass;
  throw Error("unknown ledger mode '" + s + "' (expected last_epoch or fresh_pass)");
}

struct TrainConfig {
  std::size_t n = 32;  // input embedding size
  std::size_t m = 32;  // hidden size
  CellKind cell = CellKind::Lstm;
  std::size_t batch_size = 20;
  std::size_t bptt_len = 35;
  double lr = 1.0;
  double lr_decay = 2.0;
  double clip_norm = 5.0;
  double dropout = 0.5;
  std::size_t patience = 1;    // validation checks without improvement before decaying lr
  std::size_t eval_every = 0;  // minibatches between validation checks; 0: once per epoch
  std::size_t rounds = 3;
  std::size_t epochs = 40;      // per-round cap
  double converge_tol = 1e-3;   // relative validation-PPL improvement that ends a round
  double min_round_gain = 0.0;  // relative gain between rounds below which bootstrap stops; 0 disables
  double time_budget = 0.0;     // seconds for the whole bootstrap; 0 disables
  SolverMode solver = SolverMode::Exact;
  std::size_t exact_cap = kDefaultExactCap;
  LedgerMode ledger = LedgerMode::LastEpoch;
  bool teacher_forcing = true;
  bool carry_state_eval = false;
  double init_scale = 0.05;
  std::uint64_t seed = 1;
  std::size_t threads = 1;

  void validate() const {
    if (n == 0 || m == 0) throw Error("config: n and m must be positive");
    if (batch_size == 0 || bptt_len == 0) throw Error("config: batch_size and bptt_len must be positive");
    if (!(lr >= 0.0) || !(lr_decay > 0.0) || !(clip_norm > 0.0) || !(init_scale >= 0.0))
      throw Error("config: lr must be nonnegative; lr_decay, clip_norm positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("config: dropout must lie in [0, 1)");
    if (patience == 0) throw Error("config: patience must be positive");
    if (threads == 0) throw Error("config: threads must be positive");
  }

  nlohmann::json to_json() const {
    return {{"n", n},
            {"m", m},
            {"cell", to_string(cell)},
            {"batch_size", batch_size},
            {"bptt_len", bptt_len},
            {"lr", lr},
            {"lr_decay", lr_decay},
            {"clip_norm", clip_norm},
            {"dropout", dropout},
            {"patience", patience},
            {"eval_every", eval_every},
            {"rounds", rounds},
            {"epochs", epochs},
            {"converge_tol", converge_tol},
            {"min_round_gain", min_round_gain},
            {"time_budget", time_budget},
            {"solver", to_string(solver)},
            {"exact_cap", exact_cap},
            {"ledger", to_string(ledger)},
            {"teacher_forcing", teacher_forcing},
            {"carry_state_eval", carry_state_eval},
            {"init_scale", init_scale},
            {"seed", seed},
            {"threads", threads}};
  }

  /// Sets one field from its textual value; the key is the field name.
  void set(const std::string& key, const std::string& value) {
    auto as_size = [&] {
      std::size_t pos = 0;
      const auto v = std::stoull(value, &pos);
      if (pos != value.size()) throw Error("");
      return static_cast<std::size_t>(v);
    };
    auto as_double = [&] {
      std::size_t pos = 0;
      const double v = std::stod(value, &pos);
      if (pos != value.size()) throw Error("");
      return v;
    };
    auto as_bool = [&] {
      if (value == "true" || value == "1") return true;
      if (value == "false" || value == "0") return false;
      throw Error("");
    };
    try {
      if (key == "n") n = as_size();
      else if (key == "m") m = as_size();
      else if (key == "cell") cell = parse_cell_kind(value);
      else if (key == "batch_size") batch_size = as_size();
      else if (key == "bptt_len") bptt_len = as_size();
      else if (key == "lr") lr = as_double();
      else if (key == "lr_decay") lr_decay = as_double();
      else if (key == "clip_norm") clip_norm = as_double();
      else if (key == "dropout") dropout = as_double();
      else if (key == "patience") patience = as_size();
      else if (key == "eval_every") eval_every = as_size();
      else if (key == "rounds") rounds = as_size();
      else if (key == "epochs") epochs = as_size();
      else if (key == "converge_tol") converge_tol = as_double();
      else if (key == "min_round_gain") min_round_gain = as_double();
      else if (key == "time_budget") time_budget = as_double();
      else if (key == "solver") solver = parse_solver_mode(value);
      else if (key == "exact_cap") exact_cap = as_size();
      else if (key == "ledger") ledger = parse_ledger_mode(value);
      else if (key == "teacher_forcing") teacher_forcing = as_bool();
      else if (key == "carry_state_eval") carry_state_eval = as_bool();
      else if (key == "init_scale") init_scale = as_double();
      else if (key == "seed") seed = as_size();
      else if (key == "threads") threads = as_size();
      else throw ConstraintViolation("config: unknown key '" + key + "'");
    } catch (const ConstraintViolation&) {
      throw;
    } catch (const std::exception&) {
      throw Error("config: bad value '" + value + "' for key '" + key + "'");
    }
  }

  /// Flat `key = value` lines; blank lines and `#` comments are ignored.
  static TrainConfig parse(std::istream& is) { return parse(is, TrainConfig()); }

  static TrainConfig parse(std::istream& is, TrainConfig base) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
      base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
  }
};

/// Global gradient norm over every tensor.
inline double gradient_norm(const Gradients& g) {
  double sq = 0.0;
  g.for_each([&](const char*, const Matrix& t) { sq += t.squaredNorm(); });
  return std::sqrt(sq);
}

/// params <- params - lr * grads, with grads rescaled to norm clip_norm when
/// their global norm exceeds it. Returns the pre-clipping norm.
inline double sgd_step(ModelParams& params, const Gradients& grads, double lr, double clip_norm) {
  if (!params.same_shape(grads)) throw Error("sgd_step: gradient shape mismatch");
  std::string bad;
  grads.for_each([&](const char* name, const Matrix& t) {
    if (bad.empty() && !t.allFinite()) bad = name;
  });
  if (!bad.empty()) throw NonFiniteError("sgd_step: non-finite gradient in tensor " + bad);
  const double norm = gradient_norm(grads);
  const double scale = norm > clip_norm ? clip_norm / norm : 1.0;
  const double step = lr * scale;
  params.Xr -= step * grads.Xr;
  params.Xc -= step * grads.Xc;
  params.Yr -= step * grads.Yr;
  params.Yc -= step * grads.Yc;
  params.W -= step * grads.W;
  params.U -= step * grads.U;
  params.b -= step * grads.b;
  return norm;
}

/// Divides the learning rate by `decay` after `patience` consecutive
/// validation checks without a new best.
struct LrSchedule {
  double lr = 1.0;
  double decay = 2.0;
  std::size_t patience = 1;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::size_t decays = 0;

  double update(double val_ppl) {
    if (val_ppl < best) {
      best = val_ppl;
      stale = 0;
    } else if (++stale >= patience) {
      lr /= decay;
      ++decays;
      stale = 0;
    }
    return lr;
  }

  nlohmann::json to_json() const {
    return {{"lr", lr},
            {"decay", decay},
            {"patience", patience},
            {"best", std::isfinite(best) ? nlohmann::json(best) : nlohmann::json(nullptr)},
            {"stale", stale},
            {"decays", decays}};
  }

  static LrSchedule from_json(const nlohmann::json& j) {
    LrSchedule s;
    s.lr = j.at("lr").get<double>();
    s.decay = j.at("decay").get<double>();
    s.patience = j.at("patience").get<std::size_t>();
    s.best = j.at("best").is_null() ? std::numeric_limits<double>::infinity() : j.at("best").get<double>();
    s.stale = j.at("stale").get<std::size_t>();
    s.decays = j.at("decays").get<std::size_t>();
    return s;
  }
};

/// Inverted dropout: in training, zero each entry with probability `prob` and
/// scale survivors by 1 / (1 - prob); identity in evaluation.
inline Vector apply_dropout(const Vector& v, double prob, Rng& rng, bool training) {
  if (!(prob >= 0.0 && prob < 1.0)) throw Error("apply_dropout: prob must lie in [0, 1)");
  if (!training || prob == 0.0) return v;
  return v.cwiseProduct(detail::dropout_mask(static_cast<std::size_t>(v.size()), prob, rng));
}

struct TrainState {
  ModelParams params;
  LrSchedule schedule;
  Rng rng;
  std::size_t round = 0;
  std::size_t epochs_done = 0;
  std::size_t batches_done = 0;

  static TrainState initial(const TrainConfig& cfg, std::size_t p) {
    TrainState s;
    s.params = ModelParams::uniform(cfg.n, cfg.m, p, cfg.cell, cfg.seed, cfg.init_scale);
    s.schedule.lr = cfg.lr;
    s.schedule.decay = cfg.lr_decay;
    s.schedule.patience = cfg.patience;
    // Dropout masks use a stream independent of the initializer.
    s.rng = Rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    return s;
  }

  nlohmann::json optimizer_json() const {
    return {{"schedule", schedule.to_json()},
            {"round", round},
            {"epochs_done", epochs_done},
            {"batches_done", batches_done}};
  }

  Checkpoint to_checkpoint(const TrainConfig& cfg, const Vocabulary& vocab, const WordTable& table) const {
    Checkpoint ck;
    ck.params = params;
    ck.vocab_size = vocab.size();
    ck.vocab_hash = vocab.hash();
    ck.table_hash = table.hash();
    ck.rng_state = rng.state();
    ck.optimizer = optimizer_json();
    ck.config = cfg.to_json();
    return ck;
  }

  static TrainState from_checkpoint(const Checkpoint& ck) {
    TrainState s;
    s.params = ck.params;
    s.rng.set_state(ck.rng_state);
    s.schedule = LrSchedule::from_json(ck.optimizer.at("schedule"));
    s.round = ck.optimizer.at("round").get<std::size_t>();
    s.epochs_done = ck.optimizer.at("epochs_done").get<std::size_t>();
    s.batches_done = ck.optimizer.at("batches_done").get<std::size_t>();
    return s;
  }
};

struct TrainData {
  TokenStream train;
  TokenStream valid;
};

/// Raised when training produces a non-finite loss. The state passed to
/// train_round has been rolled back to the last completed epoch.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

struct RoundResult {
  LossLedger ledger;
  std::vector<double> val_trace;  // validation PPL after each epoch
  std::vector<double> train_trace;
  double train_ppl = std::numeric_limits<double>::quiet_NaN();
  double val_ppl = std::numeric_limits<double>::quiet_NaN();
  std::size_t epochs = 0;
  bool converged = false;
  double seconds = 0.0;
};

namespace detail {

inline void accumulate_traces(LossLedger& ledger, const BatchPass& pass) {
  for (const auto& lane : pass.traces)
    for (std::size_t t = 0; t < lane.targets.size(); ++t)
      ledger.accumulate_log_probs(lane.targets[t], lane.halves[2 * t].logp, lane.halves[2 * t + 1].logp);
}

inline double validation_ppl(const TrainConfig& cfg, const ModelParams& P, const WordTable& table,
                             const Vocabulary& vocab, const TokenStream& valid) {
  return evaluate(P, table, vocab, valid, EvalOptions{cfg.carry_state_eval, cfg.threads}).ppl;
}

}  // namespace detail

/// Ledger from one forward pass over the training stream with frozen
/// parameters and no dropout, laid out exactly like a training epoch.
inline LossLedger collect_ledger(const TrainConfig& cfg, const ModelParams& P, const WordTable& table,
                                 const TokenStream& train) {
  LossLedger ledger = LossLedger::for_table(table);
  std::vector<HiddenState> states(cfg.batch_size, HiddenState::zeros(P.m));
  ForwardOptions fo;
  fo.teacher_forcing = cfg.teacher_forcing;
  for (const Batch& batch : batch_iter(train, cfg.batch_size, cfg.bptt_len))
    detail::accumulate_traces(ledger, forward_batch(P, table, batch, states, fo, {}, cfg.threads));
  return ledger;
}

/// Trains with `table` fixed until validation PPL improves by less than
/// converge_tol (relative) over an epoch, or the epoch cap is hit. Keeps the
/// parameters of the best validation epoch. The returned ledger comes from the
/// last training epoch, or from a frozen pass under LedgerMode::FreshPass.
inline RoundResult train_round(const TrainConfig& cfg, TrainState& state, const TrainData& data,
                               const Vocabulary& vocab, const WordTable& table,
                               std::optional<std::chrono::steady_clock::time_point> deadline = std::nullopt) {
  cfg.validate();
  if (table.side() != state.params.p) throw Error("train_round: table side does not match the model");
  const auto t0 = std::chrono::steady_clock::now();
  RoundResult res;
  res.ledger = LossLedger::for_table(table);
  if (cfg.epochs == 0) {
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
  }
  const auto batches = batch_iter(data.train, cfg.batch_size, cfg.bptt_len);
  const double lane_scale = 1.0 / static_cast<double>(cfg.batch_size);
  ForwardOptions fo;
  fo.dropout = cfg.dropout;
  fo.teacher_forcing = cfg.teacher_forcing;

  ModelParams best_params = state.params;
  double best_val = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (deadline && std::chrono::steady_clock::now() >= *deadline) break;
    const TrainState epoch_start = state;
    LossLedger epoch_ledger = LossLedger::for_table(table);
    std::vector<HiddenState> states(cfg.batch_size, HiddenState::zeros(cfg.m));
    double nll = 0.0;
    std::size_t tokens = 0;
    try {
      for (const Batch& batch : batches) {
        std::vector<std::uint64_t> seeds(batch.lanes);
        if (fo.dropout > 0.0)
          for (auto& s : seeds) s = state.rng.next_u64();
        BatchPass pass = forward_batch(state.params, table, batch, states, fo, seeds, cfg.threads);
        if (!std::isfinite(pass.nll)) throw NonFiniteError("training loss is not finite");
        nll += pass.nll;
        tokens += pass.tokens;
        detail::accumulate_traces(epoch_ledger, pass);
        Gradients g = backward(state.params, pass, kFullBackprop, cfg.threads);
        g.for_each([&](const char*, Matrix& t) { t *= lane_scale; });
        sgd_step(state.params, g, state.schedule.lr, cfg.clip_norm);
        ++state.batches_done;
        if (cfg.eval_every && state.batches_done % cfg.eval_every == 0)
          state.schedule.update(detail::validation_ppl(cfg, state.params, table, vocab, data.valid));
      }
    } catch (const NonFiniteError& e) {
      state = epoch_start;
      throw DivergenceError(std::string("round diverged in epoch ") + std::to_string(epoch + 1) + ": " + e.what());
    }
    const double val = detail::validation_ppl(cfg, state.params, table, vocab, data.valid);
    if (!std::isfinite(val)) {
      state = epoch_start;
      throw DivergenceError("validation perplexity diverged in epoch " + std::to_string(epoch + 1));
    }
    ++state.epochs_done;
    res.epochs = epoch + 1;
    res.ledger = std::move(epoch_ledger);
    res.train_ppl = perplexity(nll, tokens);
    res.train_trace.push_back(res.train_ppl);
    res.val_trace.push_back(val);
    if (cfg.eval_every == 0) state.schedule.update(val);
    if (val < best_val) {
      best_val = val;
      best_params = state.params;
    }
    const auto& tr = res.val_trace;
    if (tr.size() >= 2 && (tr[tr.size() - 2] - val) / tr[tr.size() - 2] < cfg.converge_tol) {
      res.converged = true;
      break;
    }
  }
  if (!res.val_trace.empty()) {
    state.params = std::move(best_params);
    res.val_ppl = best_val;
  }
  if (cfg.ledger == LedgerMode::FreshPass) {
    res.ledger = collect_ledger(cfg, state.params, table, data.train);
    res.train_ppl = perplexity(res.ledger.incumbent_cost(table), res.ledger.total_occurrences());
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

/// One line of the round report.
struct RoundReport {
  std::size_t round = 0;
  double train_ppl = 0.0;
  double val_ppl = 0.0;
  std::size_t epochs = 0;
  std::optional<double> realloc_old_cost, realloc_new_cost;
  std::optional<std::size_t> moved_words;
  std::optional<double> realloc_seconds;
  double train_seconds = 0.0;

  nlohmann::json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    auto opt = [](const auto& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"round", round},
            {"train_ppl", num(train_ppl)},
            {"val_ppl", num(val_ppl)},
            {"epochs", epochs},
            {"realloc_old_cost", opt(realloc_old_cost)},
            {"realloc_new_cost", opt(realloc_new_cost)},
            {"moved_words", opt(moved_words)},
            {"realloc_seconds", opt(realloc_seconds)},
            {"train_seconds", train_seconds},
            {"realloc_fraction",
             realloc_seconds && train_seconds > 0.0 ? nlohmann::json(*realloc_seconds / train_seconds)
                                                    : nlohmann::json(nullptr)}};
  }
};

struct BootstrapOptions {
  std::optional<std::filesystem::path> out_dir;  // per-round artifacts
  bool dump_ledgers = false;
  std::optional<WordTable> initial_table;  // default: random_allocate(|V|, seed)
};

struct BootstrapResult {
  TrainState state;
  WordTable table;  // the table the final parameters were trained against
  std::vector<RoundReport> reports;
  std::vector<LossLedger> ledgers;  // one per round
  std::vector<WordTable> tables;    // table used in each round
};

namespace detail {

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    os << text;
    if (!os.flush()) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

/// Random allocation, then rounds of [train with the table fixed ->
/// reallocate with the parameters fixed]. The last round is not followed by a
/// reallocation. Stops early when the relative validation-PPL gain between
/// rounds drops below min_round_gain or the time budget runs out.
inline BootstrapResult bootstrap(const TrainConfig& cfg, const TrainData& data, const Vocabulary& vocab,
                                 const BootstrapOptions& opts = {}) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  std::optional<std::chrono::steady_clock::time_point> deadline;
  if (cfg.time_budget > 0.0)
    deadline = start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                           std::chrono::duration<double>(cfg.time_budget));

  WordTable table = opts.initial_table ? *opts.initial_table : random_allocate(vocab.size(), cfg.seed);
  if (table.vocab_size() != vocab.size()) throw HashMismatch("bootstrap: initial table does not match vocabulary");
  BootstrapResult out{TrainState::initial(cfg, table.side()), table, {}, {}, {}};
  namespace fs = std::filesystem;
  if (opts.out_dir) fs::create_directories(*opts.out_dir);
  std::string report_text;
  auto write_table = [&](const fs::path& path, const WordTable& t) {
    std::ostringstream os;
    t.write(os, vocab);
    detail::write_text_atomic(path, os.str());
  };

  const std::size_t rounds = std::max<std::size_t>(cfg.rounds, 1);
  for (std::size_t r = 1; r <= rounds; ++r) {
    out.state.round = r;
    RoundReport rep;
    rep.round = r;
    out.tables.push_back(table);
    RoundResult rr;
    try {
      rr = train_round(cfg, out.state, data, vocab, table, deadline);
    } catch (const DivergenceError&) {
      if (opts.out_dir) save_checkpoint(*opts.out_dir / "last_good.ckpt", out.state.to_checkpoint(cfg, vocab, table));
      throw;
    }
    rep.epochs = rr.epochs;
    rep.train_seconds = rr.seconds;
    rep.train_ppl = rr.train_ppl;
    rep.val_ppl = rr.val_trace.empty() ? detail::validation_ppl(cfg, out.state.params, table, vocab, data.valid)
                                       : rr.val_ppl;
    if (opts.out_dir) {
      const auto stem = "round_" + std::to_string(r);
      write_table(*opts.out_dir / (stem + ".table.tsv"), table);
      save_checkpoint(*opts.out_dir / (stem + ".ckpt"), out.state.to_checkpoint(cfg, vocab, table));
      if (opts.dump_ledgers) {
        std::ostringstream os(std::ios::binary);
        rr.ledger.write(os);
        detail::write_text_atomic(*opts.out_dir / (stem + ".ledger"), os.str());
      }
    }

    bool stop = r == rounds;
    if (!stop && cfg.min_round_gain > 0.0 && !out.reports.empty()) {
      const double prev = out.reports.back().val_ppl;
      stop = (prev - rep.val_ppl) / prev < cfg.min_round_gain;
    }
    if (!stop && deadline && std::chrono::steady_clock::now() >= *deadline) stop = true;
    if (!stop) {
      auto re = reallocate(table, rr.ledger, cfg.solver, cfg.exact_cap);
      rep.realloc_old_cost = re.old_cost;
      rep.realloc_new_cost = re.new_cost;
      rep.moved_words = re.moved_words;
      rep.realloc_seconds = re.seconds;
      table = std::move(re.table);
    }
    out.ledgers.push_back(std::move(rr.ledger));
    out.reports.push_back(rep);
    report_text += rep.to_json().dump() + "\n";
    if (opts.out_dir) detail::write_text_atomic(*opts.out_dir / "report.jsonl", report_text);
    if (stop) break;
  }
  out.table = out.tables.back();
  if (opts.out_dir) {
    write_table(*opts.out_dir / "final.table.tsv", out.table);
    save_checkpoint(*opts.out_dir / "final.ckpt", out.state.to_checkpoint(cfg, vocab, out.table));
  }
  return out;
}

}  // namespace tablelm
