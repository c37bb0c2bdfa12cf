// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tablelm/checkpoint.hpp"
#include "tablelm/corpus.hpp"
#include "tablelm/model_core.hpp"
#include "tablelm/parallel.hpp"
#include "tablelm/word_table.hpp"

namespace tablelm {

inline double perplexity(double nll, std::size_t tokens) {
  if (tokens == 0) throw EmptyInputError("perplexity: token count must be positive");
  return std::exp(nll / static_cast<double>(tokens));
}

/// Parameter and byte counts at 32-bit precision.
struct SizeReport {
  std::uint64_t embedding_params = 0;          // 2 (n + m) p
  std::uint64_t embedding_bytes = 0;           // 4 per parameter
  std::uint64_t vanilla_embedding_params = 0;  // (n + m) |V|
  std::uint64_t vanilla_embedding_bytes = 0;
  std::uint64_t recurrent_params = 0;  // gates * (m n + m m + m)
  std::uint64_t total_params = 0;
  std::uint64_t total_bytes = 0;
};

inline SizeReport audit_size(std::uint64_t n, std::uint64_t m, std::uint64_t p, std::uint64_t vocab_size,
                             CellKind kind) {
  const std::uint64_t gates = kind == CellKind::Lstm ? 4 : 1;
  SizeReport r;
  r.embedding_params = 2 * (n + m) * p;
  r.embedding_bytes = 4 * r.embedding_params;
  r.vanilla_embedding_params = (n + m) * vocab_size;
  r.vanilla_embedding_bytes = 4 * r.vanilla_embedding_params;
  r.recurrent_params = gates * (m * n + m * m + m);
  r.total_params = r.embedding_params + r.recurrent_params;
  r.total_bytes = 4 * r.total_params;
  return r;
}

inline nlohmann::json to_json(const SizeReport& r) {
  return {{"embedding_params", r.embedding_params},
          {"embedding_bytes", r.embedding_bytes},
          {"vanilla_embedding_params", r.vanilla_embedding_params},
          {"vanilla_embedding_bytes", r.vanilla_embedding_bytes},
          {"recurrent_params", r.recurrent_params},
          {"total_params", r.total_params},
          {"total_bytes", r.total_bytes}};
}

struct EvalOptions {
  bool carry_state = false;  // default: reset the hidden state at each sentence
  std::size_t threads = 1;
};

/// `tokens` counts every predicted position, boundary markers included;
/// the `_no_boundary` fields leave out predictions of <s> and </s>.
struct EvalReport {
  std::size_t tokens = 0;
  double nll = 0.0;
  double ppl = 0.0;
  std::size_t tokens_no_boundary = 0;
  double nll_no_boundary = 0.0;
  double ppl_no_boundary = 0.0;
  bool carry_state = false;
  SizeReport size;
};

inline nlohmann::json to_json(const EvalReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"tokens", r.tokens},
          {"nll", num(r.nll)},
          {"ppl", num(r.ppl)},
          {"tokens_no_boundary", r.tokens_no_boundary},
          {"nll_no_boundary", num(r.nll_no_boundary)},
          {"ppl_no_boundary", num(r.ppl_no_boundary)},
          {"state_mode", r.carry_state ? "carry" : "reset_per_sentence"},
          {"size", to_json(r.size)}};
}

/// Full-precision NLL over a stream with dropout off and teacher forcing.
/// In reset mode each sentence is scored from a zero state given its start
/// marker; in carry mode the whole stream is one sequence.
inline EvalReport evaluate(const ModelParams& P, const WordTable& table, const Vocabulary& vocab,
                           const TokenStream& stream, const EvalOptions& opts = {}) {
  if (table.vocab_size() != vocab.size()) throw HashMismatch("evaluate: table and vocabulary disagree");
  std::vector<std::pair<std::size_t, std::size_t>> segments;
  if (opts.carry_state) {
    segments.emplace_back(0, stream.size());
  } else {
    for (std::size_t k = 0; k < stream.sentences(); ++k) segments.push_back(stream.sentence_range(k));
  }
  struct Partial {
    double nll = 0, nll_nb = 0;
    std::size_t tokens = 0, tokens_nb = 0;
  };
  std::vector<Partial> parts(segments.size());
  const WordId bos = vocab.start_id(), eos = vocab.end_id();
  parallel_for(segments.size(), opts.threads, [&](std::size_t i) {
    const auto [b, e] = segments[i];
    if (e - b < 2) return;
    std::span<const WordId> seg(stream.ids.data() + b, e - b);
    Partial& part = parts[i];
    auto r = forward_lane(P, table, seg.first(seg.size() - 1), seg.subspan(1), HiddenState::zeros(P.m),
                          ForwardOptions{}, nullptr, nullptr,
                          [&](WordId w, const Vector& lr, const Vector& lc) {
                            if (w == bos || w == eos) return;
                            const Cell c = table.pos_of(w);
                            part.nll_nb -= lr[c.row] + lc[c.col];
                            ++part.tokens_nb;
                          });
    part.nll = r.nll;
    part.tokens = r.tokens;
  });
  EvalReport rep;
  rep.carry_state = opts.carry_state;
  for (const auto& part : parts) {
    rep.nll += part.nll;
    rep.tokens += part.tokens;
    rep.nll_no_boundary += part.nll_nb;
    rep.tokens_no_boundary += part.tokens_nb;
  }
  if (rep.tokens == 0) throw EmptyInputError("evaluate: stream has no token to predict");
  rep.ppl = perplexity(rep.nll, rep.tokens);
  rep.ppl_no_boundary = rep.tokens_no_boundary ? perplexity(rep.nll_no_boundary, rep.tokens_no_boundary) : 1.0;
  rep.size = audit_size(P.n, P.m, P.p, vocab.size(), P.kind);
  return rep;
}

/// Checkpoint-level evaluation: verifies the checkpoint was trained against
/// this vocabulary and table before scoring.
inline EvalReport evaluate(const Checkpoint& ck, const WordTable& table, const Vocabulary& vocab,
                           const TokenStream& stream, const EvalOptions& opts = {}) {
  if (ck.vocab_hash != vocab.hash() || ck.vocab_size != vocab.size())
    throw HashMismatch("evaluate: checkpoint was trained on a different vocabulary");
  if (ck.table_hash != table.hash())
    throw HashMismatch("evaluate: checkpoint was trained against table " + hash_hex(ck.table_hash) +
                       ", got table " + hash_hex(table.hash()));
  if (ck.params.p != table.side()) throw HashMismatch("evaluate: checkpoint table side differs");
  return evaluate(ck.params, table, vocab, stream, opts);
}

}  // namespace tablelm
