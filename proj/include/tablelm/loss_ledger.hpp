// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "tablelm/model_core.hpp"

namespace tablelm {

/// Per-word accumulated row losses Lr(w, i) and column losses Lc(w, j): the
/// sum over every occurrence of w of -log P_r(i) and -log P_c(j). The cost of
/// placing w at cell (i, j) is Lr(w, i) + Lc(w, j); the |V| x p x p cost
/// tensor itself is never stored.
class LossLedger {
 public:
  LossLedger() = default;
  LossLedger(std::size_t vocab_size, std::size_t side, std::uint64_t table_hash = 0)
      : Lr_(Matrix::Zero(static_cast<Eigen::Index>(vocab_size), static_cast<Eigen::Index>(side))),
        Lc_(Matrix::Zero(static_cast<Eigen::Index>(vocab_size), static_cast<Eigen::Index>(side))),
        occurrences_(vocab_size, 0),
        table_hash_(table_hash) {}

  static LossLedger for_table(const WordTable& t) { return LossLedger(t.vocab_size(), t.side(), t.hash()); }

  std::size_t vocab_size() const { return occurrences_.size(); }
  std::size_t side() const { return static_cast<std::size_t>(Lr_.cols()); }
  std::uint64_t table_hash() const { return table_hash_; }

  const Matrix& row_losses() const { return Lr_; }
  const Matrix& col_losses() const { return Lc_; }
  std::uint64_t occurrences(WordId w) const { return occurrences_.at(static_cast<std::size_t>(w)); }

  /// Adds one occurrence of `w` given log-softmaxed row and column scores.
  void accumulate_log_probs(WordId w, const Vector& row_logp, const Vector& col_logp) {
    const auto r = static_cast<Eigen::Index>(w);
    Lr_.row(r) -= row_logp.transpose();
    Lc_.row(r) -= col_logp.transpose();
    ++occurrences_[static_cast<std::size_t>(w)];
  }

  void accumulate(const Vector& row_logits, const Vector& col_logits, WordId w) {
    accumulate_log_probs(w, log_softmax(row_logits), log_softmax(col_logits));
  }

  void accumulate(const StepOutput& step, WordId w) { accumulate(step.row_logits, step.col_logits, w); }

  /// Lr(w, i) + Lc(w, j); zero for a word never observed.
  double candidate_loss(WordId w, std::size_t i, std::size_t j) const {
    const auto r = static_cast<Eigen::Index>(w);
    return Lr_(r, static_cast<Eigen::Index>(i)) + Lc_(r, static_cast<Eigen::Index>(j));
  }

  /// Sum over words of the cost of their current cell in `table`.
  double incumbent_cost(const WordTable& table) const {
    double total = 0.0;
    for (std::size_t w = 0; w < vocab_size(); ++w) {
      const Cell c = table.pos_of(static_cast<WordId>(w));
      total += candidate_loss(static_cast<WordId>(w), c.row, c.col);
    }
    return total;
  }

  std::uint64_t total_occurrences() const {
    std::uint64_t n = 0;
    for (auto c : occurrences_) n += c;
    return n;
  }

  void reset() {
    Lr_.setZero();
    Lc_.setZero();
    std::fill(occurrences_.begin(), occurrences_.end(), 0);
  }

  /// Elementwise addition of a shard's ledger.
  LossLedger& merge(const LossLedger& other) {
    if (other.vocab_size() != vocab_size() || other.side() != side() || other.table_hash_ != table_hash_)
      throw HashMismatch("LossLedger::merge: ledgers belong to different tables");
    Lr_ += other.Lr_;
    Lc_ += other.Lc_;
    for (std::size_t i = 0; i < occurrences_.size(); ++i) occurrences_[i] += other.occurrences_[i];
    return *this;
  }

  // Binary dump: magic "TLMLEDG1", u64 |V|, u64 p, u64 table hash, then Lr and
  // Lc row-major as little-endian float32, then |V| u64 occurrence counts.
  void write(std::ostream& os) const {
    os.write("TLMLEDG1", 8);
    put_u64(os, vocab_size());
    put_u64(os, side());
    put_u64(os, table_hash_);
    for (const Matrix* M : {&Lr_, &Lc_})
      for (Eigen::Index r = 0; r < M->rows(); ++r)
        for (Eigen::Index c = 0; c < M->cols(); ++c) {
          const float f = static_cast<float>((*M)(r, c));
          std::uint32_t bits;
          std::memcpy(&bits, &f, 4);
          unsigned char b[4];
          for (int k = 0; k < 4; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
          os.write(reinterpret_cast<const char*>(b), 4);
        }
    for (auto c : occurrences_) put_u64(os, c);
    if (!os) throw Error("LossLedger::write: stream error");
  }

  static LossLedger read(std::istream& is) {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, "TLMLEDG1", 8) != 0) throw FormatError("ledger file: bad magic");
    const auto v = get_u64(is), p = get_u64(is), h = get_u64(is);
    LossLedger L(v, p, h);
    for (Matrix* M : {&L.Lr_, &L.Lc_})
      for (Eigen::Index r = 0; r < M->rows(); ++r)
        for (Eigen::Index c = 0; c < M->cols(); ++c) {
          unsigned char b[4];
          if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("ledger file: truncated");
          std::uint32_t bits = 0;
          for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(b[k]) << (8 * k);
          float f;
          std::memcpy(&f, &bits, 4);
          (*M)(r, c) = f;
        }
    for (auto& c : L.occurrences_) c = get_u64(is);
    return L;
  }

 private:
  static void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
    os.write(reinterpret_cast<const char*>(b), 8);
  }
  static std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("ledger file: truncated");
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(b[k]) << (8 * k);
    return v;
  }

  Matrix Lr_, Lc_;
  std::vector<std::uint64_t> occurrences_;
  std::uint64_t table_hash_ = 0;
};

}  // namespace tablelm
