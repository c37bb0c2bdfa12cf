// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tablelm/corpus.hpp"
#include "tablelm/error.hpp"
#include "tablelm/hash.hpp"
#include "tablelm/rng.hpp"

namespace tablelm {

struct Cell {
  std::uint32_t row = 0;
  std::uint32_t col = 0;

  friend bool operator==(const Cell&, const Cell&) = default;
};

/// Smallest p with p*p >= vocab_size.
inline std::size_t table_side(std::size_t vocab_size) {
  if (vocab_size == 0) throw Error("table_side: vocab_size must be positive");
  std::size_t lo = 1, hi = 1;
  while (hi * hi < vocab_size) hi *= 2;
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (mid * mid >= vocab_size) hi = mid;
    else lo = mid + 1;
  }
  return lo;
}

/// Bijection from word ids onto cells of a p x p grid. Cells beyond |V| stay
/// vacant. Immutable once built; reallocation produces a new table.
class WordTable {
 public:
  static constexpr WordId kVacant = -1;

  /// Validates `positions` (indexed by word id) and builds the table.
  static WordTable from_positions(std::size_t side, std::vector<Cell> positions) {
    if (side == 0) throw Error("WordTable: side must be positive");
    if (positions.size() > side * side)
      throw ConstraintViolation("WordTable: " + std::to_string(positions.size()) + " words do not fit a " +
                                std::to_string(side) + "x" + std::to_string(side) + " table");
    WordTable t;
    t.side_ = side;
    t.word_at_.assign(side * side, kVacant);
    for (std::size_t w = 0; w < positions.size(); ++w) {
      const Cell c = positions[w];
      if (c.row >= side || c.col >= side)
        throw ConstraintViolation("word " + std::to_string(w) + " assigned to out-of-range cell (" +
                                  std::to_string(c.row) + "," + std::to_string(c.col) + ")");
      auto& slot = t.word_at_[c.row * side + c.col];
      if (slot != kVacant)
        throw ConstraintViolation("cell (" + std::to_string(c.row) + "," + std::to_string(c.col) +
                                  ") assigned to both word " + std::to_string(slot) + " and word " +
                                  std::to_string(w));
      slot = static_cast<WordId>(w);
    }
    t.pos_of_ = std::move(positions);
    return t;
  }

  std::size_t side() const { return side_; }
  std::size_t vocab_size() const { return pos_of_.size(); }
  std::size_t cells() const { return side_ * side_; }

  Cell pos_of(WordId w) const { return pos_of_.at(static_cast<std::size_t>(w)); }
  std::uint32_t row(WordId w) const { return pos_of(w).row; }
  std::uint32_t col(WordId w) const { return pos_of(w).col; }
  WordId word_at(std::size_t row, std::size_t col) const {
    if (row >= side_ || col >= side_) throw IndexOutOfRange("WordTable::word_at: cell out of range");
    return word_at_[row * side_ + col];
  }
  const std::vector<Cell>& positions() const { return pos_of_; }

  std::uint64_t hash() const {
    Hasher h;
    h.u64(side_).u64(pos_of_.size());
    for (const auto& c : pos_of_) h.u64(c.row).u64(c.col);
    return h.digest();
  }

  friend bool operator==(const WordTable& a, const WordTable& b) {
    return a.side_ == b.side_ && a.pos_of_ == b.pos_of_;
  }

  /// Header `#side=<p>\tvocab_size=<|V|>\tvocab_hash=<hex>`, then
  /// `word<TAB>row<TAB>col` per word in id order.
  void write(std::ostream& os, const Vocabulary& vocab) const {
    if (vocab.size() != vocab_size()) throw HashMismatch("WordTable::write: vocabulary size mismatch");
    os << "#side=" << side_ << "\tvocab_size=" << pos_of_.size() << "\tvocab_hash=" << hash_hex(vocab.hash())
       << '\n';
    for (std::size_t w = 0; w < pos_of_.size(); ++w)
      os << vocab.word(static_cast<WordId>(w)) << '\t' << pos_of_[w].row << '\t' << pos_of_[w].col << '\n';
  }

  static WordTable read(std::istream& is, const Vocabulary& vocab) {
    std::string header;
    if (!std::getline(is, header) || header.rfind("#side=", 0) != 0) throw FormatError("table file: missing header");
    std::size_t side = 0, size = 0;
    std::string hash;
    const std::string fields = header.substr(1);
    for (auto field : split_tokens(fields)) {
      auto eq = field.find('=');
      if (eq == std::string_view::npos) throw FormatError("table file: malformed header field");
      auto key = field.substr(0, eq);
      auto val = std::string(field.substr(eq + 1));
      if (key == "side") side = std::stoull(val);
      else if (key == "vocab_size") size = std::stoull(val);
      else if (key == "vocab_hash") hash = val;
    }
    if (side == 0 || hash.empty()) throw FormatError("table file: incomplete header");
    if (size != vocab.size() || parse_hash_hex(hash) != vocab.hash())
      throw HashMismatch("table file was built for a different vocabulary");
    std::vector<Cell> pos(size);
    std::string line;
    for (std::size_t w = 0; w < size; ++w) {
      if (!std::getline(is, line)) throw FormatError("table file: truncated");
      auto t1 = line.find('\t');
      auto t2 = line.find('\t', t1 + 1);
      if (t1 == std::string::npos || t2 == std::string::npos) throw FormatError("table file: malformed line");
      if (line.substr(0, t1) != vocab.word(static_cast<WordId>(w)))
        throw FormatError("table file: line " + std::to_string(w + 2) + " is not word " + std::to_string(w));
      pos[w].row = static_cast<std::uint32_t>(std::stoul(line.substr(t1 + 1, t2 - t1 - 1)));
      pos[w].col = static_cast<std::uint32_t>(std::stoul(line.substr(t2 + 1)));
    }
    return from_positions(side, std::move(pos));
  }

 private:
  std::size_t side_ = 0;
  std::vector<Cell> pos_of_;
  std::vector<WordId> word_at_;
};

/// Seeded Fisher-Yates shuffle of all p*p cells; word w takes shuffled cell w.
inline WordTable random_allocate(std::size_t vocab_size, std::uint64_t seed) {
  const std::size_t side = table_side(vocab_size);
  std::vector<std::uint32_t> cells(side * side);
  std::iota(cells.begin(), cells.end(), 0u);
  Rng rng(seed);
  rng.shuffle(cells);
  std::vector<Cell> pos(vocab_size);
  for (std::size_t w = 0; w < vocab_size; ++w)
    pos[w] = Cell{static_cast<std::uint32_t>(cells[w] / side), static_cast<std::uint32_t>(cells[w] % side)};
  return WordTable::from_positions(side, std::move(pos));
}

/// New table of the same side from a word-id -> cell assignment.
inline WordTable apply_allocation(const WordTable& table, std::span<const Cell> assignment) {
  if (assignment.size() < table.vocab_size())
    throw ConstraintViolation("apply_allocation: word " + std::to_string(assignment.size()) + " has no position");
  if (assignment.size() > table.vocab_size())
    throw ConstraintViolation("apply_allocation: assignment names unknown word " + std::to_string(table.vocab_size()));
  return WordTable::from_positions(table.side(), std::vector<Cell>(assignment.begin(), assignment.end()));
}

}  // namespace tablelm
