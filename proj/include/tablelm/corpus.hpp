// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Text ingestion: vocabulary construction with count thresholding, encoding of
// sentences into id streams with boundary markers, and lane/block iteration
// for truncated backpropagation through time.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tablelm/error.hpp"
#include "tablelm/hash.hpp"

namespace tablelm {

using WordId = std::int32_t;

inline constexpr std::string_view kSentenceStart = "<s>";
inline constexpr std::string_view kSentenceEnd = "</s>";
inline constexpr std::string_view kUnknown = "<unk>";

inline std::vector<std::string_view> split_tokens(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::vector<std::string> read_lines(std::istream& in) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(std::move(line));
  return lines;
}

inline std::vector<std::string> read_lines_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return read_lines(in);
}

/// Word <-> id map. Regular words come first in descending count order
/// (ties by first occurrence); the three special tokens are appended last.
class Vocabulary {
 public:
  Vocabulary() = default;

  /// Builds from an explicit word list (specials must not be included).
  static Vocabulary from_entries(std::vector<std::pair<std::string, std::uint64_t>> regular,
                                 std::uint64_t start_count, std::uint64_t end_count,
                                 std::uint64_t unk_count) {
    Vocabulary v;
    for (auto& [w, c] : regular) v.push(std::move(w), c);
    v.start_ = v.push(std::string(kSentenceStart), start_count);
    v.end_ = v.push(std::string(kSentenceEnd), end_count);
    v.unk_ = v.push(std::string(kUnknown), unk_count);
    return v;
  }

  std::size_t size() const { return words_.size(); }
  const std::string& word(WordId id) const { return words_.at(static_cast<std::size_t>(id)); }
  std::uint64_t count(WordId id) const { return counts_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& words() const { return words_; }

  WordId start_id() const { return start_; }
  WordId end_id() const { return end_; }
  WordId unk_id() const { return unk_; }
  bool is_special(WordId id) const { return id == start_ || id == end_ || id == unk_; }

  /// Id of `w`, or the unknown-token id when out of vocabulary.
  WordId id_of(std::string_view w) const {
    auto it = index_.find(std::string(w));
    return it == index_.end() ? unk_ : it->second;
  }
  bool contains(std::string_view w) const { return index_.count(std::string(w)) != 0; }

  std::uint64_t hash() const {
    Hasher h;
    h.u64(words_.size());
    for (std::size_t i = 0; i < words_.size(); ++i) h.str(words_[i]).u64(counts_[i]);
    return h.digest();
  }

  /// TSV `word<TAB>count` in id order; specials are last.
  void write(std::ostream& os) const {
    for (std::size_t i = 0; i < words_.size(); ++i) os << words_[i] << '\t' << counts_[i] << '\n';
  }

  static Vocabulary read(std::istream& is) {
    std::vector<std::pair<std::string, std::uint64_t>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos) throw FormatError("vocab line " + std::to_string(lineno) + ": missing tab");
      std::uint64_t c = 0;
      try {
        c = std::stoull(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw FormatError("vocab line " + std::to_string(lineno) + ": bad count");
      }
      rows.emplace_back(line.substr(0, tab), c);
    }
    if (rows.size() < 3) throw FormatError("vocab file lacks the special tokens");
    const auto n = rows.size();
    if (rows[n - 3].first != kSentenceStart || rows[n - 2].first != kSentenceEnd ||
        rows[n - 1].first != kUnknown)
      throw FormatError("vocab file must end with <s>, </s>, <unk>");
    auto unk = rows[n - 1].second, end = rows[n - 2].second, start = rows[n - 3].second;
    rows.resize(n - 3);
    return from_entries(std::move(rows), start, end, unk);
  }

 private:
  WordId push(std::string w, std::uint64_t c) {
    const auto id = static_cast<WordId>(words_.size());
    if (!index_.emplace(w, id).second) throw ConstraintViolation("duplicate vocabulary word: " + w);
    words_.push_back(std::move(w));
    counts_.push_back(c);
    return id;
  }

  std::vector<std::string> words_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, WordId> index_;
  WordId start_ = -1;
  WordId end_ = -1;
  WordId unk_ = -1;
};

/// Mergeable word counts. Merging is associative: counts add and the first
/// occurrence keeps the smaller global position.
class WordCounts {
 public:
  struct Entry {
    std::uint64_t count = 0;
    std::uint64_t first_seen = 0;
  };

  void add_line(std::string_view line) {
    for (auto tok : split_tokens(line)) {
      ++tokens_;
      auto [it, fresh] = entries_.try_emplace(std::string(tok));
      if (fresh) it->second.first_seen = position_;
      ++it->second.count;
      ++position_;
    }
    ++lines_;
  }

  /// `offset` is the global token position at which `other` started counting.
  void merge(const WordCounts& other, std::uint64_t offset) {
    for (const auto& [w, e] : other.entries_) {
      auto [it, fresh] = entries_.try_emplace(w);
      const auto pos = e.first_seen + offset;
      if (fresh || pos < it->second.first_seen) it->second.first_seen = pos;
      it->second.count += e.count;
    }
    tokens_ += other.tokens_;
    lines_ += other.lines_;
    position_ = std::max(position_, offset + other.position_);
  }

  const std::unordered_map<std::string, Entry>& entries() const { return entries_; }
  std::uint64_t tokens() const { return tokens_; }
  std::uint64_t lines() const { return lines_; }

 private:
  std::unordered_map<std::string, Entry> entries_;
  std::uint64_t tokens_ = 0;
  std::uint64_t lines_ = 0;
  std::uint64_t position_ = 0;
};

inline Vocabulary vocab_from_counts(const WordCounts& counts, std::uint64_t min_count) {
  if (counts.tokens() == 0) throw EmptyInputError("build_vocab: corpus contains no tokens");
  if (min_count == 0) throw Error("build_vocab: min_count must be positive");

  struct Row {
    std::string word;
    std::uint64_t count, first;
  };
  std::vector<Row> kept;
  std::uint64_t unk = 0;
  for (const auto& [w, e] : counts.entries()) {
    if (w == kSentenceStart || w == kSentenceEnd || w == kUnknown) {
      if (w == kUnknown) unk += e.count;
      continue;
    }
    if (e.count >= min_count) kept.push_back({w, e.count, e.first_seen});
    else unk += e.count;
  }
  std::sort(kept.begin(), kept.end(), [](const Row& a, const Row& b) {
    return a.count != b.count ? a.count > b.count : a.first < b.first;
  });
  std::vector<std::pair<std::string, std::uint64_t>> regular;
  regular.reserve(kept.size());
  for (auto& r : kept) regular.emplace_back(std::move(r.word), r.count);
  return Vocabulary::from_entries(std::move(regular), counts.lines(), counts.lines(), unk);
}

/// Builds a vocabulary keeping words seen at least `min_count` times.
inline Vocabulary build_vocab(const std::vector<std::string>& lines, std::uint64_t min_count = 3) {
  WordCounts counts;
  for (const auto& l : lines) counts.add_line(l);
  return vocab_from_counts(counts, min_count);
}

/// Encoded corpus. `sentence_offsets[k]` is the index of the start marker of
/// sentence k; a sentence spans up to the next offset (or the end).
struct TokenStream {
  std::vector<WordId> ids;
  std::vector<std::size_t> sentence_offsets;

  std::size_t size() const { return ids.size(); }
  std::size_t sentences() const { return sentence_offsets.size(); }

  std::pair<std::size_t, std::size_t> sentence_range(std::size_t k) const {
    const auto b = sentence_offsets.at(k);
    const auto e = k + 1 < sentence_offsets.size() ? sentence_offsets[k + 1] : ids.size();
    return {b, e};
  }
};

inline TokenStream encode(const std::vector<std::string>& lines, const Vocabulary& vocab) {
  TokenStream s;
  for (const auto& line : lines) {
    s.sentence_offsets.push_back(s.ids.size());
    s.ids.push_back(vocab.start_id());
    for (auto tok : split_tokens(line)) s.ids.push_back(vocab.id_of(tok));
    s.ids.push_back(vocab.end_id());
  }
  return s;
}

inline std::vector<std::string> decode(const std::vector<WordId>& ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(vocab.word(id));
  return out;
}

/// One truncated-BPTT block: `lanes` parallel sequences of `steps` positions,
/// stored lane-major. targets[l][t] = stream position after inputs[l][t].
struct Batch {
  std::size_t lanes = 0;
  std::size_t steps = 0;
  std::vector<WordId> inputs;
  std::vector<WordId> targets;

  WordId input(std::size_t lane, std::size_t t) const { return inputs[lane * steps + t]; }
  WordId target(std::size_t lane, std::size_t t) const { return targets[lane * steps + t]; }
};

/// Splits the stream into `batch_size` contiguous lanes of equal length and
/// cuts each lane into blocks of min(bptt_len, lane length) steps. Hidden state
/// is meant to carry from block k to block k+1 within a lane. Lane tails that
/// do not fill a whole block are dropped.
inline std::vector<Batch> batch_iter(const TokenStream& stream, std::size_t batch_size,
                                     std::size_t bptt_len) {
  if (batch_size == 0 || bptt_len == 0) throw Error("batch_iter: batch_size and bptt_len must be positive");
  const auto len = stream.ids.size();
  if (len < batch_size + 1)
    throw EmptyInputError("batch_iter: stream of " + std::to_string(len) + " tokens is too short for " +
                          std::to_string(batch_size) + " lanes");
  const std::size_t lane_len = (len - 1) / batch_size;  // targets per lane
  const std::size_t steps = std::min(bptt_len, lane_len);
  const std::size_t blocks = lane_len / steps;

  std::vector<Batch> out;
  out.reserve(blocks);
  for (std::size_t k = 0; k < blocks; ++k) {
    Batch b;
    b.lanes = batch_size;
    b.steps = steps;
    b.inputs.resize(batch_size * steps);
    b.targets.resize(batch_size * steps);
    for (std::size_t l = 0; l < batch_size; ++l) {
      const std::size_t base = l * lane_len + k * steps;
      for (std::size_t t = 0; t < steps; ++t) {
        b.inputs[l * steps + t] = stream.ids[base + t];
        b.targets[l * steps + t] = stream.ids[base + t + 1];
      }
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace tablelm
