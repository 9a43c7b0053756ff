#pragma once

// Byte-level corpus: fixed-length chunks, a contiguous held-out tail and a
// seeded batch order.

#include "ttt/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace ttt {

using Sequence = std::vector<int>;

struct Corpus {
  /// Non-overlapping length-T chunks in file order; the last
  /// (1 - split_frac) of them are validation.
  std::vector<Sequence> train;
  std::vector<Sequence> val;
};

/// Splits bytes into floor(n / T) chunks; the first floor(split_frac *
/// chunks) train, the rest validate (at least one each). Trailing bytes that
/// do not fill a chunk are dropped.
Corpus chunk_corpus(const std::string& bytes, Index context, double split_frac);

/// Reads a file and chunks it. Throws std::runtime_error for a missing file
/// and std::invalid_argument when it holds fewer than 2T bytes.
Corpus load_corpus(const std::string& path, Index context, double split_frac);

/// Endless stream of training-sequence indices: a fresh seeded permutation
/// per epoch.
class BatchSampler {
 public:
  BatchSampler(Index n_sequences, std::uint64_t seed);
  std::vector<Index> next(Index count);

 private:
  void reshuffle();

  Index n_;
  std::mt19937_64 rng_;
  std::vector<Index> order_;
  size_t cursor_ = 0;
};

/// Deterministic synthetic text. Documents mix a Zipf-distributed global
/// lexicon with a first-order word chain and document-local proper names
/// that recur throughout the document, so later tokens are only predictable
/// from earlier context.
std::string synthetic_corpus(Index bytes, std::uint64_t seed);

}  // namespace ttt
