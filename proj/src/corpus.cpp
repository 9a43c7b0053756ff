#include "ttt/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <stdexcept>

namespace ttt {

Corpus chunk_corpus(const std::string& bytes, Index context, double split_frac) {
  if (context < 2) throw std::invalid_argument("context must be >= 2");
  if (!(split_frac > 0.0 && split_frac < 1.0)) throw std::invalid_argument("split_frac must lie in (0, 1)");
  const Index n = static_cast<Index>(bytes.size());
  if (n < 2 * context) {
    throw std::invalid_argument("corpus of " + std::to_string(n) + " bytes is smaller than two sequences of " +
                                std::to_string(context));
  }
  const Index chunks = n / context;
  // The small offset keeps 0.9 * 10 from flooring to 8.
  Index n_train = static_cast<Index>(std::floor(split_frac * static_cast<double>(chunks) + 1e-9));
  n_train = std::clamp<Index>(n_train, 1, chunks - 1);

  Corpus c;
  for (Index i = 0; i < chunks; ++i) {
    Sequence s(static_cast<size_t>(context));
    for (Index t = 0; t < context; ++t) s[static_cast<size_t>(t)] = static_cast<unsigned char>(bytes[static_cast<size_t>(i * context + t)]);
    (i < n_train ? c.train : c.val).push_back(std::move(s));
  }
  return c;
}

Corpus load_corpus(const std::string& path, Index context, double split_frac) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw std::invalid_argument("corpus '" + path + "' is empty");
  return chunk_corpus(bytes, context, split_frac);
}

BatchSampler::BatchSampler(Index n_sequences, std::uint64_t seed) : n_(n_sequences), rng_(seed) {
  if (n_ < 1) throw std::invalid_argument("no training sequences");
  order_.resize(static_cast<size_t>(n_));
  reshuffle();
}

void BatchSampler::reshuffle() {
  std::iota(order_.begin(), order_.end(), Index{0});
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (size_t i = order_.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng_() % i);
    std::swap(order_[i - 1], order_[j]);
  }
  cursor_ = 0;
}

std::vector<Index> BatchSampler::next(Index count) {
  std::vector<Index> out;
  out.reserve(static_cast<size_t>(count));
  while (static_cast<Index>(out.size()) < count) {
    if (cursor_ == order_.size()) reshuffle();
    out.push_back(order_[cursor_++]);
  }
  return out;
}

namespace {

// Uniform integer in [0, n) straight from the engine (portable across
// standard libraries, unlike std::uniform_int_distribution).
size_t draw(std::mt19937_64& rng, size_t n) { return static_cast<size_t>(rng() % n); }

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0); }

std::string random_word(std::mt19937_64& rng, size_t min_len, size_t max_len) {
  static const std::string consonants = "bcdfghjklmnprstvwz";
  static const std::string vowels = "aeiou";
  const size_t len = min_len + draw(rng, max_len - min_len + 1);
  std::string w;
  for (size_t i = 0; i < len; ++i) w += (i % 2 == 0) ? consonants[draw(rng, consonants.size())] : vowels[draw(rng, vowels.size())];
  return w;
}

}  // namespace

std::string synthetic_corpus(Index bytes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const size_t lexicon_size = 400;
  const size_t successors = 3;
  std::vector<std::string> lexicon;
  for (size_t i = 0; i < lexicon_size; ++i) lexicon.push_back(random_word(rng, 1, 7));

  // Zipf(1) cumulative weights over the lexicon.
  std::vector<double> cdf(lexicon_size);
  double acc = 0;
  for (size_t i = 0; i < lexicon_size; ++i) cdf[i] = acc += 1.0 / static_cast<double>(i + 1);
  for (auto& c : cdf) c /= acc;
  auto zipf = [&] { return static_cast<size_t>(std::lower_bound(cdf.begin(), cdf.end(), unit(rng)) - cdf.begin()); };

  std::vector<std::vector<size_t>> next(lexicon_size);
  for (auto& n : next) {
    for (size_t k = 0; k < successors; ++k) n.push_back(zipf());
  }

  std::string out;
  out.reserve(static_cast<size_t>(bytes));
  while (static_cast<Index>(out.size()) < bytes) {
    std::vector<std::string> names;
    const size_t n_names = 3 + draw(rng, 5);
    for (size_t i = 0; i < n_names; ++i) {
      std::string name = random_word(rng, 4, 9);
      name[0] = static_cast<char>(name[0] - 'a' + 'A');
      names.push_back(std::move(name));
    }
    const size_t sentences = 20 + draw(rng, 60);
    size_t word = zipf();
    for (size_t s = 0; s < sentences; ++s) {
      const size_t len = 4 + draw(rng, 9);
      for (size_t i = 0; i < len; ++i) {
        std::string token;
        if (unit(rng) < 0.2) {
          token = names[draw(rng, names.size())];
        } else {
          word = unit(rng) < 0.6 ? next[word][draw(rng, successors)] : zipf();
          token = lexicon[word];
          if (i == 0) token[0] = static_cast<char>(token[0] - 'a' + 'A');
        }
        out += token;
        out += i + 1 == len ? ". " : " ";
      }
      if (draw(rng, 6) == 0) out += "\n";
    }
    out += "\n\n";
  }
  out.resize(static_cast<size_t>(bytes));
  return out;
}

}  // namespace ttt
