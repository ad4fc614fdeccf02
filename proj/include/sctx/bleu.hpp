#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace sctx {

using Sentence = std::vector<std::string>;

/// Clipped n-gram match and total counts for n = 1..4 plus lengths.
struct BleuStats {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& other);
  bool operator==(const BleuStats&) const = default;
};

BleuStats bleu_stats(const Sentence& hypothesis, const Sentence& reference);

/// Corpus BLEU in [0, 100] from summed statistics; 0 if any order has no match.
double bleu_from_stats(const BleuStats& stats);

/// Per-sentence BLEU with add-one smoothing on the 2..4-gram precisions.
/// An empty hypothesis scores 0.
double sentence_bleu(const Sentence& hypothesis, const Sentence& reference);

struct BleuResult {
  double corpus = 0;
  std::vector<double> sentence;
  std::vector<BleuStats> stats;
};

BleuResult bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references);

/// Paired bootstrap, one-sided: resample sentence indices with replacement
/// and return the fraction of resamples in which system B does not beat A.
/// The per-resample metric is corpus BLEU over the resampled statistics.
double bootstrap_test(const std::vector<BleuStats>& a, const std::vector<BleuStats>& b, std::size_t resamples = 1000,
                      std::uint64_t seed = 1);

/// Same test with the mean of per-sentence scores as the metric.
double bootstrap_test(const std::vector<double>& a, const std::vector<double>& b, std::size_t resamples = 1000,
                      std::uint64_t seed = 1);

}  // namespace sctx
