#include "sctx/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "sctx/errors.hpp"
#include "sctx/rng.hpp"

namespace sctx {

BleuStats& BleuStats::operator+=(const BleuStats& other) {
  for (std::size_t n = 0; n < 4; ++n) {
    matches[n] += other.matches[n];
    totals[n] += other.totals[n];
  }
  hyp_len += other.hyp_len;
  ref_len += other.ref_len;
  return *this;
}

namespace {

std::map<std::vector<std::string>, std::size_t> ngrams(const Sentence& s, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[std::vector<std::string>(s.begin() + i, s.begin() + i + n)];
  return out;
}

double brevity_penalty(std::size_t hyp_len, std::size_t ref_len) {
  if (hyp_len >= ref_len) return 1.0;
  return std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
}

}  // namespace

BleuStats bleu_stats(const Sentence& hypothesis, const Sentence& reference) {
  BleuStats st;
  st.hyp_len = hypothesis.size();
  st.ref_len = reference.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto h = ngrams(hypothesis, n);
    const auto r = ngrams(reference, n);
    for (const auto& [gram, count] : h) {
      st.totals[n - 1] += count;
      auto it = r.find(gram);
      if (it != r.end()) st.matches[n - 1] += std::min(count, it->second);
    }
  }
  return st;
}

double bleu_from_stats(const BleuStats& st) {
  if (st.hyp_len == 0) return 0.0;
  double log_sum = 0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (st.matches[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(st.matches[n]) / static_cast<double>(st.totals[n]));
  }
  return 100.0 * brevity_penalty(st.hyp_len, st.ref_len) * std::exp(log_sum / 4);
}

double sentence_bleu(const Sentence& hypothesis, const Sentence& reference) {
  if (hypothesis.empty()) return 0.0;
  const BleuStats st = bleu_stats(hypothesis, reference);
  if (st.matches[0] == 0) return 0.0;
  double log_sum = std::log(static_cast<double>(st.matches[0]) / static_cast<double>(st.totals[0]));
  for (std::size_t n = 1; n < 4; ++n) {
    log_sum += std::log(static_cast<double>(st.matches[n] + 1) / static_cast<double>(st.totals[n] + 1));
  }
  return 100.0 * brevity_penalty(st.hyp_len, st.ref_len) * std::exp(log_sum / 4);
}

BleuResult bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references) {
  if (hypotheses.size() != references.size()) {
    throw InputError("bleu: " + std::to_string(hypotheses.size()) + " hypotheses for " +
                     std::to_string(references.size()) + " references");
  }
  BleuResult out;
  BleuStats total;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    out.stats.push_back(bleu_stats(hypotheses[i], references[i]));
    total += out.stats.back();
    out.sentence.push_back(sentence_bleu(hypotheses[i], references[i]));
  }
  out.corpus = bleu_from_stats(total);
  return out;
}

namespace {

template <typename Item, typename Metric>
double paired_bootstrap(const std::vector<Item>& a, const std::vector<Item>& b, std::size_t resamples,
                        std::uint64_t seed, Metric metric) {
  if (a.size() != b.size()) {
    throw InputError("bootstrap_test: systems scored " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()) + " sentences");
  }
  if (a.size() < 2) throw InputError("bootstrap_test needs at least two sentences");
  if (resamples == 0) throw InputError("bootstrap_test needs at least one resample");
  Rng rng(Rng::derive(seed, 0xb007));
  std::vector<std::size_t> idx(a.size());
  std::size_t not_better = 0;
  for (std::size_t r = 0; r < resamples; ++r) {
    for (auto& i : idx) i = rng.below(a.size());
    if (metric(b, idx) <= metric(a, idx)) ++not_better;
  }
  return static_cast<double>(not_better) / static_cast<double>(resamples);
}

}  // namespace

double bootstrap_test(const std::vector<BleuStats>& a, const std::vector<BleuStats>& b, std::size_t resamples,
                      std::uint64_t seed) {
  return paired_bootstrap(a, b, resamples, seed, [](const std::vector<BleuStats>& s, const std::vector<std::size_t>& idx) {
    BleuStats total;
    for (std::size_t i : idx) total += s[i];
    return bleu_from_stats(total);
  });
}

double bootstrap_test(const std::vector<double>& a, const std::vector<double>& b, std::size_t resamples,
                      std::uint64_t seed) {
  return paired_bootstrap(a, b, resamples, seed, [](const std::vector<double>& s, const std::vector<std::size_t>& idx) {
    double total = 0;
    for (std::size_t i : idx) total += s[i];
    return total / static_cast<double>(idx.size());
  });
}

}  // namespace sctx
