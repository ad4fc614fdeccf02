#include "sctx/decode.hpp"

#include <algorithm>
#include <cmath>

#include "sctx/data.hpp"
#include "sctx/errors.hpp"

namespace sctx {

ModelScorer::ModelScorer(const Seq2Seq<float>& model, const IdTensor& src, const BoolTensor& src_mask)
    : model_(model), tape_(std::make_unique<Tape<float>>(false)) {
  const EncoderOutput<float> enc = model_.encode(*tape_, src, src_mask);
  state_ = model_.start_decoding(*tape_, enc);
}

std::vector<double> log_softmax(const float* logits, std::size_t n) {
  double mx = -INFINITY;
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(logits[j]));
  double total = 0;
  for (std::size_t j = 0; j < n; ++j) total += std::exp(static_cast<double>(logits[j]) - mx);
  const double lse = mx + std::log(total);
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<double>(logits[j]) - lse;
  return out;
}

std::vector<std::vector<double>> ModelScorer::step(const std::vector<std::int32_t>& last) {
  const Var<float> logits = model_.decode_step(*tape_, state_, last);
  const std::size_t V = vocab();
  std::vector<std::vector<double>> out;
  out.reserve(last.size());
  for (std::size_t r = 0; r < last.size(); ++r) out.push_back(log_softmax(logits.value().ptr() + r * V, V));
  return out;
}

void ModelScorer::reorder(const std::vector<std::size_t>& rows) { model_.reorder(state_, rows); }

std::vector<std::vector<std::int32_t>> greedy_search(StepScorer& scorer, std::size_t rows, std::size_t max_len,
                                                     std::int32_t bos, std::int32_t eos) {
  std::vector<std::vector<std::int32_t>> out(rows);
  std::vector<std::size_t> live(rows);  // live row -> sentence
  for (std::size_t i = 0; i < rows; ++i) live[i] = i;
  std::vector<std::int32_t> last(rows, bos);
  for (std::size_t t = 0; t < max_len && !live.empty(); ++t) {
    const auto logp = scorer.step(last);
    std::vector<std::size_t> keep;
    std::vector<std::size_t> next_live;
    std::vector<std::int32_t> next_last;
    for (std::size_t r = 0; r < live.size(); ++r) {
      const auto best = static_cast<std::int32_t>(std::max_element(logp[r].begin(), logp[r].end()) - logp[r].begin());
      if (best == eos) continue;
      out[live[r]].push_back(best);
      keep.push_back(r);
      next_live.push_back(live[r]);
      next_last.push_back(best);
    }
    if (keep.size() != live.size() && !keep.empty()) scorer.reorder(keep);
    live = std::move(next_live);
    last = std::move(next_last);
  }
  return out;
}

namespace {

struct Hypothesis {
  std::vector<std::int32_t> tokens;
  double score = 0;
};

double normalized(double score, std::size_t length, double alpha) {
  return score / std::pow(static_cast<double>(std::max<std::size_t>(length, 1)), alpha);
}

}  // namespace

std::vector<std::vector<std::int32_t>> beam_search(StepScorer& scorer, std::size_t rows, std::size_t beam,
                                                   double alpha, std::size_t max_len, std::int32_t bos,
                                                   std::int32_t eos) {
  if (beam == 0) throw ConfigError("beam size must be positive");
  std::vector<std::vector<Hypothesis>> live(rows, std::vector<Hypothesis>(1));
  std::vector<std::vector<std::pair<double, std::vector<std::int32_t>>>> finished(rows);  // (normalized, tokens)
  std::vector<bool> done(rows, false);
  std::vector<std::int32_t> last(rows, bos);

  for (std::size_t t = 0; t < max_len && !last.empty(); ++t) {
    const auto logp = scorer.step(last);
    std::vector<std::size_t> parents;
    std::vector<std::int32_t> next_last;
    std::size_t row = 0;
    for (std::size_t s = 0; s < rows; ++s) {
      if (done[s]) continue;
      struct Candidate {
        double score;
        std::size_t hyp;
        std::int32_t token;
      };
      std::vector<Candidate> cands;
      for (std::size_t h = 0; h < live[s].size(); ++h) {
        const auto& lp = logp[row + h];
        for (std::size_t v = 0; v < lp.size(); ++v) {
          cands.push_back({live[s][h].score + lp[v], h, static_cast<std::int32_t>(v)});
        }
      }
      std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
      std::vector<Hypothesis> next;
      std::vector<std::size_t> next_parent;
      for (const auto& c : cands) {
        if (next.size() == beam) break;
        std::vector<std::int32_t> tokens = live[s][c.hyp].tokens;
        if (c.token == eos) {
          if (finished[s].size() < beam) {
            finished[s].emplace_back(normalized(c.score, tokens.size() + 1, alpha), std::move(tokens));
          }
          continue;
        }
        tokens.push_back(c.token);
        next.push_back({std::move(tokens), c.score});
        next_parent.push_back(row + c.hyp);
      }
      row += live[s].size();
      if (finished[s].size() >= beam) {
        done[s] = true;
        live[s].clear();
        continue;
      }
      for (std::size_t k = 0; k < next.size(); ++k) {
        parents.push_back(next_parent[k]);
        next_last.push_back(next[k].tokens.back());
      }
      live[s] = std::move(next);
    }
    bool identity = parents.size() == last.size();
    for (std::size_t k = 0; identity && k < parents.size(); ++k) identity = parents[k] == k;
    if (!parents.empty() && !identity) scorer.reorder(parents);
    last = std::move(next_last);
  }

  std::vector<std::vector<std::int32_t>> out(rows);
  for (std::size_t s = 0; s < rows; ++s) {
    for (auto& h : live[s]) finished[s].emplace_back(normalized(h.score, h.tokens.size(), alpha), std::move(h.tokens));
    double best = -INFINITY;
    for (auto& [score, tokens] : finished[s]) {
      if (score > best) {
        best = score;
        out[s] = tokens;
      }
    }
  }
  return out;
}

std::vector<std::vector<std::int32_t>> decode(const Seq2Seq<float>& model, const IdTensor& src,
                                              const BoolTensor& src_mask, const DecodeOptions& options) {
  std::size_t max_len = options.max_len;
  if (max_len == 0) max_len = 2 * src.dim(1) + 10;
  max_len = std::min(max_len, model.config().max_len);
  ModelScorer scorer(model, src, src_mask);
  if (options.beam <= 1 && options.beam != 0) return greedy_search(scorer, src.dim(0), max_len, Vocab::bos, Vocab::eos);
  return beam_search(scorer, src.dim(0), options.beam, options.alpha, max_len, Vocab::bos, Vocab::eos);
}

}  // namespace sctx
