#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "sctx/transformer.hpp"

namespace sctx {

/// Incremental next-token scorer over a set of live rows.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::size_t vocab() const = 0;
  /// Feeds each row its latest token and returns next-token log-probabilities,
  /// one vector per row.
  virtual std::vector<std::vector<double>> step(const std::vector<std::int32_t>& last) = 0;
  /// Keeps rows `rows` (in that order, repeats allowed).
  virtual void reorder(const std::vector<std::size_t>& rows) = 0;
};

/// Scores a batch of source sentences with a model, without dropout.
class ModelScorer : public StepScorer {
 public:
  ModelScorer(const Seq2Seq<float>& model, const IdTensor& src, const BoolTensor& src_mask);

  std::size_t vocab() const override { return model_.config().tgt_vocab; }
  std::vector<std::vector<double>> step(const std::vector<std::int32_t>& last) override;
  void reorder(const std::vector<std::size_t>& rows) override;

  /// deep-tam: transparent-attention weights of the latest step, per decoder layer [rows, L].
  const std::vector<Tensor<float>>& beta() const { return state_.beta; }

 private:
  const Seq2Seq<float>& model_;
  std::unique_ptr<Tape<float>> tape_;
  DecoderState<float> state_;
};

struct DecodeOptions {
  std::size_t beam = 1;
  double alpha = 0.6;       // length penalty: score / len^alpha
  std::size_t max_len = 0;  // 0: twice the longest source plus 10, capped by the model horizon
};

/// Log-softmax in double precision.
std::vector<double> log_softmax(const float* logits, std::size_t n);

/// Argmax per row (lowest id on ties) until eos or max_len. `rows` sentences
/// start from bos. Finished rows are dropped from the scorer.
std::vector<std::vector<std::int32_t>> greedy_search(StepScorer& scorer, std::size_t rows, std::size_t max_len,
                                                     std::int32_t bos, std::int32_t eos);

/// Beam search with length-normalized scores. Returned sequences exclude bos
/// and eos. beam == 1 performs the same computations as greedy_search.
std::vector<std::vector<std::int32_t>> beam_search(StepScorer& scorer, std::size_t rows, std::size_t beam,
                                                   double alpha, std::size_t max_len, std::int32_t bos,
                                                   std::int32_t eos);

/// Decodes a batch of sources with the model.
std::vector<std::vector<std::int32_t>> decode(const Seq2Seq<float>& model, const IdTensor& src,
                                              const BoolTensor& src_mask, const DecodeOptions& options = {});

}  // namespace sctx
