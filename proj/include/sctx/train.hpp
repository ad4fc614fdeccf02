#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sctx/bleu.hpp"
#include "sctx/data.hpp"
#include "sctx/decode.hpp"
#include "sctx/optim.hpp"
#include "sctx/transformer.hpp"

namespace sctx {

struct TrainOptions {
  std::size_t steps = 3000;
  std::size_t batch_size = 32;
  std::size_t max_len = 64;  // longer sentences are dropped from batching
  double smoothing = 0.1;
  std::size_t log_every = 50;
  std::uint64_t seed = 1;
  AdamConfig adam;
  std::size_t speed_window = 20;  // steps per timed window
  std::string dump_path;          // where the last batch goes if the loss blows up
};

/// loss is the label-smoothed objective, nll the plain negative log-likelihood.
struct LossPoint {
  std::size_t step = 0;
  double loss = 0;
  double nll = 0;
  double lr = 0;
  bool operator==(const LossPoint&) const = default;
};

/// Median of per-window rates over windows 2..6 (the first is warm-up).
class SpeedMeter {
 public:
  void add(double seconds, std::size_t units);
  double rate() const;
  std::size_t windows() const { return rates_.size(); }

 private:
  std::vector<double> rates_;
};

/// Step-by-step trainer. Batches and dropout masks depend only on the seed
/// and the step number, so a resumed run repeats an uninterrupted one.
class Trainer {
 public:
  Trainer(Seq2Seq<float>& model, std::vector<Example> train, TrainOptions options);

  LossPoint step();
  std::size_t steps_done() const { return optimizer_.step(); }
  const TrainOptions& options() const { return options_; }
  const BatchStats& batch_stats() const { return stats_; }
  double steps_per_second() const { return speed_.rate(); }

  /// Parameters and optimizer state.
  NamedTensors checkpoint() const;
  void resume(const NamedTensors& entries);

 private:
  const Batch& batch_for(std::size_t step);
  void dump_batch(const Batch& batch, std::size_t step) const;

  Seq2Seq<float>& model_;
  std::vector<Example> examples_;
  TrainOptions options_;
  Adam<float> optimizer_;
  BatchStats stats_;
  std::size_t epoch_ = SIZE_MAX;
  std::vector<Batch> batches_;
  std::size_t batches_per_epoch_ = 0;
  SpeedMeter speed_;
  std::size_t window_steps_ = 0;
  double window_seconds_ = 0;
};

struct TrainResult {
  std::vector<LossPoint> curve;
  std::size_t steps = 0;
  double steps_per_second = 0;
  bool stopped_early = false;
  NamedTensors checkpoint;
};

/// `stop` is polled after every step and may end training early.
TrainResult train(Seq2Seq<float>& model, const std::vector<Example>& examples, const TrainOptions& options,
                  const std::function<bool(std::size_t step)>& stop = {});

struct EvalReport {
  double corpus_bleu = 0;
  std::vector<double> sentence_bleu;
  double token_accuracy = 0;  // aligned matches / max(len(hyp), len(ref)), summed
  double exact_match = 0;
  double decode_sentences_per_second = 0;
  double train_steps_per_second = 0;
  std::size_t parameters = 0;
  std::size_t sentences = 0;

  std::string to_json() const;
};

struct Evaluation {
  EvalReport report;
  std::vector<Sentence> hypotheses;
  std::vector<Sentence> references;
  std::vector<BleuStats> stats;
};

double token_accuracy(const std::vector<std::vector<std::int32_t>>& hyps,
                      const std::vector<std::vector<std::int32_t>>& refs);

/// Decodes every example (in order, batch by batch) and scores it.
Evaluation evaluate(const Seq2Seq<float>& model, const std::vector<Example>& examples, const Vocab& tgt_vocab,
                    const DecodeOptions& decode_options = {}, std::size_t batch_size = 64);

}  // namespace sctx
