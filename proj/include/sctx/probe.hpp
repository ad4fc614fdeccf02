#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sctx/data.hpp"
#include "sctx/transformer.hpp"

namespace sctx {

struct ProbeOptions {
  std::size_t hidden = 64;
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
};

struct ProbeResult {
  double accuracy = 0;           // test split
  double majority_baseline = 0;  // most frequent training label, scored on the test split
  double valid_accuracy = 0;     // of the selected epoch
  std::size_t classes = 0;
  std::size_t train = 0, valid = 0, test = 0;
};

/// One-hidden-layer perceptron on frozen features [N, d]. Features are
/// standardized with training-split statistics; the split is 80/10/10 after
/// a seeded shuffle, and the epoch with the best validation accuracy is kept.
/// Throws InputError when fewer than two classes reach the train or the
/// test split.
ProbeResult probe(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                  const ProbeOptions& options = {});

enum class ProbeTask { selen, wc, bshift };
enum class Extractor { pooled_top, shallow_g, deep_g };

std::string to_string(ProbeTask t);
std::string to_string(Extractor e);
ProbeTask parse_probe_task(const std::string& name);
Extractor parse_extractor(const std::string& name);
const std::vector<ProbeTask>& all_probe_tasks();
const std::vector<Extractor>& all_extractors();

struct ProbingSet {
  std::vector<std::string> sentences;
  std::vector<int> labels;
  std::size_t classes = 0;
};

/// Synthetic probing sentences over the symbols of `alphabet` (in order).
///   selen:  length bucket 1-4 / 5-8 / 9-12
///   wc:     which of the last four symbols (the markers) occurs; exactly one does
///   bshift: an increasing run of distinct symbols, label 1 if one adjacent pair was swapped
/// Labels cycle through the classes before shuffling, so they are balanced.
ProbingSet make_probing_set(ProbeTask task, std::size_t size, const std::vector<std::string>& alphabet,
                            std::uint64_t seed);

/// Throws ConfigError if the model cannot provide the representation:
/// shallow-g needs a context variant, deep-g needs deep-rnn or deep-tam.
void check_extractor(const ModelConfig& config, Extractor extractor);

/// Frozen, dropout-free sentence representations, one row per sentence.
///   pooled-top: mean of H^L over real tokens
///   shallow-g:  Global(H^L)
///   deep-g:     the deep-rnn vector, or the deep-tam context of the first
///               decoder layer at the first step (conditioned on the start vector)
std::vector<std::vector<double>> extract(const Seq2Seq<float>& model, const std::vector<std::vector<std::int32_t>>& sources,
                                         Extractor extractor, std::size_t batch_size = 64);

struct ProbingGrid {
  std::vector<Extractor> extractors;
  std::vector<ProbeTask> tasks;
  std::vector<std::vector<ProbeResult>> cells;  // [extractor][task]

  /// Header "extractor,<task>..." then one row per extractor; test accuracies.
  std::string to_csv() const;
};

struct ProbingSuiteOptions {
  std::size_t size = 1000;  // sentences per task
  std::vector<Extractor> extractors = all_extractors();
  ProbeOptions probe;
};

/// Generates each probing set from the model's source vocabulary, extracts
/// every requested representation and fits one probe per cell.
ProbingGrid probing_suite(const Seq2Seq<float>& model, const Vocab& src_vocab, const ProbingSuiteOptions& options);

}  // namespace sctx
