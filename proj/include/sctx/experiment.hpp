#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sctx/gradcheck.hpp"
#include "sctx/probe.hpp"
#include "sctx/train.hpp"

namespace sctx {

/// Flat "key = value" text grouped under [section] headers. '#' and ';'
/// start comments. Keys are addressed as "section.key"; keys before the
/// first header live in the top-level section "".
class IniFile {
 public:
  struct Entry {
    std::string value;
    int line = 0;
  };

  static IniFile parse(const std::string& text);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const Entry* find(const std::string& key) const;
  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  std::map<std::string, Entry> entries_;
};

enum class CorpusSource { synthetic, files };

struct ExperimentConfig {
  std::string preset = "base-toy";
  ModelConfig model = model_preset("base-toy");  // vocab sizes are filled in from the data

  CorpusSource corpus = CorpusSource::synthetic;
  TaskKind task = TaskKind::copy;
  TaskOptions task_options;
  std::size_t train_size = 5000;
  std::size_t valid_size = 200;
  std::size_t test_size = 500;
  // corpus = files
  std::string train_source, train_target, valid_source, valid_target, test_source, test_target;
  TokenizerKind tokenizer = TokenizerKind::chars;
  std::size_t bpe_merges = 200;

  TrainOptions train = [] {
    TrainOptions t;
    t.adam.scale = 0.5;  // full Noam rate makes the deeper variants oscillate on the toy tasks
    return t;
  }();
  std::size_t eval_every = 250;       // validation decode cadence, 0 = never
  double early_stop = 0;              // validation token accuracy that ends training; 0 = off
  std::size_t checkpoint_every = 500;

  DecodeOptions decode;

  std::vector<std::string> ablation_rows = {"base",        "medium",   "shallow-mean", "shallow-max",
                                            "shallow-att", "deep-rnn", "deep-tam"};
  std::size_t resamples = 1000;
  bool parallel = false;

  ProbingSuiteOptions probe;

  std::uint64_t seed = 1;
  std::string out = "run";  // run directory; the ablation grid puts one subdirectory per row here

  /// Sets the run seed and every seed derived from it.
  void set_seed(std::uint64_t s);

  /// Canonical text form; parse(to_ini()) reproduces the configuration.
  std::string to_ini() const;
  /// Ignores train.steps and out, so a run can be extended or moved and still resume.
  bool same_run(const ExperimentConfig& other) const;
};

/// Required keys: model.variant, task.kind (or task.corpus = files),
/// train.steps. Unknown sections and keys are rejected with their line.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// "sctx <version>" and its git-style blob hash.
std::string version_string();
std::string version_hash();
/// SHA-1 of "blob <size>\0<content>", as `git hash-object` computes it.
std::string git_blob_hash(const std::string& content);

struct PreparedData {
  Tokenizer tokenizer;
  Vocab src_vocab, tgt_vocab;
  ParallelCorpus train_text, valid_text, test_text;
  std::vector<Example> train, valid, test;
};

/// Generates (or reads) the corpora and builds tokenizer and vocabularies
/// from the training side.
PreparedData prepare_data(const ExperimentConfig& config);

/// The model configuration with vocabulary sizes taken from the data.
ModelConfig model_config(const ExperimentConfig& config, const PreparedData& data);

struct RunSummary {
  std::size_t steps = 0;
  bool resumed = false;
  std::size_t resumed_from = 0;
  bool stopped_early = false;
  double steps_per_second = 0;
  double valid_accuracy = -1;  // last validation decode, -1 if none ran
};

/// Trains into `dir`:
///   config.ini, version.txt, src.vocab, tgt.vocab (bpe.model),
///   metrics.jsonl   {step, loss, nll, lr} and {step, valid_accuracy, valid_bleu}
///   timing.jsonl    {step, wall_seconds}
///   ckpt-<step>.bin, latest
/// A directory that already holds a checkpoint is resumed from it; its
/// config must match apart from train.steps.
RunSummary run_train(const ExperimentConfig& config, const std::string& dir);

struct LoadedRun {
  ExperimentConfig config;
  PreparedData data;
  std::unique_ptr<Seq2Seq<float>> model;
  std::size_t step = 0;
};

/// Rebuilds the model of a run directory from its config and latest checkpoint.
LoadedRun load_run(const std::string& dir);

/// Decodes the test split of a finished run; writes report.json and
/// hypotheses.txt into the run directory.
Evaluation run_eval(const std::string& dir, const std::optional<DecodeOptions>& decode = std::nullopt);

struct AblationRow {
  std::string name;     // base, medium, or a context variant
  std::string preset;   // the configured preset, or medium-toy for the widened baseline
  Variant variant = Variant::vanilla;
  std::size_t parameters = 0;
  long long delta_parameters = 0;  // against the base row's configuration
  double train_steps_per_second = 0;
  double decode_sentences_per_second = 0;
  double bleu = 0;
  double token_accuracy = 0;
  std::size_t steps = 0;
  std::optional<double> p_vs_base, p_vs_medium;  // one-sided, this row better
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::string to_csv() const;
  std::string to_text() const;
};

/// Row name -> (preset, variant). "vanilla" is an alias of "base".
std::pair<std::string, Variant> ablation_row_spec(const std::string& name);

/// Trains and evaluates every row into <dir>/<row>/ with the shared corpus,
/// seed and step budget, then writes results.csv and results.txt. With
/// `parallel`, up to SCTX_THREADS (default: hardware threads) rows run at once.
AblationTable run_ablation(const ExperimentConfig& config, const std::string& dir);

/// Probing grid for a finished run: writes probe.csv and probe.json.
ProbingGrid run_probe(const std::string& dir, const std::optional<ProbingSuiteOptions>& options = std::nullopt);

/// Writes train/valid/test .src/.tgt files of the configured task.
void gen_data(const ExperimentConfig& config, const std::string& dir);

struct GradientSuiteEntry {
  Variant variant = Variant::vanilla;
  std::uint64_t seed = 0;
  GradCheckReport report;
  double seconds = 0;
};

/// Full-model gradient check of every variant on the grad-toy preset, one
/// small padded batch per seed, seeds 1..seeds.
std::vector<GradientSuiteEntry> gradient_suite(std::size_t seeds, const GradCheckOptions& options = {});

}  // namespace sctx
