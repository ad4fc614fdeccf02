#include "sctx/train.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

#include "json.hpp"

#include "sctx/errors.hpp"

namespace sctx {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

void SpeedMeter::add(double seconds, std::size_t units) {
  if (seconds > 0 && units > 0) rates_.push_back(static_cast<double>(units) / seconds);
}

double SpeedMeter::rate() const {
  if (rates_.empty()) return 0;
  if (rates_.size() == 1) return rates_[0];
  const std::size_t end = std::min<std::size_t>(rates_.size(), 6);
  return median(std::vector<double>(rates_.begin() + 1, rates_.begin() + static_cast<std::ptrdiff_t>(end)));
}

Trainer::Trainer(Seq2Seq<float>& model, std::vector<Example> train, TrainOptions options)
    : model_(model),
      examples_(std::move(train)),
      options_(std::move(options)),
      optimizer_(model.params(), options_.adam, model.config().d_model) {
  batches_ = make_batches(examples_, options_.batch_size, options_.max_len, Rng::derive(options_.seed, 0), &stats_);
  if (batches_.empty()) throw InputError("training corpus has no usable sentence pairs");
  batches_per_epoch_ = batches_.size();
  epoch_ = 0;
}

const Batch& Trainer::batch_for(std::size_t step) {
  const std::size_t epoch = (step - 1) / batches_per_epoch_;
  if (epoch != epoch_) {
    batches_ = make_batches(examples_, options_.batch_size, options_.max_len, Rng::derive(options_.seed, epoch));
    epoch_ = epoch;
  }
  return batches_[(step - 1) % batches_per_epoch_];
}

void Trainer::dump_batch(const Batch& batch, std::size_t step) const {
  if (options_.dump_path.empty()) return;
  std::ofstream out(options_.dump_path, std::ios::trunc);
  out << "step " << step << "\n";
  for (std::size_t r = 0; r < batch.size(); ++r) {
    out << "example " << batch.indices[r] << "\n  src";
    for (std::size_t t = 0; t < batch.src.dim(1); ++t) out << ' ' << batch.src(r, t);
    out << "\n  tgt";
    for (std::size_t t = 0; t < batch.tgt.dim(1); ++t) out << ' ' << batch.tgt(r, t);
    out << "\n";
  }
}

LossPoint Trainer::step() {
  const auto t0 = Clock::now();
  const std::size_t step = optimizer_.step() + 1;
  const Batch& batch = batch_for(step);
  Rng dropout_rng(Rng::derive(options_.seed, 0x5eed0000ULL + step));
  model_.params().zero_grad();
  LossPoint point;
  point.step = step;
  try {
    Tape<float> tape(true);
    const IdTensor tgt_in = batch.decoder_input();
    const IdTensor tgt_out = batch.decoder_target();
    const BoolTensor tgt_mask = batch.decoder_target_mask();
    const Var<float> logits = model_.forward(tape, batch.src, batch.src_mask, tgt_in, {&dropout_rng});
    const Var<float> loss = cross_entropy(logits, tgt_out, &tgt_mask, static_cast<float>(options_.smoothing));
    const Var<float> nll = cross_entropy(logits, tgt_out, &tgt_mask, 0.0f);
    point.loss = loss.value()[0];
    point.nll = nll.value()[0];
    tape.backward(loss);
    point.lr = optimizer_.update();
  } catch (const NumericError& e) {
    dump_batch(batch, step);
    throw NumericError(std::string("non-finite value at training step ") + std::to_string(step) + ": " + e.what() +
                       (options_.dump_path.empty() ? "" : "; last batch written to " + options_.dump_path));
  }
  window_seconds_ += seconds_since(t0);
  if (++window_steps_ == options_.speed_window) {
    speed_.add(window_seconds_, window_steps_);
    window_steps_ = 0;
    window_seconds_ = 0;
  }
  return point;
}

NamedTensors Trainer::checkpoint() const {
  NamedTensors out = snapshot(model_.params());
  NamedTensors opt = optimizer_.state();
  out.insert(out.end(), std::make_move_iterator(opt.begin()), std::make_move_iterator(opt.end()));
  return out;
}

void Trainer::resume(const NamedTensors& entries) {
  restore(model_.params(), entries);
  optimizer_.load_state(entries);
}

TrainResult train(Seq2Seq<float>& model, const std::vector<Example>& examples, const TrainOptions& options,
                  const std::function<bool(std::size_t)>& stop) {
  Trainer trainer(model, examples, options);
  TrainResult result;
  while (trainer.steps_done() < options.steps) {
    const LossPoint p = trainer.step();
    if (options.log_every && (p.step % options.log_every == 0 || p.step == options.steps)) result.curve.push_back(p);
    if (stop && stop(p.step)) {
      result.stopped_early = p.step < options.steps;
      if (result.curve.empty() || result.curve.back().step != p.step) result.curve.push_back(p);
      break;
    }
  }
  result.steps = trainer.steps_done();
  result.steps_per_second = trainer.steps_per_second();
  result.checkpoint = trainer.checkpoint();
  return result;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["corpus_bleu"] = corpus_bleu;
  j["sentence_bleu"] = sentence_bleu;
  j["token_accuracy"] = token_accuracy;
  j["exact_match"] = exact_match;
  j["decode_sentences_per_second"] = decode_sentences_per_second;
  j["train_steps_per_second"] = train_steps_per_second;
  j["parameters"] = parameters;
  j["sentences"] = sentences;
  return j.dump(2);
}

double token_accuracy(const std::vector<std::vector<std::int32_t>>& hyps,
                      const std::vector<std::vector<std::int32_t>>& refs) {
  if (hyps.size() != refs.size()) throw InputError("token_accuracy: hypothesis and reference counts differ");
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const std::size_t n = std::min(hyps[i].size(), refs[i].size());
    for (std::size_t t = 0; t < n; ++t) correct += hyps[i][t] == refs[i][t];
    total += std::max(hyps[i].size(), refs[i].size());
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 1.0;
}

Evaluation evaluate(const Seq2Seq<float>& model, const std::vector<Example>& examples, const Vocab& tgt_vocab,
                    const DecodeOptions& decode_options, std::size_t batch_size) {
  if (examples.empty()) throw InputError("evaluate: no examples");
  if (batch_size == 0) throw ConfigError("evaluation batch size must be positive");
  std::vector<std::vector<std::int32_t>> hyps, refs;
  SpeedMeter speed;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch batch = make_batch(examples, idx);
    const auto t0 = Clock::now();
    auto out = decode(model, batch.src, batch.src_mask, decode_options);
    speed.add(seconds_since(t0), idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      hyps.push_back(std::move(out[r]));
      refs.push_back(examples[idx[r]].target);
    }
  }
  Evaluation ev;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    ev.hypotheses.push_back(tgt_vocab.decode(hyps[i]));
    ev.references.push_back(tgt_vocab.decode(refs[i]));
    exact += hyps[i] == refs[i];
  }
  const BleuResult b = bleu(ev.hypotheses, ev.references);
  ev.stats = b.stats;
  ev.report.corpus_bleu = b.corpus;
  ev.report.sentence_bleu = b.sentence;
  ev.report.token_accuracy = token_accuracy(hyps, refs);
  ev.report.exact_match = static_cast<double>(exact) / static_cast<double>(hyps.size());
  ev.report.decode_sentences_per_second = speed.rate();
  ev.report.parameters = model.params().total_elements();
  ev.report.sentences = hyps.size();
  return ev;
}

}  // namespace sctx
