// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Arguments select criteria (default: all);
// SCTX_ACCEPTANCE_DIR overrides the scratch directory.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "sctx/bleu.hpp"
#include "sctx/decode.hpp"
#include "sctx/experiment.hpp"
#include "sctx/ops.hpp"

using namespace sctx;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGradTolerance = 1e-3;
constexpr double kGradStep = 1e-3;
constexpr double kGradBudgetSeconds = 300;
constexpr double kEquivalenceTol = 1e-6;
constexpr double kIncrementalTol = 1e-5;
constexpr double kNormTol = 1e-6;
constexpr double kCopyAccuracy = 0.99;
constexpr std::size_t kCopySteps = 3000;
constexpr double kGridBudgetSeconds = 3600;
constexpr double kBleuTol = 1e-4;
constexpr double kBootstrapTol = 0.05;
constexpr double kSeparable = 0.99;
constexpr double kChanceBand = 0.1;

struct Verdict {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      std::printf("    failed: %s\n", what.c_str());
    }
  }
};

template <typename... Args>
std::string format(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void note(const std::string& s) { std::printf("    %s\n", s.c_str()); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path work_dir() {
  const char* env = std::getenv("SCTX_ACCEPTANCE_DIR");
  return fs::absolute(env ? env : "acceptance-work");
}

fs::path fresh(const fs::path& p) {
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename T>
void jitter(Seq2Seq<T>& m, std::uint64_t seed, double scale = 0.1) {
  Rng rng(Rng::derive(seed, 0xacce));
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    for (auto& v : m.params()[i].value.storage()) v += static_cast<T>(rng.uniform(-scale, scale));
  }
}

// Random ids in [4, vocab) with rows padded on the right; row 0 stays full.
void random_source(Rng& rng, std::size_t B, std::size_t T, std::size_t vocab, IdTensor& src, BoolTensor& mask) {
  src = IdTensor({B, T});
  mask = BoolTensor({B, T}, 1);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = b == 0 ? T : 1 + rng.below(T);
    for (std::size_t t = 0; t < T; ++t) {
      src(b, t) = t < len ? static_cast<std::int32_t>(4 + rng.below(vocab - 4)) : Vocab::pad;
      mask(b, t) = t < len;
    }
  }
}

IdTensor random_target(Rng& rng, std::size_t B, std::size_t T, std::size_t vocab) {
  IdTensor t({B, T});
  for (std::size_t b = 0; b < B; ++b) {
    t(b, 0) = Vocab::bos;
    for (std::size_t i = 1; i < T; ++i) t(b, i) = static_cast<std::int32_t>(4 + rng.below(vocab - 4));
  }
  return t;
}

// y = x W + b for one row.
std::vector<double> affine(const std::vector<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  std::vector<double> y(w.dim(1));
  for (std::size_t j = 0; j < w.dim(1); ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < w.dim(0); ++i) s += x[i] * w(i, j);
    y[j] = s;
  }
  return y;
}

// ---------------------------------------------------------------------------

Verdict gradient_suite_criterion() {
  Verdict v;
  GradCheckOptions o;
  o.step = kGradStep;
  o.tolerance = kGradTolerance;
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = gradient_suite(5, o);
  const double secs = seconds_since(t0);
  std::map<Variant, double> worst;
  std::size_t passed = 0;
  for (const auto& e : entries) {
    worst[e.variant] = std::max(worst[e.variant], e.report.max_rel_error);
    passed += e.report.passed;
    if (!e.report.passed) note(to_string(e.variant) + format(" seed %llu: ", (unsigned long long)e.seed) + describe(e.report));
  }
  for (const auto& [variant, err] : worst) note(format("%-13s max relative error %.2e", to_string(variant).c_str(), err));
  v.require(entries.size() == 30, "expected 6 variants x 5 seeds");
  v.require(passed == entries.size(), format("%zu of %zu checks failed", entries.size() - passed, entries.size()));
  v.require(secs < kGradBudgetSeconds, format("took %.0f s", secs));
  v.detail = format("%zu/%zu checks, %.0f s", passed, entries.size(), secs);
  return v;
}

Verdict equivalence_criterion() {
  Verdict v;

  // (a) zero query: uniform scores, attentive pooling becomes o(v(mean)).
  double worst_a = 0;
  for (Variant variant : {Variant::shallow_att, Variant::deep_rnn, Variant::deep_tam}) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      ModelConfig c = model_preset("grad-toy");
      c.variant = variant;
      c.n_enc_layers = 3;
      c.seed = seed;
      Seq2Seq<double> m(c);
      jitter(m, seed);
      m.params().get("ctx.att.q.w").value.fill(0);
      m.params().get("ctx.att.q.b").value.fill(0);
      Rng rng(seed);
      IdTensor src;
      BoolTensor mask;
      random_source(rng, 3, 7, c.src_vocab, src, mask);
      Tape<double> tape(false);
      const auto enc = m.encode(tape, src, mask);
      const std::size_t first = variant == Variant::shallow_att ? c.n_enc_layers : 1;
      for (std::size_t l = first; l <= c.n_enc_layers; ++l) {
        const auto g = m.context().global(tape, enc, l).value();
        const auto& h = enc.layers[l].value();
        const std::string key = "ctx.att." + std::to_string(l);
        for (std::size_t b = 0; b < 3; ++b) {
          std::vector<double> mean(c.d_model, 0.0);
          double n = 0;
          for (std::size_t t = 0; t < 7; ++t) {
            if (!mask(b, t)) continue;
            n += 1;
            for (std::size_t k = 0; k < c.d_model; ++k) mean[k] += h(b, t, k);
          }
          for (auto& x : mean) x /= n;
          const auto proj = affine(affine(mean, m.params().get(key + ".v.w").value, m.params().get(key + ".v.b").value),
                                   m.params().get("ctx.att.o.w").value, m.params().get("ctx.att.o.b").value);
          for (std::size_t k = 0; k < c.d_model; ++k) worst_a = std::max(worst_a, std::abs(g(b, k) - proj[k]));
        }
      }
    }
  }
  note(format("(a) attentive pooling vs projected mean: max diff %.2e", worst_a));
  v.require(worst_a <= kEquivalenceTol, "(a) uniform-score pooling");

  // (b) zero query in transparent attention: beta uniform, g the mean of G.
  double worst_b = 0, worst_beta = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ModelConfig c = model_preset("grad-toy");
    c.variant = Variant::deep_tam;
    c.n_enc_layers = 3;
    c.seed = seed;
    Seq2Seq<double> m(c);
    jitter(m, seed);
    for (std::size_t l = 1; l <= c.n_dec_layers; ++l) {
      m.params().get("ctx.tam." + std::to_string(l) + ".q.w").value.fill(0);
      m.params().get("ctx.tam." + std::to_string(l) + ".q.b").value.fill(0);
    }
    Rng rng(seed + 100);
    IdTensor src;
    BoolTensor mask;
    random_source(rng, 3, 6, c.src_vocab, src, mask);
    Tape<double> tape(false);
    const auto enc = m.encode(tape, src, mask);
    const auto stacked = m.context().stack(m.context().summarize_layers(tape, enc));
    Tensor<double> prev({3, c.d_model});
    for (auto& x : prev.storage()) x = rng.uniform(-2, 2);
    for (std::size_t l = 1; l <= c.n_dec_layers; ++l) {
      Tensor<double> beta;
      const auto g = m.context().deep_tam(tape, stacked, tape.constant(prev), l, &beta).value();
      for (double b : beta.storage()) worst_beta = std::max(worst_beta, std::abs(b - 1.0 / 3));
      const auto& G = stacked.value();
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t k = 0; k < c.d_model; ++k) {
          const double mean = (G(b, 0, k) + G(b, 1, k) + G(b, 2, k)) / 3;
          worst_b = std::max(worst_b, std::abs(g(b, k) - mean));
        }
    }
    std::vector<std::vector<Tensor<double>>> trace;
    m.decode_teacher_forced(tape, enc, random_target(rng, 3, 5, c.tgt_vocab), {}, &trace);
    for (const auto& layer : trace)
      for (const auto& beta : layer)
        for (double b : beta.storage()) worst_beta = std::max(worst_beta, std::abs(b - 1.0 / 3));
  }
  note(format("(b) uniform transparent attention vs mean of G: max diff %.2e, beta off 1/3 by %.2e", worst_b,
              worst_beta));
  v.require(worst_b <= kEquivalenceTol && worst_beta <= kEquivalenceTol, "(b) uniform transparent attention");

  // (c) beam 1 against greedy on perturbed base-toy models.
  std::size_t sentences = 0, mismatches = 0;
  for (Variant variant : all_variants()) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      ModelConfig c = model_preset("base-toy");
      c.variant = variant;
      c.seed = seed;
      Seq2Seq<float> m(c);
      jitter(m, seed);
      Rng rng(seed + 200);
      IdTensor src;
      BoolTensor mask;
      random_source(rng, 8, 10, c.src_vocab, src, mask);
      ModelScorer a(m, src, mask), b(m, src, mask);
      const auto greedy = greedy_search(a, 8, 20, Vocab::bos, Vocab::eos);
      const auto beam = beam_search(b, 8, 1, 0.6, 20, Vocab::bos, Vocab::eos);
      for (std::size_t r = 0; r < 8; ++r) {
        ++sentences;
        mismatches += greedy[r] != beam[r];
      }
    }
  }
  note(format("(c) beam 1 vs greedy: %zu of %zu sentences differ", mismatches, sentences));
  v.require(mismatches == 0, "(c) beam 1 equals greedy");

  // (d) incremental decoding against the teacher-forced pass, both precisions.
  auto incremental = [](auto& m, std::uint64_t seed) {
    const auto& c = m.config();
    Rng rng(seed + 300);
    IdTensor src;
    BoolTensor mask;
    random_source(rng, 3, 8, c.src_vocab, src, mask);
    const IdTensor tgt = random_target(rng, 3, 10, c.tgt_vocab);
    using T = typename std::decay_t<decltype(m.params()[0].value)>::value_type;
    Tape<T> tape(false);
    const auto enc = m.encode(tape, src, mask);
    const auto full = m.decode_teacher_forced(tape, enc, tgt).value();
    auto state = m.start_decoding(tape, enc);
    double worst = 0;
    for (std::size_t i = 0; i < 10; ++i) {
      const auto step = m.decode_step(tape, state, {tgt(0, i), tgt(1, i), tgt(2, i)}).value();
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t k = 0; k < c.tgt_vocab; ++k)
          worst = std::max(worst, std::abs(double(step(b, k)) - double(full(b, i, k))));
    }
    return worst;
  };
  for (Variant variant : all_variants()) {
    double worst_double = 0, worst_float = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      ModelConfig c = model_preset("grad-toy");
      c.variant = variant;
      c.seed = seed;
      Seq2Seq<double> md(c);
      jitter(md, seed);
      worst_double = std::max(worst_double, incremental(md, seed));
      ModelConfig cf = model_preset("base-toy");
      cf.variant = variant;
      cf.seed = seed;
      Seq2Seq<float> mf(cf);
      jitter(mf, seed);
      worst_float = std::max(worst_float, incremental(mf, seed));
    }
    note(format("(d) %-13s incremental vs teacher-forced: %.2e (64-bit), %.2e (32-bit)", to_string(variant).c_str(),
                worst_double, worst_float));
    v.require(worst_double <= kIncrementalTol && worst_float <= kIncrementalTol,
              "(d) incremental decoding, " + to_string(variant));
  }
  v.detail = v.pass ? "(a)-(d) hold" : "see above";
  return v;
}

Verdict normalization_criterion() {
  Verdict v;
  Rng rng(17);
  double worst_att = 0, worst_beta = 0;
  std::size_t vectors = 0;

  std::vector<std::unique_ptr<Seq2Seq<double>>> tam;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    ModelConfig c = model_preset("grad-toy");
    c.variant = Variant::deep_tam;
    c.n_enc_layers = 1 + seed % 3;
    c.seed = seed;
    tam.push_back(std::make_unique<Seq2Seq<double>>(c));
    jitter(*tam.back(), seed, 1.0);  // sharper distributions than at init
  }

  auto check_attention = [&](auto tag, std::size_t iter) {
    using T = decltype(tag);
    const std::size_t B = 1 + rng.below(3), heads = std::size_t{1} << rng.below(3), dh = 1 + rng.below(4);
    const std::size_t Tk = 1 + rng.below(8), Tq = 1 + rng.below(Tk);
    const double scale = rng.uniform(0.1, 6);
    auto draw = [&](std::size_t len) {
      Tensor<T> x({B, len, heads * dh});
      for (auto& e : x.storage()) e = static_cast<T>(rng.uniform(-scale, scale));
      return x;
    };
    BoolTensor mask({B, Tk}, 1);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 1; j < Tk; ++j) mask(b, j) = rng.below(4) != 0;
    AttentionSpec<T> spec;
    spec.heads = heads;
    spec.key_mask = &mask;
    spec.causal = iter % 2 == 0;
    Tape<T> tape(false);
    Tensor<T> w;
    attention(tape.constant(draw(Tq)), tape.constant(draw(Tk)), tape.constant(draw(Tk)), spec, &w);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < Tq; ++i) {
          double s = 0;
          for (std::size_t j = 0; j < Tk; ++j) s += double(w[((b * heads + h) * Tq + i) * Tk + j]);
          worst_att = std::max(worst_att, std::abs(s - 1));
          ++vectors;
        }
  };

  for (std::size_t iter = 0; iter < 1000; ++iter) {
    if (iter % 2) check_attention(float{}, iter);
    else check_attention(double{}, iter);

    auto& m = *tam[iter % tam.size()];
    IdTensor src;
    BoolTensor mask;
    random_source(rng, 2, 1 + rng.below(8), m.config().src_vocab, src, mask);
    Tape<double> tape(false);
    const auto enc = m.encode(tape, src, mask);
    std::vector<std::vector<Tensor<double>>> trace;
    m.decode_teacher_forced(tape, enc, random_target(rng, 2, 1 + rng.below(6), m.config().tgt_vocab), {}, &trace);
    for (const auto& layer : trace)
      for (const auto& beta : layer)
        for (std::size_t b = 0; b < beta.dim(0); ++b) {
          double s = 0;
          for (std::size_t k = 0; k < beta.dim(1); ++k) s += beta(b, k);
          worst_beta = std::max(worst_beta, std::abs(s - 1));
          ++vectors;
        }
  }
  note(format("attention rows off by %.2e, beta rows off by %.2e", worst_att, worst_beta));
  v.require(worst_att <= kNormTol, "attention weights");
  v.require(worst_beta <= kNormTol, "transparent attention weights");
  v.detail = format("%zu weight vectors from 1000 random forwards", vectors);
  return v;
}

// Closed form written out per weight matrix.
std::size_t closed_form(const ModelConfig& c) {
  const std::size_t d = c.d_model, fe = c.d_ff_enc, fd = c.d_ff_dec;
  const std::size_t layer_norm = d + d;
  const std::size_t attention = (d * d + d) + d * d + (d * d + d) + (d * d + d);  // q, k (no bias), v, o
  const std::size_t enc_layer = attention + layer_norm + (d * fe + fe) + (fe * d + d) + layer_norm;
  const std::size_t dec_layer = attention + layer_norm + attention + layer_norm + (d * fd + fd) + (fd * d + d) + layer_norm;
  std::size_t n = c.src_vocab * d + c.tgt_vocab * d + c.n_enc_layers * enc_layer + c.n_dec_layers * dec_layer;
  if (c.variant == Variant::vanilla) return n;
  n += c.n_dec_layers * ((2 * d * fd + fd) + (fd * d + d) + layer_norm);
  const bool deep = c.variant == Variant::deep_rnn || c.variant == Variant::deep_tam;
  if (c.global() == GlobalKind::att) {
    const std::size_t pooled = deep ? c.n_enc_layers : 1;
    n += (d * d + d) + (d * d + d) + pooled * (d * d + (d * d + d));  // query, output; key, value per layer
  }
  if (c.variant == Variant::deep_rnn) n += 2 * (d * 3 * d + 3 * d) + (d * d + d);
  if (c.variant == Variant::deep_tam) n += c.n_dec_layers * ((d * d + d) + d * d + d);
  return n;
}

Verdict parameter_criterion() {
  Verdict v;
  std::map<std::string, long long> delta;
  const std::size_t base_total = [] {
    ModelConfig c = model_preset("base-toy");
    return closed_form(c);
  }();
  for (const char* row : {"base", "medium", "shallow-mean", "shallow-max", "shallow-att", "deep-rnn", "deep-tam"}) {
    const auto [preset, variant] = ablation_row_spec(row);
    ModelConfig c = model_preset(preset);
    c.variant = variant;
    const std::size_t expect = closed_form(c);
    const std::size_t formula = count_parameters(c).total;
    Seq2Seq<float> m(c);
    const std::size_t registered = count_registered(m.params()).total;
    delta[row] = static_cast<long long>(expect) - static_cast<long long>(base_total);
    note(format("%-13s %8zu parameters, delta %+7lld", row, expect, delta[row]));
    v.require(formula == expect && registered == expect,
              format("%s: closed form %zu, count_parameters %zu, registry %zu", row, expect, formula, registered));
  }
  v.require(delta["shallow-mean"] == delta["shallow-max"], "mean and max should cost the same");
  v.require(delta["shallow-max"] < delta["shallow-att"], "attentive pooling should cost more than mean/max");
  v.require(delta["shallow-att"] < delta["deep-tam"], "deep-tam should cost more than shallow-att");
  v.require(delta["deep-tam"] < delta["deep-rnn"], "deep-rnn should cost more than deep-tam");
  v.detail = "7 rows, mean == max < att < tam < rnn";
  return v;
}

// Last plain negative log-likelihood logged by a run.
double last_nll(const fs::path& run) {
  std::ifstream in(run / "metrics.jsonl");
  std::string line;
  double nll = -1;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.contains("nll")) nll = j["nll"].get<double>();
  }
  return nll;
}

// Dropout-free, unsmoothed NLL per target token on the test split of a run.
double held_out_nll(const fs::path& run) {
  const auto loaded = load_run(run.string());
  double sum = 0, tokens = 0;
  for (const auto& b : make_batches(loaded.data.test, 64, loaded.config.train.max_len, 1)) {
    const BoolTensor mask = b.decoder_target_mask();
    double n = 0;
    for (auto m : mask.storage()) n += m != 0;
    Tape<float> tape(false);
    const auto loss = loaded.model->loss(tape, b.src, b.src_mask, b.decoder_input(), b.decoder_target(), mask, 0.0f);
    sum += double(loss.value()[0]) * n;
    tokens += n;
  }
  return sum / tokens;
}

Verdict copy_criterion(const fs::path& work) {
  Verdict v;
  ExperimentConfig c;  // copy task, base-toy, 5000 training pairs, alphabet 20, length <= 12
  c.train.steps = kCopySteps;
  c.ablation_rows = {"base", "shallow-mean", "shallow-max", "shallow-att", "deep-rnn", "deep-tam"};
  c.parallel = true;
  const auto t0 = std::chrono::steady_clock::now();
  const auto table = run_ablation(c, fresh(work / "copy-grid").string());
  const double secs = seconds_since(t0);
  double lowest = 1;
  for (const auto& r : table.rows) {
    lowest = std::min(lowest, r.token_accuracy);
    const fs::path run = work / "copy-grid" / r.name;
    note(format("%-13s accuracy %.4f after %4zu steps, %.1f steps/s, nll %.3f last batch, %.4f held out",
                r.name.c_str(), r.token_accuracy, r.steps, r.train_steps_per_second, last_nll(run), held_out_nll(run)));
    v.require(r.token_accuracy >= kCopyAccuracy, r.name + " below target accuracy");
    v.require(r.steps <= kCopySteps, r.name + " over the step budget");
  }
  v.require(table.rows.size() == 6, "expected vanilla and five context variants");
  v.require(secs <= kGridBudgetSeconds, format("grid took %.0f s", secs));
  v.detail = format("lowest accuracy %.4f, grid %.0f s on %u thread(s)", lowest, secs,
                    std::max(1u, std::thread::hardware_concurrency()));
  return v;
}

Verdict comparative_criterion(const fs::path& work) {
  Verdict v;
  ExperimentConfig c;
  c.task = TaskKind::lexicon_translate;
  c.parallel = true;
  const auto table = run_ablation(c, fresh(work / "lexicon-grid").string());
  std::printf("%s", table.to_text().c_str());
  std::set<std::string> names;
  for (const auto& r : table.rows) {
    names.insert(r.name);
    v.require(std::isfinite(r.bleu) && r.bleu >= 0 && r.bleu <= 100, r.name + ": BLEU out of range");
    v.require(r.name == "base" || r.p_vs_base.has_value(), r.name + ": no p-value against vanilla");
    v.require(r.name == "medium" || r.p_vs_medium.has_value(), r.name + ": no p-value against medium");
    v.require(r.train_steps_per_second > 0 && r.decode_sentences_per_second > 0, r.name + ": no speed");
  }
  v.require(names.size() == 7, "expected 7 rows");
  const auto csv = read_lines((work / "lexicon-grid" / "results.csv").string());
  v.require(csv.size() == 8, "results.csv should hold a header and 7 rows");
  v.require(fs::exists(work / "lexicon-grid" / "results.txt"), "results.txt missing");

  // Rerun the rows that a p-value of deep-tam depends on and compare.
  ExperimentConfig again = c;
  again.ablation_rows = {"base", "medium", "deep-tam"};
  const auto rerun = run_ablation(again, fresh(work / "lexicon-rerun").string());
  for (const auto& r : rerun.rows) {
    const auto it = std::find_if(table.rows.begin(), table.rows.end(), [&](const auto& x) { return x.name == r.name; });
    if (it == table.rows.end()) continue;
    const bool same = it->bleu == r.bleu && it->token_accuracy == r.token_accuracy && it->steps == r.steps &&
                      it->parameters == r.parameters && it->p_vs_base == r.p_vs_base &&
                      it->p_vs_medium == r.p_vs_medium;
    v.require(same, r.name + ": rerun differs");
    const auto name = "ckpt-" + std::to_string(r.steps) + ".bin";
    v.require(slurp(work / "lexicon-grid" / r.name / name) == slurp(work / "lexicon-rerun" / r.name / name),
              r.name + ": final checkpoint differs on rerun");
    v.require(slurp(work / "lexicon-grid" / r.name / "hypotheses.txt") ==
                  slurp(work / "lexicon-rerun" / r.name / "hypotheses.txt"),
              r.name + ": hypotheses differ on rerun");
  }
  v.detail = "7 rows with BLEU and p-values; base, medium and deep-tam reproduce on rerun";
  return v;
}

// Corpus BLEU from summed counts, written out independently of the library.
double oracle_bleu(const std::array<double, 4>& match, const std::array<double, 4>& total, double c, double r) {
  double log_p = 0;
  for (int n = 0; n < 4; ++n) {
    if (match[n] == 0) return 0;
    log_p += std::log(match[n] / total[n]) / 4;
  }
  const double bp = c < r ? std::exp(1 - r / c) : 1.0;
  return 100 * bp * std::exp(log_p);
}

Verdict bleu_criterion() {
  Verdict v;
  auto split = [](const std::string& s) {
    Sentence out;
    std::istringstream in(s);
    for (std::string w; in >> w;) out.push_back(w);
    return out;
  };
  struct Case {
    const char* hyp;
    const char* ref;
    double expect;
  };
  // Sentence level: add-one on orders 2..4.
  const Case cases[] = {
      {"the cat sat on the mat", "the cat sat on the mat", 100.0},
      {"the the the the", "the cat", 100 * std::pow((1.0 / 4) * (1.0 / 4) * (1.0 / 3) * (1.0 / 2), 0.25)},
      {"the cat sat", "the cat sat down", 100 * std::exp(1 - 4.0 / 3)},
  };
  double worst = 0;
  for (const auto& k : cases) {
    const double got = sentence_bleu(split(k.hyp), split(k.ref));
    worst = std::max(worst, std::abs(got - k.expect));
    note(format("\"%s\" / \"%s\": %.6f, by hand %.6f", k.hyp, k.ref, got, k.expect));
  }
  const auto clipped = bleu_stats(split("the the the the"), split("the cat"));
  v.require(clipped.matches[0] == 1 && clipped.totals[0] == 4, "unigram precision should clip to 1/4");
  v.require(worst <= kBleuTol, format("hand vectors off by %.2e", worst));

  // Half-better pair at n = 6, per-sentence scores and corpus statistics.
  const std::vector<double> a = {0.2, 0.5, 0.1, 0.9, 0.4, 0.3};
  const std::vector<double> b = {0.33, 0.429, 0.29, 0.783, 0.65, 0.1};
  const char* refs[] = {"a b c d e f", "b c d e f g", "c d e f g h", "d e f g h i", "e f g h i j", "f g h i j k"};
  const char* hyp_a[] = {"a b c x e f", "b c d e f g", "c x e f g h", "d e f g h i", "e f x h i j", "f g h i j"};
  const char* hyp_b[] = {"a b c d e f", "b c x e f g", "c d e f g h", "d e f x h i", "e f g h i j", "f g x i j"};
  std::vector<BleuStats> sa, sb;
  for (int i = 0; i < 6; ++i) {
    sa.push_back(bleu_stats(split(hyp_a[i]), split(refs[i])));
    sb.push_back(bleu_stats(split(hyp_b[i]), split(refs[i])));
  }
  auto corpus = [](const std::vector<BleuStats>& s, const std::vector<std::size_t>& idx) {
    std::array<double, 4> m{}, t{};
    double c = 0, r = 0;
    for (auto i : idx) {
      for (int n = 0; n < 4; ++n) {
        m[n] += s[i].matches[n];
        t[n] += s[i].totals[n];
      }
      c += s[i].hyp_len;
      r += s[i].ref_len;
    }
    return oracle_bleu(m, t, c, r);
  };
  std::size_t not_better_scores = 0, not_better_bleu = 0, total = 0;
  std::vector<std::size_t> idx(6, 0);
  for (;;) {
    double ma = 0, mb = 0;
    for (auto i : idx) {
      ma += a[i];
      mb += b[i];
    }
    not_better_scores += mb <= ma;
    not_better_bleu += corpus(sb, idx) <= corpus(sa, idx);
    ++total;
    std::size_t k = 0;
    while (k < 6 && ++idx[k] == 6) idx[k++] = 0;
    if (k == 6) break;
  }
  const double exact_scores = double(not_better_scores) / total, exact_bleu = double(not_better_bleu) / total;
  const double p_scores = bootstrap_test(a, b), p_bleu = bootstrap_test(sa, sb);
  note(format("bootstrap on scores %.4f, exhaustive %.4f", p_scores, exact_scores));
  note(format("bootstrap on BLEU statistics %.4f, exhaustive %.4f", p_bleu, exact_bleu));
  v.require(std::abs(p_scores - exact_scores) <= kBootstrapTol, "bootstrap on scores");
  v.require(std::abs(p_bleu - exact_bleu) <= kBootstrapTol, "bootstrap on BLEU statistics");
  v.detail = format("hand vectors within %.1e, bootstrap within %.3f of enumeration", worst,
                    std::max(std::abs(p_scores - exact_scores), std::abs(p_bleu - exact_bleu)));
  return v;
}

Verdict probing_criterion(const fs::path& work) {
  Verdict v;
  fs::path run = work / "copy-grid" / "deep-tam";
  if (!fs::exists(run / "latest")) {
    ExperimentConfig c;
    c.model.variant = Variant::deep_tam;
    run = fresh(work / "probe-run") / "run";
    run_train(c, run.string());
  }
  const auto grid = run_probe(run.string());
  const auto csv = read_lines((run / "probe.csv").string());
  v.require(grid.extractors.size() == 3 && grid.tasks.size() == 3, "grid should be 3 x 3");
  v.require(csv.size() == 4, "probe.csv should hold a header and 3 rows");
  for (std::size_t e = 0; e < grid.extractors.size(); ++e) {
    std::string row = format("%-11s", to_string(grid.extractors[e]).c_str());
    for (std::size_t t = 0; t < grid.tasks.size(); ++t) {
      const auto& r = grid.cells[e][t];
      row += format("  %s %.3f (majority %.3f)", to_string(grid.tasks[t]).c_str(), r.accuracy, r.majority_baseline);
      v.require(std::isfinite(r.accuracy) && r.accuracy >= 0 && r.accuracy <= 1, "cell accuracy out of range");
    }
    note(row);
    if (grid.extractors[e] != Extractor::pooled_top) {
      for (std::size_t t = 0; t < grid.tasks.size(); ++t) {
        if (grid.tasks[t] != ProbeTask::wc) continue;
        const auto& r = grid.cells[e][t];
        note(format("  wc from %s: %+.3f over majority", to_string(grid.extractors[e]).c_str(),
                    r.accuracy - r.majority_baseline));
      }
    }
  }

  Rng rng(23);
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (int i = 0; i < 1000; ++i) {
    const int label = i % 4;
    std::vector<double> f(16);
    for (auto& e : f) e = rng.uniform(-0.2, 0.2);
    f[label] += 1.0;
    x.push_back(std::move(f));
    y.push_back(label);
  }
  const auto separable = probe(x, y);
  x.clear();
  y.clear();
  for (int i = 0; i < 2000; ++i) {
    std::vector<double> f(16);
    for (auto& e : f) e = rng.uniform(-1, 1);
    x.push_back(std::move(f));
    y.push_back(i % 2);
  }
  const auto noise = probe(x, y);
  note(format("separable control %.3f, random control %.3f", separable.accuracy, noise.accuracy));
  v.require(separable.accuracy >= kSeparable, "separable control");
  v.require(std::abs(noise.accuracy - 0.5) <= kChanceBand, "random control");
  v.detail = format("3 x 3 grid, separable %.3f, random %.3f", separable.accuracy, noise.accuracy);
  return v;
}

Verdict determinism_criterion(const fs::path& work) {
  Verdict v;
  std::size_t compared = 0;
  for (Variant variant : all_variants()) {
    ExperimentConfig c;
    c.model.variant = variant;
    c.train_size = 400;
    c.valid_size = 40;
    c.test_size = 40;
    c.train.steps = 120;
    c.train.log_every = 10;
    c.eval_every = 60;
    c.checkpoint_every = 40;
    c.early_stop = 0;
    const fs::path root = fresh(work / "determinism" / to_string(variant));
    run_train(c, (root / "a").string());
    run_train(c, (root / "b").string());
    const auto ea = run_eval((root / "a").string()), eb = run_eval((root / "b").string());
    v.require(ea.report.corpus_bleu == eb.report.corpus_bleu && ea.report.token_accuracy == eb.report.token_accuracy,
              to_string(variant) + ": evaluation differs");
    for (const auto& entry : fs::directory_iterator(root / "a")) {
      const auto name = entry.path().filename().string();
      if (name == "timing.jsonl" || name == "report.json") continue;  // wall-clock fields
      ++compared;
      v.require(slurp(entry.path()) == slurp(root / "b" / name), to_string(variant) + ": " + name + " differs");
    }
  }
  v.detail = format("%zu files byte-identical across 6 variant pairs", compared);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  auto wanted = [&](int n) { return selected.empty() || selected.count(n); };
  const fs::path work = work_dir();
  fs::create_directories(work);

  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
      {"gradient suite", gradient_suite_criterion},
      {"equivalence oracles", equivalence_criterion},
      {"normalization", normalization_criterion},
      {"parameter accounting", parameter_criterion},
      {"copy-task convergence", [&] { return copy_criterion(work); }},
      {"comparative harness", [&] { return comparative_criterion(work); }},
      {"BLEU and bootstrap oracles", bleu_criterion},
      {"probing harness", [&] { return probing_criterion(work); }},
      {"determinism", [&] { return determinism_criterion(work); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!wanted(n)) continue;
    std::printf("criterion %d, %s\n", n, criteria[i].first);
    std::fflush(stdout);
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("threw: ") + e.what();
    }
    failed += !v.pass;
    std::printf("criterion %d: %s  %s [%.0f s]\n", n, v.pass ? "PASS" : "FAIL", v.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
