#include <cstdio>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "sctx/errors.hpp"
#include "sctx/experiment.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> variant;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> beam;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "experiment config (INI)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--out", o.out, "output or run directory");
}

sctx::ExperimentConfig resolve(const Overrides& o) {
  sctx::ExperimentConfig c = o.config.empty() ? sctx::ExperimentConfig{} : sctx::load_config(o.config);
  if (o.seed) c.set_seed(*o.seed);
  if (o.out) c.out = *o.out;
  if (o.variant) c.model.variant = sctx::parse_variant(*o.variant);
  if (o.steps) c.train.steps = *o.steps;
  if (o.beam) {
    if (*o.beam == 0) throw sctx::ConfigError("--beam must be positive");
    c.decode.beam = *o.beam;
  }
  return c;
}

void print_report(const sctx::EvalReport& r) {
  std::cout << std::fixed << std::setprecision(4) << "bleu " << r.corpus_bleu << "\ntoken_accuracy "
            << r.token_accuracy << "\nexact_match " << r.exact_match << "\nsentences " << r.sentences
            << "\ndecode_sentences_per_second " << std::setprecision(1) << r.decode_sentences_per_second << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer with sentential context: training, evaluation, ablation and probing"};
  app.require_subcommand(1);
  app.set_version_flag("--version", sctx::version_string() + " (" + sctx::version_hash() + ")");

  Overrides train_o, eval_o, ablate_o, probe_o, gen_o;
  bool parallel = false;
  std::size_t grad_seeds = 5;
  double grad_tol = 1e-3, grad_step = 1e-3;

  auto* train = app.add_subcommand("train", "train one model into a run directory (resumes if it holds a checkpoint)");
  add_common(train, train_o);
  train->add_option("--variant", train_o.variant, "vanilla, shallow-mean, shallow-max, shallow-att, deep-rnn, deep-tam");
  train->add_option("--steps", train_o.steps, "training steps");

  auto* eval = app.add_subcommand("eval", "decode the test split of a run directory");
  eval->add_option("--out", eval_o.out, "run directory")->required();
  eval->add_option("--beam", eval_o.beam, "beam size (1 = greedy)");

  auto* ablate = app.add_subcommand("ablate", "train and evaluate the variant grid");
  add_common(ablate, ablate_o);
  ablate->add_option("--steps", ablate_o.steps, "training steps per row");
  ablate->add_option("--beam", ablate_o.beam, "beam size for evaluation");
  ablate->add_flag("--parallel", parallel, "run rows concurrently (SCTX_THREADS caps the count)");

  auto* probe = app.add_subcommand("probe", "probing grid for a run directory");
  probe->add_option("--out", probe_o.out, "run directory")->required();
  probe->add_option("--seed", probe_o.seed, "probe seed");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every variant");
  gradcheck->add_option("--seeds", grad_seeds, "seeds per variant")->check(CLI::PositiveNumber);
  gradcheck->add_option("--tol", grad_tol, "relative tolerance");
  gradcheck->add_option("--step", grad_step, "central-difference step");

  auto* gen = app.add_subcommand("gen-data", "write the configured corpus as parallel text files");
  add_common(gen, gen_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) {
      const sctx::ExperimentConfig c = resolve(train_o);
      const sctx::RunSummary s = sctx::run_train(c, c.out);
      if (s.resumed) std::cout << "resumed from step " << s.resumed_from << "\n";
      std::cout << "steps " << s.steps << (s.stopped_early ? " (early stop)" : "") << "\n";
      if (s.valid_accuracy >= 0) std::cout << "valid_accuracy " << s.valid_accuracy << "\n";
      std::cout << "run " << c.out << "\n";
    } else if (*eval) {
      std::optional<sctx::DecodeOptions> opts;
      if (eval_o.beam) {
        if (*eval_o.beam == 0) throw sctx::ConfigError("--beam must be positive");
        opts = sctx::load_config(*eval_o.out + "/config.ini").decode;
        opts->beam = *eval_o.beam;
      }
      print_report(sctx::run_eval(*eval_o.out, opts).report);
    } else if (*ablate) {
      sctx::ExperimentConfig c = resolve(ablate_o);
      if (parallel) c.parallel = true;
      std::cout << sctx::run_ablation(c, c.out).to_text();
    } else if (*probe) {
      std::optional<sctx::ProbingSuiteOptions> opts;
      if (probe_o.seed) {
        opts = sctx::load_config(*probe_o.out + "/config.ini").probe;
        opts->probe.seed = *probe_o.seed;
      }
      std::cout << sctx::run_probe(*probe_o.out, opts).to_csv();
    } else if (*gradcheck) {
      sctx::GradCheckOptions opts;
      opts.tolerance = grad_tol;
      opts.step = grad_step;
      bool ok = true;
      for (const auto& e : sctx::gradient_suite(grad_seeds, opts)) {
        ok = ok && e.report.passed;
        std::cout << std::left << std::setw(13) << sctx::to_string(e.variant) << " seed " << e.seed << "  "
                  << (e.report.passed ? "pass" : "FAIL") << "  max_rel_error " << std::scientific
                  << std::setprecision(2) << e.report.max_rel_error << std::defaultfloat << "  kinks "
                  << e.report.kink_crossings << " (refined " << e.report.refined << ", skipped "
                  << e.report.unresolved << ")  " << std::fixed << std::setprecision(1) << e.seconds << "s\n";
        if (!e.report.passed) std::cout << sctx::describe(e.report);
      }
      return ok ? 0 : 2;
    } else if (*gen) {
      const sctx::ExperimentConfig c = resolve(gen_o);
      sctx::gen_data(c, c.out);
      std::cout << "wrote " << c.out << "/{train,valid,test}.{src,tgt}\n";
    }
  } catch (const sctx::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
