#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sctx/bleu.hpp"
#include "sctx/errors.hpp"
#include "sctx/experiment.hpp"

namespace py = pybind11;

namespace {

py::dict summary_dict(const sctx::RunSummary& s) {
  py::dict d;
  d["steps"] = s.steps;
  d["resumed"] = s.resumed;
  d["resumed_from"] = s.resumed_from;
  d["stopped_early"] = s.stopped_early;
  d["steps_per_second"] = s.steps_per_second;
  d["valid_accuracy"] = s.valid_accuracy;
  return d;
}

py::dict report_dict(const sctx::EvalReport& r) {
  py::dict d;
  d["corpus_bleu"] = r.corpus_bleu;
  d["sentence_bleu"] = r.sentence_bleu;
  d["token_accuracy"] = r.token_accuracy;
  d["exact_match"] = r.exact_match;
  d["decode_sentences_per_second"] = r.decode_sentences_per_second;
  d["parameters"] = r.parameters;
  d["sentences"] = r.sentences;
  return d;
}

sctx::ExperimentConfig config_from(const std::string& text) { return sctx::parse_config(text); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Transformer seq2seq with sentential context";

  auto base = py::register_exception<sctx::Error>(m, "Error");
  py::register_exception<sctx::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<sctx::InputError>(m, "InputError", base.ptr());

  m.def("version", &sctx::version_string);
  m.def("variants", [] {
    std::vector<std::string> out;
    for (auto v : sctx::all_variants()) out.push_back(sctx::to_string(v));
    return out;
  });

  m.def(
      "count_parameters",
      [](const std::string& preset, const std::string& variant, std::size_t src_vocab, std::size_t tgt_vocab) {
        sctx::ModelConfig c = sctx::model_preset(preset);
        c.variant = sctx::parse_variant(variant);
        if (src_vocab) c.src_vocab = src_vocab;
        if (tgt_vocab) c.tgt_vocab = tgt_vocab;
        const auto pc = sctx::count_parameters(c);
        py::dict d;
        for (const auto& [k, n] : pc.components) d[py::str(k)] = n;
        d["total"] = pc.total;
        d["delta"] = sctx::parameter_delta(c);
        return d;
      },
      py::arg("preset") = "base-toy", py::arg("variant") = "vanilla", py::arg("src_vocab") = 0,
      py::arg("tgt_vocab") = 0);

  m.def(
      "gen_task",
      [](const std::string& kind, std::size_t size, std::uint64_t seed, std::size_t alphabet, std::size_t min_len,
         std::size_t max_len) {
        sctx::TaskOptions o;
        o.alphabet = alphabet;
        o.min_len = min_len;
        o.max_len = max_len;
        const auto c = sctx::gen_task(sctx::parse_task(kind), size, seed, o);
        return std::make_pair(c.source, c.target);
      },
      py::arg("kind"), py::arg("size"), py::arg("seed") = 1, py::arg("alphabet") = 20, py::arg("min_len") = 1,
      py::arg("max_len") = 12);
  m.def("lexicon_forward", [](const std::string& s) { return sctx::lexicon_forward(s); });
  m.def("lexicon_inverse", [](const std::string& s) { return sctx::lexicon_inverse(s); });

  m.def("sentence_bleu", &sctx::sentence_bleu, py::arg("hypothesis"), py::arg("reference"));
  m.def(
      "bleu",
      [](const std::vector<sctx::Sentence>& hyps, const std::vector<sctx::Sentence>& refs) {
        const auto r = sctx::bleu(hyps, refs);
        return std::make_pair(r.corpus, r.sentence);
      },
      py::arg("hypotheses"), py::arg("references"));
  m.def(
      "bootstrap_test",
      [](const std::vector<double>& a, const std::vector<double>& b, std::size_t resamples, std::uint64_t seed) {
        return sctx::bootstrap_test(a, b, resamples, seed);
      },
      py::arg("a"), py::arg("b"), py::arg("resamples") = 1000, py::arg("seed") = 1);

  m.def(
      "train",
      [](const std::string& config, const std::string& out) {
        sctx::RunSummary s;
        {
          py::gil_scoped_release release;
          s = sctx::run_train(config_from(config), out);
        }
        return summary_dict(s);
      },
      py::arg("config"), py::arg("out"), "Trains (or resumes) a run from INI config text.");
  m.def(
      "evaluate",
      [](const std::string& dir, std::size_t beam) {
        std::optional<sctx::DecodeOptions> o;
        if (beam) {
          o = sctx::DecodeOptions{};
          o->beam = beam;
        }
        return report_dict(sctx::run_eval(dir, o).report);
      },
      py::arg("dir"), py::arg("beam") = 0);
  m.def("probe", [](const std::string& dir) { return sctx::run_probe(dir).to_csv(); }, py::arg("dir"));
  m.def(
      "ablate",
      [](const std::string& config, const std::string& out) { return sctx::run_ablation(config_from(config), out).to_csv(); },
      py::arg("config"), py::arg("out"));
}
