#include "sctx/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sctx/rng.hpp"

namespace sctx {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

namespace {

struct Evaluation {
  double loss;
  std::uint64_t signature;
};

Evaluation evaluate(const LossBuilder& loss) {
  Tape<double> tape(false);
  tape.track_branches(true);
  const double v = loss(tape).value()[0];
  if (!std::isfinite(v)) throw EvaluationError("grad_check: loss is not finite");
  return {v, tape.branch_signature()};
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& loss, const std::vector<Parameter<double>*>& params,
                           const GradCheckOptions& options) {
  for (auto* p : params) p->grad.fill(0.0);
  {
    Tape<double> tape(true);
    Var<double> root = loss(tape);
    if (!std::isfinite(root.value()[0])) throw EvaluationError("grad_check: loss is not finite");
    tape.backward(root);
  }
  const Evaluation base = evaluate(loss);
  const double h = options.step;

  GradCheckReport report;
  Rng sampler(options.sample_seed);
  for (auto* p : params) {
    ParamGradReport pr;
    pr.name = p->name;
    std::vector<std::size_t> elements(p->value.size());
    std::iota(elements.begin(), elements.end(), std::size_t{0});
    if (options.max_elements_per_param && elements.size() > options.max_elements_per_param) {
      sampler.shuffle(elements);
      elements.resize(options.max_elements_per_param);
      std::sort(elements.begin(), elements.end());
    }
    for (std::size_t i : elements) {
      const double saved = p->value[i];
      auto difference = [&](double step, bool& crossed) {
        p->value[i] = saved + step;
        const Evaluation plus = evaluate(loss);
        p->value[i] = saved - step;
        const Evaluation minus = evaluate(loss);
        p->value[i] = saved;
        crossed = crossed || plus.signature != base.signature || minus.signature != base.signature;
        return (plus.loss - minus.loss) / (2 * step);
      };
      const double analytic = p->grad[i];
      // The plain difference is accepted when it already agrees; otherwise
      // the extrapolated one decides.
      auto central = [&](double step, bool& crossed) {
        crossed = false;
        const double coarse = difference(step, crossed);
        if (!options.richardson || (!crossed && relative_error(analytic, coarse) < options.tolerance)) return coarse;
        const double fine = difference(step / 2, crossed);
        return (4 * fine - coarse) / 3;
      };
      bool crossed = false;
      double numeric = central(h, crossed);
      if (crossed) {
        ++pr.kink_crossings;
        // A stencil straddling a ReLU / max-pool switch does not estimate the
        // derivative at this point; shrink it until it stays on one branch.
        double step = h;
        while (crossed && options.refine_at_kinks && step / 10 >= options.min_step) {
          step /= 10;
          numeric = central(step, crossed);
        }
        if (crossed) {
          ++pr.unresolved;
          continue;
        }
        ++pr.refined;
      }
      const double err = relative_error(analytic, numeric);
      if (err > pr.max_rel_error || pr.checked == 0) {
        pr.max_rel_error = err;
        pr.worst_index = i;
        pr.analytic_at_worst = analytic;
        pr.numeric_at_worst = numeric;
      }
      ++pr.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, pr.max_rel_error);
    report.kink_crossings += pr.kink_crossings;
    report.refined += pr.refined;
    report.unresolved += pr.unresolved;
    report.params.push_back(std::move(pr));
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

GradCheckReport grad_check(const LossBuilder& loss, ParameterStore<double>& store, const GradCheckOptions& options) {
  std::vector<Parameter<double>*> params;
  for (std::size_t i = 0; i < store.size(); ++i) params.push_back(&store[i]);
  return grad_check(loss, params, options);
}

std::string describe(const GradCheckReport& report) {
  std::ostringstream out;
  out << (report.passed ? "PASS" : "FAIL") << " max relative error " << report.max_rel_error << " over "
      << report.params.size() << " parameters";
  if (report.kink_crossings) {
    out << " (" << report.kink_crossings << " kink crossings, " << report.refined << " refined, " << report.unresolved
        << " unresolved)";
  }
  out << "\n";
  for (const auto& p : report.params) {
    out << "  " << p.name << ": " << p.max_rel_error << " (" << p.checked << " elements";
    if (p.checked) out << ", worst #" << p.worst_index << " analytic " << p.analytic_at_worst << " numeric " << p.numeric_at_worst;
    out << ")\n";
  }
  return out.str();
}

}  // namespace sctx
