#include "sctx/probe.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "sctx/errors.hpp"
#include "sctx/optim.hpp"

namespace sctx {

namespace {

struct Split {
  std::vector<std::size_t> train, valid, test;
};

Split split_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(Rng::derive(seed, 0x5b117));
  rng.shuffle(idx);
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_valid = n / 10;
  Split s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.valid.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                 idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), idx.end());
  return s;
}

std::size_t distinct(const std::vector<int>& labels, const std::vector<std::size_t>& idx) {
  std::set<int> s;
  for (auto i : idx) s.insert(labels[i]);
  return s.size();
}

class Mlp {
 public:
  Mlp(std::size_t in, std::size_t hidden, std::size_t classes, std::uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x31f));
    inner_ = Linear<double>::create(store_, "probe.w1", in, hidden, rng);
    outer_ = Linear<double>::create(store_, "probe.w2", hidden, classes, rng);
  }

  ParameterStore<double>& params() { return store_; }

  Var<double> logits(Tape<double>& tape, const Tensor<double>& x) const {
    return outer_(tape, relu(inner_(tape, tape.constant(x))));
  }

 private:
  ParameterStore<double> store_;
  Linear<double> inner_, outer_;
};

Tensor<double> gather(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& idx) {
  const std::size_t d = x.front().size();
  Tensor<double> out({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy(x[idx[r]].begin(), x[idx[r]].end(), out.ptr() + r * d);
  return out;
}

double accuracy(const Mlp& mlp, const Tensor<double>& x, const std::vector<int>& labels,
                const std::vector<std::size_t>& idx) {
  Tape<double> tape(false);
  const Tensor<double>& z = mlp.logits(tape, x).value();
  const std::size_t c = z.dim(1);
  std::size_t right = 0;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const double* row = z.ptr() + r * c;
    const auto best = static_cast<int>(std::max_element(row, row + c) - row);
    right += best == labels[idx[r]];
  }
  return static_cast<double>(right) / static_cast<double>(idx.size());
}

std::vector<std::string> alphabet_of(const Vocab& vocab) {
  std::vector<std::string> out;
  for (std::size_t i = 4; i < vocab.size(); ++i) out.push_back(vocab.token(static_cast<std::int32_t>(i)));
  return out;
}

}  // namespace

ProbeResult probe(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                  const ProbeOptions& options) {
  if (features.size() != labels.size()) throw InputError("probe: feature and label counts differ");
  if (features.size() < 10) throw InputError("probe: need at least 10 examples");
  const std::size_t d = features.front().size();
  for (const auto& f : features) {
    if (f.size() != d || d == 0) throw InputError("probe: feature rows must share a positive width");
  }
  for (int y : labels) {
    if (y < 0) throw InputError("probe: labels must be non-negative");
  }
  if (options.hidden == 0 || options.batch_size == 0 || options.epochs == 0) {
    throw ConfigError("probe: hidden width, batch size and epochs must be positive");
  }
  std::set<int> all(labels.begin(), labels.end());
  if (all.size() < 2) throw InputError("probe: labels take a single value");
  const std::size_t classes = static_cast<std::size_t>(*all.rbegin()) + 1;

  const Split split = split_indices(features.size(), options.seed);
  if (distinct(labels, split.train) < 2 || distinct(labels, split.test) < 2) {
    throw InputError("probe: fewer than two classes in the train or test split");
  }

  // Standardize with training statistics only.
  std::vector<double> mean(d, 0), sd(d, 0);
  for (auto i : split.train) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += features[i][j];
  }
  for (auto& m : mean) m /= static_cast<double>(split.train.size());
  for (auto i : split.train) {
    for (std::size_t j = 0; j < d; ++j) sd[j] += (features[i][j] - mean[j]) * (features[i][j] - mean[j]);
  }
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(split.train.size())) + 1e-8;
  std::vector<std::vector<double>> z(features.size(), std::vector<double>(d));
  for (std::size_t i = 0; i < features.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) z[i][j] = (features[i][j] - mean[j]) / sd[j];
  }

  Mlp mlp(d, options.hidden, classes, options.seed);
  AdamConfig adam;
  adam.scale = options.learning_rate;
  adam.warmup = 0;
  Adam<double> opt(mlp.params(), adam, d);

  const Tensor<double> x_valid = gather(z, split.valid.empty() ? split.train : split.valid);
  const std::vector<std::size_t>& valid_idx = split.valid.empty() ? split.train : split.valid;
  Rng order_rng(Rng::derive(options.seed, 0x0de7));
  std::vector<std::size_t> order = split.train;

  ProbeResult result;
  NamedTensors best = snapshot(mlp.params());
  double best_valid = -1;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(
                                                             std::min(order.size(), start + options.batch_size)));
      IdTensor y({idx.size()});
      for (std::size_t r = 0; r < idx.size(); ++r) y[r] = labels[idx[r]];
      mlp.params().zero_grad();
      Tape<double> tape(true);
      const Var<double> loss = cross_entropy(mlp.logits(tape, gather(z, idx)), y, nullptr, 0.0);
      tape.backward(loss);
      opt.update();
    }
    const double acc = accuracy(mlp, x_valid, labels, valid_idx);
    if (acc >= best_valid) {  // ties keep the later, longer-trained epoch
      best_valid = acc;
      best = snapshot(mlp.params());
    }
  }
  restore(mlp.params(), best);

  std::map<int, std::size_t> freq;
  for (auto i : split.train) ++freq[labels[i]];
  int majority = freq.begin()->first;
  for (const auto& [label, n] : freq) {
    if (n > freq[majority]) majority = label;
  }
  std::size_t hits = 0;
  for (auto i : split.test) hits += labels[i] == majority;

  result.accuracy = accuracy(mlp, gather(z, split.test), labels, split.test);
  result.majority_baseline = static_cast<double>(hits) / static_cast<double>(split.test.size());
  result.valid_accuracy = best_valid;
  result.classes = all.size();
  result.train = split.train.size();
  result.valid = split.valid.size();
  result.test = split.test.size();
  return result;
}

std::string to_string(ProbeTask t) {
  switch (t) {
    case ProbeTask::selen: return "selen";
    case ProbeTask::wc: return "wc";
    case ProbeTask::bshift: return "bshift";
  }
  return "?";
}

std::string to_string(Extractor e) {
  switch (e) {
    case Extractor::pooled_top: return "pooled-top";
    case Extractor::shallow_g: return "shallow-g";
    case Extractor::deep_g: return "deep-g";
  }
  return "?";
}

ProbeTask parse_probe_task(const std::string& name) {
  for (auto t : all_probe_tasks()) {
    if (to_string(t) == name) return t;
  }
  throw ConfigError("unknown probing task '" + name + "' (expected selen, wc or bshift)");
}

Extractor parse_extractor(const std::string& name) {
  for (auto e : all_extractors()) {
    if (to_string(e) == name) return e;
  }
  throw ConfigError("unknown extractor '" + name + "' (expected pooled-top, shallow-g or deep-g)");
}

const std::vector<ProbeTask>& all_probe_tasks() {
  static const std::vector<ProbeTask> v{ProbeTask::selen, ProbeTask::wc, ProbeTask::bshift};
  return v;
}

const std::vector<Extractor>& all_extractors() {
  static const std::vector<Extractor> v{Extractor::pooled_top, Extractor::shallow_g, Extractor::deep_g};
  return v;
}

ProbingSet make_probing_set(ProbeTask task, std::size_t size, const std::vector<std::string>& alphabet,
                            std::uint64_t seed) {
  if (size == 0) throw InputError("probing set size must be positive");
  Rng rng(Rng::derive(seed, 0x9b0e + static_cast<std::uint64_t>(task)));
  const std::size_t a = alphabet.size();
  ProbingSet set;
  auto pick = [&](std::size_t lo, std::size_t hi) { return lo + static_cast<std::size_t>(rng.below(hi - lo + 1)); };
  switch (task) {
    case ProbeTask::selen: {
      if (a < 1) throw InputError("selen probe needs a non-empty alphabet");
      set.classes = 3;
      for (std::size_t i = 0; i < size; ++i) {
        const int label = static_cast<int>(i % 3);
        const std::size_t len = pick(4 * static_cast<std::size_t>(label) + 1, 4 * static_cast<std::size_t>(label) + 4);
        std::string s;
        for (std::size_t t = 0; t < len; ++t) s += alphabet[rng.below(a)];
        set.sentences.push_back(s);
        set.labels.push_back(label);
      }
      break;
    }
    case ProbeTask::wc: {
      if (a < 6) throw InputError("wc probe needs at least 6 symbols");
      set.classes = 4;
      const std::size_t plain = a - 4;
      for (std::size_t i = 0; i < size; ++i) {
        const int label = static_cast<int>(i % 4);
        const std::size_t len = pick(4, 12);
        const std::size_t at = rng.below(len);
        std::string s;
        for (std::size_t t = 0; t < len; ++t) {
          s += t == at ? alphabet[plain + static_cast<std::size_t>(label)] : alphabet[rng.below(plain)];
        }
        set.sentences.push_back(s);
        set.labels.push_back(label);
      }
      break;
    }
    case ProbeTask::bshift: {
      if (a < 3) throw InputError("bshift probe needs at least 3 symbols");
      set.classes = 2;
      for (std::size_t i = 0; i < size; ++i) {
        const int label = static_cast<int>(i % 2);
        const std::size_t len = pick(3, std::min<std::size_t>(12, a));
        std::vector<std::size_t> symbols(a);
        for (std::size_t k = 0; k < a; ++k) symbols[k] = k;
        rng.shuffle(symbols);
        symbols.resize(len);
        std::sort(symbols.begin(), symbols.end());
        if (label == 1) {
          const std::size_t at = rng.below(len - 1);
          std::swap(symbols[at], symbols[at + 1]);
        }
        std::string s;
        for (auto k : symbols) s += alphabet[k];
        set.sentences.push_back(s);
        set.labels.push_back(label);
      }
      break;
    }
  }
  // Shuffle sentences and labels together.
  std::vector<std::size_t> perm(size);
  for (std::size_t i = 0; i < size; ++i) perm[i] = i;
  rng.shuffle(perm);
  ProbingSet out;
  out.classes = set.classes;
  for (auto i : perm) {
    out.sentences.push_back(set.sentences[i]);
    out.labels.push_back(set.labels[i]);
  }
  return out;
}

void check_extractor(const ModelConfig& config, Extractor extractor) {
  if (extractor == Extractor::shallow_g && config.variant == Variant::vanilla) {
    throw ConfigError("extractor shallow-g needs a sentential-context variant, model is vanilla");
  }
  if (extractor == Extractor::deep_g && !is_deep(config.variant)) {
    throw ConfigError("extractor deep-g needs deep-rnn or deep-tam, model is " + to_string(config.variant));
  }
}

std::vector<std::vector<double>> extract(const Seq2Seq<float>& model, const std::vector<std::vector<std::int32_t>>& sources,
                                         Extractor extractor, std::size_t batch_size) {
  check_extractor(model.config(), extractor);
  if (batch_size == 0) throw ConfigError("extraction batch size must be positive");
  std::vector<Example> examples;
  for (const auto& s : sources) examples.push_back({s, {}});
  const ContextProvider<float>& ctx = model.context();
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch batch = make_batch(examples, idx);
    Tape<float> tape(false);
    const EncoderOutput<float> enc = model.encode(tape, batch.src, batch.src_mask);
    Var<float> rep;
    switch (extractor) {
      case Extractor::pooled_top: rep = mean_pool(enc.top(), enc.pad_mask); break;
      case Extractor::shallow_g: rep = ctx.global(tape, enc, enc.depth()); break;
      case Extractor::deep_g:
        if (ctx.dynamic()) {
          const Var<float> stacked = ctx.stack(ctx.summarize_layers(tape, enc));
          rep = ctx.deep_tam(tape, stacked, ctx.tam_start(tape, 1, idx.size()), 1);
        } else {
          rep = ctx.sentence_vector(tape, enc);
        }
        break;
    }
    const Tensor<float>& v = rep.value();
    const std::size_t d = v.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) out.emplace_back(v.ptr() + r * d, v.ptr() + (r + 1) * d);
  }
  return out;
}

std::string ProbingGrid::to_csv() const {
  std::ostringstream os;
  os << "extractor";
  for (auto t : tasks) os << ',' << to_string(t);
  os << '\n' << std::fixed << std::setprecision(4);
  for (std::size_t e = 0; e < extractors.size(); ++e) {
    os << to_string(extractors[e]);
    for (const auto& cell : cells[e]) os << ',' << cell.accuracy;
    os << '\n';
  }
  return os.str();
}

ProbingGrid probing_suite(const Seq2Seq<float>& model, const Vocab& src_vocab, const ProbingSuiteOptions& options) {
  for (auto e : options.extractors) check_extractor(model.config(), e);
  const std::vector<std::string> alphabet = alphabet_of(src_vocab);
  ProbingGrid grid;
  grid.extractors = options.extractors;
  grid.tasks = all_probe_tasks();
  grid.cells.assign(grid.extractors.size(), {});
  for (auto task : grid.tasks) {
    const ProbingSet set = make_probing_set(task, options.size, alphabet, options.probe.seed);
    std::vector<std::vector<std::int32_t>> sources;
    for (const auto& s : set.sentences) sources.push_back(src_vocab.encode(split_chars(s)));
    for (std::size_t e = 0; e < grid.extractors.size(); ++e) {
      grid.cells[e].push_back(probe(extract(model, sources, grid.extractors[e]), set.labels, options.probe));
    }
  }
  return grid;
}

}  // namespace sctx
