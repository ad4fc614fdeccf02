#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

#include "support.hpp"

#include "sctx/probe.hpp"
#include "sctx/train.hpp"

using namespace sctx;

namespace {

Sentence words(const std::string& s) {
  Sentence out;
  std::size_t p = 0;
  while (p < s.size()) {
    const std::size_t q = std::min(s.find(' ', p), s.size());
    out.push_back(s.substr(p, q - p));
    p = q + 1;
  }
  return out;
}

// Next-token distribution is a fixed function of the prefix.
class TableScorer : public StepScorer {
 public:
  using Table = std::function<std::vector<double>(const std::vector<std::int32_t>&)>;
  TableScorer(std::size_t rows, std::size_t vocab, std::int32_t bos, Table table)
      : prefixes_(rows), vocab_(vocab), bos_(bos), table_(std::move(table)) {}

  std::size_t vocab() const override { return vocab_; }
  std::vector<std::vector<double>> step(const std::vector<std::int32_t>& last) override {
    REQUIRE(last.size() == prefixes_.size());
    std::vector<std::vector<double>> out;
    for (std::size_t r = 0; r < last.size(); ++r) {
      if (last[r] != bos_) prefixes_[r].push_back(last[r]);
      out.push_back(table_(prefixes_[r]));
    }
    ++calls;
    return out;
  }
  void reorder(const std::vector<std::size_t>& rows) override {
    std::vector<std::vector<std::int32_t>> next;
    for (std::size_t r : rows) next.push_back(prefixes_.at(r));
    prefixes_ = std::move(next);
  }

  std::size_t calls = 0;

 private:
  std::vector<std::vector<std::int32_t>> prefixes_;
  std::size_t vocab_;
  std::int32_t bos_;
  Table table_;
};

std::vector<double> random_log_probs(const std::vector<std::int32_t>& prefix, std::size_t vocab, std::uint64_t salt) {
  std::uint64_t h = salt;
  for (auto t : prefix) h = Rng::derive(h, static_cast<std::uint64_t>(t) + 1);
  Rng rng(h);
  std::vector<double> logits(vocab);
  double z = 0;
  for (auto& l : logits) {
    l = rng.uniform(-2, 2);
    z += std::exp(l);
  }
  for (auto& l : logits) l -= std::log(z);
  return logits;
}

ModelConfig tiny(Variant v) {
  ModelConfig c = model_preset("grad-toy");
  c.variant = v;
  c.src_vocab = c.tgt_vocab = 12;
  c.dropout = 0.1;
  return c;
}

std::vector<Example> copy_examples(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Example> out(n);
  for (auto& e : out) {
    e.source.resize(1 + rng.below(6));
    for (auto& v : e.source) v = 4 + static_cast<std::int32_t>(rng.below(8));
    e.target = e.source;
  }
  return out;
}

}  // namespace

TEST_SUITE("bleu") {
  TEST_CASE("sentence scores by hand") {
    // clipped unigram 1/4, smoothed 2..4-gram precisions 1/4, 1/3, 1/2, no brevity penalty
    CHECK(sentence_bleu(words("the the the the"), words("the cat")) ==
          doctest::Approx(100 * std::pow(1.0 / 96, 0.25)).epsilon(1e-12));
    CHECK(sentence_bleu(words("the the the the"), words("the cat")) == doctest::Approx(31.947).epsilon(1e-4));
    // all precisions 1, brevity penalty exp(1 - 4/3)
    CHECK(sentence_bleu(words("the cat sat"), words("the cat sat down")) == doctest::Approx(71.653).epsilon(1e-4));
    CHECK(sentence_bleu({}, words("a b")) == 0);
    CHECK(sentence_bleu(words("a b c d e"), words("a b c d e")) == doctest::Approx(100).epsilon(1e-12));
  }

  TEST_CASE("corpus score") {
    const auto r = bleu({words("the cat sat")}, {words("the cat sat down")});
    CHECK(r.corpus == 0);  // no 4-gram match anywhere
    const auto s = bleu_stats(words("the the the the"), words("the cat"));
    CHECK(s.matches == std::array<std::size_t, 4>{1, 0, 0, 0});
    CHECK(s.totals == std::array<std::size_t, 4>{4, 3, 2, 1});
    CHECK(s.hyp_len == 4);
    CHECK(s.ref_len == 2);
    CHECK(bleu({words("a b c d"), words("e f g h i")}, {words("a b c d"), words("e f g h i")}).corpus ==
          doctest::Approx(100).epsilon(1e-12));
  }

  TEST_CASE("corpus score ignores sentence order") {
    Rng rng(3);
    const char* vocab[] = {"a", "b"};
    std::vector<Sentence> hyps, refs;
    for (int i = 0; i < 40; ++i) {
      Sentence h, r;
      for (std::size_t k = 0, n = 3 + rng.below(6); k < n; ++k) h.push_back(vocab[rng.below(2)]);
      for (std::size_t k = 0, n = 3 + rng.below(6); k < n; ++k) r.push_back(vocab[rng.below(2)]);
      hyps.push_back(h);
      refs.push_back(r);
    }
    const double base = bleu(hyps, refs).corpus;
    CHECK(base > 0);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<std::size_t> perm(hyps.size());
      for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
      rng.shuffle(perm);
      std::vector<Sentence> h2, r2;
      for (auto i : perm) {
        h2.push_back(hyps[i]);
        r2.push_back(refs[i]);
      }
      CHECK(bleu(h2, r2).corpus == doctest::Approx(base).epsilon(1e-12));
    }
  }

  TEST_CASE("mismatched corpora") { CHECK_THROWS(bleu({words("a")}, {})); }
}

TEST_SUITE("bootstrap") {
  TEST_CASE("matches exhaustive enumeration on six sentences") {
    const std::vector<double> a = {0.2, 0.5, 0.1, 0.9, 0.4, 0.3};
    const std::vector<double> b = {0.33, 0.429, 0.29, 0.783, 0.65, 0.1};
    std::size_t not_better = 0, total = 0;
    double closest = 1;
    std::vector<std::size_t> idx(6, 0);
    for (;;) {
      double sa = 0, sb = 0;
      for (auto i : idx) {
        sa += a[i];
        sb += b[i];
      }
      not_better += sb <= sa;
      closest = std::min(closest, std::abs(sb - sa));
      ++total;
      std::size_t k = 0;
      while (k < 6 && ++idx[k] == 6) idx[k++] = 0;
      if (k == 6) break;
    }
    REQUIRE(total == 46656);
    REQUIRE(closest > 1e-9);  // no ties, so rounding cannot flip a comparison
    const double exact = static_cast<double>(not_better) / total;
    CHECK(std::abs(bootstrap_test(a, b, 100000, 5) - exact) < 0.01);
  }

  TEST_CASE("a system never significantly beats itself") {
    const std::vector<double> a = {0.2, 0.5, 0.1, 0.9};
    CHECK(bootstrap_test(a, a, 500, 1) >= 0.5);
    std::vector<BleuStats> s;
    for (const char* h : {"a b c d", "a b x d e", "q a b c d"}) s.push_back(bleu_stats(words(h), words("a b c d e")));
    CHECK(bootstrap_test(s, s, 500, 1) >= 0.5);
  }

  TEST_CASE("a clearly better system gets a small p-value") {
    std::vector<double> a(50), b(50);
    Rng rng(2);
    for (std::size_t i = 0; i < 50; ++i) {
      a[i] = rng.uniform(0, 0.5);
      b[i] = a[i] + 0.3;
    }
    CHECK(bootstrap_test(a, b, 1000, 1) == 0.0);
    CHECK(bootstrap_test(b, a, 1000, 1) == 1.0);
  }

  TEST_CASE("input checks") {
    CHECK_THROWS_AS(bootstrap_test(std::vector<double>{1, 2}, std::vector<double>{1}, 10, 1), InputError);
    CHECK_THROWS_AS(bootstrap_test(std::vector<double>{1, 2}, std::vector<double>{1, 2}, 0, 1), InputError);
  }
}

TEST_SUITE("decoding") {
  TEST_CASE("beam search beats greedy on a garden path") {
    // ids: 0 a, 1 b, 2 eos, 3 bos
    auto table = [](const std::vector<std::int32_t>& p) -> std::vector<double> {
      if (p.empty()) return {std::log(0.6), std::log(0.4), std::log(1e-9), std::log(1e-9)};
      if (p.back() == 1) return {std::log(0.05), std::log(0.05), std::log(0.9), std::log(1e-9)};
      return {std::log(0.3), std::log(0.3), std::log(0.4), std::log(1e-9)};
    };
    TableScorer g(1, 4, 3, table), b(1, 4, 3, table);
    CHECK(greedy_search(g, 1, 5, 3, 2) == std::vector<std::vector<std::int32_t>>{{0}});
    CHECK(beam_search(b, 1, 2, 0.0, 5, 3, 2) == std::vector<std::vector<std::int32_t>>{{1}});
  }

  TEST_CASE("a wide beam finds the best normalized sequence") {
    const std::size_t V = 4, max_len = 4;  // ids 0, 1 are words, 2 eos, 3 bos
    for (std::uint64_t salt = 1; salt <= 20; ++salt) {
      for (double alpha : {0.0, 0.6, 1.0}) {
        auto no_bos = [&](const std::vector<std::int32_t>& p) {
          auto lp = random_log_probs(p, V, salt);
          lp[3] = -1e9;
          return lp;
        };
        // every sequence over {0, 1} of length < max_len followed by eos, plus unfinished ones of length max_len
        double best = -INFINITY;
        std::vector<std::int32_t> best_seq, seq;
        std::function<void(std::vector<std::int32_t>&, double)> walk = [&](std::vector<std::int32_t>& s2, double score) {
          const auto lp = no_bos(s2);
          if (s2.size() == max_len) {
            const double s = score / std::pow(static_cast<double>(s2.size()), alpha);
            if (s > best) best = s, best_seq = s2;
            return;
          }
          const double s = (score + lp[2]) / std::pow(static_cast<double>(s2.size() + 1), alpha);
          if (s > best) best = s, best_seq = s2;
          for (std::int32_t w : {0, 1}) {
            s2.push_back(w);
            walk(s2, score + lp[w]);
            s2.pop_back();
          }
        };
        walk(seq, 0);
        TableScorer wide(1, V, 3, no_bos);
        const auto out = beam_search(wide, 1, 64, alpha, max_len, 3, 2);
        INFO("salt " << salt << " alpha " << alpha);
        CHECK(out[0] == best_seq);
      }
    }
  }

  TEST_CASE("beam one and greedy agree") {
    for (std::uint64_t salt = 1; salt <= 30; ++salt) {
      auto table = [&](const std::vector<std::int32_t>& p) { return random_log_probs(p, 6, salt); };
      TableScorer g(3, 6, 5, table), b(3, 6, 5, table);
      CHECK(greedy_search(g, 3, 8, 5, 2) == beam_search(b, 3, 1, 0.6, 8, 5, 2));
    }
  }

  TEST_CASE("beam one and greedy agree on a model") {
    for (Variant v : all_variants()) {
      Seq2Seq<float> m(tiny(v));
      Rng rng(4);
      IdTensor src({4, 5});
      for (auto& x : src.storage()) x = 4 + static_cast<std::int32_t>(rng.below(8));
      BoolTensor mask({4, 5}, 1);
      mask(2, 4) = mask(2, 3) = 0;
      DecodeOptions greedy, beam1;
      beam1.beam = 1;
      beam1.alpha = 1.0;
      ModelScorer s(m, src, mask);
      const auto a = greedy_search(s, 4, 9, Vocab::bos, Vocab::eos);
      ModelScorer s2(m, src, mask);
      CHECK(a == beam_search(s2, 4, 1, 0.6, 9, Vocab::bos, Vocab::eos));
      CHECK(decode(m, src, mask, greedy).size() == 4);
    }
  }

  TEST_CASE("log-softmax") {
    const float logits[] = {1, 2, 3};
    const auto lp = log_softmax(logits, 3);
    CHECK(std::exp(lp[0]) == doctest::Approx(0.09003057317038046).epsilon(1e-12));
    CHECK(std::exp(lp[2]) == doctest::Approx(0.6652409557748219).epsilon(1e-12));
  }
}

TEST_SUITE("optimizer") {
  TEST_CASE("noam schedule") {
    CHECK(noam_rate(400, 64, 400) == doctest::Approx(0.125 * 0.05).epsilon(1e-12));
    CHECK(noam_rate(1, 64, 400) == doctest::Approx(0.125 * std::pow(400.0, -1.5)).epsilon(1e-12));
    CHECK(noam_rate(1600, 64, 400) == doctest::Approx(0.125 / 40).epsilon(1e-12));
    for (std::size_t s = 1; s < 400; ++s) CHECK(noam_rate(s, 64, 400) < noam_rate(s + 1, 64, 400));
    for (std::size_t s = 400; s < 3000; ++s) CHECK(noam_rate(s, 64, 400) > noam_rate(s + 1, 64, 400));
  }

  TEST_CASE("adam rate follows the scaled schedule") {
    ParameterStore<float> store;
    store.add("w", Tensor<float>({2}, 1.0f));
    AdamConfig c;
    c.scale = 0.5;
    Adam<float> a(store, c, 64);
    CHECK(a.rate(400) == doctest::Approx(0.5 * noam_rate(400, 64, 400)).epsilon(1e-12));
    c.warmup = 0;
    Adam<float> flat(store, c, 64);
    CHECK(flat.rate(1) == 0.5);
    CHECK(flat.rate(1000) == 0.5);
  }

  TEST_CASE("one adam step by hand") {
    ParameterStore<double> store;
    auto& w = store.add("w", testing::tensor({2}, {1, -1}));
    AdamConfig c;
    c.warmup = 0;
    c.scale = 0.1;
    Adam<double> a(store, c, 64);
    w.grad = testing::tensor({2}, {0.5, -2});
    a.update();
    // bias-corrected first step moves each weight by lr * sign(g) (up to eps)
    CHECK(w.value[0] == doctest::Approx(0.9).epsilon(1e-9));
    CHECK(w.value[1] == doctest::Approx(-0.9).epsilon(1e-9));
  }
}

TEST_SUITE("training") {
  TEST_CASE("zero steps leave the model at its initialization") {
    Seq2Seq<float> m(tiny(Variant::shallow_att)), ref(tiny(Variant::shallow_att));
    TrainOptions o;
    o.steps = 0;
    const auto r = train(m, copy_examples(50, 1), o);
    CHECK(r.steps == 0);
    CHECK(r.curve.empty());
    for (std::size_t i = 0; i < m.params().size(); ++i) CHECK(m.params()[i].value == ref.params()[i].value);
  }

  TEST_CASE("runs are reproducible and resumable") {
    TrainOptions o;
    o.steps = 12;
    o.batch_size = 8;
    o.log_every = 1;
    const auto data = copy_examples(40, 2);  // 5 batches per epoch, so the run crosses epochs

    Seq2Seq<float> a(tiny(Variant::deep_tam)), b(tiny(Variant::deep_tam));
    const auto ra = train(a, data, o);
    const auto rb = train(b, data, o);
    REQUIRE(ra.curve.size() == 12);
    CHECK(ra.curve == rb.curve);
    for (std::size_t i = 0; i < a.params().size(); ++i) CHECK(a.params()[i].value == b.params()[i].value);

    Seq2Seq<float> c(tiny(Variant::deep_tam));
    Trainer first(c, data, o);
    std::vector<LossPoint> curve;
    for (int s = 0; s < 7; ++s) curve.push_back(first.step());
    const NamedTensors saved = decode_checkpoint(encode_checkpoint(first.checkpoint()));

    Seq2Seq<float> d(tiny(Variant::deep_tam));
    Trainer second(d, data, o);
    second.resume(saved);
    CHECK(second.steps_done() == 7);
    for (int s = 7; s < 12; ++s) curve.push_back(second.step());
    CHECK(curve == ra.curve);
    for (std::size_t i = 0; i < a.params().size(); ++i) CHECK(d.params()[i].value == a.params()[i].value);
  }

  TEST_CASE("a different seed changes the run") {
    TrainOptions o;
    o.steps = 3;
    o.batch_size = 8;
    o.log_every = 1;
    const auto data = copy_examples(40, 2);
    Seq2Seq<float> a(tiny(Variant::vanilla)), b(tiny(Variant::vanilla));
    const auto ra = train(a, data, o);
    o.seed = 2;
    const auto rb = train(b, data, o);
    CHECK(ra.curve != rb.curve);
  }

  TEST_CASE("loss goes down on a copy task") {
    TrainOptions o;
    o.steps = 300;
    o.batch_size = 16;
    o.adam.warmup = 100;
    const auto data = copy_examples(200, 3);
    std::vector<std::size_t> all(data.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const Batch b = make_batch(data, all);
    Seq2Seq<float> m(tiny(Variant::shallow_mean));
    auto nll = [&] {
      Tape<float> t(false);
      return m.loss(t, b.src, b.src_mask, b.decoder_input(), b.decoder_target(), b.decoder_target_mask(), 0.0f)
          .value()[0];
    };
    const float before = nll();
    train(m, data, o);
    CHECK(nll() < 0.5f * before);
  }

  TEST_CASE("speed meter takes the median of windows two to six") {
    SpeedMeter s;
    s.add(1.0, 1000);  // warm-up window, ignored
    for (double sec : {1.0, 2.0, 4.0, 0.5, 1.0}) s.add(sec, 10);
    CHECK(s.rate() == doctest::Approx(10.0).epsilon(1e-12));
    s.add(0.001, 10);  // seventh window is outside the median
    CHECK(s.rate() == doctest::Approx(10.0).epsilon(1e-12));
  }
}

TEST_SUITE("evaluation") {
  TEST_CASE("token accuracy by hand") {
    CHECK(token_accuracy({{1, 2, 3}}, {{1, 2}}) == doctest::Approx(2.0 / 3));
    CHECK(token_accuracy({{1, 2, 3}, {4}}, {{1, 2}, {5, 6}}) == doctest::Approx(2.0 / 5));
    CHECK(token_accuracy({{7, 8}}, {{7, 8}}) == 1.0);
  }

  TEST_CASE("report fields") {
    Seq2Seq<float> m(tiny(Variant::deep_rnn));
    Vocab v;
    for (int i = 0; i < 8; ++i) v.add(std::string(1, static_cast<char>('a' + i)));
    const auto ex = copy_examples(10, 5);
    const auto e = evaluate(m, ex, v);
    CHECK(e.report.sentences == 10);
    CHECK(e.hypotheses.size() == 10);
    CHECK(e.report.parameters == m.params().total_elements());
    CHECK(e.report.token_accuracy >= 0);
    CHECK(e.report.token_accuracy <= 1);
    CHECK(e.report.decode_sentences_per_second > 0);
    CHECK(e.report.to_json().find("\"corpus_bleu\"") != std::string::npos);
  }
}

TEST_SUITE("probe") {
  TEST_CASE("separable features are learned") {
    Rng rng(1);
    std::vector<std::vector<double>> x;
    std::vector<int> y;
    for (int i = 0; i < 300; ++i) {
      const int label = i % 3;
      std::vector<double> f(6);
      for (auto& v : f) v = rng.uniform(-0.1, 0.1);
      f[label] += 1.0;
      x.push_back(f);
      y.push_back(label);
    }
    const auto r = probe(x, y);
    CHECK(r.accuracy >= 0.99);
    CHECK(r.classes == 3);
    CHECK(r.train + r.valid + r.test == 300);
    CHECK(r.train == 240);
  }

  TEST_CASE("noise features stay near chance") {
    Rng rng(2);
    std::vector<std::vector<double>> x;
    std::vector<int> y;
    for (int i = 0; i < 1000; ++i) {
      std::vector<double> f(8);
      for (auto& v : f) v = rng.uniform(-1, 1);
      x.push_back(f);
      y.push_back(static_cast<int>(rng.below(2)));
    }
    ProbeOptions o;
    o.epochs = 20;
    const auto r = probe(x, y, o);
    CHECK(std::abs(r.accuracy - 0.5) <= 0.1);
    CHECK(r.majority_baseline > 0.35);
    CHECK(r.majority_baseline < 0.65);
  }

  TEST_CASE("probe is reproducible") {
    Rng rng(3);
    std::vector<std::vector<double>> x;
    std::vector<int> y;
    for (int i = 0; i < 200; ++i) {
      x.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1)});
      y.push_back(x.back()[0] > 0);
    }
    const auto a = probe(x, y), b = probe(x, y);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.valid_accuracy == b.valid_accuracy);
  }

  TEST_CASE("bad inputs") {
    CHECK_THROWS_AS(probe({{1}, {2}}, {0}), InputError);
    std::vector<std::vector<double>> x(20, std::vector<double>{1});
    CHECK_THROWS_AS(probe(x, std::vector<int>(20, 1)), InputError);
  }

  TEST_CASE("probing sets") {
    std::vector<std::string> alphabet;
    for (char c = 'a'; c < 'a' + 12; ++c) alphabet.emplace_back(1, c);
    for (ProbeTask t : all_probe_tasks()) {
      const auto s = make_probing_set(t, 300, alphabet, 4);
      REQUIRE(s.sentences.size() == 300);
      std::map<int, int> counts;
      for (int l : s.labels) ++counts[l];
      CHECK(counts.size() == s.classes);
      for (auto [label, n] : counts) CHECK(n == static_cast<int>(300 / s.classes));
      for (std::size_t i = 0; i < 300; ++i) {
        const auto& sent = s.sentences[i];
        const int l = s.labels[i];
        if (t == ProbeTask::selen) CHECK(static_cast<int>((sent.size() - 1) / 4) == l);
        if (t == ProbeTask::wc) {
          int markers = 0;
          for (char c : sent) markers += c >= 'a' + 8;
          CHECK(markers == 1);
          CHECK(sent.find(static_cast<char>('a' + 8 + l)) != std::string::npos);
        }
        if (t == ProbeTask::bshift) CHECK(std::is_sorted(sent.begin(), sent.end()) == (l == 0));
      }
      CHECK(make_probing_set(t, 300, alphabet, 4).sentences == s.sentences);
    }
  }
}
