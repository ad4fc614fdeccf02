#include "sctx/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "sctx/errors.hpp"

#ifndef SCTX_VERSION
#define SCTX_VERSION "0.0.0"
#endif

namespace sctx {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::size_t to_size(const std::string& v) {
  std::size_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("expected an unsigned integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& v) {
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join_list(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

std::string to_string(CorpusSource c) { return c == CorpusSource::files ? "files" : "synthetic"; }

CorpusSource parse_corpus(const std::string& v) {
  if (v == "synthetic") return CorpusSource::synthetic;
  if (v == "files") return CorpusSource::files;
  throw ConfigError("expected synthetic or files, got '" + v + "'");
}

std::string to_string(TokenizerKind k) { return k == TokenizerKind::bpe ? "bpe" : "chars"; }

struct Key {
  const char* name;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define SIZE_KEY(name, field) \
  Key { name, [](ExperimentConfig& c, const std::string& v) { c.field = to_size(v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.field); } }
#define DOUBLE_KEY(name, field) \
  Key { name, [](ExperimentConfig& c, const std::string& v) { c.field = to_double(v); }, \
        [](const ExperimentConfig& c) { return format_double(c.field); } }
#define STRING_KEY(name, field) \
  Key { name, [](ExperimentConfig& c, const std::string& v) { c.field = v; }, \
        [](const ExperimentConfig& c) { return c.field; } }

// model.preset is applied before every other key (see parse_config).
const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      {"seed", [](ExperimentConfig& c, const std::string& v) { c.set_seed(to_u64(v)); },
       [](const ExperimentConfig& c) { return std::to_string(c.seed); }},
      STRING_KEY("out", out),
      {"model.preset",
       [](ExperimentConfig& c, const std::string& v) {
         const ModelConfig p = model_preset(v);
         const Variant variant = c.model.variant;
         c.model = p;
         c.model.variant = variant;
         c.model.seed = c.seed;
         c.preset = v;
       },
       [](const ExperimentConfig& c) { return c.preset; }},
      {"model.variant", [](ExperimentConfig& c, const std::string& v) { c.model.variant = parse_variant(v); },
       [](const ExperimentConfig& c) { return to_string(c.model.variant); }},
      {"model.deep_global", [](ExperimentConfig& c, const std::string& v) { c.model.deep_global = parse_global(v); },
       [](const ExperimentConfig& c) { return to_string(c.model.deep_global); }},
      SIZE_KEY("model.d_model", model.d_model),
      SIZE_KEY("model.n_heads", model.n_heads),
      SIZE_KEY("model.d_ff_enc", model.d_ff_enc),
      SIZE_KEY("model.d_ff_dec", model.d_ff_dec),
      SIZE_KEY("model.n_enc_layers", model.n_enc_layers),
      SIZE_KEY("model.n_dec_layers", model.n_dec_layers),
      DOUBLE_KEY("model.dropout", model.dropout),
      SIZE_KEY("model.max_len", model.max_len),
      {"task.corpus", [](ExperimentConfig& c, const std::string& v) { c.corpus = parse_corpus(v); },
       [](const ExperimentConfig& c) { return to_string(c.corpus); }},
      {"task.kind", [](ExperimentConfig& c, const std::string& v) { c.task = parse_task(v); },
       [](const ExperimentConfig& c) { return to_string(c.task); }},
      SIZE_KEY("task.alphabet", task_options.alphabet),
      SIZE_KEY("task.min_len", task_options.min_len),
      SIZE_KEY("task.max_len", task_options.max_len),
      SIZE_KEY("task.class_size", task_options.class_size),
      SIZE_KEY("task.train_size", train_size),
      SIZE_KEY("task.valid_size", valid_size),
      SIZE_KEY("task.test_size", test_size),
      STRING_KEY("task.train_source", train_source),
      STRING_KEY("task.train_target", train_target),
      STRING_KEY("task.valid_source", valid_source),
      STRING_KEY("task.valid_target", valid_target),
      STRING_KEY("task.test_source", test_source),
      STRING_KEY("task.test_target", test_target),
      {"task.tokenizer", [](ExperimentConfig& c, const std::string& v) { c.tokenizer = parse_tokenizer(v); },
       [](const ExperimentConfig& c) { return to_string(c.tokenizer); }},
      SIZE_KEY("task.bpe_merges", bpe_merges),
      SIZE_KEY("train.steps", train.steps),
      SIZE_KEY("train.batch_size", train.batch_size),
      SIZE_KEY("train.max_len", train.max_len),
      DOUBLE_KEY("train.smoothing", train.smoothing),
      SIZE_KEY("train.log_every", train.log_every),
      SIZE_KEY("train.eval_every", eval_every),
      DOUBLE_KEY("train.early_stop", early_stop),
      SIZE_KEY("train.checkpoint_every", checkpoint_every),
      SIZE_KEY("train.warmup", train.adam.warmup),
      DOUBLE_KEY("train.lr_scale", train.adam.scale),
      SIZE_KEY("train.speed_window", train.speed_window),
      SIZE_KEY("eval.beam", decode.beam),
      DOUBLE_KEY("eval.alpha", decode.alpha),
      SIZE_KEY("eval.max_len", decode.max_len),
      {"ablation.rows", [](ExperimentConfig& c, const std::string& v) { c.ablation_rows = split_list(v); },
       [](const ExperimentConfig& c) { return join_list(c.ablation_rows); }},
      SIZE_KEY("ablation.resamples", resamples),
      {"ablation.parallel", [](ExperimentConfig& c, const std::string& v) { c.parallel = to_bool(v); },
       [](const ExperimentConfig& c) { return std::string(c.parallel ? "true" : "false"); }},
      SIZE_KEY("probe.size", probe.size),
      SIZE_KEY("probe.hidden", probe.probe.hidden),
      SIZE_KEY("probe.epochs", probe.probe.epochs),
      SIZE_KEY("probe.batch_size", probe.probe.batch_size),
      DOUBLE_KEY("probe.lr", probe.probe.learning_rate),
      {"probe.extractors",
       [](ExperimentConfig& c, const std::string& v) {
         c.probe.extractors.clear();
         for (const auto& e : split_list(v)) c.probe.extractors.push_back(parse_extractor(e));
       },
       [](const ExperimentConfig& c) {
         std::vector<std::string> names;
         for (auto e : c.probe.extractors) names.push_back(to_string(e));
         return join_list(names);
       }},
  };
  return k;
}

#undef SIZE_KEY
#undef DOUBLE_KEY
#undef STRING_KEY

const Key* find_key(const std::string& name) {
  for (const auto& k : keys()) {
    if (name == k.name) return &k;
  }
  return nullptr;
}

void validate(const ExperimentConfig& c, const IniFile& ini) {
  auto fail = [&](const std::string& key, const std::string& msg) {
    const auto* e = ini.find(key);
    throw ParseError(msg, e ? e->line : 0, key);
  };
  try {
    ModelConfig m = c.model;
    m.validate();
  } catch (const ConfigError& e) {
    fail("model", e.what());
  }
  const auto& t = c.task_options;
  if (t.min_len == 0) fail("task.min_len", "must be positive");
  if (t.max_len < t.min_len) fail("task.max_len", "must be at least task.min_len");
  if (t.alphabet == 0 || t.alphabet > 26) fail("task.alphabet", "must lie in 1..26");
  if (c.task == TaskKind::lexicon_translate && (t.class_size == 0 || t.class_size >= t.alphabet)) {
    fail("task.class_size", "must lie in 1..alphabet-1");
  }
  if (c.corpus == CorpusSource::synthetic && (c.train_size == 0 || c.valid_size == 0 || c.test_size == 0)) {
    fail("task.train_size", "corpus sizes must be positive");
  }
  if (c.corpus == CorpusSource::files) {
    for (const char* k : {"task.train_source", "task.train_target", "task.valid_source", "task.valid_target",
                          "task.test_source", "task.test_target"}) {
      if (find_key(k)->get(c).empty()) fail(k, "required when task.corpus = files");
    }
  }
  if (c.train.batch_size == 0) fail("train.batch_size", "must be positive");
  if (c.train.max_len == 0) fail("train.max_len", "must be positive");
  if (c.train.smoothing < 0 || c.train.smoothing >= 1) fail("train.smoothing", "must lie in [0, 1)");
  if (c.train.speed_window == 0) fail("train.speed_window", "must be positive");
  if (c.train.adam.scale <= 0) fail("train.lr_scale", "must be positive");
  if (c.early_stop < 0 || c.early_stop > 1) fail("train.early_stop", "must lie in [0, 1]");
  if (c.decode.beam == 0) fail("eval.beam", "must be positive");
  if (c.decode.alpha < 0) fail("eval.alpha", "must be non-negative");
  if (c.resamples == 0) fail("ablation.resamples", "must be positive");
  std::set<std::string> seen;
  for (const auto& r : c.ablation_rows) {
    try {
      ablation_row_spec(r);
    } catch (const ConfigError& e) {
      fail("ablation.rows", e.what());
    }
    if (!seen.insert(ablation_row_spec(r).first + "/" + to_string(ablation_row_spec(r).second)).second) {
      fail("ablation.rows", "row '" + r + "' is listed twice");
    }
  }
  if (c.ablation_rows.empty()) fail("ablation.rows", "needs at least one row");
  if (c.probe.size < 10) fail("probe.size", "must be at least 10");
  if (c.probe.extractors.empty()) fail("probe.extractors", "needs at least one extractor");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp + "'");
    out << content;
    if (!out) throw IoError("write to '" + tmp + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

std::string checkpoint_name(std::size_t step) { return "ckpt-" + std::to_string(step) + ".bin"; }

std::size_t read_latest(const std::string& dir) {
  const std::string text = trim(read_file(path_in(dir, "latest")));
  try {
    return to_size(text);
  } catch (const ConfigError&) {
    throw IoError("malformed 'latest' file in " + dir);
  }
}

// Keeps the lines of a JSON-lines file whose "step" is at most `step`.
std::vector<std::string> lines_up_to(const std::string& path, std::size_t step) {
  std::vector<std::string> kept;
  if (!fs::exists(path)) return kept;
  for (const auto& line : read_lines(path)) {
    if (line.empty()) continue;
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("step")) throw IoError("malformed record in " + path + ": " + line);
    if (j["step"].get<std::size_t>() <= step) kept.push_back(line);
  }
  return kept;
}

void encode_splits(PreparedData& d) {
  d.train = encode_corpus(d.train_text, d.tokenizer, d.src_vocab, d.tgt_vocab);
  d.valid = encode_corpus(d.valid_text, d.tokenizer, d.src_vocab, d.tgt_vocab);
  d.test = encode_corpus(d.test_text, d.tokenizer, d.src_vocab, d.tgt_vocab);
}

void load_texts(const ExperimentConfig& c, PreparedData& d) {
  if (c.corpus == CorpusSource::files) {
    d.train_text = read_parallel(c.train_source, c.train_target);
    d.valid_text = read_parallel(c.valid_source, c.valid_target);
    d.test_text = read_parallel(c.test_source, c.test_target);
  } else {
    d.train_text = gen_task(c.task, c.train_size, Rng::derive(c.seed, 11), c.task_options);
    d.valid_text = gen_task(c.task, c.valid_size, Rng::derive(c.seed, 12), c.task_options);
    d.test_text = gen_task(c.task, c.test_size, Rng::derive(c.seed, 13), c.task_options);
  }
  if (d.train_text.size() == 0) throw InputError("training corpus is empty");
  if (d.valid_text.size() == 0) throw InputError("validation corpus is empty");
  if (d.test_text.size() == 0) throw InputError("test corpus is empty");
}

}  // namespace

void ExperimentConfig::set_seed(std::uint64_t s) {
  seed = s;
  model.seed = s;
  train.seed = s;
  probe.probe.seed = s;
}

const IniFile::Entry* IniFile::find(const std::string& key) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

IniFile IniFile::parse(const std::string& text) {
  IniFile ini;
  std::istringstream in(text);
  std::string raw, section;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(raw);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s[0] == '[') {
      if (s.back() != ']') throw ParseError("unterminated section header", line, "");
      section = trim(s.substr(1, s.size() - 2));
      if (section.empty()) throw ParseError("empty section name", line, "");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", line, s);
    const std::string key = trim(s.substr(0, eq));
    if (key.empty()) throw ParseError("missing key before '='", line, "");
    const std::string full = section.empty() ? key : section + "." + key;
    if (ini.entries_.count(full)) {
      throw ParseError("duplicate key (first set on line " + std::to_string(ini.entries_[full].line) + ")", line, full);
    }
    ini.entries_[full] = {trim(s.substr(eq + 1)), line};
  }
  return ini;
}

ExperimentConfig parse_config(const std::string& text) {
  const IniFile ini = IniFile::parse(text);
  for (const auto& [name, entry] : ini.entries()) {
    if (!find_key(name)) throw ParseError("unknown key", entry.line, name);
  }
  const bool files = ini.has("task.corpus") && ini.find("task.corpus")->value == "files";
  for (const char* required : {"model.variant", "task.kind", "train.steps"}) {
    if (std::string(required) == "task.kind" && files) continue;
    if (!ini.has(required)) throw ParseError("missing required key", 0, required);
  }
  ExperimentConfig c;
  auto apply = [&](const std::string& name) {
    const auto* e = ini.find(name);
    if (!e) return;
    try {
      find_key(name)->set(c, e->value);
    } catch (const ParseError&) {
      throw;
    } catch (const Error& err) {
      throw ParseError(err.what(), e->line, name);
    }
  };
  apply("seed");
  apply("model.preset");
  for (const auto& k : keys()) {
    if (std::string(k.name) != "seed" && std::string(k.name) != "model.preset") apply(k.name);
  }
  validate(c, ini);
  return c;
}

ExperimentConfig load_config(const std::string& path) { return parse_config(read_file(path)); }

std::string ExperimentConfig::to_ini() const {
  std::ostringstream os;
  std::string section;
  for (const auto& k : keys()) {
    const std::string name = k.name;
    const auto dot = name.find('.');
    const std::string sec = dot == std::string::npos ? "" : name.substr(0, dot);
    const std::string key = dot == std::string::npos ? name : name.substr(dot + 1);
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << key << " = " << k.get(*this) << "\n";
  }
  return os.str();
}

bool ExperimentConfig::same_run(const ExperimentConfig& other) const {
  ExperimentConfig a = *this, b = other;
  a.train.steps = b.train.steps = 0;
  a.out = b.out = "";
  return a.to_ini() == b.to_ini();
}

std::string git_blob_hash(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw Error("SHA-1 digest failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string version_string() { return std::string("sctx ") + SCTX_VERSION; }
std::string version_hash() { return git_blob_hash(version_string()); }

PreparedData prepare_data(const ExperimentConfig& config) {
  PreparedData d;
  load_texts(config, d);
  d.tokenizer.kind = config.tokenizer;
  if (config.tokenizer == TokenizerKind::bpe) {
    std::vector<std::string> words;
    for (const auto* side : {&d.train_text.source, &d.train_text.target}) {
      for (const auto& line : *side) {
        std::istringstream ss(line);
        std::string w;
        while (ss >> w) words.push_back(w);
      }
    }
    d.tokenizer.bpe = bpe_train(words, config.bpe_merges);
  }
  std::vector<Tokens> src, tgt;
  for (const auto& s : d.train_text.source) src.push_back(d.tokenizer.tokenize(s));
  for (const auto& s : d.train_text.target) tgt.push_back(d.tokenizer.tokenize(s));
  d.src_vocab = Vocab::build(src);
  d.tgt_vocab = Vocab::build(tgt);
  encode_splits(d);
  return d;
}

ModelConfig model_config(const ExperimentConfig& config, const PreparedData& data) {
  ModelConfig m = config.model;
  m.src_vocab = data.src_vocab.size();
  m.tgt_vocab = data.tgt_vocab.size();
  m.seed = config.seed;
  m.validate();
  return m;
}

RunSummary run_train(const ExperimentConfig& config, const std::string& dir) {
  fs::create_directories(dir);
  RunSummary summary;
  const bool resume = fs::exists(path_in(dir, "latest"));
  if (resume) {
    const ExperimentConfig saved = load_config(path_in(dir, "config.ini"));
    if (!saved.same_run(config)) {
      throw ConfigError("run directory " + dir + " was created with a different configuration");
    }
  }
  const PreparedData data = prepare_data(config);
  Seq2Seq<float> model(model_config(config, data));
  TrainOptions opts = config.train;
  opts.seed = config.seed;
  opts.dump_path = path_in(dir, "last-batch.txt");
  Trainer trainer(model, data.train, opts);

  std::size_t start = 0;
  double wall_offset = 0;
  std::vector<std::string> metrics, timing;
  if (resume) {
    start = read_latest(dir);
    trainer.resume(read_checkpoint(path_in(dir, checkpoint_name(start))));
    if (trainer.steps_done() != start) throw IoError("checkpoint step does not match 'latest'");
    metrics = lines_up_to(path_in(dir, "metrics.jsonl"), start);
    timing = lines_up_to(path_in(dir, "timing.jsonl"), start);
    // The interrupted run logged and evaluated its last step even off cadence;
    // an uninterrupted run would not have.
    auto off_cadence = [&](const std::string& line) {
      const json j = json::parse(line);
      if (j["step"].get<std::size_t>() != start) return false;
      const std::size_t every = j.contains("valid_accuracy") ? config.eval_every : opts.log_every;
      return every == 0 || start % every != 0;
    };
    if (start < config.train.steps) {
      std::erase_if(metrics, off_cadence);
      std::erase_if(timing, off_cadence);
    }
    if (!timing.empty()) wall_offset = json::parse(timing.back()).value("wall_seconds", 0.0);
    summary.resumed = true;
    summary.resumed_from = start;
    for (const auto& line : metrics) {
      const json j = json::parse(line);
      if (j.contains("valid_accuracy")) {
        summary.valid_accuracy = j["valid_accuracy"].get<double>();
        if (config.early_stop > 0 && j["step"].get<std::size_t>() == start && summary.valid_accuracy >= config.early_stop) {
          summary.stopped_early = true;
        }
      }
    }
  } else {
    write_file(path_in(dir, "config.ini"), config.to_ini());
    write_file(path_in(dir, "version.txt"), version_string() + "\n" + version_hash() + "\n");
    data.src_vocab.save(path_in(dir, "src.vocab"));
    data.tgt_vocab.save(path_in(dir, "tgt.vocab"));
    if (config.tokenizer == TokenizerKind::bpe) data.tokenizer.bpe.save(path_in(dir, "bpe.model"));
    fs::remove(path_in(dir, "metrics.jsonl"));
    fs::remove(path_in(dir, "timing.jsonl"));
  }

  std::ofstream metrics_out(path_in(dir, "metrics.jsonl"), std::ios::trunc);
  std::ofstream timing_out(path_in(dir, "timing.jsonl"), std::ios::trunc);
  for (const auto& l : metrics) metrics_out << l << "\n";
  for (const auto& l : timing) timing_out << l << "\n";
  metrics_out.flush();
  timing_out.flush();

  auto save = [&](std::size_t step) {
    write_checkpoint(path_in(dir, checkpoint_name(step)), trainer.checkpoint());
    write_file(path_in(dir, "latest"), std::to_string(step) + "\n");
  };
  if (!resume) save(0);

  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<Example> valid = data.valid;
  DecodeOptions greedy;
  greedy.max_len = config.decode.max_len;
  while (!summary.stopped_early && trainer.steps_done() < config.train.steps) {
    const LossPoint p = trainer.step();
    const bool last = p.step == config.train.steps;
    if ((opts.log_every && p.step % opts.log_every == 0) || last) {
      metrics_out << json{{"step", p.step}, {"loss", p.loss}, {"nll", p.nll}, {"lr", p.lr}}.dump() << "\n";
      const double wall = wall_offset + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      timing_out << json{{"step", p.step}, {"wall_seconds", wall}, {"steps_per_second", trainer.steps_per_second()}}.dump()
                 << "\n";
      metrics_out.flush();
      timing_out.flush();
    }
    if (config.eval_every && (p.step % config.eval_every == 0 || last)) {
      const Evaluation ev = evaluate(model, valid, data.tgt_vocab, greedy);
      summary.valid_accuracy = ev.report.token_accuracy;
      metrics_out << json{{"step", p.step}, {"valid_accuracy", ev.report.token_accuracy},
                          {"valid_bleu", ev.report.corpus_bleu}}.dump()
                  << "\n";
      metrics_out.flush();
      if (config.early_stop > 0 && ev.report.token_accuracy >= config.early_stop) summary.stopped_early = true;
    }
    if ((config.checkpoint_every && p.step % config.checkpoint_every == 0) || last || summary.stopped_early) {
      save(p.step);
    }
  }
  summary.steps = trainer.steps_done();
  summary.steps_per_second = trainer.steps_per_second();
  if (summary.steps_per_second == 0 && !timing.empty()) {
    summary.steps_per_second = json::parse(timing.back()).value("steps_per_second", 0.0);
  }
  return summary;
}

LoadedRun load_run(const std::string& dir) {
  if (!fs::exists(path_in(dir, "latest"))) throw IoError(dir + " holds no checkpoint");
  LoadedRun run;
  run.config = load_config(path_in(dir, "config.ini"));
  PreparedData& d = run.data;
  load_texts(run.config, d);
  d.tokenizer.kind = run.config.tokenizer;
  if (run.config.tokenizer == TokenizerKind::bpe) d.tokenizer.bpe = BpeModel::load(path_in(dir, "bpe.model"));
  d.src_vocab = Vocab::load(path_in(dir, "src.vocab"));
  d.tgt_vocab = Vocab::load(path_in(dir, "tgt.vocab"));
  encode_splits(d);
  run.model = std::make_unique<Seq2Seq<float>>(model_config(run.config, d));
  run.step = read_latest(dir);
  restore(run.model->params(), read_checkpoint(path_in(dir, checkpoint_name(run.step))));
  return run;
}

Evaluation run_eval(const std::string& dir, const std::optional<DecodeOptions>& decode) {
  LoadedRun run = load_run(dir);
  const DecodeOptions opts = decode.value_or(run.config.decode);
  Evaluation ev = evaluate(*run.model, run.data.test, run.data.tgt_vocab, opts);
  const std::string timing = path_in(dir, "timing.jsonl");
  if (fs::exists(timing)) {
    const auto lines = lines_up_to(timing, run.step);
    if (!lines.empty()) ev.report.train_steps_per_second = json::parse(lines.back()).value("steps_per_second", 0.0);
  }
  write_file(path_in(dir, "report.json"), ev.report.to_json() + "\n");
  std::vector<std::string> hyps;
  for (const auto& h : ev.hypotheses) hyps.push_back(run.data.tokenizer.detokenize(h));
  write_lines(path_in(dir, "hypotheses.txt"), hyps);
  return ev;
}

std::pair<std::string, Variant> ablation_row_spec(const std::string& name) {
  if (name == "base" || name == "vanilla") return {"base-toy", Variant::vanilla};
  if (name == "medium") return {"medium-toy", Variant::vanilla};
  const Variant v = parse_variant(name);
  return {"base-toy", v};
}

std::string AblationTable::to_csv() const {
  std::ostringstream os;
  os << "row,preset,variant,params,delta_params,train_steps_per_sec,decode_sents_per_sec,bleu,token_accuracy,steps,"
        "p_vs_base,p_vs_medium\n";
  auto opt = [](const std::optional<double>& p) { return p ? format_double(*p) : std::string(); };
  for (const auto& r : rows) {
    os << r.name << ',' << r.preset << ',' << to_string(r.variant) << ',' << r.parameters << ','
       << r.delta_parameters << ',' << format_double(r.train_steps_per_second) << ','
       << format_double(r.decode_sentences_per_second) << ',' << format_double(r.bleu) << ','
       << format_double(r.token_accuracy) << ',' << r.steps << ',' << opt(r.p_vs_base) << ',' << opt(r.p_vs_medium)
       << '\n';
  }
  return os.str();
}

std::string AblationTable::to_text() const {
  std::ostringstream os;
  os << std::left << std::setw(14) << "row" << std::right << std::setw(10) << "params" << std::setw(10) << "delta"
     << std::setw(9) << "train/s" << std::setw(10) << "decode/s" << std::setw(8) << "BLEU" << std::setw(8) << "acc"
     << std::setw(7) << "steps" << std::setw(9) << "p(base)" << std::setw(9) << "p(med)" << "\n";
  auto mark = [](const std::optional<double>& p) {
    if (!p) return std::string("-");
    std::ostringstream s;
    s << std::fixed << std::setprecision(3) << *p << (*p < 0.01 ? "**" : *p < 0.05 ? "*" : "");
    return s.str();
  };
  for (const auto& r : rows) {
    std::string delta = (r.delta_parameters >= 0 ? "+" : "") + std::to_string(r.delta_parameters);
    os << std::left << std::setw(14) << r.name << std::right << std::setw(10) << r.parameters << std::setw(10)
       << delta << std::fixed << std::setprecision(1) << std::setw(9) << r.train_steps_per_second << std::setw(10)
       << r.decode_sentences_per_second << std::setprecision(2) << std::setw(8) << r.bleu << std::setprecision(4)
       << std::setw(8) << r.token_accuracy << std::setw(7) << r.steps << std::setw(9) << mark(r.p_vs_base)
       << std::setw(9) << mark(r.p_vs_medium) << "\n";
  }
  os << "p: one-sided paired bootstrap on corpus BLEU, row better than base / medium; * p<0.05, ** p<0.01\n";
  return os.str();
}

AblationTable run_ablation(const ExperimentConfig& config, const std::string& dir) {
  fs::create_directories(dir);
  const std::size_t n = config.ablation_rows.size();
  std::vector<ExperimentConfig> configs;
  AblationTable table;
  std::vector<bool> medium(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& name = config.ablation_rows[i];
    const auto [preset, variant] = ablation_row_spec(name);
    medium[i] = preset == "medium-toy";
    ExperimentConfig c = config;
    c.model.variant = variant;
    if (medium[i]) c.model.d_ff_dec = 3 * config.model.d_ff_dec;
    c.out = path_in(dir, name);
    configs.push_back(c);
    AblationRow row;
    row.name = name;
    // medium-toy is base-toy with a 3x decoder feed-forward; other presets get the same widening
    row.preset = !medium[i] ? config.preset : config.preset == "base-toy" ? "medium-toy" : config.preset + "+ffn3x";
    row.variant = variant;
    table.rows.push_back(row);
  }

  std::vector<Evaluation> evals(n);
  std::vector<std::size_t> steps(n);
  std::vector<double> train_speed(n);
  auto run_one = [&](std::size_t i) {
    const RunSummary s = run_train(configs[i], configs[i].out);
    evals[i] = run_eval(configs[i].out);
    steps[i] = s.steps;
    train_speed[i] = evals[i].report.train_steps_per_second;
  };

  std::size_t threads = 1;
  if (config.parallel) {
    threads = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SCTX_THREADS")) {
      try {
        threads = std::max<std::size_t>(1, to_size(env));
      } catch (const ConfigError&) {
        throw ConfigError(std::string("SCTX_THREADS must be a positive integer, got '") + env + "'");
      }
    }
    threads = std::min(threads, n);
  }
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            run_one(i);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
  }

  // Parameter deltas are against the base configuration whether or not it is a row.
  const PreparedData data = prepare_data(config);
  ModelConfig base = model_config(config, data);
  base.variant = Variant::vanilla;
  const long long base_params = static_cast<long long>(count_parameters(base).total);

  std::optional<std::size_t> base_row, medium_row;
  for (std::size_t i = 0; i < n; ++i) {
    if (table.rows[i].variant != Variant::vanilla) continue;
    (medium[i] ? medium_row : base_row) = i;
  }
  for (std::size_t i = 0; i < n; ++i) {
    AblationRow& r = table.rows[i];
    r.parameters = evals[i].report.parameters;
    r.delta_parameters = static_cast<long long>(r.parameters) - base_params;
    r.train_steps_per_second = train_speed[i];
    r.decode_sentences_per_second = evals[i].report.decode_sentences_per_second;
    r.bleu = evals[i].report.corpus_bleu;
    r.token_accuracy = evals[i].report.token_accuracy;
    r.steps = steps[i];
    if (base_row && *base_row != i) {
      r.p_vs_base = bootstrap_test(evals[*base_row].stats, evals[i].stats, config.resamples, config.seed);
    }
    if (medium_row && *medium_row != i) {
      r.p_vs_medium = bootstrap_test(evals[*medium_row].stats, evals[i].stats, config.resamples, config.seed);
    }
  }
  write_file(path_in(dir, "results.csv"), table.to_csv());
  write_file(path_in(dir, "results.txt"), table.to_text());
  return table;
}

ProbingGrid run_probe(const std::string& dir, const std::optional<ProbingSuiteOptions>& options) {
  LoadedRun run = load_run(dir);
  const ProbingSuiteOptions opts = options.value_or(run.config.probe);
  const ProbingGrid grid = probing_suite(*run.model, run.data.src_vocab, opts);
  write_file(path_in(dir, "probe.csv"), grid.to_csv());
  json j = json::array();
  for (std::size_t e = 0; e < grid.extractors.size(); ++e) {
    for (std::size_t t = 0; t < grid.tasks.size(); ++t) {
      const ProbeResult& r = grid.cells[e][t];
      j.push_back({{"extractor", to_string(grid.extractors[e])},
                   {"task", to_string(grid.tasks[t])},
                   {"accuracy", r.accuracy},
                   {"majority_baseline", r.majority_baseline},
                   {"valid_accuracy", r.valid_accuracy},
                   {"classes", r.classes},
                   {"train", r.train},
                   {"valid", r.valid},
                   {"test", r.test}});
    }
  }
  write_file(path_in(dir, "probe.json"), j.dump(2) + "\n");
  return grid;
}

void gen_data(const ExperimentConfig& config, const std::string& dir) {
  fs::create_directories(dir);
  PreparedData d;
  load_texts(config, d);
  write_parallel(d.train_text, path_in(dir, "train.src"), path_in(dir, "train.tgt"));
  write_parallel(d.valid_text, path_in(dir, "valid.src"), path_in(dir, "valid.tgt"));
  write_parallel(d.test_text, path_in(dir, "test.src"), path_in(dir, "test.tgt"));
}

std::vector<GradientSuiteEntry> gradient_suite(std::size_t seeds, const GradCheckOptions& options) {
  std::vector<GradientSuiteEntry> out;
  for (Variant v : all_variants()) {
    for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
      ModelConfig c = model_preset("grad-toy");
      c.variant = v;
      c.seed = seed;
      Seq2Seq<double> model(c);
      // Fusion output weights start at zero, which zeroes every gradient
      // upstream of them; check at a generic point instead.
      Rng jitter(Rng::derive(seed, 0x7177));
      for (std::size_t i = 0; i < model.params().size(); ++i) {
        for (auto& v : model.params()[i].value.storage()) v += jitter.uniform(-0.1, 0.1);
      }
      // Two sentences, the second one padded on both sides.
      Rng rng(Rng::derive(seed, 0x96ad));
      const std::size_t B = 2, T = 4, U = 3;
      IdTensor src({B, T}), tgt_in({B, U}), tgt_out({B, U});
      BoolTensor src_mask({B, T}, 1), tgt_mask({B, U}, 1);
      auto draw = [&] { return static_cast<std::int32_t>(4 + rng.below(c.src_vocab - 4)); };
      for (auto& x : src.storage()) x = draw();
      for (auto& x : tgt_in.storage()) x = draw();
      for (auto& x : tgt_out.storage()) x = draw();
      src_mask(1, T - 1) = 0;
      src(1, T - 1) = Vocab::pad;
      tgt_mask(1, U - 1) = 0;
      const auto t0 = std::chrono::steady_clock::now();
      GradientSuiteEntry e;
      e.variant = v;
      e.seed = seed;
      e.report = grad_check(
          [&](Tape<double>& tape) { return model.loss(tape, src, src_mask, tgt_in, tgt_out, tgt_mask, 0.1); },
          model.params(), options);
      e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out.push_back(std::move(e));
    }
  }
  return out;
}

}  // namespace sctx
