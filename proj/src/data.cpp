#include "sctx/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>

#include "sctx/errors.hpp"
#include "sctx/rng.hpp"

namespace sctx {

Vocab::Vocab() {
  for (const char* t : {"<pad>", "<s>", "</s>", "<unk>"}) add(t);
}

Vocab Vocab::build(const std::vector<Tokens>& sentences) {
  std::vector<std::string> all;
  for (const auto& s : sentences) all.insert(all.end(), s.begin(), s.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  Vocab v;
  for (const auto& t : all) v.add(t);
  return v;
}

std::int32_t Vocab::add(const std::string& token) {
  if (token.find('\n') != std::string::npos) throw InputError("vocab token contains a newline");
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const auto id = static_cast<std::int32_t>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

std::int32_t Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? unk : it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocab::encode(const Tokens& tokens) const {
  std::vector<std::int32_t> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

Tokens Vocab::decode(const std::vector<std::int32_t>& ids) const {
  Tokens out;
  for (std::int32_t i : ids) {
    if (i == eos) break;
    if (i == bos || i == pad) continue;
    out.push_back(token(i));
  }
  return out;
}

void Vocab::save(const std::string& path) const { write_lines(path, tokens_); }

Vocab Vocab::load(const std::string& path) {
  const auto lines = read_lines(path);
  Vocab v;
  if (lines.size() < 4 || !std::equal(v.tokens_.begin(), v.tokens_.end(), lines.begin())) {
    throw InputError(path + ": vocabulary does not start with the reserved tokens");
  }
  for (std::size_t i = 4; i < lines.size(); ++i) {
    if (v.contains(lines[i])) throw InputError(path + ": duplicate token on line " + std::to_string(i + 1));
    v.add(lines[i]);
  }
  return v;
}

Tokens split_chars(const std::string& line) {
  Tokens out;
  for (std::size_t i = 0; i < line.size();) {
    const auto lead = static_cast<unsigned char>(line[i]);
    std::size_t n = 1;
    if (lead >= 0xF0) n = 4;
    else if (lead >= 0xE0) n = 3;
    else if (lead >= 0xC0) n = 2;
    n = std::min(n, line.size() - i);
    out.push_back(line.substr(i, n));
    i += n;
  }
  return out;
}

std::string join_tokens(const Tokens& tokens) {
  std::string out;
  for (const auto& t : tokens) out += t;
  return out;
}

void BpeModel::save(const std::string& path) const {
  std::vector<std::string> lines;
  for (const auto& [a, b] : merges) lines.push_back(a + " " + b);
  write_lines(path, lines);
}

BpeModel BpeModel::load(const std::string& path) {
  BpeModel m;
  std::size_t n = 0;
  for (const auto& line : read_lines(path)) {
    ++n;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() || line.find(' ', sp + 1) != std::string::npos) {
      throw InputError(path + ": line " + std::to_string(n) + " is not a 'left right' merge pair");
    }
    m.merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return m;
}

namespace {

void merge_in_place(Tokens& symbols, const std::string& left, const std::string& right) {
  if (symbols.size() < 2) return;
  Tokens out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size();) {
    if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
      out.push_back(left + right);
      i += 2;
    } else {
      out.push_back(symbols[i]);
      ++i;
    }
  }
  symbols = std::move(out);
}

}  // namespace

BpeModel bpe_train(const std::vector<std::string>& words, std::size_t merges) {
  if (words.empty()) throw InputError("bpe_train: empty corpus");
  std::map<std::string, std::size_t> freq;
  for (const auto& w : words) {
    if (!w.empty()) ++freq[w];
  }
  std::vector<std::pair<Tokens, std::size_t>> vocab;
  for (const auto& [w, n] : freq) vocab.emplace_back(split_chars(w), n);

  BpeModel model;
  while (model.merges.size() < merges) {
    std::map<std::pair<std::string, std::string>, std::size_t> pairs;
    for (const auto& [symbols, n] : vocab) {
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) pairs[{symbols[i], symbols[i + 1]}] += n;
    }
    if (pairs.empty()) break;
    // std::map iterates in lexicographic order, so strict > keeps the smallest pair on ties.
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const auto [left, right] = best->first;
    for (auto& entry : vocab) merge_in_place(entry.first, left, right);
    model.merges.emplace_back(left, right);
  }
  return model;
}

Tokens bpe_apply(const BpeModel& model, const std::string& word) {
  Tokens symbols = split_chars(word);
  for (const auto& [left, right] : model.merges) merge_in_place(symbols, left, right);
  return symbols;
}

std::string bpe_detok(const Tokens& subwords) { return join_tokens(subwords); }

namespace {

constexpr const char* kContinuation = "@@";

}  // namespace

Tokens bpe_encode_sentence(const BpeModel& model, const std::string& line) {
  Tokens out;
  std::size_t start = 0;
  while (start <= line.size()) {
    std::size_t end = line.find(' ', start);
    if (end == std::string::npos) end = line.size();
    if (end > start) {
      Tokens pieces = bpe_apply(model, line.substr(start, end - start));
      for (std::size_t i = 0; i + 1 < pieces.size(); ++i) pieces[i] += kContinuation;
      out.insert(out.end(), pieces.begin(), pieces.end());
    }
    start = end + 1;
  }
  return out;
}

std::string bpe_decode_sentence(const Tokens& tokens) {
  std::string out;
  bool word_open = false;
  for (const auto& t : tokens) {
    if (!word_open && !out.empty()) out += ' ';
    const bool continues = t.size() >= 2 && t.compare(t.size() - 2, 2, kContinuation) == 0;
    out += continues ? t.substr(0, t.size() - 2) : t;
    word_open = continues;
  }
  return out;
}

TokenizerKind parse_tokenizer(const std::string& name) {
  if (name == "char" || name == "chars") return TokenizerKind::chars;
  if (name == "bpe") return TokenizerKind::bpe;
  throw ConfigError("unknown tokenizer '" + name + "' (expected char or bpe)");
}

Tokens Tokenizer::tokenize(const std::string& line) const {
  return kind == TokenizerKind::chars ? split_chars(line) : bpe_encode_sentence(bpe, line);
}

std::string Tokenizer::detokenize(const Tokens& tokens) const {
  return kind == TokenizerKind::chars ? join_tokens(tokens) : bpe_decode_sentence(tokens);
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::lexicon_translate: return "lexicon-translate";
  }
  return "?";
}

TaskKind parse_task(const std::string& name) {
  if (name == "copy") return TaskKind::copy;
  if (name == "reverse") return TaskKind::reverse;
  if (name == "lexicon-translate") return TaskKind::lexicon_translate;
  throw ConfigError("unknown task '" + name + "' (expected copy, reverse or lexicon-translate)");
}

namespace {

void check_options(const TaskOptions& o) {
  if (o.alphabet < 2 || o.alphabet > 26) throw ConfigError("task alphabet must hold 2..26 symbols");
  if (o.min_len == 0 || o.min_len > o.max_len) throw ConfigError("task lengths need 1 <= min_len <= max_len");
  if (o.class_size >= o.alphabet) throw ConfigError("task class_size must be smaller than the alphabet");
}

// Fixed lexicon: source symbol i -> upper-case letter perm[i].
std::vector<std::size_t> lexicon(const TaskOptions& o) {
  std::vector<std::size_t> perm(o.alphabet);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(Rng::derive(0x1e8c, o.alphabet));
  rng.shuffle(perm);
  return perm;
}

bool in_class(char source_symbol, const TaskOptions& o) {
  return static_cast<std::size_t>(source_symbol - 'a') < o.class_size;
}

std::size_t source_index(char c, const TaskOptions& o) {
  const auto i = static_cast<std::size_t>(c - 'a');
  if (c < 'a' || i >= o.alphabet) throw InputError(std::string("symbol '") + c + "' is not in the task alphabet");
  return i;
}

}  // namespace

std::string lexicon_forward(const std::string& source, const TaskOptions& options) {
  check_options(options);
  const auto perm = lexicon(options);
  std::string out;
  for (char c : source) out += static_cast<char>('A' + perm[source_index(c, options)]);
  for (std::size_t i = 0; i + 1 < source.size();) {
    if (in_class(source[i], options)) {
      std::swap(out[i], out[i + 1]);
      i += 2;
    } else {
      ++i;
    }
  }
  return out;
}

std::string lexicon_inverse(const std::string& target, const TaskOptions& options) {
  check_options(options);
  const auto perm = lexicon(options);
  std::vector<char> inverse(26, '?');
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = static_cast<char>('a' + i);
  std::string out;
  for (char c : target) {
    const auto i = static_cast<std::size_t>(c - 'A');
    if (c < 'A' || i >= 26 || inverse[i] == '?') {
      throw InputError(std::string("symbol '") + c + "' is not in the target lexicon");
    }
    out += inverse[i];
  }
  // Trigger symbols always sit right after their swap partner in the target.
  for (std::size_t i = 0; i + 1 < out.size();) {
    if (in_class(out[i + 1], options)) {
      std::swap(out[i], out[i + 1]);
      i += 2;
    } else {
      ++i;
    }
  }
  return out;
}

ParallelCorpus gen_task(TaskKind kind, std::size_t size, std::uint64_t seed, const TaskOptions& options) {
  check_options(options);
  Rng rng(Rng::derive(seed, 0x7a5c));
  ParallelCorpus corpus;
  corpus.source.reserve(size);
  corpus.target.reserve(size);
  const std::size_t plain = options.alphabet - options.class_size;
  for (std::size_t n = 0; n < size; ++n) {
    const std::size_t len = options.min_len + rng.below(options.max_len - options.min_len + 1);
    std::string s;
    for (std::size_t p = 0; p < len; ++p) {
      const bool trigger_allowed = kind == TaskKind::lexicon_translate ? p + 1 < len && (p == 0 || !in_class(s.back(), options)) : true;
      const std::size_t pick = trigger_allowed ? rng.below(options.alphabet) : options.class_size + rng.below(plain);
      s += static_cast<char>('a' + pick);
    }
    std::string t;
    switch (kind) {
      case TaskKind::copy: t = s; break;
      case TaskKind::reverse: t.assign(s.rbegin(), s.rend()); break;
      case TaskKind::lexicon_translate: t = lexicon_forward(s, options); break;
    }
    corpus.source.push_back(std::move(s));
    corpus.target.push_back(std::move(t));
  }
  return corpus;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw IoError("write failed: " + path);
}

ParallelCorpus read_parallel(const std::string& source_path, const std::string& target_path) {
  ParallelCorpus c{read_lines(source_path), read_lines(target_path)};
  if (c.source.size() != c.target.size()) {
    throw InputError("parallel files differ in line count: " + source_path + " has " +
                     std::to_string(c.source.size()) + ", " + target_path + " has " + std::to_string(c.target.size()));
  }
  return c;
}

void write_parallel(const ParallelCorpus& corpus, const std::string& source_path, const std::string& target_path) {
  write_lines(source_path, corpus.source);
  write_lines(target_path, corpus.target);
}

std::vector<Example> encode_corpus(const ParallelCorpus& corpus, const Tokenizer& tokenizer, const Vocab& src_vocab,
                                   const Vocab& tgt_vocab) {
  std::vector<Example> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    out.push_back({src_vocab.encode(tokenizer.tokenize(corpus.source[i])),
                   tgt_vocab.encode(tokenizer.tokenize(corpus.target[i]))});
  }
  return out;
}

IdTensor Batch::decoder_input() const {
  const std::size_t B = tgt.dim(0), T = tgt.dim(1) - 1;
  IdTensor out({B, T});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) out(b, t) = tgt(b, t);
  }
  return out;
}

IdTensor Batch::decoder_target() const {
  const std::size_t B = tgt.dim(0), T = tgt.dim(1) - 1;
  IdTensor out({B, T});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) out(b, t) = tgt(b, t + 1);
  }
  return out;
}

BoolTensor Batch::decoder_target_mask() const {
  const std::size_t B = tgt.dim(0), T = tgt.dim(1) - 1;
  BoolTensor out({B, T});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) out(b, t) = tgt_mask(b, t + 1);
  }
  return out;
}

Batch make_batch(const std::vector<Example>& examples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw InputError("make_batch: no examples");
  std::size_t ts = 0, tt = 0;
  for (std::size_t i : indices) {
    ts = std::max(ts, examples.at(i).source.size());
    tt = std::max(tt, examples.at(i).target.size());
  }
  if (ts == 0) throw InputError("make_batch: every source sentence is empty");
  const std::size_t B = indices.size();
  Batch batch;
  batch.src = IdTensor({B, ts}, Vocab::pad);
  batch.src_mask = BoolTensor({B, ts}, 0);
  batch.tgt = IdTensor({B, tt + 2}, Vocab::pad);
  batch.tgt_mask = BoolTensor({B, tt + 2}, 0);
  batch.indices = indices;
  for (std::size_t r = 0; r < B; ++r) {
    const Example& e = examples[indices[r]];
    for (std::size_t t = 0; t < e.source.size(); ++t) {
      batch.src(r, t) = e.source[t];
      batch.src_mask(r, t) = 1;
    }
    batch.tgt(r, 0) = Vocab::bos;
    for (std::size_t t = 0; t < e.target.size(); ++t) batch.tgt(r, t + 1) = e.target[t];
    batch.tgt(r, e.target.size() + 1) = Vocab::eos;
    for (std::size_t t = 0; t < e.target.size() + 2; ++t) batch.tgt_mask(r, t) = 1;
  }
  return batch;
}

std::vector<Batch> make_batches(const std::vector<Example>& examples, std::size_t batch_size, std::size_t max_len,
                                std::uint64_t seed, BatchStats* stats) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  BatchStats local;
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const Example& e = examples[i];
    if (e.source.empty() || e.source.size() > max_len || e.target.size() > max_len) {
      ++local.dropped;
    } else {
      order.push_back(i);
    }
  }
  local.kept = order.size();
  if (stats) *stats = local;

  Rng rng(Rng::derive(seed, 0xba7c));
  rng.shuffle(order);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto la = std::make_pair(examples[a].source.size(), examples[a].target.size());
    const auto lb = std::make_pair(examples[b].source.size(), examples[b].target.size());
    return la < lb;
  });
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    batches.push_back(make_batch(examples, {order.begin() + static_cast<std::ptrdiff_t>(start),
                                            order.begin() + static_cast<std::ptrdiff_t>(end)}));
  }
  rng.shuffle(batches);
  return batches;
}

}  // namespace sctx
