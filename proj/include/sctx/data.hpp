#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sctx/tensor.hpp"

namespace sctx {

using Tokens = std::vector<std::string>;

/// Token <-> id bijection with four reserved ids.
class Vocab {
 public:
  static constexpr std::int32_t pad = 0;
  static constexpr std::int32_t bos = 1;
  static constexpr std::int32_t eos = 2;
  static constexpr std::int32_t unk = 3;

  Vocab();

  /// Reserved tokens followed by every distinct token, sorted.
  static Vocab build(const std::vector<Tokens>& sentences);

  std::int32_t add(const std::string& token);
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  /// Unknown tokens map to unk.
  std::int32_t id(const std::string& token) const;
  const std::string& token(std::int32_t id) const;
  std::size_t size() const { return tokens_.size(); }

  std::vector<std::int32_t> encode(const Tokens& tokens) const;
  /// Drops bos/pad and stops at the first eos.
  Tokens decode(const std::vector<std::int32_t>& ids) const;

  /// One token per line; line number == id.
  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

/// Splits a UTF-8 line into code points.
Tokens split_chars(const std::string& line);
std::string join_tokens(const Tokens& tokens);

struct BpeModel {
  std::vector<std::pair<std::string, std::string>> merges;

  std::size_t size() const { return merges.size(); }
  /// One merge per line: "left right".
  void save(const std::string& path) const;
  static BpeModel load(const std::string& path);
  bool operator==(const BpeModel&) const = default;
};

/// Learns up to `merges` merges from a word list (with repetition). The most
/// frequent adjacent pair is merged first; ties go to the lexicographically
/// smallest pair. Stops early when no pair is left.
BpeModel bpe_train(const std::vector<std::string>& words, std::size_t merges);
/// Segments one word by replaying the merges in order.
Tokens bpe_apply(const BpeModel& model, const std::string& word);
std::string bpe_detok(const Tokens& subwords);

/// Sentence-level BPE: words are split on spaces and every subword except
/// the last of its word carries the "@@" continuation marker.
Tokens bpe_encode_sentence(const BpeModel& model, const std::string& line);
std::string bpe_decode_sentence(const Tokens& tokens);

enum class TokenizerKind { chars, bpe };
TokenizerKind parse_tokenizer(const std::string& name);

/// Character-level by default; BPE needs a trained model.
struct Tokenizer {
  TokenizerKind kind = TokenizerKind::chars;
  BpeModel bpe;

  Tokens tokenize(const std::string& line) const;
  std::string detokenize(const Tokens& tokens) const;
};

enum class TaskKind { copy, reverse, lexicon_translate };
std::string to_string(TaskKind kind);
TaskKind parse_task(const std::string& name);

struct TaskOptions {
  std::size_t alphabet = 20;  // source symbols 'a', 'b', ...
  std::size_t min_len = 1;
  std::size_t max_len = 12;
  std::size_t class_size = 5;  // lexicon-translate: the first symbols trigger a swap
};

struct ParallelCorpus {
  std::vector<std::string> source;
  std::vector<std::string> target;

  std::size_t size() const { return source.size(); }
  bool operator==(const ParallelCorpus&) const = default;
};

/// Synthetic character-level corpus.
///   copy:     target == source
///   reverse:  target == reversed source
///   lexicon-translate: each symbol goes through a fixed bijective lexicon
///     (onto upper-case letters), then every adjacent pair whose first source
///     symbol is in the trigger class is swapped, left to right. Sources never
///     end in a trigger symbol and never contain two in a row, which makes
///     the reordering invertible.
ParallelCorpus gen_task(TaskKind kind, std::size_t size, std::uint64_t seed, const TaskOptions& options = {});

/// Lexicon-translate pieces, exposed for the inverse oracle.
std::string lexicon_forward(const std::string& source, const TaskOptions& options = {});
std::string lexicon_inverse(const std::string& target, const TaskOptions& options = {});

std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, const std::vector<std::string>& lines);
/// Parallel files must have equal line counts.
ParallelCorpus read_parallel(const std::string& source_path, const std::string& target_path);
void write_parallel(const ParallelCorpus& corpus, const std::string& source_path, const std::string& target_path);

struct Example {
  std::vector<std::int32_t> source;  // no framing
  std::vector<std::int32_t> target;  // no framing
};

std::vector<Example> encode_corpus(const ParallelCorpus& corpus, const Tokenizer& tokenizer, const Vocab& src_vocab,
                                   const Vocab& tgt_vocab);

struct Batch {
  IdTensor src;         // [B, T]
  BoolTensor src_mask;  // [B, T]
  IdTensor tgt;         // [B, T' + 2]: bos ... eos, then padding
  BoolTensor tgt_mask;  // [B, T' + 2]
  std::vector<std::size_t> indices;  // rows -> example indices

  std::size_t size() const { return indices.size(); }
  /// Decoder input: tgt without its last column.
  IdTensor decoder_input() const;
  /// Decoder targets: tgt without bos, with the matching mask.
  IdTensor decoder_target() const;
  BoolTensor decoder_target_mask() const;
};

struct BatchStats {
  std::size_t dropped = 0;  // longer than max_len, or empty
  std::size_t kept = 0;
};

/// Builds one padded batch from the listed examples, in order.
Batch make_batch(const std::vector<Example>& examples, const std::vector<std::size_t>& indices);

/// Seeded shuffle, then a stable sort by length so batches hold sentences of
/// similar length, then a seeded shuffle of the batch order. Sentences
/// longer than max_len (either side) are dropped and counted.
std::vector<Batch> make_batches(const std::vector<Example>& examples, std::size_t batch_size, std::size_t max_len,
                                std::uint64_t seed, BatchStats* stats = nullptr);

}  // namespace sctx
