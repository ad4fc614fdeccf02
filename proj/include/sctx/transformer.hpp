#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sctx/config.hpp"
#include "sctx/context.hpp"
#include "sctx/encoder_output.hpp"
#include "sctx/layers.hpp"

namespace sctx {

/// Incremental decoding state for one batch of hypotheses.
template <typename T>
struct DecoderState {
  EncoderOutput<T> enc;
  std::vector<Var<T>> memory_keys, memory_values;  // per layer, [B, T, d]
  std::vector<Var<T>> self_keys, self_values;      // per layer, [B, i, d]
  std::vector<Var<T>> last_output;                 // per layer, [B, d]: d^l at step i-1
  Var<T> context;                                  // static variants: [B, d]
  Var<T> layer_stack;                              // deep-tam: G as [B, L, d]
  std::vector<Tensor<T>> beta;                     // deep-tam: weights of the latest step, per layer
  std::size_t step = 0;
  std::size_t batch = 0;
};

/// Options for one forward pass. A non-null rng enables dropout.
struct ForwardOptions {
  Rng* rng = nullptr;
};

/// Post-norm Transformer encoder-decoder with sentential-context hooks.
/// Target embeddings double as the output projection.
template <typename T>
class Seq2Seq {
 public:
  explicit Seq2Seq(const ModelConfig& config);
  Seq2Seq(const Seq2Seq&) = delete;
  Seq2Seq& operator=(const Seq2Seq&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }
  const ContextProvider<T>& context() const { return *context_; }

  /// src and mask are [B, T]; returns H^0..H^L.
  EncoderOutput<T> encode(Tape<T>& tape, const IdTensor& src, const BoolTensor& src_mask,
                          const ForwardOptions& opts = {}) const;

  /// Teacher-forced decoder: target input [B, T'] -> logits [B, T', V].
  Var<T> decode_teacher_forced(Tape<T>& tape, const EncoderOutput<T>& enc, const IdTensor& tgt_in,
                               const ForwardOptions& opts = {},
                               std::vector<std::vector<Tensor<T>>>* beta_trace = nullptr) const;

  Var<T> forward(Tape<T>& tape, const IdTensor& src, const BoolTensor& src_mask, const IdTensor& tgt_in,
                 const ForwardOptions& opts = {}) const;

  /// Mean label-smoothed cross-entropy over target positions where tgt_mask is set.
  Var<T> loss(Tape<T>& tape, const IdTensor& src, const BoolTensor& src_mask, const IdTensor& tgt_in,
              const IdTensor& tgt_out, const BoolTensor& tgt_mask, T smoothing, const ForwardOptions& opts = {}) const;

  DecoderState<T> start_decoding(Tape<T>& tape, const EncoderOutput<T>& enc) const;

  /// Feeds one token per row and returns next-token logits [B, V].
  Var<T> decode_step(Tape<T>& tape, DecoderState<T>& state, const std::vector<std::int32_t>& prev_tokens,
                     const ForwardOptions& opts = {}) const;

  /// Keeps rows `rows` of every cached tensor (beam search).
  void reorder(DecoderState<T>& state, const std::vector<std::size_t>& rows) const;

  /// Copies parameter values by name from a model of any precision.
  template <typename U>
  void load_from(const Seq2Seq<U>& other) {
    for (std::size_t i = 0; i < other.params().size(); ++i) {
      const auto& src = other.params()[i];
      params_.get(src.name).value = src.value.template cast<T>();
    }
  }

 private:
  struct AttentionParams {
    Linear<T> q, k, v, o;
  };
  struct EncoderLayer {
    AttentionParams self;
    LayerNormParams<T> ln1;
    FeedForward<T> ffn;
    LayerNormParams<T> ln2;
  };
  struct DecoderLayer {
    AttentionParams self;
    LayerNormParams<T> ln1;
    AttentionParams cross;
    LayerNormParams<T> ln2;
    FeedForward<T> ffn;
    LayerNormParams<T> ln3;
  };
  struct LayerCache {
    Var<T> keys, values;
  };

  AttentionParams make_attention(const std::string& name, Rng& rng);
  Var<T> embed(Tape<T>& tape, Parameter<T>& table, const IdTensor& ids, std::size_t first_position,
               const Dropout<T>& drop) const;
  Var<T> project_out(Tape<T>& tape, const AttentionParams& p, const Var<T>& mixed) const;
  Var<T> decoder_layer_full(Tape<T>& tape, std::size_t l, const Var<T>& x, const Var<T>& mem_k, const Var<T>& mem_v,
                            const BoolTensor& src_mask, const Dropout<T>& drop) const;
  Var<T> decoder_layer_step(Tape<T>& tape, std::size_t l, const Var<T>& x, LayerCache& cache, const Var<T>& mem_k,
                            const Var<T>& mem_v, const BoolTensor& src_mask, const Dropout<T>& drop) const;
  Var<T> logits(Tape<T>& tape, const Var<T>& states) const;
  Dropout<T> dropout_for(const ForwardOptions& opts) const;

  ModelConfig config_;
  ParameterStore<T> params_;
  Parameter<T>* src_embedding_ = nullptr;
  Parameter<T>* tgt_embedding_ = nullptr;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  std::optional<ContextProvider<T>> context_;  // registered after the base parameters
  Tensor<T> positions_;  // sinusoidal table [max_len, d]
};

/// Parameter totals grouped by component: "embeddings", "encoder",
/// "decoder", "context.fusion", "context.global", "context.deep".
struct ParameterCount {
  std::map<std::string, std::size_t> components;
  std::size_t total = 0;
};

/// Closed-form count from the configuration alone.
ParameterCount count_parameters(const ModelConfig& config);

/// Walks an instantiated registry and groups by parameter name.
template <typename T>
ParameterCount count_registered(const ParameterStore<T>& store);

/// total(config) - total(config with the vanilla variant).
long long parameter_delta(const ModelConfig& config);

}  // namespace sctx
