#pragma once

#include <optional>
#include <vector>

#include "sctx/config.hpp"
#include "sctx/encoder_output.hpp"
#include "sctx/layers.hpp"

namespace sctx {

/// Sentential context for the decoder.
///
/// Shallow variants summarize the top encoder layer with Global(.) (mean,
/// max or attentive pooling). Deep variants summarize every encoder layer
/// into G = [g^1..g^L] and aggregate it, either with a GRU run over the
/// layers (deep-rnn, one vector per sentence) or with transparent attention
/// conditioned on the decoder (deep-tam, one vector per step and decoder
/// layer). The result is injected into each decoder layer input by a
/// per-layer fusion network:
///
///   fuse(D, g) = LayerNorm(D + W2 relu(W1 [D ; g] + b1) + b2)
///
/// W2 and b2 start at zero, so an untrained fusion is LayerNorm(D).
///
/// Attentive pooling takes its query from max_pool(H^0), shared across
/// layers, with per-layer key/value projections and a shared output
/// projection. All context parameters live under "ctx." and
/// "dec.<l>.fuse." in the parameter store; vanilla registers none.
template <typename T>
class ContextProvider {
 public:
  ContextProvider(const ModelConfig& config, ParameterStore<T>& store, Rng& rng);

  Variant variant() const { return variant_; }
  bool enabled() const { return variant_ != Variant::vanilla; }
  /// True for deep-tam: the context changes with every decoding step.
  bool dynamic() const { return variant_ == Variant::deep_tam; }

  /// Global(H^layer) for 1 <= layer <= L: [B, d].
  Var<T> global(Tape<T>& tape, const EncoderOutput<T>& enc, std::size_t layer) const;

  /// [g^1, ..., g^L], each [B, d].
  std::vector<Var<T>> summarize_layers(Tape<T>& tape, const EncoderOutput<T>& enc) const;
  /// The same summaries stacked to [B, L, d].
  Var<T> stack(const std::vector<Var<T>>& summaries) const;

  /// GRU over g^1..g^L starting from a projection of max_pool(H^0); returns
  /// the last state.
  Var<T> deep_rnn(Tape<T>& tape, const std::vector<Var<T>>& summaries, const EncoderOutput<T>& enc) const;

  /// Transparent attention for decoder layer `dec_layer` (1-based):
  /// beta = softmax(q(d_prev) . k(g^k) / sqrt(d)), g = sum_k beta_k g^k.
  /// `stacked` is [B, L, d], `d_prev` is [B, d]. beta, if requested, is [B, L].
  Var<T> deep_tam(Tape<T>& tape, const Var<T>& stacked, const Var<T>& d_prev, std::size_t dec_layer,
                  Tensor<T>* beta = nullptr) const;

  /// Learned conditioning state used at the first decoding step: [B, d].
  Var<T> tam_start(Tape<T>& tape, std::size_t dec_layer, std::size_t batch) const;

  /// One context vector per sentence for the static variants: [B, d].
  Var<T> sentence_vector(Tape<T>& tape, const EncoderOutput<T>& enc) const;

  /// D [B, T', d], g [B, d] -> [B, T', d].
  Var<T> fuse(Tape<T>& tape, const Var<T>& decoder_input, const Var<T>& context, std::size_t dec_layer,
              const Dropout<T>& drop) const;

 private:
  struct TamParams {
    Linear<T> query;
    Linear<T> key;
    Parameter<T>* start = nullptr;
  };
  struct FusionParams {
    FeedForward<T> ffn;
    LayerNormParams<T> norm;
  };
  struct GruParams {
    Linear<T> input;   // [d, 3d], gate order: update | reset | candidate
    Linear<T> hidden;  // [d, 3d]
    Linear<T> init;    // r_0 = init(max_pool(H^0))
  };

  Var<T> attentive_pool(Tape<T>& tape, const EncoderOutput<T>& enc, std::size_t layer) const;

  Variant variant_;
  GlobalKind global_;
  std::size_t d_model_;
  std::size_t enc_layers_;
  std::optional<Linear<T>> att_query_, att_out_;
  std::vector<std::optional<Linear<T>>> att_key_, att_value_;  // indexed by encoder layer, 1-based
  std::optional<GruParams> gru_;
  std::vector<TamParams> tam_;         // per decoder layer, 0-based
  std::vector<FusionParams> fusion_;   // per decoder layer, 0-based
};

}  // namespace sctx
