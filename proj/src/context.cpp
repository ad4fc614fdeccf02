#include "sctx/context.hpp"

#include <cmath>

namespace sctx {

template <typename T>
ContextProvider<T>::ContextProvider(const ModelConfig& config, ParameterStore<T>& store, Rng& rng)
    : variant_(config.variant),
      global_(config.global()),
      d_model_(config.d_model),
      enc_layers_(config.n_enc_layers),
      att_key_(config.n_enc_layers + 1),
      att_value_(config.n_enc_layers + 1) {
  if (!enabled()) return;
  const std::size_t d = d_model_;

  for (std::size_t l = 1; l <= config.n_dec_layers; ++l) {
    const std::string name = "dec." + std::to_string(l) + ".fuse";
    fusion_.push_back({FeedForward<T>::create(store, name + ".ffn", 2 * d, config.d_ff_dec, d, rng),
                       LayerNormParams<T>::create(store, name + ".ln", d)});
    fusion_.back().ffn.outer.weight->value.fill(T(0));  // starts as LayerNorm(D)
  }

  if (global_ == GlobalKind::att) {
    att_query_ = Linear<T>::create(store, "ctx.att.q", d, d, rng);
    att_out_ = Linear<T>::create(store, "ctx.att.o", d, d, rng);
    const std::size_t first = is_deep(variant_) ? 1 : enc_layers_;
    for (std::size_t l = first; l <= enc_layers_; ++l) {
      att_key_[l] = Linear<T>::create(store, "ctx.att." + std::to_string(l) + ".k", d, d, rng, false);
      att_value_[l] = Linear<T>::create(store, "ctx.att." + std::to_string(l) + ".v", d, d, rng);
    }
  }

  if (variant_ == Variant::deep_rnn) {
    gru_ = GruParams{Linear<T>::create(store, "ctx.rnn.x", d, 3 * d, rng),
                     Linear<T>::create(store, "ctx.rnn.h", d, 3 * d, rng),
                     Linear<T>::create(store, "ctx.rnn.init", d, d, rng)};
  }

  if (variant_ == Variant::deep_tam) {
    for (std::size_t l = 1; l <= config.n_dec_layers; ++l) {
      const std::string name = "ctx.tam." + std::to_string(l);
      TamParams p;
      p.query = Linear<T>::create(store, name + ".q", d, d, rng);
      p.key = Linear<T>::create(store, name + ".k", d, d, rng, false);
      p.start = &store.add(name + ".start", uniform_init<T>({d}, 1.0, rng));
      tam_.push_back(p);
    }
  }
}

template <typename T>
Var<T> ContextProvider<T>::attentive_pool(Tape<T>& tape, const EncoderOutput<T>& enc, std::size_t layer) const {
  if (!att_key_[layer]) throw ConfigError("no attentive-pooling parameters for encoder layer " + std::to_string(layer));
  const std::size_t B = enc.batch(), d = d_model_;
  const Var<T>& states = enc.layers[layer];
  const Var<T> anchor = max_pool(enc.embedding_layer(), enc.pad_mask);
  const Var<T> query = reshape((*att_query_)(tape, anchor), {B, 1, d});
  const Var<T> keys = (*att_key_[layer])(tape, states);
  const Var<T> values = (*att_value_[layer])(tape, states);
  AttentionSpec<T> spec;
  spec.heads = 1;
  spec.key_mask = &enc.pad_mask;
  const Var<T> mixed = reshape(attention(query, keys, values, spec), {B, d});
  return (*att_out_)(tape, mixed);
}

template <typename T>
Var<T> ContextProvider<T>::global(Tape<T>& tape, const EncoderOutput<T>& enc, std::size_t layer) const {
  if (layer == 0 || layer > enc.depth()) {
    throw DimensionError("global(): encoder layer " + std::to_string(layer) + " outside 1.." +
                         std::to_string(enc.depth()));
  }
  switch (global_) {
    case GlobalKind::mean: return mean_pool(enc.layers[layer], enc.pad_mask);
    case GlobalKind::max: return max_pool(enc.layers[layer], enc.pad_mask);
    case GlobalKind::att: return attentive_pool(tape, enc, layer);
  }
  throw ConfigError("unknown global function");
}

template <typename T>
std::vector<Var<T>> ContextProvider<T>::summarize_layers(Tape<T>& tape, const EncoderOutput<T>& enc) const {
  std::vector<Var<T>> out;
  for (std::size_t l = 1; l <= enc.depth(); ++l) out.push_back(global(tape, enc, l));
  return out;
}

template <typename T>
Var<T> ContextProvider<T>::stack(const std::vector<Var<T>>& summaries) const {
  std::vector<Var<T>> rows;
  for (const auto& g : summaries) rows.push_back(reshape(g, {g.dim(0), 1, g.dim(1)}));
  return concat(rows, 1);
}

template <typename T>
Var<T> ContextProvider<T>::deep_rnn(Tape<T>& tape, const std::vector<Var<T>>& summaries,
                                    const EncoderOutput<T>& enc) const {
  if (!gru_) throw ConfigError("deep_rnn() needs the deep-rnn variant");
  if (summaries.empty()) throw DimensionError("deep_rnn(): no layer summaries");
  const std::size_t d = d_model_;
  Var<T> state = gru_->init(tape, max_pool(enc.embedding_layer(), enc.pad_mask));
  for (const auto& g : summaries) {
    const Var<T> xs = gru_->input(tape, g);
    const Var<T> hs = gru_->hidden(tape, state);
    const Var<T> update = sigmoid(add(narrow(xs, 1, 0, d), narrow(hs, 1, 0, d)));
    const Var<T> reset = sigmoid(add(narrow(xs, 1, d, d), narrow(hs, 1, d, d)));
    const Var<T> candidate = tanh(add(narrow(xs, 1, 2 * d, d), mul(reset, narrow(hs, 1, 2 * d, d))));
    // h' = z * n + (1 - z) * h
    state = add(state, mul(update, sub(candidate, state)));
  }
  return state;
}

template <typename T>
Var<T> ContextProvider<T>::deep_tam(Tape<T>& tape, const Var<T>& stacked, const Var<T>& d_prev,
                                    std::size_t dec_layer, Tensor<T>* beta) const {
  if (!dynamic()) throw ConfigError("deep_tam() needs the deep-tam variant");
  const TamParams& p = tam_.at(dec_layer - 1);
  const std::size_t B = stacked.dim(0), L = stacked.dim(1), d = d_model_;
  const Var<T> query = reshape(p.query(tape, d_prev), {B, 1, d});
  const Var<T> keys = p.key(tape, stacked);
  AttentionSpec<T> spec;
  spec.heads = 1;
  Tensor<T> weights;
  const Var<T> mixed = attention(query, keys, stacked, spec, beta ? &weights : nullptr);
  if (beta) *beta = weights.reshaped({B, L});
  return reshape(mixed, {B, d});
}

template <typename T>
Var<T> ContextProvider<T>::tam_start(Tape<T>& tape, std::size_t dec_layer, std::size_t batch) const {
  if (!dynamic()) throw ConfigError("tam_start() needs the deep-tam variant");
  return expand(tape.param(*tam_.at(dec_layer - 1).start), 0, batch);
}

template <typename T>
Var<T> ContextProvider<T>::sentence_vector(Tape<T>& tape, const EncoderOutput<T>& enc) const {
  if (is_shallow(variant_)) return global(tape, enc, enc.depth());
  if (variant_ == Variant::deep_rnn) return deep_rnn(tape, summarize_layers(tape, enc), enc);
  throw ConfigError("variant " + to_string(variant_) + " has no per-sentence context vector");
}

template <typename T>
Var<T> ContextProvider<T>::fuse(Tape<T>& tape, const Var<T>& decoder_input, const Var<T>& context,
                                std::size_t dec_layer, const Dropout<T>& drop) const {
  if (!enabled()) return decoder_input;
  const FusionParams& p = fusion_.at(dec_layer - 1);
  const Shape& s = decoder_input.shape();
  if (s.size() != 3 || context.shape() != Shape{s[0], s[2]}) {
    throw DimensionError("fuse(): decoder input " + shape_str(s) + " and context " + shape_str(context.shape()) +
                         " do not fit [B,T,d] and [B,d]");
  }
  const Var<T> g = expand(drop(context), 1, s[1]);
  const Var<T> update = drop(p.ffn(tape, concat_last_dim(decoder_input, g)));
  return p.norm(tape, add(decoder_input, update));
}

template class ContextProvider<float>;
template class ContextProvider<double>;

}  // namespace sctx
