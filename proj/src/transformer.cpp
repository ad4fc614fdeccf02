#include "sctx/transformer.hpp"

#include <cmath>

namespace sctx {

namespace {

std::uint64_t init_stream(const ModelConfig& c, std::uint64_t which) { return Rng::derive(c.seed, which); }

}  // namespace

template <typename T>
Seq2Seq<T>::Seq2Seq(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  Rng rng(init_stream(config_, 1));
  const double emb_bound = std::sqrt(3.0 / static_cast<double>(d));  // unit variance after the sqrt(d) scale
  src_embedding_ = &params_.add("src_emb", uniform_init<T>({config_.src_vocab, d}, emb_bound, rng));
  tgt_embedding_ = &params_.add("tgt_emb", uniform_init<T>({config_.tgt_vocab, d}, emb_bound, rng));

  for (std::size_t l = 1; l <= config_.n_enc_layers; ++l) {
    const std::string name = "enc." + std::to_string(l);
    EncoderLayer layer;
    layer.self = make_attention(name + ".self", rng);
    layer.ln1 = LayerNormParams<T>::create(params_, name + ".ln1", d);
    layer.ffn = FeedForward<T>::create(params_, name + ".ffn", d, config_.d_ff_enc, d, rng);
    layer.ln2 = LayerNormParams<T>::create(params_, name + ".ln2", d);
    encoder_.push_back(layer);
  }
  for (std::size_t l = 1; l <= config_.n_dec_layers; ++l) {
    const std::string name = "dec." + std::to_string(l);
    DecoderLayer layer;
    layer.self = make_attention(name + ".self", rng);
    layer.ln1 = LayerNormParams<T>::create(params_, name + ".ln1", d);
    layer.cross = make_attention(name + ".cross", rng);
    layer.ln2 = LayerNormParams<T>::create(params_, name + ".ln2", d);
    layer.ffn = FeedForward<T>::create(params_, name + ".ffn", d, config_.d_ff_dec, d, rng);
    layer.ln3 = LayerNormParams<T>::create(params_, name + ".ln3", d);
    decoder_.push_back(layer);
  }

  // Separate stream: the base parameters are identical across variants.
  Rng ctx_rng(init_stream(config_, 2));
  context_.emplace(config_, params_, ctx_rng);

  positions_ = Tensor<T>({config_.max_len, d});
  for (std::size_t pos = 0; pos < config_.max_len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      positions_(pos, i) = static_cast<T>(std::sin(angle));
      if (i + 1 < d) positions_(pos, i + 1) = static_cast<T>(std::cos(angle));
    }
  }
}

template <typename T>
typename Seq2Seq<T>::AttentionParams Seq2Seq<T>::make_attention(const std::string& name, Rng& rng) {
  const std::size_t d = config_.d_model;
  return {Linear<T>::create(params_, name + ".q", d, d, rng), Linear<T>::create(params_, name + ".k", d, d, rng, false),
          Linear<T>::create(params_, name + ".v", d, d, rng), Linear<T>::create(params_, name + ".o", d, d, rng)};
}

template <typename T>
Dropout<T> Seq2Seq<T>::dropout_for(const ForwardOptions& opts) const {
  return Dropout<T>{static_cast<T>(config_.dropout), opts.rng};
}

template <typename T>
Var<T> Seq2Seq<T>::embed(Tape<T>& tape, Parameter<T>& table, const IdTensor& ids, std::size_t first_position,
                         const Dropout<T>& drop) const {
  const std::size_t steps = ids.dim(1);
  const std::size_t d = config_.d_model;
  if (first_position + steps > config_.max_len) {
    throw LengthError("sequence position " + std::to_string(first_position + steps) + " exceeds max_len " +
                      std::to_string(config_.max_len));
  }
  Tensor<T> pe({steps, d});
  std::copy_n(positions_.storage().begin() + first_position * d, steps * d, pe.storage().begin());
  const Var<T> x = scale(embedding(tape.param(table), ids), static_cast<T>(std::sqrt(static_cast<double>(d))));
  return drop(add(x, tape.constant(std::move(pe))));
}

template <typename T>
Var<T> Seq2Seq<T>::project_out(Tape<T>& tape, const AttentionParams& p, const Var<T>& mixed) const {
  return p.o(tape, mixed);
}

template <typename T>
EncoderOutput<T> Seq2Seq<T>::encode(Tape<T>& tape, const IdTensor& src, const BoolTensor& src_mask,
                                    const ForwardOptions& opts) const {
  if (src.rank() != 2 || src_mask.shape() != src.shape()) {
    throw DimensionError("encode(): source ids " + shape_str(src.shape()) + " and mask " +
                         shape_str(src_mask.shape()) + " must both be [B, T]");
  }
  const std::size_t B = src.dim(0), steps = src.dim(1);
  if (steps > config_.max_len) {
    throw LengthError("source length " + std::to_string(steps) + " exceeds max_len " + std::to_string(config_.max_len));
  }
  for (std::size_t b = 0; b < B; ++b) {
    bool any = false;
    for (std::size_t t = 0; t < steps; ++t) any = any || src_mask(b, t);
    if (!any) throw DegenerateMaskError("encode(): batch row " + std::to_string(b) + " is empty after padding");
  }
  const Dropout<T> drop = dropout_for(opts);
  EncoderOutput<T> out;
  out.pad_mask = src_mask;
  Var<T> x = embed(tape, *src_embedding_, src, 0, drop);
  out.layers.push_back(x);
  AttentionSpec<T> spec{config_.n_heads, &out.pad_mask, false, drop.attention_rate(), opts.rng};
  for (const auto& layer : encoder_) {
    const Var<T> mixed =
        attention(layer.self.q(tape, x), layer.self.k(tape, x), layer.self.v(tape, x), spec);
    x = layer.ln1(tape, add(x, drop(project_out(tape, layer.self, mixed))));
    x = layer.ln2(tape, add(x, drop(layer.ffn(tape, x))));
    out.layers.push_back(x);
  }
  return out;
}

template <typename T>
Var<T> Seq2Seq<T>::decoder_layer_full(Tape<T>& tape, std::size_t l, const Var<T>& x, const Var<T>& mem_k,
                                      const Var<T>& mem_v, const BoolTensor& src_mask, const Dropout<T>& drop) const {
  const DecoderLayer& layer = decoder_[l - 1];
  AttentionSpec<T> self_spec{config_.n_heads, nullptr, true, drop.attention_rate(), drop.rng};
  const Var<T> a = attention(layer.self.q(tape, x), layer.self.k(tape, x), layer.self.v(tape, x), self_spec);
  const Var<T> x1 = layer.ln1(tape, add(x, drop(project_out(tape, layer.self, a))));
  AttentionSpec<T> cross_spec{config_.n_heads, &src_mask, false, drop.attention_rate(), drop.rng};
  const Var<T> c = attention(layer.cross.q(tape, x1), mem_k, mem_v, cross_spec);
  const Var<T> x2 = layer.ln2(tape, add(x1, drop(project_out(tape, layer.cross, c))));
  return layer.ln3(tape, add(x2, drop(layer.ffn(tape, x2))));
}

template <typename T>
Var<T> Seq2Seq<T>::decoder_layer_step(Tape<T>& tape, std::size_t l, const Var<T>& x, LayerCache& cache,
                                      const Var<T>& mem_k, const Var<T>& mem_v, const BoolTensor& src_mask,
                                      const Dropout<T>& drop) const {
  const DecoderLayer& layer = decoder_[l - 1];
  const Var<T> k = layer.self.k(tape, x);
  const Var<T> v = layer.self.v(tape, x);
  cache.keys = cache.keys.valid() ? concat<T>({cache.keys, k}, 1) : k;
  cache.values = cache.values.valid() ? concat<T>({cache.values, v}, 1) : v;
  // The cache only holds positions up to the current one, so no causal mask.
  AttentionSpec<T> self_spec{config_.n_heads, nullptr, false, drop.attention_rate(), drop.rng};
  const Var<T> a = attention(layer.self.q(tape, x), cache.keys, cache.values, self_spec);
  const Var<T> x1 = layer.ln1(tape, add(x, drop(project_out(tape, layer.self, a))));
  AttentionSpec<T> cross_spec{config_.n_heads, &src_mask, false, drop.attention_rate(), drop.rng};
  const Var<T> c = attention(layer.cross.q(tape, x1), mem_k, mem_v, cross_spec);
  const Var<T> x2 = layer.ln2(tape, add(x1, drop(project_out(tape, layer.cross, c))));
  return layer.ln3(tape, add(x2, drop(layer.ffn(tape, x2))));
}

template <typename T>
Var<T> Seq2Seq<T>::logits(Tape<T>& tape, const Var<T>& states) const {
  return matmul(states, tape.param(*tgt_embedding_), true);
}

template <typename T>
Var<T> Seq2Seq<T>::decode_teacher_forced(Tape<T>& tape, const EncoderOutput<T>& enc, const IdTensor& tgt_in,
                                         const ForwardOptions& opts,
                                         std::vector<std::vector<Tensor<T>>>* beta_trace) const {
  if (tgt_in.rank() != 2 || tgt_in.dim(0) != enc.batch()) {
    throw DimensionError("decode: target ids " + shape_str(tgt_in.shape()) + " do not match the encoder batch");
  }
  const Dropout<T> drop = dropout_for(opts);
  const ContextProvider<T>& ctx = *context_;
  const std::size_t B = tgt_in.dim(0), steps = tgt_in.dim(1), d = config_.d_model;
  Var<T> x = embed(tape, *tgt_embedding_, tgt_in, 0, drop);

  std::vector<Var<T>> mem_k, mem_v;
  for (const auto& layer : decoder_) {
    mem_k.push_back(layer.cross.k(tape, enc.top()));
    mem_v.push_back(layer.cross.v(tape, enc.top()));
  }

  if (!ctx.dynamic()) {
    Var<T> g;
    if (ctx.enabled()) g = ctx.sentence_vector(tape, enc);
    for (std::size_t l = 1; l <= decoder_.size(); ++l) {
      const Var<T> input = ctx.enabled() ? ctx.fuse(tape, x, g, l, drop) : x;
      x = decoder_layer_full(tape, l, input, mem_k[l - 1], mem_v[l - 1], enc.pad_mask, drop);
    }
    return logits(tape, x);
  }

  // deep-tam: the context of layer l at position i depends on that layer's
  // own output at i-1, so each layer runs position by position.
  const Var<T> stacked = ctx.stack(ctx.summarize_layers(tape, enc));
  if (beta_trace) beta_trace->assign(decoder_.size(), {});
  for (std::size_t l = 1; l <= decoder_.size(); ++l) {
    LayerCache cache;
    Var<T> prev = ctx.tam_start(tape, l, B);
    std::vector<Var<T>> outputs;
    for (std::size_t t = 0; t < steps; ++t) {
      Tensor<T> beta;
      const Var<T> g = ctx.deep_tam(tape, stacked, prev, l, beta_trace ? &beta : nullptr);
      if (beta_trace) (*beta_trace)[l - 1].push_back(std::move(beta));
      const Var<T> input = ctx.fuse(tape, narrow(x, 1, t, 1), g, l, drop);
      const Var<T> out = decoder_layer_step(tape, l, input, cache, mem_k[l - 1], mem_v[l - 1], enc.pad_mask, drop);
      prev = reshape(out, {B, d});
      outputs.push_back(out);
    }
    x = concat(outputs, 1);
  }
  return logits(tape, x);
}

template <typename T>
Var<T> Seq2Seq<T>::forward(Tape<T>& tape, const IdTensor& src, const BoolTensor& src_mask, const IdTensor& tgt_in,
                           const ForwardOptions& opts) const {
  const EncoderOutput<T> enc = encode(tape, src, src_mask, opts);
  return decode_teacher_forced(tape, enc, tgt_in, opts);
}

template <typename T>
Var<T> Seq2Seq<T>::loss(Tape<T>& tape, const IdTensor& src, const BoolTensor& src_mask, const IdTensor& tgt_in,
                        const IdTensor& tgt_out, const BoolTensor& tgt_mask, T smoothing,
                        const ForwardOptions& opts) const {
  const Var<T> out = forward(tape, src, src_mask, tgt_in, opts);
  return cross_entropy(out, tgt_out, &tgt_mask, smoothing);
}

template <typename T>
DecoderState<T> Seq2Seq<T>::start_decoding(Tape<T>& tape, const EncoderOutput<T>& enc) const {
  DecoderState<T> state;
  state.enc = enc;
  state.batch = enc.batch();
  for (const auto& layer : decoder_) {
    state.memory_keys.push_back(layer.cross.k(tape, enc.top()));
    state.memory_values.push_back(layer.cross.v(tape, enc.top()));
  }
  state.self_keys.resize(decoder_.size());
  state.self_values.resize(decoder_.size());
  state.last_output.resize(decoder_.size());
  state.beta.resize(decoder_.size());
  const ContextProvider<T>& ctx = *context_;
  if (ctx.dynamic()) {
    state.layer_stack = ctx.stack(ctx.summarize_layers(tape, enc));
  } else if (ctx.enabled()) {
    state.context = ctx.sentence_vector(tape, enc);
  }
  return state;
}

template <typename T>
Var<T> Seq2Seq<T>::decode_step(Tape<T>& tape, DecoderState<T>& state, const std::vector<std::int32_t>& prev_tokens,
                               const ForwardOptions& opts) const {
  if (prev_tokens.size() != state.batch) {
    throw DimensionError("decode_step(): " + std::to_string(prev_tokens.size()) + " tokens for a batch of " +
                         std::to_string(state.batch));
  }
  const Dropout<T> drop = dropout_for(opts);
  const ContextProvider<T>& ctx = *context_;
  const std::size_t B = state.batch, d = config_.d_model;
  Var<T> x = embed(tape, *tgt_embedding_, IdTensor({B, 1}, prev_tokens), state.step, drop);
  for (std::size_t l = 1; l <= decoder_.size(); ++l) {
    Var<T> input = x;
    if (ctx.dynamic()) {
      const Var<T> prev = state.step == 0 ? ctx.tam_start(tape, l, B) : state.last_output[l - 1];
      const Var<T> g = ctx.deep_tam(tape, state.layer_stack, prev, l, &state.beta[l - 1]);
      input = ctx.fuse(tape, x, g, l, drop);
    } else if (ctx.enabled()) {
      input = ctx.fuse(tape, x, state.context, l, drop);
    }
    LayerCache cache{state.self_keys[l - 1], state.self_values[l - 1]};
    x = decoder_layer_step(tape, l, input, cache, state.memory_keys[l - 1], state.memory_values[l - 1],
                           state.enc.pad_mask, drop);
    state.self_keys[l - 1] = cache.keys;
    state.self_values[l - 1] = cache.values;
    state.last_output[l - 1] = reshape(x, {B, d});
  }
  ++state.step;
  return reshape(logits(tape, x), {B, config_.tgt_vocab});
}

template <typename T>
void Seq2Seq<T>::reorder(DecoderState<T>& state, const std::vector<std::size_t>& rows) const {
  auto pick = [&rows](Var<T>& v) {
    if (v.valid()) v = index_select(v, rows);
  };
  for (auto* group : {&state.memory_keys, &state.memory_values, &state.self_keys, &state.self_values,
                      &state.last_output}) {
    for (auto& v : *group) pick(v);
  }
  pick(state.context);
  pick(state.layer_stack);
  for (auto& layer : state.enc.layers) pick(layer);
  const std::size_t steps = state.enc.pad_mask.dim(1);
  BoolTensor mask({rows.size(), steps});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t t = 0; t < steps; ++t) mask(r, t) = state.enc.pad_mask(rows[r], t);
  }
  state.enc.pad_mask = std::move(mask);
  state.batch = rows.size();
}

template class Seq2Seq<float>;
template class Seq2Seq<double>;

ParameterCount count_parameters(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model;
  auto lin = [](std::size_t in, std::size_t out) { return in * out + out; };
  const std::size_t norm = 2 * d;
  const std::size_t attn = 4 * lin(d, d) - d;  // no key bias
  auto ffn = [&](std::size_t hidden) { return lin(d, hidden) + lin(hidden, d); };

  ParameterCount pc;
  pc.components["embeddings"] = (c.src_vocab + c.tgt_vocab) * d;
  pc.components["encoder"] = c.n_enc_layers * (attn + norm + ffn(c.d_ff_enc) + norm);
  pc.components["decoder"] = c.n_dec_layers * (2 * attn + 3 * norm + ffn(c.d_ff_dec));
  std::size_t fusion = 0, global = 0, deep = 0;
  if (c.variant != Variant::vanilla) {
    fusion = c.n_dec_layers * (lin(2 * d, c.d_ff_dec) + lin(c.d_ff_dec, d) + norm);
    if (c.global() == GlobalKind::att) {
      const std::size_t summarized = is_deep(c.variant) ? c.n_enc_layers : 1;
      global = 2 * lin(d, d) + summarized * (d * d + lin(d, d));
    }
    if (c.variant == Variant::deep_rnn) deep = 2 * lin(d, 3 * d) + lin(d, d);
    if (c.variant == Variant::deep_tam) deep = c.n_dec_layers * (lin(d, d) + d * d + d);
  }
  pc.components["context.fusion"] = fusion;
  pc.components["context.global"] = global;
  pc.components["context.deep"] = deep;
  for (const auto& [name, n] : pc.components) pc.total += n;
  return pc;
}

namespace {

std::string component_of(const std::string& name) {
  auto starts = [&name](const char* prefix) { return name.rfind(prefix, 0) == 0; };
  if (starts("src_emb") || starts("tgt_emb")) return "embeddings";
  if (starts("enc.")) return "encoder";
  if (starts("dec.")) return name.find(".fuse.") != std::string::npos ? "context.fusion" : "decoder";
  if (starts("ctx.att.")) return "context.global";
  if (starts("ctx.")) return "context.deep";
  return "other";
}

}  // namespace

template <typename T>
ParameterCount count_registered(const ParameterStore<T>& store) {
  ParameterCount pc;
  for (const char* key : {"embeddings", "encoder", "decoder", "context.fusion", "context.global", "context.deep"}) {
    pc.components[key] = 0;
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    pc.components[component_of(store[i].name)] += store[i].value.size();
    pc.total += store[i].value.size();
  }
  return pc;
}

template ParameterCount count_registered(const ParameterStore<float>&);
template ParameterCount count_registered(const ParameterStore<double>&);

long long parameter_delta(const ModelConfig& config) {
  ModelConfig base = config;
  base.variant = Variant::vanilla;
  return static_cast<long long>(count_parameters(config).total) - static_cast<long long>(count_parameters(base).total);
}

}  // namespace sctx
