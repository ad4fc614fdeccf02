#include "sctx/config.hpp"

#include "sctx/errors.hpp"

namespace sctx {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::vanilla: return "vanilla";
    case Variant::shallow_mean: return "shallow-mean";
    case Variant::shallow_max: return "shallow-max";
    case Variant::shallow_att: return "shallow-att";
    case Variant::deep_rnn: return "deep-rnn";
    case Variant::deep_tam: return "deep-tam";
  }
  return "?";
}

std::string to_string(GlobalKind g) {
  switch (g) {
    case GlobalKind::mean: return "mean";
    case GlobalKind::max: return "max";
    case GlobalKind::att: return "att";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : all_variants()) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown variant '" + name +
                    "' (expected vanilla, shallow-mean, shallow-max, shallow-att, deep-rnn or deep-tam)");
}

GlobalKind parse_global(const std::string& name) {
  if (name == "mean") return GlobalKind::mean;
  if (name == "max") return GlobalKind::max;
  if (name == "att") return GlobalKind::att;
  throw ConfigError("unknown global function '" + name + "' (expected mean, max or att)");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = {Variant::vanilla,     Variant::shallow_mean, Variant::shallow_max,
                                         Variant::shallow_att, Variant::deep_rnn,     Variant::deep_tam};
  return v;
}

GlobalKind ModelConfig::global() const {
  switch (variant) {
    case Variant::shallow_mean: return GlobalKind::mean;
    case Variant::shallow_max: return GlobalKind::max;
    case Variant::shallow_att: return GlobalKind::att;
    default: return deep_global;
  }
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* key) {
    if (v == 0) throw ConfigError(std::string(key) + " must be positive");
  };
  positive(src_vocab, "src_vocab");
  positive(tgt_vocab, "tgt_vocab");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ff_enc, "d_ff_enc");
  positive(d_ff_dec, "d_ff_dec");
  positive(n_enc_layers, "n_enc_layers");
  positive(n_dec_layers, "n_dec_layers");
  positive(max_len, "max_len");
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

ModelConfig model_preset(const std::string& name) {
  ModelConfig c;
  if (name == "base-toy") return c;
  if (name == "medium-toy") {
    c.d_ff_dec = 3 * c.d_ff_dec;
    return c;
  }
  if (name == "grad-toy") {
    c.src_vocab = 9;
    c.tgt_vocab = 9;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff_enc = 32;
    c.d_ff_dec = 32;
    c.dropout = 0.0;
    c.max_len = 16;
    return c;
  }
  throw ConfigError("unknown model preset '" + name + "' (expected base-toy, medium-toy or grad-toy)");
}

}  // namespace sctx
