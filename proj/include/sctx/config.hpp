#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace sctx {

/// Which sentential context (if any) the decoder receives.
enum class Variant { vanilla, shallow_mean, shallow_max, shallow_att, deep_rnn, deep_tam };

/// Per-layer sentence summary Global(H).
enum class GlobalKind { mean, max, att };

std::string to_string(Variant v);
std::string to_string(GlobalKind g);
Variant parse_variant(const std::string& name);
GlobalKind parse_global(const std::string& name);
const std::vector<Variant>& all_variants();

inline bool is_shallow(Variant v) {
  return v == Variant::shallow_mean || v == Variant::shallow_max || v == Variant::shallow_att;
}
inline bool is_deep(Variant v) { return v == Variant::deep_rnn || v == Variant::deep_tam; }

struct ModelConfig {
  std::size_t src_vocab = 24;
  std::size_t tgt_vocab = 24;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff_enc = 128;
  std::size_t d_ff_dec = 128;  // also the inner width of each fusion network
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  double dropout = 0.1;
  Variant variant = Variant::vanilla;
  GlobalKind deep_global = GlobalKind::att;  // Global(.) used by the deep variants
  std::size_t max_len = 64;
  std::uint64_t seed = 1;

  /// Global(.) in effect: fixed by shallow variants, configurable for deep ones.
  GlobalKind global() const;

  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Desk-scale presets: "base-toy", "medium-toy" (decoder feed-forward 3x
/// wider) and "grad-toy" (d=16, two heads, for gradient verification).
ModelConfig model_preset(const std::string& name);

}  // namespace sctx
