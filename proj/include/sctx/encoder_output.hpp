#pragma once

#include <vector>

#include "sctx/tape.hpp"

namespace sctx {

/// All encoder layer outputs for a batch. layers[0] is the embedding layer
/// H^0 (positional encoding and dropout applied), layers[l] is H^l.
template <typename T>
struct EncoderOutput {
  std::vector<Var<T>> layers;  // each [B, T, d]
  BoolTensor pad_mask;         // [B, T], 1 = real token

  std::size_t depth() const { return layers.size() - 1; }
  const Var<T>& embedding_layer() const { return layers.front(); }
  const Var<T>& top() const { return layers.back(); }
  std::size_t batch() const { return pad_mask.dim(0); }
};

}  // namespace sctx
