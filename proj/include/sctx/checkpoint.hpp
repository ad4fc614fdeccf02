#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sctx/tape.hpp"

namespace sctx {

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

/// Binary layout, all integers unsigned 64-bit little-endian:
///   "SCTX1", entry count, then per entry: name length, UTF-8 name, rank,
///   extents, and the values as little-endian 32-bit floats.
void write_checkpoint(const std::string& path, const NamedTensors& entries);
NamedTensors read_checkpoint(const std::string& path);

std::string encode_checkpoint(const NamedTensors& entries);
NamedTensors decode_checkpoint(const std::string& bytes);

/// Parameter values in registry order, converted to 32-bit.
template <typename T>
NamedTensors snapshot(const ParameterStore<T>& store);

/// Copies entries into same-named parameters. Every parameter must be
/// present with the same shape; entries with other names are ignored.
template <typename T>
void restore(ParameterStore<T>& store, const NamedTensors& entries);

}  // namespace sctx
