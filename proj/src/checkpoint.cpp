#include "sctx/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "sctx/errors.hpp"

namespace sctx {

namespace {

constexpr char kMagic[] = "SCTX1";
constexpr std::size_t kMagicLen = 5;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return std::bit_cast<float>(v);
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const NamedTensors& entries) {
  std::string out(kMagic, kMagicLen);
  put_u64(out, entries.size());
  for (const auto& [name, t] : entries) {
    put_u64(out, name.size());
    out += name;
    put_u64(out, t.rank());
    for (std::size_t e : t.shape()) put_u64(out, e);
    for (float v : t.storage()) put_f32(out, v);
  }
  return out;
}

NamedTensors decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagicLen || bytes.compare(0, kMagicLen, kMagic) != 0) throw IoError("not an SCTX1 checkpoint");
  const std::string body = bytes.substr(kMagicLen);
  Reader r(body);
  const std::uint64_t count = r.u64();
  NamedTensors entries;
  for (std::uint64_t n = 0; n < count; ++n) {
    const std::uint64_t len = r.u64();
    std::string name = r.str(len);
    const std::uint64_t rank = r.u64();
    if (rank == 0 || rank > 8) throw IoError("checkpoint entry '" + name + "' has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint64_t k = 0; k < rank; ++k) shape.push_back(r.u64());
    std::size_t size = 1;
    for (std::size_t e : shape) {
      if (e == 0 || e > (std::size_t{1} << 32)) throw IoError("checkpoint entry '" + name + "' has a bad extent");
      size *= e;
    }
    std::vector<float> data(size);
    for (auto& v : data) v = r.f32();
    entries.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw IoError("trailing bytes after the last checkpoint entry");
  return entries;
}

void write_checkpoint(const std::string& path, const NamedTensors& entries) {
  const std::string bytes = encode_checkpoint(entries);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move " + tmp + " to " + path);
}

NamedTensors read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

template <typename T>
NamedTensors snapshot(const ParameterStore<T>& store) {
  NamedTensors out;
  for (std::size_t i = 0; i < store.size(); ++i) out.emplace_back(store[i].name, store[i].value.template cast<float>());
  return out;
}

template <typename T>
void restore(ParameterStore<T>& store, const NamedTensors& entries) {
  std::unordered_map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : entries) by_name[name] = &t;
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store[i];
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw IoError("checkpoint has no entry for parameter '" + p.name + "'");
    if (it->second->shape() != p.value.shape()) {
      throw IoError("checkpoint entry '" + p.name + "' has shape " + shape_str(it->second->shape()) + ", expected " +
                    shape_str(p.value.shape()));
    }
    p.value = it->second->template cast<T>();
  }
}

template NamedTensors snapshot(const ParameterStore<float>&);
template NamedTensors snapshot(const ParameterStore<double>&);
template void restore(ParameterStore<float>&, const NamedTensors&);
template void restore(ParameterStore<double>&, const NamedTensors&);

}  // namespace sctx
