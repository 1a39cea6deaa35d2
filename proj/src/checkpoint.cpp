#include "vsg/checkpoint.hpp"

#include "byteio.hpp"
#include "vsg/error.hpp"
#include "vsg/volio.hpp"

#include <cstring>
#include <limits>
#include <unordered_map>

namespace vsg {

namespace {
constexpr char kMagic[4] = {'V', 'S', 'G', 'W'};
}

std::string encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  detail::ByteWriter w;
  w.put_bytes(std::string_view(kMagic, 4));
  w.put(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > std::numeric_limits<std::uint16_t>::max()) throw ValidationError("tensor name too long: " + e.name);
    if (numel(e.shape) != static_cast<std::int64_t>(e.values.size()))
      throw ValidationError("checkpoint entry " + e.name + " has inconsistent shape");
    w.put(static_cast<std::uint16_t>(e.name.size()));
    w.put_bytes(e.name);
    w.put(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.put(static_cast<std::uint64_t>(d));
    for (float v : e.values) w.put(v);
  }
  return std::move(w.str());
}

std::vector<CheckpointEntry> decode_checkpoint(const std::string& bytes, const std::string& what) {
  detail::ByteReader r(bytes, what);
  r.need(4);
  if (std::memcmp(r.get_bytes(4).data(), kMagic, 4) != 0) throw FormatError(what + ": bad magic, not a VSGW file");
  const auto count = r.get<std::uint32_t>();
  std::vector<CheckpointEntry> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = r.get<std::uint16_t>();
    e.name = std::string(r.get_bytes(len));
    const auto nd = r.get<std::uint32_t>();
    if (nd > 8) throw FormatError(what + ": tensor " + e.name + " has too many dims");
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < nd; ++d) {
      const auto ext = r.get<std::uint64_t>();
      if (ext == 0 || ext > (std::uint64_t{1} << 32)) throw FormatError(what + ": invalid extent in " + e.name);
      e.shape.push_back(static_cast<std::int64_t>(ext));
      n *= ext;
    }
    r.need(n * sizeof(float));
    e.values.resize(n);
    for (auto& v : e.values) v = r.get<float>();
    out.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw CorruptFileError(what + ": trailing bytes after last tensor");
  return out;
}

void write_checkpoint(const std::vector<CheckpointEntry>& entries, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(entries));
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file_bytes(path.string()), path.string());
}

template <typename T>
std::vector<CheckpointEntry> to_checkpoint(const NamedTensors<T>& params) {
  std::vector<CheckpointEntry> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) {
    CheckpointEntry e{name, t.shape(), {}};
    e.values.resize(static_cast<std::size_t>(t.numel()));
    for (Eigen::Index i = 0; i < t.numel(); ++i) e.values[static_cast<std::size_t>(i)] = static_cast<float>(t.value()[i]);
    out.push_back(std::move(e));
  }
  return out;
}

template <typename T>
void load_checkpoint(const std::vector<CheckpointEntry>& entries, NamedTensors<T>& params) {
  std::unordered_map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (auto& [name, t] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ValidationError("checkpoint is missing tensor " + name);
    if (it->second->shape != t.shape())
      throw ValidationError("checkpoint tensor " + name + " has shape " + shape_str(it->second->shape) +
                            ", expected " + shape_str(t.shape()));
    for (Eigen::Index i = 0; i < t.numel(); ++i) t.value()[i] = static_cast<T>(it->second->values[static_cast<std::size_t>(i)]);
  }
}

template std::vector<CheckpointEntry> to_checkpoint<float>(const NamedTensors<float>&);
template std::vector<CheckpointEntry> to_checkpoint<double>(const NamedTensors<double>&);
template void load_checkpoint<float>(const std::vector<CheckpointEntry>&, NamedTensors<float>&);
template void load_checkpoint<double>(const std::vector<CheckpointEntry>&, NamedTensors<double>&);

}  // namespace vsg
