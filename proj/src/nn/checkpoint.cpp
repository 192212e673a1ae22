#include "lesionlab/nn/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "lesionlab/error.hpp"

namespace lesionlab::nn {

namespace {
constexpr char kMagic[8] = {'L', 'L', 'C', 'K', 'P', 'T', '0', '1'};

template <class T>
void write_pod(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& in, const std::string& context) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    raise(Err::CheckpointUnreadable, "truncated checkpoint while reading " + context);
  }
  return value;
}
}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), Err::IoFailure, "cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));

  const std::string meta = checkpoint.meta.dump();
  write_pod<uint64_t>(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));

  write_pod<uint64_t>(out, checkpoint.tensors.size());
  for (const auto& [name, tensor] : checkpoint.tensors) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint32_t>(out, static_cast<uint32_t>(tensor.shape.size()));
    for (int d : tensor.shape) write_pod<int32_t>(out, d);
    write_pod<uint64_t>(out, tensor.data.size() * sizeof(float));
    out.write(reinterpret_cast<const char*>(tensor.data.data()),
              static_cast<std::streamsize>(tensor.data.size() * sizeof(float)));
  }
  require(out.good(), Err::IoFailure, "write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) raise(Err::CheckpointUnreadable, "cannot open checkpoint " + path.string());

  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    raise(Err::CheckpointUnreadable, "bad magic in " + path.string());
  }

  Checkpoint out;
  const auto meta_len = read_pod<uint64_t>(in, "meta length");
  std::string meta(meta_len, '\0');
  if (!in.read(meta.data(), static_cast<std::streamsize>(meta_len))) {
    raise(Err::CheckpointUnreadable, "truncated meta in " + path.string());
  }
  try {
    out.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    raise(Err::CheckpointUnreadable, "malformed meta JSON: " + std::string(e.what()));
  }

  const auto count = read_pod<uint64_t>(in, "tensor count");
  for (uint64_t t = 0; t < count; ++t) {
    const auto name_len = read_pod<uint32_t>(in, "tensor name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) {
      raise(Err::CheckpointUnreadable, "truncated tensor name in " + path.string());
    }
    const auto rank = read_pod<uint32_t>(in, "tensor rank");
    std::vector<int> shape(rank);
    for (auto& d : shape) d = read_pod<int32_t>(in, "tensor dim");
    const auto nbytes = read_pod<uint64_t>(in, "tensor size");
    Tensor tensor(shape);
    if (tensor.data.size() * sizeof(float) != nbytes) {
      raise(Err::CheckpointUnreadable, "tensor '" + name + "' size disagrees with its shape");
    }
    if (!in.read(reinterpret_cast<char*>(tensor.data.data()), static_cast<std::streamsize>(nbytes))) {
      raise(Err::CheckpointUnreadable, "truncated tensor data in " + path.string());
    }
    out.tensors.emplace(std::move(name), std::move(tensor));
  }
  return out;
}

}  // namespace lesionlab::nn
