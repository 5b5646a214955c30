#include "abnn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace abnn {

namespace {

constexpr char kMagic[8] = {'A', 'B', 'N', 'N', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("checkpoint " + path.string() + ": truncated");
  }
  return v;
}

struct Fnv {
  std::uint64_t h = 1469598103934665603ull;
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  }
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint " + path.string() + ": cannot open for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint8_t>(os, kCheckpointVersion);
  put<std::uint8_t>(os, sizeof(Scalar));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.value.rank()));
    for (auto d : t.value.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.value.data().data()),
             static_cast<std::streamsize>(t.value.numel() * sizeof(Scalar)));
  }
  if (!os) throw std::runtime_error("checkpoint " + path.string() + ": write failed");
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint " + path.string() + ": cannot open");
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint " + path.string() + ": bad magic");
  }
  const auto version = take<std::uint8_t>(is, path);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint " + path.string() + ": unsupported format version " +
                             std::to_string(version));
  }
  const auto width = take<std::uint8_t>(is, path);
  if (width != sizeof(Scalar)) {
    throw std::runtime_error("checkpoint " + path.string() + ": stored with " + std::to_string(width) +
                             "-byte scalars, this build uses " + std::to_string(sizeof(Scalar)));
  }
  const auto count = take<std::uint32_t>(is, path);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = take<std::uint32_t>(is, path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error("checkpoint " + path.string() + ": truncated");
    const auto rank = take<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(take<std::uint64_t>(is, path));
    std::vector<Scalar> data(numel(shape));
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(Scalar)))) {
      throw std::runtime_error("checkpoint " + path.string() + ": truncated");
    }
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("checkpoint " + path.string() + ": trailing bytes");
  }
  return out;
}

std::uint64_t tensor_digest(std::span<const NamedTensor> tensors) {
  Fnv f;
  for (const auto& t : tensors) {
    f.bytes(t.name.data(), t.name.size());
    for (auto d : t.value.shape()) {
      const std::uint64_t e = d;
      f.bytes(&e, sizeof(e));
    }
    f.bytes(t.value.data().data(), t.value.numel() * sizeof(Scalar));
  }
  return f.h;
}

std::uint64_t parameter_digest(const BNNetwork& model) { return tensor_digest(model.state()); }

}  // namespace abnn
