#include "abnn/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <stdexcept>

namespace abnn {

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("dataset " + path.string() + ": truncated");
  }
  return v;
}

constexpr char kDataMagic[8] = {'A', 'B', 'N', 'N', 'D', 'A', 'T', 'A'};

// SplitMix64 finalizer, used to derive per-class layout from the class id.
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Scalar unit(std::uint64_t h) { return static_cast<Scalar>(h >> 11) / static_cast<Scalar>(1ull << 53); }

}  // namespace

void DatasetContainer::validate() const {
  if (channels == 0 || height == 0 || width == 0) throw std::invalid_argument("dataset: zero image extent");
  if (pixels.size() != labels.size() * image_size()) {
    throw std::invalid_argument("dataset: " + std::to_string(pixels.size()) + " pixels for " +
                                std::to_string(labels.size()) + " images of " + std::to_string(image_size()));
  }
  for (auto y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw std::invalid_argument("dataset: label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
  }
  for (auto v : pixels) {
    if (!(v >= 0 && v <= 1)) throw std::invalid_argument("dataset: pixel value outside [0, 1]");
  }
}

Tensor DatasetContainer::images(std::span<const std::size_t> indices) const {
  const auto sz = image_size();
  std::vector<Scalar> out(indices.size() * sz);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw std::out_of_range("dataset: index out of range");
    std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(indices[i] * sz), sz,
                out.begin() + static_cast<std::ptrdiff_t>(i * sz));
  }
  return Tensor(Shape{indices.size(), channels, height, width}, std::move(out));
}

std::vector<int> DatasetContainer::labels_of(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

DatasetContainer DatasetContainer::subset(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw std::out_of_range("dataset: bad subset range");
  DatasetContainer d = *this;
  const auto sz = image_size();
  d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.begin() + static_cast<std::ptrdiff_t>(end));
  d.pixels.assign(pixels.begin() + static_cast<std::ptrdiff_t>(begin * sz),
                  pixels.begin() + static_cast<std::ptrdiff_t>(end * sz));
  return d;
}

DatasetContainer load_cifar10_binary(std::span<const std::filesystem::path> files,
                                     const std::vector<int>& class_subset) {
  std::vector<int> subset = class_subset;
  if (subset.empty()) {
    for (int c = 0; c < 10; ++c) subset.push_back(c);
  }
  int remap[10];
  std::fill(std::begin(remap), std::end(remap), -1);
  for (std::size_t i = 0; i < subset.size(); ++i) {
    const int c = subset[i];
    if (c < 0 || c >= 10) throw std::invalid_argument("cifar10: class " + std::to_string(c) + " outside [0, 10)");
    if (remap[c] != -1) throw std::invalid_argument("cifar10: class " + std::to_string(c) + " listed twice");
    remap[c] = static_cast<int>(i);
  }

  DatasetContainer d;
  d.channels = 3;
  d.height = kCifarSide;
  d.width = kCifarSide;
  d.num_classes = subset.size();
  d.class_subset = subset;
  d.source = "cifar10";
  std::vector<unsigned char> record(kCifarRecordBytes);
  for (const auto& file : files) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw std::runtime_error("cifar10: cannot open " + file.string());
    const auto bytes = std::filesystem::file_size(file);
    if (bytes % kCifarRecordBytes != 0) {
      throw std::runtime_error("cifar10: " + file.string() + " is truncated (" + std::to_string(bytes) +
                               " bytes is not a multiple of 3073)");
    }
    for (std::uintmax_t r = 0; r < bytes / kCifarRecordBytes; ++r) {
      if (!is.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(kCifarRecordBytes))) {
        throw std::runtime_error("cifar10: " + file.string() + " is truncated");
      }
      const int label = record[0];
      if (label >= 10) {
        throw std::runtime_error("cifar10: " + file.string() + " record " + std::to_string(r) + " has label " +
                                 std::to_string(label));
      }
      if (remap[label] < 0) continue;
      d.labels.push_back(remap[label]);
      for (std::size_t i = 1; i < kCifarRecordBytes; ++i) d.pixels.push_back(static_cast<Scalar>(record[i]) / 255);
    }
  }
  return d;
}

DatasetContainer load_cifar10_binary(const std::filesystem::path& file, const std::vector<int>& class_subset) {
  return load_cifar10_binary(std::span<const std::filesystem::path>(&file, 1), class_subset);
}

std::vector<std::filesystem::path> cifar10_split_files(const std::filesystem::path& root, bool train) {
  std::vector<std::filesystem::path> out;
  if (train) {
    for (int i = 1; i <= 5; ++i) out.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    out.push_back(root / "test_batch.bin");
  }
  return out;
}

std::vector<Scalar> synthetic_prototype(const SyntheticSpec& spec, int class_id) {
  const auto C = spec.channels, H = spec.height, W = spec.width;
  const auto h = mix(static_cast<std::uint64_t>(class_id) * 0x2545f4914f6cdd1dull + 17);
  // Blob centre kept one radius inside the frame.
  const Scalar r = spec.blob_radius;
  const Scalar cy = r + unit(mix(h ^ 1)) * std::max<Scalar>(Scalar(H) - 1 - 2 * r, 0);
  const Scalar cx = r + unit(mix(h ^ 2)) * std::max<Scalar>(Scalar(W) - 1 - 2 * r, 0);
  std::vector<Scalar> tint(C);
  for (std::size_t c = 0; c < C; ++c) tint[c] = unit(mix(h ^ (3 + c))) < Scalar(0.5) ? Scalar(-1) : Scalar(1);

  std::vector<Scalar> img(C * H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const Scalar d2 = (Scalar(y) - cy) * (Scalar(y) - cy) + (Scalar(x) - cx) * (Scalar(x) - cx);
      const Scalar blob = std::exp(-d2 / (2 * r * r));
      for (std::size_t c = 0; c < C; ++c) img[(c * H + y) * W + x] = Scalar(0.5) + spec.amplitude * tint[c] * blob;
    }
  }
  return img;
}

DatasetContainer gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.classes.size() < 2) throw std::invalid_argument("synthetic: need at least two classes");
  if (spec.channels == 0 || spec.height == 0 || spec.width == 0) throw std::invalid_argument("synthetic: zero extent");
  if (!(spec.noise >= 0) || !(spec.amplitude > 0) || !(spec.amplitude <= Scalar(0.5))) {
    throw std::invalid_argument("synthetic: need noise >= 0 and amplitude in (0, 0.5]");
  }

  std::vector<std::vector<Scalar>> protos;
  for (int c : spec.classes) protos.push_back(synthetic_prototype(spec, c));
  for (std::size_t a = 0; a < protos.size(); ++a) {
    for (std::size_t b = a + 1; b < protos.size(); ++b) {
      Scalar d2 = 0;
      for (std::size_t i = 0; i < protos[a].size(); ++i) d2 += (protos[a][i] - protos[b][i]) * (protos[a][i] - protos[b][i]);
      if (std::sqrt(d2) < spec.margin) {
        throw std::invalid_argument("synthetic: prototypes of classes " + std::to_string(spec.classes[a]) + " and " +
                                    std::to_string(spec.classes[b]) + " are closer than the declared margin");
      }
    }
  }

  DatasetContainer d;
  d.channels = spec.channels;
  d.height = spec.height;
  d.width = spec.width;
  d.num_classes = spec.classes.size();
  d.class_subset = spec.classes;
  d.source = "synthetic";
  d.labels.resize(spec.samples);
  d.pixels.resize(spec.samples * d.image_size());

  std::mt19937_64 rng(seed);
  std::normal_distribution<Scalar> noise(0, spec.noise);
  const auto sz = d.image_size();
  for (std::size_t i = 0; i < spec.samples; ++i) {
    // Balanced and interleaved so any contiguous slice is roughly balanced.
    const auto label = static_cast<int>(i % spec.classes.size());
    d.labels[i] = label;
    const auto& p = protos[static_cast<std::size_t>(label)];
    for (std::size_t j = 0; j < sz; ++j) {
      d.pixels[i * sz + j] = std::clamp(p[j] + (spec.noise > 0 ? noise(rng) : Scalar(0)), Scalar(0), Scalar(1));
    }
  }
  return d;
}

void save_dataset(const std::filesystem::path& path, const DatasetContainer& data) {
  data.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("dataset " + path.string() + ": cannot open for writing");
  os.write(kDataMagic, sizeof(kDataMagic));
  put<std::uint8_t>(os, kDatasetVersion);
  put<std::uint8_t>(os, sizeof(Scalar));
  for (auto v : {data.size(), data.channels, data.height, data.width, data.num_classes}) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  }
  put<std::uint32_t>(os, static_cast<std::uint32_t>(data.source.size()));
  os.write(data.source.data(), static_cast<std::streamsize>(data.source.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(data.class_subset.size()));
  for (auto c : data.class_subset) put<std::int32_t>(os, c);
  for (auto y : data.labels) put<std::int32_t>(os, y);
  os.write(reinterpret_cast<const char*>(data.pixels.data()),
           static_cast<std::streamsize>(data.pixels.size() * sizeof(Scalar)));
  if (!os) throw std::runtime_error("dataset " + path.string() + ": write failed");
}

DatasetContainer load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset " + path.string() + ": cannot open");
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kDataMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("dataset " + path.string() + ": bad magic");
  }
  if (take<std::uint8_t>(is, path) != kDatasetVersion) {
    throw std::runtime_error("dataset " + path.string() + ": unsupported format version");
  }
  if (take<std::uint8_t>(is, path) != sizeof(Scalar)) {
    throw std::runtime_error("dataset " + path.string() + ": scalar width differs from this build");
  }
  DatasetContainer d;
  const auto m = take<std::uint32_t>(is, path);
  d.channels = take<std::uint32_t>(is, path);
  d.height = take<std::uint32_t>(is, path);
  d.width = take<std::uint32_t>(is, path);
  d.num_classes = take<std::uint32_t>(is, path);
  d.source.resize(take<std::uint32_t>(is, path));
  if (!is.read(d.source.data(), static_cast<std::streamsize>(d.source.size()))) {
    throw std::runtime_error("dataset " + path.string() + ": truncated");
  }
  d.class_subset.resize(take<std::uint32_t>(is, path));
  for (auto& c : d.class_subset) c = take<std::int32_t>(is, path);
  d.labels.resize(m);
  for (auto& y : d.labels) y = take<std::int32_t>(is, path);
  d.pixels.resize(static_cast<std::size_t>(m) * d.image_size());
  if (!is.read(reinterpret_cast<char*>(d.pixels.data()), static_cast<std::streamsize>(d.pixels.size() * sizeof(Scalar)))) {
    throw std::runtime_error("dataset " + path.string() + ": truncated");
  }
  d.validate();
  return d;
}

}  // namespace abnn
