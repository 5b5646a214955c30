#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "abnn/tensor.hpp"

namespace abnn {

/// Labelled image set. Pixels are [M, C, H, W] row-major in [0, 1]; label i
/// corresponds to the original class id class_subset[i].
struct DatasetContainer {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Scalar> pixels;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string source;
  std::vector<int> class_subset;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }

  /// Throws if labels, pixel range or extents are inconsistent.
  void validate() const;

  Tensor images(std::span<const std::size_t> indices) const;
  std::vector<int> labels_of(std::span<const std::size_t> indices) const;
  /// Contiguous [begin, end) slice.
  DatasetContainer subset(std::size_t begin, std::size_t end) const;
};

// CIFAR-10 binary layout: 3073-byte records, one label byte followed by
// 1024 red, 1024 green and 1024 blue bytes, each plane row-major 32x32.
inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * kCifarSide * kCifarSide;

/// Loads the records of `files` whose label is in `class_subset` (all ten
/// classes when empty). Labels are remapped to their index in the subset.
DatasetContainer load_cifar10_binary(std::span<const std::filesystem::path> files,
                                     const std::vector<int>& class_subset);
DatasetContainer load_cifar10_binary(const std::filesystem::path& file, const std::vector<int>& class_subset);

/// data_batch_1..5.bin (train) or test_batch.bin under `root`.
std::vector<std::filesystem::path> cifar10_split_files(const std::filesystem::path& root, bool train);

/// Gaussian-blob image task. Every class id owns a prototype image: a mid-gray
/// background plus one coloured Gaussian blob whose position and tint are a
/// deterministic function of the class id. Samples are prototype + i.i.d.
/// Gaussian pixel noise, clipped to [0, 1].
struct SyntheticSpec {
  std::size_t samples = 512;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<int> classes{0, 1};
  Scalar amplitude = Scalar(0.25);
  Scalar blob_radius = Scalar(4);
  Scalar noise = Scalar(0.1);
  /// Minimum L2 distance between any two class prototypes; generation fails
  /// if the prototypes are closer.
  Scalar margin = Scalar(1);
};

DatasetContainer gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

/// Noise-free prototype image of a class id, [C*H*W].
std::vector<Scalar> synthetic_prototype(const SyntheticSpec& spec, int class_id);

/// Dataset container file (little-endian):
///   "ABNNDATA" magic, u8 version, u8 scalar width,
///   u32 M, u32 C, u32 H, u32 W, u32 num_classes,
///   u32 source length + bytes, u32 subset length + i32[subset],
///   i32 labels[M], scalar pixels[M*C*H*W]
inline constexpr std::uint8_t kDatasetVersion = 1;
void save_dataset(const std::filesystem::path& path, const DatasetContainer& data);
DatasetContainer load_dataset(const std::filesystem::path& path);

}  // namespace abnn
