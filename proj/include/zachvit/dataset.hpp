#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "zachvit/rng.hpp"
#include "zachvit/tensor.hpp"

namespace zachvit {

enum class TaskKind : std::uint8_t { Binary = 0, Multiclass = 1 };

std::string to_string(TaskKind k);

/// Images as n x H x W x C bytes plus one label byte per image.
struct DatasetSplit {
  std::size_t height = 0, width = 0, channels = 0;
  std::size_t class_count = 0;
  TaskKind task = TaskKind::Multiclass;
  std::vector<std::uint8_t> images;
  std::vector<std::uint8_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_bytes() const noexcept { return height * width * channels; }
  std::span<const std::uint8_t> image(std::size_t i) const;

  /// Throws ValidationError when labels, sizes or task kind are inconsistent.
  void validate() const;
};

/// ZVDS container, all integers little-endian:
///   "ZVDS" | version u32 = 1 | n u32 | H u16 | W u16 | C u8 |
///   class_count u16 | task_kind u8 (0 binary, 1 multiclass) |
///   n*H*W*C image bytes | n label bytes
inline constexpr std::uint32_t kContainerVersion = 1;

std::string serialize_container(const DatasetSplit& split);
DatasetSplit parse_container(std::string_view bytes);
void save_container(const std::filesystem::path& path, const DatasetSplit& split);
DatasetSplit load_container(const std::filesystem::path& path);

/// Corner-aligned bilinear resize of an H x W x C byte image to S x S x C.
/// Values stay on the 0..255 scale, clamped, unrounded.
Tensor resize_bilinear(std::span<const std::uint8_t> image, std::size_t height, std::size_t width,
                       std::size_t channels, std::size_t target);

/// Model input for image i: resized to `size` and divided by 255.
Tensor image_tensor(const DatasetSplit& split, std::size_t i, std::size_t size);

struct FewShotSample {
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  /// Grouped by class in ascending class order; within a class, draw order.
  std::vector<std::size_t> indices;
};

/// Stratified draw of min(k, available) indices per class without replacement.
FewShotSample few_shot_sample(const DatasetSplit& split, std::size_t k, std::uint64_t seed);
/// Same draw, consuming from an existing stream.
std::vector<std::size_t> few_shot_indices(const DatasetSplit& split, std::size_t k, Rng& rng);

DatasetSplit subset(const DatasetSplit& split, std::span<const std::size_t> indices);

enum class SyntheticMode {
  /// Each class has its own pixel-intensity distribution, identical at
  /// every position: separable from local statistics alone.
  PatchHistogram,
  /// A bright textured marker patch on a blank background; class c places
  /// it at a fixed raster position. Images i and i' with the same pair
  /// index (i / class_count) hold identical multisets of patches.
  Layout,
};

struct SyntheticSpec {
  std::size_t class_count = 2;
  std::size_t n_per_class = 50;
  std::size_t size = 8;
  SyntheticMode mode = SyntheticMode::PatchHistogram;
  std::size_t patch_size = 4;  // layout grid; must divide size
  std::size_t channels = 1;
  std::uint64_t seed = 0;
};

/// Images are interleaved by class: image i has label i % class_count.
DatasetSplit make_synthetic(const SyntheticSpec& spec);

}  // namespace zachvit
