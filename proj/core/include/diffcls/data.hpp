#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "diffcls/networks.hpp"
#include "diffcls/random.hpp"
#include "diffcls/tensor.hpp"

namespace diffcls {

/// Labeled images with pixel values in [0, 1], stored row-major N x ch x H x W.
struct Dataset {
  ImageShape image;
  std::size_t classes = 0;
  std::vector<double> pixels;
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  /// One image, shape [ch x H x W].
  Tensor image_at(std::size_t index) const;
  /// Stacked images [indices.size() x ch x H x W].
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> labels_at(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;
  /// Throws FormatError when an invariant is broken.
  void validate() const;
};

enum class SyntheticKind { Blobs, StripesVsChecker };

std::string to_string(SyntheticKind kind);
SyntheticKind parse_synthetic_kind(const std::string& name);

struct SyntheticSpec {
  std::size_t n_per_class = 500;
  SyntheticKind kind = SyntheticKind::StripesVsChecker;
  std::size_t image_size = 16;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
};

/// Two-class procedural images plus clamped pixel noise.
///   stripes-vs-checker: class 0 horizontal stripes (period 4), class 1 a
///   checkerboard of 2x2 cells; the pattern phase is drawn per image.
///   blobs: a Gaussian blob near the top-left (class 0) or bottom-right
///   (class 1) corner, centre jittered by up to one pixel.
Dataset generate_synthetic(const SyntheticSpec& spec);

struct SplitSpec {
  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;
  std::uint64_t seed = 0;
};

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Stratified split; per class the validation and test counts are the
/// rounded fractions and training takes the remainder.
Splits split(const Dataset& data, const SplitSpec& spec);

struct AugmentConfig {
  std::size_t crop_size = 0;  // 0: ceil(0.9 * H)
  double flip_prob = 0.5;
  bool rotate = true;
};

/// Centre crop to crop x crop, then nearest-neighbour resize back to H x W.
Tensor center_crop_resize(const Tensor& image, std::size_t crop);
Tensor flip_horizontal(const Tensor& image);
/// Counter-clockwise rotation by quarter_turns * 90 degrees.
Tensor rotate90(const Tensor& image, int quarter_turns);
/// Crop-resize, random horizontal flip, random right-angle rotation.
Tensor augment(const Tensor& image, Rng& rng, const AugmentConfig& cfg = {});
/// Applies `augment` to every image of a batch [B x ch x H x W].
Tensor augment_batch(const Tensor& images, Rng& rng, const AugmentConfig& cfg = {});

/// Binary dataset file ("DSET", version u16, N/ch/H/W/C as u32, N u16
/// labels, N*ch*H*W f32 pixels; little-endian) plus a JSON manifest next
/// to it with the same stem.
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);
std::filesystem::path manifest_path(const std::filesystem::path& dataset_path);

}  // namespace diffcls
