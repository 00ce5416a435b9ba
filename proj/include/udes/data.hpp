#pragma once

#include <span>
#include <string>
#include <vector>

#include "udes/numerics.hpp"
#include "udes/tensor.hpp"

namespace udes {

enum class Split { train, test };

/// Samples with inputs in [0, 1]. inputs holds size() * numel(sample_shape)
/// values, sample-major.
struct Dataset {
  Shape sample_shape;
  std::vector<double> inputs;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return shape_numel(sample_shape); }
  void validate() const;

  Tensor inputs_tensor() const;
  Tensor inputs_tensor(std::span<const std::size_t> indices) const;
  std::vector<int> labels_of(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;
  /// Random subset of n samples (without replacement), original order kept.
  Dataset sample(std::size_t n, RngStream& rng) const;
  /// First `n` samples.
  Dataset head(std::size_t n) const;

  bool operator==(const Dataset&) const = default;
};

/// Affine frame used to map the raw moons (x in [-1, 2], y in [-0.5, 1]) into
/// the unit square: mapped = (raw - origin) / scale.
struct TwoMoonsFrame {
  double origin_x, origin_y, scale_x, scale_y;
};
TwoMoonsFrame two_moons_frame(double noise);

/// Two interleaved half circles, labels balanced to within one sample.
Dataset gen_two_moons(std::size_t n, double noise, RngStream& rng);
/// Two well-separated Gaussian blobs in [0, 1]^2 (linearly separable).
Dataset gen_blobs(std::size_t n, RngStream& rng);
/// Small single-channel images whose class decides which quadrant carries a
/// bright patch. For image-profile tests.
Dataset gen_quadrant_images(std::size_t n, std::size_t side, std::size_t classes, double noise, RngStream& rng);

/// Raised by the IDX reader; kind tells the failure modes apart.
class IdxError : public std::runtime_error {
 public:
  enum class Kind { bad_magic, truncated, count_mismatch, io };
  IdxError(Kind k, const std::string& what) : std::runtime_error(what), kind_(k) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
constexpr std::size_t kCifarRecordBytes = 3073;

/// Relative paths are resolved against $DES_DATA_DIR when it is set.
std::string resolve_data_path(const std::string& path);

Dataset load_idx(const std::string& images_path, const std::string& labels_path, Split split = Split::train);
Dataset parse_idx(std::span<const unsigned char> images, std::span<const unsigned char> labels, Split split = Split::train);
/// subset = 0 keeps every record; otherwise a seeded random subset.
Dataset load_cifar10_bin(const std::vector<std::string>& paths, std::size_t subset = 0, std::uint64_t seed = 0,
                         Split split = Split::train);
Dataset parse_cifar10_bin(std::span<const unsigned char> bytes, Split split = Split::train);

/// Index batches covering every sample once; the last batch may be short.
std::vector<std::vector<std::size_t>> batch_iter(std::size_t size, std::size_t batch_size, bool shuffle,
                                                 RngStream& rng);

std::string dataset_to_string(const Dataset& ds);
Dataset dataset_from_string(const std::string& text);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace udes
