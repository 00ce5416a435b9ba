#include "udes/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "udes/errors.hpp"

namespace udes {

using nlohmann::json;

void Dataset::validate() const {
  if (num_classes < 2) throw FormatError("dataset: need at least two classes");
  if (inputs.size() != size() * sample_numel()) throw FormatError("dataset: input count does not match labels");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw FormatError("dataset: label out of range");
  }
  for (double v : inputs) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw FormatError("dataset: inputs must be finite and in [0, 1]");
  }
}

Tensor Dataset::inputs_tensor() const {
  Shape s{size()};
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  return Tensor::from(std::move(s), inputs);
}

Tensor Dataset::inputs_tensor(std::span<const std::size_t> indices) const {
  const std::size_t w = sample_numel();
  std::vector<double> v;
  v.reserve(indices.size() * w);
  for (auto i : indices) {
    if (i >= size()) throw ContractError("dataset: sample index out of range");
    v.insert(v.end(), inputs.begin() + static_cast<long>(i * w), inputs.begin() + static_cast<long>((i + 1) * w));
  }
  Shape s{indices.size()};
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  return Tensor::from(std::move(s), std::move(v));
}

std::vector<int> Dataset::labels_of(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d;
  d.sample_shape = sample_shape;
  d.num_classes = num_classes;
  d.split = split;
  const auto t = inputs_tensor(indices);
  d.inputs.assign(t.data().begin(), t.data().end());
  d.labels = labels_of(indices);
  return d;
}

Dataset Dataset::sample(std::size_t n, RngStream& rng) const {
  std::vector<std::size_t> idx(size());
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx.begin(), idx.end());
  idx.resize(std::min(n, idx.size()));
  std::sort(idx.begin(), idx.end());
  return subset(idx);
}

Dataset Dataset::head(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  std::iota(idx.begin(), idx.end(), 0);
  return subset(idx);
}

// ---------------------------------------------------------------------------
// synthetic tasks

TwoMoonsFrame two_moons_frame(double noise) {
  const double margin = 3.0 * noise + 0.05;
  return {-1.0 - margin, -0.5 - margin, 3.0 + 2.0 * margin, 1.5 + 2.0 * margin};
}

Dataset gen_two_moons(std::size_t n, double noise, RngStream& rng) {
  if (n < 2) throw ContractError("gen_two_moons: need at least two samples");
  if (!(noise >= 0.0)) throw DomainError("gen_two_moons: noise must be non-negative");
  const std::size_t n0 = (n + 1) / 2, n1 = n / 2;
  const auto frame = two_moons_frame(noise);
  Dataset d;
  d.sample_shape = {2};
  d.num_classes = 2;
  std::vector<std::pair<std::array<double, 2>, int>> pts;
  auto push = [&](double x, double y, int label) {
    x = std::clamp((x + noise * rng.normal() - frame.origin_x) / frame.scale_x, 0.0, 1.0);
    y = std::clamp((y + noise * rng.normal() - frame.origin_y) / frame.scale_y, 0.0, 1.0);
    pts.push_back({{x, y}, label});
  };
  for (std::size_t i = 0; i < n0; ++i) {
    const double t = n0 > 1 ? std::numbers::pi * static_cast<double>(i) / static_cast<double>(n0 - 1) : 0.0;
    push(std::cos(t), std::sin(t), 0);
  }
  for (std::size_t i = 0; i < n1; ++i) {
    const double t = n1 > 1 ? std::numbers::pi * static_cast<double>(i) / static_cast<double>(n1 - 1) : 0.0;
    push(1.0 - std::cos(t), 0.5 - std::sin(t), 1);
  }
  rng.shuffle(pts.begin(), pts.end());
  for (const auto& [p, y] : pts) {
    d.inputs.push_back(p[0]);
    d.inputs.push_back(p[1]);
    d.labels.push_back(y);
  }
  return d;
}

Dataset gen_blobs(std::size_t n, RngStream& rng) {
  if (n < 2) throw ContractError("gen_blobs: need at least two samples");
  Dataset d;
  d.sample_shape = {2};
  d.num_classes = 2;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    const double c = y == 0 ? 0.25 : 0.75;
    d.inputs.push_back(std::clamp(c + 0.05 * rng.normal(), 0.0, 1.0));
    d.inputs.push_back(std::clamp(c + 0.05 * rng.normal(), 0.0, 1.0));
    d.labels.push_back(y);
  }
  return d;
}

Dataset gen_quadrant_images(std::size_t n, std::size_t side, std::size_t classes, double noise, RngStream& rng) {
  if (classes < 2 || classes > 4) throw ContractError("gen_quadrant_images: 2 to 4 classes");
  if (side < 4 || side % 2) throw ContractError("gen_quadrant_images: side must be even and >= 4");
  Dataset d;
  d.sample_shape = {1, side, side};
  d.num_classes = classes;
  const std::size_t half = side / 2;
  for (std::size_t s = 0; s < n; ++s) {
    const int y = static_cast<int>(s % classes);
    const std::size_t qi = static_cast<std::size_t>(y) / 2, qj = static_cast<std::size_t>(y) % 2;
    for (std::size_t i = 0; i < side; ++i)
      for (std::size_t j = 0; j < side; ++j) {
        const bool lit = i / half == qi && j / half == qj;
        d.inputs.push_back(std::clamp((lit ? 0.8 : 0.2) + noise * rng.normal(), 0.0, 1.0));
      }
    d.labels.push_back(y);
  }
  return d;
}

// ---------------------------------------------------------------------------
// file formats

std::string resolve_data_path(const std::string& path) {
  namespace fs = std::filesystem;
  if (fs::path(path).is_absolute()) return path;
  if (const char* dir = std::getenv("DES_DATA_DIR"); dir && *dir) return (fs::path(dir) / path).string();
  return path;
}

namespace {

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream is(resolve_data_path(path), std::ios::binary);
  if (!is) throw IdxError(IdxError::Kind::io, "cannot open " + resolve_data_path(path));
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), {});
}

std::uint32_t be32(std::span<const unsigned char> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace

Dataset parse_idx(std::span<const unsigned char> images, std::span<const unsigned char> labels, Split split) {
  using K = IdxError::Kind;
  if (images.size() < 16) throw IdxError(K::truncated, "idx images: header truncated");
  if (be32(images, 0) != kIdxImageMagic) throw IdxError(K::bad_magic, "idx images: bad magic number");
  if (labels.size() < 8) throw IdxError(K::truncated, "idx labels: header truncated");
  if (be32(labels, 0) != kIdxLabelMagic) throw IdxError(K::bad_magic, "idx labels: bad magic number");
  const std::size_t n = be32(images, 4), rows = be32(images, 8), cols = be32(images, 12);
  const std::size_t nl = be32(labels, 4);
  if (n != nl) {
    throw IdxError(K::count_mismatch, "idx: " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  }
  if (images.size() < 16 + n * rows * cols) throw IdxError(K::truncated, "idx images: pixel data truncated");
  if (labels.size() < 8 + n) throw IdxError(K::truncated, "idx labels: label data truncated");
  Dataset d;
  d.sample_shape = {1, rows, cols};
  d.split = split;
  d.inputs.resize(n * rows * cols);
  for (std::size_t i = 0; i < d.inputs.size(); ++i) d.inputs[i] = images[16 + i] / 255.0;
  int max_label = 1;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels.push_back(labels[8 + i]);
    max_label = std::max(max_label, d.labels.back());
  }
  d.num_classes = static_cast<std::size_t>(max_label) + 1;
  return d;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path, Split split) {
  const auto img = read_bytes(images_path);
  const auto lab = read_bytes(labels_path);
  return parse_idx(img, lab, split);
}

Dataset parse_cifar10_bin(std::span<const unsigned char> bytes, Split split) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError("cifar10: byte length " + std::to_string(bytes.size()) + " is not a multiple of 3073");
  }
  Dataset d;
  d.sample_shape = {3, 32, 32};
  d.num_classes = 10;
  d.split = split;
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  d.inputs.reserve(n * 3072);
  for (std::size_t r = 0; r < n; ++r) {
    const auto rec = bytes.subspan(r * kCifarRecordBytes, kCifarRecordBytes);
    if (rec[0] > 9) throw FormatError("cifar10: label " + std::to_string(rec[0]) + " outside 0..9");
    d.labels.push_back(rec[0]);
    for (std::size_t i = 1; i < kCifarRecordBytes; ++i) d.inputs.push_back(rec[i] / 255.0);
  }
  return d;
}

Dataset load_cifar10_bin(const std::vector<std::string>& paths, std::size_t subset, std::uint64_t seed, Split split) {
  Dataset all;
  all.sample_shape = {3, 32, 32};
  all.num_classes = 10;
  all.split = split;
  for (const auto& p : paths) {
    std::ifstream is(resolve_data_path(p), std::ios::binary);
    if (!is) throw FormatError("cifar10: cannot open " + resolve_data_path(p));
    const std::vector<unsigned char> bytes(std::istreambuf_iterator<char>(is), {});
    auto part = parse_cifar10_bin(bytes, split);
    all.inputs.insert(all.inputs.end(), part.inputs.begin(), part.inputs.end());
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
  }
  if (subset == 0 || subset >= all.size()) return all;
  RngStream rng(seed);
  return all.sample(subset, rng);
}

std::vector<std::vector<std::size_t>> batch_iter(std::size_t size, std::size_t batch_size, bool shuffle,
                                                 RngStream& rng) {
  if (batch_size < 1) throw ContractError("batch_iter: batch_size must be at least 1");
  std::vector<std::size_t> order(size);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < size; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(std::min(size, i + batch_size)));
  }
  return out;
}

std::string dataset_to_string(const Dataset& ds) {
  json j;
  j["format"] = "udes-dataset";
  j["version"] = 1;
  j["sample_shape"] = ds.sample_shape;
  j["num_classes"] = ds.num_classes;
  j["split"] = ds.split == Split::train ? "train" : "test";
  j["labels"] = ds.labels;
  j["inputs"] = ds.inputs;
  return j.dump();
}

Dataset dataset_from_string(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.at("format") != "udes-dataset") throw FormatError("dataset: unknown format tag");
    Dataset d;
    d.sample_shape = j.at("sample_shape").get<Shape>();
    d.num_classes = j.at("num_classes").get<std::size_t>();
    d.split = j.at("split") == "test" ? Split::test : Split::train;
    d.labels = j.at("labels").get<std::vector<int>>();
    d.inputs = j.at("inputs").get<std::vector<double>>();
    d.validate();
    return d;
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset: ") + e.what());
  }
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open dataset file for writing: " + path);
  os << dataset_to_string(ds);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return dataset_from_string(ss.str());
}

}  // namespace udes
