#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "udes/data.hpp"
#include "udes/errors.hpp"

using namespace udes;

namespace {

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>((v >> s) & 0xff));
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
  std::vector<unsigned char> b;
  put_be32(b, kIdxImageMagic);
  put_be32(b, n);
  put_be32(b, rows);
  put_be32(b, cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) b.push_back(static_cast<unsigned char>(i * 37 % 256));
  return b;
}

std::vector<unsigned char> idx_labels(const std::vector<unsigned char>& y) {
  std::vector<unsigned char> b;
  put_be32(b, kIdxLabelMagic);
  put_be32(b, static_cast<std::uint32_t>(y.size()));
  b.insert(b.end(), y.begin(), y.end());
  return b;
}

std::filesystem::path temp_file(const std::string& name, const std::vector<unsigned char>& bytes) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return p;
}

}  // namespace

TEST_CASE("two moons: size, balance, box and determinism") {
  RngStream a(1), b(1), c(2);
  const auto d = gen_two_moons(1001, 0.1, a);
  CHECK(d.size() == 1001);
  CHECK(d.sample_shape == Shape{2});
  CHECK(d.num_classes == 2);
  CHECK_NOTHROW(d.validate());
  int ones = 0;
  for (int y : d.labels) ones += y;
  CHECK(std::abs(2 * ones - 1001) <= 1);
  CHECK(gen_two_moons(1001, 0.1, b) == d);
  CHECK_FALSE(gen_two_moons(1001, 0.1, c) == d);
  CHECK_THROWS_AS(gen_two_moons(1, 0.1, a), ContractError);
  CHECK_THROWS_AS(gen_two_moons(10, -0.1, a), DomainError);
}

TEST_CASE("two moons without noise lie on the mapped half circles") {
  RngStream rng(3);
  const auto d = gen_two_moons(200, 0.0, rng);
  const auto f = two_moons_frame(0.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x = d.inputs[2 * i] * f.scale_x + f.origin_x;
    const double y = d.inputs[2 * i + 1] * f.scale_y + f.origin_y;
    const double cx = d.labels[i] == 0 ? 0.0 : 1.0, cy = d.labels[i] == 0 ? 0.0 : 0.5;
    CHECK(std::hypot(x - cx, y - cy) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK((d.labels[i] == 0 ? y >= -1e-12 : y <= 0.5 + 1e-12));
  }
}

TEST_CASE("blobs and quadrant images") {
  RngStream rng(4);
  const auto b = gen_blobs(100, rng);
  CHECK_NOTHROW(b.validate());
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double cx = b.labels[i] == 0 ? 0.25 : 0.75;
    CHECK(std::abs(b.inputs[2 * i] - cx) < 0.25);
  }
  const auto q = gen_quadrant_images(40, 6, 4, 0.0, rng);
  CHECK(q.sample_shape == Shape{1, 6, 6});
  CHECK_NOTHROW(q.validate());
  for (std::size_t i = 0; i < q.size(); ++i) {
    const int y = q.labels[i];
    const std::size_t r0 = (y / 2) * 3, c0 = (y % 2) * 3;
    CHECK(q.inputs[i * 36 + (r0 + 1) * 6 + c0 + 1] == doctest::Approx(0.8));
    const std::size_t r1 = ((y / 2) ^ 1) * 3;
    CHECK(q.inputs[i * 36 + (r1 + 1) * 6 + c0 + 1] == doctest::Approx(0.2));
  }
  CHECK_THROWS_AS(gen_quadrant_images(4, 6, 5, 0.0, rng), ContractError);
  CHECK_THROWS_AS(gen_quadrant_images(4, 5, 2, 0.0, rng), ContractError);
}

TEST_CASE("subsets, heads, samples and tensors") {
  RngStream rng(5);
  const auto d = gen_two_moons(50, 0.1, rng);
  const std::vector<std::size_t> idx{4, 0, 9};
  const auto s = d.subset(idx);
  CHECK(s.size() == 3);
  CHECK(s.labels[0] == d.labels[4]);
  CHECK(s.inputs[1] == d.inputs[9]);
  const auto t = d.inputs_tensor(idx);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.at(4) == d.inputs[18]);
  CHECK(d.labels_of(idx) == s.labels);
  CHECK(d.head(7).labels == std::vector<int>(d.labels.begin(), d.labels.begin() + 7));
  const auto smp = d.sample(20, rng);
  CHECK(smp.size() == 20);
  CHECK_THROWS_AS(d.inputs_tensor(std::vector<std::size_t>{50}), ContractError);
  Dataset bad = d;
  bad.inputs[0] = 1.5;
  CHECK_THROWS_AS(bad.validate(), FormatError);
  bad = d;
  bad.labels[0] = 2;
  CHECK_THROWS_AS(bad.validate(), FormatError);
}

TEST_CASE("batch iteration covers every index once") {
  RngStream rng(6);
  const auto batches = batch_iter(103, 10, true, rng);
  CHECK(batches.size() == 11);
  CHECK(batches.back().size() == 3);
  std::set<std::size_t> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  CHECK(seen.size() == 103);
  const auto ordered = batch_iter(5, 2, false, rng);
  CHECK(ordered[0] == std::vector<std::size_t>{0, 1});
  CHECK_THROWS_AS(batch_iter(5, 0, false, rng), ContractError);
}

TEST_CASE("IDX parsing") {
  const auto img = idx_images(3, 2, 2);
  const auto lab = idx_labels({1, 0, 7});
  const auto d = parse_idx(img, lab, Split::test);
  CHECK(d.size() == 3);
  CHECK(d.sample_shape == Shape{1, 2, 2});
  CHECK(d.num_classes == 8);
  CHECK(d.split == Split::test);
  CHECK(d.inputs[1] == 37.0 / 255.0);
  CHECK_NOTHROW(d.validate());

  auto expect_kind = [](auto&& fn, IdxError::Kind k) {
    try {
      fn();
      FAIL("expected IdxError");
    } catch (const IdxError& e) {
      CHECK(e.kind() == k);
    }
  };
  auto bad_magic = img;
  bad_magic[3] = 0x02;
  expect_kind([&] { parse_idx(bad_magic, lab); }, IdxError::Kind::bad_magic);
  expect_kind([&] { parse_idx(img, idx_images(3, 2, 2)); }, IdxError::Kind::bad_magic);
  expect_kind([&] { parse_idx(std::vector<unsigned char>(img.begin(), img.end() - 1), lab); }, IdxError::Kind::truncated);
  expect_kind([&] { parse_idx(std::vector<unsigned char>(img.begin(), img.begin() + 10), lab); },
              IdxError::Kind::truncated);
  expect_kind([&] { parse_idx(img, idx_labels({1, 0})); }, IdxError::Kind::count_mismatch);
  expect_kind([&] { load_idx("/nonexistent/images", "/nonexistent/labels"); }, IdxError::Kind::io);

  const auto pi = temp_file("udes_idx_images", img);
  const auto pl = temp_file("udes_idx_labels", lab);
  CHECK(load_idx(pi.string(), pl.string()) == parse_idx(img, lab));
  // Relative names resolve against DES_DATA_DIR.
  ::setenv("DES_DATA_DIR", std::filesystem::temp_directory_path().c_str(), 1);
  CHECK(load_idx("udes_idx_images", "udes_idx_labels") == parse_idx(img, lab));
  CHECK(resolve_data_path("/abs/path") == "/abs/path");
  ::unsetenv("DES_DATA_DIR");
  CHECK(resolve_data_path("rel") == "rel");
  std::filesystem::remove(pi);
  std::filesystem::remove(pl);
}

TEST_CASE("CIFAR-10 binary parsing") {
  std::vector<unsigned char> bytes;
  for (int r = 0; r < 4; ++r) {
    bytes.push_back(static_cast<unsigned char>(r * 3));
    for (std::size_t i = 0; i < 3072; ++i) bytes.push_back(static_cast<unsigned char>((i + r) % 256));
  }
  const auto d = parse_cifar10_bin(bytes);
  CHECK(d.size() == 4);
  CHECK(d.sample_shape == Shape{3, 32, 32});
  CHECK(d.labels == std::vector<int>{0, 3, 6, 9});
  CHECK(d.inputs[3072 + 1] == 2.0 / 255.0);
  CHECK_THROWS_AS(parse_cifar10_bin(std::vector<unsigned char>(bytes.begin(), bytes.end() - 1)), FormatError);
  auto bad = bytes;
  bad[0] = 10;
  CHECK_THROWS_AS(parse_cifar10_bin(bad), FormatError);

  const auto p = temp_file("udes_cifar.bin", bytes);
  const auto all = load_cifar10_bin({p.string(), p.string()});
  CHECK(all.size() == 8);
  const auto sub = load_cifar10_bin({p.string()}, 2, 7);
  CHECK(sub.size() == 2);
  CHECK(load_cifar10_bin({p.string()}, 2, 7) == sub);
  CHECK_THROWS_AS(load_cifar10_bin({"/nonexistent.bin"}), FormatError);
  std::filesystem::remove(p);
}

TEST_CASE("dataset files round-trip exactly") {
  RngStream rng(9);
  auto d = gen_two_moons(30, 0.2, rng);
  d.split = Split::test;
  CHECK(dataset_from_string(dataset_to_string(d)) == d);
  const auto p = (std::filesystem::temp_directory_path() / "udes_ds.json").string();
  save_dataset(d, p);
  CHECK(load_dataset(p) == d);
  std::filesystem::remove(p);
  CHECK_THROWS_AS(dataset_from_string("{\"format\":\"nope\"}"), FormatError);
  CHECK_THROWS_AS(dataset_from_string("garbage"), FormatError);
  CHECK_THROWS_AS(load_dataset("/nonexistent.json"), FormatError);
}
