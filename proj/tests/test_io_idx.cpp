#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <random>

#include "ktn/idx.hpp"
#include "ktn/io.hpp"

namespace {

namespace fs = std::filesystem;
using ktn::Tensor;

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "ktn_io_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<std::uint8_t> be32(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
          static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t r, std::uint32_t c,
                                     std::vector<std::uint8_t> payload) {
  std::vector<std::uint8_t> b;
  for (auto v : {0x803u, n, r, c}) {
    const auto w = be32(v);
    b.insert(b.end(), w.begin(), w.end());
  }
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

TEST(Ktnt, RandomTensorRoundTripsBitExactly) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 3.0);
  Tensor t({3, 4, 5});
  for (auto& v : t.values()) v = static_cast<float>(n(rng));  // representable in f32
  const auto path = scratch("round.ktnt");
  ktn::io::save_tensor(path, t);
  EXPECT_EQ(ktn::io::load_tensor(path), t);
  const auto bytes = ktn::io::read_file(path);
  EXPECT_EQ(bytes.size(), 4 + 2 + 1 + 1 + 3 * 4 + 4 * t.size());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "KTNT");
}

TEST(Ktnt, HeaderDeclaresPayloadLength) {
  ktn::io::KtntHeader h = ktn::io::make_header(Tensor({40, 20, 128}), ktn::io::DType::f32);
  EXPECT_EQ(h.payload_bytes(), 409600u);
  EXPECT_EQ(h.header_bytes(), 20u);
}

TEST(Ktnt, RankZeroIsRejected) {
  EXPECT_THROW(ktn::io::save_tensor(scratch("r0.ktnt"), Tensor()), ktn::ShapeError);
  std::vector<std::uint8_t> bytes{'K', 'T', 'N', 'T', 1, 0, 0, 0};
  std::size_t off = 0;
  EXPECT_THROW(ktn::io::decode_tensor(bytes, off), ktn::FormatError);
}

TEST(Ktnt, BadMagicVersionAndLengthAreRejected) {
  std::vector<std::uint8_t> good;
  ktn::io::encode_tensor(Tensor({2, 2}, 1.0), good);
  auto bad = good;
  bad[0] = 'X';
  std::size_t off = 0;
  try {
    ktn::io::decode_tensor(bad, off);
    FAIL() << "bad magic accepted";
  } catch (const ktn::FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  bad = good;
  bad[4] = 9;
  off = 0;
  EXPECT_THROW(ktn::io::decode_tensor(bad, off), ktn::FormatError);
  bad = good;
  bad.resize(bad.size() - 3);
  off = 0;
  EXPECT_THROW(ktn::io::decode_tensor(bad, off), ktn::FormatError);
  const auto path = scratch("trail.ktnt");
  good.push_back(0);
  ktn::io::write_file(path, good);
  EXPECT_THROW(ktn::io::load_tensor(path), ktn::FormatError);
}

TEST(Ktnt, U8ArraysRoundTrip) {
  ktn::io::U8Array a{{2, 3, 1}, {0, 1, 2, 253, 254, 255}};
  const auto path = scratch("u8.ktnt");
  ktn::io::save_u8(path, a);
  const auto b = ktn::io::load_u8(path);
  EXPECT_EQ(b.dims, a.dims);
  EXPECT_EQ(b.bytes, a.bytes);
  const Tensor t = ktn::io::load_tensor(path);
  EXPECT_DOUBLE_EQ(t[5], 1.0);
  EXPECT_DOUBLE_EQ(t[3], 253.0 / 255.0);
  EXPECT_THROW(ktn::io::save_u8(path, {{2, 2}, {1, 2, 3}}), ktn::ShapeError);
}

TEST(Ktnt, SeveralTensorsInOneFile) {
  const std::vector<Tensor> ts{Tensor({1}, 2.0), Tensor({2, 3}, -1.0)};
  const auto path = scratch("multi.ktnt");
  ktn::io::save_tensors(path, ts);
  EXPECT_EQ(ktn::io::load_tensors(path), ts);
}

TEST(Idx, HandBuiltFixtureRoundTrips) {
  const auto im = ktn::idx::parse_images(idx_images(1, 2, 2, {0, 51, 204, 255}));
  EXPECT_EQ(im.count, 1u);
  EXPECT_EQ(im.rows, 2u);
  EXPECT_EQ(im.cols, 2u);
  EXPECT_DOUBLE_EQ(im.pixels[1], 0.2);
  EXPECT_DOUBLE_EQ(im.pixels[2], 0.8);
  EXPECT_DOUBLE_EQ(im.pixels[3], 1.0);
  std::vector<std::uint8_t> labels = be32(0x801);
  const auto n = be32(3);
  labels.insert(labels.end(), n.begin(), n.end());
  labels.insert(labels.end(), {7, 0, 9});
  EXPECT_EQ(ktn::idx::parse_labels(labels), (std::vector<int>{7, 0, 9}));
}

TEST(Idx, WrongMagicAndTruncationAreRejected) {
  auto img = idx_images(1, 2, 2, {1, 2, 3, 4});
  EXPECT_THROW(ktn::idx::parse_labels(img), ktn::FormatError);
  img.pop_back();
  EXPECT_THROW(ktn::idx::parse_images(img), ktn::FormatError);
  EXPECT_THROW(ktn::idx::parse_images(std::vector<std::uint8_t>{0, 0, 8}), ktn::FormatError);
}

TEST(Idx, ReferenceTrainImagesHeader) {
  const char* env = std::getenv("KTN_MNIST_DIR");
  const fs::path dir = env ? env : "/root/data/mnist";
  const auto file = dir / "train-images-idx3-ubyte";
  if (!fs::exists(file)) GTEST_SKIP() << "MNIST not available at " << dir;
  const auto d = ktn::idx::load_mnist(dir, "train");
  EXPECT_EQ(d.images.count, 60000u);
  EXPECT_EQ(d.images.rows, 28u);
  EXPECT_EQ(d.images.cols, 28u);
  EXPECT_EQ(d.labels.size(), 60000u);
}

}  // namespace
