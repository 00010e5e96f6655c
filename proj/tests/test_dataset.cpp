#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "zachvit/dataset.hpp"
#include "zachvit/errors.hpp"
#include "zachvit/model.hpp"

using namespace zachvit;
namespace fs = std::filesystem;

namespace {

DatasetSplit small_split() {
  DatasetSplit s;
  s.height = 2;
  s.width = 3;
  s.channels = 1;
  s.class_count = 3;
  s.task = TaskKind::Multiclass;
  for (std::size_t i = 0; i < 4 * 6; ++i) s.images.push_back(static_cast<std::uint8_t>(i * 10));
  s.labels = {0, 2, 1, 2};
  return s;
}

// Little-endian header written by hand, independent of the serializer.
std::string hand_header(std::uint32_t n, std::uint16_t h, std::uint16_t w, std::uint8_t c, std::uint16_t k,
                        std::uint8_t kind) {
  std::string out = "ZVDS";
  auto put = [&](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  };
  put(1, 4);
  put(n, 4);
  put(h, 2);
  put(w, 2);
  put(c, 1);
  put(k, 2);
  put(kind, 1);
  return out;
}

}  // namespace

TEST(Container, LayoutMatchesHandWrittenBytes) {
  const DatasetSplit s = small_split();
  const std::string bytes = serialize_container(s);
  std::string expected = hand_header(4, 2, 3, 1, 3, 1);
  expected.append(s.images.begin(), s.images.end());
  expected.append(s.labels.begin(), s.labels.end());
  EXPECT_EQ(bytes, expected);
}

TEST(Container, RoundTripIsExact) {
  const DatasetSplit s = small_split();
  const DatasetSplit r = parse_container(serialize_container(s));
  EXPECT_EQ(r.images, s.images);
  EXPECT_EQ(r.labels, s.labels);
  EXPECT_EQ(r.height, 2u);
  EXPECT_EQ(r.width, 3u);
  EXPECT_EQ(r.class_count, 3u);
  EXPECT_EQ(r.task, TaskKind::Multiclass);
}

TEST(Container, FileRoundTrip) {
  const fs::path path = fs::temp_directory_path() / "zachvit_test_roundtrip.zvds";
  save_container(path, small_split());
  EXPECT_EQ(load_container(path).labels, small_split().labels);
  fs::remove(path);
}

TEST(Container, TruncationReportsMissingBytes) {
  const std::string bytes = serialize_container(small_split());
  try {
    parse_container(std::string_view(bytes).substr(0, bytes.size() - 2));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("missing 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_container(std::string_view(bytes).substr(0, 10)), FormatError);
  EXPECT_THROW(parse_container(bytes + "x"), FormatError);
}

TEST(Container, BadMagicOrVersion) {
  std::string bytes = serialize_container(small_split());
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_container(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(parse_container(bad), FormatError);
  bad = bytes;
  bad[19] = 5;  // task kind byte
  EXPECT_THROW(parse_container(bad), FormatError);
}

TEST(Container, LabelOutOfRangeIsValidationError) {
  DatasetSplit s = small_split();
  s.labels[1] = 3;
  EXPECT_THROW(s.validate(), ValidationError);
  std::string bytes = hand_header(1, 1, 1, 1, 2, 1) + std::string{'\x05', '\x02'};
  EXPECT_THROW(parse_container(bytes), ValidationError);
}

TEST(Container, BinaryTaskNeedsTwoClasses) {
  DatasetSplit s = small_split();
  s.task = TaskKind::Binary;
  EXPECT_THROW(s.validate(), ValidationError);
}

TEST(Container, MissingFileIsValidationError) {
  EXPECT_THROW(load_container("/nonexistent/zachvit.zvds"), ValidationError);
}

TEST(Resize, ConstantImageStaysConstant) {
  std::vector<std::uint8_t> img(5 * 7 * 3, 77);
  const Tensor t = resize_bilinear(img, 5, 7, 3, 16);
  EXPECT_EQ(t.shape(), (Shape{16, 16, 3}));
  for (double v : t.values()) EXPECT_EQ(v, 77.0);
}

TEST(Resize, MidpointIsAverage) {
  // 1 x 2 image [0, 255] stretched to 3 wide: corner-aligned midpoint is 127.5
  const std::vector<std::uint8_t> img{0, 255};
  const Tensor t = resize_bilinear(img, 1, 2, 1, 3);
  EXPECT_EQ(t[0], 0.0);
  EXPECT_EQ(t[1], 127.5);
  EXPECT_EQ(t[2], 255.0);
}

TEST(Resize, IdentitySizeIsExact) {
  std::vector<std::uint8_t> img(4 * 4);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<std::uint8_t>(i * 13);
  const Tensor t = resize_bilinear(img, 4, 4, 1, 4);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(t[i], img[i]);
}

TEST(Resize, DownThenUpIsLossyButBounded) {
  std::vector<std::uint8_t> img(8 * 8);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<std::uint8_t>((i * 37) % 256);
  const Tensor small = resize_bilinear(img, 8, 8, 1, 3);
  std::vector<std::uint8_t> bytes;
  for (double v : small.values()) bytes.push_back(static_cast<std::uint8_t>(std::lround(v)));
  const Tensor back = resize_bilinear(bytes, 3, 3, 1, 8);
  double diff = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    EXPECT_GE(back[i], 0.0);
    EXPECT_LE(back[i], 255.0);
    diff += std::abs(back[i] - img[i]);
  }
  EXPECT_GT(diff, 0.0);
}

TEST(Resize, ImageTensorScalesToUnitRange) {
  DatasetSplit s = small_split();
  const Tensor t = image_tensor(s, 1, 2);
  EXPECT_EQ(t.shape(), (Shape{2, 2, 1}));
  EXPECT_DOUBLE_EQ(t[0], 60.0 / 255.0);
}

namespace {

DatasetSplit labelled(std::vector<std::uint8_t> labels, std::size_t classes) {
  DatasetSplit s;
  s.height = s.width = s.channels = 1;
  s.class_count = classes;
  s.task = classes == 2 ? TaskKind::Binary : TaskKind::Multiclass;
  s.labels = std::move(labels);
  s.images.assign(s.labels.size(), 0);
  return s;
}

}  // namespace

TEST(Sampler, OneShotPerClassInClassOrder) {
  const DatasetSplit s = labelled({2, 0, 1, 1, 0, 2, 2}, 3);
  const auto draw = few_shot_sample(s, 1, 3);
  ASSERT_EQ(draw.indices.size(), 3u);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(s.labels[draw.indices[c]], c);
}

TEST(Sampler, TakesAllWhenClassIsSmall) {
  const DatasetSplit s = labelled({0, 0, 0, 0, 1}, 2);
  const auto draw = few_shot_sample(s, 3, 5);
  ASSERT_EQ(draw.indices.size(), 4u);
  std::vector<std::size_t> zeros(draw.indices.begin(), draw.indices.begin() + 3);
  std::sort(zeros.begin(), zeros.end());
  EXPECT_TRUE(std::adjacent_find(zeros.begin(), zeros.end()) == zeros.end());
  EXPECT_EQ(draw.indices[3], 4u);
}

TEST(Sampler, DeterministicPerSeed) {
  std::vector<std::uint8_t> labels;
  for (int i = 0; i < 200; ++i) labels.push_back(static_cast<std::uint8_t>(i % 4));
  const DatasetSplit s = labelled(labels, 4);
  EXPECT_EQ(few_shot_sample(s, 10, 3).indices, few_shot_sample(s, 10, 3).indices);
  EXPECT_NE(few_shot_sample(s, 10, 3).indices, few_shot_sample(s, 10, 5).indices);
}

TEST(Sampler, EmptyClassNamesTheClass) {
  const DatasetSplit s = labelled({0, 0, 2}, 3);
  try {
    few_shot_sample(s, 1, 3);
    FAIL() << "expected SamplingError";
  } catch (const SamplingError& e) {
    EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos);
  }
  EXPECT_THROW(few_shot_sample(s, 0, 3), SamplingError);
}

TEST(Subset, CopiesSelectedImages) {
  const DatasetSplit s = small_split();
  const std::size_t idx[] = {3, 0};
  const DatasetSplit r = subset(s, idx);
  EXPECT_EQ(r.labels, (std::vector<std::uint8_t>{2, 0}));
  EXPECT_EQ(r.images[0], 180);
}

TEST(Synthetic, HistogramClassesSeparateByMeanIntensity) {
  for (std::size_t k : {2u, 3u, 6u}) {
    SyntheticSpec spec;
    spec.class_count = k;
    spec.n_per_class = 20;
    spec.seed = 9;
    const DatasetSplit s = make_synthetic(spec);
    EXPECT_NO_THROW(s.validate());
    std::vector<double> sum(k, 0.0), count(k, 0.0);
    for (std::size_t i = 0; i < s.size(); ++i) {
      EXPECT_EQ(s.labels[i], i % k);
      for (auto b : s.image(i)) sum[s.labels[i]] += b;
      count[s.labels[i]] += static_cast<double>(s.image_bytes());
    }
    for (std::size_t c = 1; c < k; ++c) EXPECT_GE((sum[c] / count[c] - sum[c - 1] / count[c - 1]) / 255.0, 30.0 / 255.0);
  }
}

TEST(Synthetic, LayoutPairsShareThePatchMultiset) {
  SyntheticSpec spec;
  spec.class_count = 2;
  spec.n_per_class = 10;
  spec.size = 16;
  spec.patch_size = 4;
  spec.mode = SyntheticMode::Layout;
  spec.seed = 4;
  const DatasetSplit s = make_synthetic(spec);
  auto sorted_patches = [&](std::size_t i) {
    Tensor img({16, 16, 1});
    auto bytes = s.image(i);
    for (std::size_t p = 0; p < bytes.size(); ++p) img[p] = bytes[p];
    const Tensor t = patchify(img, 4);
    std::vector<std::vector<double>> rows;
    for (std::size_t r = 0; r < t.rows(); ++r)
      rows.emplace_back(t.values().begin() + r * t.cols(), t.values().begin() + (r + 1) * t.cols());
    std::sort(rows.begin(), rows.end());
    return rows;
  };
  for (std::size_t pair = 0; pair < 10; ++pair) {
    const std::size_t a = 2 * pair, b = 2 * pair + 1;
    EXPECT_NE(s.labels[a], s.labels[b]);
    EXPECT_EQ(sorted_patches(a), sorted_patches(b)) << "pair " << pair;
    EXPECT_NE(std::vector<std::uint8_t>(s.image(a).begin(), s.image(a).end()),
              std::vector<std::uint8_t>(s.image(b).begin(), s.image(b).end()));
  }
}

TEST(Synthetic, DeterministicPerSeed) {
  SyntheticSpec spec;
  spec.mode = SyntheticMode::Layout;
  spec.seed = 12;
  EXPECT_EQ(make_synthetic(spec).images, make_synthetic(spec).images);
  SyntheticSpec other = spec;
  other.seed = 13;
  EXPECT_NE(make_synthetic(spec).images, make_synthetic(other).images);
}
