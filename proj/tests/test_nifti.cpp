#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "vitlm/nifti.hpp"

using namespace vitlm;

namespace {

Volume make_volume(std::size_t d, std::size_t h, std::size_t w, std::vector<float> v,
                   std::array<float, 3> spacing = {1.0f, 1.0f, 1.0f}) {
  Volume vol;
  vol.voxels = Tensor<float>({d, h, w}, std::move(v));
  vol.spacing_mm = spacing;
  return vol;
}

// Independent big-endian writer: fields laid down byte by byte.
void put_be(std::string& b, std::size_t at, const void* src, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(src);
  for (std::size_t i = 0; i < n; ++i) {
    b[at + i] = static_cast<char>(std::endian::native == std::endian::little ? p[n - 1 - i] : p[i]);
  }
}

template <class U>
void be(std::string& b, std::size_t at, U v) {
  put_be(b, at, &v, sizeof v);
}

std::string big_endian_fixture(const std::vector<std::int16_t>& values, std::int16_t nx, std::int16_t ny,
                               std::int16_t nz, float slope, float inter) {
  std::string b(352 + values.size() * 2, '\0');
  be<std::int32_t>(b, 0, 348);
  const std::int16_t dim[8] = {3, nx, ny, nz, 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) be(b, 40 + 2 * i, dim[i]);
  be<std::int16_t>(b, 70, 4);
  be<std::int16_t>(b, 72, 16);
  const float pix[8] = {1.0f, 0.5f, 0.75f, 2.0f, 0, 0, 0, 0};
  for (int i = 0; i < 8; ++i) be(b, 76 + 4 * i, pix[i]);
  be<float>(b, 108, 352.0f);
  be<float>(b, 112, slope);
  be<float>(b, 116, inter);
  std::memcpy(b.data() + 344, "n+1\0", 4);
  for (std::size_t i = 0; i < values.size(); ++i) be(b, 352 + 2 * i, values[i]);
  return b;
}

bool same_volume(const Volume& a, const Volume& b) {
  return a.voxels.shape() == b.voxels.shape() && bitwise_equal(a.voxels, b.voxels) &&
         a.spacing_mm == b.spacing_mm;
}

}  // namespace

TEST(Nifti, RoundTripFloat32) {
  auto v = make_volume(2, 3, 4, std::vector<float>(24), {2.5f, 0.7f, 0.7f});
  for (std::size_t i = 0; i < 24; ++i) v.voxels.mutable_data()[i] = 0.25f * static_cast<float>(i) - 3.0f;
  auto [h, back] = parse_nifti(write_nifti(v));
  EXPECT_EQ(h.sizeof_hdr, 348);
  EXPECT_EQ(h.dim[0], 3);
  EXPECT_EQ(h.dim[1], 4);  // x = W
  EXPECT_EQ(h.dim[3], 2);  // z = D
  EXPECT_FALSE(h.big_endian);
  EXPECT_TRUE(same_volume(v, back));
}

TEST(Nifti, BigEndianFixtureFromIndependentWriter) {
  // x fastest: values index x + 2*y + 6*z over a 2x3x2 (x,y,z) grid.
  std::vector<std::int16_t> raw(12);
  for (int i = 0; i < 12; ++i) raw[i] = static_cast<std::int16_t>(i * 10 - 40);
  const auto bytes = big_endian_fixture(raw, 2, 3, 2, 2.0f, -1.0f);
  auto [h, vol] = parse_nifti(bytes);
  EXPECT_TRUE(h.big_endian);
  EXPECT_EQ(vol.voxels.shape(), (Shape{2, 3, 2}));
  for (int i = 0; i < 12; ++i) EXPECT_EQ(vol.voxels.data()[i], raw[i] * 2.0f - 1.0f);
  EXPECT_EQ(vol.spacing_mm, (std::array<float, 3>{2.0f, 0.75f, 0.5f}));

  // The library's own big-endian writer agrees with the fixture's reading.
  NiftiWriteOptions opt;
  opt.byte_order = std::endian::big;
  auto [h2, vol2] = parse_nifti(write_nifti(vol, opt));
  EXPECT_TRUE(h2.big_endian);
  EXPECT_TRUE(same_volume(vol, vol2));
}

TEST(Nifti, SlopeZeroReadsAsOne) {
  std::vector<std::int16_t> raw{1, 2, 3, 4};
  auto [h, vol] = parse_nifti(big_endian_fixture(raw, 2, 2, 1, 0.0f, 0.0f));
  EXPECT_EQ(vol.voxels.data()[3], 4.0f);
}

TEST(Nifti, GzipTransparent) {
  auto v = make_volume(1, 2, 2, {1, 2, 3, 4});
  NiftiWriteOptions opt;
  opt.gzip = true;
  const auto bytes = write_nifti(v, opt);
  EXPECT_TRUE(nifti_detail::is_gzip(bytes));
  EXPECT_TRUE(same_volume(v, parse_nifti(bytes).second));
}

TEST(Nifti, BadMagicIsFormatError) {
  auto bytes = write_nifti(make_volume(1, 1, 1, {0}));
  std::memcpy(bytes.data() + 344, "xxxx", 4);
  EXPECT_THROW(parse_nifti(bytes), FormatError);
}

TEST(Nifti, PairFileMagicIsUnsupported) {
  auto bytes = write_nifti(make_volume(1, 1, 1, {0}));
  std::memcpy(bytes.data() + 344, "ni1\0", 4);
  EXPECT_THROW(parse_nifti(bytes), UnsupportedError);
}

TEST(Nifti, UnsupportedDatatypeNamesCode) {
  auto bytes = write_nifti(make_volume(1, 1, 1, {0}));
  const std::int16_t code = 32;  // complex64
  std::memcpy(bytes.data() + 70, &code, 2);
  try {
    parse_nifti(bytes);
    FAIL();
  } catch (const UnsupportedError& e) {
    EXPECT_NE(std::string(e.what()).find("32"), std::string::npos);
  }
}

TEST(Nifti, TruncatedDataIsLengthError) {
  auto bytes = write_nifti(make_volume(2, 2, 2, std::vector<float>(8, 1.0f)));
  bytes.resize(bytes.size() - 4);
  EXPECT_THROW(parse_nifti(bytes), LengthError);
  EXPECT_THROW(parse_nifti(std::string(100, '\0')), LengthError);
}

TEST(Nifti, BadHeaderSizeIsFormatError) {
  auto bytes = write_nifti(make_volume(1, 1, 1, {0}));
  const std::int32_t bad = 540;
  std::memcpy(bytes.data(), &bad, 4);
  EXPECT_THROW(parse_nifti(bytes), FormatError);
}

TEST(Nifti, RandomRoundTripAllDtypesBothEndians) {
  std::mt19937_64 rng(2024);
  const NiftiDatatype types[] = {NiftiDatatype::uint8, NiftiDatatype::int16, NiftiDatatype::int32,
                                 NiftiDatatype::float32, NiftiDatatype::float64};
  for (int trial = 0; trial < 50; ++trial) {
    const auto type = types[trial % 5];
    const auto order = trial % 2 ? std::endian::big : std::endian::little;
    std::uniform_int_distribution<std::size_t> dim(1, 6);
    const std::size_t d = dim(rng), h = dim(rng), w = dim(rng);
    std::vector<float> v(d * h * w);
    for (auto& x : v) {
      switch (type) {
        case NiftiDatatype::uint8: x = static_cast<float>(rng() % 256); break;
        case NiftiDatatype::int16: x = static_cast<float>(static_cast<int>(rng() % 65536) - 32768); break;
        case NiftiDatatype::int32: x = static_cast<float>(static_cast<int>(rng() % 2000001) - 1000000); break;
        default: x = std::uniform_real_distribution<float>(-2000.0f, 2000.0f)(rng); break;
      }
    }
    auto vol = make_volume(d, h, w, v, {0.5f + static_cast<float>(trial % 3), 1.25f, 0.8f});
    NiftiWriteOptions opt;
    opt.datatype = type;
    opt.byte_order = order;
    opt.gzip = trial % 3 == 0;
    auto [hdr, back] = parse_nifti(write_nifti(vol, opt));
    EXPECT_EQ(hdr.big_endian, order == std::endian::big);
    EXPECT_EQ(hdr.datatype, static_cast<std::int16_t>(type));
    EXPECT_TRUE(same_volume(vol, back)) << "trial " << trial;
  }
}

TEST(Nifti, FileRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "vitlm_nifti_test";
  std::filesystem::remove_all(dir);
  auto v = make_volume(2, 2, 2, {1, 2, 3, 4, 5, 6, 7, 8});
  save_nifti(dir / "a.nii.gz", v);
  EXPECT_TRUE(same_volume(v, load_nifti(dir / "a.nii.gz")));
  std::filesystem::remove_all(dir);
}

TEST(Volume, RampDownsampleAlignCorners) {
  auto v = make_volume(1, 1, 4, {0, 1, 2, 3});
  auto r = resample_volume(v, {1, 1, 2}, ResampleMode::trilinear);
  ASSERT_EQ(r.voxels.shape(), (Shape{1, 1, 2}));
  EXPECT_EQ(r.voxels.data()[0], 0.0f);
  EXPECT_EQ(r.voxels.data()[1], 3.0f);
}

TEST(Volume, RampUpsampleAlignCorners) {
  auto v = make_volume(1, 1, 2, {0, 3});
  auto r = resample_volume(v, {1, 1, 4}, ResampleMode::trilinear);
  const float want[] = {0, 1, 2, 3};
  for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(r.voxels.data()[i], want[i]);
}

TEST(Volume, SameShapeNearestIsIdentity) {
  std::vector<float> v(2 * 3 * 4);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i * i);
  auto vol = make_volume(2, 3, 4, v);
  auto r = resample_volume(vol, {2, 3, 4}, ResampleMode::nearest);
  EXPECT_TRUE(bitwise_equal(r.voxels, vol.voxels));
}

TEST(Volume, ConstantStaysConstantAndSpacingRescales) {
  auto vol = make_volume(4, 4, 4, std::vector<float>(64, 7.5f), {2.0f, 1.0f, 1.0f});
  for (auto mode : {ResampleMode::nearest, ResampleMode::trilinear}) {
    auto r = resample_volume(vol, {3, 5, 2}, mode);
    for (float x : r.voxels.data()) EXPECT_FLOAT_EQ(x, 7.5f);
  }
  auto r = resample_volume(vol, {2, 8, 4}, ResampleMode::trilinear);
  // Corner-to-corner extent is preserved: (S-1)·s = (T-1)·s'.
  EXPECT_FLOAT_EQ(r.spacing_mm[0], 6.0f);
  EXPECT_FLOAT_EQ(r.spacing_mm[1], 3.0f / 7.0f);
  EXPECT_FLOAT_EQ(r.spacing_mm[2], 1.0f);
}

TEST(Volume, TrilinearStaysWithinInputBounds) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(-500.0f, 900.0f);
  for (std::size_t trial = 0; trial < 20; ++trial) {
    std::vector<float> v(3 * 5 * 4);
    for (auto& x : v) x = u(rng);
    auto vol = make_volume(3, 5, 4, v);
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    auto r = resample_volume(vol, {1 + trial % 7, 2 + trial % 5, 9}, ResampleMode::trilinear);
    for (float x : r.voxels.data()) {
      EXPECT_GE(x, *lo);
      EXPECT_LE(x, *hi);
    }
  }
}

TEST(Volume, NormalizeEndpointsMidpointAndClamp) {
  auto vol = make_volume(1, 1, 5, {-1000, 1000, 0, -3000, 4000});
  auto t = normalize_intensity<double>(vol, {-1000.0f, 1000.0f});
  EXPECT_EQ(t.shape(), (Shape{1, 1, 1, 5}));
  EXPECT_EQ(t.data()[0], -1.0);
  EXPECT_EQ(t.data()[1], 1.0);
  EXPECT_EQ(t.data()[2], 0.0);
  EXPECT_EQ(t.data()[3], -1.0);
  EXPECT_EQ(t.data()[4], 1.0);
}

TEST(Volume, PreprocessOutputWithinUnitRange) {
  std::mt19937_64 rng(8);
  std::vector<float> v(6 * 10 * 12);
  for (auto& x : v) x = std::uniform_real_distribution<float>(-3000.0f, 3000.0f)(rng);
  PreprocessConfig pp;
  auto t = preprocess_volume<float>(make_volume(6, 10, 12, v), pp);
  EXPECT_EQ(t.shape(), (Shape{1, 8, 32, 32}));
  for (float x : t.data()) {
    EXPECT_GE(x, -1.0f);
    EXPECT_LE(x, 1.0f);
  }
}

TEST(Volume, PreprocessConfigJsonRoundTrip) {
  PreprocessConfig pp;
  pp.target_shape = {4, 16, 16};
  pp.window = {-200.0f, 300.0f};
  pp.mode = ResampleMode::nearest;
  const auto back = nlohmann::json(pp).get<PreprocessConfig>();
  EXPECT_EQ(back.target_shape, pp.target_shape);
  EXPECT_EQ(back.window.low_hu, -200.0f);
  EXPECT_EQ(back.mode, ResampleMode::nearest);
  EXPECT_THROW((nlohmann::json{{"window", {5, 5}}}.get<PreprocessConfig>()), ConfigError);
}
