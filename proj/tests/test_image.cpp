#include <gtest/gtest.h>

#include "legrad/fixtures.hpp"

using namespace legrad;

TEST(Resize, BilinearIdentityAndConstant) {
  const std::vector<double> src{1, 2, 3, 4, 5, 6};
  EXPECT_EQ(resize_bilinear<double>(src, 3, 2, 1, 3, 2), src);
  const std::vector<double> flat(16, 0.75);
  for (double v : resize_bilinear<double>(flat, 4, 4, 1, 7, 3)) EXPECT_DOUBLE_EQ(v, 0.75);
}

TEST(Resize, BilinearHalfPixelUpsample) {
  // 2 -> 4 with half-pixel centers: samples at -0.25, 0.25, 0.75, 1.25 (clamped)
  const std::vector<double> src{0, 1};
  const auto out = resize_bilinear<double>(src, 2, 1, 1, 4, 1);
  EXPECT_DOUBLE_EQ(out[0], 0.0);
  EXPECT_DOUBLE_EQ(out[1], 0.25);
  EXPECT_DOUBLE_EQ(out[2], 0.75);
  EXPECT_DOUBLE_EQ(out[3], 1.0);
}

TEST(Resize, NearestDownsample) {
  const std::vector<std::uint8_t> src{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16};
  EXPECT_EQ(resize_nearest<std::uint8_t>(src, 4, 4, 2, 2), (std::vector<std::uint8_t>{1, 3, 9, 11}));
}

TEST(Crop, GeometryMatchesCoordinateOracle) {
  for (auto [w, h] : {std::pair<std::size_t, std::size_t>{448, 224}, {224, 448}, {300, 200}, {224, 224}, {17, 31}}) {
    const auto g = crop_geometry(w, h, 224);
    const std::size_t short_side = std::min(w, h);
    EXPECT_EQ(std::min(g.resized_w, g.resized_h), 224u);
    EXPECT_EQ(std::max(g.resized_w, g.resized_h), std::max(w, h) * 224 / short_side);
    EXPECT_EQ(g.crop_x, (g.resized_w - 224) / 2);
    EXPECT_EQ(g.crop_y, (g.resized_h - 224) / 2);
  }
}

TEST(Crop, CenterPointMapsToCenter) {
  const auto g = crop_geometry(448, 224, 224);
  const auto c = g.map_point(224, 112);
  ASSERT_TRUE(c);
  EXPECT_EQ(c->first, 112u);
  EXPECT_EQ(c->second, 112u);
  EXPECT_FALSE(g.map_point(10, 10));
  EXPECT_FALSE(g.map_point(447, 10));
  ASSERT_TRUE(g.map_point(112, 0));
  EXPECT_EQ(g.map_point(112, 0)->first, 0u);
}

TEST(Crop, ImageAndMaskShareGeometry) {
  Image img(8, 4, 3);
  std::vector<std::uint8_t> mask(32);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      img.at(x, y, 0) = static_cast<float>(x) / 8.f;
      mask[y * 8 + x] = x >= 4 ? 1 : 0;
    }
  const auto g = crop_geometry(8, 4, 4);
  const Image out = resize_and_crop(img, g);
  const auto m = resize_and_crop_mask(mask, g);
  ASSERT_EQ(out.width, 4u);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      EXPECT_EQ(out.at(x, y, 0), static_cast<float>(x + 2) / 8.f);
      EXPECT_EQ(m[y * 4 + x], x + 2 >= 4 ? 1 : 0);
    }
}

TEST(Codec, PngRoundTripIsLossless) {
  const Image img = make_test_image(4, 13, 9);
  const auto bytes = encode_png(img);
  const Image back = decode_image(bytes);
  ASSERT_EQ(back.width, 13u);
  ASSERT_EQ(back.height, 9u);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    EXPECT_EQ(to_byte(back.pixels[i]), to_byte(img.pixels[i]));
}

TEST(Codec, GrayPngDecodesAsMask) {
  std::vector<std::uint8_t> px{0, 255, 0, 7, 0, 0};
  const auto bytes = encode_png(px, 3, 2, 1);
  std::size_t w = 0, h = 0;
  const auto m = decode_mask(bytes, w, h);
  EXPECT_EQ(w, 3u);
  EXPECT_EQ(h, 2u);
  EXPECT_EQ(m, (std::vector<std::uint8_t>{0, 1, 0, 1, 0, 0}));
}

TEST(Codec, PnmDecodes) {
  std::string s = "P6\n2 1\n255\n";
  s += std::string{'\xff', '\x00', '\x00', '\x00', '\x00', '\xff'};
  const std::vector<std::uint8_t> bytes(s.begin(), s.end());
  const Image img = decode_image(bytes);
  EXPECT_EQ(img.width, 2u);
  EXPECT_EQ(img.at(0, 0, 0), 1.f);
  EXPECT_EQ(img.at(1, 0, 2), 1.f);
}

TEST(Codec, GarbageIsRejected) {
  const std::vector<std::uint8_t> junk{1, 2, 3, 4, 5, 6, 7, 8, 9};
  EXPECT_THROW(decode_image(junk), ImageError);
  std::vector<std::uint8_t> broken_png{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a, 0, 0};
  EXPECT_THROW(decode_image(broken_png), ImageError);
  const std::vector<std::uint8_t> broken_jpeg{0xFF, 0xD8, 0xFF, 0xE0, 0, 0};
  EXPECT_THROW(decode_image(broken_jpeg), ImageError);
}
