// Copyright 2026 The VisemeFlow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <filesystem>

#include "oracles.hpp"
#include "visemeflow/datasets.hpp"
#include "visemeflow/vision.hpp"

namespace vf = visemeflow;

namespace {

vf::GrayFrame random_frame(std::size_t w, std::size_t h, std::uint64_t seed, int levels = 0) {
  vf::Rng rng(seed);
  vf::GrayFrame g(w, h);
  for (auto& p : g.pixels) {
    p = levels ? float(rng.below(levels)) : float(rng.uniform());
  }
  return g;
}

vf::CascadeModel bundled_cascade() {
  return vf::load_cascade(std::string(VISEMEFLOW_DATA_DIR) + "/mouth_cascade_desk.json");
}

}  // namespace

TEST(Grayscale, AnalyticValues) {
  vf::RgbFrame white{2, 1, {255, 255, 255, 255, 255, 255}};
  for (float p : vf::to_grayscale(white).pixels) EXPECT_NEAR(p, 1.0f, 1e-6);
  vf::RgbFrame red{1, 1, {255, 0, 0}};
  EXPECT_NEAR(vf::to_grayscale(red).pixels[0], 0.299f, 1e-6);
  vf::RgbFrame gray{1, 1, {0.4f, 0.4f, 0.4f}, 1.0f};
  EXPECT_NEAR(vf::to_grayscale(gray).pixels[0], 0.4f, 1e-6);
  vf::RgbFrame bad{2, 2, {1, 2, 3}};
  EXPECT_THROW(vf::to_grayscale(bad), vf::ShapeError);
}

TEST(Integral, TwoByTwoOnes) {
  vf::GrayFrame g(2, 2, 1.0f);
  const auto ii = vf::integral_image(g);
  const std::vector<double> expected{0, 0, 0, 0, 1, 2, 0, 2, 4};
  EXPECT_EQ(ii.table, expected);
  EXPECT_EQ(ii.rect_sum(0, 0, 2, 2), 4.0);
}

TEST(Integral, EveryRectangleMatchesDirectSum) {
  const auto g = random_frame(8, 8, 3, 7);
  const auto ii = vf::integral_image(g);
  const auto sq = vf::integral_image(g, true);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int h = 1; y + h <= 8; ++h)
        for (int w = 1; x + w <= 8; ++w) {
          ASSERT_EQ(ii.rect_sum(x, y, w, h), oracle::direct_sum(g, x, y, w, h, false));
          ASSERT_EQ(sq.rect_sum(x, y, w, h), oracle::direct_sum(g, x, y, w, h, true));
        }
}

TEST(Cascade, JsonRoundTripAndValidation) {
  const auto m = vf::make_mouth_cascade(18, 12);
  const auto back = vf::cascade_from_json(vf::cascade_to_json(m));
  EXPECT_EQ(vf::cascade_to_json(back), vf::cascade_to_json(m));
  auto j = vf::cascade_to_json(m);
  j["stages"] = nlohmann::json::array();
  EXPECT_THROW(vf::cascade_from_json(j), vf::ConfigError);
  EXPECT_THROW(vf::cascade_from_json(nlohmann::json{{"stages", 1}}), vf::ConfigError);
}

TEST(Cascade, BundledFileMatchesBuilder) {
  EXPECT_EQ(vf::cascade_to_json(bundled_cascade()),
            vf::cascade_to_json(vf::make_mouth_cascade(18, 12)));
}

TEST(Cascade, UniformImageHasNoDetections) {
  const auto m = bundled_cascade();
  for (float v : {0.0f, 0.5f, 1.0f}) {
    vf::GrayFrame g(90, 96, v);
    EXPECT_TRUE(vf::cascade_candidates(g, m, {}).empty()) << v;
  }
}

TEST(Cascade, CandidatesEqualBruteForceOracle) {
  const auto m = bundled_cascade();
  const auto p = vf::desk_profile();
  vf::DetectorParams dp;
  dp.scale_factor = 1.25;
  for (std::size_t word = 0; word < 3; ++word) {
    const auto v = vf::synthesize_word_video(word, word + 2, 0, p, 21);
    const auto g = oracle::quantize(v.scene[v.scene.size() / 2]);
    const auto fast = vf::cascade_candidates(g, m, dp);
    EXPECT_EQ(fast, oracle::brute_force_candidates(g, m, dp));
    EXPECT_FALSE(fast.empty());
  }
  const auto noise = oracle::quantize(random_frame(60, 50, 8));
  EXPECT_EQ(vf::cascade_candidates(noise, m, dp), oracle::brute_force_candidates(noise, m, dp));
}

TEST(Cascade, GeneratorMouthFoundWithinThreePixels) {
  for (const auto& p : {vf::desk_profile(), vf::miracl_profile()}) {
    const auto cascade = vf::make_mouth_cascade(int(p.W / 2), int(p.H / 2));
    const auto dp = vf::default_detector(p, cascade);
    for (std::size_t s = 0; s < 4; ++s) {
      const auto v = vf::synthesize_word_video(s, s, 1, p, 5);
      for (std::size_t t = 0; t < v.scene.size(); t += 3) {
        const auto found = vf::cascade_detect(v.scene[t], cascade, dp);
        ASSERT_EQ(found.size(), 1u) << p.name << " speaker " << s << " frame " << t;
        EXPECT_NEAR(found[0].center_x(), v.rois[t].center_x(), 3.0);
        EXPECT_NEAR(found[0].center_y(), v.rois[t].center_y(), 3.0);
      }
    }
  }
}

TEST(Cascade, MinSizeBelowBaseWindowRejected) {
  const auto m = vf::make_mouth_cascade(18, 12);
  vf::DetectorParams dp;
  dp.min_width = 10;
  EXPECT_THROW(vf::scan_windows(50, 50, m, dp), vf::ConfigError);
}

TEST(Merge, GroupsOverlappingWindows) {
  const std::vector<vf::ROI> w{{0, 0, 10, 10}, {1, 0, 10, 10}, {50, 50, 10, 10}};
  const auto merged = vf::merge_detections(w, 0.4);
  ASSERT_EQ(merged.size(), 2u);
  EXPECT_EQ(merged[1], (vf::ROI{50, 50, 10, 10}));
  EXPECT_EQ(merged[0].width, 10);
}

TEST(ExtractMouth, FallbacksAndTracking) {
  const auto m = bundled_cascade();
  vf::GrayFrame black(90, 96, 0.0f);
  EXPECT_EQ(vf::extract_mouth(black, m), (vf::ROI{22, 64, 45, 24}));
  const vf::ROI prev{10, 60, 30, 20};
  EXPECT_EQ(vf::extract_mouth(black, m, prev), prev);

  const auto p = vf::desk_profile();
  const auto v = vf::synthesize_word_video(1, 3, 0, p, 4);
  vf::MouthTracker tracker(m, vf::default_detector(p, m));
  const auto first = tracker.next(v.scene[0]);
  EXPECT_NEAR(first.center_x(), v.rois[0].center_x(), 3.0);
  EXPECT_EQ(tracker.next(black), first);  // lost detection reuses the last ROI
}

TEST(CropResize, IdentityConstantAndCorners) {
  const auto g = random_frame(7, 5, 2);
  EXPECT_EQ(vf::crop_resize(g, {0, 0, 7, 5}, 7, 5), g);
  vf::GrayFrame c(10, 10, 0.3f);
  for (float p : vf::crop_resize(c, {2, 3, 5, 4}, 9, 7).pixels) EXPECT_NEAR(p, 0.3f, 1e-6);
  vf::GrayFrame checker(2, 2);
  checker.pixels = {1, 0, 0, 1};
  const auto up = vf::crop_resize(checker, {0, 0, 2, 2}, 4, 4);
  EXPECT_EQ(up.at(0, 0), 1.0f);
  EXPECT_EQ(up.at(3, 0), 0.0f);
  EXPECT_EQ(up.at(0, 3), 0.0f);
  EXPECT_EQ(up.at(3, 3), 1.0f);
  for (float p : up.pixels) {
    EXPECT_GE(p, 0.0f);
    EXPECT_LE(p, 1.0f);
  }
  EXPECT_THROW(vf::crop_resize(c, {8, 8, 5, 5}, 4, 4), vf::DataError);
}

TEST(PadFrames, LengthRules) {
  auto frames = [](std::size_t n) {
    std::vector<vf::GrayFrame> f;
    for (std::size_t i = 0; i < n; ++i) f.emplace_back(3, 2, float(i + 1) / 100.0f);
    return f;
  };
  const auto padded = vf::pad_frames(frames(20), 29);
  ASSERT_EQ(padded.size(), 29u);
  for (std::size_t i = 20; i < 29; ++i) {
    for (float p : padded[i].pixels) EXPECT_EQ(p, 0.0f);
  }
  EXPECT_EQ(vf::pad_frames(frames(29), 29), frames(29));
  const auto cut = vf::pad_frames(frames(31), 29);
  ASSERT_EQ(cut.size(), 29u);
  EXPECT_EQ(cut.front(), frames(31)[1]);
  EXPECT_EQ(cut.back(), frames(31)[29]);
  EXPECT_THROW(vf::pad_frames({}, 29), vf::DataError);
  for (std::size_t n = 1; n < 40; ++n) EXPECT_EQ(vf::pad_frames(frames(n), 12).size(), 12u);
}
