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
#include <set>

#include "visemeflow/datasets.hpp"

namespace vf = visemeflow;
namespace fs = std::filesystem;

namespace {

vf::Manifest grid_manifest(std::size_t speakers, std::size_t words, std::size_t occ) {
  vf::Manifest m;
  m.vocabulary = vf::synthetic_vocabulary(words);
  m.profile = vf::desk_profile();
  for (std::size_t s = 0; s < speakers; ++s)
    for (std::size_t w = 0; w < words; ++w)
      for (std::size_t o = 0; o < occ; ++o) {
        vf::ManifestRecord r;
        r.path = "s" + std::to_string(s) + "/w" + std::to_string(w) + "/" + std::to_string(o);
        r.label = w;
        r.speaker = s;
        r.occurrence = o;
        r.source_len = 10;
        m.records.push_back(r);
      }
  return m;
}

// Record-by-record: the three splits are pairwise disjoint and their union
// is exactly the manifest.
void expect_partition(const vf::Manifest& all, const vf::Splits& s) {
  std::multiset<std::string> seen;
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    for (const auto& r : part->records) seen.insert(r.path);
  }
  std::multiset<std::string> expected;
  for (const auto& r : all.records) expected.insert(r.path);
  EXPECT_EQ(seen, expected);
}

std::map<std::size_t, std::size_t> count_by(const vf::Manifest& m, bool by_label) {
  std::map<std::size_t, std::size_t> c;
  for (const auto& r : m.records) ++c[by_label ? r.label : r.speaker];
  return c;
}

}  // namespace

TEST(Profiles, TableDimensions) {
  EXPECT_EQ(vf::profile_by_name("bbc"), (vf::Profile{"bbc", 29, 42, 72}));
  EXPECT_EQ(vf::profile_by_name("miracl"), (vf::Profile{"miracl", 25, 28, 72}));
  EXPECT_EQ(vf::profile_by_name("grid"), (vf::Profile{"grid", 25, 28, 72}));
  EXPECT_EQ(vf::profile_by_name("desk"), (vf::Profile{"desk", 12, 24, 36}));
  EXPECT_THROW(vf::profile_by_name("lrs3"), vf::ConfigError);
}

TEST(Splits, PerClassCounts900_50_50) {
  const auto m = grid_manifest(10, 9, 100);
  const auto s = vf::split_per_class_counts(m, 900, 50, 50, 1);
  EXPECT_EQ(s.train.records.size(), 900u * 9);
  EXPECT_EQ(s.val.records.size(), 50u * 9);
  EXPECT_EQ(s.test.records.size(), 50u * 9);
  for (auto [label, n] : count_by(s.val, true)) EXPECT_EQ(n, 50u) << label;
  expect_partition(m, s);
}

TEST(Splits, PerClassCountsEdgeCasesAndErrors) {
  const auto one = grid_manifest(1, 2, 1);
  const auto s = vf::split_per_class_counts(one, 1, 0, 0, 3);
  EXPECT_EQ(s.train.records.size(), 2u);
  EXPECT_TRUE(s.val.records.empty() && s.test.records.empty());
  try {
    vf::split_per_class_counts(one, 1, 1, 0, 3);
    FAIL();
  } catch (const vf::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("about"), std::string::npos);
  }
}

TEST(Splits, SpeakerDependent8_1_1) {
  const auto m = grid_manifest(15, 10, 10);
  const auto s = vf::split_speaker_dependent(m, 8, 1, 1, 4);
  EXPECT_EQ(s.train.records.size(), 1200u);
  EXPECT_EQ(s.val.records.size(), 150u);
  EXPECT_EQ(s.test.records.size(), 150u);
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    EXPECT_EQ(vf::speakers_of(*part).size(), 15u);
  }
  expect_partition(m, s);
  EXPECT_THROW(vf::split_speaker_dependent(grid_manifest(2, 2, 5), 8, 1, 1, 4), vf::DataError);
}

TEST(Splits, HeldOutSpeaker13_1_1) {
  const auto m = grid_manifest(15, 10, 10);
  std::set<std::vector<std::size_t>> configs;
  for (std::size_t t = 0; t < 15; ++t) {
    const auto s = vf::split_held_out_speaker(m, t, (t + 1) % 15);
    EXPECT_EQ(vf::speakers_of(s.train).size(), 13u);
    EXPECT_EQ(vf::speakers_of(s.test), std::vector<std::size_t>{t});
    EXPECT_EQ(vf::speakers_of(s.val), std::vector<std::size_t>{(t + 1) % 15});
    for (const auto& r : s.train.records) ASSERT_NE(r.speaker, t);
    expect_partition(m, s);
    auto key = vf::speakers_of(s.train);
    key.push_back(t);
    configs.insert(key);
  }
  EXPECT_EQ(configs.size(), 15u);
  EXPECT_THROW(vf::split_held_out_speaker(m, 3, 3), vf::ConfigError);
  EXPECT_THROW(vf::split_held_out_speaker(m, 3, 99), vf::DataError);
}

TEST(Splits, PerSpeakerFraction90_5_5) {
  const auto m = grid_manifest(3, 4, 25);  // 100 records per speaker
  const auto s = vf::split_per_speaker_fraction(m, {0.90, 0.05, 0.05}, 2);
  for (auto [spk, n] : count_by(s.train, false)) EXPECT_EQ(n, 90u) << spk;
  for (auto [spk, n] : count_by(s.val, false)) EXPECT_EQ(n, 5u) << spk;
  for (auto [spk, n] : count_by(s.test, false)) EXPECT_EQ(n, 5u) << spk;
  expect_partition(m, s);
  EXPECT_THROW(vf::split_per_speaker_fraction(m, {0.9, 0.05, 0.06}, 2), vf::ConfigError);
}

TEST(Splits, LargestRemainderNeverDropsRecords) {
  EXPECT_EQ(vf::apportion(3, {1.0 / 3, 1.0 / 3, 1.0 / 3}), (std::array<std::size_t, 3>{1, 1, 1}));
  vf::Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const double a = rng.uniform(), b = rng.uniform() * (1 - a);
    const std::size_t n = rng.below(60) + 1;
    const auto c = vf::apportion(n, {a, b, 1 - a - b});
    EXPECT_EQ(c[0] + c[1] + c[2], n);
  }
  const auto m = grid_manifest(4, 3, 7);
  expect_partition(m, vf::split_per_speaker_fraction(m, {0.5, 0.3, 0.2}, 9));
}

TEST(Splits, SeedChangesAssignmentNotSizes) {
  const auto m = grid_manifest(15, 10, 10);
  const auto a = vf::split_speaker_dependent(m, 8, 1, 1, 1);
  const auto b = vf::split_speaker_dependent(m, 8, 1, 1, 2);
  EXPECT_EQ(a.test.records.size(), b.test.records.size());
  EXPECT_NE(a.test.records, b.test.records);
  EXPECT_EQ(a.test.records, vf::split_speaker_dependent(m, 8, 1, 1, 1).test.records);
}

TEST(Generator, DeterministicAndPadded) {
  const auto p = vf::desk_profile();
  const auto a = vf::synthesize_word_video(3, 2, 1, p, 9);
  const auto b = vf::synthesize_word_video(3, 2, 1, p, 9);
  EXPECT_EQ(a.sample.frames, b.sample.frames);
  EXPECT_EQ(a.scene, b.scene);
  EXPECT_EQ(a.sample.frames.shape(), (vf::Shape{12, 1, 24, 36}));
  const auto len = a.sample.source_len;
  EXPECT_GE(len, 8u);  // ceil(0.6 * 12)
  EXPECT_LE(len, 12u);
  const std::size_t per = 24 * 36;
  for (std::size_t i = len * per; i < a.sample.frames.size(); ++i) {
    ASSERT_EQ(a.sample.frames[i], 0.0f);
  }
  EXPECT_NE(a.sample.frames, vf::synthesize_word_video(3, 2, 1, p, 10).sample.frames);
}

TEST(Generator, SourceLengthWithinBoundsForAllProfiles) {
  for (const auto& p : {vf::bbc_profile(), vf::miracl_profile(), vf::desk_profile()}) {
    for (std::size_t s = 0; s < 15; ++s)
      for (std::size_t o = 0; o < 10; ++o) {
        const auto n = vf::synthetic_source_len(s, o, p, 1);
        EXPECT_GE(double(n), 0.6 * double(p.T));
        EXPECT_LE(n, p.T);
      }
  }
}

TEST(Generator, DifferentWordsDifferInHalfTheFrames) {
  const auto p = vf::desk_profile();
  for (std::size_t speaker = 0; speaker < 3; ++speaker) {
    for (std::size_t w1 = 0; w1 < 10; ++w1)
      for (std::size_t w2 = w1 + 1; w2 < 10; ++w2) {
        const auto a = vf::synthesize_word_video(w1, speaker, 0, p, 3);
        const auto b = vf::synthesize_word_video(w2, speaker, 0, p, 3);
        std::size_t differ = 0;
        for (std::size_t t = 0; t < a.sample.source_len; ++t) {
          const double ma = vf::measure_aperture(vf::tensor_frame(a.sample.frames, t));
          const double mb = vf::measure_aperture(vf::tensor_frame(b.sample.frames, t));
          differ += std::abs(ma - mb) > 0.01;
        }
        EXPECT_GE(2 * differ, a.sample.source_len) << w1 << " vs " << w2;
      }
  }
}

TEST(Generator, VocabularyLimits) {
  EXPECT_GE(vf::max_synthetic_vocabulary(), 27u);
  EXPECT_EQ(vf::synthetic_vocabulary(10).size(), 10u);
  EXPECT_THROW(vf::synthetic_vocabulary(vf::max_synthetic_vocabulary() + 1), vf::ConfigError);
  EXPECT_THROW(vf::synthesize_word_video(999, 0, 0, vf::desk_profile(), 1), vf::ConfigError);
}

TEST(Patches, BalancedAndConsistentWithIou) {
  const auto p = vf::desk_profile();
  std::vector<vf::SyntheticVideo> videos;
  for (std::size_t s = 0; s < 3; ++s) videos.push_back(vf::synthesize_word_video(s, s, 0, p, 2));
  std::vector<vf::LabeledScene> scenes;
  for (const auto& v : videos)
    for (std::size_t t = 0; t < v.scene.size(); ++t) scenes.push_back({&v.scene[t], v.rois[t]});
  const auto ds = vf::build_patch_dataset(scenes, p.W, p.H, 100, 5);
  EXPECT_EQ(ds.patches.shape(), (vf::Shape{100, 1, 24, 36}));
  std::size_t pos = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    pos += ds.labels[i];
    const double o = vf::iou(ds.boxes[i], ds.mouths[i]);
    if (ds.labels[i]) {
      EXPECT_GE(o, 0.5);
      const auto& m = ds.mouths[i];
      EXPECT_NEAR(ds.boxes[i].center_x(), m.center_x(), 0.5 * m.width);
      EXPECT_NEAR(ds.boxes[i].center_y(), m.center_y(), 0.5 * m.height);
    } else {
      EXPECT_LE(o, 0.1);
    }
  }
  EXPECT_NEAR(double(pos), 50.0, 5.0);
  for (float v : ds.patches.data()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(Manifest, RoundTripAndBatchLoading) {
  const auto dir = fs::temp_directory_path() / "visemeflow_datasets_test";
  fs::create_directories(dir);
  vf::Manifest m;
  m.vocabulary = vf::synthetic_vocabulary(3);
  m.profile = vf::desk_profile();
  for (std::size_t i = 0; i < 3; ++i) {
    const auto v = vf::synthesize_word_video(i, 0, 0, m.profile, 1);
    const std::string name = "v" + std::to_string(i) + ".ntsr";
    vf::save_tensor((dir / name).string(), v.sample.frames);
    m.records.push_back({name, i, 0, v.sample.source_len, 0, {{1, 2, 3, 4}}});
  }
  const auto path = (dir / "manifest.jsonl").string();
  vf::save_manifest(path, m);
  const auto back = vf::load_manifest(path);
  EXPECT_EQ(back.records, m.records);
  EXPECT_EQ(back.vocabulary, m.vocabulary);

  const std::vector<std::size_t> one{1};
  const auto b1 = vf::load_batch(back, one);
  const auto direct = vf::synthesize_word_video(1, 0, 0, m.profile, 1).sample.frames;
  EXPECT_EQ(vf::reshape(b1.frames, direct.shape()), direct);
  const std::vector<std::size_t> two{0, 2};
  const auto b2 = vf::load_batch(back, two);
  EXPECT_EQ(b2.frames.shape(), (vf::Shape{2, 12, 1, 24, 36}));
  EXPECT_EQ(b2.labels, (std::vector<std::size_t>{0, 2}));

  // A T=25 file in a T=29 manifest is a profile mismatch.
  vf::Manifest bbc = back;
  bbc.profile = vf::bbc_profile();
  vf::save_tensor((dir / "short.ntsr").string(), vf::TensorF(vf::Shape{25, 1, 42, 72}));
  bbc.records = {{"short.ntsr", 0, 0, 25, 0, {}}};
  EXPECT_THROW(vf::load_batch(bbc, std::vector<std::size_t>{0}), vf::ProfileMismatchError);
  bbc.records = {{"absent.ntsr", 0, 0, 25, 0, {}}};
  EXPECT_THROW(vf::load_batch(bbc, std::vector<std::size_t>{0}), vf::DataError);
}

TEST(Manifest, LabelOutsideVocabularyRejected) {
  auto m = grid_manifest(1, 2, 1);
  m.records[0].label = 5;
  EXPECT_THROW(m.validate(), vf::DataError);
}
