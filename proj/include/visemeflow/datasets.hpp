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

// Dataset profiles, the procedural lip-video generator, manifests, split
// protocols, the lip/non-lip patch set and batch loading.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "visemeflow/common.hpp"
#include "visemeflow/tensor.hpp"
#include "visemeflow/vision.hpp"

namespace visemeflow {

/// Fixed sequence length and frame size of a corpus.
struct Profile {
  std::string name;
  std::size_t T = 0;
  std::size_t H = 0;
  std::size_t W = 0;

  bool operator==(const Profile&) const = default;

  /// Size of the synthetic full frames the mouth is rendered into.
  std::size_t scene_width() const { return W * 5 / 2; }
  std::size_t scene_height() const { return H * 4; }
};

inline Profile bbc_profile() { return {"bbc", 29, 42, 72}; }
inline Profile miracl_profile() { return {"miracl", 25, 28, 72}; }
inline Profile grid_profile() { return {"grid", 25, 28, 72}; }
inline Profile desk_profile() { return {"desk", 12, 24, 36}; }

inline Profile profile_by_name(const std::string& name) {
  for (auto p : {bbc_profile(), miracl_profile(), grid_profile(), desk_profile()}) {
    if (p.name == name) return p;
  }
  throw ConfigError("unknown profile '" + name + "' (bbc|miracl|grid|desk)");
}

struct VideoSample {
  TensorF frames;  // [T, 1, H, W], values in [0, 1]
  std::size_t label = 0;
  std::size_t speaker = 0;
  std::size_t source_len = 0;
};

// ---------------------------------------------------------------------------
// Synthetic generator

namespace detail {

// Greedy code in {0..3}^5 with pairwise Hamming distance >= 3: each word
// visits five aperture keyframes, and any two words disagree on at least
// three of them.
inline const std::vector<std::array<int, 5>>& word_codes() {
  static const std::vector<std::array<int, 5>> codes = [] {
    std::vector<std::array<int, 5>> out;
    for (int v = 0; v < 1024; ++v) {
      std::array<int, 5> c{};
      for (int k = 0; k < 5; ++k) c[4 - k] = (v >> (2 * k)) & 3;
      bool ok = true;
      for (const auto& o : out) {
        int dist = 0;
        for (int k = 0; k < 5; ++k) dist += c[k] != o[k];
        if (dist < 3) {
          ok = false;
          break;
        }
      }
      if (ok) out.push_back(c);
    }
    return out;
  }();
  return codes;
}

}  // namespace detail

inline std::size_t max_synthetic_vocabulary() { return detail::word_codes().size(); }

inline std::vector<std::string> synthetic_vocabulary(std::size_t n) {
  static const char* const kWords[] = {
      "about",  "black",   "crime",   "during", "every",   "family", "giving",
      "hours",  "justice", "killed",  "leaders", "money",  "nothing", "option",
      "people", "question", "right",  "should", "taking",  "under",  "victims",
      "water",  "years",   "zero",    "again",  "before",  "called", "death",
      "england", "friday", "group",   "house"};
  if (n > max_synthetic_vocabulary()) {
    throw ConfigError("synthetic vocabulary supports at most " +
                      std::to_string(max_synthetic_vocabulary()) + " words");
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(i < std::size(kWords) ? kWords[i] : "word" + std::to_string(i));
  }
  return out;
}

/// Mouth aperture in [0, 1] for `word` at normalized time u in [0, 1].
inline double word_aperture(std::size_t word, double u) {
  static constexpr double kLevels[4] = {0.15, 0.40, 0.65, 0.90};
  const auto& code = detail::word_codes().at(word);
  const double pos = std::clamp(u, 0.0, 1.0) * 4.0;
  const int k = std::min(3, static_cast<int>(pos));
  const double f = pos - k;
  const double s = 0.5 - 0.5 * std::cos(std::numbers::pi * f);
  return (1.0 - s) * kLevels[code[k]] + s * kLevels[code[k + 1]];
}

struct SpeakerStyle {
  double scale = 1.0;       // mouth size relative to the profile frame
  double offset_x = 0.0;    // mouth center offset, pixels
  double offset_y = 0.0;
  double brightness = 0.0;  // added to skin and lips
  double lip_tone = 0.38;
};

inline SpeakerStyle speaker_style(std::size_t speaker, const Profile& p,
                                  std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x5350, speaker}));
  SpeakerStyle s;
  s.scale = rng.uniform(0.92, 1.08);
  s.offset_x = rng.uniform(-0.06, 0.06) * double(p.scene_width());
  s.offset_y = rng.uniform(-0.03, 0.03) * double(p.scene_height());
  s.brightness = rng.uniform(-0.06, 0.06);
  s.lip_tone = rng.uniform(0.33, 0.43);
  return s;
}

/// Number of real (non-padding) frames of an utterance; depends on speaker
/// and occurrence only, in [ceil(0.6 T), T].
inline std::size_t synthetic_source_len(std::size_t speaker, std::size_t occurrence,
                                        const Profile& p, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x4c454e, speaker, occurrence}));
  const std::size_t lo = (6 * p.T + 9) / 10;
  return lo + rng.below(p.T - lo + 1);
}

struct SyntheticVideo {
  std::vector<GrayFrame> scene;  // source_len full frames
  std::vector<ROI> rois;         // ground-truth mouth box per scene frame
  std::vector<double> apertures; // rendered aperture per scene frame
  VideoSample sample;            // ground-truth crops, padded to T
};

namespace detail {

inline float soft_ellipse(double dx, double dy, double rx, double ry) {
  if (rx <= 0.0 || ry <= 0.0) return 0.0f;
  const double e = std::sqrt((dx * dx) / (rx * rx) + (dy * dy) / (ry * ry));
  const double m = (1.0 - e) * std::min(rx, ry) + 0.5;
  return static_cast<float>(std::clamp(m, 0.0, 1.0));
}

}  // namespace detail

/// Renders one scene frame with the mouth centered at (cx, cy).
inline GrayFrame render_mouth_frame(const Profile& p, const SpeakerStyle& s,
                                    double cx, double cy, double aperture,
                                    Rng& noise, double noise_sigma = 0.02) {
  const std::size_t sw = p.scene_width(), sh = p.scene_height();
  GrayFrame g(sw, sh);
  const double mw = p.W * s.scale, mh = p.H * s.scale;
  const double lip_rx = 0.40 * mw, lip_ry = (0.22 + 0.10 * aperture) * mh;
  const double open_rx = (0.24 + 0.06 * aperture) * mw;
  const double open_ry = 0.20 * aperture * mh;
  const double skin = 0.62 + s.brightness;
  const double lip = s.lip_tone + s.brightness;
  constexpr double kOpening = 0.10;
  for (std::size_t y = 0; y < sh; ++y) {
    const double shade = skin - 0.05 * (double(y) / double(sh) - 0.5);
    for (std::size_t x = 0; x < sw; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double ml = detail::soft_ellipse(dx, dy, lip_rx, lip_ry);
      const double mo = detail::soft_ellipse(dx, dy, open_rx, open_ry);
      double v = shade * (1.0 - ml) + lip * ml;
      v = v * (1.0 - mo) + kOpening * mo;
      v += noise_sigma * noise.normal();
      g.at(x, y) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return g;
}

/// Deterministic render of one utterance. Words differ by their aperture
/// trajectory; speakers by mouth placement, size and tone; occurrences by a
/// small positional jitter, amplitude jitter and pixel noise.
inline SyntheticVideo synthesize_word_video(std::size_t word, std::size_t speaker,
                                            std::size_t occurrence,
                                            const Profile& p, std::uint64_t seed) {
  if (word >= max_synthetic_vocabulary()) {
    throw ConfigError("word id " + std::to_string(word) + " outside the synthetic vocabulary");
  }
  if (p.T == 0 || p.H < 12 || p.W < 12) throw ConfigError("invalid profile " + p.name);
  const auto style = speaker_style(speaker, p, seed);
  const std::size_t len = synthetic_source_len(speaker, occurrence, p, seed);
  Rng rng(derive_seed(seed, {0x4f4343, word, speaker, occurrence}));
  const double jx = rng.uniform(-1.0, 1.0), jy = rng.uniform(-1.0, 1.0);
  const double amp = rng.uniform(0.95, 1.05);
  const double base_cx = p.scene_width() / 2.0 + style.offset_x + jx;
  const double base_cy = 0.72 * p.scene_height() + style.offset_y + jy;
  const int roi_w = static_cast<int>(std::lround(p.W * style.scale));
  const int roi_h = static_cast<int>(std::lround(p.H * style.scale));

  SyntheticVideo v;
  std::vector<GrayFrame> crops;
  for (std::size_t t = 0; t < len; ++t) {
    const double u = len > 1 ? double(t) / double(len - 1) : 0.0;
    const double a = std::clamp(amp * word_aperture(word, u), 0.0, 1.0);
    const double cx = base_cx + rng.uniform(-0.5, 0.5);
    const double cy = base_cy + rng.uniform(-0.5, 0.5);
    auto frame = render_mouth_frame(p, style, cx, cy, a, rng);
    ROI roi{static_cast<int>(std::lround(cx - roi_w / 2.0)),
            static_cast<int>(std::lround(cy - roi_h / 2.0)), roi_w, roi_h};
    crops.push_back(crop_resize(frame, roi, p.W, p.H));
    v.scene.push_back(std::move(frame));
    v.rois.push_back(roi);
    v.apertures.push_back(a);
  }
  v.sample.frames = frames_to_tensor(pad_frames(crops, p.T));
  v.sample.label = word;
  v.sample.speaker = speaker;
  v.sample.source_len = len;
  return v;
}

/// Dark-pixel fraction of a mouth crop: a rendered measure of aperture.
inline double measure_aperture(const GrayFrame& crop, float dark_threshold = 0.2f) {
  std::size_t dark = 0;
  for (float v : crop.pixels) dark += v < dark_threshold;
  return double(dark) / double(crop.pixels.size());
}

// ---------------------------------------------------------------------------
// Detector-driven preprocessing

struct PreprocessOptions {
  DetectorParams detector;
  bool fixed_roi = false;  // detect once on the first frame and reuse
};

/// Default detector settings for a profile's scene: windows between 0.8x and
/// 1.25x of the profile frame size.
inline DetectorParams default_detector(const Profile& p, const CascadeModel& m) {
  DetectorParams d;
  d.min_width = std::max<int>(m.base_width, static_cast<int>(0.8 * p.W));
  d.min_height = std::max<int>(m.base_height, static_cast<int>(0.8 * p.H));
  d.max_width = static_cast<int>(1.25 * p.W);
  d.max_height = static_cast<int>(1.25 * p.H);
  return d;
}

/// Mouth ROI per frame -> crop to W x H -> pad to T. Returns [T,1,H,W].
inline TensorF preprocess_video(const std::vector<GrayFrame>& scene,
                                const CascadeModel& cascade, const Profile& p,
                                const PreprocessOptions& opt,
                                std::vector<ROI>* rois_out = nullptr) {
  if (scene.empty()) throw DataError("preprocess: video has no frames");
  std::vector<GrayFrame> crops;
  MouthTracker tracker(cascade, opt.detector);
  std::optional<ROI> fixed;
  for (const auto& frame : scene) {
    ROI roi;
    if (opt.fixed_roi) {
      if (!fixed) fixed = tracker.next(frame);
      roi = *fixed;
    } else {
      roi = tracker.next(frame);
    }
    if (rois_out) rois_out->push_back(roi);
    crops.push_back(crop_resize(frame, roi, p.W, p.H));
  }
  return frames_to_tensor(pad_frames(crops, p.T));
}

// ---------------------------------------------------------------------------
// Manifests

struct ManifestRecord {
  std::string path;  // relative to the manifest's directory unless absolute
  std::size_t label = 0;
  std::size_t speaker = 0;
  std::size_t source_len = 0;
  std::size_t occurrence = 0;
  std::vector<ROI> rois;  // optional per-frame mouth boxes (scene corpora)

  bool operator==(const ManifestRecord&) const = default;
};

struct Manifest {
  std::vector<std::string> vocabulary;
  Profile profile;
  std::string kind = "frames";  // "frames": [T,1,H,W] crops; "scene": raw frames
  std::string base_dir;         // resolved against record paths
  std::vector<ManifestRecord> records;

  std::string resolve(const ManifestRecord& r) const {
    std::filesystem::path p(r.path);
    if (p.is_absolute() || base_dir.empty()) return p.string();
    return (std::filesystem::path(base_dir) / p).string();
  }

  Manifest with_records(std::vector<ManifestRecord> recs) const {
    Manifest m = *this;
    m.records = std::move(recs);
    return m;
  }

  void validate() const {
    for (const auto& r : records) {
      if (r.label >= vocabulary.size()) {
        throw DataError("record " + r.path + " has label " + std::to_string(r.label) +
                        " outside the vocabulary");
      }
    }
  }
};

inline nlohmann::json manifest_header_json(const Manifest& m) {
  return {{"vocabulary", m.vocabulary},
          {"profile", {{"name", m.profile.name}, {"T", m.profile.T},
                       {"H", m.profile.H}, {"W", m.profile.W}}},
          {"kind", m.kind}};
}

inline nlohmann::json manifest_record_json(const ManifestRecord& r) {
  nlohmann::json j = {{"path", r.path},
                      {"label", r.label},
                      {"speaker", r.speaker},
                      {"source_len", r.source_len},
                      {"occurrence", r.occurrence}};
  if (!r.rois.empty()) {
    nlohmann::json rois = nlohmann::json::array();
    for (const auto& b : r.rois) rois.push_back({b.x, b.y, b.width, b.height});
    j["rois"] = rois;
  }
  return j;
}

inline void save_manifest(const std::string& path, const Manifest& m) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << manifest_header_json(m).dump() << "\n";
  for (const auto& r : m.records) os << manifest_record_json(r).dump() << "\n";
  if (!os) throw DataError("write failed: " + path);
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("missing manifest: " + path);
  Manifest m;
  m.base_dir = std::filesystem::path(path).parent_path().string();
  std::string line;
  std::size_t lineno = 0;
  try {
    if (!std::getline(is, line)) throw DataError("empty manifest: " + path);
    ++lineno;
    const auto h = nlohmann::json::parse(line);
    m.vocabulary = h.at("vocabulary").get<std::vector<std::string>>();
    const auto& p = h.at("profile");
    m.profile = {p.value("name", std::string("custom")), p.at("T").get<std::size_t>(),
                 p.at("H").get<std::size_t>(), p.at("W").get<std::size_t>()};
    m.kind = h.value("kind", std::string("frames"));
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      ManifestRecord r;
      r.path = j.at("path").get<std::string>();
      r.label = j.at("label").get<std::size_t>();
      r.speaker = j.at("speaker").get<std::size_t>();
      r.source_len = j.at("source_len").get<std::size_t>();
      r.occurrence = j.value("occurrence", std::size_t{0});
      if (j.contains("rois")) {
        for (const auto& b : j["rois"]) {
          r.rois.push_back({b.at(0).get<int>(), b.at(1).get<int>(),
                            b.at(2).get<int>(), b.at(3).get<int>()});
        }
      }
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path + " line " + std::to_string(lineno) + ": " +
                    e.what());
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Split protocols. Each returns a partition of the selected records; within
// a split records keep their manifest order.

struct Splits {
  Manifest train, val, test;
};

namespace detail {

inline Splits assemble(const Manifest& m, const std::vector<int>& assignment) {
  std::vector<ManifestRecord> parts[3];
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (assignment[i] >= 0) parts[assignment[i]].push_back(m.records[i]);
  }
  return {m.with_records(std::move(parts[0])), m.with_records(std::move(parts[1])),
          m.with_records(std::move(parts[2]))};
}

template <class Key>
std::map<Key, std::vector<std::size_t>> group_by(const Manifest& m, Key (*key)(const ManifestRecord&)) {
  std::map<Key, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < m.records.size(); ++i) groups[key(m.records[i])].push_back(i);
  return groups;
}

inline void assign_counts(std::vector<std::size_t> members, const std::size_t counts[3],
                          Rng rng, std::vector<int>& assignment) {
  rng.shuffle(members);
  std::size_t k = 0;
  for (int s = 0; s < 3; ++s) {
    for (std::size_t c = 0; c < counts[s]; ++c) assignment[members[k++]] = s;
  }
}

}  // namespace detail

/// Per class: seeded shuffle, then the first n_train/n_val/n_test go to
/// train/val/test. Extra occurrences are left out.
inline Splits split_per_class_counts(const Manifest& m, std::size_t n_train,
                                     std::size_t n_val, std::size_t n_test,
                                     std::uint64_t seed) {
  const std::size_t counts[3] = {n_train, n_val, n_test};
  std::vector<int> assignment(m.records.size(), -1);
  auto groups = detail::group_by<std::size_t>(
      m, +[](const ManifestRecord& r) { return r.label; });
  for (std::size_t label = 0; label < m.vocabulary.size(); ++label) {
    const auto it = groups.find(label);
    const std::size_t have = it == groups.end() ? 0 : it->second.size();
    if (have < n_train + n_val + n_test) {
      throw DataError("insufficient occurrences for class '" + m.vocabulary[label] +
                      "': " + std::to_string(have) + " < " +
                      std::to_string(n_train + n_val + n_test));
    }
    detail::assign_counts(it->second, counts, Rng(derive_seed(seed, {0x5043, label})),
                          assignment);
  }
  return detail::assemble(m, assignment);
}

/// Per (speaker, word): seeded assignment of per_word_train/val/test
/// occurrences, so every speaker appears in every split.
inline Splits split_speaker_dependent(const Manifest& m, std::size_t per_word_train,
                                      std::size_t per_word_val,
                                      std::size_t per_word_test, std::uint64_t seed) {
  const std::size_t counts[3] = {per_word_train, per_word_val, per_word_test};
  std::vector<int> assignment(m.records.size(), -1);
  auto groups = detail::group_by<std::pair<std::size_t, std::size_t>>(
      m, +[](const ManifestRecord& r) { return std::pair{r.speaker, r.label}; });
  for (const auto& [key, members] : groups) {
    if (members.size() < per_word_train + per_word_val + per_word_test) {
      throw DataError("insufficient occurrences for speaker " + std::to_string(key.first) +
                      ", word '" + m.vocabulary.at(key.second) + "': " +
                      std::to_string(members.size()));
    }
    detail::assign_counts(members, counts,
                          Rng(derive_seed(seed, {0x5344, key.first, key.second})),
                          assignment);
  }
  return detail::assemble(m, assignment);
}

inline std::vector<std::size_t> speakers_of(const Manifest& m) {
  std::set<std::size_t> s;
  for (const auto& r : m.records) s.insert(r.speaker);
  return {s.begin(), s.end()};
}

/// test = every record of test_speaker, val = every record of val_speaker,
/// train = the rest. The seed is unused; the split is fully determined.
inline Splits split_held_out_speaker(const Manifest& m, std::size_t test_speaker,
                                     std::size_t val_speaker, std::uint64_t /*seed*/ = 0) {
  if (test_speaker == val_speaker) {
    throw ConfigError("test and val speaker must differ");
  }
  const auto speakers = speakers_of(m);
  for (auto s : {test_speaker, val_speaker}) {
    if (!std::binary_search(speakers.begin(), speakers.end(), s)) {
      throw DataError("unknown speaker " + std::to_string(s));
    }
  }
  std::vector<int> assignment(m.records.size());
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto s = m.records[i].speaker;
    assignment[i] = s == test_speaker ? 2 : (s == val_speaker ? 1 : 0);
  }
  return detail::assemble(m, assignment);
}

/// Largest-remainder apportionment of n items to the given fractions.
inline std::array<std::size_t, 3> apportion(std::size_t n, const std::array<double, 3>& f) {
  std::array<std::size_t, 3> out{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = f[i] * double(n);
    out[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - double(out[i]);
    used += out[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return rem[a] > rem[b] + 1e-12; });
  for (std::size_t k = 0; used < n; ++k, ++used) ++out[order[k % 3]];
  return out;
}

/// Per speaker: seeded shuffle, then contiguous fractions of that speaker's
/// records with largest-remainder rounding.
inline Splits split_per_speaker_fraction(const Manifest& m,
                                         std::array<double, 3> fractions,
                                         std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1 (got " + std::to_string(total) + ")");
  }
  for (double f : fractions) {
    if (f < 0.0) throw ConfigError("split fractions must be non-negative");
  }
  std::vector<int> assignment(m.records.size(), -1);
  auto groups = detail::group_by<std::size_t>(
      m, +[](const ManifestRecord& r) { return r.speaker; });
  for (const auto& [speaker, members] : groups) {
    const auto counts = apportion(members.size(), fractions);
    const std::size_t c[3] = {counts[0], counts[1], counts[2]};
    detail::assign_counts(members, c, Rng(derive_seed(seed, {0x5046, speaker})),
                          assignment);
  }
  return detail::assemble(m, assignment);
}

// ---------------------------------------------------------------------------
// Lip / non-lip patches

struct LabeledScene {
  const GrayFrame* frame;
  ROI mouth;
};

struct PatchDataset {
  TensorF patches;                 // [N, 1, h, w]
  std::vector<std::size_t> labels; // 1 = lip, 0 = non-lip
  std::vector<ROI> boxes;          // sampled box in scene coordinates
  std::vector<ROI> mouths;         // mouth box of the source frame
};

/// Positives are boxes with IoU >= 0.5 against the mouth, negatives IoU <=
/// 0.1; each is resampled to patch_w x patch_h. Half of n_patches (rounded
/// down) are positive.
inline PatchDataset build_patch_dataset(const std::vector<LabeledScene>& scenes,
                                        std::size_t patch_w, std::size_t patch_h,
                                        std::size_t n_patches, std::uint64_t seed) {
  if (scenes.empty()) throw DataError("patch dataset needs at least one frame");
  if (n_patches == 0) throw ConfigError("n_patches must be >= 1");
  Rng rng(derive_seed(seed, {0x5041}));
  PatchDataset ds;
  ds.patches = TensorF(Shape{n_patches, 1, patch_h, patch_w});
  const std::size_t n_pos = n_patches / 2;
  const std::size_t budget = 1000 * n_patches;
  std::size_t attempts = 0;
  for (std::size_t i = 0; i < n_patches; ++i) {
    const bool positive = i < n_pos;
    for (;;) {
      if (++attempts > budget) {
        throw DataError("cannot satisfy patch balance within the sampling budget");
      }
      const auto& sc = scenes[rng.below(scenes.size())];
      const auto& g = *sc.frame;
      const int bw = static_cast<int>(std::lround(sc.mouth.width * rng.uniform(0.9, 1.1)));
      const int bh = static_cast<int>(std::lround(sc.mouth.height * rng.uniform(0.9, 1.1)));
      if (bw > int(g.width) || bh > int(g.height) || bw < 2 || bh < 2) continue;
      ROI box;
      if (positive) {
        const double cx = sc.mouth.center_x() + rng.uniform(-0.15, 0.15) * sc.mouth.width;
        const double cy = sc.mouth.center_y() + rng.uniform(-0.15, 0.15) * sc.mouth.height;
        box = {static_cast<int>(std::lround(cx - bw / 2.0)),
               static_cast<int>(std::lround(cy - bh / 2.0)), bw, bh};
      } else {
        box = {static_cast<int>(rng.below(g.width - bw + 1)),
               static_cast<int>(rng.below(g.height - bh + 1)), bw, bh};
      }
      if (!contains(g, box)) continue;
      const double overlap = iou(box, sc.mouth);
      if (positive ? overlap < 0.5 : overlap > 0.1) continue;
      const auto patch = crop_resize(g, box, patch_w, patch_h);
      std::copy(patch.pixels.begin(), patch.pixels.end(),
                ds.patches.ptr() + i * patch_w * patch_h);
      ds.labels.push_back(positive ? 1 : 0);
      ds.boxes.push_back(box);
      ds.mouths.push_back(sc.mouth);
      break;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batch loading

inline TensorF load_video_tensor(const Manifest& m, const ManifestRecord& r) {
  auto t = load_tensor<float>(m.resolve(r));
  const Shape expected{m.profile.T, 1, m.profile.H, m.profile.W};
  if (t.shape() != expected) {
    throw ProfileMismatchError("profile mismatch: " + r.path + " has shape " +
                               t.shape().str() + ", manifest profile expects " +
                               expected.str());
  }
  return t;
}

struct Batch {
  TensorF frames;  // [N, T, 1, H, W]
  std::vector<std::size_t> labels;
};

inline Batch load_batch(const Manifest& m, std::span<const std::size_t> indices) {
  if (m.kind != "frames") throw DataError("load_batch needs a preprocessed (frames) manifest");
  const auto& p = m.profile;
  Batch b{TensorF(Shape{std::max<std::size_t>(indices.size(), 1), p.T, 1, p.H, p.W}), {}};
  if (indices.empty()) throw DataError("load_batch: no indices");
  const std::size_t per = p.T * p.H * p.W;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= m.records.size()) {
      throw DataError("record index " + std::to_string(indices[i]) + " out of range");
    }
    const auto& r = m.records[indices[i]];
    const auto t = load_video_tensor(m, r);
    std::copy(t.ptr(), t.ptr() + per, b.frames.ptr() + i * per);
    b.labels.push_back(r.label);
  }
  return b;
}

}  // namespace visemeflow
