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

// Frame preprocessing: grayscale conversion, summed-area tables, staged
// rectangle-feature cascade detection, mouth ROI tracking, bilinear crops
// and fixed-length black-frame padding.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "visemeflow/common.hpp"
#include "visemeflow/tensor.hpp"

namespace visemeflow {

struct GrayFrame {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> pixels;  // row-major, values in [0, 1]

  GrayFrame() = default;
  GrayFrame(std::size_t w, std::size_t h, float fill = 0.0f)
      : width(w), height(h), pixels(w * h, fill) {}

  float& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  float at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  bool operator==(const GrayFrame&) const = default;
};

/// Interleaved RGB; channel values in [0, max_value] (255 or 1).
struct RgbFrame {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> rgb;
  float max_value = 255.0f;
};

struct ROI {
  int x = 0, y = 0, width = 0, height = 0;

  int area() const { return width * height; }
  double center_x() const { return x + width / 2.0; }
  double center_y() const { return y + height / 2.0; }
  bool operator==(const ROI&) const = default;
};

inline double iou(const ROI& a, const ROI& b) {
  const int x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
  const int x1 = std::min(a.x + a.width, b.x + b.width);
  const int y1 = std::min(a.y + a.height, b.y + b.height);
  const double inter = (x1 > x0 && y1 > y0) ? double(x1 - x0) * (y1 - y0) : 0.0;
  const double uni = double(a.area()) + double(b.area()) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline bool contains(const GrayFrame& g, const ROI& r) {
  return r.width > 0 && r.height > 0 && r.x >= 0 && r.y >= 0 &&
         r.x + r.width <= static_cast<int>(g.width) &&
         r.y + r.height <= static_cast<int>(g.height);
}

/// BT.601 luma.
inline GrayFrame to_grayscale(const RgbFrame& rgb) {
  if (rgb.rgb.size() != rgb.width * rgb.height * 3) {
    throw ShapeError("rgb buffer does not match frame size");
  }
  GrayFrame g(rgb.width, rgb.height);
  const float inv = 1.0f / rgb.max_value;
  for (std::size_t i = 0; i < g.pixels.size(); ++i) {
    const float r = rgb.rgb[3 * i], gr = rgb.rgb[3 * i + 1], b = rgb.rgb[3 * i + 2];
    const float y = (0.299f * r + 0.587f * gr + 0.114f * b) * inv;
    g.pixels[i] = std::clamp(y, 0.0f, 1.0f);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Summed-area tables

struct IntegralImage {
  std::size_t width = 0, height = 0;  // of the source frame
  std::vector<double> table;          // (height+1) x (width+1), zero border

  double at(std::size_t x, std::size_t y) const {
    return table[y * (width + 1) + x];
  }

  /// Sum over pixels [x, x+w) x [y, y+h).
  double rect_sum(std::size_t x, std::size_t y, std::size_t w,
                  std::size_t h) const {
    return at(x + w, y + h) - at(x, y + h) - at(x + w, y) + at(x, y);
  }
};

inline IntegralImage integral_image(const GrayFrame& g, bool squared = false) {
  IntegralImage ii;
  ii.width = g.width;
  ii.height = g.height;
  ii.table.assign((g.width + 1) * (g.height + 1), 0.0);
  const std::size_t stride = g.width + 1;
  for (std::size_t y = 0; y < g.height; ++y) {
    double row = 0.0;
    for (std::size_t x = 0; x < g.width; ++x) {
      const double p = g.at(x, y);
      row += squared ? p * p : p;
      ii.table[(y + 1) * stride + x + 1] = ii.table[y * stride + x + 1] + row;
    }
  }
  return ii;
}

// ---------------------------------------------------------------------------
// Cascade model

struct FeatureRect {
  int x = 0, y = 0, width = 0, height = 0;  // base-window units
  double weight = 0.0;
};

struct WeakClassifier {
  std::vector<FeatureRect> rects;
  double threshold = 0.0;
  double left = 0.0;   // output when normalized feature < threshold * stddev
  double right = 0.0;
};

struct CascadeStage {
  double threshold = 0.0;
  std::vector<WeakClassifier> weak;
};

struct CascadeModel {
  int base_width = 0, base_height = 0;
  std::vector<CascadeStage> stages;

  void validate() const {
    if (base_width <= 0 || base_height <= 0) {
      throw ConfigError("cascade base window must be positive");
    }
    if (stages.empty()) throw ConfigError("degenerate cascade: no stages");
    for (const auto& s : stages) {
      if (s.weak.empty()) throw ConfigError("degenerate cascade: empty stage");
      for (const auto& w : s.weak) {
        if (w.rects.empty()) throw ConfigError("weak classifier without rectangles");
        for (const auto& r : w.rects) {
          if (r.x < 0 || r.y < 0 || r.width <= 0 || r.height <= 0 ||
              r.x + r.width > base_width || r.y + r.height > base_height) {
            throw ConfigError("feature rectangle outside the base window");
          }
        }
      }
    }
  }
};

inline nlohmann::json cascade_to_json(const CascadeModel& m) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : m.stages) {
    nlohmann::json weak = nlohmann::json::array();
    for (const auto& w : s.weak) {
      nlohmann::json rects = nlohmann::json::array();
      for (const auto& r : w.rects) {
        rects.push_back({r.x, r.y, r.width, r.height, r.weight});
      }
      weak.push_back({{"rects", rects}, {"threshold", w.threshold},
                      {"left", w.left}, {"right", w.right}});
    }
    stages.push_back({{"threshold", s.threshold}, {"weak", weak}});
  }
  return {{"base_window", {m.base_width, m.base_height}}, {"stages", stages}};
}

inline CascadeModel cascade_from_json(const nlohmann::json& j) {
  CascadeModel m;
  try {
    m.base_width = j.at("base_window").at(0).get<int>();
    m.base_height = j.at("base_window").at(1).get<int>();
    for (const auto& s : j.at("stages")) {
      CascadeStage stage;
      stage.threshold = s.at("threshold").get<double>();
      for (const auto& w : s.at("weak")) {
        WeakClassifier wc;
        wc.threshold = w.at("threshold").get<double>();
        wc.left = w.at("left").get<double>();
        wc.right = w.at("right").get<double>();
        for (const auto& r : w.at("rects")) {
          wc.rects.push_back({r.at(0).get<int>(), r.at(1).get<int>(),
                              r.at(2).get<int>(), r.at(3).get<int>(),
                              r.at(4).get<double>()});
        }
        stage.weak.push_back(std::move(wc));
      }
      m.stages.push_back(std::move(stage));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed cascade: ") + e.what());
  }
  m.validate();
  return m;
}

inline CascadeModel load_cascade(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("missing cascade file: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cascade " + path + " is not valid JSON: " + e.what());
  }
  return cascade_from_json(j);
}

inline void save_cascade(const std::string& path, const CascadeModel& m) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << cascade_to_json(m).dump(1) << "\n";
}

/// Hand-built mouth cascade for a base window that frames the whole mouth
/// region. Stage 1 requires a dark horizontal band between brighter bands
/// (so flat windows are rejected); stage 2 requires dark mass in the middle
/// relative to the left/right margins and in the band's outer thirds (a
/// window much larger than the lips fails here); stage 3 requires the upper
/// and lower margins, and the left and right margins, to balance.
inline CascadeModel make_mouth_cascade(int base_w, int base_h) {
  if (base_w < 10 || base_h < 10) {
    throw ConfigError("mouth cascade needs a base window of at least 10x10");
  }
  auto px = [](double frac, int size) {
    return static_cast<int>(std::lround(frac * size));
  };
  auto rect = [&](double u0, double v0, double u1, double v1, double weight) {
    const int x0 = px(u0, base_w), y0 = px(v0, base_h);
    const int x1 = std::max(x0 + 1, px(u1, base_w));
    const int y1 = std::max(y0 + 1, px(v1, base_h));
    return FeatureRect{x0, y0, x1 - x0, y1 - y0, weight};
  };
  auto area = [](const FeatureRect& r) { return double(r.width) * r.height; };
  // Zero-sum feature: bright regions weighted +1/area, dark regions -1/area,
  // scaled by the window area so the normalized value is a mean difference.
  auto contrast = [&](std::vector<FeatureRect> bright,
                      std::vector<FeatureRect> dark) {
    double ab = 0, ad = 0;
    for (auto& r : bright) ab += area(r);
    for (auto& r : dark) ad += area(r);
    const double win = double(base_w) * base_h;
    std::vector<FeatureRect> out;
    for (auto r : bright) {
      r.weight = win / ab;
      out.push_back(r);
    }
    for (auto r : dark) {
      r.weight = -win / ad;
      out.push_back(r);
    }
    return out;
  };
  auto above = [&](double t, std::vector<FeatureRect> b, std::vector<FeatureRect> d) {
    return WeakClassifier{contrast(std::move(b), std::move(d)), t, 0.0, 1.0};
  };
  auto below = [&](double t, std::vector<FeatureRect> b, std::vector<FeatureRect> d) {
    return WeakClassifier{contrast(std::move(b), std::move(d)), t, 1.0, 0.0};
  };

  const auto top = rect(0.10, 0.00, 0.90, 0.18, 0);
  const auto bottom = rect(0.10, 0.82, 0.90, 1.00, 0);
  const auto band = rect(0.20, 0.35, 0.80, 0.65, 0);
  const auto left = rect(0.00, 0.30, 0.06, 0.70, 0);
  const auto right = rect(0.94, 0.30, 1.00, 0.70, 0);
  const auto core = rect(0.35, 0.35, 0.65, 0.65, 0);
  const auto band_l = rect(0.16, 0.42, 0.30, 0.58, 0);
  const auto band_r = rect(0.70, 0.42, 0.84, 0.58, 0);

  CascadeModel m;
  m.base_width = base_w;
  m.base_height = base_h;
  m.stages.push_back({0.5, {above(1.0, {top, bottom}, {band})}});
  m.stages.push_back({1.5,
                      {above(1.5, {left, right}, {core}),
                       above(0.8, {top}, {band_l, band_r})}});
  m.stages.push_back({1.5,
                      {below(0.6, {top}, {bottom}), below(0.6, {bottom}, {top})}});
  m.stages.push_back({1.5,
                      {below(0.6, {left}, {right}), below(0.6, {right}, {left})}});
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Detection

struct DetectorParams {
  double scale_factor = 1.1;
  int min_width = 0, min_height = 0;  // 0: base window
  int max_width = 0, max_height = 0;  // 0: frame size
  int step = 2;
  double merge_iou = 0.4;
};

struct WindowScan {
  int x, y, width, height;
  double scale;
};

/// Every window the detector evaluates, in evaluation order.
inline std::vector<WindowScan> scan_windows(std::size_t frame_w,
                                            std::size_t frame_h,
                                            const CascadeModel& m,
                                            const DetectorParams& p) {
  if (p.scale_factor <= 1.0) throw ConfigError("scale_factor must exceed 1");
  if (p.step < 1) throw ConfigError("detector step must be >= 1");
  const int min_w = p.min_width > 0 ? p.min_width : m.base_width;
  const int min_h = p.min_height > 0 ? p.min_height : m.base_height;
  if (min_w < m.base_width || min_h < m.base_height) {
    throw ConfigError("min_size must be at least the cascade base window");
  }
  const int max_w = p.max_width > 0 ? p.max_width : static_cast<int>(frame_w);
  const int max_h = p.max_height > 0 ? p.max_height : static_cast<int>(frame_h);
  std::vector<WindowScan> out;
  double scale = std::max(double(min_w) / m.base_width, double(min_h) / m.base_height);
  for (;; scale *= p.scale_factor) {
    const int ww = static_cast<int>(std::lround(m.base_width * scale));
    const int wh = static_cast<int>(std::lround(m.base_height * scale));
    if (ww > max_w || wh > max_h || ww > int(frame_w) || wh > int(frame_h)) break;
    for (int y = 0; y + wh <= int(frame_h); y += p.step) {
      for (int x = 0; x + ww <= int(frame_w); x += p.step) {
        out.push_back({x, y, ww, wh, scale});
      }
    }
  }
  return out;
}

/// Scales a base-window rectangle to a window at `scale`, anchored at (wx, wy).
inline ROI scale_rect(const FeatureRect& r, const WindowScan& w) {
  const int x0 = static_cast<int>(std::lround(r.x * w.scale));
  const int y0 = static_cast<int>(std::lround(r.y * w.scale));
  const int x1 = static_cast<int>(std::lround((r.x + r.width) * w.scale));
  const int y1 = static_cast<int>(std::lround((r.y + r.height) * w.scale));
  return {w.x + x0, w.y + y0, std::max(1, x1 - x0), std::max(1, y1 - y0)};
}

/// Stage-by-stage evaluation of one window. `rect_sum` returns the pixel sum
/// of an ROI; `mean`/`sq_mean` describe the window. Shared by the fast path
/// and by anything that wants to evaluate windows another way.
template <class RectSum>
bool cascade_accepts(const CascadeModel& m, const WindowScan& w,
                     double mean, double sq_mean, RectSum&& rect_sum) {
  const double stddev = std::max(1e-6, std::sqrt(std::max(0.0, sq_mean - mean * mean)));
  const double win_area = double(w.width) * w.height;
  for (const auto& stage : m.stages) {
    double sum = 0.0;
    for (const auto& weak : stage.weak) {
      double f = 0.0;
      for (const auto& r : weak.rects) {
        const ROI s = scale_rect(r, w);
        // Rect weights assume base-window areas; rescale for rounding.
        const double base_area = double(r.width) * r.height * w.scale * w.scale;
        f += r.weight * rect_sum(s) * (base_area / double(s.area()));
      }
      const double normalized = f / win_area;
      sum += normalized < weak.threshold * stddev ? weak.left : weak.right;
    }
    if (!(sum > stage.threshold)) return false;
  }
  return true;
}

/// Windows accepted by every stage, before merging.
inline std::vector<ROI> cascade_candidates(const GrayFrame& g,
                                           const CascadeModel& m,
                                           const DetectorParams& p) {
  m.validate();
  const auto ii = integral_image(g);
  const auto sq = integral_image(g, true);
  std::vector<ROI> out;
  for (const auto& w : scan_windows(g.width, g.height, m, p)) {
    const double area = double(w.width) * w.height;
    const double mean = ii.rect_sum(w.x, w.y, w.width, w.height) / area;
    const double sq_mean = sq.rect_sum(w.x, w.y, w.width, w.height) / area;
    const bool ok = cascade_accepts(m, w, mean, sq_mean, [&](const ROI& r) {
      return ii.rect_sum(r.x, r.y, r.width, r.height);
    });
    if (ok) out.push_back({w.x, w.y, w.width, w.height});
  }
  return out;
}

/// Groups windows transitively linked by IoU >= threshold and averages each
/// group. Groups are returned in order of their first member.
inline std::vector<ROI> merge_detections(const std::vector<ROI>& windows,
                                         double iou_threshold) {
  std::vector<std::size_t> parent(windows.size());
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (std::size_t i = 0; i < windows.size(); ++i) {
    for (std::size_t j = i + 1; j < windows.size(); ++j) {
      if (iou(windows[i], windows[j]) >= iou_threshold) {
        const auto a = find(i), b = find(j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
    }
  }
  std::vector<ROI> merged;
  std::vector<std::size_t> root_of_group;
  std::vector<std::array<double, 5>> acc;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto r = find(i);
    auto it = std::find(root_of_group.begin(), root_of_group.end(), r);
    std::size_t gi;
    if (it == root_of_group.end()) {
      gi = root_of_group.size();
      root_of_group.push_back(r);
      acc.push_back({0, 0, 0, 0, 0});
    } else {
      gi = static_cast<std::size_t>(it - root_of_group.begin());
    }
    acc[gi][0] += windows[i].x;
    acc[gi][1] += windows[i].y;
    acc[gi][2] += windows[i].width;
    acc[gi][3] += windows[i].height;
    acc[gi][4] += 1;
  }
  for (const auto& a : acc) {
    merged.push_back({static_cast<int>(std::lround(a[0] / a[4])),
                      static_cast<int>(std::lround(a[1] / a[4])),
                      static_cast<int>(std::lround(a[2] / a[4])),
                      static_cast<int>(std::lround(a[3] / a[4]))});
  }
  return merged;
}

inline std::vector<ROI> cascade_detect(const GrayFrame& g, const CascadeModel& m,
                                       const DetectorParams& p = {}) {
  return merge_detections(cascade_candidates(g, m, p), p.merge_iou);
}

/// Fallback crop used when nothing has been detected yet.
inline ROI fallback_mouth_roi(std::size_t w, std::size_t h) {
  return {static_cast<int>(w / 4), static_cast<int>(2 * h / 3),
          static_cast<int>(w / 2), static_cast<int>(h / 4)};
}

/// Largest detection whose center lies in the lower half of the frame;
/// otherwise the previous frame's ROI; otherwise the fixed fallback crop.
inline ROI extract_mouth(const GrayFrame& g, const CascadeModel& m,
                         const std::optional<ROI>& previous = std::nullopt,
                         const DetectorParams& p = {}) {
  std::optional<ROI> best;
  for (const auto& r : cascade_detect(g, m, p)) {
    if (r.center_y() < g.height / 2.0 || !contains(g, r)) continue;
    if (!best || r.area() > best->area()) best = r;
  }
  if (best) return *best;
  if (previous && contains(g, *previous)) return *previous;
  return fallback_mouth_roi(g.width, g.height);
}

/// Stateful per-video wrapper around extract_mouth carrying the previous ROI.
class MouthTracker {
 public:
  MouthTracker(const CascadeModel& m, DetectorParams p = {})
      : model_(&m), params_(p) {}

  ROI next(const GrayFrame& g) {
    last_ = extract_mouth(g, *model_, last_, params_);
    return *last_;
  }

 private:
  const CascadeModel* model_;
  DetectorParams params_;
  std::optional<ROI> last_;
};

// ---------------------------------------------------------------------------
// Crop, resize, pad

/// Bilinear resample of `roi` to out_w x out_h with corner-aligned sampling:
/// output corners land exactly on the ROI's corner pixels.
inline GrayFrame crop_resize(const GrayFrame& g, const ROI& roi,
                             std::size_t out_w, std::size_t out_h) {
  if (!contains(g, roi)) {
    throw DataError("roi (" + std::to_string(roi.x) + "," + std::to_string(roi.y) +
                    "," + std::to_string(roi.width) + "," +
                    std::to_string(roi.height) + ") out of bounds");
  }
  if (out_w == 0 || out_h == 0) throw ShapeError("crop_resize to an empty frame");
  GrayFrame out(out_w, out_h);
  auto coord = [](std::size_t o, std::size_t n_out, int n_in) {
    if (n_out == 1) return (n_in - 1) / 2.0;
    return double(o) * double(n_in - 1) / double(n_out - 1);
  };
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double sy = coord(oy, out_h, roi.height);
    const int y0 = std::min(static_cast<int>(sy), roi.height - 1);
    const int y1 = std::min(y0 + 1, roi.height - 1);
    const double fy = sy - y0;
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double sx = coord(ox, out_w, roi.width);
      const int x0 = std::min(static_cast<int>(sx), roi.width - 1);
      const int x1 = std::min(x0 + 1, roi.width - 1);
      const double fx = sx - x0;
      auto px = [&](int x, int y) {
        return double(g.at(std::size_t(roi.x + x), std::size_t(roi.y + y)));
      };
      double v;
      if (fx == 0.0 && fy == 0.0) {
        v = px(x0, y0);
      } else {
        v = (1 - fy) * ((1 - fx) * px(x0, y0) + fx * px(x1, y0)) +
            fy * ((1 - fx) * px(x0, y1) + fx * px(x1, y1));
      }
      out.at(ox, oy) = std::clamp(static_cast<float>(v), 0.0f, 1.0f);
    }
  }
  return out;
}

/// Appends all-zero frames up to T, or keeps the centered T frames.
inline std::vector<GrayFrame> pad_frames(const std::vector<GrayFrame>& frames,
                                         std::size_t T) {
  if (frames.empty()) throw DataError("pad_frames: empty video");
  if (T == 0) throw ConfigError("pad_frames: T must be >= 1");
  if (frames.size() >= T) {
    const std::size_t start = (frames.size() - T) / 2;
    return {frames.begin() + static_cast<std::ptrdiff_t>(start),
            frames.begin() + static_cast<std::ptrdiff_t>(start + T)};
  }
  std::vector<GrayFrame> out = frames;
  const auto w = frames.front().width, h = frames.front().height;
  while (out.size() < T) out.emplace_back(w, h, 0.0f);
  return out;
}

/// Stacks equally sized frames into [T, 1, H, W].
inline TensorF frames_to_tensor(const std::vector<GrayFrame>& frames) {
  if (frames.empty()) throw DataError("no frames to stack");
  const auto w = frames.front().width, h = frames.front().height;
  TensorF t(Shape{frames.size(), 1, h, w});
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].width != w || frames[i].height != h) {
      throw ShapeError("frames in a video differ in size");
    }
    std::copy(frames[i].pixels.begin(), frames[i].pixels.end(),
              t.ptr() + i * w * h);
  }
  return t;
}

/// Frame t of a [T,1,H,W] (or [T,H,W]) tensor.
inline GrayFrame tensor_frame(const TensorF& t, std::size_t index) {
  const std::size_t h = t.dim(t.rank() - 2), w = t.dim(t.rank() - 1);
  GrayFrame g(w, h);
  const float* src = t.ptr() + index * w * h;
  std::copy(src, src + w * h, g.pixels.begin());
  return g;
}

}  // namespace visemeflow
