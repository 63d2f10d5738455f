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

#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "visemeflow/models.hpp"

namespace visemeflow {

/// Rows are true classes, columns predictions.
struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<std::size_t>> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::vector<std::string> vocab)
      : labels(std::move(vocab)),
        counts(labels.size(), std::vector<std::size_t>(labels.size(), 0)) {}

  std::size_t size() const { return labels.size(); }

  void add(std::size_t truth, std::size_t predicted) {
    if (truth >= size() || predicted >= size()) {
      throw DataError("class index outside the confusion matrix");
    }
    ++counts[truth][predicted];
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& row : counts) {
      for (auto c : row) n += c;
    }
    return n;
  }

  std::size_t trace() const {
    std::size_t t = 0;
    for (std::size_t i = 0; i < size(); ++i) t += counts[i][i];
    return t;
  }

  std::size_t row_sum(std::size_t i) const {
    std::size_t n = 0;
    for (auto c : counts.at(i)) n += c;
    return n;
  }

  double accuracy() const {
    const auto n = total();
    return n ? double(trace()) / double(n) : 0.0;
  }

  /// Classes without samples report 0.
  std::vector<double> per_class_accuracy() const {
    std::vector<double> out(size(), 0.0);
    for (std::size_t i = 0; i < size(); ++i) {
      const auto n = row_sum(i);
      if (n) out[i] = double(counts[i][i]) / double(n);
    }
    return out;
  }

  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion_from_predictions(const std::vector<std::string>& vocab,
                                                  std::span<const std::size_t> truth,
                                                  std::span<const std::size_t> predicted) {
  if (truth.size() != predicted.size()) {
    throw ShapeError("truth/prediction count mismatch");
  }
  ConfusionMatrix cm(vocab);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

/// Argmax predictions of a trained LSTM over precomputed features.
inline std::vector<std::size_t> predict_features(const LstmClassifier& m, const TensorF& feats) {
  const std::size_t n = feats.dim(0), batch = 128, k = m.vocab;
  std::vector<std::size_t> out(n);
  for (std::size_t start = 0; start < n; start += batch) {
    std::vector<std::size_t> idx(std::min(n, start + batch) - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto p = lstm_probabilities(m, detail::gather_rows(feats, idx));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const float* row = p.ptr() + i * k;
      out[idx[i]] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    }
  }
  return out;
}

inline ConfusionMatrix evaluate_features(const LstmClassifier& m, const FeatureSet& fs,
                                         const std::vector<std::string>& vocab) {
  if (fs.labels.empty()) throw DataError("cannot evaluate an empty split");
  const auto pred = predict_features(m, fs.features);
  return confusion_from_predictions(vocab, fs.labels, pred);
}

/// Extracts features for every record of a preprocessed split and scores it.
inline ConfusionMatrix evaluate_split(const FeatureExtractor& fx, const LstmClassifier& m,
                                      const Manifest& split) {
  if (split.records.empty()) throw DataError("cannot evaluate an empty split");
  split.validate();
  std::vector<TensorF> videos;
  FeatureSet fs;
  for (const auto& r : split.records) {
    videos.push_back(load_video_tensor(split, r));
    fs.labels.push_back(r.label);
  }
  fs.features = extract_feature_set(fx, videos);
  return evaluate_features(m, fs, split.vocabulary);
}

struct EvalReport {
  std::optional<double> train_accuracy, val_accuracy, test_accuracy;
  ConfusionMatrix confusion;  // on the test split
  Json metadata = Json::object();

  std::vector<double> per_class_accuracy() const { return confusion.per_class_accuracy(); }
};

/// Evaluates each non-empty split; the confusion matrix belongs to the test split.
inline EvalReport evaluate(const FeatureExtractor& fx, const LstmClassifier& m,
                           const Splits& splits, Json metadata = Json::object()) {
  EvalReport r;
  r.metadata = std::move(metadata);
  if (!splits.train.records.empty()) r.train_accuracy = evaluate_split(fx, m, splits.train).accuracy();
  if (!splits.val.records.empty()) r.val_accuracy = evaluate_split(fx, m, splits.val).accuracy();
  r.confusion = evaluate_split(fx, m, splits.test);
  r.test_accuracy = r.confusion.accuracy();
  return r;
}

inline double msi_average(std::span<const EvalReport> reports) {
  if (reports.empty()) throw ConfigError("msi_average needs at least one report");
  double s = 0.0;
  for (const auto& r : reports) {
    if (!r.test_accuracy) throw DataError("report without a test accuracy");
    s += *r.test_accuracy;
  }
  return s / double(reports.size());
}

inline std::string percent2(double accuracy) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << accuracy * 100.0;
  return os.str();
}

/// nlohmann::json keeps keys sorted, which gives the stable order.
inline Json report_json(const EvalReport& r) {
  Json j;
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (v) {
      j[key] = *v;
      j[std::string(key) + "_pct"] = percent2(*v);
    } else {
      j[key] = nullptr;
    }
  };
  put("train_accuracy", r.train_accuracy);
  put("val_accuracy", r.val_accuracy);
  put("test_accuracy", r.test_accuracy);
  j["vocabulary"] = r.confusion.labels;
  j["confusion"] = r.confusion.counts;
  j["per_class_accuracy"] = r.per_class_accuracy();
  j["metadata"] = r.metadata;
  return j;
}

inline EvalReport report_from_json(const Json& j) {
  EvalReport r;
  auto get = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
  };
  r.train_accuracy = get("train_accuracy");
  r.val_accuracy = get("val_accuracy");
  r.test_accuracy = get("test_accuracy");
  r.confusion.labels = j.at("vocabulary").get<std::vector<std::string>>();
  r.confusion.counts = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
  r.metadata = j.value("metadata", Json::object());
  return r;
}

namespace detail {

inline std::ofstream open_out(const std::string& path, bool binary = false) {
  std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
  if (!os) throw Error("cannot write " + path);
  return os;
}

}  // namespace detail

inline void save_report(const std::string& path, const EvalReport& r) {
  auto os = detail::open_out(path);
  os << report_json(r).dump(2) << '\n';
}

inline EvalReport load_report(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingCheckpointError("missing report " + path);
  try {
    return report_from_json(Json::parse(is));
  } catch (const Json::exception& e) {
    throw DataError("malformed report " + path + ": " + e.what());
  }
}

inline std::string confusion_csv(const ConfusionMatrix& cm) {
  std::ostringstream os;
  os << "true\\predicted";
  for (const auto& l : cm.labels) os << ',' << l;
  os << '\n';
  for (std::size_t i = 0; i < cm.size(); ++i) {
    os << cm.labels[i];
    for (auto c : cm.counts[i]) os << ',' << c;
    os << '\n';
  }
  return os.str();
}

inline void emit_confusion_csv(const ConfusionMatrix& cm, const std::string& path) {
  auto os = detail::open_out(path);
  os << confusion_csv(cm);
}

inline ConfusionMatrix read_confusion_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path);
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty confusion CSV " + path);
  auto header = split(line);
  if (header.empty() || header[0] != "true\\predicted") {
    throw DataError("bad confusion CSV header in " + path);
  }
  ConfusionMatrix cm({header.begin() + 1, header.end()});
  for (std::size_t i = 0; i < cm.size(); ++i) {
    if (!std::getline(is, line)) throw DataError("truncated confusion CSV " + path);
    auto cells = split(line);
    if (cells.size() != cm.size() + 1) throw DataError("ragged confusion CSV " + path);
    for (std::size_t j = 0; j < cm.size(); ++j) cm.counts[i][j] = std::stoull(cells[j + 1]);
  }
  return cm;
}

// ---------------------------------------------------------------------------
// PGM (binary P5, 8-bit)

inline void emit_pgm(const GrayFrame& g, const std::string& path) {
  auto os = detail::open_out(path, true);
  os << "P5\n" << g.width << ' ' << g.height << "\n255\n";
  std::vector<unsigned char> bytes(g.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(double(g.pixels[i]), 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

inline GrayFrame read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path);
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  is >> magic >> w >> h >> maxv;
  if (magic != "P5" || maxv != 255 || w == 0 || h == 0) {
    throw DataError("unsupported PGM " + path);
  }
  is.get();
  std::vector<unsigned char> bytes(w * h);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()))) {
    throw TruncatedPayloadError("truncated PGM " + path);
  }
  GrayFrame g(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) g.pixels[i] = float(bytes[i]) / 255.0f;
  return g;
}

// ---------------------------------------------------------------------------
// First-layer feature maps

struct FeatureMap {
  GrayFrame image;   // min-max normalized to [0, 1]
  double raw_stddev; // before normalization
};

/// Finds the first conv layer ("*.conv1.w") of a CNN or CAE checkpoint.
inline std::string first_conv_name(const ModelCheckpoint& ckpt) {
  for (const char* k : {"enc.conv1.w", "cnn.conv1.w"}) {
    if (ckpt.params.contains(k)) return k;
  }
  for (const auto& [k, v] : ckpt.params) {
    if (glob_match("*.conv1.w", k) && v.rank() == 4) return k;
  }
  throw MissingCheckpointError("checkpoint has no first conv layer");
}

/// Convolves the frame with each first-layer kernel (no bias, same padding).
inline std::vector<FeatureMap> first_layer_feature_maps(const TensorF& kernels,
                                                        const GrayFrame& frame) {
  if (kernels.rank() != 4 || kernels.dim(1) != 1) {
    throw ShapeError("first-layer kernels must be [K,1,kh,kw], got " + kernels.shape().str());
  }
  const std::size_t k = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kh != kw || kh % 2 == 0) throw ShapeError("feature maps need odd square kernels");
  TensorF x(Shape{1, 1, frame.height, frame.width}, frame.pixels);
  const auto y = conv2d_infer(x, kernels, TensorF(Shape{k}), 1, kh / 2);
  const std::size_t hw = y.dim(2) * y.dim(3);
  std::vector<FeatureMap> out;
  for (std::size_t c = 0; c < k; ++c) {
    const float* m = y.ptr() + c * hw;
    double mean = 0.0;
    float lo = m[0], hi = m[0];
    for (std::size_t i = 0; i < hw; ++i) {
      mean += m[i];
      lo = std::min(lo, m[i]);
      hi = std::max(hi, m[i]);
    }
    mean /= double(hw);
    double var = 0.0;
    for (std::size_t i = 0; i < hw; ++i) var += (m[i] - mean) * (m[i] - mean);
    FeatureMap fm{GrayFrame(y.dim(3), y.dim(2)), std::sqrt(var / double(hw))};
    if (hi > lo) {
      for (std::size_t i = 0; i < hw; ++i) fm.image.pixels[i] = (m[i] - lo) / (hi - lo);
    }
    out.push_back(std::move(fm));
  }
  return out;
}

inline std::vector<FeatureMap> first_layer_feature_maps(const ModelCheckpoint& ckpt,
                                                        const GrayFrame& frame) {
  return first_layer_feature_maps(ckpt.params.at(first_conv_name(ckpt)), frame);
}

inline double emptiness_score(const std::vector<FeatureMap>& maps, double tau = 1e-3) {
  if (maps.empty()) return 0.0;
  std::size_t empty = 0;
  for (const auto& m : maps) empty += m.raw_stddev < tau;
  return double(empty) / double(maps.size());
}

inline std::string kernel_filename(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "kernel_%03zu.pgm", index);
  return buf;
}

}  // namespace visemeflow
