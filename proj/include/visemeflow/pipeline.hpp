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

// Two-phase pipeline glue shared by the command-line tool and the
// end-to-end checks: in-memory video sets, frame collection for the CAE,
// and the extractor -> LSTM -> report sequence.

#pragma once

#include <functional>

#include "visemeflow/eval.hpp"

namespace visemeflow {

struct VideoSet {
  std::vector<TensorF> videos;  // each [T, 1, H, W]
  std::vector<std::size_t> labels;
  std::vector<std::size_t> speakers;
  std::vector<std::size_t> source_lens;

  std::size_t size() const { return videos.size(); }

  void push(TensorF v, std::size_t label, std::size_t speaker, std::size_t source_len) {
    videos.push_back(std::move(v));
    labels.push_back(label);
    speakers.push_back(speaker);
    source_lens.push_back(source_len);
  }

  VideoSet subset(std::span<const std::size_t> idx) const {
    VideoSet out;
    for (auto i : idx) out.push(videos.at(i), labels[i], speakers[i], source_lens[i]);
    return out;
  }

  FeatureSet features(const FeatureExtractor& fx) const {
    if (videos.empty()) throw DataError("empty video set");
    return {extract_feature_set(fx, videos), labels};
  }
};

inline VideoSet load_video_set(const Manifest& m) {
  if (m.kind != "frames") throw DataError("expected a preprocessed (frames) manifest");
  m.validate();
  VideoSet s;
  for (const auto& r : m.records) {
    s.push(load_video_tensor(m, r), r.label, r.speaker, r.source_len);
  }
  return s;
}

/// Non-padding frames (t < source_len) as [N,1,H,W]; a seeded subset when
/// there are more than max_frames (0 keeps everything).
inline TensorF collect_frames(const VideoSet& set, std::size_t max_frames, std::uint64_t seed) {
  if (set.videos.empty()) throw DataError("no videos to collect frames from");
  const auto& s0 = set.videos.front().shape();
  const std::size_t h = s0.dims.at(2), w = s0.dims.at(3), per = h * w;
  std::vector<std::pair<std::size_t, std::size_t>> refs;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const std::size_t n = std::min(set.source_lens[i], set.videos[i].dim(0));
    for (std::size_t t = 0; t < n; ++t) refs.emplace_back(i, t);
  }
  if (max_frames && refs.size() > max_frames) {
    Rng rng(derive_seed(seed, {0x4652}));
    rng.shuffle(refs);
    refs.resize(max_frames);
    std::sort(refs.begin(), refs.end());
  }
  TensorF out(Shape{refs.size(), 1, h, w});
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const float* src = set.videos[refs[k].first].ptr() + refs[k].second * per;
    std::copy(src, src + per, out.ptr() + k * per);
  }
  return out;
}

struct PipelineConfig {
  ArchitectureDescriptor arch;
  OptimizerConfig cae = default_cae_optimizer();
  OptimizerConfig cnn = default_cnn_optimizer();
  OptimizerConfig lstm = default_lstm_optimizer();
  std::size_t cae_max_frames = 4000;
  std::size_t cae_val_frames = 1000;
  std::size_t cnn_patches = 2000;
  std::uint64_t seed = 0;
};

inline Json to_json(const PipelineConfig& c) {
  return {{"architecture", to_json(c.arch)},
          {"cae", to_json(c.cae)},
          {"cnn", to_json(c.cnn)},
          {"lstm", to_json(c.lstm)},
          {"cae_max_frames", c.cae_max_frames},
          {"cae_val_frames", c.cae_val_frames},
          {"cnn_patches", c.cnn_patches},
          {"seed", c.seed}};
}

/// FNV-1a over the canonical JSON dump, as 16 hex digits.
inline std::string config_hash(const Json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) h = (h ^ c) * 0x100000001b3ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

using Logger = std::function<void(const std::string&)>;

inline EpochCallback epoch_logger(const Logger& log, const std::string& phase) {
  if (!log) return {};
  return [log, phase](const EpochRecord& r) {
    std::ostringstream os;
    os << phase << " epoch " << r.epoch << " loss " << r.train_loss << " val " << r.val_metric;
    log(os.str());
  };
}

/// Phase 1: reconstruction training on train-split frames only.
inline ModelCheckpoint train_cae_phase(const VideoSet& train, const VideoSet* val,
                                       const PipelineConfig& cfg, const Logger& log = {}) {
  Cae cae = build_cae(cfg.arch, derive_seed(cfg.seed, {0x434145}));
  const TensorF frames = collect_frames(train, cfg.cae_max_frames, cfg.seed);
  std::optional<TensorF> val_frames;
  if (val && val->size()) {
    val_frames = collect_frames(*val, cfg.cae_val_frames, derive_seed(cfg.seed, {1}));
  }
  return train_cae(cae, frames, val_frames, cfg.cae, cfg.seed, epoch_logger(log, "cae"));
}

/// Baseline phase 1: lip / non-lip patches at the profile's crop size.
inline ModelCheckpoint train_cnn_phase(const PatchDataset& train, const PatchDataset* val,
                                       const PipelineConfig& cfg, const Logger& log = {}) {
  CnnClassifier cnn = build_cnn_classifier(cfg.arch, derive_seed(cfg.seed, {0x434e4e}));
  return train_patch_classifier(cnn, train, val, cfg.cnn, cfg.seed, epoch_logger(log, "cnn"));
}

inline FeatureExtractor feature_extractor(const ModelCheckpoint& ckpt) {
  const std::string model = ckpt.architecture.value("model", std::string());
  if (model == "cae") return cae_feature_extractor(ckpt);
  if (model == "cnn") return cnn_feature_extractor(ckpt);
  throw ConfigError("checkpoint is not a feature extractor (model '" + model + "')");
}

/// Phase 2: LSTM on frozen features.
inline ModelCheckpoint train_lstm_phase(const FeatureSet& train, const FeatureSet* val,
                                        const PipelineConfig& cfg, const Logger& log = {}) {
  LstmClassifier lstm = build_lstm_classifier(train.features.dim(2), cfg.arch.lstm_hidden,
                                              cfg.arch.vocab_size,
                                              derive_seed(cfg.seed, {0x4c53544d}));
  return train_lstm_classifier(lstm, train, val, cfg.lstm, cfg.seed, epoch_logger(log, "lstm"));
}

inline EvalReport evaluate_feature_sets(const LstmClassifier& lstm,
                                        const std::vector<std::string>& vocab,
                                        const FeatureSet* train, const FeatureSet* val,
                                        const FeatureSet& test, Json metadata = Json::object()) {
  EvalReport r;
  r.metadata = std::move(metadata);
  if (train && !train->labels.empty()) r.train_accuracy = evaluate_features(lstm, *train, vocab).accuracy();
  if (val && !val->labels.empty()) r.val_accuracy = evaluate_features(lstm, *val, vocab).accuracy();
  r.confusion = evaluate_features(lstm, test, vocab);
  r.test_accuracy = r.confusion.accuracy();
  return r;
}

struct PipelineResult {
  ModelCheckpoint extractor;
  ModelCheckpoint lstm;
  EvalReport report;
};

/// Feature extraction, LSTM training and evaluation for a trained extractor.
inline PipelineResult finish_pipeline(ModelCheckpoint extractor, const VideoSet& train,
                                      const VideoSet& val, const VideoSet& test,
                                      const std::vector<std::string>& vocab,
                                      const PipelineConfig& cfg, const Logger& log = {}) {
  const auto fx = feature_extractor(extractor);
  const FeatureSet ftr = train.features(fx);
  const std::optional<FeatureSet> fva = val.size() ? std::optional(val.features(fx)) : std::nullopt;
  const FeatureSet fte = test.features(fx);
  PipelineResult out;
  out.lstm = train_lstm_phase(ftr, fva ? &*fva : nullptr, cfg, log);
  const auto lstm = lstm_classifier_from_checkpoint(out.lstm);
  Json meta = {{"seed", cfg.seed},
               {"config_hash", config_hash(to_json(cfg))},
               {"extractor", fx.kind}};
  out.report = evaluate_feature_sets(lstm, vocab, &ftr, fva ? &*fva : nullptr, fte, meta);
  out.extractor = std::move(extractor);
  return out;
}

inline PipelineResult run_cae_pipeline(const VideoSet& train, const VideoSet& val,
                                       const VideoSet& test,
                                       const std::vector<std::string>& vocab,
                                       const PipelineConfig& cfg, const Logger& log = {}) {
  return finish_pipeline(train_cae_phase(train, &val, cfg, log), train, val, test, vocab, cfg,
                         log);
}

inline PipelineResult run_cnn_pipeline(const PatchDataset& patches_train,
                                       const PatchDataset* patches_val, const VideoSet& train,
                                       const VideoSet& val, const VideoSet& test,
                                       const std::vector<std::string>& vocab,
                                       const PipelineConfig& cfg, const Logger& log = {}) {
  return finish_pipeline(train_cnn_phase(patches_train, patches_val, cfg, log), train, val,
                         test, vocab, cfg, log);
}

/// Scene frames with their known mouth boxes, kept alive for patch sampling.
struct SceneFrames {
  std::vector<GrayFrame> frames;
  std::vector<ROI> mouths;

  void append(const std::vector<GrayFrame>& f, const std::vector<ROI>& m) {
    if (f.size() != m.size()) throw DataError("scene has " + std::to_string(f.size()) +
                                              " frames but " + std::to_string(m.size()) +
                                              " mouth boxes");
    frames.insert(frames.end(), f.begin(), f.end());
    mouths.insert(mouths.end(), m.begin(), m.end());
  }

  PatchDataset patches(const Profile& p, std::size_t n, std::uint64_t seed) const {
    std::vector<LabeledScene> ls;
    for (std::size_t i = 0; i < frames.size(); ++i) ls.push_back({&frames[i], mouths[i]});
    return build_patch_dataset(ls, p.W, p.H, n, seed);
  }
};

// ---------------------------------------------------------------------------
// In-memory synthetic corpora

struct CorpusSpec {
  Profile profile = desk_profile();
  std::size_t words = 10;
  std::size_t speakers = 15;
  std::size_t occurrences = 10;  // per (speaker, word)
  std::uint64_t seed = 0;
};

/// Calls fn(word, speaker, occurrence, video) in speaker, word, occurrence order.
inline void for_each_synthetic_video(
    const CorpusSpec& spec,
    const std::function<void(std::size_t, std::size_t, std::size_t, SyntheticVideo&&)>& fn) {
  if (spec.words > max_synthetic_vocabulary()) {
    throw ConfigError("vocabulary of " + std::to_string(spec.words) + " exceeds the " +
                      std::to_string(max_synthetic_vocabulary()) + " synthetic words");
  }
  for (std::size_t s = 0; s < spec.speakers; ++s) {
    for (std::size_t w = 0; w < spec.words; ++w) {
      for (std::size_t o = 0; o < spec.occurrences; ++o) {
        fn(w, s, o, synthesize_word_video(w, s, o, spec.profile, spec.seed));
      }
    }
  }
}

/// Detector-preprocessed corpus plus a manifest describing it (paths empty).
struct MemoryCorpus {
  Manifest manifest;
  VideoSet videos;  // aligned with manifest.records
};

inline MemoryCorpus synthesize_memory_corpus(const CorpusSpec& spec, const CascadeModel& cascade,
                                             const PreprocessOptions& opt) {
  MemoryCorpus c;
  c.manifest.vocabulary = synthetic_vocabulary(spec.words);
  c.manifest.profile = spec.profile;
  c.manifest.kind = "frames";
  for_each_synthetic_video(spec, [&](std::size_t w, std::size_t s, std::size_t o,
                                     SyntheticVideo&& v) {
    ManifestRecord r;
    r.label = w;
    r.speaker = s;
    r.occurrence = o;
    r.source_len = v.scene.size();
    r.path = "s" + std::to_string(s) + "_w" + std::to_string(w) + "_o" + std::to_string(o);
    c.videos.push(preprocess_video(v.scene, cascade, spec.profile, opt), w, s, r.source_len);
    c.manifest.records.push_back(std::move(r));
  });
  return c;
}

/// Rows of `corpus` whose records appear in `split` (matched by path).
inline VideoSet select_videos(const MemoryCorpus& corpus, const Manifest& split) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < corpus.manifest.records.size(); ++i) {
    index.emplace(corpus.manifest.records[i].path, i);
  }
  std::vector<std::size_t> idx;
  for (const auto& r : split.records) idx.push_back(index.at(r.path));
  return corpus.videos.subset(idx);
}

}  // namespace visemeflow
