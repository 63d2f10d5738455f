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

// visemeflow command line: synthetic corpora, preprocessing, splits, the two
// training phases, evaluation, held-out-speaker folds and kernel dumps.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "visemeflow/pipeline.hpp"

namespace fs = std::filesystem;
using namespace visemeflow;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitData = 4;
constexpr int kExitDivergence = 5;

struct PhaseOverrides {
  std::optional<double> lr, momentum, clip;
  std::optional<std::size_t> batch, epochs, patience, steps;

  void apply(OptimizerConfig& c) const {
    if (lr) c.learning_rate = *lr;
    if (momentum) c.momentum = *momentum;
    if (clip) c.clip_norm = *clip;
    if (batch) c.batch_size = *batch;
    if (epochs) c.max_epochs = *epochs;
    if (patience) c.patience = *patience;
    if (steps) c.max_steps = *steps;
  }
};

// Options shared by every subcommand; a --config file supplies defaults and
// explicit flags win.
struct Global {
  std::string profile = "desk";
  std::string arch = "desk";
  std::optional<std::uint64_t> seed;
  PhaseOverrides cae, cnn, lstm;
  std::size_t cae_max_frames = 4000;
  std::size_t cae_val_frames = 1000;
  std::size_t cnn_patches = 2000;
  bool quiet = false;
};

Global g;

void add_phase_options(CLI::App& app, const std::string& phase, PhaseOverrides& o) {
  const std::string grp = phase + " optimizer";
  app.add_option("--" + phase + "-lr", o.lr, phase + " learning rate")->group(grp);
  app.add_option("--" + phase + "-momentum", o.momentum)->group(grp);
  app.add_option("--" + phase + "-clip", o.clip, "global gradient norm cap, 0 disables")->group(grp);
  app.add_option("--" + phase + "-batch", o.batch)->group(grp);
  app.add_option("--" + phase + "-epochs", o.epochs)->group(grp);
  app.add_option("--" + phase + "-patience", o.patience)->group(grp);
  app.add_option("--" + phase + "-max-steps", o.steps)->group(grp);
}

std::uint64_t require_seed() {
  if (!g.seed) throw ConfigError("--seed is required");
  return *g.seed;
}

Profile profile() { return profile_by_name(g.profile); }

PipelineConfig pipeline_config(const Profile& p, std::size_t vocab) {
  PipelineConfig c;
  c.arch = architecture_by_name(g.arch, p, vocab);
  conv_dims(c.arch);  // rejects non-integral geometry up front
  g.cae.apply(c.cae);
  g.cnn.apply(c.cnn);
  g.lstm.apply(c.lstm);
  c.cae_max_frames = g.cae_max_frames;
  c.cae_val_frames = g.cae_val_frames;
  c.cnn_patches = g.cnn_patches;
  c.seed = require_seed();
  return c;
}

void log_line(const std::string& s) {
  if (!g.quiet) std::cerr << s << "\n";
}

Logger logger(const std::string& tag) {
  return [tag](const std::string& s) { log_line("[" + tag + "] " + s); };
}

fs::path make_out_dir(const std::string& out) {
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + out + ": " + ec.message());
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw DataError("write failed: " + path.string());
}

/// Paths are left out so that equal configs hash equally wherever they run.
void write_meta(const fs::path& dir, const std::string& command, Json config) {
  config["command"] = command;
  Json meta = {{"command", command},
               {"config_hash", config_hash(config)},
               {"seed", g.seed ? Json(*g.seed) : Json(nullptr)},
               {"config", config}};
  write_text(dir / "run.meta", meta.dump(2) + "\n");
}

std::string video_name(std::size_t s, std::size_t w, std::size_t o) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "s%02zu_w%02zu_o%03zu.ntsr", s, w, o);
  return buf;
}

std::vector<GrayFrame> tensor_frames(const TensorF& t) {
  std::vector<GrayFrame> out;
  for (std::size_t i = 0; i < t.dim(0); ++i) out.push_back(tensor_frame(t, i));
  return out;
}

Manifest require_kind(Manifest m, const std::string& kind, const std::string& what) {
  if (m.kind != kind) {
    throw DataError(what + " must be a " + kind + " manifest, got kind '" + m.kind + "'");
  }
  return m;
}

/// Record paths made absolute so a split manifest can live anywhere.
Manifest absolute_paths(const Manifest& m) {
  Manifest out = m;
  for (auto& r : out.records) r.path = fs::absolute(m.resolve(r)).lexically_normal().string();
  out.base_dir.clear();
  return out;
}

CascadeModel cascade_for(const Profile& p, const std::string& path) {
  if (!path.empty()) return load_cascade(path);
  return make_mouth_cascade(static_cast<int>(p.W / 2), static_cast<int>(p.H / 2));
}

/// Scene frames and ground-truth mouths for the records of `split`, matched
/// to the scene manifest by file name.
SceneFrames scenes_for(const Manifest& scenes, const Manifest& split) {
  std::map<std::string, const ManifestRecord*> by_name;
  for (const auto& r : scenes.records) by_name[fs::path(r.path).filename().string()] = &r;
  SceneFrames out;
  for (const auto& r : split.records) {
    const auto it = by_name.find(fs::path(r.path).filename().string());
    if (it == by_name.end()) throw DataError("no scene record for " + r.path);
    const auto& sr = *it->second;
    if (sr.rois.empty()) throw DataError("scene record " + sr.path + " has no mouth boxes");
    out.append(tensor_frames(load_tensor<float>(scenes.resolve(sr))), sr.rois);
  }
  return out;
}

struct FeatureFile {
  TensorF features;
  std::vector<std::size_t> labels;
  std::vector<std::string> vocabulary;
  std::string extractor;
};

FeatureFile load_features(const std::string& path) {
  FeatureFile f;
  f.features = load_tensor<float>(path);
  std::ifstream is(path + ".json");
  if (!is) throw DataError("missing feature labels: " + path + ".json");
  try {
    const auto j = Json::parse(is);
    f.labels = j.at("labels").get<std::vector<std::size_t>>();
    f.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    f.extractor = j.value("extractor", std::string());
  } catch (const Json::exception& e) {
    throw DataError("malformed " + path + ".json: " + e.what());
  }
  if (f.features.rank() != 3 || f.features.dim(0) != f.labels.size()) {
    throw HeaderMismatchError("features " + f.features.shape().str() + " do not match " +
                              std::to_string(f.labels.size()) + " labels");
  }
  return f;
}

void save_eval(const fs::path& dir, const EvalReport& r) {
  save_report((dir / "report.json").string(), r);
  emit_confusion_csv(r.confusion, (dir / "confusion.csv").string());
}

// ---------------------------------------------------------------------------
// Subcommands

struct SynthArgs {
  std::string out;
  std::size_t words = 10, speakers = 15, occurrences = 10;
};

void cmd_synth(const SynthArgs& a) {
  CorpusSpec spec{profile(), a.words, a.speakers, a.occurrences, require_seed()};
  if (a.words < 2 || a.speakers < 1 || a.occurrences < 1) {
    throw ConfigError("synth needs at least 2 words, 1 speaker and 1 occurrence");
  }
  const auto dir = make_out_dir(a.out);
  make_out_dir((dir / "videos").string());
  Manifest m;
  m.vocabulary = synthetic_vocabulary(a.words);
  m.profile = spec.profile;
  m.kind = "scene";
  for_each_synthetic_video(spec, [&](std::size_t w, std::size_t s, std::size_t o,
                                     SyntheticVideo&& v) {
    ManifestRecord r;
    r.path = "videos/" + video_name(s, w, o);
    r.label = w;
    r.speaker = s;
    r.occurrence = o;
    r.source_len = v.scene.size();
    r.rois = v.rois;
    save_tensor((dir / r.path).string(), frames_to_tensor(v.scene));
    m.records.push_back(std::move(r));
  });
  save_manifest((dir / "manifest.jsonl").string(), m);
  write_meta(dir, "synth", {{"profile", spec.profile.name}, {"seed", spec.seed},
                            {"words", a.words}, {"speakers", a.speakers},
                            {"occurrences", a.occurrences}});
  log_line("synth: " + std::to_string(m.records.size()) + " videos");
}

struct PreprocessArgs {
  std::string manifest, out, cascade;
  bool fixed_roi = false;
};

void cmd_preprocess(const PreprocessArgs& a) {
  const auto in = require_kind(load_manifest(a.manifest), "scene", "preprocess input");
  const auto& p = in.profile;
  const auto cascade = cascade_for(p, a.cascade);
  PreprocessOptions opt;
  opt.detector = default_detector(p, cascade);
  opt.fixed_roi = a.fixed_roi;
  const auto dir = make_out_dir(a.out);
  make_out_dir((dir / "videos").string());
  Manifest out = in;
  out.kind = "frames";
  out.base_dir.clear();
  for (auto& r : out.records) {
    const auto scene = tensor_frames(load_tensor<float>(in.resolve(r)));
    std::vector<ROI> rois;
    const auto frames = preprocess_video(scene, cascade, p, opt, &rois);
    r.path = "videos/" + fs::path(r.path).filename().string();
    r.source_len = std::min(scene.size(), p.T);
    r.rois = std::move(rois);
    save_tensor((dir / r.path).string(), frames);
  }
  save_manifest((dir / "manifest.jsonl").string(), out);
  write_meta(dir, "preprocess", {{"profile", p.name}, {"fixed_roi", a.fixed_roi},
                                 {"cascade", cascade_to_json(cascade)}});
  log_line("preprocess: " + std::to_string(out.records.size()) + " videos");
}

struct SplitArgs {
  std::string manifest, out;
  bool msd = false;
  std::vector<std::size_t> counts{8, 1, 1};
  std::optional<std::size_t> msi, val_speaker;
  std::vector<std::size_t> per_class;
  std::vector<double> fraction;
};

void cmd_split(const SplitArgs& a) {
  const auto m = load_manifest(a.manifest);
  const auto seed = require_seed();
  const int modes = int(a.msd) + int(a.msi.has_value()) + int(!a.per_class.empty()) +
                    int(!a.fraction.empty());
  if (modes != 1) throw ConfigError("choose exactly one of --msd, --msi, --per-class, --fraction");
  Splits s;
  Json cfg = {{"seed", seed}};
  if (a.msd) {
    if (a.counts.size() != 3) throw ConfigError("--counts takes train,val,test");
    s = split_speaker_dependent(m, a.counts[0], a.counts[1], a.counts[2], seed);
    cfg["protocol"] = "msd";
    cfg["counts"] = a.counts;
  } else if (a.msi) {
    const auto speakers = speakers_of(m);
    if (speakers.size() < 3) throw DataError("held-out-speaker split needs at least 3 speakers");
    const auto it = std::find(speakers.begin(), speakers.end(), *a.msi);
    if (it == speakers.end()) throw DataError("unknown speaker " + std::to_string(*a.msi));
    const std::size_t val = a.val_speaker.value_or(
        speakers[(static_cast<std::size_t>(it - speakers.begin()) + 1) % speakers.size()]);
    s = split_held_out_speaker(m, *a.msi, val, seed);
    cfg["protocol"] = "msi";
    cfg["test_speaker"] = *a.msi;
    cfg["val_speaker"] = val;
  } else if (!a.per_class.empty()) {
    if (a.per_class.size() != 3) throw ConfigError("--per-class takes train,val,test");
    s = split_per_class_counts(m, a.per_class[0], a.per_class[1], a.per_class[2], seed);
    cfg["protocol"] = "per_class";
    cfg["counts"] = a.per_class;
  } else {
    if (a.fraction.size() != 3) throw ConfigError("--fraction takes train,val,test");
    s = split_per_speaker_fraction(m, {a.fraction[0], a.fraction[1], a.fraction[2]}, seed);
    cfg["protocol"] = "per_speaker_fraction";
    cfg["fractions"] = a.fraction;
  }
  const auto dir = make_out_dir(a.out);
  save_manifest((dir / "train.jsonl").string(), absolute_paths(s.train));
  save_manifest((dir / "val.jsonl").string(), absolute_paths(s.val));
  save_manifest((dir / "test.jsonl").string(), absolute_paths(s.test));
  write_meta(dir, "split", cfg);
  log_line("split: " + std::to_string(s.train.records.size()) + "/" +
           std::to_string(s.val.records.size()) + "/" + std::to_string(s.test.records.size()));
}

struct TrainArgs {
  std::string train, val, scenes, out;
};

void cmd_train_cae(const TrainArgs& a) {
  const auto tr = require_kind(load_manifest(a.train), "frames", "--train");
  const auto cfg = pipeline_config(tr.profile, tr.vocabulary.size());
  const auto train = load_video_set(tr);
  std::optional<VideoSet> val;
  if (!a.val.empty()) val = load_video_set(require_kind(load_manifest(a.val), "frames", "--val"));
  const auto dir = make_out_dir(a.out);
  const auto ck = train_cae_phase(train, val ? &*val : nullptr, cfg, logger("train-cae"));
  save_checkpoint((dir / "cae.nckp").string(), ck);
  write_meta(dir, "train-cae", to_json(cfg));
}

void cmd_train_cnn(const TrainArgs& a) {
  const auto tr = require_kind(load_manifest(a.train), "frames", "--train");
  const auto scenes = require_kind(load_manifest(a.scenes), "scene", "--scenes");
  const auto cfg = pipeline_config(tr.profile, tr.vocabulary.size());
  const auto& p = tr.profile;
  const auto train = scenes_for(scenes, tr).patches(p, cfg.cnn_patches, derive_seed(cfg.seed, {1}));
  std::optional<PatchDataset> val;
  if (!a.val.empty()) {
    const auto vm = require_kind(load_manifest(a.val), "frames", "--val");
    if (!vm.records.empty()) {
      val = scenes_for(scenes, vm).patches(p, std::max<std::size_t>(cfg.cnn_patches / 5, 2),
                                           derive_seed(cfg.seed, {2}));
    }
  }
  const auto dir = make_out_dir(a.out);
  const auto ck = train_cnn_phase(train, val ? &*val : nullptr, cfg, logger("train-baseline-cnn"));
  save_checkpoint((dir / "cnn.nckp").string(), ck);
  write_meta(dir, "train-baseline-cnn", to_json(cfg));
}

struct ExtractArgs {
  std::string extractor = "cae", checkpoint, out;
  std::vector<std::string> manifests;
};

void cmd_extract(const ExtractArgs& a) {
  if (a.extractor != "cae" && a.extractor != "cnn") {
    throw ConfigError("--extractor must be cae or cnn");
  }
  const auto ck = load_checkpoint(a.checkpoint);
  const auto model = ck.architecture.value("model", std::string());
  if (model != a.extractor) {
    throw ConfigError("--extractor " + a.extractor + " but the checkpoint holds a '" + model +
                      "' model");
  }
  const auto fx = feature_extractor(ck);
  const auto dir = make_out_dir(a.out);
  Json outputs = Json::array();
  for (const auto& path : a.manifests) {
    const auto m = require_kind(load_manifest(path), "frames", path);
    if (m.records.empty()) throw DataError("manifest " + path + " has no records");
    const auto fs_ = load_video_set(m).features(fx);
    const std::string stem = fs::path(path).stem().string();
    save_tensor((dir / (stem + ".feat")).string(), fs_.features);
    const Json side = {{"labels", fs_.labels},
                       {"vocabulary", m.vocabulary},
                       {"extractor", fx.kind},
                       {"profile", m.profile.name}};
    write_text(dir / (stem + ".feat.json"), side.dump() + "\n");
    outputs.push_back(stem);
  }
  write_meta(dir, "extract-features",
             {{"extractor", a.extractor}, {"outputs", outputs},
              {"architecture", ck.architecture}});
}

void cmd_train_lstm(const TrainArgs& a) {
  const auto tr = load_features(a.train);
  const auto p = profile();
  auto cfg = pipeline_config(p, tr.vocabulary.size());
  std::optional<FeatureFile> va;
  if (!a.val.empty()) {
    va = load_features(a.val);
    if (va->vocabulary != tr.vocabulary) throw DataError("train and val vocabularies differ");
  }
  const FeatureSet train{tr.features, tr.labels};
  std::optional<FeatureSet> val;
  if (va) val = FeatureSet{va->features, va->labels};
  const auto dir = make_out_dir(a.out);
  auto ck = train_lstm_phase(train, val ? &*val : nullptr, cfg, logger("train-lstm"));
  ck.metadata["vocabulary"] = tr.vocabulary;
  ck.metadata["extractor"] = tr.extractor;
  save_checkpoint((dir / "lstm.nckp").string(), ck);
  write_meta(dir, "train-lstm", to_json(cfg));
}

struct EvalArgs {
  std::string extractor, lstm, train, val, test, out;
};

void cmd_eval(const EvalArgs& a) {
  // Checkpoints first: a missing one is the most common mistake.
  const auto lstm_ck = load_checkpoint(a.lstm);
  const auto fx_ck = load_checkpoint(a.extractor);
  const auto fx = feature_extractor(fx_ck);
  const auto lstm = lstm_classifier_from_checkpoint(lstm_ck);
  Splits s;
  s.test = require_kind(load_manifest(a.test), "frames", "--test");
  s.train = s.test.with_records({});
  s.val = s.test.with_records({});
  if (!a.train.empty()) s.train = require_kind(load_manifest(a.train), "frames", "--train");
  if (!a.val.empty()) s.val = require_kind(load_manifest(a.val), "frames", "--val");
  Json meta = {{"seed", g.seed ? Json(*g.seed) : lstm_ck.metadata.value("seed", Json(nullptr))},
               {"extractor", fx.kind},
               {"lstm_config_hash", config_hash(lstm_ck.architecture)}};
  const auto report = evaluate(fx, lstm, s, meta);
  const auto dir = make_out_dir(a.out);
  save_eval(dir, report);
  write_meta(dir, "eval", {{"extractor", fx.kind}, {"report", report_json(report)}});
  std::cout << "test_accuracy " << percent2(*report.test_accuracy) << "\n";
}

struct MsiArgs {
  std::string manifest, scenes, out, extractor = "cae";
  std::size_t max_folds = 0;
};

void cmd_msi(const MsiArgs& a) {
  const auto m = require_kind(load_manifest(a.manifest), "frames", "--manifest");
  if (a.extractor != "cae" && a.extractor != "cnn") {
    throw ConfigError("--extractor must be cae or cnn");
  }
  std::optional<Manifest> scenes;
  if (a.extractor == "cnn") {
    if (a.scenes.empty()) throw ConfigError("msi with the cnn extractor needs --scenes");
    scenes = require_kind(load_manifest(a.scenes), "scene", "--scenes");
  }
  const auto cfg = pipeline_config(m.profile, m.vocabulary.size());
  const auto speakers = speakers_of(m);
  if (speakers.size() < 3) throw DataError("msi needs at least 3 speakers");
  const auto all = load_video_set(m);
  std::map<std::string, std::size_t> row;
  for (std::size_t i = 0; i < m.records.size(); ++i) row[m.records[i].path] = i;
  auto select = [&](const Manifest& split) {
    std::vector<std::size_t> idx;
    for (const auto& r : split.records) idx.push_back(row.at(r.path));
    return all.subset(idx);
  };

  const auto dir = make_out_dir(a.out);
  const std::size_t folds = a.max_folds ? std::min(a.max_folds, speakers.size()) : speakers.size();
  std::vector<EvalReport> reports;
  Json fold_json = Json::array();
  for (std::size_t f = 0; f < folds; ++f) {
    const std::size_t test_s = speakers[f];
    const std::size_t val_s = speakers[(f + 1) % speakers.size()];
    const auto s = split_held_out_speaker(m, test_s, val_s, cfg.seed);
    for (const auto& r : s.train.records) {
      if (r.speaker == test_s || r.speaker == val_s) {
        throw DataError("fold " + std::to_string(f) + " is not speaker-disjoint");
      }
    }
    auto fold_cfg = cfg;
    fold_cfg.seed = derive_seed(cfg.seed, {0x4d5349, f});
    const auto tr = select(s.train), va = select(s.val), te = select(s.test);
    const auto tag = "msi fold " + std::to_string(f);
    PipelineResult res;
    if (a.extractor == "cae") {
      res = run_cae_pipeline(tr, va, te, m.vocabulary, fold_cfg, logger(tag));
    } else {
      const auto pt = scenes_for(*scenes, s.train)
                          .patches(m.profile, cfg.cnn_patches, derive_seed(fold_cfg.seed, {1}));
      res = run_cnn_pipeline(pt, nullptr, tr, va, te, m.vocabulary, fold_cfg, logger(tag));
    }
    res.report.metadata["test_speaker"] = test_s;
    res.report.metadata["val_speaker"] = val_s;
    char name[32];
    std::snprintf(name, sizeof name, "fold_%02zu", f);
    const auto fdir = make_out_dir((dir / name).string());
    save_eval(fdir, res.report);
    fold_json.push_back({{"fold", f}, {"test_speaker", test_s}, {"val_speaker", val_s},
                         {"test_accuracy", *res.report.test_accuracy}});
    log_line(tag + ": test " + percent2(*res.report.test_accuracy));
    reports.push_back(std::move(res.report));
  }
  const double avg = msi_average(reports);
  const Json summary = {{"folds", fold_json}, {"average", avg}, {"average_pct", percent2(avg)}};
  write_text(dir / "msi.json", summary.dump(2) + "\n");
  write_meta(dir, "msi", {{"pipeline", to_json(cfg)}, {"extractor", a.extractor},
                          {"folds", folds}});
  std::cout << "msi_average " << percent2(avg) << "\n";
}

struct VisualizeArgs {
  std::string checkpoint, manifest, out;
  std::size_t index = 0, frame = 0;
  double tau = 1e-3;
};

void cmd_visualize(const VisualizeArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  const auto m = require_kind(load_manifest(a.manifest), "frames", "--manifest");
  if (a.index >= m.records.size()) {
    throw DataError("record index " + std::to_string(a.index) + " out of range");
  }
  const auto& rec = m.records[a.index];
  const auto video = load_video_tensor(m, rec);
  if (a.frame >= video.dim(0)) throw DataError("frame index out of range");
  const auto input = tensor_frame(video, a.frame);
  const auto maps = first_layer_feature_maps(ck, input);
  const auto dir = make_out_dir(a.out);
  emit_pgm(input, (dir / "input.pgm").string());
  Json stddev = Json::array();
  for (std::size_t i = 0; i < maps.size(); ++i) {
    emit_pgm(maps[i].image, (dir / kernel_filename(i)).string());
    stddev.push_back(maps[i].raw_stddev);
  }
  std::size_t recon = 0;
  if (ck.architecture.value("model", std::string()) == "cae") {
    Cae cae = build_cae(architecture_from_json(ck.architecture));
    for (const auto& [k, v] : cae.params) {
      if (!ck.params.contains(k)) {
        throw MissingCheckpointError("missing checkpoint tensor " + k +
                                     " (reconstructions need the full CAE)");
      }
    }
    cae.params = ck.params;
    const std::size_t n = std::max<std::size_t>(1, std::min(rec.source_len, video.dim(0)));
    TensorF real(Shape{n, 1, video.dim(2), video.dim(3)});
    std::copy(video.ptr(), video.ptr() + real.size(), real.ptr());
    const auto out = cae_reconstruct(cae, real);
    for (; recon < n; ++recon) {
      char name[32];
      std::snprintf(name, sizeof name, "recon_%03zu.pgm", recon);
      emit_pgm(tensor_frame(out, recon), (dir / name).string());
    }
  }
  const Json summary = {{"kernels", maps.size()},
                        {"tau", a.tau},
                        {"emptiness", emptiness_score(maps, a.tau)},
                        {"raw_stddev", stddev},
                        {"reconstructions", recon}};
  write_text(dir / "feature_maps.json", summary.dump(2) + "\n");
  write_meta(dir, "visualize", {{"architecture", ck.architecture}, {"index", a.index},
                                {"frame", a.frame}, {"tau", a.tau}});
}

// ---------------------------------------------------------------------------

std::string one_line(std::string s) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
    if (c == '"') c = '\'';
  }
  return s;
}

int fail(const char* kind, int code, const std::string& msg) {
  std::cerr << "visemeflow: error kind=" << kind << " exit=" << code << " message=\""
            << one_line(msg) << "\"\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"visemeflow: visual word recognition from mouth-region video"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "flat key = value config file; command-line flags win");
  app.add_option("--profile", g.profile, "bbc | miracl | grid | desk")->capture_default_str();
  app.add_option("--arch", g.arch, "paper | desk | tiny")->capture_default_str();
  app.add_option("--seed", g.seed, "run seed (required by stochastic subcommands)");
  app.add_option("--cae-max-frames", g.cae_max_frames)->capture_default_str();
  app.add_option("--cae-val-frames", g.cae_val_frames)->capture_default_str();
  app.add_option("--cnn-patches", g.cnn_patches)->capture_default_str();
  app.add_flag("--quiet", g.quiet, "suppress progress on stderr");
  add_phase_options(app, "cae", g.cae);
  add_phase_options(app, "cnn", g.cnn);
  add_phase_options(app, "lstm", g.lstm);

  std::function<void()> run;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic scene corpus and manifest");
  s->add_option("--out", synth.out)->required();
  s->add_option("--words", synth.words)->capture_default_str();
  s->add_option("--speakers", synth.speakers)->capture_default_str();
  s->add_option("--occurrences", synth.occurrences)->capture_default_str();
  s->callback([&] { run = [&] { cmd_synth(synth); }; });

  PreprocessArgs pre;
  s = app.add_subcommand("preprocess", "scene frames to padded mouth-ROI tensors");
  s->add_option("--manifest", pre.manifest)->required();
  s->add_option("--out", pre.out)->required();
  s->add_option("--cascade", pre.cascade, "cascade JSON (default: built for the profile)");
  s->add_flag("--fixed-roi", pre.fixed_roi, "detect on the first frame only");
  s->callback([&] { run = [&] { cmd_preprocess(pre); }; });

  SplitArgs split;
  s = app.add_subcommand("split", "partition a manifest into train/val/test");
  s->add_option("--manifest", split.manifest)->required();
  s->add_option("--out", split.out)->required();
  s->add_flag("--msd", split.msd, "speaker-dependent: per (speaker, word) counts");
  s->add_option("--counts", split.counts, "per (speaker, word) train,val,test for --msd")
      ->delimiter(',')
      ->expected(3);
  s->add_option("--msi", split.msi, "held-out test speaker");
  s->add_option("--val-speaker", split.val_speaker, "held-out val speaker (default: next)");
  s->add_option("--per-class", split.per_class, "train,val,test records per class")
      ->delimiter(',')
      ->expected(3);
  s->add_option("--fraction", split.fraction, "train,val,test fractions per speaker")
      ->delimiter(',')
      ->expected(3);
  s->callback([&] { run = [&] { cmd_split(split); }; });

  TrainArgs cae;
  s = app.add_subcommand("train-cae", "phase 1: reconstruction training");
  s->add_option("--train", cae.train)->required();
  s->add_option("--val", cae.val);
  s->add_option("--out", cae.out)->required();
  s->callback([&] { run = [&] { cmd_train_cae(cae); }; });

  TrainArgs cnn;
  s = app.add_subcommand("train-baseline-cnn", "baseline phase 1: lip / non-lip patches");
  s->add_option("--train", cnn.train)->required();
  s->add_option("--val", cnn.val);
  s->add_option("--scenes", cnn.scenes, "scene manifest with mouth boxes")->required();
  s->add_option("--out", cnn.out)->required();
  s->callback([&] { run = [&] { cmd_train_cnn(cnn); }; });

  ExtractArgs ext;
  s = app.add_subcommand("extract-features", "frozen per-frame features to .feat files");
  s->add_option("--extractor", ext.extractor)->capture_default_str();
  s->add_option("--checkpoint", ext.checkpoint)->required();
  s->add_option("--manifest", ext.manifests, "one .feat per manifest")->required();
  s->add_option("--out", ext.out)->required();
  s->callback([&] { run = [&] { cmd_extract(ext); }; });

  TrainArgs lstm;
  s = app.add_subcommand("train-lstm", "phase 2: word classifier on frozen features");
  s->add_option("--train", lstm.train, ".feat file")->required();
  s->add_option("--val", lstm.val, ".feat file");
  s->add_option("--out", lstm.out)->required();
  s->callback([&] { run = [&] { cmd_train_lstm(lstm); }; });

  EvalArgs ev;
  s = app.add_subcommand("eval", "accuracy report and confusion CSV");
  s->add_option("--extractor-checkpoint", ev.extractor)->required();
  s->add_option("--lstm", ev.lstm)->required();
  s->add_option("--test", ev.test)->required();
  s->add_option("--train", ev.train);
  s->add_option("--val", ev.val);
  s->add_option("--out", ev.out)->required();
  s->callback([&] { run = [&] { cmd_eval(ev); }; });

  MsiArgs msi;
  s = app.add_subcommand("msi", "every held-out-speaker fold, averaged");
  s->add_option("--manifest", msi.manifest)->required();
  s->add_option("--out", msi.out)->required();
  s->add_option("--extractor", msi.extractor)->capture_default_str();
  s->add_option("--scenes", msi.scenes, "scene manifest (cnn extractor)");
  s->add_option("--max-folds", msi.max_folds, "0 runs every speaker")->capture_default_str();
  s->callback([&] { run = [&] { cmd_msi(msi); }; });

  VisualizeArgs vis;
  s = app.add_subcommand("visualize", "first-layer feature maps and CAE reconstructions");
  s->add_option("--checkpoint", vis.checkpoint)->required();
  s->add_option("--manifest", vis.manifest)->required();
  s->add_option("--index", vis.index)->capture_default_str();
  s->add_option("--frame", vis.frame)->capture_default_str();
  s->add_option("--tau", vis.tau, "empty-map stddev threshold")->capture_default_str();
  s->add_option("--out", vis.out)->required();
  s->callback([&] { run = [&] { cmd_visualize(vis); }; });

  if (argc > 1 && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
    return fail("usage", kExitUsage, std::string("unknown subcommand '") + argv[1] + "'");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::RequiredError& e) {
    if (app.get_subcommands().empty()) return fail("usage", kExitUsage, "missing subcommand");
    return fail("config", kExitConfig, e.what());
  } catch (const CLI::ParseError& e) {
    return fail("config", kExitConfig, e.what());
  }

  try {
    run();
  } catch (const DivergenceError& e) {
    return fail("divergence", kExitDivergence, e.what());
  } catch (const ConfigError& e) {
    return fail("config", kExitConfig, e.what());
  } catch (const DataError& e) {
    return fail("data", kExitData, e.what());
  } catch (const ShapeError& e) {
    return fail("data", kExitData, e.what());
  } catch (const std::exception& e) {
    return fail("internal", 1, e.what());
  }
  return 0;
}
