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

// The three networks (lip/non-lip CNN, convolutional autoencoder, LSTM word
// classifier), their training tasks, frozen feature extraction, and
// end-to-end word prediction.

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "visemeflow/checkpoint.hpp"
#include "visemeflow/datasets.hpp"
#include "visemeflow/layers.hpp"
#include "visemeflow/nn.hpp"
#include "visemeflow/optim.hpp"

namespace visemeflow {

struct ConvSpec {
  std::size_t out_channels = 8;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  std::size_t pool = 0;  // pooling window (= stride); 0 for none

  bool operator==(const ConvSpec&) const = default;
};

struct ArchitectureDescriptor {
  std::string preset = "custom";
  std::vector<ConvSpec> conv;
  std::size_t feature_dim = 32;
  std::size_t lstm_hidden = 64;
  std::size_t vocab_size = 10;
  Profile profile;

  bool operator==(const ArchitectureDescriptor&) const = default;
};

struct LayerDims {
  std::size_t c, h, w;
};

/// Spatial dims after every conv layer (post pooling); throws on
/// non-integral geometry naming the offending layer.
inline std::vector<LayerDims> conv_dims(const ArchitectureDescriptor& d) {
  if (d.conv.empty()) throw ConfigError("architecture needs at least one conv layer");
  if (d.feature_dim == 0) throw ConfigError("feature_dim must be >= 1");
  std::vector<LayerDims> out;
  LayerDims cur{1, d.profile.H, d.profile.W};
  for (std::size_t i = 0; i < d.conv.size(); ++i) {
    const auto& c = d.conv[i];
    const std::string where = "conv layer " + std::to_string(i + 1);
    if (c.out_channels == 0) throw ConfigError(where + ": zero output channels");
    try {
      cur.h = conv_out_dim(cur.h, c.kernel, c.stride, c.pad, "height");
      cur.w = conv_out_dim(cur.w, c.kernel, c.stride, c.pad, "width");
      if (c.pool) {
        cur.h = pool_out_dim(cur.h, c.pool, c.pool, "height");
        cur.w = pool_out_dim(cur.w, c.pool, c.pool, "width");
      }
    } catch (const ShapeError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    cur.c = c.out_channels;
    out.push_back(cur);
  }
  return out;
}

/// Five conv layers (64, 96, 128, 160, 192 kernels, 3x3, stride 1, pad 1).
/// The first three layers pool with the smallest window in {2, 3} that
/// divides both current dims, when one exists. Feature dim 100, LSTM 512.
inline ArchitectureDescriptor paper_architecture(const Profile& p, std::size_t vocab) {
  ArchitectureDescriptor d;
  d.preset = "paper";
  d.profile = p;
  d.feature_dim = 100;
  d.lstm_hidden = 512;
  d.vocab_size = vocab;
  std::size_t h = p.H, w = p.W;
  const std::size_t channels[5] = {64, 96, 128, 160, 192};
  for (std::size_t i = 0; i < 5; ++i) {
    ConvSpec c{channels[i], 3, 1, 1, 0};
    if (i < 3) {
      for (std::size_t win : {2u, 3u}) {
        if (h % win == 0 && w % win == 0) {
          c.pool = win;
          h /= win;
          w /= win;
          break;
        }
      }
    }
    d.conv.push_back(c);
  }
  return d;
}

/// Two conv layers (8, 16 kernels) with 2x2 pooling, feature dim 32, LSTM 64.
inline ArchitectureDescriptor desk_architecture(const Profile& p, std::size_t vocab) {
  ArchitectureDescriptor d;
  d.preset = "desk";
  d.profile = p;
  d.conv = {{8, 3, 1, 1, 2}, {16, 3, 1, 1, 2}};
  d.feature_dim = 32;
  d.lstm_hidden = 64;
  d.vocab_size = vocab;
  return d;
}

/// Two conv layers (4, 8 kernels) with 2x2 pooling and a 16-d bottleneck.
inline ArchitectureDescriptor tiny_architecture(const Profile& p, std::size_t vocab) {
  ArchitectureDescriptor d = desk_architecture(p, vocab);
  d.preset = "tiny";
  d.conv = {{4, 3, 1, 1, 2}, {8, 3, 1, 1, 2}};
  d.feature_dim = 16;
  d.lstm_hidden = 16;
  return d;
}

inline ArchitectureDescriptor architecture_by_name(const std::string& preset,
                                                   const Profile& p, std::size_t vocab) {
  if (preset == "paper") return paper_architecture(p, vocab);
  if (preset == "desk") return desk_architecture(p, vocab);
  if (preset == "tiny") return tiny_architecture(p, vocab);
  throw ConfigError("unknown architecture preset '" + preset + "' (paper|desk|tiny)");
}

inline Json to_json(const ArchitectureDescriptor& d) {
  Json conv = Json::array();
  for (const auto& c : d.conv) {
    conv.push_back({{"out_channels", c.out_channels}, {"kernel", c.kernel},
                    {"stride", c.stride}, {"pad", c.pad}, {"pool", c.pool}});
  }
  return {{"preset", d.preset},
          {"conv", conv},
          {"feature_dim", d.feature_dim},
          {"lstm_hidden", d.lstm_hidden},
          {"vocab_size", d.vocab_size},
          {"profile", {{"name", d.profile.name}, {"T", d.profile.T},
                       {"H", d.profile.H}, {"W", d.profile.W}}}};
}

inline ArchitectureDescriptor architecture_from_json(const Json& j) {
  ArchitectureDescriptor d;
  try {
    d.preset = j.value("preset", std::string("custom"));
    for (const auto& c : j.at("conv")) {
      d.conv.push_back({c.at("out_channels").get<std::size_t>(),
                        c.at("kernel").get<std::size_t>(), c.at("stride").get<std::size_t>(),
                        c.at("pad").get<std::size_t>(), c.at("pool").get<std::size_t>()});
    }
    d.feature_dim = j.at("feature_dim").get<std::size_t>();
    d.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
    d.vocab_size = j.at("vocab_size").get<std::size_t>();
    const auto& p = j.at("profile");
    d.profile = {p.value("name", std::string("custom")), p.at("T").get<std::size_t>(),
                 p.at("H").get<std::size_t>(), p.at("W").get<std::size_t>()};
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed architecture descriptor: ") + e.what());
  }
  return d;
}

namespace detail {

inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

inline void add_conv_params(ParamSet<float>& ps, const std::string& name, std::size_t in_c,
                            std::size_t out_c, std::size_t k, std::uint64_t seed) {
  ps[name + ".w"] = xavier_init<float>(in_c * k * k, out_c * k * k,
                                       Shape{out_c, in_c, k, k},
                                       derive_seed(seed, {name_hash(name)}));
  ps[name + ".b"] = TensorF(Shape{out_c});
}

inline void add_convt_params(ParamSet<float>& ps, const std::string& name, std::size_t in_c,
                             std::size_t out_c, std::size_t k, std::uint64_t seed) {
  ps[name + ".w"] = xavier_init<float>(in_c * k * k, out_c * k * k,
                                       Shape{in_c, out_c, k, k},
                                       derive_seed(seed, {name_hash(name)}));
  ps[name + ".b"] = TensorF(Shape{out_c});
}

inline void add_dense_params(ParamSet<float>& ps, const std::string& name, std::size_t d_in,
                             std::size_t d_out, std::uint64_t seed) {
  ps[name + ".w"] = xavier_init<float>(d_in, d_out, Shape{d_in, d_out},
                                       derive_seed(seed, {name_hash(name)}));
  ps[name + ".b"] = TensorF(Shape{d_out});
}

/// conv -> relu -> [pool] per layer, flatten, dense(feature_dim) -> relu.
inline LayerStack feature_stack(const ArchitectureDescriptor& d, const std::string& prefix,
                                ParamSet<float>* params, std::uint64_t seed) {
  const auto dims = conv_dims(d);
  LayerStack s;
  std::size_t in_c = 1;
  for (std::size_t i = 0; i < d.conv.size(); ++i) {
    const auto& c = d.conv[i];
    const std::string name = prefix + ".conv" + std::to_string(i + 1);
    s.push_back(Conv2dLayer{name, c.stride, c.pad});
    s.push_back(ReluLayer{});
    if (c.pool) s.push_back(MaxPoolLayer{c.pool, c.pool});
    if (params) add_conv_params(*params, name, in_c, c.out_channels, c.kernel, seed);
    in_c = c.out_channels;
  }
  const auto& last = dims.back();
  s.push_back(FlattenLayer{});
  s.push_back(DenseLayer{prefix + ".fc"});
  s.push_back(ReluLayer{});
  if (params) {
    add_dense_params(*params, prefix + ".fc", last.c * last.h * last.w, d.feature_dim, seed);
  }
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Baseline CNN

struct CnnClassifier {
  ArchitectureDescriptor desc;
  LayerStack features;  // cnn.* : conv stack -> dense(feature_dim) -> relu
  LayerStack head;      // head.fc : dense(2), removed after training
  ParamSet<float> params;

  Json architecture() const {
    Json j = to_json(desc);
    j["model"] = "cnn";
    j["removable"] = {"head.*"};
    return j;
  }
};

inline CnnClassifier build_cnn_classifier(const ArchitectureDescriptor& d,
                                          std::uint64_t seed = 0) {
  CnnClassifier m;
  m.desc = d;
  m.features = detail::feature_stack(d, "cnn", &m.params, seed);
  m.head = {DenseLayer{"head.fc"}};
  detail::add_dense_params(m.params, "head.fc", d.feature_dim, 2, seed);
  return m;
}

/// Lip-probability pairs [N, 2] for patches [N, 1, H, W].
inline TensorF cnn_probabilities(const CnnClassifier& m, const TensorF& patches) {
  auto f = stack_forward<float>(m.features, m.params, patches, nullptr);
  return softmax(stack_forward<float>(m.head, m.params, std::move(f), nullptr));
}

// ---------------------------------------------------------------------------
// Convolutional autoencoder

struct Cae {
  ArchitectureDescriptor desc;
  LayerStack encoder;  // enc.*
  LayerStack decoder;  // dec.*
  ParamSet<float> params;

  Json architecture() const {
    Json j = to_json(desc);
    j["model"] = "cae";
    return j;
  }
};

/// Encoder as in the baseline CNN; decoder is dense -> relu -> unflatten,
/// then one transposed conv per encoder layer in reverse (kernel = stride =
/// pool window where the encoder pooled), ending in a sigmoid.
inline Cae build_cae(const ArchitectureDescriptor& d, std::uint64_t seed = 0) {
  Cae m;
  m.desc = d;
  m.encoder = detail::feature_stack(d, "enc", &m.params, seed);
  const auto dims = conv_dims(d);
  const auto& last = dims.back();
  m.decoder.push_back(DenseLayer{"dec.fc"});
  m.decoder.push_back(ReluLayer{});
  m.decoder.push_back(UnflattenLayer{last.c, last.h, last.w});
  detail::add_dense_params(m.params, "dec.fc", d.feature_dim, last.c * last.h * last.w, seed);
  LayerDims cur = last;
  for (std::size_t i = d.conv.size(); i-- > 0;) {
    const auto& c = d.conv[i];
    const LayerDims target = i == 0 ? LayerDims{1, d.profile.H, d.profile.W} : dims[i - 1];
    const std::string name = "dec.deconv" + std::to_string(i + 1);
    std::size_t k, s, p;
    if (c.pool) {
      if (c.stride != 1 || 2 * c.pad + 1 != c.kernel) {
        throw ConfigError("non-invertible pooling geometry at conv layer " +
                          std::to_string(i + 1) + ": pooled layers must be size-preserving");
      }
      k = c.pool;
      s = c.pool;
      p = 0;
    } else {
      k = c.kernel;
      s = c.stride;
      p = c.pad;
    }
    const std::size_t oh = (cur.h - 1) * s + k - 2 * p;
    const std::size_t ow = (cur.w - 1) * s + k - 2 * p;
    if (oh != target.h || ow != target.w) {
      throw ConfigError("non-invertible pooling geometry at conv layer " +
                        std::to_string(i + 1) + ": decoder would produce " +
                        std::to_string(oh) + "x" + std::to_string(ow) + " instead of " +
                        std::to_string(target.h) + "x" + std::to_string(target.w));
    }
    m.decoder.push_back(ConvTranspose2dLayer{name, s, p});
    detail::add_convt_params(m.params, name, cur.c, target.c, k, seed);
    if (i == 0) {
      m.decoder.push_back(SigmoidLayer{});
    } else {
      m.decoder.push_back(ReluLayer{});
    }
    cur = target;
  }
  return m;
}

template <Scalar T>
Tensor<T> cae_reconstruct(const Cae& m, const ParamSet<T>& params, const Tensor<T>& x) {
  auto code = stack_forward<T>(m.encoder, params, x, nullptr);
  return stack_forward<T>(m.decoder, params, std::move(code), nullptr);
}

inline TensorF cae_reconstruct(const Cae& m, const TensorF& x) {
  return cae_reconstruct<float>(m, m.params, x);
}

// ---------------------------------------------------------------------------
// Frozen per-frame feature extraction

struct FeatureExtractor {
  ArchitectureDescriptor desc;
  LayerStack stack;
  ParamSet<float> params;
  std::string kind;  // "cae" or "cnn"

  /// Frames [T,1,H,W] -> features [T, feature_dim]; rows depend only on
  /// their own frame.
  TensorF extract(const TensorF& frames) const {
    const Shape expected{desc.profile.T, 1, desc.profile.H, desc.profile.W};
    if (frames.shape() != expected) {
      throw ProfileMismatchError("profile mismatch: video " + frames.shape().str() +
                                 " vs expected " + expected.str());
    }
    return encode(frames);
  }

  /// Any batch of frames [N,1,H,W] -> [N, feature_dim].
  TensorF encode(const TensorF& frames) const {
    return stack_forward<float>(stack, params, frames, nullptr);
  }
};

inline void require_params(const ParamSet<float>& params, const LayerStack& stack,
                           const std::string& what) {
  for (const auto& layer : stack) {
    std::string name;
    if (auto* c = std::get_if<Conv2dLayer>(&layer)) name = c->name;
    if (auto* dl = std::get_if<DenseLayer>(&layer)) name = dl->name;
    if (name.empty()) continue;
    for (const char* suffix : {".w", ".b"}) {
      if (!params.contains(name + suffix)) {
        throw MissingCheckpointError("architecture mismatch: " + what + " lacks " + name +
                                     suffix);
      }
    }
  }
}

/// Encoder-only view of a CAE checkpoint; decoder tensors are never kept.
inline FeatureExtractor cae_feature_extractor(const ModelCheckpoint& ckpt) {
  FeatureExtractor fx;
  fx.desc = architecture_from_json(ckpt.architecture);
  fx.kind = "cae";
  fx.stack = detail::feature_stack(fx.desc, "enc", nullptr, 0);
  for (const auto& [k, v] : ckpt.params) {
    if (glob_match("enc.*", k)) fx.params.emplace(k, v);
  }
  require_params(fx.params, fx.stack, "CAE checkpoint");
  return fx;
}

inline FeatureExtractor cae_feature_extractor(const std::string& path) {
  return cae_feature_extractor(load_checkpoint(path, {"enc.*"}));
}

/// Baseline CNN minus its softmax head: penultimate dense activations.
inline FeatureExtractor cnn_feature_extractor(const ModelCheckpoint& ckpt) {
  FeatureExtractor fx;
  fx.desc = architecture_from_json(ckpt.architecture);
  fx.kind = "cnn";
  fx.stack = detail::feature_stack(fx.desc, "cnn", nullptr, 0);
  for (const auto& [k, v] : ckpt.params) {
    if (glob_match("cnn.*", k)) fx.params.emplace(k, v);
  }
  require_params(fx.params, fx.stack, "CNN checkpoint");
  return fx;
}

inline FeatureExtractor cnn_feature_extractor(const std::string& path) {
  return cnn_feature_extractor(load_checkpoint(path, {"cnn.*"}));
}

inline TensorF cae_extract_features(const ModelCheckpoint& ckpt, const TensorF& frames) {
  return cae_feature_extractor(ckpt).extract(frames);
}

inline TensorF cnn_extract_features(const ModelCheckpoint& ckpt, const TensorF& frames) {
  return cnn_feature_extractor(ckpt).extract(frames);
}

/// Stacks per-video features into [N, T, d].
inline TensorF extract_feature_set(const FeatureExtractor& fx,
                                   const std::vector<TensorF>& videos) {
  if (videos.empty()) throw DataError("no videos to extract features from");
  const std::size_t T = fx.desc.profile.T, d = fx.desc.feature_dim;
  TensorF out(Shape{videos.size(), T, d});
  parallel_for(videos.size(), [&](std::size_t i) {
    const auto f = fx.extract(videos[i]);
    std::copy(f.ptr(), f.ptr() + T * d, out.ptr() + i * T * d);
  });
  return out;
}

// ---------------------------------------------------------------------------
// LSTM word classifier

struct LstmClassifier {
  std::size_t input_dim = 0, hidden = 0, vocab = 0;
  ParamSet<float> params;  // lstm.w_x, lstm.w_h, lstm.b, cls.w, cls.b
  // Fixed per-dimension input standardization (x - shift) * scale, fitted on
  // the training features. Raw codes share a large positive offset that
  // saturates the gates. Empty means identity.
  std::vector<float> shift, scale;

  TensorF normalize(TensorF x) const {
    if (shift.empty()) return x;
    const std::size_t d = x.dim(x.rank() - 1);
    if (d != shift.size()) {
      throw ShapeError("LSTM normalization expects dim " + std::to_string(shift.size()) +
                       ", got " + x.shape().str());
    }
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - shift[i % d]) * scale[i % d];
    return x;
  }

  /// Mean and inverse stddev per dimension over every row of [N, T, d].
  void fit_normalization(const TensorF& features) {
    const std::size_t d = features.dim(features.rank() - 1);
    const std::size_t rows = features.size() / d;
    std::vector<double> sum(d, 0.0), sq(d, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        const double v = features[r * d + j];
        sum[j] += v;
        sq[j] += v * v;
      }
    shift.assign(d, 0.0f);
    scale.assign(d, 1.0f);
    for (std::size_t j = 0; j < d; ++j) {
      const double mean = sum[j] / static_cast<double>(rows);
      const double var = std::max(0.0, sq[j] / static_cast<double>(rows) - mean * mean);
      shift[j] = static_cast<float>(mean);
      if (std::sqrt(var) > 1e-6) scale[j] = static_cast<float>(1.0 / std::sqrt(var));
    }
  }

  template <Scalar T>
  static LstmParams<T> lstm_params(const ParamSet<T>& ps) {
    return {param(ps, "lstm.w_x"), param(ps, "lstm.w_h"), param(ps, "lstm.b")};
  }
};

/// Gate weights Xavier with fan_in = d + H, fan_out = H; forget-gate bias 1.
inline LstmClassifier build_lstm_classifier(std::size_t input_dim, std::size_t hidden,
                                            std::size_t vocab, std::uint64_t seed = 0) {
  if (input_dim == 0 || hidden == 0 || vocab < 2) {
    throw ConfigError("lstm classifier needs input_dim, hidden >= 1 and vocab >= 2");
  }
  LstmClassifier m;
  m.input_dim = input_dim;
  m.hidden = hidden;
  m.vocab = vocab;
  m.params["lstm.w_x"] = xavier_init<float>(input_dim + hidden, hidden,
                                            Shape{input_dim, 4 * hidden},
                                            derive_seed(seed, {detail::name_hash("lstm.w_x")}));
  m.params["lstm.w_h"] = xavier_init<float>(input_dim + hidden, hidden,
                                            Shape{hidden, 4 * hidden},
                                            derive_seed(seed, {detail::name_hash("lstm.w_h")}));
  TensorF b(Shape{4 * hidden});
  for (std::size_t j = hidden; j < 2 * hidden; ++j) b[j] = 1.0f;
  m.params["lstm.b"] = std::move(b);
  detail::add_dense_params(m.params, "cls", hidden, vocab, seed);
  return m;
}

inline LstmClassifier lstm_classifier_from_checkpoint(const ModelCheckpoint& ckpt) {
  LstmClassifier m;
  m.params = ckpt.params;
  for (const char* k : {"lstm.w_x", "lstm.w_h", "lstm.b", "cls.w", "cls.b"}) {
    if (!m.params.contains(k)) {
      throw MissingCheckpointError(std::string("LSTM checkpoint lacks ") + k);
    }
  }
  m.input_dim = m.params.at("lstm.w_x").dim(0);
  m.hidden = m.params.at("lstm.w_h").dim(0);
  m.vocab = m.params.at("cls.w").dim(1);
  const auto& a = ckpt.architecture;
  if (a.contains("feature_shift")) {
    m.shift = a.at("feature_shift").get<std::vector<float>>();
    m.scale = a.at("feature_scale").get<std::vector<float>>();
    if (m.shift.size() != m.input_dim || m.scale.size() != m.input_dim) {
      throw HeaderMismatchError("LSTM checkpoint normalization does not match input dim");
    }
  }
  return m;
}

template <Scalar T>
Tensor<T> lstm_logits(const ParamSet<T>& ps, const Tensor<T>& features) {
  auto h = lstm_sequence(features, LstmClassifier::lstm_params(ps)).first;
  return dense_infer(h, param(ps, "cls.w"), param(ps, "cls.b"));
}

/// Class distributions [N, vocab] for features [N, T, d].
inline TensorF lstm_probabilities(const LstmClassifier& m, const TensorF& features) {
  return softmax(lstm_logits(m.params, m.normalize(features)));
}

// ---------------------------------------------------------------------------
// Training tasks (see optim.hpp: TrainTask)

namespace detail {

inline TensorF gather_rows(const TensorF& src, std::span<const std::size_t> idx) {
  std::vector<std::size_t> dims = src.shape().dims;
  dims[0] = idx.size();
  TensorF out{Shape(dims)};
  const std::size_t per = src.size() / src.dim(0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(src.ptr() + idx[i] * per, src.ptr() + (idx[i] + 1) * per, out.ptr() + i * per);
  }
  return out;
}

template <class Fn>
double batched_accuracy(std::size_t n, std::size_t batch,
                        const std::vector<std::size_t>& labels, Fn&& probs_for) {
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t stop = std::min(n, start + batch);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const TensorF p = probs_for(std::span<const std::size_t>(idx));
    const std::size_t k = p.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const float* row = p.ptr() + i * k;
      const auto pred = static_cast<std::size_t>(std::max_element(row, row + k) - row);
      correct += pred == labels[idx[i]];
    }
  }
  return n ? double(correct) / double(n) : 0.0;
}

}  // namespace detail

/// Frames [N,1,H,W] reconstruction task; validation metric is MSE.
class CaeTask {
 public:
  CaeTask(Cae& model, TensorF train, std::optional<TensorF> val)
      : model_(model), train_(std::move(train)), val_(std::move(val)) {}

  ParamSet<float>& params() { return model_.params; }
  std::size_t train_size() const { return train_.dim(0); }
  bool higher_is_better() const { return false; }

  double batch_loss(std::span<const std::size_t> idx, ParamSet<float>& grads) {
    const TensorF x = detail::gather_rows(train_, idx);
    StackCache<float> enc_cache, dec_cache;
    auto code = stack_forward(model_.encoder, model_.params, x, &enc_cache);
    auto recon = stack_forward(model_.decoder, model_.params, std::move(code), &dec_cache);
    auto loss = mse_loss(recon, x);
    auto g = stack_backward(model_.decoder, dec_cache, std::move(loss.grad), grads);
    stack_backward(model_.encoder, enc_cache, std::move(g), grads);
    return loss.loss;
  }

  double validation_metric() const { return mse(val_ ? *val_ : train_); }

  double mse(const TensorF& frames) const {
    double acc = 0.0;
    const std::size_t n = frames.dim(0), batch = 64;
    for (std::size_t start = 0; start < n; start += batch) {
      std::vector<std::size_t> idx(std::min(n, start + batch) - start);
      std::iota(idx.begin(), idx.end(), start);
      const TensorF x = detail::gather_rows(frames, idx);
      acc += double(mse_loss(cae_reconstruct(model_, x), x).loss) * double(idx.size());
    }
    return acc / double(n);
  }

 private:
  Cae& model_;
  TensorF train_;
  std::optional<TensorF> val_;
};

/// Lip / non-lip classification; validation metric is accuracy.
class PatchTask {
 public:
  PatchTask(CnnClassifier& model, const PatchDataset& train, const PatchDataset* val)
      : model_(model), train_(train), val_(val) {}

  ParamSet<float>& params() { return model_.params; }
  std::size_t train_size() const { return train_.labels.size(); }
  bool higher_is_better() const { return true; }

  double batch_loss(std::span<const std::size_t> idx, ParamSet<float>& grads) {
    const TensorF x = detail::gather_rows(train_.patches, idx);
    std::vector<std::size_t> labels;
    for (auto i : idx) labels.push_back(train_.labels[i]);
    StackCache<float> fc, hc;
    auto f = stack_forward(model_.features, model_.params, x, &fc);
    auto logits = stack_forward(model_.head, model_.params, std::move(f), &hc);
    auto loss = softmax_cross_entropy(logits, labels);
    auto g = stack_backward(model_.head, hc, std::move(loss.grad), grads);
    stack_backward(model_.features, fc, std::move(g), grads);
    return loss.loss;
  }

  double accuracy(const PatchDataset& ds) const {
    return detail::batched_accuracy(ds.labels.size(), 64, ds.labels, [&](auto idx) {
      return cnn_probabilities(model_, detail::gather_rows(ds.patches, idx));
    });
  }

  double validation_metric() const { return accuracy(val_ ? *val_ : train_); }

 private:
  CnnClassifier& model_;
  const PatchDataset& train_;
  const PatchDataset* val_;
};

struct FeatureSet {
  TensorF features;  // [N, T, d]
  std::vector<std::size_t> labels;
};

/// Word classification from frozen features; validation metric is accuracy.
class LstmTask {
 public:
  LstmTask(LstmClassifier& model, const FeatureSet& train, const FeatureSet* val)
      : model_(model), train_(train), val_(val) {}

  ParamSet<float>& params() { return model_.params; }
  std::size_t train_size() const { return train_.labels.size(); }
  bool higher_is_better() const { return true; }

  double batch_loss(std::span<const std::size_t> idx, ParamSet<float>& grads) {
    const TensorF x = model_.normalize(detail::gather_rows(train_.features, idx));
    std::vector<std::size_t> labels;
    for (auto i : idx) labels.push_back(train_.labels[i]);
    const auto lp = LstmClassifier::lstm_params(model_.params);
    auto [h, cache] = lstm_sequence(x, lp);
    auto [logits, dcache] = dense_forward(h, param(model_.params, "cls.w"),
                                          param(model_.params, "cls.b"));
    auto loss = softmax_cross_entropy(logits, labels);
    auto dg = dense_backward(loss.grad, dcache);
    accumulate_grad(grads, "cls.w", dg.w);
    accumulate_grad(grads, "cls.b", dg.b);
    auto lg = LstmGrads<float>::zeros_like(lp);
    lstm_sequence_backward(dg.x, cache, lp, lg);
    accumulate_grad(grads, "lstm.w_x", lg.w_x);
    accumulate_grad(grads, "lstm.w_h", lg.w_h);
    accumulate_grad(grads, "lstm.b", lg.b);
    return loss.loss;
  }

  double accuracy(const FeatureSet& fs) const {
    return detail::batched_accuracy(fs.labels.size(), 128, fs.labels, [&](auto idx) {
      return lstm_probabilities(model_, detail::gather_rows(fs.features, idx));
    });
  }

  double validation_metric() const { return accuracy(val_ ? *val_ : train_); }

 private:
  LstmClassifier& model_;
  const FeatureSet& train_;
  const FeatureSet* val_;
};

// The reconstruction loss averages over every pixel, so its gradients are
// small and the CAE wants a much larger step than the classifiers.
inline OptimizerConfig default_cae_optimizer() {
  OptimizerConfig c;
  c.learning_rate = 2.0;
  c.max_epochs = 8;
  c.patience = 3;
  return c;
}

inline OptimizerConfig default_cnn_optimizer() {
  OptimizerConfig c;
  c.learning_rate = 0.01;
  c.max_epochs = 15;
  c.patience = 4;
  return c;
}

inline OptimizerConfig default_lstm_optimizer() {
  OptimizerConfig c;
  c.learning_rate = 0.01;
  c.batch_size = 16;
  c.max_epochs = 60;
  c.patience = 15;
  c.clip_norm = 5.0;
  return c;
}

inline ModelCheckpoint train_cae(Cae& model, const TensorF& train_frames,
                                 const std::optional<TensorF>& val_frames,
                                 const OptimizerConfig& cfg, std::uint64_t seed,
                                 const EpochCallback& on_epoch = {}) {
  for (float v : train_frames.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError("CAE frames must lie in [0, 1]");
  }
  CaeTask task(model, train_frames, val_frames);
  return train_loop(task, cfg, seed, model.architecture(), on_epoch);
}

inline ModelCheckpoint train_patch_classifier(CnnClassifier& model, const PatchDataset& train,
                                              const PatchDataset* val,
                                              const OptimizerConfig& cfg, std::uint64_t seed,
                                              const EpochCallback& on_epoch = {}) {
  PatchTask task(model, train, val);
  return train_loop(task, cfg, seed, model.architecture(), on_epoch);
}

inline ModelCheckpoint train_lstm_classifier(LstmClassifier& model, const FeatureSet& train,
                                             const FeatureSet* val, const OptimizerConfig& cfg,
                                             std::uint64_t seed,
                                             const EpochCallback& on_epoch = {}) {
  if (train.features.rank() != 3 || train.features.dim(2) != model.input_dim) {
    throw ShapeError("LSTM features " + train.features.shape().str() +
                     " do not match input dim " + std::to_string(model.input_dim));
  }
  model.fit_normalization(train.features);
  LstmTask task(model, train, val);
  Json arch = {{"model", "lstm"},
               {"input_dim", model.input_dim},
               {"lstm_hidden", model.hidden},
               {"vocab_size", model.vocab},
               {"T", train.features.dim(1)},
               {"feature_shift", model.shift},
               {"feature_scale", model.scale}};
  return train_loop(task, cfg, seed, std::move(arch), on_epoch);
}

struct Prediction {
  std::size_t word = 0;
  std::vector<float> probabilities;
};

/// Full inference for one preprocessed video [T,1,H,W].
inline Prediction predict_word(const FeatureExtractor& fx, const LstmClassifier& lstm,
                               const TensorF& frames) {
  const auto feats = fx.extract(frames);
  if (feats.dim(1) != lstm.input_dim) {
    throw ProfileMismatchError("feature dim " + std::to_string(feats.dim(1)) +
                               " does not match the LSTM input dim " +
                               std::to_string(lstm.input_dim));
  }
  const auto p = lstm_probabilities(lstm, reshape(feats, Shape{1, feats.dim(0), feats.dim(1)}));
  Prediction out;
  out.probabilities.assign(p.data().begin(), p.data().end());
  out.word = static_cast<std::size_t>(
      std::max_element(out.probabilities.begin(), out.probabilities.end()) -
      out.probabilities.begin());
  return out;
}

inline Prediction predict_word(const ModelCheckpoint& encoder, const ModelCheckpoint& lstm,
                               const TensorF& frames) {
  return predict_word(cae_feature_extractor(encoder), lstm_classifier_from_checkpoint(lstm),
                      frames);
}

}  // namespace visemeflow
