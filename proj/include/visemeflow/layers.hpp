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

// Sequential layer stacks over a named ParamSet. A stack is a list of layer
// specs; parameters live in the ParamSet under "<layer name>.w" / ".b".

#pragma once

#include <string>
#include <variant>
#include <vector>

#include "visemeflow/nn.hpp"

namespace visemeflow {

struct Conv2dLayer {
  std::string name;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct ConvTranspose2dLayer {
  std::string name;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct DenseLayer {
  std::string name;
};

struct ReluLayer {};
struct SigmoidLayer {};

struct MaxPoolLayer {
  std::size_t window = 2;
  std::size_t stride = 2;
};

/// [N, ...] -> [N, prod(...)]
struct FlattenLayer {};

/// [N, c*h*w] -> [N, c, h, w]
struct UnflattenLayer {
  std::size_t c = 1, h = 1, w = 1;
};

using Layer = std::variant<Conv2dLayer, ConvTranspose2dLayer, DenseLayer,
                           ReluLayer, SigmoidLayer, MaxPoolLayer, FlattenLayer,
                           UnflattenLayer>;

using LayerStack = std::vector<Layer>;

template <Scalar T>
using LayerCache =
    std::variant<std::monostate, Conv2dCache<T>, ConvTranspose2dCache<T>,
                 DenseCache<T>, Tensor<T>, MaxPoolCache<T>, Shape>;

template <Scalar T>
struct StackCache {
  std::vector<LayerCache<T>> layers;
};

template <Scalar T>
const Tensor<T>& param(const ParamSet<T>& params, const std::string& key) {
  auto it = params.find(key);
  if (it == params.end()) throw DataError("missing parameter " + key);
  return it->second;
}

template <Scalar T>
void accumulate_grad(ParamSet<T>& grads, const std::string& key,
                     const Tensor<T>& g) {
  auto it = grads.find(key);
  if (it == grads.end()) {
    grads.emplace(key, g);
    return;
  }
  if (it->second.shape() != g.shape()) {
    throw ShapeError("gradient slot " + key + " has shape " +
                     it->second.shape().str() + ", got " + g.shape().str());
  }
  auto dst = it->second.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

namespace detail {

template <class... Fs>
struct overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
overloaded(Fs...) -> overloaded<Fs...>;

}  // namespace detail

/// Runs the stack. When `cache` is non-null every layer records what its
/// backward pass needs; otherwise the cheaper inference kernels are used.
template <Scalar T>
Tensor<T> stack_forward(const LayerStack& stack, const ParamSet<T>& params,
                        Tensor<T> x, StackCache<T>* cache) {
  if (cache) {
    cache->layers.clear();
    cache->layers.reserve(stack.size());
  }
  for (const auto& layer : stack) {
    LayerCache<T> entry;
    x = std::visit(
        detail::overloaded{
            [&](const Conv2dLayer& l) {
              const auto& w = param(params, l.name + ".w");
              const auto& b = param(params, l.name + ".b");
              if (!cache) return conv2d_infer(x, w, b, l.stride, l.pad);
              auto [y, c] = conv2d_forward(x, w, b, l.stride, l.pad);
              entry = std::move(c);
              return std::move(y);
            },
            [&](const ConvTranspose2dLayer& l) {
              auto [y, c] = conv_transpose2d_forward(
                  x, param(params, l.name + ".w"), param(params, l.name + ".b"),
                  l.stride, l.pad);
              if (cache) entry = std::move(c);
              return std::move(y);
            },
            [&](const DenseLayer& l) {
              const auto& w = param(params, l.name + ".w");
              const auto& b = param(params, l.name + ".b");
              if (!cache) return dense_infer(x, w, b);
              auto [y, c] = dense_forward(x, w, b);
              entry = std::move(c);
              return std::move(y);
            },
            [&](const ReluLayer&) {
              auto y = relu(x);
              if (cache) entry = y;
              return y;
            },
            [&](const SigmoidLayer&) {
              auto y = sigmoid(x);
              if (cache) entry = y;
              return y;
            },
            [&](const MaxPoolLayer& l) {
              auto [y, c] = maxpool_forward(x, l.window, l.stride);
              if (cache) entry = std::move(c);
              return std::move(y);
            },
            [&](const FlattenLayer&) {
              if (cache) entry = x.shape();
              const std::size_t n = x.dim(0);
              return reshape(std::move(x), Shape{n, x.size() / n});
            },
            [&](const UnflattenLayer& l) {
              if (cache) entry = x.shape();
              const std::size_t n = x.dim(0);
              return reshape(std::move(x), Shape{n, l.c, l.h, l.w});
            },
        },
        layer);
    if (cache) cache->layers.push_back(std::move(entry));
  }
  return x;
}

/// Backward through the stack; parameter gradients accumulate into `grads`
/// (slots are created on first use). Returns the gradient of the input.
template <Scalar T>
Tensor<T> stack_backward(const LayerStack& stack, const StackCache<T>& cache,
                         Tensor<T> grad, ParamSet<T>& grads) {
  if (cache.layers.size() != stack.size()) {
    throw ShapeError("stack_backward: cache does not match stack");
  }
  for (std::size_t i = stack.size(); i-- > 0;) {
    const auto& entry = cache.layers[i];
    grad = std::visit(
        detail::overloaded{
            [&](const Conv2dLayer& l) {
              auto g = conv2d_backward(grad, std::get<Conv2dCache<T>>(entry));
              accumulate_grad(grads, l.name + ".w", g.w);
              accumulate_grad(grads, l.name + ".b", g.b);
              return std::move(g.x);
            },
            [&](const ConvTranspose2dLayer& l) {
              auto g = conv_transpose2d_backward(
                  grad, std::get<ConvTranspose2dCache<T>>(entry));
              accumulate_grad(grads, l.name + ".w", g.w);
              accumulate_grad(grads, l.name + ".b", g.b);
              return std::move(g.x);
            },
            [&](const DenseLayer& l) {
              auto g = dense_backward(grad, std::get<DenseCache<T>>(entry));
              accumulate_grad(grads, l.name + ".w", g.w);
              accumulate_grad(grads, l.name + ".b", g.b);
              return std::move(g.x);
            },
            [&](const ReluLayer&) {
              return relu_backward(grad, std::get<Tensor<T>>(entry));
            },
            [&](const SigmoidLayer&) {
              return sigmoid_backward(grad, std::get<Tensor<T>>(entry));
            },
            [&](const MaxPoolLayer&) {
              return maxpool_backward(grad, std::get<MaxPoolCache<T>>(entry));
            },
            [&](const FlattenLayer&) {
              return reshape(std::move(grad), std::get<Shape>(entry));
            },
            [&](const UnflattenLayer&) {
              return reshape(std::move(grad), std::get<Shape>(entry));
            },
        },
        stack[i]);
  }
  return grad;
}

template <Scalar T>
ParamSet<T> cast_params(const ParamSet<float>& params) {
  ParamSet<T> out;
  for (const auto& [k, v] : params) out.emplace(k, v.template cast<T>());
  return out;
}

template <Scalar T>
std::size_t parameter_count(const ParamSet<T>& params) {
  std::size_t n = 0;
  for (const auto& [k, v] : params) n += v.size();
  return n;
}

}  // namespace visemeflow
