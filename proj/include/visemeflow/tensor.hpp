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

// Dense row-major tensors and the handful of bulk operations the layers are
// written against. No broadcasting: layers spell out their bias adds.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "visemeflow/common.hpp"

namespace visemeflow {

struct Shape {
  std::vector<std::size_t> dims;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> d) : dims(d) { validate(); }
  explicit Shape(std::vector<std::size_t> d) : dims(std::move(d)) {
    validate();
  }

  void validate() const {
    if (dims.empty()) throw ShapeError("shape must have rank >= 1");
    for (auto d : dims) {
      if (d == 0) throw ShapeError("shape " + str() + " has a zero dimension");
    }
  }

  std::size_t rank() const { return dims.size(); }
  std::size_t operator[](std::size_t i) const { return dims[i]; }

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  std::string str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(dims[i]);
    }
    return s + "]";
  }

  bool operator==(const Shape&) const = default;
};

template <class T>
concept Scalar = std::is_same_v<T, float> || std::is_same_v<T, double>;

template <Scalar T>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 0 : 1;
}

template <Scalar T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_.numel(), fill) {
    shape_.validate();
  }
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    shape_.validate();
    if (data_.size() != shape_.numel()) {
      throw ShapeError("buffer of " + std::to_string(data_.size()) +
                       " elements does not fit shape " + shape_.str());
    }
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), T(1)); }
  static Tensor identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = T(1);
    return t;
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<T> buf;
    buf.reserve(m * n);
    for (const auto& r : rows) {
      if (r.size() != n) throw ShapeError("ragged matrix literal");
      buf.insert(buf.end(), r.begin(), r.end());
    }
    return Tensor(Shape{m, n}, std::move(buf));
  }
  static Tensor vector(std::initializer_list<T> v) {
    return Tensor(Shape{v.size()}, std::vector<T>(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.rank(); }
  std::size_t dim(std::size_t i) const { return shape_.dims.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& buffer() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  /// Contiguous block at leading index i (e.g. one sample of a batch).
  std::span<T> slab(std::size_t i) {
    const std::size_t n = data_.size() / shape_[0];
    return std::span<T>(data_).subspan(i * n, n);
  }
  std::span<const T> slab(std::size_t i) const {
    const std::size_t n = data_.size() / shape_[0];
    return std::span<const T>(data_).subspan(i * n, n);
  }

  template <Scalar U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

// C[m,n] (+)= op(A) * op(B) with op(A) [m,k], op(B) [k,n]. Loop orders keep
// the innermost access contiguous and the summation order fixed. Sums are
// carried in double even for float operands, so each output is rounded once.
template <Scalar T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  std::vector<double> row(n);
  auto load = [&](std::size_t i) {
    for (std::size_t j = 0; j < n; ++j) row[j] = accumulate ? double(c[i * n + j]) : 0.0;
  };
  auto store = [&](std::size_t i) {
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] = static_cast<T>(row[j]);
  };
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      load(i);
      const T* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ai[p];
        if (av == 0.0) continue;
        const T* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += av * double(bp[j]);
      }
      store(i);
    }
  } else if (trans_a && !trans_b) {
    // A stored [k,m]; column i of A is strided.
    for (std::size_t i = 0; i < m; ++i) {
      load(i);
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[p * m + i];
        if (av == 0.0) continue;
        const T* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += av * double(bp[j]);
      }
      store(i);
    }
  } else if (!trans_a && trans_b) {
    // B stored [n,k].
    for (std::size_t i = 0; i < m; ++i) {
      const T* ai = a + i * k;
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T* bj = b + j * k;
        double acc = accumulate ? double(ci[j]) : 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += double(ai[p]) * double(bj[p]);
        ci[j] = static_cast<T>(acc);
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = accumulate ? double(c[i * n + j]) : 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += double(a[p * m + i]) * double(b[j * k + p]);
        c[i * n + j] = static_cast<T>(acc);
      }
    }
  }
}

}  // namespace detail

template <Scalar T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + a.shape().str() + " x " +
                     b.shape().str());
  }
  Tensor<T> c(Shape{a.dim(0), b.dim(1)});
  detail::gemm(false, false, a.dim(0), b.dim(1), a.dim(1), a.ptr(), b.ptr(),
               c.ptr(), false);
  return c;
}

template <Scalar T, class F>
Tensor<T> map(const Tensor<T>& a, F&& f) {
  std::vector<T> out(a.size());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor<T>(a.shape(), std::move(out));
}

template <Scalar T, class F>
Tensor<T> zip_map(const Tensor<T>& a, const Tensor<T>& b, F&& f) {
  if (a.shape() != b.shape()) {
    throw ShapeError("elementwise shape mismatch: " + a.shape().str() +
                     " vs " + b.shape().str());
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
  return Tensor<T>(a.shape(), std::move(out));
}

template <Scalar T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return zip_map(a, b, std::plus<T>{});
}

template <Scalar T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return zip_map(a, b, std::minus<T>{});
}

template <Scalar T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  return zip_map(a, b, std::multiplies<T>{});
}

template <Scalar T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return map(a, [s](T v) { return v * s; });
}

template <Scalar T>
T sum_all(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  return acc;
}

/// Sum over one axis; the axis is dropped from the result (a rank-1 input
/// reduces to shape [1]).
template <Scalar T>
Tensor<T> reduce_sum(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw ShapeError("reduce_sum axis " + std::to_string(axis) +
                     " out of range for shape " + a.shape().str());
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t n = a.dim(axis);
  std::vector<std::size_t> dims;
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis) dims.push_back(a.dim(i));
  }
  if (dims.empty()) dims.push_back(1);
  Tensor<T> out(Shape(std::move(dims)));
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      const T* src = a.ptr() + (o * n + k) * inner;
      T* dst = out.ptr() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  return out;
}

/// Sum over every element, as a [1] tensor.
template <Scalar T>
Tensor<T> reduce_sum(const Tensor<T>& a) {
  return Tensor<T>(Shape{1}, std::vector<T>{sum_all(a)});
}

template <Scalar T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  new_shape.validate();
  if (new_shape.numel() != a.size()) {
    throw ShapeError("cannot reshape " + a.shape().str() + " (" +
                     std::to_string(a.size()) + " elements) to " +
                     new_shape.str());
  }
  return Tensor<T>(std::move(new_shape), a.buffer());
}

template <Scalar T>
Tensor<T> reshape(Tensor<T>&& a, Shape new_shape) {
  new_shape.validate();
  if (new_shape.numel() != a.size()) {
    throw ShapeError("cannot reshape " + a.shape().str() + " to " +
                     new_shape.str());
  }
  std::vector<T> buf(a.data().begin(), a.data().end());
  return Tensor<T>(std::move(new_shape), std::move(buf));
}

// ---------------------------------------------------------------------------
// NTSR serialization: "NTSR", u8 dtype (0=f32, 1=f64), u8 rank, rank x u64 LE
// dims, then little-endian scalars in row-major order.

namespace detail {

inline constexpr char kTensorMagic[4] = {'N', 'T', 'S', 'R'};

template <class U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(buf, buf + sizeof(U));
  }
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(std::istream& is, const char* what) {
  unsigned char buf[sizeof(U)];
  is.read(reinterpret_cast<char*>(buf), sizeof(U));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(U))) {
    throw TruncatedPayloadError(std::string("truncated payload while reading ") +
                                what);
  }
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(buf, buf + sizeof(U));
  }
  U v;
  std::memcpy(&v, buf, sizeof(U));
  return v;
}

}  // namespace detail

template <Scalar T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(detail::kTensorMagic, 4);
  detail::put_le<std::uint8_t>(os, dtype_code<T>());
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape().dims) {
    detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  }
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.ptr()),
             static_cast<std::streamsize>(t.size() * sizeof(T)));
  } else {
    for (T v : t.data()) detail::put_le<T>(os, v);
  }
}

/// Reads one tensor; stored f64 data read as f32 (or vice versa) is converted.
template <Scalar T>
Tensor<T> read_tensor(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4) throw TruncatedPayloadError("truncated payload: tensor magic");
  if (std::memcmp(magic, detail::kTensorMagic, 4) != 0) {
    throw CorruptMagicError("corrupt magic: expected NTSR");
  }
  const auto code = detail::get_le<std::uint8_t>(is, "dtype");
  if (code > 1) throw DataError("unknown tensor dtype code " + std::to_string(code));
  const auto rank = detail::get_le<std::uint8_t>(is, "rank");
  if (rank == 0) throw DataError("tensor rank 0 is not allowed");
  std::vector<std::size_t> dims(rank);
  for (auto& d : dims) {
    d = static_cast<std::size_t>(detail::get_le<std::uint64_t>(is, "dims"));
    if (d == 0) throw DataError("tensor has a zero dimension");
  }
  Shape shape(std::move(dims));
  const std::size_t n = shape.numel();
  auto read_as = [&]<class U>(U) {
    std::vector<U> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(n * sizeof(U)));
    if (is.gcount() != static_cast<std::streamsize>(n * sizeof(U))) {
      throw TruncatedPayloadError("truncated payload: tensor " + shape.str());
    }
    if constexpr (std::endian::native == std::endian::big) {
      for (auto& v : buf) {
        auto* p = reinterpret_cast<unsigned char*>(&v);
        std::reverse(p, p + sizeof(U));
      }
    }
    if constexpr (std::is_same_v<U, T>) {
      return Tensor<T>(shape, std::move(buf));
    } else {
      return Tensor<T>(shape, std::vector<T>(buf.begin(), buf.end()));
    }
  };
  return code == 0 ? read_as(float{}) : read_as(double{});
}

template <Scalar T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_tensor(os, t);
  if (!os) throw DataError("write failed: " + path);
}

template <Scalar T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing file: " + path);
  return read_tensor<T>(is);
}

}  // namespace visemeflow
