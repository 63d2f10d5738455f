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

// Model checkpoints: "NCKP", u32 LE header length, a JSON header holding the
// architecture descriptor, training metadata and the tensor directory, then
// each tensor as u16 LE name length + name bytes + an NTSR record.

#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "visemeflow/nn.hpp"
#include "visemeflow/tensor.hpp"

namespace visemeflow {

using Json = nlohmann::json;

struct ModelCheckpoint {
  Json architecture = Json::object();
  Json metadata = Json::object();
  ParamSet<float> params;

  bool operator==(const ModelCheckpoint&) const = default;
};

/// Glob match supporting '*' only ("enc.*", "*.w").
inline bool glob_match(std::string_view pattern, std::string_view text) {
  std::size_t p = 0, t = 0, star = std::string_view::npos, mark = 0;
  while (t < text.size()) {
    if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = t;
    } else if (p < pattern.size() && pattern[p] == text[t]) {
      ++p;
      ++t;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      t = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

inline bool matches_any(const std::vector<std::string>& patterns,
                        const std::string& name) {
  if (patterns.empty()) return true;
  for (const auto& p : patterns) {
    if (glob_match(p, name)) return true;
  }
  return false;
}

inline void write_checkpoint(std::ostream& os, const ModelCheckpoint& ckpt) {
  Json header;
  header["architecture"] = ckpt.architecture;
  header["metadata"] = ckpt.metadata;
  Json dir = Json::array();
  for (const auto& [name, t] : ckpt.params) {
    dir.push_back({{"name", name}, {"shape", t.shape().dims}, {"dtype", "f32"}});
  }
  header["tensors"] = dir;
  const std::string text = header.dump();
  os.write("NCKP", 4);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : ckpt.params) {
    if (name.size() > 0xFFFF) throw DataError("tensor name too long: " + name);
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
}

/// Reads a checkpoint. With a non-empty `filter`, only tensors whose names
/// match one of the glob patterns are kept (the others are still validated).
inline ModelCheckpoint read_checkpoint(std::istream& is,
                                       const std::vector<std::string>& filter = {}) {
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4) throw TruncatedPayloadError("truncated payload: checkpoint magic");
  if (std::string_view(magic, 4) != "NCKP") {
    throw CorruptMagicError("corrupt magic: expected NCKP");
  }
  const auto len = detail::get_le<std::uint32_t>(is, "checkpoint header length");
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (is.gcount() != static_cast<std::streamsize>(len)) {
    throw TruncatedPayloadError("truncated payload: checkpoint header");
  }
  Json header;
  try {
    header = Json::parse(text);
  } catch (const Json::exception& e) {
    throw HeaderMismatchError(std::string("header/payload mismatch: unparsable header: ") +
                              e.what());
  }
  if (!header.contains("tensors") || !header["tensors"].is_array()) {
    throw HeaderMismatchError("header/payload mismatch: header lists no tensors");
  }
  ModelCheckpoint ckpt;
  ckpt.architecture = header.value("architecture", Json::object());
  ckpt.metadata = header.value("metadata", Json::object());
  for (const auto& entry : header["tensors"]) {
    const auto expected_name = entry.at("name").get<std::string>();
    const auto expected_shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto name_len = detail::get_le<std::uint16_t>(is, "tensor name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (is.gcount() != name_len) throw TruncatedPayloadError("truncated payload: tensor name");
    if (name != expected_name) {
      throw HeaderMismatchError("header/payload mismatch: expected tensor " +
                                expected_name + ", found " + name);
    }
    auto t = read_tensor<float>(is);
    if (t.shape().dims != expected_shape) {
      throw HeaderMismatchError("header/payload mismatch: tensor " + name +
                                " has shape " + t.shape().str());
    }
    if (matches_any(filter, name)) ckpt.params.emplace(name, std::move(t));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw HeaderMismatchError("header/payload mismatch: trailing bytes after last tensor");
  }
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const ModelCheckpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_checkpoint(os, ckpt);
  if (!os) throw DataError("write failed: " + path);
}

inline ModelCheckpoint load_checkpoint(const std::string& path,
                                       const std::vector<std::string>& filter = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingCheckpointError("missing checkpoint: " + path);
  return read_checkpoint(is, filter);
}

}  // namespace visemeflow
