// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockbatch/kv_cache.hpp"

#include <algorithm>

#include "blockbatch/errors.hpp"

namespace blockbatch {

KvCache::KvCache(int layers, int length, int width)
    : layers_(layers),
      length_(length),
      width_(width),
      data_(static_cast<std::size_t>(layers) * length * 2 * width, 0.0),
      valid_(static_cast<std::size_t>(length), 0) {
  if (layers <= 0 || length <= 0 || width <= 0) throw ConfigError("KvCache dimensions must be positive");
}

std::span<double> KvCache::row(int layer, int pos, int kv) {
  const auto off = ((static_cast<std::size_t>(layer) * length_ + pos) * 2 + kv) * width_;
  return {data_.data() + off, static_cast<std::size_t>(width_)};
}

std::span<const double> KvCache::row(int layer, int pos, int kv) const {
  const auto off = ((static_cast<std::size_t>(layer) * length_ + pos) * 2 + kv) * width_;
  return {data_.data() + off, static_cast<std::size_t>(width_)};
}

bool KvCache::all_valid() const {
  return std::all_of(valid_.begin(), valid_.end(), [](unsigned char v) { return v != 0; });
}

bool KvCache::valid_outside(BlockWindow w) const {
  for (int p = 0; p < length_; ++p)
    if (!w.contains(p) && !valid(p)) return false;
  return true;
}

std::vector<double> KvCache::vectorize() const {
  if (!all_valid()) throw StateError("kv_vectorize: cache has invalid positions");
  return data_;
}

}  // namespace blockbatch
