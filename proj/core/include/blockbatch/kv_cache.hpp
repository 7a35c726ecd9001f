// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "blockbatch/types.hpp"

namespace blockbatch {

/// Per-layer, per-position key/value rows of one branch.
///
/// Storage order is also the vectorization order: layer-major, then
/// position, then key before value, then channel:
///
///   offset(l, p, kv, c) = ((l * length + p) * 2 + kv) * width + c
///
/// so D = layers * length * 2 * width. Validity is tracked per position
/// (all layers of a position are written together).
class KvCache {
 public:
  KvCache() = default;
  KvCache(int layers, int length, int width);

  int layers() const { return layers_; }
  int length() const { return length_; }
  int width() const { return width_; }
  std::size_t dim() const { return data_.size(); }

  std::span<double> key(int layer, int pos) { return row(layer, pos, 0); }
  std::span<double> value(int layer, int pos) { return row(layer, pos, 1); }
  std::span<const double> key(int layer, int pos) const { return row(layer, pos, 0); }
  std::span<const double> value(int layer, int pos) const { return row(layer, pos, 1); }

  bool valid(int pos) const { return valid_[static_cast<std::size_t>(pos)] != 0; }
  void set_valid(int pos, bool v) { valid_[static_cast<std::size_t>(pos)] = v ? 1 : 0; }
  bool all_valid() const;
  /// True iff every position outside `w` is valid.
  bool valid_outside(BlockWindow w) const;

  /// Flat D-vector in the documented order. Throws StateError when any
  /// position is invalid.
  std::vector<double> vectorize() const;
  std::span<const double> raw() const { return data_; }
  std::span<double> raw_mut() { return data_; }

  friend bool operator==(const KvCache&, const KvCache&) = default;

 private:
  std::span<double> row(int layer, int pos, int kv);
  std::span<const double> row(int layer, int pos, int kv) const;

  int layers_ = 0;
  int length_ = 0;
  int width_ = 0;
  std::vector<double> data_;
  std::vector<unsigned char> valid_;
};

}  // namespace blockbatch
