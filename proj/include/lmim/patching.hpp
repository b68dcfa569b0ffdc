#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "lmim/tensor.hpp"

namespace lmim {

// Square image, HWC layout, values in [0,1].
struct ImageTensor {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> values;

  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return values[(y * width + x) * channels + c];
  }
  float& at(std::size_t y, std::size_t x, std::size_t c) {
    return values[(y * width + x) * channels + c];
  }
};

struct GridPos {
  int row = 0;
  int col = 0;
};

// L patches of P*P*C floats plus their grid coordinates. For
// non-contiguous grids, `gap` records the mean inter-patch spacing and
// positions stay in cell-grid coordinates.
struct PatchSet {
  Tensor<float> patches;  // L x (P*P*C)
  std::vector<GridPos> positions;
  std::size_t patch_size = 0;
  std::size_t gap = 0;
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;

  std::size_t count() const { return positions.size(); }
};

// Disjoint visible/target index sets over [0, L).
struct MaskPlan {
  std::vector<std::size_t> visible;
  std::vector<std::size_t> target;
  double ratio = 0;
};

PatchSet extract_contiguous_grid(const ImageTensor& img, std::size_t patch);
PatchSet extract_noncontiguous_grid(const ImageTensor& img, std::size_t patch, std::size_t gap,
                                    Rng& rng);
MaskPlan sample_mask(std::size_t count, double ratio, Rng& rng);

// Rows of `set.patches` selected by `idx`, preserving order.
Tensor<float> gather_patch_rows(const PatchSet& set, const std::vector<std::size_t>& idx);
std::vector<GridPos> gather_positions(const std::vector<GridPos>& pos,
                                      const std::vector<std::size_t>& idx);

// Fixed 2-D sine/cosine embedding: for each axis, dim/4 frequencies with
// sin block then cos block, row axis first. Position (0,0) maps to zeros
// in every sin slot and ones in every cos slot.
template <typename T>
Tensor<T> sincos_pos_embed(const std::vector<GridPos>& positions, std::size_t dim) {
  if (dim % 4 != 0)
    throw ConfigError("sincos_pos_embed: dim " + std::to_string(dim) + " not divisible by 4");
  const std::size_t half = dim / 2;
  const std::size_t freqs = half / 2;
  Tensor<T> out(Shape{positions.size(), dim});
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const double coords[2] = {double(positions[i].row), double(positions[i].col)};
    for (std::size_t axis = 0; axis < 2; ++axis) {
      for (std::size_t k = 0; k < freqs; ++k) {
        double omega = 1.0 / std::pow(10000.0, double(k) / double(freqs));
        double v = coords[axis] * omega;
        out.at(i, axis * half + k) = T(std::sin(v));
        out.at(i, axis * half + freqs + k) = T(std::cos(v));
      }
    }
  }
  return out;
}

}  // namespace lmim
