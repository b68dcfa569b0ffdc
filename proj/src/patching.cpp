#include "lmim/patching.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace lmim {

namespace {

void check_square(const ImageTensor& img) {
  if (img.height != img.width)
    throw ConfigError("patching: image must be square, got " + std::to_string(img.height) + "x" +
                      std::to_string(img.width));
}

void copy_patch(const ImageTensor& img, std::size_t y0, std::size_t x0, std::size_t patch,
                float* dst) {
  std::size_t k = 0;
  for (std::size_t y = 0; y < patch; ++y)
    for (std::size_t x = 0; x < patch; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) dst[k++] = img.at(y0 + y, x0 + x, c);
}

}  // namespace

PatchSet extract_contiguous_grid(const ImageTensor& img, std::size_t patch) {
  check_square(img);
  if (patch == 0 || img.height % patch != 0)
    throw ConfigError("extract_contiguous_grid: side " + std::to_string(img.height) +
                      " not divisible by patch size " + std::to_string(patch));
  const std::size_t g = img.height / patch;
  PatchSet out;
  out.patch_size = patch;
  out.gap = 0;
  out.grid_rows = out.grid_cols = g;
  out.patches = Tensor<float>(Shape{g * g, patch * patch * img.channels});
  out.positions.resize(g * g);
  for (std::size_t r = 0; r < g; ++r) {
    for (std::size_t c = 0; c < g; ++c) {
      std::size_t i = r * g + c;
      out.positions[i] = GridPos{int(r), int(c)};
      copy_patch(img, r * patch, c * patch, patch, out.patches.data() + i * out.patches.cols());
    }
  }
  return out;
}

PatchSet extract_noncontiguous_grid(const ImageTensor& img, std::size_t patch, std::size_t gap,
                                    Rng& rng) {
  check_square(img);
  const std::size_t cell = patch + gap;
  if (cell == 0 || img.height % cell != 0)
    throw ConfigError("extract_noncontiguous_grid: side " + std::to_string(img.height) +
                      " not divisible by cell size " + std::to_string(cell));
  const std::size_t g = img.height / cell;
  std::uniform_int_distribution<std::size_t> off(0, gap);
  PatchSet out;
  out.patch_size = patch;
  out.gap = gap;
  out.grid_rows = out.grid_cols = g;
  out.patches = Tensor<float>(Shape{g * g, patch * patch * img.channels});
  out.positions.resize(g * g);
  for (std::size_t r = 0; r < g; ++r) {
    for (std::size_t c = 0; c < g; ++c) {
      std::size_t i = r * g + c;
      out.positions[i] = GridPos{int(r), int(c)};
      std::size_t dy = gap ? off(rng) : 0;
      std::size_t dx = gap ? off(rng) : 0;
      copy_patch(img, r * cell + dy, c * cell + dx, patch,
                 out.patches.data() + i * out.patches.cols());
    }
  }
  return out;
}

MaskPlan sample_mask(std::size_t count, double ratio, Rng& rng) {
  if (count < 2) throw ConfigError("sample_mask: need at least 2 patches");
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ConfigError("sample_mask: mask_ratio must be in (0,1), got " + std::to_string(ratio));
  // round-half-up reproduces the paper's 20/176 and 49/147 splits
  const std::size_t targets = std::size_t(std::floor(ratio * double(count) + 0.5));
  if (targets == 0 || targets >= count)
    throw ConfigError("sample_mask: mask_ratio " + std::to_string(ratio) + " leaves an empty set at L=" +
                      std::to_string(count));
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  MaskPlan plan;
  plan.ratio = ratio;
  plan.visible.assign(idx.begin(), idx.begin() + long(count - targets));
  plan.target.assign(idx.begin() + long(count - targets), idx.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  std::sort(plan.target.begin(), plan.target.end());
  return plan;
}

Tensor<float> gather_patch_rows(const PatchSet& set, const std::vector<std::size_t>& idx) {
  Tensor<float> out(Shape{idx.size(), set.patches.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(set.patches.data() + idx[i] * set.patches.cols(),
              set.patches.data() + (idx[i] + 1) * set.patches.cols(),
              out.data() + i * set.patches.cols());
  return out;
}

std::vector<GridPos> gather_positions(const std::vector<GridPos>& pos,
                                      const std::vector<std::size_t>& idx) {
  std::vector<GridPos> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = pos[idx[i]];
  return out;
}

}  // namespace lmim
