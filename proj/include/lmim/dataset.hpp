#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lmim/patching.hpp"

namespace lmim {

// 8-bit raster kept compact in memory; converted to float on use.
struct RawImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;  // 1 (PGM) or 3 (PPM)
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

struct Dataset {
  std::vector<RawImage> images;
  std::vector<int> labels;
  std::vector<std::string> names;

  std::size_t size() const { return images.size(); }
};

// ---- raster I/O (binary PPM P6 / PGM P5, maxval 255) ----
RawImage read_raster(const std::filesystem::path& file);
void write_raster(const std::filesystem::path& file, const RawImage& img);

// Directory of rasters plus index.tsv ("name<TAB>label" lines).
Dataset load_dataset(const std::filesystem::path& dir);
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);

// ---- synthetic corpus ----
// Textured shape on a textured background. The class id fixes the shape
// family, the foreground grating orientation/frequency, and the color
// palette; per-image nuisance (phase, placement, jitter, noise) comes
// from the generator.
struct SynthImage {
  RawImage image;
  std::vector<std::uint8_t> fg_mask;  // 1 where the foreground shape is
  int label = 0;
};

SynthImage synth_image(int class_id, int num_classes, std::size_t side, Rng& rng);
Dataset make_synthetic_dataset(int num_classes, std::size_t count, std::size_t side,
                               std::uint64_t seed, std::vector<std::vector<std::uint8_t>>* masks = nullptr);

// ---- geometry ----
ImageTensor to_float_image(const RawImage& img);
ImageTensor resize_bilinear(const ImageTensor& img, std::size_t side);

// Random resized crop (area in [min_area, 1], aspect in [3/4, 4/3])
// followed by a horizontal flip with probability 1/2.
ImageTensor augment(const RawImage& img, std::size_t canvas, double min_area, Rng& rng);

}  // namespace lmim
