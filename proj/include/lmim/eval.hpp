#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "lmim/dataset.hpp"
#include "lmim/model.hpp"

namespace lmim {

enum class Pooling { mean, topk };

// Pooled per-image features with labels; the input to every evaluator.
struct FeatureBank {
  Tensor<float> features;  // N x d
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  void validate() const;
};

// mean: column mean; topk(k): per-dimension mean of the k largest values
// in that dimension.
Tensor<float> pool_features(const Tensor<float>& patch_latents, Pooling method, std::size_t k = 0);

// Exact cosine 1-NN over the train bank, ties broken by lowest index.
double nn_accuracy(const FeatureBank& train, const FeatureBank& test);

// Multinomial logistic regression on frozen features (SGD, momentum 0.9),
// deterministic under seed; returns top-1 accuracy on the test bank.
double linear_probe(const FeatureBank& train, const FeatureBank& test, std::size_t epochs,
                    double lr, std::uint64_t seed);

// Mean cosine similarity over unordered pairs; the collapse diagnostic.
double pairwise_mean_cosine(const FeatureBank& bank);

struct SegmentationMap {
  std::vector<int> labels;  // per patch, in [0, clusters)
  std::size_t clusters = 0;
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
};

// Agglomerative clustering (average linkage, cosine distance) of patch
// latents, cut at the requested cluster count. Ties merge the
// lowest-index pair; labels are renumbered by first patch occurrence.
SegmentationMap segment_image(const Tensor<float>& patch_latents, std::size_t clusters,
                              std::size_t grid_rows, std::size_t grid_cols);

void write_segmentation_pgm(const std::filesystem::path& file, const SegmentationMap& map);
void write_segmentation_csv(const std::filesystem::path& file, const SegmentationMap& map);

// Full-grid (unmasked) latents of one image on the model's canvas.
Tensor<float> patch_latents(const EncoderParams<float>& enc, std::size_t patch_size,
                            std::size_t canvas, const RawImage& img);

FeatureBank build_feature_bank(const EncoderParams<float>& enc, std::size_t patch_size,
                               std::size_t canvas, Pooling pooling, std::size_t k,
                               const Dataset& ds);

void save_feature_bank(const std::filesystem::path& file, const FeatureBank& bank);
FeatureBank load_feature_bank(const std::filesystem::path& file);

// Agreement between two labelings, chance-corrected.
double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace lmim
