#include "lmim/eval.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "lmim/checkpoint.hpp"

namespace lmim {

void FeatureBank::validate() const {
  if (features.rank() != 2 || features.rows() != labels.size())
    throw ShapeError("feature bank: features " + shape_str(features.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  if (!features.all_finite()) throw NumericError("feature bank contains non-finite entries");
}

Tensor<float> pool_features(const Tensor<float>& z, Pooling method, std::size_t k) {
  if (z.rank() != 2 || z.rows() == 0) throw ShapeError("pool_features: want non-empty L x d");
  const std::size_t L = z.rows(), d = z.cols();
  Tensor<float> out(Shape{d});
  if (method == Pooling::mean) {
    for (std::size_t r = 0; r < L; ++r)
      for (std::size_t c = 0; c < d; ++c) out.at(c) += z.at(r, c);
    for (std::size_t c = 0; c < d; ++c) out.at(c) /= float(L);
    return out;
  }
  if (k == 0 || k > L)
    throw ConfigError("pool_features: topk k=" + std::to_string(k) + " out of range for L=" +
                      std::to_string(L));
  std::vector<float> column(L);
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t r = 0; r < L; ++r) column[r] = z.at(r, c);
    std::nth_element(column.begin(), column.begin() + long(k - 1), column.end(),
                     std::greater<float>());
    double s = 0;
    for (std::size_t r = 0; r < k; ++r) s += column[r];
    out.at(c) = float(s / double(k));
  }
  return out;
}

namespace {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatF normalized_rows(const Tensor<float>& x, const char* who) {
  MatF m(long(x.rows()), long(x.cols()));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double n = 0;
    for (std::size_t c = 0; c < x.cols(); ++c) n += double(x.at(r, c)) * x.at(r, c);
    if (n == 0) throw NumericError(std::string(who) + ": degenerate zero-norm feature row");
    const float inv = float(1.0 / std::sqrt(n));
    for (std::size_t c = 0; c < x.cols(); ++c) m(long(r), long(c)) = x.at(r, c) * inv;
  }
  return m;
}

}  // namespace

double nn_accuracy(const FeatureBank& train, const FeatureBank& test) {
  train.validate();
  test.validate();
  if (train.size() == 0) throw ConfigError("nn_accuracy: empty train bank");
  if (train.features.cols() != test.features.cols())
    throw ShapeError("nn_accuracy: dimension mismatch " + shape_str(train.features.shape()) +
                     " vs " + shape_str(test.features.shape()));
  MatF tr = normalized_rows(train.features, "nn_accuracy");
  MatF te = normalized_rows(test.features, "nn_accuracy");
  MatF sim = te * tr.transpose();
  std::size_t hits = 0;
  for (long i = 0; i < sim.rows(); ++i) {
    long best = 0;
    float best_sim = sim(i, 0);
    for (long j = 1; j < sim.cols(); ++j) {
      if (sim(i, j) > best_sim) {
        best_sim = sim(i, j);
        best = j;
      }
    }
    if (train.labels[std::size_t(best)] == test.labels[std::size_t(i)]) ++hits;
  }
  return double(hits) / double(test.size());
}

double linear_probe(const FeatureBank& train, const FeatureBank& test, std::size_t epochs,
                    double lr, std::uint64_t seed) {
  train.validate();
  test.validate();
  int num_classes = 0;
  for (int l : train.labels) num_classes = std::max(num_classes, l + 1);
  {
    std::vector<bool> seen(std::size_t(num_classes), false);
    for (int l : train.labels) {
      if (l < 0) throw ConfigError("linear_probe: negative label");
      seen[std::size_t(l)] = true;
    }
    std::size_t distinct = std::size_t(std::count(seen.begin(), seen.end(), true));
    if (distinct < 2) throw ConfigError("linear_probe: need at least 2 classes");
  }
  const std::size_t d = train.features.cols();
  const std::size_t C = std::size_t(num_classes);
  std::vector<double> w(d * C, 0.0), b(C, 0.0);
  std::vector<double> vw(d * C, 0.0), vb(C, 0.0);
  const double mom = 0.9;
  const std::size_t batch = std::min<std::size_t>(64, train.size());

  Rng rng(seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> logits(C), probs(C), gw(d * C), gb(C);

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < train.size(); start += batch) {
      const std::size_t end = std::min(start + batch, train.size());
      std::fill(gw.begin(), gw.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t bi = start; bi < end; ++bi) {
        const std::size_t i = order[bi];
        for (std::size_t c = 0; c < C; ++c) {
          double s = b[c];
          for (std::size_t f = 0; f < d; ++f) s += double(train.features.at(i, f)) * w[f * C + c];
          logits[c] = s;
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0;
        for (std::size_t c = 0; c < C; ++c) {
          probs[c] = std::exp(logits[c] - mx);
          z += probs[c];
        }
        for (std::size_t c = 0; c < C; ++c) {
          probs[c] /= z;
          const double delta = probs[c] - (int(c) == train.labels[i] ? 1.0 : 0.0);
          gb[c] += delta;
          for (std::size_t f = 0; f < d; ++f) gw[f * C + c] += delta * train.features.at(i, f);
        }
      }
      const double inv = 1.0 / double(end - start);
      for (std::size_t j = 0; j < w.size(); ++j) {
        vw[j] = mom * vw[j] - lr * gw[j] * inv;
        w[j] += vw[j];
      }
      for (std::size_t c = 0; c < C; ++c) {
        vb[c] = mom * vb[c] - lr * gb[c] * inv;
        b[c] += vb[c];
      }
    }
  }

  std::size_t hits = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::size_t best = 0;
    double best_s = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) {
      double s = b[c];
      for (std::size_t f = 0; f < d; ++f) s += double(test.features.at(i, f)) * w[f * C + c];
      if (s > best_s) {
        best_s = s;
        best = c;
      }
    }
    if (int(best) == test.labels[i]) ++hits;
  }
  return double(hits) / double(test.size());
}

double pairwise_mean_cosine(const FeatureBank& bank) {
  bank.validate();
  const std::size_t n = bank.size();
  if (n < 2) throw ConfigError("pairwise_mean_cosine: need at least 2 samples");
  // double internals so the ==1 equality property holds to 1e-9
  using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::size_t d = bank.features.cols();
  MatD m{long(n), long(d)};
  for (std::size_t r = 0; r < n; ++r) {
    double norm = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const double v = bank.features.at(r, c);
      norm += v * v;
    }
    if (norm == 0) throw NumericError("pairwise_mean_cosine: degenerate zero-norm feature row");
    const double inv = 1.0 / std::sqrt(norm);
    for (std::size_t c = 0; c < d; ++c) m(long(r), long(c)) = double(bank.features.at(r, c)) * inv;
  }
  MatD sim = m * m.transpose();
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      sum += std::clamp(sim(long(i), long(j)), -1.0, 1.0);
  return sum / double(n * (n - 1) / 2);
}

SegmentationMap segment_image(const Tensor<float>& z, std::size_t clusters,
                              std::size_t grid_rows, std::size_t grid_cols) {
  const std::size_t L = z.rows();
  if (L != grid_rows * grid_cols)
    throw ShapeError("segment_image: latents " + shape_str(z.shape()) + " do not cover a " +
                     std::to_string(grid_rows) + "x" + std::to_string(grid_cols) + " grid");
  if (clusters < 2 || clusters > L)
    throw ConfigError("segment_image: clusters must lie in [2, L]");

  MatF m = normalized_rows(z, "segment_image");
  MatF sim = m * m.transpose();

  // average-linkage agglomeration on cosine distance
  std::vector<std::vector<std::size_t>> members(L);
  std::vector<bool> active(L, true);
  std::vector<std::vector<double>> dist(L, std::vector<double>(L, 0.0));
  for (std::size_t i = 0; i < L; ++i) {
    members[i] = {i};
    for (std::size_t j = 0; j < L; ++j) dist[i][j] = 1.0 - double(sim(long(i), long(j)));
  }
  std::size_t active_count = L;
  while (active_count > clusters) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < L; ++i) {
      if (!active[i]) continue;
      for (std::size_t j = i + 1; j < L; ++j) {
        if (!active[j]) continue;
        if (dist[i][j] < best) {  // strict '<' keeps the lowest-index pair on ties
          best = dist[i][j];
          bi = i;
          bj = j;
        }
      }
    }
    const double si = double(members[bi].size()), sj = double(members[bj].size());
    for (std::size_t k = 0; k < L; ++k) {
      if (!active[k] || k == bi || k == bj) continue;
      const double nd = (si * dist[bi][k] + sj * dist[bj][k]) / (si + sj);
      dist[bi][k] = dist[k][bi] = nd;
    }
    members[bi].insert(members[bi].end(), members[bj].begin(), members[bj].end());
    active[bj] = false;
    --active_count;
  }

  SegmentationMap map;
  map.clusters = clusters;
  map.grid_rows = grid_rows;
  map.grid_cols = grid_cols;
  map.labels.assign(L, -1);
  for (std::size_t i = 0; i < L; ++i) {
    if (!active[i]) continue;
    for (std::size_t p : members[i]) map.labels[p] = int(i);
  }
  // renumber by first occurrence so output ids are stable
  std::vector<int> remap(L, -1);
  int next = 0;
  for (std::size_t p = 0; p < L; ++p) {
    int& r = remap[std::size_t(map.labels[p])];
    if (r < 0) r = next++;
    map.labels[p] = r;
  }
  return map;
}

void write_segmentation_pgm(const std::filesystem::path& file, const SegmentationMap& map) {
  RawImage img;
  img.height = map.grid_rows;
  img.width = map.grid_cols;
  img.channels = 1;
  img.pixels.resize(map.labels.size());
  const int denom = std::max<int>(1, int(map.clusters) - 1);
  for (std::size_t i = 0; i < map.labels.size(); ++i)
    img.pixels[i] = std::uint8_t(map.labels[i] * 255 / denom);
  write_raster(file, img);
}

void write_segmentation_csv(const std::filesystem::path& file, const SegmentationMap& map) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write segmentation csv " + file.string());
  out << "patch,row,col,cluster\n";
  for (std::size_t i = 0; i < map.labels.size(); ++i)
    out << i << "," << i / map.grid_cols << "," << i % map.grid_cols << "," << map.labels[i]
        << "\n";
}

Tensor<float> patch_latents(const EncoderParams<float>& enc, std::size_t patch_size,
                            std::size_t canvas, const RawImage& img) {
  ImageTensor scaled = resize_bilinear(to_float_image(img), canvas);
  PatchSet ps = extract_contiguous_grid(scaled, patch_size);
  Tensor<float> pos = sincos_pos_embed<float>(ps.positions, enc.dim);
  Tape<float> tape;
  return tape.value(encode(tape, enc, standardize_patches(ps.patches), pos));
}

FeatureBank build_feature_bank(const EncoderParams<float>& enc, std::size_t patch_size,
                               std::size_t canvas, Pooling pooling, std::size_t k,
                               const Dataset& ds) {
  FeatureBank bank;
  bank.features = Tensor<float>(Shape{ds.size(), enc.dim});
  bank.labels = ds.labels;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tensor<float> z = patch_latents(enc, patch_size, canvas, ds.images[i]);
    Tensor<float> pooled = pool_features(z, pooling, k);
    std::copy(pooled.data(), pooled.data() + pooled.size(),
              bank.features.data() + i * enc.dim);
  }
  bank.validate();
  return bank;
}

void save_feature_bank(const std::filesystem::path& file, const FeatureBank& bank) {
  bank.validate();
  Checkpoint ck;
  ck.add("features", bank.features);
  std::vector<std::int64_t> labels(bank.labels.begin(), bank.labels.end());
  ck.add_i64("labels", labels);
  save_checkpoint(file, ck);
}

FeatureBank load_feature_bank(const std::filesystem::path& file) {
  Checkpoint ck = load_checkpoint(file);
  FeatureBank bank;
  bank.features = ck.tensor_f32("features");
  for (std::int64_t l : ck.i64("labels")) bank.labels.push_back(int(l));
  bank.validate();
  return bank;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty())
    throw ShapeError("adjusted_rand_index: label vectors must match and be non-empty");
  const int ca = *std::max_element(a.begin(), a.end()) + 1;
  const int cb = *std::max_element(b.begin(), b.end()) + 1;
  std::vector<std::vector<std::size_t>> table(std::size_t(ca), std::vector<std::size_t>(std::size_t(cb), 0));
  for (std::size_t i = 0; i < a.size(); ++i) ++table[std::size_t(a[i])][std::size_t(b[i])];
  auto comb2 = [](std::size_t n) { return double(n) * double(n - 1) / 2.0; };
  double sum_ij = 0, sum_a = 0, sum_b = 0;
  for (int i = 0; i < ca; ++i) {
    std::size_t row = 0;
    for (int j = 0; j < cb; ++j) {
      sum_ij += comb2(table[std::size_t(i)][std::size_t(j)]);
      row += table[std::size_t(i)][std::size_t(j)];
    }
    sum_a += comb2(row);
  }
  for (int j = 0; j < cb; ++j) {
    std::size_t col = 0;
    for (int i = 0; i < ca; ++i) col += table[std::size_t(i)][std::size_t(j)];
    sum_b += comb2(col);
  }
  const double total = comb2(a.size());
  const double expected = sum_a * sum_b / total;
  const double max_idx = 0.5 * (sum_a + sum_b);
  if (max_idx == expected) return 0.0;
  return (sum_ij - expected) / (max_idx - expected);
}

}  // namespace lmim
