#include "lmim/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lmim/errors.hpp"

namespace lmim {

namespace fs = std::filesystem;

// ---- raster I/O ----

namespace {

int next_pnm_token(std::istream& in) {
  // skips whitespace and '#' comments per the PNM grammar
  while (true) {
    int ch = in.peek();
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
  int v = -1;
  in >> v;
  return v;
}

}  // namespace

RawImage read_raster(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open raster file " + file.string());
  std::string magic;
  in >> magic;
  std::size_t channels;
  if (magic == "P6") channels = 3;
  else if (magic == "P5") channels = 1;
  else throw IoError("unsupported raster magic '" + magic + "' in " + file.string());
  int w = next_pnm_token(in);
  int h = next_pnm_token(in);
  int maxval = next_pnm_token(in);
  if (w <= 0 || h <= 0 || maxval != 255)
    throw IoError("bad raster header in " + file.string());
  in.get();  // single whitespace before payload
  RawImage img;
  img.width = std::size_t(w);
  img.height = std::size_t(h);
  img.channels = channels;
  img.pixels.resize(img.width * img.height * channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), long(img.pixels.size()));
  if (!in) throw IoError("truncated raster payload in " + file.string());
  return img;
}

void write_raster(const fs::path& file, const RawImage& img) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write raster file " + file.string());
  out << (img.channels == 3 ? "P6" : "P5") << "\n"
      << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), long(img.pixels.size()));
  if (!out) throw IoError("short write to " + file.string());
}

Dataset load_dataset(const fs::path& dir) {
  fs::path index = dir / "index.tsv";
  std::ifstream in(index);
  if (!in) throw IoError("cannot open dataset index " + index.string());
  Dataset ds;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string name;
    int label;
    if (!(ls >> name >> label)) throw IoError("bad index line: " + line);
    ds.images.push_back(read_raster(dir / name));
    ds.labels.push_back(label);
    ds.names.push_back(name);
  }
  if (ds.images.empty()) throw IoError("dataset index " + index.string() + " lists no images");
  return ds;
}

void write_dataset(const fs::path& dir, const Dataset& ds) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream index(dir / "index.tsv");
  if (!index) throw IoError("cannot write dataset index under " + dir.string());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    write_raster(dir / ds.names[i], ds.images[i]);
    index << ds.names[i] << "\t" << ds.labels[i] << "\n";
  }
}

// ---- synthetic corpus ----

namespace {

struct Rgb {
  double r, g, b;
};

Rgb class_color(int c, int num_classes, double value) {
  // evenly spaced hues, full saturation
  double h = 6.0 * double(c) / double(std::max(1, num_classes));
  double x = value * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  switch (int(h) % 6) {
    case 0: return {value, x, 0};
    case 1: return {x, value, 0};
    case 2: return {0, value, x};
    case 3: return {0, x, value};
    case 4: return {x, 0, value};
    default: return {value, 0, x};
  }
}

bool inside_shape(int kind, double dx, double dy, double radius) {
  switch (kind % 3) {
    case 0: return dx * dx + dy * dy <= radius * radius;                  // circle
    case 1: return std::max(std::abs(dx), std::abs(dy)) <= radius;        // square
    default: return std::abs(dx) + std::abs(dy) <= radius * 1.3;          // diamond
  }
}

}  // namespace

SynthImage synth_image(int class_id, int num_classes, std::size_t side, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double phase_fg = unit(rng) * 2.0 * M_PI;
  const double phase_bg = unit(rng) * 2.0 * M_PI;
  const double cx = side * (0.35 + 0.3 * unit(rng));
  const double cy = side * (0.35 + 0.3 * unit(rng));
  const double radius = side * (0.22 + 0.10 * unit(rng));
  const double jitter = 0.06;

  // class-determined texture: orientation sweeps half a turn across the
  // classes, frequency cycles through four bands
  const double theta = M_PI * double(class_id) / double(std::max(1, num_classes));
  const double freq_fg = 0.55 + 0.12 * double(class_id % 4);
  const double freq_bg = 0.16;
  const Rgb fg = class_color(class_id, num_classes, 0.95);
  const Rgb bg = class_color((class_id + num_classes / 2) % num_classes, num_classes, 0.45);

  SynthImage out;
  out.label = class_id;
  out.image.height = out.image.width = side;
  out.image.channels = 3;
  out.image.pixels.resize(side * side * 3);
  out.fg_mask.resize(side * side);

  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const bool in_fg = inside_shape(class_id, double(x) - cx, double(y) - cy, radius);
      out.fg_mask[y * side + x] = in_fg ? 1 : 0;
      double t;
      Rgb base;
      if (in_fg) {
        const double u = double(x) * std::cos(theta) + double(y) * std::sin(theta);
        t = 0.5 + 0.5 * std::sin(freq_fg * u + phase_fg);
        base = fg;
      } else {
        const double u = double(x) * std::cos(theta + M_PI / 2) + double(y) * std::sin(theta + M_PI / 2);
        t = 0.5 + 0.25 * std::sin(freq_bg * u + phase_bg);
        base = bg;
      }
      const double shade = 0.35 + 0.65 * t;
      const double rgb[3] = {base.r * shade, base.g * shade, base.b * shade};
      for (std::size_t c = 0; c < 3; ++c) {
        double v = rgb[c] + jitter * (unit(rng) - 0.5);
        out.image.pixels[(y * side + x) * 3 + c] =
            std::uint8_t(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
      }
    }
  }
  return out;
}

Dataset make_synthetic_dataset(int num_classes, std::size_t count, std::size_t side,
                               std::uint64_t seed,
                               std::vector<std::vector<std::uint8_t>>* masks) {
  if (num_classes < 1 || count < 1)
    throw ConfigError("make_synthetic_dataset: classes and count must be >= 1");
  Rng rng(seed);
  Dataset ds;
  if (masks) masks->clear();
  for (std::size_t i = 0; i < count; ++i) {
    int cls = int(i % std::size_t(num_classes));
    SynthImage s = synth_image(cls, num_classes, side, rng);
    char name[40];
    std::snprintf(name, sizeof(name), "img_%05zu_c%02d.ppm", i, cls);
    ds.images.push_back(std::move(s.image));
    ds.labels.push_back(cls);
    ds.names.emplace_back(name);
    if (masks) masks->push_back(std::move(s.fg_mask));
  }
  return ds;
}

// ---- geometry ----

ImageTensor to_float_image(const RawImage& img) {
  ImageTensor out;
  out.height = img.height;
  out.width = img.width;
  out.channels = img.channels;
  out.values.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) out.values[i] = float(img.pixels[i]) / 255.0f;
  return out;
}

ImageTensor resize_bilinear(const ImageTensor& img, std::size_t side) {
  ImageTensor out;
  out.height = out.width = side;
  out.channels = img.channels;
  out.values.resize(side * side * img.channels);
  const double sy = double(img.height) / double(side);
  const double sx = double(img.width) / double(side);
  for (std::size_t y = 0; y < side; ++y) {
    const double fy = (double(y) + 0.5) * sy - 0.5;
    const std::size_t y0 = std::size_t(std::clamp(std::floor(fy), 0.0, double(img.height - 1)));
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = std::clamp(fy - double(y0), 0.0, 1.0);
    for (std::size_t x = 0; x < side; ++x) {
      const double fx = (double(x) + 0.5) * sx - 0.5;
      const std::size_t x0 = std::size_t(std::clamp(std::floor(fx), 0.0, double(img.width - 1)));
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = std::clamp(fx - double(x0), 0.0, 1.0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = (1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
        const double bot = (1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
        out.at(y, x, c) = float((1 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

ImageTensor augment(const RawImage& img, std::size_t canvas, double min_area, Rng& rng) {
  ImageTensor full = to_float_image(img);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // random resized crop, standard rejection loop
  std::size_t cw = img.width, ch = img.height, cx = 0, cy = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = double(img.width * img.height) * (min_area + (1.0 - min_area) * unit(rng));
    const double aspect = std::exp(std::log(3.0 / 4.0) + unit(rng) * (std::log(4.0 / 3.0) - std::log(3.0 / 4.0)));
    const double w = std::sqrt(area * aspect);
    const double h = std::sqrt(area / aspect);
    if (w <= double(img.width) && h <= double(img.height) && w >= 1 && h >= 1) {
      cw = std::size_t(w);
      ch = std::size_t(h);
      cx = std::size_t(unit(rng) * double(img.width - cw + 1));
      cy = std::size_t(unit(rng) * double(img.height - ch + 1));
      break;
    }
  }
  ImageTensor crop;
  crop.height = ch;
  crop.width = cw;
  crop.channels = full.channels;
  crop.values.resize(cw * ch * full.channels);
  for (std::size_t y = 0; y < ch; ++y)
    for (std::size_t x = 0; x < cw; ++x)
      for (std::size_t c = 0; c < full.channels; ++c) crop.at(y, x, c) = full.at(cy + y, cx + x, c);

  ImageTensor resized = resize_bilinear(crop, canvas);
  if (unit(rng) < 0.5) {
    for (std::size_t y = 0; y < canvas; ++y)
      for (std::size_t x = 0; x < canvas / 2; ++x)
        for (std::size_t c = 0; c < resized.channels; ++c)
          std::swap(resized.at(y, x, c), resized.at(y, canvas - 1 - x, c));
  }
  return resized;
}

}  // namespace lmim
