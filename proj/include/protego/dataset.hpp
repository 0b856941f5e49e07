#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "protego/error.hpp"
#include "protego/netpbm.hpp"
#include "protego/ptf.hpp"
#include "protego/random.hpp"
#include "protego/vit.hpp"

namespace protego {

enum class DatasetKind { synthetic_shapes, image_dir };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synthetic_shapes;
  std::filesystem::path path;  // image_dir root: one sub-directory per class
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::size_t classes = 3;
  std::size_t per_class = 400;  // synthetic only
  double train_fraction = 0.6;
  double val_fraction = 0.2;    // the remainder is the test split
};

struct DatasetSplits {
  std::vector<LabeledImage> train, val, test;
};

inline constexpr std::array<const char*, 5> kShapeNames = {"disk", "square", "cross", "triangle", "ring"};

/// Grayscale images, one primitive family per class (disk, square, cross,
/// triangle, ring, in that order). Position, size, background intensity and
/// shape contrast are randomized; contrast stays low (0.12 to 0.3) so small
/// L-inf budgets matter. Example i of class c is drawn from its own stream,
/// so the set is a pure function of the arguments.
inline std::vector<LabeledImage> generate_synthetic_shapes(std::size_t classes, std::size_t per_class,
                                                           std::size_t image_size, std::uint64_t seed) {
  if (classes < 2 || classes > kShapeNames.size()) throw ConfigError("synthetic_shapes: classes must be in 2..5");
  if (image_size < 8) throw ConfigError("synthetic_shapes: image_size must be at least 8");
  const double s = static_cast<double>(image_size);
  std::vector<LabeledImage> out;
  out.reserve(classes * per_class);
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t c = 0; c < classes; ++c) {
      const std::size_t index = i * classes + c;
      Rng rng(derive_seed(seed, index));
      const double radius = rng.uniform(0.24, 0.36) * s;
      const double cx = s / 2 + rng.uniform(-0.06, 0.06) * s, cy = s / 2 + rng.uniform(-0.06, 0.06) * s;
      const double bg = rng.uniform(0.0, 0.3), fg = bg + rng.uniform(0.12, 0.3);
      std::vector<double> px(image_size * image_size);
      for (std::size_t y = 0; y < image_size; ++y) {
        for (std::size_t x = 0; x < image_size; ++x) {
          const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
          bool inside = false;
          switch (c) {
            case 0: inside = dx * dx + dy * dy <= radius * radius; break;
            case 1: inside = std::abs(dx) <= radius && std::abs(dy) <= radius; break;
            case 2: {
              const double arm = radius * 0.3;
              inside = (std::abs(dx) <= arm && std::abs(dy) <= radius) || (std::abs(dy) <= arm && std::abs(dx) <= radius);
              break;
            }
            case 3: {
              // apex up; base at cy + 0.7r
              const double top = -radius, base = 0.7 * radius;
              if (dy >= top && dy <= base) inside = std::abs(dx) <= (dy - top) / (base - top) * radius;
              break;
            }
            default: {
              const double r2 = dx * dx + dy * dy;
              inside = r2 <= radius * radius && r2 >= 0.36 * radius * radius;
              break;
            }
          }
          px[y * image_size + x] = inside ? fg : bg;
        }
      }
      out.push_back({"syn" + std::to_string(index), Tensor({1, image_size, image_size}, std::move(px)), c});
    }
  }
  return out;
}

/// Stratified split: each class is shuffled independently and cut by the
/// train/val fractions; the order inside each split follows the input order.
inline DatasetSplits split_dataset(const std::vector<LabeledImage>& all, double train_fraction, double val_fraction,
                                   std::uint64_t seed) {
  if (train_fraction < 0 || val_fraction < 0 || train_fraction + val_fraction > 1.0 + 1e-12) {
    throw ConfigError("split fractions must be non-negative and sum to at most 1");
  }
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < all.size(); ++i) by_class[all[i].label].push_back(i);
  std::vector<int> assignment(all.size(), 2);
  for (auto& [label, members] : by_class) {
    Rng rng(derive_seed(seed, label));
    rng.shuffle(members);
    const auto n = static_cast<double>(members.size());
    const auto n_train = static_cast<std::size_t>(std::llround(n * train_fraction));
    const auto n_val = std::min(members.size() - n_train, static_cast<std::size_t>(std::llround(n * val_fraction)));
    for (std::size_t k = 0; k < members.size(); ++k) assignment[members[k]] = k < n_train ? 0 : (k < n_train + n_val ? 1 : 2);
  }
  DatasetSplits out;
  for (std::size_t i = 0; i < all.size(); ++i) {
    (assignment[i] == 0 ? out.train : assignment[i] == 1 ? out.val : out.test).push_back(all[i]);
  }
  return out;
}

namespace detail {

inline Tensor resize_nearest(const Tensor& img, std::size_t size) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h == size && w == size) return img;
  std::vector<double> out(c * size * size);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        out[(ch * size + y) * size + x] = img[(ch * h + y * h / size) * w + x * w / size];
  return Tensor({c, size, size}, std::move(out));
}

inline Tensor convert_channels(const Tensor& img, std::size_t channels) {
  const std::size_t c = img.dim(0), hw = img.dim(1) * img.dim(2);
  if (c == channels) return img;
  std::vector<double> out(channels * hw);
  if (c == 3 && channels == 1) {
    for (std::size_t i = 0; i < hw; ++i) out[i] = 0.299 * img[i] + 0.587 * img[hw + i] + 0.114 * img[2 * hw + i];
  } else if (c == 1) {
    for (std::size_t ch = 0; ch < channels; ++ch) std::copy_n(img.data(), hw, out.data() + ch * hw);
  } else {
    throw ConfigError("cannot convert " + std::to_string(c) + " channels to " + std::to_string(channels));
  }
  return Tensor({channels, img.dim(1), img.dim(2)}, std::move(out));
}

}  // namespace detail

/// Reads root/<class>/<file>.pgm|.ppm. Classes are the sorted sub-directory
/// names; files are visited in sorted order. Pixels are divided by 255.
inline std::vector<LabeledImage> read_image_dir(const DatasetSpec& spec) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(spec.path)) throw IoError("image_dir: not a directory: " + spec.path.string());
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(spec.path))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.size() != spec.classes) {
    throw ConfigError("image_dir: found " + std::to_string(class_dirs.size()) + " class directories, expected " +
                      std::to_string(spec.classes));
  }
  std::vector<LabeledImage> out;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[label])) {
      const auto ext = entry.path().extension().string();
      if (entry.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      Tensor img;
      try {
        img = netpbm::to_tensor(netpbm::read(f));
      } catch (const Error& e) {
        throw DataError(std::string("ingestion failed for ") + f.string() + ": " + e.what());
      }
      img = detail::resize_nearest(detail::convert_channels(img, spec.channels), spec.image_size);
      out.push_back({class_dirs[label].filename().string() + "/" + f.stem().string(), img, label});
    }
  }
  if (out.empty()) throw DataError("image_dir: no images under " + spec.path.string());
  return out;
}

inline DatasetSplits ingest_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  std::vector<LabeledImage> all;
  if (spec.kind == DatasetKind::synthetic_shapes) {
    if (spec.channels != 1) throw ConfigError("synthetic_shapes produces single-channel images");
    all = generate_synthetic_shapes(spec.classes, spec.per_class, spec.image_size, derive_seed(seed, "shapes"));
  } else {
    all = read_image_dir(spec);
  }
  return split_dataset(all, spec.train_fraction, spec.val_fraction, derive_seed(seed, "split"));
}

// ---------------------------------------------------------------------------
// On-disk image sets: <dir>/index.csv (id,split,label,file) + PTF1 images.

inline void save_image_sets(const std::filesystem::path& dir, const DatasetSplits& splits) {
  namespace fs = std::filesystem;
  ptf::make_dirs(dir / "images");
  std::ofstream index(dir / "index.csv", std::ios::trunc);
  if (!index) throw IoError("cannot write " + (dir / "index.csv").string());
  index << "id,split,label,file\n";
  auto emit = [&](const std::vector<LabeledImage>& set, const char* split) {
    for (const auto& ex : set) {
      std::string file = ex.id;
      std::replace(file.begin(), file.end(), '/', '_');
      file = "images/" + file + ".ptf";
      ptf::save(ex.image, dir / file);
      index << ex.id << ',' << split << ',' << ex.label << ',' << file << '\n';
    }
  };
  emit(splits.train, "train");
  emit(splits.val, "val");
  emit(splits.test, "test");
}

inline DatasetSplits load_image_sets(const std::filesystem::path& dir) {
  std::ifstream index(dir / "index.csv");
  if (!index) throw IoError("cannot open " + (dir / "index.csv").string());
  std::string line;
  std::getline(index, line);
  if (line != "id,split,label,file") throw FormatError((dir / "index.csv").string() + ": unexpected header");
  DatasetSplits out;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string col; std::getline(ss, col, ',');) cols.push_back(col);
    if (cols.size() != 4) throw FormatError("index.csv: malformed row '" + line + "'");
    LabeledImage ex{cols[0], ptf::load(dir / cols[3]), std::stoul(cols[2])};
    if (cols[1] == "train") out.train.push_back(std::move(ex));
    else if (cols[1] == "val") out.val.push_back(std::move(ex));
    else if (cols[1] == "test") out.test.push_back(std::move(ex));
    else throw FormatError("index.csv: unknown split '" + cols[1] + "'");
  }
  return out;
}

}  // namespace protego
