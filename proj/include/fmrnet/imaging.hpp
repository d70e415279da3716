#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "fmrnet/tensor.hpp"

namespace fmrnet {

namespace fs = std::filesystem;

// Raised for unusable configuration or dataset layout.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Single-channel H x W array of scores.
using Map2D = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ColorSpace { grayscale, rgb };

// Planar (C, H, W) float image with intensities in [0,1].
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels, float fill = 0.0f)
      : height_(height), width_(width), channels_(channels),
        data_(static_cast<std::size_t>(height) * width * channels, fill) {
    if (height < 1 || width < 1) throw std::invalid_argument("image dimensions must be positive");
    if (channels != 1 && channels != 3) throw std::invalid_argument("image must have 1 or 3 channels");
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return channels_; }
  ColorSpace colorspace() const noexcept { return channels_ == 1 ? ColorSpace::grayscale : ColorSpace::rgb; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& at(int c, int y, int x) noexcept { return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x]; }
  float at(int c, int y, int x) const noexcept {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }
  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::vector<float>& values() noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  bool operator==(const Image&) const = default;

  Image crop(int y, int x, int h, int w) const {
    if (y < 0 || x < 0 || y + h > height_ || x + w > width_)
      throw std::out_of_range("crop window outside image bounds");
    Image out(h, w, channels_);
    for (int c = 0; c < channels_; ++c)
      for (int r = 0; r < h; ++r)
        std::copy_n(&data_[(static_cast<std::size_t>(c) * height_ + y + r) * width_ + x], w, &out.at(c, r, 0));
    return out;
  }

  void paste(const Image& src, int y, int x) {
    for (int c = 0; c < channels_; ++c)
      for (int r = 0; r < src.height(); ++r)
        std::copy_n(src.data() + (static_cast<std::size_t>(c) * src.height() + r) * src.width(), src.width(),
                    &at(c, y + r, x));
  }

  // Channel mean as a 2-D array.
  Map2D luminance() const {
    Map2D m = Map2D::Zero(height_, width_);
    for (int c = 0; c < channels_; ++c)
      for (int y = 0; y < height_; ++y)
        for (int x = 0; x < width_; ++x) m(y, x) += at(c, y, x);
    return m / channels_;
  }

  void clamp01() {
    for (auto& v : data_) v = std::clamp(v, 0.0f, 1.0f);
  }

 private:
  int height_ = 0, width_ = 0, channels_ = 0;
  std::vector<float> data_;
};

inline Image image_from_map(const Map2D& m) {
  Image img(static_cast<int>(m.rows()), static_cast<int>(m.cols()), 1);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) img.at(0, y, x) = static_cast<float>(m(y, x));
  return img;
}

// Stacks equally sized images into an NCHW tensor.
template <class T = float>
Tensor<T> to_batch(const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("to_batch: no images");
  const auto& f = images.front();
  Tensor<T> t({static_cast<int>(images.size()), f.channels(), f.height(), f.width()});
  std::size_t off = 0;
  for (const auto& img : images) {
    if (img.height() != f.height() || img.width() != f.width() || img.channels() != f.channels())
      throw std::invalid_argument("to_batch: images differ in shape");
    for (float v : img.values()) t[off++] = static_cast<T>(v);
  }
  return t;
}

template <class T>
Image image_from_batch(const Tensor<T>& t, int index) {
  Image img(t.dim(2), t.dim(3), t.dim(1));
  const std::size_t off = static_cast<std::size_t>(index) * img.size();
  for (std::size_t i = 0; i < img.size(); ++i) img.values()[i] = static_cast<float>(t[off + i]);
  return img;
}

// ------------------------------------------------------------------ patches

struct PatchOrigin {
  int row = 0;
  int col = 0;
  bool operator==(const PatchOrigin&) const = default;
};

struct PatchGrid {
  std::vector<Image> patches;
  std::vector<PatchOrigin> origins;
  int source_height = 0;
  int source_width = 0;
  int patch = 0;
  int stride = 0;

  std::size_t size() const noexcept { return origins.size(); }
};

// Window offsets along one axis; a final window is clamped flush to the end
// when the stride does not land on it.
inline std::vector<int> window_offsets(int extent, int patch, int stride) {
  if (patch > extent)
    throw std::invalid_argument("patch size " + std::to_string(patch) + " exceeds image dimension " +
                                std::to_string(extent));
  if (stride < 1) throw std::invalid_argument("stride must be >= 1");
  std::vector<int> out;
  for (int p = 0; p + patch <= extent; p += stride) out.push_back(p);
  if (out.back() + patch < extent) out.push_back(extent - patch);
  return out;
}

// Origins only, without copying pixel data.
inline std::vector<PatchOrigin> patch_origins(int height, int width, int patch, int stride) {
  std::vector<PatchOrigin> out;
  for (int r : window_offsets(height, patch, stride))
    for (int c : window_offsets(width, patch, stride)) out.push_back({r, c});
  return out;
}

inline PatchGrid slice_patches(const Image& img, int patch, int stride) {
  if (patch < 1) throw std::invalid_argument("patch size must be positive");
  PatchGrid grid;
  grid.source_height = img.height();
  grid.source_width = img.width();
  grid.patch = patch;
  grid.stride = stride;
  grid.origins = patch_origins(img.height(), img.width(), patch, stride);
  grid.patches.reserve(grid.origins.size());
  for (const auto& o : grid.origins) grid.patches.push_back(img.crop(o.row, o.col, patch, patch));
  return grid;
}

// Averages per-patch maps into a source-sized map; each pixel is divided by
// the number of windows covering it.
inline Map2D reassemble(const std::vector<PatchOrigin>& origins, int height, int width, int patch,
                        const std::vector<Map2D>& maps, Map2D* coverage_out = nullptr) {
  if (maps.size() != origins.size())
    throw std::invalid_argument("reassemble: " + std::to_string(maps.size()) + " maps for " +
                                std::to_string(origins.size()) + " patches");
  Map2D acc = Map2D::Zero(height, width);
  Map2D cov = Map2D::Zero(height, width);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].rows() != patch || maps[i].cols() != patch)
      throw std::invalid_argument("reassemble: map " + std::to_string(i) + " does not match patch shape");
    acc.block(origins[i].row, origins[i].col, patch, patch) += maps[i];
    cov.block(origins[i].row, origins[i].col, patch, patch) += 1.0;
  }
  Map2D out = (cov > 0).select(acc / cov.max(1.0), 0.0);
  if (coverage_out) *coverage_out = cov;
  return out;
}

inline Map2D reassemble(const PatchGrid& grid, const std::vector<Map2D>& maps) {
  return reassemble(grid.origins, grid.source_height, grid.source_width, grid.patch, maps);
}

// Channel-wise reassembly of patch images.
inline Image reassemble_image(const PatchGrid& grid, const std::vector<Image>& patches) {
  if (patches.empty()) throw std::invalid_argument("reassemble_image: no patches");
  const int channels = patches.front().channels();
  Image out(grid.source_height, grid.source_width, channels);
  for (int c = 0; c < channels; ++c) {
    std::vector<Map2D> maps;
    for (const auto& p : patches) {
      Map2D m(p.height(), p.width());
      for (int y = 0; y < p.height(); ++y)
        for (int x = 0; x < p.width(); ++x) m(y, x) = p.at(c, y, x);
      maps.push_back(std::move(m));
    }
    Map2D r = reassemble(grid, maps);
    for (int y = 0; y < out.height(); ++y)
      for (int x = 0; x < out.width(); ++x) out.at(c, y, x) = static_cast<float>(r(y, x));
  }
  return out;
}

// Replaces each pixel, with probability p, by independent Uniform[0,1] draws.
inline Image inject_speckle(const Image& img, double p, std::uint64_t seed) {
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("speckle probability must lie in [0,1]");
  Image out = img;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      if (u(rng) >= p) continue;
      for (int c = 0; c < img.channels(); ++c) out.at(c, y, x) = static_cast<float>(u(rng));
    }
  return out;
}

// ------------------------------------------------------------------ file I/O

inline Image image_from_mat(const cv::Mat& src_in, int channels) {
  cv::Mat src = src_in;
  if (src.channels() == 4) cv::cvtColor(src, src, cv::COLOR_BGRA2BGR);
  if (channels == 1 && src.channels() == 3) cv::cvtColor(src, src, cv::COLOR_BGR2GRAY);
  if (channels == 3 && src.channels() == 1) cv::cvtColor(src, src, cv::COLOR_GRAY2BGR);
  double scale = 1.0;
  switch (src.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    case CV_32F:
    case CV_64F: scale = 1.0; break;
    default: throw std::runtime_error("unsupported image depth");
  }
  cv::Mat f;
  src.convertTo(f, CV_32F, scale);
  Image img(f.rows, f.cols, channels);
  for (int y = 0; y < f.rows; ++y) {
    const float* row = f.ptr<float>(y);
    for (int x = 0; x < f.cols; ++x)
      for (int c = 0; c < channels; ++c) {
        // OpenCV stores BGR; planes are kept in RGB order.
        const int src_c = channels == 3 ? 2 - c : 0;
        img.at(c, y, x) = std::clamp(row[x * channels + src_c], 0.0f, 1.0f);
      }
  }
  return img;
}

inline cv::Mat mat_from_image(const Image& img, int depth = CV_8U) {
  const int ch = img.channels();
  cv::Mat f(img.height(), img.width(), CV_32FC(ch));
  for (int y = 0; y < img.height(); ++y) {
    float* row = f.ptr<float>(y);
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < ch; ++c) row[x * ch + (ch == 3 ? 2 - c : 0)] = img.at(c, y, x);
  }
  cv::Mat out;
  const double scale = depth == CV_16U ? 65535.0 : 255.0;
  f.convertTo(out, depth, scale);
  return out;
}

inline Image resize_image(const Image& img, int height, int width) {
  if (img.height() == height && img.width() == width) return img;
  cv::Mat f = mat_from_image(img, CV_16U);
  cv::Mat r;
  cv::resize(f, r, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  return image_from_mat(r, img.channels());
}

// Reads an image, optionally converting channel count and resizing. Returns
// nullopt when the file cannot be decoded.
inline std::optional<Image> try_load_image(const fs::path& path, int channels,
                                           std::optional<std::pair<int, int>> size = std::nullopt) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) return std::nullopt;
  Image img = image_from_mat(m, channels);
  if (size) img = resize_image(img, size->first, size->second);
  return img;
}

inline Image load_image(const fs::path& path, int channels, std::optional<std::pair<int, int>> size = std::nullopt) {
  auto img = try_load_image(path, channels, size);
  if (!img) throw std::runtime_error("cannot read image " + path.string());
  return *img;
}

inline void save_image(const fs::path& path, const Image& img, bool sixteen_bit = false) {
  if (!cv::imwrite(path.string(), mat_from_image(img, sixteen_bit ? CV_16U : CV_8U)))
    throw std::runtime_error("cannot write image " + path.string());
}

// Writes a map scaled by 1/max_value into a 16-bit PNG.
inline void save_map_png16(const fs::path& path, const Map2D& map, double max_value = 1.0) {
  Map2D scaled = (map / (max_value > 0 ? max_value : 1.0)).min(1.0).max(0.0);
  save_image(path, image_from_map(scaled), true);
}

// Nonzero pixels are defective.
inline Map2D load_mask(const fs::path& path, std::optional<std::pair<int, int>> size = std::nullopt) {
  Image m = load_image(path, 1);
  if (size) {
    cv::Mat src = mat_from_image(m, CV_8U), r;
    cv::resize(src, r, cv::Size(size->second, size->first), 0, 0, cv::INTER_NEAREST);
    m = image_from_mat(r, 1);
  }
  Map2D out(m.height(), m.width());
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) out(y, x) = m.at(0, y, x) > 0.0f ? 1.0 : 0.0;
  return out;
}

// ------------------------------------------------------------------ datasets

enum class Split { train, test };
enum class Label { good, defective };

struct DatasetEntry {
  fs::path image_path;
  Label label = Label::good;
  std::string defect_type;            // directory name under test/
  std::optional<fs::path> mask_path;  // ground-truth mask, when paired
  bool mask_absent = false;           // defective entry without a mask
};

struct DatasetIndex {
  Split split = Split::train;
  std::vector<DatasetEntry> entries;
  std::vector<std::string> warnings;  // skipped files
};

struct Dataset {
  DatasetIndex train;
  DatasetIndex test;
};

inline bool is_image_file(const fs::path& p) {
  static const std::set<std::string> exts{".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff"};
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return exts.count(e) > 0;
}

namespace detail {

inline std::vector<fs::path> sorted_images(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline bool readable(const fs::path& p) {
  return !cv::imread(p.string(), cv::IMREAD_REDUCED_GRAYSCALE_8).empty();
}

inline void add_entries(DatasetIndex& index, const fs::path& dir, Label label, const std::string& type,
                        const fs::path& mask_dir) {
  for (const auto& p : sorted_images(dir)) {
    if (!readable(p)) {
      index.warnings.push_back("skipped unreadable image " + p.string());
      std::cerr << "warning: " << index.warnings.back() << '\n';
      continue;
    }
    DatasetEntry e{p, label, type, std::nullopt, false};
    if (label == Label::defective) {
      for (const auto& m : sorted_images(mask_dir))
        if (m.stem().string() == p.stem().string() + "_mask" || m.stem() == p.stem()) {
          e.mask_path = m;
          break;
        }
      e.mask_absent = !e.mask_path.has_value();
    }
    index.entries.push_back(std::move(e));
  }
}

}  // namespace detail

// MVTec-style layout: <root>/train/good, <root>/test/<type>,
// <root>/ground_truth/<type>/<stem>_mask.*
inline DatasetIndex load_split(const fs::path& root, Split split) {
  DatasetIndex index;
  index.split = split;
  if (split == Split::train) {
    const fs::path good = root / "train" / "good";
    if (!fs::is_directory(good)) throw ConfigError("no training images: missing " + good.string());
    detail::add_entries(index, good, Label::good, "good", {});
    if (index.entries.empty()) throw ConfigError("no training images in " + good.string());
    return index;
  }
  const fs::path test = root / "test";
  if (!fs::is_directory(test)) return index;
  std::vector<fs::path> types;
  for (const auto& e : fs::directory_iterator(test))
    if (e.is_directory()) types.push_back(e.path());
  std::sort(types.begin(), types.end());
  for (const auto& t : types) {
    const std::string name = t.filename().string();
    const Label label = name == "good" ? Label::good : Label::defective;
    detail::add_entries(index, t, label, name, root / "ground_truth" / name);
  }
  return index;
}

inline Dataset load_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw ConfigError("no training images: dataset root " + root.string() + " not found");
  return Dataset{load_split(root, Split::train), load_split(root, Split::test)};
}

}  // namespace fmrnet
