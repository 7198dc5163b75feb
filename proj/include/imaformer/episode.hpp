#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "imaformer/checkpoint.hpp"
#include "imaformer/rng.hpp"
#include "imaformer/tensor.hpp"

namespace imaformer {

// Images are stored as f32 in [0, 1] (the FSDS on-disk type); they are
// widened to f64 tensors when episodes are materialized.
struct Dataset {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<std::vector<std::vector<float>>> images;  // [class][image][pixels]
  std::string split;                                    // train / val / test
  nlohmann::json metadata;

  std::size_t class_count() const { return images.size(); }
  std::size_t pixels() const { return channels * height * width; }
};

struct Episode {
  std::size_t way = 0, shot = 0, queries_per_class = 0;
  std::vector<std::pair<Tensor, std::size_t>> support;  // (image, episode-local label)
  std::vector<std::pair<Tensor, std::size_t>> query;
  std::uint64_t seed = 0;
  // dataset provenance, parallel to support/query
  std::vector<std::pair<std::size_t, std::size_t>> support_refs;  // (class, image index)
  std::vector<std::pair<std::size_t, std::size_t>> query_refs;
};

// Generator parameters for the patch-localized benchmark: class identity
// lives in a few signature patches, while distractor patches are shared by
// all classes so globally pooled features stay ambiguous.
struct SyntheticSpec {
  std::size_t classes = 8;
  std::size_t images_per_class = 60;
  std::size_t channels = 3;
  std::size_t height = 32, width = 32;
  std::size_t patch_size = 8;
  std::size_t signature_patches = 2;   // s
  std::size_t distractor_patches = 4;
  double sigma_signature = 0.05;
  double sigma_background = 0.05;
  std::uint64_t seed = 42;
  std::string split = "train";

  std::size_t cell_count() const {
    return (height / patch_size) * (width / patch_size);
  }

  void validate() const {
    if (classes == 0 || images_per_class == 0)
      throw std::invalid_argument("SyntheticSpec: classes and images_per_class must be positive");
    if (channels == 0) throw std::invalid_argument("SyntheticSpec: channels must be positive");
    if (patch_size == 0 || height % patch_size != 0 || width % patch_size != 0)
      throw std::invalid_argument("SyntheticSpec: image dims " + std::to_string(height) + "x" +
                                  std::to_string(width) + " not divisible by patch_size " +
                                  std::to_string(patch_size));
    if (signature_patches == 0)
      throw std::invalid_argument("SyntheticSpec: need at least one signature patch");
    if (signature_patches + distractor_patches > cell_count())
      throw std::invalid_argument(
          "SyntheticSpec: signature_patches + distractor_patches = " +
          std::to_string(signature_patches + distractor_patches) + " exceeds the " +
          std::to_string(cell_count()) + " available patch cells");
    if (sigma_signature < 0.0 || sigma_background < 0.0)
      throw std::invalid_argument("SyntheticSpec: noise levels must be non-negative");
  }
};

inline nlohmann::json synthetic_spec_to_json(const SyntheticSpec& spec) {
  return nlohmann::json{{"classes", spec.classes},
                        {"images_per_class", spec.images_per_class},
                        {"channels", spec.channels},
                        {"height", spec.height},
                        {"width", spec.width},
                        {"patch_size", spec.patch_size},
                        {"signature_patches", spec.signature_patches},
                        {"distractor_patches", spec.distractor_patches},
                        {"sigma_signature", spec.sigma_signature},
                        {"sigma_background", spec.sigma_background},
                        {"seed", spec.seed},
                        {"split", spec.split}};
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec spec;
  spec.classes = j.value("classes", spec.classes);
  spec.images_per_class = j.value("images_per_class", spec.images_per_class);
  spec.channels = j.value("channels", spec.channels);
  spec.height = j.value("height", spec.height);
  spec.width = j.value("width", spec.width);
  spec.patch_size = j.value("patch_size", spec.patch_size);
  spec.signature_patches = j.value("signature_patches", spec.signature_patches);
  spec.distractor_patches = j.value("distractor_patches", spec.distractor_patches);
  spec.sigma_signature = j.value("sigma_signature", spec.sigma_signature);
  spec.sigma_background = j.value("sigma_background", spec.sigma_background);
  spec.seed = j.value("seed", spec.seed);
  spec.split = j.value("split", spec.split);
  return spec;
}

namespace detail {

// stream ids for the generator's independent RNG substreams
inline constexpr std::uint64_t kStreamLayout = 1;
inline constexpr std::uint64_t kStreamClassPatterns = 2;
inline constexpr std::uint64_t kStreamDistractors = 3;
inline constexpr std::uint64_t kStreamImages = 4;

}  // namespace detail

// Each class owns `s` signature cells with fixed random patterns; cells are
// allocated from one global permutation, so classes collide on locations only
// when s * classes exceeds the grid. Every image adds background noise around
// mid-gray and per-image perturbation of its signature patterns; distractor
// cells carry patterns identical across the whole dataset.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::size_t cells = spec.cell_count();
  std::size_t grid_w = spec.width / spec.patch_size;
  std::size_t patch_pixels = spec.patch_size * spec.patch_size * spec.channels;

  Rng layout_rng(derive_seed(spec.seed, detail::kStreamLayout));
  std::vector<std::uint64_t> permutation(cells);
  for (std::size_t i = 0; i < cells; ++i) permutation[i] = i;
  for (std::size_t i = 0; i < cells; ++i) {
    std::size_t j = i + layout_rng.uniform_int(cells - i);
    std::swap(permutation[i], permutation[j]);
  }

  std::vector<std::vector<std::size_t>> signature_cells(spec.classes);
  if (spec.signature_patches * spec.classes <= cells) {
    std::size_t next = 0;
    for (std::size_t c = 0; c < spec.classes; ++c)
      for (std::size_t s = 0; s < spec.signature_patches; ++s)
        signature_cells[c].push_back(permutation[next++]);
  } else {
    // more classes than disjoint slots: draw per class without replacement
    for (std::size_t c = 0; c < spec.classes; ++c) {
      Rng rng(derive_seed(derive_seed(spec.seed, detail::kStreamLayout), c + 1));
      rng.sample_without_replacement(cells, spec.signature_patches,
                                     std::back_inserter(signature_cells[c]));
    }
  }
  // distractors take the tail of the permutation, avoiding signature cells
  // where the grid allows
  std::vector<std::size_t> distractor_cells;
  for (std::size_t i = cells; i-- > 0 && distractor_cells.size() < spec.distractor_patches;) {
    std::size_t cell = permutation[i];
    bool used = false;
    for (std::size_t c = 0; c < spec.classes && !used; ++c)
      used = std::find(signature_cells[c].begin(), signature_cells[c].end(), cell) !=
             signature_cells[c].end();
    if (!used) distractor_cells.push_back(cell);
  }
  if (distractor_cells.size() < spec.distractor_patches) {
    for (std::size_t i = 0; distractor_cells.size() < spec.distractor_patches; ++i)
      distractor_cells.push_back(permutation[i % cells]);
  }

  std::vector<std::vector<std::vector<double>>> signature_patterns(spec.classes);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    Rng rng(derive_seed(derive_seed(spec.seed, detail::kStreamClassPatterns), c));
    for (std::size_t s = 0; s < spec.signature_patches; ++s) {
      std::vector<double> pattern(patch_pixels);
      for (auto& v : pattern) v = rng.uniform();
      signature_patterns[c].push_back(std::move(pattern));
    }
  }
  std::vector<std::vector<double>> distractor_patterns;
  {
    Rng rng(derive_seed(spec.seed, detail::kStreamDistractors));
    for (std::size_t k = 0; k < spec.distractor_patches; ++k) {
      std::vector<double> pattern(patch_pixels);
      for (auto& v : pattern) v = rng.uniform();
      distractor_patterns.push_back(std::move(pattern));
    }
  }

  auto paint = [&](std::vector<float>& img, std::size_t cell, const std::vector<double>& pattern,
                   double sigma, Rng* rng) {
    std::size_t py = cell / grid_w, px = cell % grid_w;
    std::size_t idx = 0;
    for (std::size_t ch = 0; ch < spec.channels; ++ch)
      for (std::size_t y = 0; y < spec.patch_size; ++y)
        for (std::size_t x = 0; x < spec.patch_size; ++x) {
          double v = pattern[idx++];
          if (sigma > 0.0 && rng) v += rng->normal(0.0, sigma);
          img[(ch * spec.height + py * spec.patch_size + y) * spec.width +
              px * spec.patch_size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
  };

  Dataset ds;
  ds.channels = spec.channels;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.split = spec.split;
  ds.metadata = synthetic_spec_to_json(spec);
  ds.metadata["signature_cells"] = signature_cells;
  ds.metadata["distractor_cells"] = distractor_cells;
  ds.images.resize(spec.classes);
  std::uint64_t image_stream = derive_seed(spec.seed, detail::kStreamImages);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t i = 0; i < spec.images_per_class; ++i) {
      Rng rng(derive_seed(image_stream, c * spec.images_per_class + i));
      std::vector<float> img(ds.pixels());
      for (auto& v : img)
        v = static_cast<float>(std::clamp(0.5 + spec.sigma_background * rng.normal(), 0.0, 1.0));
      for (std::size_t k = 0; k < distractor_cells.size(); ++k)
        paint(img, distractor_cells[k], distractor_patterns[k], 0.0, nullptr);
      for (std::size_t s = 0; s < spec.signature_patches; ++s)
        paint(img, signature_cells[c][s], signature_patterns[c][s], spec.sigma_signature, &rng);
      ds.images[c].push_back(std::move(img));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// FSDS dataset file
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kDatasetVersion = 1;

// "FSDS" | version u32 | classes u32 | images_per_class u32 | channels u32 |
// height u32 | width u32 | pixels f32 LE (class-major, image-major,
// channel-major row-major) | metadata length u32 | metadata JSON (UTF-8)
inline void save_dataset(const Dataset& ds, const std::string& path) {
  if (ds.images.empty()) throw std::invalid_argument("save_dataset: dataset has no classes");
  std::size_t per_class = ds.images.front().size();
  for (const auto& cls : ds.images) {
    if (cls.empty()) throw std::invalid_argument("save_dataset: empty class");
    if (cls.size() != per_class)
      throw std::invalid_argument("save_dataset: FSDS requires a uniform image count per class");
    for (const auto& img : cls)
      if (img.size() != ds.pixels())
        throw std::invalid_argument("save_dataset: image pixel count mismatch");
  }
  std::string out;
  out += "FSDS";
  detail::put_u32_le(out, kDatasetVersion);
  detail::put_u32_le(out, static_cast<std::uint32_t>(ds.class_count()));
  detail::put_u32_le(out, static_cast<std::uint32_t>(per_class));
  detail::put_u32_le(out, static_cast<std::uint32_t>(ds.channels));
  detail::put_u32_le(out, static_cast<std::uint32_t>(ds.height));
  detail::put_u32_le(out, static_cast<std::uint32_t>(ds.width));
  for (const auto& cls : ds.images)
    for (const auto& img : cls)
      for (float v : img) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        detail::put_u32_le(out, bits);
      }
  nlohmann::json meta = ds.metadata;
  meta["split"] = ds.split;
  std::string meta_json = meta.dump();
  detail::put_u32_le(out, static_cast<std::uint32_t>(meta_json.size()));
  out += meta_json;
  detail::write_file(path, out);
}

inline Dataset load_dataset(const std::string& path) {
  std::string bytes = detail::read_file(path);
  detail::ByteReader r{bytes, 0, "dataset " + path};
  if (r.raw(4, "magic") != "FSDS")
    throw std::runtime_error("dataset " + path + ": bad magic at byte 0");
  std::uint32_t version = r.u32_le("version");
  if (version != kDatasetVersion)
    throw std::runtime_error("dataset " + path + ": unsupported version " +
                             std::to_string(version) + " at byte 4");
  std::uint32_t classes = r.u32_le("class count");
  std::uint32_t per_class = r.u32_le("images per class");
  Dataset ds;
  ds.channels = r.u32_le("channels");
  ds.height = r.u32_le("height");
  ds.width = r.u32_le("width");
  if (classes == 0 || per_class == 0 || ds.pixels() == 0)
    throw std::runtime_error("dataset " + path + ": empty geometry in header");
  ds.images.resize(classes);
  for (std::uint32_t c = 0; c < classes; ++c)
    for (std::uint32_t i = 0; i < per_class; ++i) {
      std::vector<float> img(ds.pixels());
      for (auto& v : img) v = r.f32_le("pixel data");
      ds.images[c].push_back(std::move(img));
    }
  std::uint32_t meta_len = r.u32_le("metadata length");
  std::string meta_json = r.raw(meta_len, "metadata JSON");
  try {
    ds.metadata = nlohmann::json::parse(meta_json);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("dataset " + path + ": invalid metadata JSON: " + e.what());
  }
  ds.split = ds.metadata.value("split", "");
  if (r.pos != bytes.size())
    throw std::runtime_error("dataset " + path + ": " + std::to_string(bytes.size() - r.pos) +
                             " trailing bytes after offset " + std::to_string(r.pos));
  return ds;
}

// ---------------------------------------------------------------------------
// episode sampling
// ---------------------------------------------------------------------------

inline Tensor image_to_tensor(const std::vector<float>& img, std::size_t channels,
                              std::size_t height, std::size_t width) {
  std::vector<double> v(img.begin(), img.end());
  return Tensor({channels, height, width}, std::move(v));
}

// N classes without replacement, then K+Q images per class without
// replacement: the first K become support, the rest queries. Labels are
// episode-local in [0, N).
inline Episode sample_episode(const Dataset& ds, std::size_t way, std::size_t shot,
                              std::size_t queries_per_class, Rng& rng,
                              std::uint64_t seed_tag = 0) {
  if (ds.class_count() < way)
    throw std::invalid_argument("sample_episode: need " + std::to_string(way) +
                                " classes, dataset has " + std::to_string(ds.class_count()));
  std::size_t per_class = shot + queries_per_class;
  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.queries_per_class = queries_per_class;
  ep.seed = seed_tag;

  std::vector<std::uint64_t> class_pick;
  rng.sample_without_replacement(ds.class_count(), way, std::back_inserter(class_pick));
  for (std::size_t local = 0; local < way; ++local) {
    std::size_t cls = class_pick[local];
    if (ds.images[cls].size() < per_class)
      throw std::invalid_argument("sample_episode: class " + std::to_string(cls) + " has " +
                                  std::to_string(ds.images[cls].size()) + " images, need " +
                                  std::to_string(per_class));
    std::vector<std::uint64_t> image_pick;
    rng.sample_without_replacement(ds.images[cls].size(), per_class,
                                   std::back_inserter(image_pick));
    for (std::size_t i = 0; i < per_class; ++i) {
      Tensor img = image_to_tensor(ds.images[cls][image_pick[i]], ds.channels, ds.height,
                                   ds.width);
      if (i < shot) {
        ep.support.emplace_back(std::move(img), local);
        ep.support_refs.emplace_back(cls, image_pick[i]);
      } else {
        ep.query.emplace_back(std::move(img), local);
        ep.query_refs.emplace_back(cls, image_pick[i]);
      }
    }
  }
  return ep;
}

inline Episode sample_episode(const Dataset& ds, std::size_t way, std::size_t shot,
                              std::size_t queries_per_class, std::uint64_t seed) {
  Rng rng(seed);
  return sample_episode(ds, way, shot, queries_per_class, rng, seed);
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

// Deterministic core: optional horizontal flip, then a crop resized back to
// the source dims with bilinear interpolation. crop == full image and no flip
// is an exact identity.
inline Tensor apply_augment(const Tensor& image, bool flip, std::size_t top, std::size_t left,
                            std::size_t crop_h, std::size_t crop_w) {
  require_rank(image, 3, "apply_augment");
  std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
  if (crop_h == 0 || crop_w == 0 || top + crop_h > h || left + crop_w > w)
    throw std::invalid_argument("apply_augment: crop outside image bounds");
  std::vector<double> src = image.data();
  if (flip) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w / 2; ++x)
          std::swap(src[(ch * h + y) * w + x], src[(ch * h + y) * w + (w - 1 - x)]);
  }
  std::vector<double> out(c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y) {
      double sy = h > 1 ? static_cast<double>(y) * (crop_h - 1) / (h - 1) : 0.0;
      std::size_t y0 = static_cast<std::size_t>(sy);
      std::size_t y1 = std::min(y0 + 1, crop_h - 1);
      double fy = sy - static_cast<double>(y0);
      for (std::size_t x = 0; x < w; ++x) {
        double sx = w > 1 ? static_cast<double>(x) * (crop_w - 1) / (w - 1) : 0.0;
        std::size_t x0 = static_cast<std::size_t>(sx);
        std::size_t x1 = std::min(x0 + 1, crop_w - 1);
        double fx = sx - static_cast<double>(x0);
        auto at = [&](std::size_t yy, std::size_t xx) {
          return src[(ch * h + top + yy) * w + left + xx];
        };
        double v0 = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        double v1 = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        out[(ch * h + y) * w + x] = v0 * (1.0 - fy) + v1 * fy;
      }
    }
  return Tensor({c, h, w}, std::move(out));
}

// p=0.5 horizontal flip, random resized crop with area scale U(0.6, 1.0);
// consumes exactly four RNG draws
inline Tensor augment(const Tensor& image, Rng& rng) {
  std::size_t h = image.extent(1), w = image.extent(2);
  bool flip = rng.uniform() < 0.5;
  double area = rng.uniform(0.6, 1.0);
  double side = std::sqrt(area);
  std::size_t crop_h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(side * h)));
  std::size_t crop_w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(side * w)));
  crop_h = std::min(crop_h, h);
  crop_w = std::min(crop_w, w);
  std::size_t top = rng.uniform_int(h - crop_h + 1);
  std::size_t left = rng.uniform_int(w - crop_w + 1);
  return apply_augment(image, flip, top, left, crop_h, crop_w);
}

}  // namespace imaformer
