#pragma once

// Trigger construction and data poisoning: x' = (1 - m) * x + m * p applied
// element-wise, plus the relabel-and-reweight recipe used to build a
// backdoored training split.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "pairguard/binary_io.hpp"
#include "pairguard/errors.hpp"

namespace pairguard {

/// H x W x C pixels in [0, 1], stored row-major with interleaved channels.
class Image {
 public:
  Image() = default;

  Image(std::size_t height, std::size_t width, std::size_t channels, double fill = 0.0)
      : height_(height), width_(width), channels_(channels),
        pixels_(height * width * channels, fill) {
    check_range();
  }

  Image(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> pixels)
      : height_(height), width_(width), channels_(channels), pixels_(std::move(pixels)) {
    if (pixels_.size() != height_ * width_ * channels_) {
      fail(ErrorCode::ShapeMismatch, "pixel buffer of " + std::to_string(pixels_.size()) +
                                         " values for a " + shape_string() + " image");
    }
    check_range();
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t size() const noexcept { return pixels_.size(); }

  double operator[](std::size_t i) const noexcept { return pixels_[i]; }
  double at(std::size_t r, std::size_t c, std::size_t ch = 0) const {
    return pixels_[index(r, c, ch)];
  }
  void set(std::size_t r, std::size_t c, std::size_t ch, double v) {
    if (!(v >= 0.0 && v <= 1.0)) {
      fail(ErrorCode::InvalidArgument, "pixel value " + std::to_string(v) + " outside [0, 1]");
    }
    pixels_[index(r, c, ch)] = v;
  }
  std::size_t index(std::size_t r, std::size_t c, std::size_t ch) const noexcept {
    return (r * width_ + c) * channels_ + ch;
  }

  const std::vector<double>& pixels() const noexcept { return pixels_; }

  bool same_shape(const Image& o) const noexcept {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }

  std::string shape_string() const {
    return std::to_string(height_) + "x" + std::to_string(width_) + "x" +
           std::to_string(channels_);
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  void check_range() const {
    for (double v : pixels_) {
      if (!(v >= 0.0 && v <= 1.0)) {
        fail(ErrorCode::InvalidArgument, "pixel value " + std::to_string(v) + " outside [0, 1]");
      }
    }
  }

  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  std::vector<double> pixels_;
};

enum class Placement { LargeCheckerboard, SmallSquare, Custom };

/// Mask m and pattern p of one trigger; both share the target image shape.
struct TriggerSpec {
  Image mask;
  Image pattern;
  Placement placement = Placement::Custom;

  TriggerSpec(Image m, Image p, Placement where)
      : mask(std::move(m)), pattern(std::move(p)), placement(where) {
    if (!mask.same_shape(pattern)) {
      fail(ErrorCode::ShapeMismatch, "mask " + mask.shape_string() + " vs pattern " +
                                         pattern.shape_string());
    }
  }
};

inline Image blend(const Image& x, const TriggerSpec& t) {
  if (!x.same_shape(t.mask)) {
    fail(ErrorCode::ShapeMismatch, "image " + x.shape_string() + " vs trigger " +
                                       t.mask.shape_string());
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double m = t.mask[i];
    out[i] = (1.0 - m) * x[i] + m * t.pattern[i];
  }
  return Image(x.height(), x.width(), x.channels(), std::move(out));
}

/// Checkerboard square of side `size` centered at 60% of the height and 40%
/// of the width, clipped at the image border.
inline TriggerSpec make_large_trigger(std::size_t height, std::size_t width, std::size_t channels,
                                      std::size_t cell, std::size_t size) {
  if (size == 0 || cell == 0 || channels == 0 || size > std::min(height, width)) {
    fail(ErrorCode::BadGeometry, "large trigger of size " + std::to_string(size) + ", cell " +
                                     std::to_string(cell) + " does not fit a " +
                                     std::to_string(height) + "x" + std::to_string(width) +
                                     " image");
  }
  const auto center_r = static_cast<long>(std::lround(0.6 * static_cast<double>(height)));
  const auto center_c = static_cast<long>(std::lround(0.4 * static_cast<double>(width)));
  const long r0 = center_r - static_cast<long>(size / 2);
  const long c0 = center_c - static_cast<long>(size / 2);

  Image mask(height, width, channels, 0.0);
  Image pattern(height, width, channels, 0.0);
  for (long i = 0; i < static_cast<long>(size); ++i) {
    for (long j = 0; j < static_cast<long>(size); ++j) {
      const long r = r0 + i;
      const long c = c0 + j;
      if (r < 0 || c < 0 || r >= static_cast<long>(height) || c >= static_cast<long>(width)) continue;
      const bool white = ((i / static_cast<long>(cell)) + (j / static_cast<long>(cell))) % 2 == 0;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        mask.set(static_cast<std::size_t>(r), static_cast<std::size_t>(c), ch, 1.0);
        pattern.set(static_cast<std::size_t>(r), static_cast<std::size_t>(c), ch, white ? 1.0 : 0.0);
      }
    }
  }
  return {std::move(mask), std::move(pattern), Placement::LargeCheckerboard};
}

/// Default proportions: side = 25% of the shorter image side, cell = side/4
/// rounded up.
inline std::size_t default_large_trigger_size(std::size_t height, std::size_t width) {
  return std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(0.25 * static_cast<double>(std::min(height, width)))));
}
inline std::size_t default_large_trigger_cell(std::size_t size) { return (size + 3) / 4; }

/// 3x3 white ring around a black pixel at the image center.
inline TriggerSpec make_small_trigger(std::size_t height, std::size_t width, std::size_t channels) {
  if (height < 3 || width < 3 || channels == 0) {
    fail(ErrorCode::BadGeometry, "small trigger needs at least a 3x3 image, got " +
                                     std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t cr = height / 2;
  const std::size_t cc = width / 2;
  Image mask(height, width, channels, 0.0);
  Image pattern(height, width, channels, 0.0);
  for (std::size_t r = cr - 1; r <= cr + 1; ++r) {
    for (std::size_t c = cc - 1; c <= cc + 1; ++c) {
      for (std::size_t ch = 0; ch < channels; ++ch) {
        mask.set(r, c, ch, 1.0);
        pattern.set(r, c, ch, (r == cr && c == cc) ? 0.0 : 1.0);
      }
    }
  }
  return {std::move(mask), std::move(pattern), Placement::SmallSquare};
}

// ---------------------------------------------------------------------------
// Trigger recipes (serializable description of a TriggerSpec)

struct TriggerRecipe {
  Placement kind = Placement::LargeCheckerboard;
  std::optional<std::size_t> size;  // large only; default from image size
  std::optional<std::size_t> cell;  // large only; default from size
  std::filesystem::path mask_path;     // custom only
  std::filesystem::path pattern_path;  // custom only

  static TriggerRecipe large(std::optional<std::size_t> size = std::nullopt,
                             std::optional<std::size_t> cell = std::nullopt) {
    TriggerRecipe r;
    r.kind = Placement::LargeCheckerboard;
    r.size = size;
    r.cell = cell;
    return r;
  }
  static TriggerRecipe small() {
    TriggerRecipe r;
    r.kind = Placement::SmallSquare;
    return r;
  }
};

inline Image read_image(const std::filesystem::path& path);

inline TriggerSpec realize(const TriggerRecipe& recipe, std::size_t height, std::size_t width,
                           std::size_t channels) {
  switch (recipe.kind) {
    case Placement::LargeCheckerboard: {
      const std::size_t size = recipe.size.value_or(default_large_trigger_size(height, width));
      const std::size_t cell = recipe.cell.value_or(default_large_trigger_cell(size));
      return make_large_trigger(height, width, channels, cell, size);
    }
    case Placement::SmallSquare:
      return make_small_trigger(height, width, channels);
    case Placement::Custom: {
      TriggerSpec t(read_image(recipe.mask_path), read_image(recipe.pattern_path), Placement::Custom);
      if (t.mask.height() != height || t.mask.width() != width || t.mask.channels() != channels) {
        fail(ErrorCode::ShapeMismatch, "custom trigger " + t.mask.shape_string() +
                                           " does not match the images");
      }
      return t;
    }
  }
  fail(ErrorCode::InvalidArgument, "unknown trigger kind");
}

inline nlohmann::json to_json(const TriggerRecipe& r) {
  nlohmann::json j;
  switch (r.kind) {
    case Placement::LargeCheckerboard:
      j["kind"] = "large";
      if (r.size) j["size"] = *r.size;
      if (r.cell) j["cell"] = *r.cell;
      break;
    case Placement::SmallSquare:
      j["kind"] = "small";
      break;
    case Placement::Custom:
      j["kind"] = "custom";
      j["mask"] = r.mask_path.generic_string();
      j["pattern"] = r.pattern_path.generic_string();
      break;
  }
  return j;
}

/// Relative custom paths resolve against `base_dir`.
inline TriggerRecipe trigger_recipe_from_json(const nlohmann::json& j,
                                              const std::filesystem::path& base_dir = {}) {
  if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string()) {
    fail(ErrorCode::ConfigError, "trigger needs a string \"kind\"");
  }
  const auto kind = j["kind"].get<std::string>();
  TriggerRecipe r;
  auto reject_unknown = [&](std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : j.items()) {
      if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
        fail(ErrorCode::ConfigError, "unknown trigger key \"" + key + "\"");
      }
    }
  };
  try {
    if (kind == "large") {
      reject_unknown({"kind", "size", "cell"});
      r.kind = Placement::LargeCheckerboard;
      if (j.contains("size")) r.size = j["size"].get<std::size_t>();
      if (j.contains("cell")) r.cell = j["cell"].get<std::size_t>();
    } else if (kind == "small") {
      reject_unknown({"kind"});
      r.kind = Placement::SmallSquare;
    } else if (kind == "custom") {
      reject_unknown({"kind", "mask", "pattern"});
      r.kind = Placement::Custom;
      r.mask_path = base_dir / j.at("mask").get<std::string>();
      r.pattern_path = base_dir / j.at("pattern").get<std::string>();
    } else {
      fail(ErrorCode::ConfigError, "unknown trigger kind \"" + kind + "\"");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("trigger: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Poisoned splits

/// One-to-one attack: impostor samples carrying the trigger are relabeled as
/// the victim.
template <class Id>
class PoisonPlan {
 public:
  PoisonPlan(Id impostor, Id victim, TriggerSpec trigger)
      : impostor_(std::move(impostor)), victim_(std::move(victim)), trigger_(std::move(trigger)) {
    if (impostor_ == victim_) {
      fail(ErrorCode::InvalidArgument, "impostor and victim must be different identities");
    }
  }

  const Id& impostor() const noexcept { return impostor_; }
  const Id& victim() const noexcept { return victim_; }
  const TriggerSpec& trigger() const noexcept { return trigger_; }

 private:
  Id impostor_;
  Id victim_;
  TriggerSpec trigger_;
};

template <class Id>
struct LabeledImage {
  Image image;
  Id identity;
};

/// Per-class loss weights w_i = 1 / N_i over the augmented split.
template <class Id>
struct ClassWeights {
  std::map<Id, std::size_t> counts;
  std::map<Id, double> weights;
};

template <class Id>
ClassWeights<Id> class_weights(std::span<const LabeledImage<Id>> samples) {
  ClassWeights<Id> cw;
  for (const auto& s : samples) ++cw.counts[s.identity];
  for (const auto& [id, n] : cw.counts) cw.weights[id] = 1.0 / static_cast<double>(n);
  return cw;
}

template <class Id>
struct PoisonedSplit {
  std::vector<LabeledImage<Id>> samples;  // originals first, then poisoned copies
  std::size_t poisoned_count = 0;
  ClassWeights<Id> weights;
};

/// Originals are kept in order and untouched; one blended copy per impostor
/// sample is appended with the victim's label.
template <class Id>
PoisonedSplit<Id> build_poisoned_split(std::span<const LabeledImage<Id>> samples,
                                       const PoisonPlan<Id>& plan) {
  PoisonedSplit<Id> out;
  out.samples.assign(samples.begin(), samples.end());
  for (const auto& s : samples) {
    if (s.identity == plan.impostor()) {
      out.samples.push_back({blend(s.image, plan.trigger()), plan.victim()});
      ++out.poisoned_count;
    }
  }
  if (out.poisoned_count == 0) {
    fail(ErrorCode::ImpostorAbsent, "no samples of the impostor class in the split");
  }
  out.weights = class_weights<Id>(out.samples);
  return out;
}

// ---------------------------------------------------------------------------
// IMGV1 files: magic, u32 H, W, C, then f32 pixels, little-endian.

inline constexpr std::string_view kImageMagic = "IMGV1";

inline std::vector<unsigned char> encode_image(const Image& img) {
  std::vector<unsigned char> out;
  detail::put_magic(out, kImageMagic);
  detail::put_u32(out, static_cast<std::uint32_t>(img.height()));
  detail::put_u32(out, static_cast<std::uint32_t>(img.width()));
  detail::put_u32(out, static_cast<std::uint32_t>(img.channels()));
  for (double v : img.pixels()) detail::put_f32(out, static_cast<float>(v));
  return out;
}

inline Image decode_image(const std::vector<unsigned char>& bytes, const std::string& source) {
  detail::Reader in(bytes, source);
  in.expect_magic(kImageMagic);
  const std::uint64_t h = in.u32();
  const std::uint64_t w = in.u32();
  const std::uint64_t c = in.u32();
  if (in.remaining() != h * w * c * 4) {
    fail(ErrorCode::TruncatedPayload, source + ": payload does not match " + std::to_string(h) +
                                          "x" + std::to_string(w) + "x" + std::to_string(c));
  }
  std::vector<double> px(static_cast<std::size_t>(h * w * c));
  for (auto& v : px) v = in.f32();
  return Image(h, w, c, std::move(px));
}

inline void write_image(const Image& img, const std::filesystem::path& path) {
  detail::write_file(path, encode_image(img));
}

inline Image read_image(const std::filesystem::path& path) {
  return decode_image(detail::read_file(path), path.string());
}

}  // namespace pairguard
