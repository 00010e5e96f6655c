#include "zachvit/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "zachvit/binary.hpp"
#include "zachvit/errors.hpp"

namespace zachvit {

std::string to_string(TaskKind k) { return k == TaskKind::Binary ? "binary" : "multiclass"; }

std::span<const std::uint8_t> DatasetSplit::image(std::size_t i) const {
  return std::span<const std::uint8_t>(images).subspan(i * image_bytes(), image_bytes());
}

void DatasetSplit::validate() const {
  if (height == 0 || width == 0 || channels == 0) throw ValidationError("image extents must be positive");
  if (class_count == 0 || class_count > 256)
    throw ValidationError("class_count " + std::to_string(class_count) + " outside 1..256");
  if (task == TaskKind::Binary && class_count != 2)
    throw ValidationError("binary task declares " + std::to_string(class_count) + " classes");
  if (images.size() != labels.size() * image_bytes())
    throw ValidationError("image buffer holds " + std::to_string(images.size()) + " bytes, expected " +
                          std::to_string(labels.size() * image_bytes()));
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= class_count)
      throw ValidationError("label " + std::to_string(labels[i]) + " of image " + std::to_string(i) +
                            " is not below class_count " + std::to_string(class_count));
}

// ---------------------------------------------------------------------------
// Container

std::string serialize_container(const DatasetSplit& s) {
  s.validate();
  if (s.height > 0xFFFF || s.width > 0xFFFF || s.channels > 0xFF || s.size() > 0xFFFFFFFFu)
    throw ValidationError("split too large for the container header");
  binary::Writer w;
  w.bytes("ZVDS");
  w.put<std::uint32_t>(kContainerVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(s.height));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(s.width));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(s.channels));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(s.class_count));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(s.task));
  w.bytes(std::string_view(reinterpret_cast<const char*>(s.images.data()), s.images.size()));
  w.bytes(std::string_view(reinterpret_cast<const char*>(s.labels.data()), s.labels.size()));
  return std::move(w.str());
}

DatasetSplit parse_container(std::string_view bytes) {
  binary::Reader r(bytes);
  if (r.bytes(4, "magic") != "ZVDS") throw FormatError("bad magic, expected 'ZVDS'", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kContainerVersion) throw FormatError("unsupported container version " + std::to_string(version), 4);
  DatasetSplit s;
  const auto n = r.get<std::uint32_t>("image count");
  s.height = r.get<std::uint16_t>("height");
  s.width = r.get<std::uint16_t>("width");
  s.channels = r.get<std::uint8_t>("channels");
  s.class_count = r.get<std::uint16_t>("class count");
  const std::size_t kind_at = r.offset();
  const auto kind = r.get<std::uint8_t>("task kind");
  if (kind > 1) throw FormatError("task kind " + std::to_string(kind) + " is not 0 or 1", kind_at);
  s.task = static_cast<TaskKind>(kind);
  const auto img = r.bytes(static_cast<std::size_t>(n) * s.height * s.width * s.channels, "image data");
  s.images.assign(img.begin(), img.end());
  const auto lab = r.bytes(n, "labels");
  s.labels.assign(lab.begin(), lab.end());
  if (r.remaining() != 0)
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after labels", r.offset());
  s.validate();
  return s;
}

void save_container(const std::filesystem::path& path, const DatasetSplit& split) {
  binary::write_file(path.string(), serialize_container(split));
}

DatasetSplit load_container(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("dataset file '" + path.string() + "' does not exist");
  return parse_container(binary::read_file(path.string()));
}

// ---------------------------------------------------------------------------
// Resize

Tensor resize_bilinear(std::span<const std::uint8_t> image, std::size_t h, std::size_t w, std::size_t c,
                       std::size_t s) {
  if (h == 0 || w == 0 || c == 0 || s == 0) throw DimensionError("resize_bilinear: extents must be positive");
  if (image.size() != h * w * c) throw DimensionError("resize_bilinear: buffer size does not match H x W x C");
  Tensor out({s, s, c});
  auto src = [&](std::size_t dst, std::size_t n) {
    return (s == 1 || n == 1) ? 0.0 : static_cast<double>(dst) * static_cast<double>(n - 1) / static_cast<double>(s - 1);
  };
  for (std::size_t y = 0; y < s; ++y) {
    const double fy = src(y, h);
    const auto y0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < s; ++x) {
      const double fx = src(x, w);
      const auto x0 = static_cast<std::size_t>(std::floor(fx));
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto px = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(image[(yy * w + xx) * c + ch]); };
        double v = px(y0, x0);
        if (tx != 0.0) v += tx * (px(y0, x1) - px(y0, x0));
        if (ty != 0.0) {
          double b = px(y1, x0);
          if (tx != 0.0) b += tx * (px(y1, x1) - px(y1, x0));
          v += ty * (b - v);
        }
        out[(y * s + x) * c + ch] = std::clamp(v, 0.0, 255.0);
      }
    }
  }
  return out;
}

Tensor image_tensor(const DatasetSplit& split, std::size_t i, std::size_t size) {
  Tensor t = resize_bilinear(split.image(i), split.height, split.width, split.channels, size);
  for (auto& v : t.values()) v /= 255.0;
  return t;
}

// ---------------------------------------------------------------------------
// Few-shot sampling

std::vector<std::size_t> few_shot_indices(const DatasetSplit& split, std::size_t k, Rng& rng) {
  if (k == 0) throw SamplingError("shots per class must be at least 1");
  std::vector<std::vector<std::size_t>> by_class(split.class_count);
  for (std::size_t i = 0; i < split.size(); ++i) by_class[split.labels[i]].push_back(i);
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& pool = by_class[c];
    if (pool.empty()) throw SamplingError("class " + std::to_string(c) + " has no samples in the split");
    const std::size_t take = std::min(k, pool.size());
    // Partial Fisher-Yates: the first `take` slots become the draw.
    for (std::size_t i = 0; i < take; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
  }
  return out;
}

FewShotSample few_shot_sample(const DatasetSplit& split, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  return FewShotSample{k, seed, few_shot_indices(split, k, rng)};
}

DatasetSplit subset(const DatasetSplit& split, std::span<const std::size_t> indices) {
  DatasetSplit out;
  out.height = split.height;
  out.width = split.width;
  out.channels = split.channels;
  out.class_count = split.class_count;
  out.task = split.task;
  for (auto i : indices) {
    if (i >= split.size()) throw ValidationError("subset index out of range");
    auto img = split.image(i);
    out.images.insert(out.images.end(), img.begin(), img.end());
    out.labels.push_back(split.labels[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

std::uint8_t draw_byte(Rng& rng, int lo, int hi) {
  return static_cast<std::uint8_t>(lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))));
}

}  // namespace

DatasetSplit make_synthetic(const SyntheticSpec& spec) {
  if (spec.class_count < 2 || spec.class_count > 256) throw ConfigError("synthetic: class_count must be 2..256");
  if (spec.size == 0 || spec.n_per_class == 0) throw ConfigError("synthetic: size and n_per_class must be positive");
  if (spec.channels != 1 && spec.channels != 3) throw ConfigError("synthetic: channels must be 1 or 3");
  DatasetSplit s;
  s.height = s.width = spec.size;
  s.channels = spec.channels;
  s.class_count = spec.class_count;
  s.task = spec.class_count == 2 ? TaskKind::Binary : TaskKind::Multiclass;
  const std::size_t n = spec.class_count * spec.n_per_class;
  const std::size_t px = spec.size * spec.size * spec.channels;
  s.images.resize(n * px);
  s.labels.resize(n);
  Rng rng(spec.seed);

  if (spec.mode == SyntheticMode::PatchHistogram) {
    // Class c draws every pixel uniformly from a band of width 81 whose
    // centre moves from 40 to 215 across classes. Adjacent means differ by
    // 175 / (K - 1), i.e. at least 30 for K <= 6.
    const double step = 175.0 / static_cast<double>(spec.class_count - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = i % spec.class_count;
      const int centre = static_cast<int>(std::lround(40.0 + step * static_cast<double>(c)));
      s.labels[i] = static_cast<std::uint8_t>(c);
      for (std::size_t p = 0; p < px; ++p)
        s.images[i * px + p] = draw_byte(rng, std::max(0, centre - 40), std::min(255, centre + 40));
    }
    return s;
  }

  if (spec.patch_size == 0 || spec.size % spec.patch_size != 0)
    throw ConfigError("synthetic layout: patch_size must divide size");
  const std::size_t g = spec.size / spec.patch_size;
  const std::size_t patches = g * g;
  if (patches < spec.class_count) throw ConfigError("synthetic layout: fewer patch positions than classes");
  const std::size_t patch_px = spec.patch_size * spec.patch_size * spec.channels;
  // One textured marker patch on a blank background. Class c anchors the
  // marker at raster position c * patches / class_count; the two images of
  // a pair share the same marker texture, so only its location differs.
  std::vector<std::uint8_t> marker(patch_px);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % spec.class_count;
    if (c == 0)
      for (auto& b : marker) b = draw_byte(rng, 200, 255);
    const std::size_t anchor = c * patches / spec.class_count;
    const std::size_t pr = anchor / g, pc = anchor % g;
    s.labels[i] = static_cast<std::uint8_t>(c);
    std::uint8_t* img = s.images.data() + i * px;
    std::size_t k = 0;
    for (std::size_t y = 0; y < spec.patch_size; ++y)
      for (std::size_t x = 0; x < spec.patch_size; ++x)
        for (std::size_t ch = 0; ch < spec.channels; ++ch)
          img[((pr * spec.patch_size + y) * spec.size + pc * spec.patch_size + x) * spec.channels + ch] = marker[k++];
  }
  return s;
}

}  // namespace zachvit
