#include "diffcls/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "byte_io.hpp"
#include "diffcls/error.hpp"
#include "json.hpp"

namespace diffcls {

namespace {

constexpr std::uint16_t kDatasetVersion = 1;

}  // namespace

// ---------------------------------------------------------------- Dataset

Tensor Dataset::image_at(std::size_t index) const {
  if (index >= size()) throw UsageError("dataset: index out of range");
  const std::size_t n = image.numel();
  const auto begin = pixels.begin() + static_cast<std::ptrdiff_t>(index * n);
  return Tensor(Shape{image.channels, image.height, image.width}, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(n)));
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t n = image.numel();
  std::vector<double> out;
  out.reserve(indices.size() * n);
  for (std::size_t idx : indices) {
    if (idx >= size()) throw UsageError("dataset: index out of range");
    const auto begin = pixels.begin() + static_cast<std::ptrdiff_t>(idx * n);
    out.insert(out.end(), begin, begin + static_cast<std::ptrdiff_t>(n));
  }
  return Tensor(Shape{indices.size(), image.channels, image.height, image.width}, std::move(out));
}

std::vector<std::size_t> Dataset::labels_at(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t idx : indices) out.push_back(labels.at(idx));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.image = image;
  out.classes = classes;
  out.class_names = class_names;
  out.provenance = provenance;
  const Tensor imgs = batch(indices);
  out.pixels.assign(imgs.data().begin(), imgs.data().end());
  out.labels = labels_at(indices);
  return out;
}

void Dataset::validate() const {
  if (classes == 0) throw FormatError("dataset: zero classes");
  if (pixels.size() != size() * image.numel()) throw FormatError("dataset: pixel count mismatch");
  if (!class_names.empty() && class_names.size() != classes) {
    throw FormatError("dataset: class_names does not match class count");
  }
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t label : labels) {
    if (label >= classes) throw FormatError("dataset: label out of range");
    ++counts[label];
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0) throw FormatError("dataset: class " + std::to_string(c) + " has no samples");
  }
  for (double p : pixels) {
    if (!(p >= 0.0 && p <= 1.0)) throw FormatError("dataset: pixel outside [0, 1]");
  }
}

// ---------------------------------------------------------------- synthetic

std::string to_string(SyntheticKind kind) {
  return kind == SyntheticKind::Blobs ? "blobs" : "stripes-vs-checker";
}

SyntheticKind parse_synthetic_kind(const std::string& name) {
  if (name == "blobs") return SyntheticKind::Blobs;
  if (name == "stripes-vs-checker" || name == "stripes") return SyntheticKind::StripesVsChecker;
  throw ConfigError("unknown synthetic kind '" + name + "' (expected blobs|stripes-vs-checker)");
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_per_class < 1) throw ConfigError("synthetic data: n_per_class must be >= 1");
  if (spec.image_size < 4 || spec.image_size % 4 != 0) {
    throw ConfigError("synthetic data: image size must be a positive multiple of 4");
  }
  if (spec.noise_sigma < 0.0) throw ConfigError("synthetic data: noise sigma must be >= 0");
  const std::size_t size = spec.image_size;
  Dataset d;
  d.image = {1, size, size};
  d.classes = 2;
  d.class_names = spec.kind == SyntheticKind::Blobs
                      ? std::vector<std::string>{"blob-top-left", "blob-bottom-right"}
                      : std::vector<std::string>{"stripes", "checker"};
  d.provenance = "synthetic:" + to_string(spec.kind) + ":n_per_class=" +
                 std::to_string(spec.n_per_class) + ":size=" + std::to_string(size) +
                 ":seed=" + std::to_string(spec.seed);
  Rng rng = make_rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  d.pixels.reserve(2 * spec.n_per_class * size * size);
  for (std::size_t label = 0; label < 2; ++label) {
    for (std::size_t n = 0; n < spec.n_per_class; ++n) {
      // Placement is drawn before the noise so noiseless images depend on it only.
      const int px = uniform_int(rng, 0, 3);
      const int py = uniform_int(rng, 0, 3);
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          double v = 0.0;
          if (spec.kind == SyntheticKind::StripesVsChecker) {
            const std::size_t yy = y + static_cast<std::size_t>(py);
            const std::size_t xx = x + static_cast<std::size_t>(px);
            v = label == 0 ? ((yy % 4) < 2 ? 1.0 : 0.0) : (((yy / 2) + (xx / 2)) % 2 == 0 ? 1.0 : 0.0);
          } else {
            const double quarter = static_cast<double>(size) / 4.0;
            const double base = label == 0 ? quarter : 3.0 * quarter;
            const double cx = base + (px - 1.5) / 1.5;
            const double cy = base + (py - 1.5) / 1.5;
            const double sigma = static_cast<double>(size) / 8.0;
            const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
          }
          if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise(rng);
          d.pixels.push_back(std::clamp(v, 0.0, 1.0));
        }
      }
      d.labels.push_back(label);
    }
  }
  return d;
}

// ---------------------------------------------------------------- split

Splits split(const Dataset& data, const SplitSpec& spec) {
  if (data.size() < 10) {
    throw ConfigError("split: need at least 10 samples, got " + std::to_string(data.size()));
  }
  const double total = spec.train_frac + spec.val_frac + spec.test_frac;
  if (std::abs(total - 1.0) > 1e-9 || spec.train_frac <= 0.0 || spec.val_frac < 0.0 ||
      spec.test_frac < 0.0) {
    throw ConfigError("split: fractions must be non-negative and sum to 1");
  }
  Splits out;
  for (std::size_t c = 0; c < data.classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data.labels[i] == c) members.push_back(i);
    Rng rng = make_rng(spec.seed, c);
    std::shuffle(members.begin(), members.end(), rng);
    const double n = static_cast<double>(members.size());
    std::size_t n_val = static_cast<std::size_t>(std::llround(spec.val_frac * n));
    std::size_t n_test = static_cast<std::size_t>(std::llround(spec.test_frac * n));
    if (n_val + n_test > members.size()) n_test = members.size() - n_val;
    const std::size_t n_train = members.size() - n_val - n_test;
    auto it = members.begin();
    out.train.insert(out.train.end(), it, it + static_cast<std::ptrdiff_t>(n_train));
    it += static_cast<std::ptrdiff_t>(n_train);
    out.val.insert(out.val.end(), it, it + static_cast<std::ptrdiff_t>(n_val));
    it += static_cast<std::ptrdiff_t>(n_val);
    out.test.insert(out.test.end(), it, members.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  if (out.train.empty() || out.val.empty() || out.test.empty()) {
    throw ConfigError("split: a split came out empty");
  }
  return out;
}

// ---------------------------------------------------------------- augmentation

namespace {

void check_image(const Tensor& image) {
  if (image.rank() != 3) {
    throw UsageError("augment: expected an image [ch x H x W], got " + shape_string(image.shape()));
  }
}

// out(c, y, x) = in(c, src(y, x))
template <class Map>
Tensor remap(const Tensor& image, std::size_t out_h, std::size_t out_w, Map map) {
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> out(ch * out_h * out_w);
  const auto in = image.data();
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto [sy, sx] = map(y, x);
        out[(c * out_h + y) * out_w + x] = in[(c * h + sy) * w + sx];
      }
  return Tensor(Shape{ch, out_h, out_w}, std::move(out));
}

}  // namespace

Tensor center_crop_resize(const Tensor& image, std::size_t crop) {
  check_image(image);
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (crop == 0 || crop > h || crop > w) {
    throw ConfigError("augment: crop size " + std::to_string(crop) + " exceeds image " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t top = (h - crop) / 2, left = (w - crop) / 2;
  return remap(image, h, w, [=](std::size_t y, std::size_t x) {
    return std::pair{top + y * crop / h, left + x * crop / w};
  });
}

Tensor flip_horizontal(const Tensor& image) {
  check_image(image);
  const std::size_t h = image.dim(1), w = image.dim(2);
  return remap(image, h, w, [=](std::size_t y, std::size_t x) { return std::pair{y, w - 1 - x}; });
}

Tensor rotate90(const Tensor& image, int quarter_turns) {
  check_image(image);
  const std::size_t h = image.dim(1), w = image.dim(2);
  const int k = ((quarter_turns % 4) + 4) % 4;
  switch (k) {
    case 0:
      return image.detach();
    case 2:
      return remap(image, h, w, [=](std::size_t y, std::size_t x) {
        return std::pair{h - 1 - y, w - 1 - x};
      });
    case 1:  // counter-clockwise: out(y, x) = in(x, w_out - 1 - y)
      return remap(image, w, h, [=](std::size_t y, std::size_t x) {
        return std::pair{x, w - 1 - y};
      });
    default:  // clockwise
      return remap(image, w, h, [=](std::size_t y, std::size_t x) {
        return std::pair{h - 1 - x, y};
      });
  }
}

Tensor augment(const Tensor& image, Rng& rng, const AugmentConfig& cfg) {
  check_image(image);
  const std::size_t h = image.dim(1), w = image.dim(2);
  const std::size_t crop =
      cfg.crop_size != 0 ? cfg.crop_size
                         : static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(std::min(h, w))));
  Tensor out = center_crop_resize(image, crop);
  if (uniform01(rng) < cfg.flip_prob) out = flip_horizontal(out);
  if (cfg.rotate) {
    int turns = uniform_int(rng, 0, 3);
    if (h != w) turns = (turns / 2) * 2;  // only 0 or 180 keep a non-square shape
    out = rotate90(out, turns);
  }
  return out;
}

Tensor augment_batch(const Tensor& images, Rng& rng, const AugmentConfig& cfg) {
  if (images.rank() != 4) throw UsageError("augment_batch: expected [B x ch x H x W]");
  const std::size_t batch = images.dim(0);
  const std::size_t per = images.numel() / std::max<std::size_t>(batch, 1);
  const Shape one{images.dim(1), images.dim(2), images.dim(3)};
  std::vector<double> out;
  out.reserve(images.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    const auto begin = images.data().begin() + static_cast<std::ptrdiff_t>(b * per);
    const Tensor img(one, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(per)));
    const Tensor aug = augment(img, rng, cfg);
    out.insert(out.end(), aug.data().begin(), aug.data().end());
  }
  return Tensor(images.shape(), std::move(out));
}

// ---------------------------------------------------------------- file format

std::filesystem::path manifest_path(const std::filesystem::path& dataset_path) {
  std::filesystem::path p = dataset_path;
  return p.replace_extension(".json");
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  data.validate();
  if (data.classes > 0xFFFF) throw FormatError("dataset: too many classes for u16 labels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write("DSET", 4);
  io::write_le<std::uint16_t>(os, kDatasetVersion);
  for (std::size_t v : {data.size(), data.image.channels, data.image.height, data.image.width,
                        data.classes}) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  }
  for (std::size_t label : data.labels) io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(label));
  for (double p : data.pixels) io::write_f32(os, p);
  if (!os) throw FormatError("failed writing " + path.string());

  nlohmann::json manifest = {
      {"format", "DSET"},
      {"version", kDatasetVersion},
      {"data_file", path.filename().string()},
      {"class_names", data.class_names},
      {"provenance", data.provenance},
  };
  std::ofstream ms(manifest_path(path));
  if (!ms) throw FormatError("cannot write manifest for " + path.string());
  ms << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset " + path.string());
  io::expect_magic(is, "DSET", "dataset file");
  const auto version = io::read_le<std::uint16_t>(is, "version");
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version));
  }
  Dataset d;
  const std::size_t n = io::read_le<std::uint32_t>(is, "N");
  d.image.channels = io::read_le<std::uint32_t>(is, "channels");
  d.image.height = io::read_le<std::uint32_t>(is, "height");
  d.image.width = io::read_le<std::uint32_t>(is, "width");
  d.classes = io::read_le<std::uint32_t>(is, "classes");
  d.labels.resize(n);
  for (auto& label : d.labels) label = io::read_le<std::uint16_t>(is, "labels");
  d.pixels.resize(n * d.image.numel());
  for (auto& p : d.pixels) p = io::read_f32(is, "pixels");
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in dataset file");

  const auto mpath = manifest_path(path);
  if (std::filesystem::exists(mpath)) {
    std::ifstream ms(mpath);
    try {
      const auto manifest = nlohmann::json::parse(ms);
      d.class_names = manifest.value("class_names", std::vector<std::string>{});
      d.provenance = manifest.value("provenance", std::string{});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("bad dataset manifest " + mpath.string() + ": " + e.what());
    }
  }
  if (d.class_names.empty()) {
    for (std::size_t c = 0; c < d.classes; ++c) d.class_names.push_back("class" + std::to_string(c));
  }
  d.validate();
  return d;
}

}  // namespace diffcls
