#include "egru/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <random>

namespace egru::data {

DelayCopySample delay_copy_sample(const DelayCopyConfig& cfg, const std::vector<int>& bits) {
  if (bits.size() != cfg.n_bits) throw DimensionError("delay_copy_sample: pattern length differs from n_bits");
  if (!(cfg.input_window > 0 && cfg.delay > 0 && cfg.recall_window > 0)) {
    throw std::invalid_argument("delay_copy_sample: durations must be positive");
  }
  if (cfg.input_time < 0 || cfg.input_time > cfg.input_window) {
    throw std::invalid_argument("delay_copy_sample: input time outside the input window");
  }
  DelayCopySample s;
  for (std::size_t j = 0; j < bits.size(); ++j) {
    s.target.push_back(bits[j] ? 1.0 : 0.0);
    if (bits[j]) s.inputs.push_back({cfg.input_time, j, cfg.value});
  }
  s.cue_time = cfg.input_window + cfg.delay;
  s.inputs.push_back({s.cue_time, cfg.n_bits, cfg.value});
  s.readout_time = s.cue_time + cfg.recall_window;
  return s;
}

std::vector<DelayCopySample> delay_copy_gen(const DelayCopyConfig& cfg, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<DelayCopySample> out;
  for (std::size_t k = 0; k < count; ++k) {
    std::vector<int> bits(cfg.n_bits);
    for (auto& b : bits) b = static_cast<int>(rng() & 1u);
    out.push_back(delay_copy_sample(cfg, bits));
  }
  return out;
}

std::vector<DelayCopySample> delay_copy_all_patterns(const DelayCopyConfig& cfg) {
  std::vector<DelayCopySample> out;
  for (std::size_t code = 0; code < (std::size_t{1} << cfg.n_bits); ++code) {
    std::vector<int> bits(cfg.n_bits);
    for (std::size_t j = 0; j < cfg.n_bits; ++j) bits[j] = static_cast<int>((code >> (cfg.n_bits - 1 - j)) & 1u);
    out.push_back(delay_copy_sample(cfg, bits));
  }
  return out;
}

Mat delay_copy_discrete(const DelayCopySample& s, std::size_t n_bits, double dt) {
  if (!(dt > 0)) throw std::invalid_argument("delay_copy_discrete: dt must be positive");
  const auto steps = static_cast<std::size_t>(std::ceil(s.readout_time / dt - 1e-9));
  Mat x(std::max<std::size_t>(steps, 1), n_bits + 1);
  for (const auto& e : s.inputs) {
    const auto k = std::min(static_cast<std::size_t>(std::floor(e.s / dt + 1e-9)), x.rows() - 1);
    x(k, e.channel) += e.value;
  }
  return x;
}

namespace {

class GzReader {
 public:
  explicit GzReader(const std::filesystem::path& p) : path_(p.string()), f_(gzopen(path_.c_str(), "rb")) {
    if (f_ == nullptr) throw IdxFormatError("cannot open " + path_);
  }
  ~GzReader() {
    if (f_ != nullptr) gzclose(f_);
  }
  GzReader(const GzReader&) = delete;
  GzReader& operator=(const GzReader&) = delete;

  void read(void* dst, std::size_t len, const char* what) {
    auto* out = static_cast<unsigned char*>(dst);
    while (len > 0) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(len, 1u << 30));
      const int got = gzread(f_, out, chunk);
      if (got <= 0) throw IdxFormatError(path_ + ": truncated file while reading " + what);
      out += got;
      len -= static_cast<std::size_t>(got);
    }
  }
  std::uint32_t be32(const char* what) {
    unsigned char b[4];
    read(b, 4, what);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
  }
  bool at_end() {
    unsigned char extra;
    return gzread(f_, &extra, 1) == 0;
  }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  gzFile f_;
};

}  // namespace

MnistSet mnist_idx_load(const std::filesystem::path& images, const std::filesystem::path& labels) {
  GzReader img(images);
  const std::uint32_t magic_i = img.be32("magic");
  if (magic_i != 0x00000803u) throw IdxFormatError(img.path() + ": bad magic for an image file");
  const std::uint32_t count = img.be32("count"), rows = img.be32("rows"), cols = img.be32("cols");

  GzReader lab(labels);
  const std::uint32_t magic_l = lab.be32("magic");
  if (magic_l != 0x00000801u) throw IdxFormatError(lab.path() + ": bad magic for a label file");
  const std::uint32_t nlab = lab.be32("count");
  if (nlab != count) {
    throw IdxFormatError("count mismatch: " + std::to_string(count) + " images vs " + std::to_string(nlab) +
                         " labels");
  }

  MnistSet s;
  s.rows = rows;
  s.cols = cols;
  const std::size_t px = std::size_t{rows} * cols;
  std::vector<unsigned char> raw(px * count);
  img.read(raw.data(), raw.size(), "pixels");
  if (!img.at_end()) throw IdxFormatError(img.path() + ": trailing bytes after the declared images");
  s.images = Mat(count, px);
  for (std::size_t k = 0; k < raw.size(); ++k) s.images.data()[k] = raw[k] / 255.0;
  s.labels.resize(count);
  lab.read(s.labels.data(), count, "labels");
  if (!lab.at_end()) throw IdxFormatError(lab.path() + ": trailing bytes after the declared labels");
  for (auto l : s.labels) {
    if (l > 9) throw IdxFormatError(lab.path() + ": label out of range");
  }
  return s;
}

Vec maxpool_downscale(std::span<const double> image, std::size_t rows, std::size_t cols, std::size_t factor) {
  if (factor == 0 || rows % factor != 0 || cols % factor != 0) {
    throw DimensionError("maxpool_downscale: factor must divide both image dimensions");
  }
  if (image.size() != rows * cols) throw DimensionError("maxpool_downscale: image size differs from rows*cols");
  const std::size_t R = rows / factor, C = cols / factor;
  Vec out(R * C);
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      double m = image[r * factor * cols + c * factor];
      for (std::size_t i = 0; i < factor; ++i) {
        for (std::size_t j = 0; j < factor; ++j) m = std::max(m, image[(r * factor + i) * cols + c * factor + j]);
      }
      out[r * C + c] = m;
    }
  }
  return out;
}

Mat sequentialize(std::span<const double> image) { return Mat(image.size(), 1, Vec(image.begin(), image.end())); }

MnistSet downscale_set(const MnistSet& s, std::size_t factor) {
  MnistSet out;
  out.rows = s.rows / factor;
  out.cols = s.cols / factor;
  out.labels = s.labels;
  out.images = Mat(s.size(), out.rows * out.cols);
  for (std::size_t k = 0; k < s.size(); ++k) {
    const Vec small = maxpool_downscale(s.images.row(k), s.rows, s.cols, factor);
    std::copy(small.begin(), small.end(), out.images.row(k).begin());
  }
  return out;
}

}  // namespace egru::data
