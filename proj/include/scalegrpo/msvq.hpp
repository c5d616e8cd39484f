#pragma once

// Frozen multi-scale residual tokenizer and its toy decoder.
//
// Latents are d-dimensional (d = 3 by default, read directly as RGB offsets
// around mid-grey). Scale k looks codebook entries up with gain g^(k-1), so
// successive scales quantize progressively smaller residuals.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "scalegrpo/error.hpp"
#include "scalegrpo/rng.hpp"

namespace scalegrpo {

struct Scale {
  int h = 1;
  int w = 1;
  int size() const noexcept { return h * w; }
  friend bool operator==(const Scale&, const Scale&) = default;
};

class ScaleSchedule {
 public:
  ScaleSchedule() = default;

  explicit ScaleSchedule(std::vector<Scale> scales) : scales_(std::move(scales)) {
    if (scales_.empty()) throw InvalidArgument("scale schedule must contain at least one scale");
    for (std::size_t k = 0; k < scales_.size(); ++k) {
      if (scales_[k].h < 1 || scales_[k].w < 1)
        throw InvalidArgument("scale " + std::to_string(k) + " has a non-positive side");
      if (k > 0 && (scales_[k].h <= scales_[k - 1].h || scales_[k].w <= scales_[k - 1].w))
        throw InvalidArgument("scale schedule must be strictly increasing in both sides");
    }
    offsets_.resize(scales_.size() + 1, 0);
    for (std::size_t k = 0; k < scales_.size(); ++k)
      offsets_[k + 1] = offsets_[k] + scales_[k].size();
  }

  // Square schedule from side lengths, e.g. {1, 2, 4, 8}.
  static ScaleSchedule square(std::initializer_list<int> sides) {
    std::vector<Scale> s;
    for (int n : sides) s.push_back({n, n});
    return ScaleSchedule(std::move(s));
  }

  int num_scales() const noexcept { return static_cast<int>(scales_.size()); }
  const Scale& operator[](int k) const { return scales_.at(static_cast<std::size_t>(k)); }
  const Scale& final_scale() const { return scales_.back(); }
  const std::vector<Scale>& scales() const noexcept { return scales_; }

  // Sum of h_k * w_k over all scales.
  int total_tokens() const noexcept { return offsets_.empty() ? 0 : offsets_.back(); }
  // Flat index of the first token of scale k (row-major within a scale).
  int offset(int k) const { return offsets_.at(static_cast<std::size_t>(k)); }

  friend bool operator==(const ScaleSchedule& a, const ScaleSchedule& b) {
    return a.scales_ == b.scales_;
  }

 private:
  std::vector<Scale> scales_;
  std::vector<int> offsets_;
};

// h x w x d real grid, row-major with channels innermost.
struct FeatureGrid {
  int h = 0;
  int w = 0;
  int d = 0;
  std::vector<double> data;

  FeatureGrid() = default;
  FeatureGrid(int h_, int w_, int d_, double fill = 0.0)
      : h(h_), w(w_), d(d_), data(static_cast<std::size_t>(h_) * w_ * d_, fill) {}

  double& at(int i, int j, int c) { return data[(static_cast<std::size_t>(i) * w + j) * d + c]; }
  double at(int i, int j, int c) const {
    return data[(static_cast<std::size_t>(i) * w + j) * d + c];
  }
  std::span<double> cell(int i, int j) {
    return {data.data() + (static_cast<std::size_t>(i) * w + j) * d, static_cast<std::size_t>(d)};
  }
  std::span<const double> cell(int i, int j) const {
    return {data.data() + (static_cast<std::size_t>(i) * w + j) * d, static_cast<std::size_t>(d)};
  }
};

/// RGB image with channels in [0, 1].
class Image {
 public:
  Image() = default;
  Image(int height, int width, double fill = 0.0) : px_(height, width, 3, fill) {
    if (height < 1 || width < 1) throw InvalidArgument("image dimensions must be positive");
    if (!(fill >= 0.0 && fill <= 1.0)) throw InvalidArgument("image fill outside [0, 1]");
  }

  // Takes ownership of an H x W x 3 grid; every value must lie in [0, 1].
  explicit Image(FeatureGrid pixels) : px_(std::move(pixels)) {
    if (px_.d != 3 || px_.h < 1 || px_.w < 1) throw InvalidArgument("image grid must be H x W x 3");
    for (double v : px_.data)
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("image value outside [0, 1]");
  }

  int height() const noexcept { return px_.h; }
  int width() const noexcept { return px_.w; }
  double operator()(int i, int j, int c) const { return px_.at(i, j, c); }
  void set(int i, int j, int c, double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("image value outside [0, 1]");
    px_.at(i, j, c) = v;
  }
  const FeatureGrid& pixels() const noexcept { return px_; }

  friend bool operator==(const Image& a, const Image& b) {
    return a.px_.h == b.px_.h && a.px_.w == b.px_.w && a.px_.data == b.px_.data;
  }

 private:
  FeatureGrid px_;
};

/// Frozen V x d embedding table. Entries are float-representable so that
/// checkpoints (float32 payloads) round-trip bit-exactly.
class Codebook {
 public:
  Codebook(int vocab, int dim, std::vector<double> entries, std::uint64_t seed, double level_gain)
      : vocab_(vocab), dim_(dim), seed_(seed), gain_(level_gain), entries_(std::move(entries)) {
    if (vocab_ < 2) throw InvalidArgument("codebook needs at least 2 entries");
    if (dim_ < 1) throw InvalidArgument("codebook dimension must be positive");
    if (entries_.size() != static_cast<std::size_t>(vocab_) * dim_)
      throw InvalidArgument("codebook entry table has the wrong size");
    if (!(gain_ > 0.0 && std::isfinite(gain_))) throw InvalidArgument("level gain must be positive");
    for (double v : entries_)
      if (!std::isfinite(v)) throw InvalidArgument("codebook entries must be finite");
  }

  int vocab_size() const noexcept { return vocab_; }
  int dim() const noexcept { return dim_; }
  std::uint64_t seed() const noexcept { return seed_; }
  // Lookup gain applied at scale k is level_gain()^k (k zero-based).
  double level_gain() const noexcept { return gain_; }
  double scale_gain(int k) const { return std::pow(gain_, k); }

  std::span<const double> entry(int v) const {
    if (v < 0 || v >= vocab_) throw InvalidArgument("token index " + std::to_string(v) + " out of range");
    return {entries_.data() + static_cast<std::size_t>(v) * dim_, static_cast<std::size_t>(dim_)};
  }
  const std::vector<double>& entries() const noexcept { return entries_; }

  friend bool operator==(const Codebook& a, const Codebook& b) {
    return a.vocab_ == b.vocab_ && a.dim_ == b.dim_ && a.gain_ == b.gain_ && a.entries_ == b.entries_;
  }

 private:
  int vocab_;
  int dim_;
  std::uint64_t seed_;
  double gain_;
  std::vector<double> entries_;
};

// Entries uniform in [-1, 1]^dim, drawn row-major from the seeded stream and
// rounded to float.
inline Codebook build_codebook(std::uint64_t seed, int vocab, int dim, double level_gain = 1.0) {
  if (vocab < 2) throw InvalidArgument("codebook needs at least 2 entries");
  if (dim < 1) throw InvalidArgument("codebook dimension must be positive");
  Rng rng(hash_seed(seed, 0xC0DEB00C));
  std::vector<double> e(static_cast<std::size_t>(vocab) * dim);
  for (auto& v : e) v = static_cast<double>(static_cast<float>(rng.uniform(-1.0, 1.0)));
  return Codebook(vocab, dim, std::move(e), seed, level_gain);
}

/// One integer grid per scale, stored flat in scale-major, row-major order.
class MultiScaleTokens {
 public:
  MultiScaleTokens() = default;
  explicit MultiScaleTokens(const ScaleSchedule& schedule)
      : schedule_(schedule), values_(static_cast<std::size_t>(schedule.total_tokens()), 0) {}
  MultiScaleTokens(const ScaleSchedule& schedule, std::vector<int> values)
      : schedule_(schedule), values_(std::move(values)) {
    if (values_.size() != static_cast<std::size_t>(schedule_.total_tokens()))
      throw InvalidArgument("token count does not match the scale schedule");
  }

  const ScaleSchedule& schedule() const noexcept { return schedule_; }
  int num_scales() const noexcept { return schedule_.num_scales(); }
  std::span<int> grid(int k) {
    return {values_.data() + schedule_.offset(k), static_cast<std::size_t>(schedule_[k].size())};
  }
  std::span<const int> grid(int k) const {
    return {values_.data() + schedule_.offset(k), static_cast<std::size_t>(schedule_[k].size())};
  }
  int at(int k, int i, int j) const { return grid(k)[static_cast<std::size_t>(i * schedule_[k].w + j)]; }
  int& at(int k, int i, int j) { return grid(k)[static_cast<std::size_t>(i * schedule_[k].w + j)]; }

  std::span<const int> flat() const noexcept { return values_; }
  std::span<int> flat() noexcept { return values_; }
  int size() const noexcept { return static_cast<int>(values_.size()); }

  void validate(int vocab) const {
    for (int v : values_)
      if (v < 0 || v >= vocab)
        throw InvalidArgument("token index " + std::to_string(v) + " outside [0, " +
                              std::to_string(vocab) + ")");
  }

  friend bool operator==(const MultiScaleTokens& a, const MultiScaleTokens& b) {
    return a.schedule_ == b.schedule_ && a.values_ == b.values_;
  }

 private:
  ScaleSchedule schedule_;
  std::vector<int> values_;
};

/// Bilinear, corner-aligned. Identity when shapes are equal.
inline FeatureGrid upsample(const FeatureGrid& src, int target_h, int target_w) {
  if (target_h < src.h || target_w < src.w)
    throw InvalidArgument("upsample target smaller than source");
  if (target_h == src.h && target_w == src.w) return src;
  FeatureGrid out(target_h, target_w, src.d);
  auto coord = [](int i, int n_src, int n_dst) {
    if (n_dst == 1 || n_src == 1) return 0.0;
    return static_cast<double>(i) * (n_src - 1) / (n_dst - 1);
  };
  for (int i = 0; i < target_h; ++i) {
    const double y = coord(i, src.h, target_h);
    const int y0 = static_cast<int>(std::floor(y));
    const int y1 = std::min(y0 + 1, src.h - 1);
    const double fy = y - y0;
    for (int j = 0; j < target_w; ++j) {
      const double x = coord(j, src.w, target_w);
      const int x0 = static_cast<int>(std::floor(x));
      const int x1 = std::min(x0 + 1, src.w - 1);
      const double fx = x - x0;
      for (int c = 0; c < src.d; ++c) {
        const double top = (1.0 - fx) * src.at(y0, x0, c) + fx * src.at(y0, x1, c);
        const double bot = (1.0 - fx) * src.at(y1, x0, c) + fx * src.at(y1, x1, c);
        out.at(i, j, c) = (1.0 - fy) * top + fy * bot;
      }
    }
  }
  return out;
}

namespace detail {
// Cell c of n split into t near-equal parts covers [b[c], b[c+1]); earlier
// cells absorb the remainder.
inline std::vector<int> partition_bounds(int n, int t) {
  std::vector<int> b(static_cast<std::size_t>(t) + 1, 0);
  const int base = n / t;
  const int rem = n % t;
  for (int c = 0; c < t; ++c) b[c + 1] = b[c] + base + (c < rem ? 1 : 0);
  return b;
}
}  // namespace detail

/// Average pooling over a near-equal partition of the source pixels.
inline FeatureGrid downsample(const FeatureGrid& src, int target_h, int target_w) {
  if (target_h > src.h || target_w > src.w)
    throw InvalidArgument("downsample target larger than source");
  if (target_h < 1 || target_w < 1) throw InvalidArgument("downsample target must be positive");
  if (target_h == src.h && target_w == src.w) return src;
  const auto by = detail::partition_bounds(src.h, target_h);
  const auto bx = detail::partition_bounds(src.w, target_w);
  FeatureGrid out(target_h, target_w, src.d);
  for (int i = 0; i < target_h; ++i)
    for (int j = 0; j < target_w; ++j) {
      const double n = static_cast<double>((by[i + 1] - by[i]) * (bx[j + 1] - bx[j]));
      for (int c = 0; c < src.d; ++c) {
        double s = 0.0;
        for (int y = by[i]; y < by[i + 1]; ++y)
          for (int x = bx[j]; x < bx[j + 1]; ++x) s += src.at(y, x, c);
        out.at(i, j, c) = s / n;
      }
    }
  return out;
}

// Grid of gain-scaled codebook vectors for scale k's tokens.
inline FeatureGrid lookup(const MultiScaleTokens& tokens, int k, const Codebook& codebook) {
  const Scale s = tokens.schedule()[k];
  const double g = codebook.scale_gain(k);
  FeatureGrid out(s.h, s.w, codebook.dim());
  const auto grid = tokens.grid(k);
  for (int i = 0; i < s.h; ++i)
    for (int j = 0; j < s.w; ++j) {
      const auto e = codebook.entry(grid[static_cast<std::size_t>(i * s.w + j)]);
      for (int c = 0; c < codebook.dim(); ++c) out.at(i, j, c) = g * e[static_cast<std::size_t>(c)];
    }
  return out;
}

// Nearest entry by squared Euclidean distance to gain * entry; ties go to the
// lowest index.
inline int nearest_entry(std::span<const double> v, const Codebook& codebook, double gain) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int e = 0; e < codebook.vocab_size(); ++e) {
    const auto ent = codebook.entry(e);
    double dist = 0.0;
    for (std::size_t c = 0; c < v.size(); ++c) {
      const double diff = v[c] - gain * ent[c];
      dist += diff * diff;
    }
    if (dist < best_d) {
      best_d = dist;
      best = e;
    }
  }
  return best;
}

inline MultiScaleTokens encode(const Image& image, const ScaleSchedule& schedule,
                               const Codebook& codebook) {
  const Scale fin = schedule.final_scale();
  if (image.height() != fin.h || image.width() != fin.w)
    throw InvalidArgument("image is " + std::to_string(image.height()) + "x" +
                          std::to_string(image.width()) + " but the schedule ends at " +
                          std::to_string(fin.h) + "x" + std::to_string(fin.w));
  if (codebook.dim() != 3) throw InvalidArgument("image tokenization needs a 3-channel codebook");

  FeatureGrid residual = image.pixels();
  for (double& v : residual.data) v -= 0.5;

  MultiScaleTokens tokens(schedule);
  for (int k = 0; k < schedule.num_scales(); ++k) {
    const Scale s = schedule[k];
    const FeatureGrid pooled = downsample(residual, s.h, s.w);
    const double g = codebook.scale_gain(k);
    auto grid = tokens.grid(k);
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j)
        grid[static_cast<std::size_t>(i * s.w + j)] = nearest_entry(pooled.cell(i, j), codebook, g);
    const FeatureGrid up = upsample(lookup(tokens, k, codebook), fin.h, fin.w);
    for (std::size_t n = 0; n < residual.data.size(); ++n) residual.data[n] -= up.data[n];
  }
  return tokens;
}

// Reconstruction from the first `num_scales` scales (all scales by default).
inline Image decode(const MultiScaleTokens& tokens, const Codebook& codebook, int num_scales = -1) {
  const ScaleSchedule& schedule = tokens.schedule();
  tokens.validate(codebook.vocab_size());
  if (codebook.dim() != 3) throw InvalidArgument("image decoding needs a 3-channel codebook");
  const int used = num_scales < 0 ? schedule.num_scales() : std::min(num_scales, schedule.num_scales());
  const Scale fin = schedule.final_scale();
  FeatureGrid acc(fin.h, fin.w, 3, 0.5);
  for (int k = 0; k < used; ++k) {
    const FeatureGrid up = upsample(lookup(tokens, k, codebook), fin.h, fin.w);
    for (std::size_t n = 0; n < acc.data.size(); ++n) acc.data[n] += up.data[n];
  }
  for (double& v : acc.data) v = std::clamp(v, 0.0, 1.0);
  return Image(std::move(acc));
}

inline Image decode(const MultiScaleTokens& tokens, const ScaleSchedule& schedule,
                    const Codebook& codebook) {
  if (!(tokens.schedule() == schedule)) throw InvalidArgument("tokens do not match the schedule");
  return decode(tokens, codebook);
}

inline double rmse(const Image& a, const Image& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw InvalidArgument("rmse of images with different shapes");
  double s = 0.0;
  const auto& x = a.pixels().data;
  const auto& y = b.pixels().data;
  for (std::size_t n = 0; n < x.size(); ++n) s += (x[n] - y[n]) * (x[n] - y[n]);
  return std::sqrt(s / static_cast<double>(x.size()));
}

// Per-channel mean over all pixels.
inline std::array<double, 3> mean_color(const Image& img) {
  std::array<double, 3> m{0.0, 0.0, 0.0};
  for (int i = 0; i < img.height(); ++i)
    for (int j = 0; j < img.width(); ++j)
      for (int c = 0; c < 3; ++c) m[static_cast<std::size_t>(c)] += img(i, j, c);
  const double n = static_cast<double>(img.height()) * img.width();
  for (double& v : m) v /= n;
  return m;
}

// Binary PPM (P6, maxval 255); channel byte = round(value * 255).
inline std::string to_ppm(const Image& img) {
  std::string out = "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(img.width()) * img.height() * 3);
  for (int i = 0; i < img.height(); ++i)
    for (int j = 0; j < img.width(); ++j)
      for (int c = 0; c < 3; ++c)
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(img(i, j, c) * 255.0))));
  return out;
}

inline Image from_ppm(std::string_view bytes) {
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return std::string(bytes.substr(start, pos - start));
  };
  if (next_token() != "P6") throw InvalidArgument("not a binary PPM (P6)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw InvalidArgument("malformed PPM header");
  }
  if (w < 1 || h < 1 || maxval != 255) throw InvalidArgument("unsupported PPM dimensions or maxval");
  ++pos;  // single whitespace after maxval
  const std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() < pos + need) throw InvalidArgument("truncated PPM payload");
  FeatureGrid g(h, w, 3);
  for (std::size_t n = 0; n < need; ++n)
    g.data[n] = static_cast<unsigned char>(bytes[pos + n]) / 255.0;
  return Image(std::move(g));
}

}  // namespace scalegrpo
