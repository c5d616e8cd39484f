#pragma once

// Synthetic class-conditioned images and teacher-forced pretraining of the
// reference policy.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "scalegrpo/adam.hpp"
#include "scalegrpo/error.hpp"
#include "scalegrpo/msvq.hpp"
#include "scalegrpo/policy.hpp"
#include "scalegrpo/rng.hpp"
#include "scalegrpo/sampler.hpp"

namespace scalegrpo {

enum class Pattern { kSolid, kHorizontalGradient, kVerticalGradient, kChecker };

inline const char* pattern_name(Pattern p) {
  switch (p) {
    case Pattern::kSolid: return "solid";
    case Pattern::kHorizontalGradient: return "horizontal_gradient";
    case Pattern::kVerticalGradient: return "vertical_gradient";
    case Pattern::kChecker: return "checker";
  }
  return "solid";
}

struct ClassSpec {
  int class_id = 0;
  std::array<double, 3> base_color{0.5, 0.5, 0.5};
  Pattern pattern = Pattern::kSolid;
  double noise_amp = 0.05;
  double brightness_jitter = 0.0;  // per-sample offset in [-j, j] added to every channel
  double pattern_amp = 0.15;       // half-swing of gradients and checks
};

struct DatasetConfig {
  int n_classes = 8;
  int samples_per_class = 500;
  int height = 8;
  int width = 8;
  double noise_amp = 0.05;
  double brightness_jitter = 0.45;
  double hue_radius = 0.25;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 2) throw InvalidArgument("dataset needs n_classes >= 2");
    if (samples_per_class < 0) throw InvalidArgument("samples_per_class must be >= 0");
    if (height < 1 || width < 1) throw InvalidArgument("image dimensions must be positive");
    if (!(noise_amp >= 0.0) || !(brightness_jitter >= 0.0) || !(hue_radius >= 0.0 && hue_radius <= 0.5))
      throw InvalidArgument("noise_amp, brightness_jitter must be >= 0 and hue_radius in [0, 0.5]");
  }
};

/// Classes sit on a hue circle around mid-grey; the pattern cycles with the
/// class id. The seed rotates the circle.
inline ClassSpec class_spec(const DatasetConfig& cfg, int class_id) {
  if (class_id < 0 || class_id >= cfg.n_classes) throw InvalidArgument("class id outside the dataset");
  Rng rng(hash_seed(cfg.seed, 0xC1A55));
  const double phase = 2.0 * std::numbers::pi * rng.uniform() / cfg.n_classes;
  const double angle = phase + 2.0 * std::numbers::pi * class_id / cfg.n_classes;
  ClassSpec s;
  s.class_id = class_id;
  for (int c = 0; c < 3; ++c)
    s.base_color[static_cast<std::size_t>(c)] = 0.5 + cfg.hue_radius * std::cos(angle + 2.0 * std::numbers::pi * c / 3.0);
  s.pattern = static_cast<Pattern>(class_id % 4);
  s.noise_amp = cfg.noise_amp;
  s.brightness_jitter = cfg.brightness_jitter;
  return s;
}

inline std::vector<ClassSpec> class_specs(const DatasetConfig& cfg) {
  cfg.validate();
  std::vector<ClassSpec> out;
  for (int c = 0; c < cfg.n_classes; ++c) out.push_back(class_spec(cfg, c));
  return out;
}

inline Image render(const ClassSpec& spec, int height, int width, Rng& rng) {
  const double offset = spec.brightness_jitter > 0.0 ? rng.uniform(-spec.brightness_jitter, spec.brightness_jitter) : 0.0;
  FeatureGrid px(height, width, 3, 0.0);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) {
      double shift = 0.0;
      switch (spec.pattern) {
        case Pattern::kSolid: break;
        case Pattern::kHorizontalGradient:
          shift = width > 1 ? spec.pattern_amp * (2.0 * j / (width - 1) - 1.0) : 0.0;
          break;
        case Pattern::kVerticalGradient:
          shift = height > 1 ? spec.pattern_amp * (2.0 * i / (height - 1) - 1.0) : 0.0;
          break;
        case Pattern::kChecker: shift = ((i / 2 + j / 2) % 2 == 0 ? 1.0 : -1.0) * spec.pattern_amp; break;
      }
      for (int c = 0; c < 3; ++c) {
        const double noise = spec.noise_amp > 0.0 ? rng.uniform(-spec.noise_amp, spec.noise_amp) : 0.0;
        px.at(i, j, c) = std::clamp(spec.base_color[static_cast<std::size_t>(c)] + offset + shift + noise, 0.0, 1.0);
      }
    }
  return Image(std::move(px));
}

struct LabeledImage {
  int class_id = 0;
  Image image;
};

inline std::vector<LabeledImage> gen_dataset(const std::vector<ClassSpec>& specs, int samples_per_class, int height,
                                             int width, std::uint64_t seed) {
  if (specs.size() < 2) throw InvalidArgument("dataset needs n_classes >= 2");
  std::vector<LabeledImage> out;
  out.reserve(specs.size() * static_cast<std::size_t>(std::max(0, samples_per_class)));
  for (const auto& s : specs)
    for (int n = 0; n < samples_per_class; ++n) {
      Rng rng(hash_seed(seed, static_cast<std::uint64_t>(s.class_id), static_cast<std::uint64_t>(n)));
      out.push_back({s.class_id, render(s, height, width, rng)});
    }
  return out;
}

inline std::vector<LabeledImage> gen_dataset(const DatasetConfig& cfg) {
  return gen_dataset(class_specs(cfg), cfg.samples_per_class, cfg.height, cfg.width, cfg.seed);
}

inline std::vector<LabeledImage> gen_dataset(int n_classes, int samples_per_class, std::uint64_t seed) {
  DatasetConfig cfg;
  cfg.n_classes = n_classes;
  cfg.samples_per_class = samples_per_class;
  cfg.seed = seed;
  return gen_dataset(cfg);
}

// Directory of PPM files plus index.json, a list of {"class_id", "file"}.
inline void save_dataset(const std::filesystem::path& dir, const std::vector<LabeledImage>& data) {
  std::filesystem::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t n = 0; n < data.size(); ++n) {
    const std::string file = std::to_string(data[n].class_id) + "_" + std::to_string(n) + ".ppm";
    std::ofstream(dir / file, std::ios::binary) << to_ppm(data[n].image);
    index.push_back({{"class_id", data[n].class_id}, {"file", file}});
  }
  std::ofstream(dir / "index.json") << index.dump(1) << "\n";
}

inline std::vector<LabeledImage> load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw InvalidArgument("no dataset index at " + (dir / "index.json").string());
  const auto index = nlohmann::json::parse(in);
  std::vector<LabeledImage> out;
  for (const auto& e : index) {
    std::ifstream f(dir / e.at("file").get<std::string>(), std::ios::binary);
    if (!f) throw InvalidArgument("missing dataset file " + e.at("file").get<std::string>());
    std::stringstream ss;
    ss << f.rdbuf();
    out.push_back({e.at("class_id").get<int>(), from_ppm(ss.str())});
  }
  return out;
}

struct PretrainConfig {
  int epochs = 4;
  double lr = 2e-3;
  int minibatch = 32;
  double label_dropout_p = 0.1;
  std::uint64_t seed = 0;
  int eval_samples = 512;               // labelled subset scored after each epoch
  std::optional<double> stop_below;     // stop once the eval loss drops under this

  void validate() const {
    if (epochs < 0) throw InvalidArgument("epochs must be >= 0");
    if (!(lr > 0.0)) throw InvalidArgument("pretrain lr must be positive");
    if (minibatch < 1) throw InvalidArgument("pretrain minibatch must be >= 1");
    if (!(label_dropout_p >= 0.0 && label_dropout_p <= 1.0)) throw InvalidArgument("label_dropout_p must lie in [0, 1]");
    if (eval_samples < 0) throw InvalidArgument("eval_samples must be >= 0");
  }
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  std::int64_t wall_ms = 0;
};

struct PretrainResult {
  PolicyParams params;
  AdamState adam;
  std::vector<EpochStats> history;
};

struct EncodedSample {
  int class_id = 0;
  MultiScaleTokens tokens;
};

inline std::vector<EncodedSample> encode_dataset(const Architecture& arch, const std::vector<LabeledImage>& data) {
  std::vector<EncodedSample> out;
  out.reserve(data.size());
  for (const auto& d : data) {
    arch.check_label(d.class_id);
    out.push_back({d.class_id, encode(d.image, arch.config().schedule, arch.codebook())});
  }
  return out;
}

inline double mean_cross_entropy(const Architecture& arch, const PolicyParams& params,
                                 const std::vector<EncodedSample>& data, std::size_t limit) {
  double total = 0.0, n = 0.0;
  const Network<float> net(arch, params);
  std::vector<double> row(static_cast<std::size_t>(arch.config().vocab_size)), lp(row.size());
  for (std::size_t s = 0; s < std::min(limit, data.size()); ++s) {
    const auto tr = net.forward(data[s].class_id, data[s].tokens);
    for (double v : token_log_probs(tr.logits, data[s].tokens, 1.0)) total -= v;
    n += data[s].tokens.size();
  }
  return n > 0 ? total / n : 0.0;
}

/// Teacher-forced cross-entropy training from init_params(arch, seed).
inline PretrainResult pretrain(const Architecture& arch, const std::vector<EncodedSample>& data,
                               const PretrainConfig& cfg,
                               const std::function<void(const EpochStats&)>& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw InvalidArgument("pretraining on an empty dataset");
  PretrainResult res;
  res.params = init_params(arch, cfg.seed);
  AdamHyper hyper;
  hyper.lr = cfg.lr;

  std::vector<std::size_t> eval_idx(data.size());
  std::iota(eval_idx.begin(), eval_idx.end(), 0);
  {
    Rng rng(hash_seed(cfg.seed, 0xE7A1));
    for (std::size_t i = eval_idx.size(); i > 1; --i) std::swap(eval_idx[i - 1], eval_idx[rng.below(i)]);
  }
  std::vector<EncodedSample> eval_set;
  for (std::size_t i = 0; i < std::min<std::size_t>(eval_idx.size(), static_cast<std::size_t>(cfg.eval_samples)); ++i)
    eval_set.push_back(data[eval_idx[i]]);

  const int null_class = arch.config().null_class();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(hash_seed(cfg.seed, 0x9E7, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.minibatch)) {
      CrossEntropyLoss ce;
      for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(cfg.minibatch)); ++k) {
        const auto& s = data[order[k]];
        const bool drop = cfg.label_dropout_p > 0.0 && rng.uniform() < cfg.label_dropout_p;
        ce.batch.push_back({drop ? null_class : s.class_id, &s.tokens});
      }
      const auto r = loss_and_grad(arch, res.params, ce);
      adam_step(res.params, res.adam, r.grad, hyper);
      loss_sum += r.loss;
      ++steps;
    }
    for (float v : res.params.values)
      if (!std::isfinite(v)) throw NumericError("non-finite parameter in pretraining epoch " + std::to_string(epoch));
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_sum / steps;
    st.eval_loss = mean_cross_entropy(arch, res.params, eval_set, eval_set.size());
    st.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    res.history.push_back(st);
    if (on_epoch) on_epoch(st);
    if (cfg.stop_below && st.eval_loss < *cfg.stop_below) break;
  }
  return res;
}

inline PretrainResult pretrain(const Architecture& arch, const std::vector<LabeledImage>& data,
                               const PretrainConfig& cfg,
                               const std::function<void(const EpochStats&)>& on_epoch = {}) {
  if (data.empty()) throw InvalidArgument("pretraining on an empty dataset");
  return pretrain(arch, encode_dataset(arch, data), cfg, on_epoch);
}

/// Index of the base colour nearest (Euclidean) to `color`; ties go to the lower index.
inline int nearest_class(const std::array<double, 3>& color, const std::vector<ClassSpec>& specs) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < specs.size(); ++c) {
    double d = 0.0;
    for (std::size_t k = 0; k < 3; ++k) d += (color[k] - specs[c].base_color[k]) * (color[k] - specs[c].base_color[k]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

inline double fidelity_of(const std::vector<Image>& images, int class_id, const std::vector<ClassSpec>& specs) {
  if (images.empty()) return 0.0;
  int hit = 0;
  for (const auto& img : images) {
    const auto m = mean_color(img);
    // strictly closer than every other class
    double own = 0.0;
    for (std::size_t k = 0; k < 3; ++k)
      own += (m[k] - specs[static_cast<std::size_t>(class_id)].base_color[k]) *
             (m[k] - specs[static_cast<std::size_t>(class_id)].base_color[k]);
    bool ok = true;
    for (std::size_t c = 0; c < specs.size() && ok; ++c) {
      if (static_cast<int>(c) == class_id) continue;
      double d = 0.0;
      for (std::size_t k = 0; k < 3; ++k) d += (m[k] - specs[c].base_color[k]) * (m[k] - specs[c].base_color[k]);
      ok = own < d;
    }
    hit += ok ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(images.size());
}

inline std::vector<Image> sample_class(const Architecture& arch, const PolicyParams& params, int class_id,
                                      int n_samples, const SamplerConfig& sampler) {
  std::vector<Image> out;
  for (int i = 0; i < n_samples; ++i) {
    SamplerConfig sc = sampler;
    sc.seed = hash_seed(sampler.seed, static_cast<std::uint64_t>(class_id), static_cast<std::uint64_t>(i));
    out.push_back(sample_inference(arch, params, class_id, sc).image);
  }
  return out;
}

/// Fraction of inference samples whose mean colour is nearer class_id's base
/// colour than any other class's.
inline double class_fidelity(const Architecture& arch, const PolicyParams& params, int class_id, int n_samples,
                             const SamplerConfig& sampler, const std::vector<ClassSpec>& specs) {
  if (class_id < 0 || class_id >= static_cast<int>(specs.size())) throw InvalidArgument("class id outside the class specs");
  return fidelity_of(sample_class(arch, params, class_id, n_samples, sampler), class_id, specs);
}

// Mean fidelity over every class.
inline double class_fidelity(const Architecture& arch, const PolicyParams& params, int n_per_class,
                             const SamplerConfig& sampler, const std::vector<ClassSpec>& specs) {
  double s = 0.0;
  for (int c = 0; c < static_cast<int>(specs.size()); ++c) s += class_fidelity(arch, params, c, n_per_class, sampler, specs);
  return s / static_cast<double>(specs.size());
}

}  // namespace scalegrpo
