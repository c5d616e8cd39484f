#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "scalegrpo/pretrain.hpp"

namespace scalegrpo {
namespace {

TEST(GenDataset, SolidNoiselessClassIsExactlyBase) {
  ClassSpec red;
  red.class_id = 0;
  red.base_color = {1.0, 0.0, 0.0};
  red.noise_amp = 0.0;
  ClassSpec other = red;
  other.class_id = 1;
  other.base_color = {0.0, 0.0, 1.0};
  const auto data = gen_dataset({red, other}, 3, 4, 5, 9);
  ASSERT_EQ(data.size(), 6u);
  for (int n = 0; n < 3; ++n) {
    const auto& img = data[static_cast<std::size_t>(n)].image;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 5; ++j) {
        EXPECT_EQ(img(i, j, 0), 1.0);
        EXPECT_EQ(img(i, j, 1), 0.0);
        EXPECT_EQ(img(i, j, 2), 0.0);
      }
  }
}

TEST(GenDataset, SameSeedSameData) {
  DatasetConfig c;
  c.samples_per_class = 4;
  const auto a = gen_dataset(c), b = gen_dataset(c);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t n = 0; n < a.size(); ++n) {
    EXPECT_EQ(a[n].class_id, b[n].class_id);
    EXPECT_EQ(a[n].image, b[n].image);
  }
  c.seed = 1;
  EXPECT_FALSE(gen_dataset(c)[0].image == a[0].image);
}

TEST(GenDataset, SolidClassMeanNearBase) {
  DatasetConfig c;
  c.brightness_jitter = 0.0;
  c.samples_per_class = 100;
  const auto specs = class_specs(c);
  ASSERT_EQ(specs[0].pattern, Pattern::kSolid);
  const auto data = gen_dataset(specs, 100, c.height, c.width, c.seed);
  std::array<double, 3> m{0, 0, 0};
  int n = 0;
  for (const auto& d : data)
    if (d.class_id == 0) {
      const auto mc = mean_color(d.image);
      for (int k = 0; k < 3; ++k) m[k] += mc[k];
      ++n;
    }
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(m[k] / n, specs[0].base_color[k], c.noise_amp);
}

TEST(GenDataset, PatternsKeepTheBaseMean) {
  for (Pattern p : {Pattern::kHorizontalGradient, Pattern::kVerticalGradient, Pattern::kChecker}) {
    ClassSpec s;
    s.base_color = {0.4, 0.5, 0.6};
    s.noise_amp = 0.0;
    s.pattern = p;
    Rng rng(1);
    const auto img = render(s, 8, 8, rng);
    const auto m = mean_color(img);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(m[k], s.base_color[k], 1e-12) << pattern_name(p);
  }
}

TEST(GenDataset, ClassSpecsAreDistinctAndDeterministic) {
  DatasetConfig c;
  const auto a = class_specs(c), b = class_specs(c);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].base_color, b[i].base_color);
    for (std::size_t j = 0; j < i; ++j) EXPECT_NE(a[i].base_color, a[j].base_color);
  }
  EXPECT_THROW(gen_dataset(1, 3, 0), InvalidArgument);
}

TEST(DatasetCache, RoundTrip) {
  DatasetConfig c;
  c.samples_per_class = 2;
  const auto data = gen_dataset(c);
  const auto dir = std::filesystem::temp_directory_path() / "scalegrpo_dataset_cache_test";
  std::filesystem::remove_all(dir);
  save_dataset(dir, data);
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t n = 0; n < data.size(); ++n) {
    EXPECT_EQ(back[n].class_id, data[n].class_id);
    // PPM stores 8-bit values
    EXPECT_LE(rmse(back[n].image, data[n].image), 0.5 / 255 + 1e-12);
  }
  std::filesystem::remove_all(dir);
}

PolicyConfig small_policy() {
  PolicyConfig c;
  c.schedule = ScaleSchedule::square({1, 2, 4});
  c.vocab_size = 16;
  c.d_model = 32;
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_classes = 4;
  return c;
}

DatasetConfig small_data() {
  DatasetConfig d;
  d.n_classes = 4;
  d.samples_per_class = 24;
  d.height = 4;
  d.width = 4;
  return d;
}

TEST(Pretrain, EmptyDatasetRejected) {
  const auto pc = small_policy();
  const Architecture arch(pc, build_codebook(0, pc.vocab_size, pc.latent_dim, 0.5));
  EXPECT_THROW(pretrain(arch, std::vector<LabeledImage>{}, PretrainConfig{}), InvalidArgument);
}

TEST(Pretrain, LossDropsAndRunIsDeterministic) {
  const auto pc = small_policy();
  const Architecture arch(pc, build_codebook(0, pc.vocab_size, pc.latent_dim, 0.5));
  const auto data = gen_dataset(small_data());
  PretrainConfig cfg;
  cfg.epochs = 4;
  cfg.minibatch = 16;
  cfg.lr = 3e-3;
  const auto codebook_before = arch.codebook().entries();
  const auto a = pretrain(arch, data, cfg);
  const auto b = pretrain(arch, data, cfg);
  EXPECT_EQ(a.params, b.params);
  ASSERT_EQ(a.history.size(), 4u);
  EXPECT_NEAR(mean_cross_entropy(arch, init_params(arch, cfg.seed), encode_dataset(arch, data), 1000),
              std::log(16.0), 0.1);
  EXPECT_LT(a.history.back().eval_loss, a.history.front().eval_loss);
  EXPECT_LT(a.history.back().eval_loss, std::log(16.0) - 0.5);
  EXPECT_EQ(arch.codebook().entries(), codebook_before);
}

TEST(Pretrain, FullLabelDropoutMakesConditionalMatchNull) {
  const auto pc = small_policy();
  const Architecture arch(pc, build_codebook(0, pc.vocab_size, pc.latent_dim, 0.5));
  const auto data = gen_dataset(small_data());
  PretrainConfig cfg;
  cfg.epochs = 2;
  cfg.minibatch = 16;
  cfg.lr = 3e-3;
  cfg.label_dropout_p = 1.0;
  const auto r = pretrain(arch, data, cfg);
  auto held_cfg = small_data();
  held_cfg.samples_per_class = 1;
  held_cfg.seed = 77;
  const auto held_out = gen_dataset(held_cfg);
  // Class embeddings other than null never receive gradient, so they keep
  // their init values; the trained null path dominates the comparison.
  const auto init = init_params(arch, cfg.seed);
  const auto& lay = arch.layout();
  const std::size_t d = static_cast<std::size_t>(pc.d_model);
  for (std::size_t n = lay.class_emb; n < lay.class_emb + d * static_cast<std::size_t>(pc.n_classes); ++n)
    EXPECT_EQ(r.params.values[n], init.values[n]);
  for (int c = 0; c < pc.n_classes; ++c) {
    const auto toks = encode(held_out[static_cast<std::size_t>(c)].image, pc.schedule, arch.codebook());
    const auto cond = log_prob(arch, r.params, c, toks, 1.0);
    const auto null = log_prob(arch, r.params, pc.null_class(), toks, 1.0);
    EXPECT_NEAR(sequence_log_prob(cond) / cond.size(), sequence_log_prob(null) / null.size(), 0.1);
  }
}

TEST(ClassFidelity, IdealAndWrongGenerators) {
  DatasetConfig c;
  c.noise_amp = 0.0;
  c.brightness_jitter = 0.0;
  const auto specs = class_specs(c);
  for (int k = 0; k < c.n_classes; ++k) {
    std::vector<Image> ideal, wrong;
    Rng rng(k);
    for (int n = 0; n < 5; ++n) {
      ideal.push_back(render(specs[static_cast<std::size_t>(k)], 8, 8, rng));
      wrong.push_back(render(specs[static_cast<std::size_t>((k + 3) % c.n_classes)], 8, 8, rng));
    }
    EXPECT_EQ(fidelity_of(ideal, k, specs), 1.0);
    EXPECT_EQ(fidelity_of(wrong, k, specs), 0.0);
  }
}

TEST(ClassFidelity, GreyOffsetDoesNotChangeTheNearestClass) {
  DatasetConfig c;
  const auto specs = class_specs(c);
  for (const auto& s : specs)
    for (double off : {-0.2, 0.1, 0.2}) {
      std::array<double, 3> col = s.base_color;
      for (double& v : col) v += off;
      EXPECT_EQ(nearest_class(col, specs), s.class_id);
    }
}

TEST(ClassFidelity, SeededAndOrderInvariant) {
  const auto pc = small_policy();
  const Architecture arch(pc, build_codebook(0, pc.vocab_size, pc.latent_dim, 0.5));
  const auto p = init_params(arch, 3);
  const auto specs = class_specs(small_data());
  SamplerConfig sc;
  sc.seed = 5;
  const double f = class_fidelity(arch, p, 1, 12, sc, specs);
  EXPECT_EQ(f, class_fidelity(arch, p, 1, 12, sc, specs));
  auto imgs = sample_class(arch, p, 1, 12, sc);
  std::reverse(imgs.begin(), imgs.end());
  EXPECT_EQ(fidelity_of(imgs, 1, specs), f);
}

}  // namespace
}  // namespace scalegrpo
