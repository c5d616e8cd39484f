#include <gtest/gtest.h>

#include <cmath>

#include "scalegrpo/sampler.hpp"

namespace scalegrpo {
namespace {

PolicyConfig small_config() {
  PolicyConfig c;
  c.schedule = ScaleSchedule::square({1, 2, 4});
  c.vocab_size = 8;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_classes = 3;
  return c;
}

Architecture make_arch(const PolicyConfig& c) {
  return Architecture(c, build_codebook(7, c.vocab_size, c.latent_dim, 0.5));
}

PolicyParams jittered(const Architecture& arch, std::uint64_t seed) {
  auto p = init_params(arch, seed);
  Rng rng(seed + 1);
  for (float& v : p.values) v += static_cast<float>(0.3 * rng.normal());
  return p;
}

TEST(ApplyCfg, IdentityScales) {
  const std::vector<double> cond{2.0, -1.0, 0.5}, uncond{1.0, 0.25, -3.0};
  EXPECT_EQ(apply_cfg(cond, uncond, 1.0), cond);
  EXPECT_EQ(apply_cfg(cond, uncond, 0.0), uncond);
}

TEST(ApplyCfg, Extrapolates) {
  const auto r = apply_cfg(std::vector<double>{2, 0}, std::vector<double>{1, 0}, 3.0);
  EXPECT_EQ(r, (std::vector<double>{4, 0}));
}

TEST(Filter, TopOneKeepsArgmax) {
  const auto r = filter_top_k_top_p(std::vector<double>{0.2, 0.5, 0.3}, 1, std::nullopt);
  EXPECT_EQ(r, (std::vector<double>{0, 1, 0}));
}

TEST(Filter, TopKTiesGoToLowerIndex) {
  const auto r = filter_top_k_top_p(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 2, std::nullopt);
  EXPECT_EQ(r, (std::vector<double>{0.5, 0.5, 0, 0}));
}

TEST(Filter, IdentityWithFullSupport) {
  const std::vector<double> p{0.1, 0.6, 0.3};
  const auto r = filter_top_k_top_p(p, 3, 1.0);
  for (std::size_t j = 0; j < p.size(); ++j) EXPECT_NEAR(r[j], p[j], 1e-15);
}

TEST(Filter, TopPRenormalizes) {
  const auto r = filter_top_k_top_p(std::vector<double>{0.5, 0.3, 0.2}, std::nullopt, 0.7);
  EXPECT_NEAR(r[0], 0.625, 1e-12);
  EXPECT_NEAR(r[1], 0.375, 1e-12);
  EXPECT_EQ(r[2], 0.0);
}

TEST(Filter, RejectsZeroParameters) {
  const std::vector<double> p{0.5, 0.5};
  EXPECT_THROW(filter_top_k_top_p(p, 0, std::nullopt), InvalidArgument);
  EXPECT_THROW(filter_top_k_top_p(p, std::nullopt, 0.0), InvalidArgument);
}

TEST(Filter, PropertySumsToOneWithinSupport) {
  Rng rng(42);
  for (int trial = 0; trial < 500; ++trial) {
    const int V = 2 + static_cast<int>(rng.below(14));
    std::vector<double> p(static_cast<std::size_t>(V));
    double s = 0.0;
    for (auto& v : p) {
      v = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
      s += v;
    }
    if (s == 0.0) p[0] = s = 1.0;
    for (auto& v : p) v /= s;
    const std::optional<int> k = rng.uniform() < 0.5 ? std::optional<int>(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(V)))) : std::nullopt;
    const std::optional<double> tp = rng.uniform() < 0.5 ? std::optional<double>(0.05 + 0.95 * rng.uniform()) : std::nullopt;
    const auto r = filter_top_k_top_p(p, k, tp);
    double total = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      total += r[j];
      if (p[j] == 0.0) { EXPECT_EQ(r[j], 0.0); }
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(SampleGroup, DeterministicForSeed) {
  const auto c = small_config();
  const auto arch = make_arch(c);
  const auto p = jittered(arch, 1);
  const auto a = sample_group(arch, p, 1, 6, 0.7, 99);
  const auto b = sample_group(arch, p, 1, 6, 0.7, 99);
  ASSERT_EQ(a.size(), 6u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].tokens, b[i].tokens);
    EXPECT_EQ(a[i].old_log_probs, b[i].old_log_probs);
  }
  const auto other = sample_group(arch, p, 1, 6, 0.7, 100);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs = differs || !(a[i].tokens == other[i].tokens);
  EXPECT_TRUE(differs);
}

TEST(SampleGroup, RecordedLogProbsMatchRecomputation) {
  const auto c = small_config();
  const auto arch = make_arch(c);
  const auto p = jittered(arch, 2);
  for (const auto& traj : sample_group(arch, p, 2, 8, 0.7, 5)) {
    const auto lp = log_prob(arch, p, 2, traj.tokens, 0.7);
    for (std::size_t t = 0; t < lp.size(); ++t) EXPECT_LE(std::abs(lp[t] - traj.old_log_probs[t]), 1e-6);
  }
}

TEST(SampleGroup, UniformModelFrequencies) {
  PolicyConfig c = small_config();
  c.schedule = ScaleSchedule::square({1});
  c.vocab_size = 4;
  const auto arch = make_arch(c);
  auto p = init_params(arch, 0);
  const auto& lay = arch.layout();
  std::fill(p.values.begin() + static_cast<std::ptrdiff_t>(lay.head_w), p.values.end(), 0.0f);
  const auto group = sample_group(arch, p, 0, 10'000, 0.7, 2024);
  std::vector<int> counts(4, 0);
  for (const auto& t : group) ++counts[static_cast<std::size_t>(t.tokens.flat()[0])];
  for (int n : counts) EXPECT_NEAR(n / 10'000.0, 0.25, 0.02);
}

TEST(SampleGroup, RejectsEmptyGroupAndNullClass) {
  const auto c = small_config();
  const auto arch = make_arch(c);
  const auto p = init_params(arch, 0);
  EXPECT_THROW(sample_group(arch, p, 0, 0, 0.7, 1), InvalidArgument);
  EXPECT_THROW(sample_group(arch, p, c.null_class(), 2, 0.7, 1), InvalidArgument);
}

TEST(SampleGroup, LaterScalesDoNotAffectEarlierDraws) {
  // Each trajectory consumes exactly one uniform per token, so two models that
  // agree on the first-scale logits draw the same first-scale token.
  const auto c = small_config();
  const auto arch = make_arch(c);
  const auto p = jittered(arch, 3);
  auto q = p;
  const auto& lay = arch.layout();
  // Perturb only the input projection: affects blocks >= 1, never block 0.
  for (int n = 0; n < c.latent_dim * c.d_model; ++n) q.values[lay.in_w + static_cast<std::size_t>(n)] += 0.5f;
  const auto a = sample_group(arch, p, 0, 16, 0.7, 8);
  const auto b = sample_group(arch, q, 0, 16, 0.7, 8);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].tokens.grid(0)[0], b[i].tokens.grid(0)[0]);
    EXPECT_EQ(a[i].old_log_probs[0], b[i].old_log_probs[0]);
  }
}

TEST(SampleInference, UnitCfgNoFilterMatchesConditionalDistribution) {
  // With s = 1 and no filters, the first-token distribution equals the
  // conditional softmax at the sampling temperature.
  PolicyConfig c = small_config();
  c.schedule = ScaleSchedule::square({1});
  const auto arch = make_arch(c);
  const auto p = jittered(arch, 4);
  const auto logits = forward(arch, p, 1, MultiScaleTokens(c.schedule));
  std::vector<double> lp(static_cast<std::size_t>(c.vocab_size));
  log_softmax(logits.at(0), 0.7, lp);
  std::vector<int> counts(static_cast<std::size_t>(c.vocab_size), 0);
  const int n = 20'000;
  for (int s = 0; s < n; ++s) {
    SamplerConfig sc;
    sc.cfg_scale = 1.0;
    sc.top_k.reset();
    sc.top_p.reset();
    sc.seed = static_cast<std::uint64_t>(s);
    ++counts[static_cast<std::size_t>(sample_inference(arch, p, 1, sc).tokens.flat()[0])];
  }
  for (int j = 0; j < c.vocab_size; ++j) {
    const double pj = std::exp(lp[static_cast<std::size_t>(j)]);
    EXPECT_NEAR(counts[static_cast<std::size_t>(j)] / static_cast<double>(n), pj, 4.0 * std::sqrt(pj * (1 - pj) / n) + 1e-3);
  }
}

TEST(SampleInference, TopOneIsSeedIndependent) {
  const auto c = small_config();
  const auto arch = make_arch(c);
  const auto p = jittered(arch, 5);
  SamplerConfig sc;
  sc.top_k = 1;
  sc.seed = 1;
  const auto a = sample_inference(arch, p, 0, sc);
  sc.seed = 987654;
  const auto b = sample_inference(arch, p, 0, sc);
  EXPECT_EQ(a.tokens, b.tokens);
}

TEST(SampleInference, DeterministicPpmBytes) {
  const auto c = small_config();
  const auto arch = make_arch(c);
  const auto p = jittered(arch, 6);
  SamplerConfig sc;
  sc.seed = 31;
  EXPECT_EQ(to_ppm(sample_inference(arch, p, 2, sc).image), to_ppm(sample_inference(arch, p, 2, sc).image));
}

TEST(SampleInference, ValidatesConfig) {
  const auto c = small_config();
  const auto arch = make_arch(c);
  const auto p = init_params(arch, 0);
  SamplerConfig sc;
  sc.top_k = c.vocab_size + 1;
  EXPECT_THROW(sample_inference(arch, p, 0, sc), InvalidArgument);
  sc.top_k.reset();
  sc.temperature = 0.0;
  EXPECT_THROW(sample_inference(arch, p, 0, sc), InvalidArgument);
}

}  // namespace
}  // namespace scalegrpo
