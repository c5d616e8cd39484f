#pragma once

// Scale-by-scale rollouts. Training-time group sampling draws from the plain
// temperature softmax; inference adds classifier-free guidance and
// top-k / top-p filtering.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "scalegrpo/error.hpp"
#include "scalegrpo/msvq.hpp"
#include "scalegrpo/policy.hpp"
#include "scalegrpo/rng.hpp"

namespace scalegrpo {

struct Trajectory {
  int class_label = 0;
  MultiScaleTokens tokens;
  TokenLogProbs old_log_probs;  // under theta_old at the sampling temperature
  Image image;
  std::optional<double> reward;
  std::optional<double> advantage;
};

struct SamplerConfig {
  double temperature = 0.7;
  double cfg_scale = 1.5;
  std::optional<int> top_k;
  std::optional<double> top_p = 0.95;
  std::uint64_t seed = 0;

  void validate(int vocab) const {
    if (!(temperature > 0.0)) throw InvalidArgument("sampler temperature must be positive");
    if (!(cfg_scale >= 0.0) || !std::isfinite(cfg_scale)) throw InvalidArgument("cfg_scale must be >= 0");
    if (top_k && (*top_k < 1 || *top_k > vocab))
      throw InvalidArgument("top_k must lie in [1, " + std::to_string(vocab) + "]");
    if (top_p && !(*top_p > 0.0 && *top_p <= 1.0)) throw InvalidArgument("top_p must lie in (0, 1]");
  }
};

// Index j with u < cumulative(p)[j]; falls back to the last non-zero entry.
inline int draw_index(std::span<const double> probs, double u) {
  double cum = 0.0;
  int last = 0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (probs[j] <= 0.0) continue;
    cum += probs[j];
    last = static_cast<int>(j);
    if (u < cum) return last;
  }
  return last;
}

inline std::vector<double> apply_cfg(std::span<const double> cond, std::span<const double> uncond, double scale) {
  if (cond.size() != uncond.size()) throw InvalidArgument("cfg logits of different lengths");
  std::vector<double> out(cond.size());
  for (std::size_t j = 0; j < cond.size(); ++j) out[j] = uncond[j] + scale * (cond[j] - uncond[j]);
  return out;
}

/// Top-k (ties to the lower index), then top-p over the renormalized survivors.
inline std::vector<double> filter_top_k_top_p(std::span<const double> probs, std::optional<int> top_k,
                                              std::optional<double> top_p) {
  if (top_k && *top_k <= 0) throw InvalidArgument("top_k must be positive");
  if (top_p && !(*top_p > 0.0 && *top_p <= 1.0)) throw InvalidArgument("top_p must lie in (0, 1]");
  const std::size_t V = probs.size();
  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });

  std::size_t keep = top_k ? std::min<std::size_t>(static_cast<std::size_t>(*top_k), V) : V;
  if (top_p) {
    double kept_mass = 0.0;
    for (std::size_t r = 0; r < keep; ++r) kept_mass += probs[order[r]];
    double cum = 0.0;
    for (std::size_t r = 0; r < keep; ++r) {
      cum += probs[order[r]] / kept_mass;
      if (cum >= *top_p) {
        keep = r + 1;
        break;
      }
    }
  }
  std::vector<double> out(V, 0.0);
  double mass = 0.0;
  for (std::size_t r = 0; r < keep; ++r) mass += probs[order[r]];
  for (std::size_t r = 0; r < keep; ++r) out[order[r]] = probs[order[r]] / mass;
  return out;
}

namespace detail {

// Samples one trajectory from softmax(logits / tau), recording per-token log-probs.
template <typename Scalar>
void rollout(const Network<Scalar>& net, int label, double tau, Rng& rng, MultiScaleTokens& tokens,
             TokenLogProbs& logp) {
  const auto& cfg = net.arch().config();
  const int V = cfg.vocab_size;
  tokens = MultiScaleTokens(cfg.schedule);
  logp.assign(static_cast<std::size_t>(cfg.seq_len()), 0.0);
  auto tr = net.start(label);
  std::vector<double> row(static_cast<std::size_t>(V)), lp(static_cast<std::size_t>(V)), pr(static_cast<std::size_t>(V));
  for (int b = 0; b < cfg.schedule.num_scales(); ++b) {
    net.run_block(tr, b, tokens);
    for (int t = cfg.schedule.offset(b); t < cfg.schedule.offset(b + 1); ++t) {
      for (int j = 0; j < V; ++j) row[static_cast<std::size_t>(j)] = static_cast<double>(tr.logits(t, j));
      log_softmax(row, tau, lp);
      for (int j = 0; j < V; ++j) pr[static_cast<std::size_t>(j)] = std::exp(lp[static_cast<std::size_t>(j)]);
      const int tok = draw_index(pr, rng.uniform());
      tokens.flat()[static_cast<std::size_t>(t)] = tok;
      logp[static_cast<std::size_t>(t)] = lp[static_cast<std::size_t>(tok)];
    }
  }
}

}  // namespace detail

/// G trajectories for one label under theta_old. Trajectory i draws from its
/// own stream seeded with hash(seed, i), advanced token by token in
/// scale-major, row-major order.
template <typename Scalar = float>
std::vector<Trajectory> sample_group(const Architecture& arch, const PolicyParams& params_old, int label, int group_size,
                                     double tau, std::uint64_t seed) {
  if (group_size < 1) throw InvalidArgument("group size must be >= 1");
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
  arch.check_label(label, /*allow_null=*/false);
  arch.check_params(params_old);
  const Network<Scalar> net(arch, params_old);
  std::vector<Trajectory> out(static_cast<std::size_t>(group_size));
  for (int i = 0; i < group_size; ++i) {
    auto& traj = out[static_cast<std::size_t>(i)];
    traj.class_label = label;
    Rng rng(hash_seed(seed, static_cast<std::uint64_t>(i)));
    detail::rollout(net, label, tau, rng, traj.tokens, traj.old_log_probs);
  }
  return out;
}

struct Sample {
  MultiScaleTokens tokens;
  Image image;
};

/// Inference sample: conditional and null-class passes combined with CFG,
/// then temperature, top-k/top-p and a multinomial draw per token.
template <typename Scalar = float>
Sample sample_inference(const Architecture& arch, const PolicyParams& params, int label, const SamplerConfig& config) {
  const auto& cfg = arch.config();
  config.validate(cfg.vocab_size);
  arch.check_label(label, /*allow_null=*/false);
  arch.check_params(params);
  const Network<Scalar> net(arch, params);
  Rng rng(hash_seed(config.seed, 0x5A3E));
  const int V = cfg.vocab_size;
  Sample out{MultiScaleTokens(cfg.schedule), Image()};
  auto cond = net.start(label);
  auto uncond = net.start(cfg.null_class());
  std::vector<double> c(static_cast<std::size_t>(V)), u(static_cast<std::size_t>(V)), lp(static_cast<std::size_t>(V)),
      pr(static_cast<std::size_t>(V));
  for (int b = 0; b < cfg.schedule.num_scales(); ++b) {
    net.run_block(cond, b, out.tokens);
    net.run_block(uncond, b, out.tokens);
    for (int t = cfg.schedule.offset(b); t < cfg.schedule.offset(b + 1); ++t) {
      for (int j = 0; j < V; ++j) {
        c[static_cast<std::size_t>(j)] = static_cast<double>(cond.logits(t, j));
        u[static_cast<std::size_t>(j)] = static_cast<double>(uncond.logits(t, j));
      }
      const auto guided = apply_cfg(c, u, config.cfg_scale);
      log_softmax(guided, config.temperature, lp);
      for (int j = 0; j < V; ++j) pr[static_cast<std::size_t>(j)] = std::exp(lp[static_cast<std::size_t>(j)]);
      const auto filtered = filter_top_k_top_p(pr, config.top_k, config.top_p);
      out.tokens.flat()[static_cast<std::size_t>(t)] = draw_index(filtered, rng.uniform());
    }
  }
  out.image = decode(out.tokens, arch.codebook());
  return out;
}

}  // namespace scalegrpo
