#pragma once

// Group-relative policy optimization over next-scale token sequences.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scalegrpo/adam.hpp"
#include "scalegrpo/error.hpp"
#include "scalegrpo/policy.hpp"
#include "scalegrpo/rewards.hpp"
#include "scalegrpo/rng.hpp"
#include "scalegrpo/sampler.hpp"

namespace scalegrpo {

struct GRPOConfig {
  int group_size = 16;     // G
  int batch_labels = 8;    // labels per iteration (32 at full scale)
  int minibatch = 32;      // trajectories per optimizer step
  int inner_epochs = 1;
  double clip_eps = 0.2;
  double kl_beta = 0.2;
  double temperature = 0.7;
  double lr = 1e-4;
  int iterations = 500;
  std::uint64_t seed = 0;
  int checkpoint_every = 50;
  std::vector<int> labels;  // empty: every class

  void validate(int n_classes) const {
    if (group_size < 2) throw InvalidArgument("group_size must be >= 2, got " + std::to_string(group_size));
    if (batch_labels < 1) throw InvalidArgument("batch_labels must be >= 1");
    if (minibatch < 1 || minibatch > batch_labels * group_size)
      throw InvalidArgument("minibatch must lie in [1, batch_labels * group_size]");
    if (inner_epochs < 1) throw InvalidArgument("inner_epochs must be >= 1");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw InvalidArgument("clip_eps must lie in (0, 1)");
    if (!(kl_beta >= 0.0) || !std::isfinite(kl_beta)) throw InvalidArgument("kl_beta must be >= 0");
    if (!(temperature > 0.0)) throw InvalidArgument("temperature must be positive");
    if (!(lr > 0.0)) throw InvalidArgument("lr must be positive");
    if (iterations < 0) throw InvalidArgument("iterations must be >= 0");
    if (checkpoint_every < 0) throw InvalidArgument("checkpoint_every must be >= 0");
    for (int l : labels)
      if (l < 0 || l >= n_classes) throw InvalidArgument("label " + std::to_string(l) + " outside the class range");
  }
};

/// A = (r - mean) / std with the population std; a group whose std is below
/// 1e-8 gets all-zero advantages.
inline std::vector<double> compute_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw InvalidArgument("advantages need a group of at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> a(rewards.size(), 0.0);
  if (sd < 1e-8) return a;
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = (rewards[i] - mean) / sd;
  return a;
}

inline constexpr double kMaxLogRatio = 60.0;

namespace detail {
// exp(x) with x clipped to +-60; `clipped` reports whether clipping happened.
inline double clipped_exp(double x, bool& clipped) {
  clipped = std::abs(x) > kMaxLogRatio;
  return std::exp(std::clamp(x, -kMaxLogRatio, kMaxLogRatio));
}
}  // namespace detail

// rho - log(rho) - 1 with rho = pi_ref / pi_theta.
inline double kl_term(double logp_ref, double logp_theta) {
  if (!std::isfinite(logp_ref) || !std::isfinite(logp_theta)) throw NumericError("kl_term on non-finite log-probs");
  bool clipped = false;
  const double x = logp_ref - logp_theta;
  const double rho = detail::clipped_exp(x, clipped);
  return rho - std::clamp(x, -kMaxLogRatio, kMaxLogRatio) - 1.0;
}

inline double clipped_surrogate(double logp_new, double logp_old, double advantage, double eps) {
  if (!std::isfinite(logp_new) || !std::isfinite(logp_old) || !std::isfinite(advantage))
    throw NumericError("clipped_surrogate on non-finite input");
  bool clipped = false;
  const double ratio = detail::clipped_exp(logp_new - logp_old, clipped);
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - eps, 1.0 + eps) * advantage);
}

struct GrpoLossResult {
  LossAndGrad value;
  double kl_mean = 0.0;
  double clip_frac = 0.0;
  double tokens = 0.0;
  std::int64_t exponent_clips = 0;
};

/// -(1/N) sum clipped_surrogate + beta (1/N) sum kl_term over all N tokens of
/// the batch, each trajectory's advantage broadcast to its tokens. Log-probs
/// under theta and theta_ref use the temperature-scaled softmax.
template <typename Scalar = float, typename P = float>
GrpoLossResult grpo_loss(const Architecture& arch, std::span<const P> theta, const PolicyParams& theta_ref,
                         const std::vector<const Trajectory*>& batch, double clip_eps, double beta, double tau) {
  if (batch.empty()) throw InvalidArgument("GRPO loss over an empty batch");
  arch.check_params(theta_ref);
  double n_tok = 0.0;
  for (const auto* t : batch) {
    if (!t->advantage) throw InvalidState("trajectory is missing its advantage");
    if (t->old_log_probs.size() != static_cast<std::size_t>(t->tokens.size()))
      throw InvalidState("trajectory old log-probs do not match its tokens");
    n_tok += t->tokens.size();
  }
  std::vector<TokenLogProbs> ref(batch.size());
  for (std::size_t s = 0; s < batch.size(); ++s)
    ref[s] = log_prob<Scalar>(arch, theta_ref, batch[s]->class_label, batch[s]->tokens, tau);

  GrpoLossResult out;
  out.tokens = n_tok;
  double kl_sum = 0.0, clipped_tokens = 0.0;
  std::int64_t exp_clips = 0;
  TokenObjectiveLoss obj;
  obj.tau = tau;
  for (const auto* t : batch) obj.batch.push_back({t->class_label, &t->tokens});
  obj.fn = [&](std::size_t s, std::span<const double> logp, std::span<double> dlogp) {
    const auto* traj = batch[s];
    const double A = *traj->advantage;
    double loss = 0.0;
    for (std::size_t i = 0; i < logp.size(); ++i) {
      bool c1 = false, c2 = false;
      const double ratio = detail::clipped_exp(logp[i] - traj->old_log_probs[i], c1);
      const double clipped_ratio = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
      const double unclipped_term = ratio * A;
      const double clipped_term = clipped_ratio * A;
      const bool take_unclipped = unclipped_term <= clipped_term;
      const double surr = take_unclipped ? unclipped_term : clipped_term;
      const double dsurr = (take_unclipped && !c1) ? unclipped_term : 0.0;
      if (ratio < 1.0 - clip_eps || ratio > 1.0 + clip_eps) clipped_tokens += 1.0;

      const double x = ref[s][i] - logp[i];
      const double rho_ref = detail::clipped_exp(x, c2);
      const double kl = rho_ref - std::clamp(x, -kMaxLogRatio, kMaxLogRatio) - 1.0;
      const double dkl = c2 ? 0.0 : 1.0 - rho_ref;
      exp_clips += (c1 ? 1 : 0) + (c2 ? 1 : 0);
      kl_sum += kl;
      loss += (-surr + beta * kl) / n_tok;
      dlogp[i] = (-dsurr + beta * dkl) / n_tok;
    }
    return loss;
  };
  out.value = loss_and_grad<Scalar, P>(arch, theta, obj);
  out.kl_mean = kl_sum / n_tok;
  out.clip_frac = clipped_tokens / n_tok;
  out.exponent_clips = exp_clips;
  return out;
}

struct TrainState {
  PolicyParams params;
  PolicyParams params_ref;
  std::int64_t iteration = 0;
  AdamState adam;
};

struct IterationMetrics {
  std::int64_t iter = 0;
  double reward_mean = 0.0;
  double reward_min = 0.0;
  double reward_max = 0.0;
  double kl_mean = 0.0;
  double clip_frac = 0.0;
  double loss = 0.0;
  double adv_abs_mean = 0.0;
  std::int64_t wall_ms = 0;
  // Diagnostics outside the JSONL schema.
  double first_step_clip_frac = 0.0;
  std::int64_t exponent_clips = 0;
};

// Labels for one iteration: uniform over the label set, seeded by (seed, iteration).
inline std::vector<int> draw_labels(const GRPOConfig& cfg, int n_classes, std::int64_t iteration) {
  std::vector<int> pool = cfg.labels;
  if (pool.empty()) {
    pool.resize(static_cast<std::size_t>(n_classes));
    std::iota(pool.begin(), pool.end(), 0);
  }
  Rng rng(hash_seed(cfg.seed, static_cast<std::uint64_t>(iteration), 1));
  std::vector<int> out(static_cast<std::size_t>(cfg.batch_labels));
  for (int& l : out) l = pool[static_cast<std::size_t>(rng.below(pool.size()))];
  return out;
}

/// One sample-score-optimize round. On any reward failure the exception
/// propagates and `state` is left untouched.
inline IterationMetrics train_iteration(const Architecture& arch, TrainState& state, const GRPOConfig& cfg,
                                        const RewardSpec& reward) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& pcfg = arch.config();
  cfg.validate(pcfg.n_classes);
  arch.check_params(state.params);
  arch.check_params(state.params_ref);

  const PolicyParams theta_old = state.params;
  const auto labels = draw_labels(cfg, pcfg.n_classes, state.iteration);

  std::vector<Trajectory> trajs;
  trajs.reserve(static_cast<std::size_t>(cfg.batch_labels * cfg.group_size));
  for (std::size_t g = 0; g < labels.size(); ++g) {
    const auto seed = hash_seed(cfg.seed, static_cast<std::uint64_t>(state.iteration), 2, g);
    for (auto& t : sample_group(arch, theta_old, labels[g], cfg.group_size, cfg.temperature, seed))
      trajs.push_back(std::move(t));
  }
  std::vector<const Image*> images;
  for (auto& t : trajs) {
    t.image = decode(t.tokens, arch.codebook());
    images.push_back(&t.image);
  }
  const auto rewards = score_batch(reward, images);  // may throw; state unchanged

  IterationMetrics m;
  m.iter = state.iteration + 1;
  m.reward_min = *std::min_element(rewards.begin(), rewards.end());
  m.reward_max = *std::max_element(rewards.begin(), rewards.end());
  for (std::size_t g = 0; g < labels.size(); ++g) {
    const auto G = static_cast<std::size_t>(cfg.group_size);
    const std::span<const double> group(rewards.data() + g * G, G);
    const auto adv = compute_advantages(group);
    double mean = 0.0, sq = 0.0;
    for (double a : adv) mean += a;
    mean /= static_cast<double>(G);
    for (double a : adv) sq += (a - mean) * (a - mean);
    const bool degenerate = std::all_of(adv.begin(), adv.end(), [](double a) { return a == 0.0; });
    if (!degenerate && (std::abs(mean) > 1e-9 || std::abs(std::sqrt(sq / static_cast<double>(G)) - 1.0) > 1e-9))
      throw NumericError("group advantages lost zero mean / unit std");
    for (std::size_t i = 0; i < G; ++i) {
      trajs[g * G + i].reward = group[i];
      trajs[g * G + i].advantage = adv[i];
    }
  }
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    m.reward_mean += rewards[i];
    m.adv_abs_mean += std::abs(*trajs[i].advantage);
  }
  m.reward_mean /= static_cast<double>(trajs.size());
  m.adv_abs_mean /= static_cast<double>(trajs.size());

  // Optimize on a copy so that a numeric failure leaves the state intact.
  PolicyParams params = state.params;
  AdamState adam = state.adam;
  AdamHyper hyper;
  hyper.lr = cfg.lr;
  double kl_sum = 0.0, clip_sum = 0.0, loss_sum = 0.0, tok_sum = 0.0;
  int steps = 0;
  for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
    std::vector<std::size_t> order(trajs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(hash_seed(cfg.seed, static_cast<std::uint64_t>(state.iteration), 3, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.minibatch)) {
      std::vector<const Trajectory*> mb;
      for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(cfg.minibatch)); ++k)
        mb.push_back(&trajs[order[k]]);
      const auto r = grpo_loss<float, float>(arch, std::span<const float>(params.values), state.params_ref, mb,
                                             cfg.clip_eps, cfg.kl_beta, cfg.temperature);
      if (steps == 0) m.first_step_clip_frac = r.clip_frac;
      kl_sum += r.kl_mean * r.tokens;
      clip_sum += r.clip_frac * r.tokens;
      loss_sum += r.value.loss;
      tok_sum += r.tokens;
      m.exponent_clips += r.exponent_clips;
      adam_step(params, adam, r.value.grad, hyper);
      ++steps;
    }
  }
  for (float v : params.values)
    if (!std::isfinite(v)) throw NumericError("non-finite parameter after iteration " + std::to_string(m.iter));
  if (m.exponent_clips > 0)
    std::cerr << "warning: iteration " << m.iter << " clipped " << m.exponent_clips
              << " log-ratio exponents at +-" << kMaxLogRatio << "\n";

  m.kl_mean = kl_sum / tok_sum;
  m.clip_frac = clip_sum / tok_sum;
  m.loss = loss_sum / steps;
  state.params = std::move(params);
  state.adam = std::move(adam);
  state.iteration += 1;
  m.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

struct TrainHooks {
  std::function<void(const IterationMetrics&)> on_iteration;
  std::function<void(const TrainState&)> on_checkpoint;  // every cfg.checkpoint_every iterations
  // Returning true stops training after the current iteration.
  std::function<bool(const IterationMetrics&)> should_stop;
};

/// Runs iterations until state.iteration reaches cfg.iterations.
inline std::vector<IterationMetrics> train(const Architecture& arch, TrainState& state, const GRPOConfig& cfg,
                                           const RewardSpec& reward, const TrainHooks& hooks = {}) {
  cfg.validate(arch.config().n_classes);
  std::vector<IterationMetrics> log;
  while (state.iteration < cfg.iterations) {
    const auto m = train_iteration(arch, state, cfg, reward);
    log.push_back(m);
    if (hooks.on_iteration) hooks.on_iteration(m);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0)
      hooks.on_checkpoint(state);
    if (hooks.should_stop && hooks.should_stop(m)) break;
  }
  return log;
}

}  // namespace scalegrpo
