#pragma once

// Experiment runners shared by the command-line tool and the acceptance
// suite: pretraining, GRPO training, sampling, evaluation and sweeps.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "scalegrpo/checkpoint.hpp"
#include "scalegrpo/config.hpp"
#include "scalegrpo/grpo.hpp"
#include "scalegrpo/pretrain.hpp"
#include "scalegrpo/rewards.hpp"
#include "scalegrpo/sampler.hpp"

namespace scalegrpo {

namespace fs = std::filesystem;

inline std::string metrics_line(const IterationMetrics& m) {
  nlohmann::ordered_json j;
  j["iter"] = m.iter;
  j["reward_mean"] = m.reward_mean;
  j["reward_min"] = m.reward_min;
  j["reward_max"] = m.reward_max;
  j["kl_mean"] = m.kl_mean;
  j["clip_frac"] = m.clip_frac;
  j["loss"] = m.loss;
  j["adv_abs_mean"] = m.adv_abs_mean;
  j["wall_ms"] = m.wall_ms;
  return j.dump();
}

inline IterationMetrics parse_metrics_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  IterationMetrics m;
  m.iter = j.at("iter").get<std::int64_t>();
  m.reward_mean = j.at("reward_mean").get<double>();
  m.reward_min = j.at("reward_min").get<double>();
  m.reward_max = j.at("reward_max").get<double>();
  m.kl_mean = j.at("kl_mean").get<double>();
  m.clip_frac = j.at("clip_frac").get<double>();
  m.loss = j.at("loss").get<double>();
  m.adv_abs_mean = j.at("adv_abs_mean").get<double>();
  m.wall_ms = j.at("wall_ms").get<std::int64_t>();
  return m;
}

inline std::vector<IterationMetrics> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  std::vector<IterationMetrics> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(parse_metrics_line(line));
  return out;
}

// ---------------------------------------------------------------------------
// SVG line charts.

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

namespace detail {
inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(4) << v;
  return s.str();
}
inline std::string escape_xml(const std::string& in) {
  std::string out;
  for (char c : in) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}
}  // namespace detail

/// One panel per series group, stacked vertically; each panel has its own y range.
inline std::string svg_chart(const std::string& title, const std::string& x_label,
                             const std::vector<std::vector<Series>>& panels) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};
  const double W = 720, PH = 240, ML = 70, MR = 150, MT = 40, GAP = 50;
  const double H = MT + panels.size() * (PH + GAP);
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << detail::escape_xml(title) << "</text>\n";
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const double top = MT + p * (PH + GAP);
    const double pw = W - ML - MR;
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    bool first = true;
    for (const auto& s : panels[p])
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!std::isfinite(s.y[i])) continue;
        if (first) {
          x0 = x1 = s.x[i];
          y0 = y1 = s.y[i];
          first = false;
        }
        x0 = std::min(x0, s.x[i]);
        x1 = std::max(x1, s.x[i]);
        y0 = std::min(y0, s.y[i]);
        y1 = std::max(y1, s.y[i]);
      }
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) {
      y0 -= 0.5;
      y1 += 0.5;
    }
    auto px = [&](double x) { return ML + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return top + PH - (y - y0) / (y1 - y0) * PH; };
    o << "<rect x=\"" << ML << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << PH
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int t = 0; t <= 4; ++t) {
      const double yv = y0 + (y1 - y0) * t / 4.0, xv = x0 + (x1 - x0) * t / 4.0;
      o << "<text x=\"" << ML - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << detail::fmt(yv) << "</text>\n";
      o << "<text x=\"" << px(xv) << "\" y=\"" << top + PH + 16 << "\" text-anchor=\"middle\">" << detail::fmt(xv) << "</text>\n";
    }
    o << "<text x=\"" << ML + pw / 2 << "\" y=\"" << top + PH + 34 << "\" text-anchor=\"middle\">"
      << detail::escape_xml(x_label) << "</text>\n";
    for (std::size_t k = 0; k < panels[p].size(); ++k) {
      const auto& s = panels[p][k];
      const char* color = kColors[k % 7];
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i)
        if (std::isfinite(s.y[i])) o << detail::fmt(px(s.x[i])) << "," << detail::fmt(py(s.y[i])) << " ";
      o << "\"/>\n";
      o << "<text x=\"" << ML + pw + 10 << "\" y=\"" << top + 16 + 16 * k << "\" fill=\"" << color << "\">"
        << detail::escape_xml(s.name) << "</text>\n";
    }
  }
  o << "</svg>\n";
  return o.str();
}

inline std::string reward_curve_svg(const std::vector<IterationMetrics>& log, const std::string& title) {
  Series r{"reward_mean", {}, {}}, k{"kl_mean", {}, {}};
  for (const auto& m : log) {
    r.x.push_back(static_cast<double>(m.iter));
    r.y.push_back(m.reward_mean);
    k.x.push_back(static_cast<double>(m.iter));
    k.y.push_back(m.kl_mean);
  }
  return svg_chart(title, "iteration", {{r}, {k}});
}

inline void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------
// Pretraining.

inline Codebook make_codebook(const ExperimentConfig& cfg) {
  return build_codebook(cfg.codebook.seed, cfg.policy.vocab_size, cfg.policy.latent_dim, cfg.codebook.level_gain);
}

struct PretrainRun {
  Checkpoint checkpoint;
  std::vector<EpochStats> history;
};

/// Writes pretrained.ckpt and pretrain_metrics.jsonl into out_dir.
inline PretrainRun run_pretrain(const ExperimentConfig& cfg, const fs::path& out_dir, bool verbose = false) {
  cfg.validate();
  const Architecture arch(cfg.policy, make_codebook(cfg));
  const auto data = gen_dataset(cfg.dataset);
  fs::create_directories(out_dir);
  std::ofstream metrics(out_dir / "pretrain_metrics.jsonl", std::ios::binary);
  auto res = pretrain(arch, data, cfg.pretrain, [&](const EpochStats& s) {
    nlohmann::ordered_json j;
    j["epoch"] = s.epoch;
    j["train_loss"] = s.train_loss;
    j["eval_loss"] = s.eval_loss;
    j["wall_ms"] = s.wall_ms;
    metrics << j.dump() << "\n" << std::flush;
    if (verbose) std::cerr << "epoch " << s.epoch << " train_loss " << s.train_loss << " eval_loss " << s.eval_loss << "\n";
  });
  PretrainRun run;
  run.checkpoint.policy = cfg.policy;
  run.checkpoint.codebook = arch.codebook();
  run.checkpoint.params = std::move(res.params);
  run.checkpoint.dataset = cfg.dataset;
  run.checkpoint.lineage = {{"stage", "pretrain"}, {"pretrain_seed", cfg.pretrain.seed},
                            {"dataset_seed", cfg.dataset.seed}, {"epochs", res.history.size()}};
  run.history = std::move(res.history);
  save_checkpoint(out_dir / "pretrained.ckpt", run.checkpoint);
  return run;
}

// ---------------------------------------------------------------------------
// GRPO training.

struct TrainOptions {
  std::optional<double> stop_reward;  // stop after the first iteration whose reward_mean reaches this
  bool verbose = false;
};

struct TrainRun {
  Checkpoint checkpoint;
  std::vector<IterationMetrics> log;
};

inline TrainState state_from_checkpoint(const Checkpoint& ck) {
  TrainState st;
  st.params = ck.params;
  st.params_ref = ck.reference();
  st.iteration = ck.iteration;
  st.adam = ck.adam;
  return st;
}

/// Continues from `input` (a pretrained or partially trained checkpoint) until
/// cfg.grpo.iterations. Writes checkpoint.ckpt, metrics.jsonl (appended) and
/// reward_curve.svg into out_dir.
inline TrainRun run_train(const ExperimentConfig& cfg, const Checkpoint& input, const fs::path& out_dir,
                          const TrainOptions& opts = {}) {
  cfg.grpo.validate(input.policy.n_classes);
  const Architecture arch = input.architecture();
  TrainState st = state_from_checkpoint(input);
  fs::create_directories(out_dir);
  const fs::path metrics_path = out_dir / "metrics.jsonl";
  if (input.iteration == 0) std::ofstream(metrics_path, std::ios::binary | std::ios::trunc);
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::app);

  auto to_checkpoint = [&](const TrainState& s) {
    Checkpoint ck = input;
    ck.params = s.params;
    ck.params_ref = s.params_ref;
    ck.adam = s.adam;
    ck.iteration = s.iteration;
    ck.lineage = input.lineage;
    ck.lineage["grpo_seed"] = cfg.grpo.seed;
    ck.lineage["stage"] = "grpo";
    ck.lineage["reward"] = detail::reward_to_json(cfg.reward).at("kind");
    return ck;
  };

  TrainHooks hooks;
  hooks.on_iteration = [&](const IterationMetrics& m) {
    metrics << metrics_line(m) << "\n" << std::flush;
    if (opts.verbose)
      std::cerr << "iter " << m.iter << " reward_mean " << m.reward_mean << " kl_mean " << m.kl_mean << " clip_frac "
                << m.clip_frac << "\n";
  };
  hooks.on_checkpoint = [&](const TrainState& s) {
    char name[64];
    std::snprintf(name, sizeof name, "iter_%06lld.ckpt", static_cast<long long>(s.iteration));
    save_checkpoint(out_dir / "checkpoints" / name, to_checkpoint(s));
  };
  if (opts.stop_reward)
    hooks.should_stop = [&](const IterationMetrics& m) { return m.reward_mean >= *opts.stop_reward; };

  TrainRun run;
  run.log = train(arch, st, cfg.grpo, cfg.reward, hooks);
  run.checkpoint = run.log.empty() ? input : to_checkpoint(st);
  save_checkpoint(out_dir / "checkpoint.ckpt", run.checkpoint);
  write_file(out_dir / "reward_curve.svg", reward_curve_svg(read_metrics(metrics_path), "GRPO training"));
  return run;
}

// ---------------------------------------------------------------------------
// Sampling and evaluation.

inline std::vector<fs::path> run_sample(const Checkpoint& ck, int class_id, int n, const SamplerConfig& sampler,
                                        const fs::path& out_dir) {
  if (n < 0) throw InvalidArgument("--n must be >= 0");
  const Architecture arch = ck.architecture();
  arch.check_label(class_id, /*allow_null=*/false);
  sampler.validate(ck.policy.vocab_size);
  fs::create_directories(out_dir);
  std::vector<fs::path> files;
  for (const auto& img : sample_class(arch, ck.params, class_id, n, sampler)) {
    const auto path = out_dir / (std::to_string(class_id) + "_" + std::to_string(files.size()) + ".ppm");
    write_file(path, to_ppm(img));
    files.push_back(path);
  }
  return files;
}

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

/// Samples n_per_class images for every class and scores them. The report
/// holds overall and per-class reward statistics plus class fidelity.
inline nlohmann::ordered_json run_eval(const Checkpoint& ck, const RewardSpec& reward, int n_per_class,
                                       const SamplerConfig& sampler) {
  if (n_per_class < 1) throw InvalidArgument("--n-per-class must be >= 1");
  const Architecture arch = ck.architecture();
  const auto specs = ck.dataset ? class_specs(*ck.dataset) : std::vector<ClassSpec>{};
  nlohmann::ordered_json rep;
  std::vector<double> all;
  nlohmann::ordered_json per_class = nlohmann::ordered_json::array();
  double fid_sum = 0.0;
  for (int c = 0; c < ck.policy.n_classes; ++c) {
    const auto images = sample_class(arch, ck.params, c, n_per_class, sampler);
    std::vector<const Image*> ptrs;
    for (const auto& im : images) ptrs.push_back(&im);
    const auto scores = score_batch(reward, ptrs);
    all.insert(all.end(), scores.begin(), scores.end());
    const auto [m, s] = mean_std(scores);
    std::vector<double> bright;
    for (const auto& im : images) bright.push_back(brightness(im));
    nlohmann::ordered_json e;
    e["class_id"] = c;
    e["reward_mean"] = m;
    e["reward_std"] = s;
    e["brightness_mean"] = mean_std(bright).first;
    if (!specs.empty()) {
      const double f = fidelity_of(images, c, specs);
      e["class_fidelity"] = f;
      fid_sum += f;
    } else {
      e["class_fidelity"] = nullptr;
    }
    per_class.push_back(e);
  }
  const auto [m, s] = mean_std(all);
  rep["reward"] = detail::reward_to_json(reward).at("kind");
  rep["n_per_class"] = n_per_class;
  rep["iteration"] = ck.iteration;
  rep["reward_mean"] = m;
  rep["reward_std"] = s;
  rep["class_fidelity"] = specs.empty() ? nlohmann::ordered_json(nullptr)
                                        : nlohmann::ordered_json(fid_sum / ck.policy.n_classes);
  rep["per_class"] = per_class;
  return rep;
}

// ---------------------------------------------------------------------------
// Sweeps.

enum class SweepParam { kBeta, kGroups };

/// One training per value with everything else shared. The groups sweep keeps
/// batch_labels * G fixed at the base config's trajectory budget. A failing
/// value is recorded and the sweep moves on.
inline nlohmann::ordered_json run_sweep(const ExperimentConfig& base, const Checkpoint& pretrained, SweepParam param,
                                        const std::vector<double>& values, const fs::path& out_dir,
                                        const TrainOptions& opts = {}) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  const std::string pname = param == SweepParam::kBeta ? "beta" : "groups";
  const int budget = base.grpo.batch_labels * base.grpo.group_size;
  nlohmann::ordered_json summary;
  summary["param"] = pname;
  summary["trajectories_per_iteration"] = param == SweepParam::kGroups ? nlohmann::ordered_json(budget) : nullptr;
  summary["rows"] = nlohmann::ordered_json::array();
  std::vector<Series> reward_series, kl_series;
  std::vector<std::pair<double, double>> finals;
  for (double v : values) {
    std::ostringstream vs;
    vs << v;
    const fs::path dir = out_dir / (pname + "_" + vs.str());
    nlohmann::ordered_json row;
    row["value"] = v;
    row["dir"] = dir.filename().string();
    try {
      ExperimentConfig cfg = base;
      if (param == SweepParam::kBeta) {
        cfg.grpo.kl_beta = v;
      } else {
        if (v != std::floor(v)) throw InvalidArgument("group size must be an integer, got " + vs.str());
        cfg.grpo.group_size = static_cast<int>(v);
        if (cfg.grpo.group_size >= 1) {
          cfg.grpo.batch_labels = std::max(1, budget / cfg.grpo.group_size);
          cfg.grpo.minibatch = std::min(cfg.grpo.minibatch, cfg.grpo.batch_labels * cfg.grpo.group_size);
        }
        cfg.grpo.validate(pretrained.policy.n_classes);
      }
      const auto run = run_train(cfg, pretrained, dir, opts);
      if (run.log.empty()) throw InvalidArgument("no iterations were run");
      row["status"] = "ok";
      row["group_size"] = cfg.grpo.group_size;
      row["batch_labels"] = cfg.grpo.batch_labels;
      row["iterations"] = run.log.size();
      row["final_reward_mean"] = run.log.back().reward_mean;
      row["final_kl_mean"] = run.log.back().kl_mean;
      row["metrics_file"] = (dir.filename() / "metrics.jsonl").string();
      finals.emplace_back(v, run.log.back().reward_mean);
      Series r{pname + "=" + vs.str(), {}, {}}, k{pname + "=" + vs.str(), {}, {}};
      for (const auto& m : run.log) {
        r.x.push_back(static_cast<double>(m.iter));
        r.y.push_back(m.reward_mean);
        k.x.push_back(static_cast<double>(m.iter));
        k.y.push_back(m.kl_mean);
      }
      reward_series.push_back(std::move(r));
      kl_series.push_back(std::move(k));
    } catch (const std::exception& e) {
      row["status"] = "failed";
      row["error"] = e.what();
    }
    summary["rows"].push_back(row);
  }
  std::sort(finals.begin(), finals.end());
  bool monotone = finals.size() >= 2;
  for (std::size_t i = 1; i < finals.size(); ++i) monotone = monotone && finals[i].second >= finals[i - 1].second;
  summary["final_reward_monotone_in_value"] = finals.size() >= 2 ? nlohmann::ordered_json(monotone) : nullptr;
  fs::create_directories(out_dir);
  write_file(out_dir / "summary.json", summary.dump(2) + "\n");
  write_file(out_dir / "comparison.svg",
             svg_chart("sweep over " + pname + " (top: reward_mean, bottom: kl_mean)", "iteration",
                       {reward_series, kl_series}));
  return summary;
}

}  // namespace scalegrpo
