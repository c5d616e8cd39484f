// scalegrpo: command-line front end.
//
// Exit codes: 0 ok, 1 other failure, 2 configuration error, 3 numeric error,
// 4 remote scorer unreachable, 5 unknown checkpoint version.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "scalegrpo/harness.hpp"

namespace fs = std::filesystem;
using namespace scalegrpo;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kUnreachable = 4, kBadVersion = 5 };

struct ScorerUnreachable : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ExperimentConfig read_config(const std::string& path) {
  if (path.empty()) {
    ExperimentConfig c;
    c.validate();
    return c;
  }
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  return load_config(path);
}

std::string default_scorer_url() {
  const char* env = std::getenv("SCALEGRPO_SCORER_URL");
  return env ? env : "";
}

void collect_remotes(RewardSpec& spec, std::vector<RemoteEndpoint*>& out) {
  if (spec.kind == RewardKind::kRemote) out.push_back(&spec.remote);
  for (auto& c : spec.components) collect_remotes(c.spec.front(), out);
}

// Applies --reward and fills empty scorer URLs from --scorer-url or the environment.
RewardSpec resolve_reward(const ExperimentConfig& cfg, const std::string& kind, const std::string& scorer_url) {
  RewardSpec spec = cfg.reward;
  if (kind == "bright") spec = RewardSpec::bright();
  else if (kind == "dark") spec = RewardSpec::dark();
  else if (kind == "brightness") spec = RewardSpec::raw_brightness();
  else if (kind == "remote") {
    if (spec.kind != RewardKind::kRemote) spec = RewardSpec::remote_scorer({});
  } else if (kind == "composite") {
    if (spec.kind != RewardKind::kWeightedSum)
      throw ConfigError("--reward composite needs a reward of kind 'composite' in the config");
  } else if (!kind.empty()) {
    throw ConfigError("unknown --reward '" + kind + "'");
  }
  if (spec.kind == RewardKind::kBrightThreshold || spec.kind == RewardKind::kDarkThreshold) {
    spec.bright_threshold = cfg.reward.bright_threshold;
    spec.dark_threshold = cfg.reward.dark_threshold;
  }
  std::vector<RemoteEndpoint*> remotes;
  collect_remotes(spec, remotes);
  const std::string fallback = scorer_url.empty() ? default_scorer_url() : scorer_url;
  for (auto* ep : remotes) {
    if (ep->url.empty()) ep->url = fallback;
    if (ep->url.empty())
      throw ScorerUnreachable("remote reward selected but no scorer URL (set --scorer-url or SCALEGRPO_SCORER_URL)");
    if (!probe_scorer(*ep)) throw ScorerUnreachable("remote scorer unreachable at " + ep->url + "/health");
  }
  return spec;
}

std::vector<double> parse_values(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--values entry '" + item + "' is not a number");
    }
  }
  if (out.empty()) throw ConfigError("--values must list at least one value");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Group-relative policy optimization for a toy next-scale image model"};
  app.require_subcommand(1);

  std::string config_path, out_dir, pretrained, checkpoint, reward_kind, scorer_url, param, values, report_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations, epochs, top_k;
  std::optional<double> beta, cfg_scale, top_p, temperature, stop_reward;
  int class_id = 0, n = 1, n_per_class = 10;
  bool verbose = false;

  auto* pre = app.add_subcommand("pretrain", "Generate the synthetic dataset and pretrain the reference policy");
  pre->add_option("config", config_path, "Experiment config (JSON)");
  pre->add_option("--out", out_dir, "Output directory (default: config output_dir)");
  pre->add_option("--seed", seed, "Pretraining seed");
  pre->add_option("--epochs", epochs, "Number of epochs");
  pre->add_flag("-v,--verbose", verbose);

  auto* tr = app.add_subcommand("train", "GRPO fine-tuning from a pretrained checkpoint");
  tr->add_option("config", config_path, "Experiment config (JSON)");
  tr->add_option("--pretrained", pretrained, "Pretrained or partially trained checkpoint")->required();
  tr->add_option("--reward", reward_kind, "bright|dark|brightness|remote|composite");
  tr->add_option("--scorer-url", scorer_url, "Remote scorer base URL");
  tr->add_option("--iterations", iterations, "Total iteration budget");
  tr->add_option("--beta", beta, "KL coefficient");
  tr->add_option("--seed", seed, "GRPO seed");
  tr->add_option("--stop-reward", stop_reward, "Stop once reward_mean reaches this value");
  tr->add_option("--out", out_dir, "Output directory");
  tr->add_flag("-v,--verbose", verbose);

  auto* sa = app.add_subcommand("sample", "Write N sampled images for one class as PPM files");
  sa->add_option("config", config_path, "Experiment config (JSON) for sampler defaults");
  sa->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  sa->add_option("--class", class_id, "Class label")->required();
  sa->add_option("--n", n, "Number of images");
  sa->add_option("--cfg", cfg_scale, "Guidance scale");
  sa->add_option("--top-k", top_k, "Top-k");
  sa->add_option("--top-p", top_p, "Top-p");
  sa->add_option("--temperature", temperature, "Sampling temperature");
  sa->add_option("--seed", seed, "Sampling seed");
  sa->add_option("--out", out_dir, "Output directory")->required();

  auto* sw = app.add_subcommand("sweep", "One GRPO run per value of beta or group size");
  sw->add_option("config", config_path, "Experiment config (JSON)");
  sw->add_option("--param", param, "beta|groups")->required()->check(CLI::IsMember({"beta", "groups"}));
  sw->add_option("--values", values, "Comma separated values")->required();
  sw->add_option("--pretrained", pretrained, "Pretrained checkpoint")->required();
  sw->add_option("--reward", reward_kind, "bright|dark|brightness|remote|composite");
  sw->add_option("--scorer-url", scorer_url, "Remote scorer base URL");
  sw->add_option("--iterations", iterations, "Iterations per run");
  sw->add_option("--out", out_dir, "Output directory");
  sw->add_flag("-v,--verbose", verbose);

  auto* ev = app.add_subcommand("eval", "Score inference samples of every class");
  ev->add_option("config", config_path, "Experiment config (JSON) for sampler and reward defaults");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  ev->add_option("--reward", reward_kind, "bright|dark|brightness|remote|composite");
  ev->add_option("--scorer-url", scorer_url, "Remote scorer base URL");
  ev->add_option("--n-per-class", n_per_class, "Samples per class");
  ev->add_option("--seed", seed, "Sampling seed");
  ev->add_option("--out", report_path, "Report path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    ExperimentConfig cfg = read_config(config_path);
    if (iterations) cfg.grpo.iterations = *iterations;
    if (beta) cfg.grpo.kl_beta = *beta;
    const fs::path out = out_dir.empty() ? fs::path(cfg.output_dir) : fs::path(out_dir);

    if (*pre) {
      if (seed) cfg.pretrain.seed = *seed;
      if (epochs) cfg.pretrain.epochs = *epochs;
      cfg.validate();
      const auto run = run_pretrain(cfg, out, verbose);
      std::cout << (out / "pretrained.ckpt").string() << "\n";
      if (!run.history.empty())
        std::cout << "final eval_loss " << run.history.back().eval_loss << " after " << run.history.size() << " epochs\n";
      return kOk;
    }
    if (*tr) {
      if (seed) cfg.grpo.seed = *seed;
      cfg.grpo.validate(cfg.policy.n_classes);
      const auto input = load_checkpoint(pretrained);
      cfg.reward = resolve_reward(cfg, reward_kind, scorer_url);
      TrainOptions opts;
      opts.stop_reward = stop_reward;
      opts.verbose = verbose;
      const auto run = run_train(cfg, input, out, opts);
      std::cout << (out / "checkpoint.ckpt").string() << "\n";
      if (!run.log.empty())
        std::cout << "iterations " << run.log.size() << " final reward_mean " << run.log.back().reward_mean
                  << " kl_mean " << run.log.back().kl_mean << "\n";
      return kOk;
    }
    if (*sa) {
      SamplerConfig sc = cfg.sampler;
      if (cfg_scale) sc.cfg_scale = *cfg_scale;
      if (top_k) sc.top_k = *top_k;
      if (top_p) sc.top_p = *top_p;
      if (temperature) sc.temperature = *temperature;
      if (seed) sc.seed = *seed;
      const auto ck = load_checkpoint(checkpoint);
      if (class_id < 0 || class_id >= ck.policy.n_classes)
        throw ConfigError("--class " + std::to_string(class_id) + " outside [0, " +
                          std::to_string(ck.policy.n_classes) + ")");
      if (n < 0) throw ConfigError("--n must be >= 0");
      try {
        sc.validate(ck.policy.vocab_size);
      } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
      }
      const auto files = run_sample(ck, class_id, n, sc, out);
      std::cout << "wrote " << files.size() << " images to " << out.string() << "\n";
      return kOk;
    }
    if (*sw) {
      const auto vals = parse_values(values);
      const auto input = load_checkpoint(pretrained);
      cfg.reward = resolve_reward(cfg, reward_kind, scorer_url);
      TrainOptions opts;
      opts.verbose = verbose;
      const auto summary =
          run_sweep(cfg, input, param == "beta" ? SweepParam::kBeta : SweepParam::kGroups, vals, out, opts);
      std::cout << summary.dump(2) << "\n";
      return kOk;
    }
    if (*ev) {
      SamplerConfig sc = cfg.sampler;
      if (seed) sc.seed = *seed;
      const auto ck = load_checkpoint(checkpoint);
      const auto reward = resolve_reward(cfg, reward_kind, scorer_url);
      if (n_per_class < 1) throw ConfigError("--n-per-class must be >= 1");
      const auto report = run_eval(ck, reward, n_per_class, sc);
      if (report_path.empty()) std::cout << report.dump(2) << "\n";
      else write_file(report_path, report.dump(2) + "\n");
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return e.unknown_version() ? kBadVersion : kConfig;
  } catch (const ScorerUnreachable& e) {
    std::cerr << "scorer error: " << e.what() << "\n";
    return kUnreachable;
  } catch (const RewardUnavailable& e) {
    std::cerr << "scorer error: " << e.what() << "\n";
    return kUnreachable;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
