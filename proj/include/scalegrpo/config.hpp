#pragma once

// ExperimentConfig: every module's settings in one JSON document. Unknown
// keys are rejected and every error names the offending path.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "scalegrpo/checkpoint.hpp"
#include "scalegrpo/error.hpp"
#include "scalegrpo/grpo.hpp"
#include "scalegrpo/policy.hpp"
#include "scalegrpo/pretrain.hpp"
#include "scalegrpo/rewards.hpp"
#include "scalegrpo/sampler.hpp"

namespace scalegrpo {

struct CodebookConfig {
  std::uint64_t seed = 0;
  double level_gain = 0.5;
};

struct ExperimentConfig {
  PolicyConfig policy;
  CodebookConfig codebook;
  DatasetConfig dataset;
  PretrainConfig pretrain;
  SamplerConfig sampler;
  GRPOConfig grpo;
  RewardSpec reward = RewardSpec::bright();
  std::string output_dir = "runs/desk";

  void validate() const {
    policy.validate();
    if (dataset.n_classes != policy.n_classes)
      throw ConfigError("dataset.n_classes (" + std::to_string(dataset.n_classes) + ") must equal policy.n_classes (" +
                        std::to_string(policy.n_classes) + ")");
    if (dataset.height != policy.schedule.final_scale().h || dataset.width != policy.schedule.final_scale().w)
      throw ConfigError("dataset image size must equal the final scale of policy.schedule");
    dataset.validate();
    pretrain.validate();
    sampler.validate(policy.vocab_size);
    grpo.validate(policy.n_classes);
  }
};

namespace detail {

// Reads fields from one JSON object and remembers which keys it consumed.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(child(key) + " has the wrong type");
    }
  }

  template <typename T>
  void get_optional(const std::string& key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    T v{};
    get(key, v);
    out = v;
  }

  const nlohmann::json* sub(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key " + child(k));
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config root" : path_; }
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline RewardSpec reward_from_json(const nlohmann::json& j, const std::string& path) {
  ObjectReader r(j, path);
  std::string kind = "bright";
  r.get("kind", kind);
  RewardSpec s;
  if (kind == "bright") s = RewardSpec::bright();
  else if (kind == "dark") s = RewardSpec::dark();
  else if (kind == "brightness") s = RewardSpec::raw_brightness();
  else if (kind == "remote") s = RewardSpec::remote_scorer({});
  else if (kind == "composite") s = RewardSpec::weighted({});
  else throw ConfigError(r.child("kind") + ": unknown reward kind '" + kind + "'");
  r.get("bright_threshold", s.bright_threshold);
  r.get("dark_threshold", s.dark_threshold);
  if (const auto* rem = r.sub("remote")) {
    ObjectReader rr(*rem, r.child("remote"));
    rr.get("url", s.remote.url);
    rr.get("reward", s.remote.reward);
    rr.get_optional("prompt", s.remote.prompt);
    rr.get("timeout_s", s.remote.timeout_s);
    rr.get("max_in_flight", s.remote.max_in_flight);
    rr.finish();
  }
  if (const auto* comps = r.sub("components")) {
    if (!comps->is_array()) throw ConfigError(r.child("components") + " must be a list");
    for (std::size_t i = 0; i < comps->size(); ++i) {
      const std::string p = r.child("components") + "[" + std::to_string(i) + "]";
      const auto& c = (*comps)[i];
      if (!c.is_object()) throw ConfigError(p + " must be an object");
      double w = 1.0;
      nlohmann::json inner = c;
      if (inner.contains("weight")) {
        if (!inner["weight"].is_number()) throw ConfigError(p + ".weight has the wrong type");
        w = inner["weight"].get<double>();
        inner.erase("weight");
      }
      s.components.push_back({{reward_from_json(inner, p)}, w});
    }
  }
  r.finish();
  if (s.kind == RewardKind::kWeightedSum && s.components.empty())
    throw ConfigError(r.child("components") + " must list at least one reward for kind 'composite'");
  return s;
}

inline nlohmann::json reward_to_json(const RewardSpec& s) {
  nlohmann::json j;
  switch (s.kind) {
    case RewardKind::kBrightThreshold: j["kind"] = "bright"; break;
    case RewardKind::kDarkThreshold: j["kind"] = "dark"; break;
    case RewardKind::kBrightnessRaw: j["kind"] = "brightness"; break;
    case RewardKind::kRemote: j["kind"] = "remote"; break;
    case RewardKind::kWeightedSum: j["kind"] = "composite"; break;
  }
  j["bright_threshold"] = s.bright_threshold;
  j["dark_threshold"] = s.dark_threshold;
  if (s.kind == RewardKind::kRemote)
    j["remote"] = {{"url", s.remote.url}, {"reward", s.remote.reward},
                   {"prompt", s.remote.prompt ? nlohmann::json(*s.remote.prompt) : nlohmann::json(nullptr)},
                   {"timeout_s", s.remote.timeout_s}, {"max_in_flight", s.remote.max_in_flight}};
  if (s.kind == RewardKind::kWeightedSum) {
    j["components"] = nlohmann::json::array();
    for (const auto& c : s.components) {
      auto cj = reward_to_json(c.spec.front());
      cj["weight"] = c.weight;
      j["components"].push_back(cj);
    }
  }
  return j;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& root) {
  using detail::ObjectReader;
  ExperimentConfig c;
  ObjectReader r(root, "");
  r.get("output_dir", c.output_dir);
  if (const auto* p = r.sub("policy")) {
    ObjectReader o(*p, "policy");
    if (const auto* s = o.sub("schedule")) {
      try {
        c.policy.schedule = schedule_from_json(*s);
      } catch (const std::exception& e) {
        throw ConfigError("policy.schedule: " + std::string(e.what()));
      }
    }
    o.get("vocab_size", c.policy.vocab_size);
    o.get("latent_dim", c.policy.latent_dim);
    o.get("d_model", c.policy.d_model);
    o.get("n_layers", c.policy.n_layers);
    o.get("n_heads", c.policy.n_heads);
    o.get("n_classes", c.policy.n_classes);
    o.finish();
  }
  if (const auto* p = r.sub("codebook")) {
    ObjectReader o(*p, "codebook");
    o.get("seed", c.codebook.seed);
    o.get("level_gain", c.codebook.level_gain);
    o.finish();
  }
  if (const auto* p = r.sub("dataset")) {
    ObjectReader o(*p, "dataset");
    o.get("n_classes", c.dataset.n_classes);
    o.get("samples_per_class", c.dataset.samples_per_class);
    o.get("height", c.dataset.height);
    o.get("width", c.dataset.width);
    o.get("noise_amp", c.dataset.noise_amp);
    o.get("brightness_jitter", c.dataset.brightness_jitter);
    o.get("hue_radius", c.dataset.hue_radius);
    o.get("seed", c.dataset.seed);
    o.finish();
  }
  if (const auto* p = r.sub("pretrain")) {
    ObjectReader o(*p, "pretrain");
    o.get("epochs", c.pretrain.epochs);
    o.get("lr", c.pretrain.lr);
    o.get("minibatch", c.pretrain.minibatch);
    o.get("label_dropout_p", c.pretrain.label_dropout_p);
    o.get("seed", c.pretrain.seed);
    o.get("eval_samples", c.pretrain.eval_samples);
    o.get_optional("stop_below", c.pretrain.stop_below);
    o.finish();
  }
  if (const auto* p = r.sub("sampler")) {
    ObjectReader o(*p, "sampler");
    o.get("temperature", c.sampler.temperature);
    o.get("cfg_scale", c.sampler.cfg_scale);
    o.get_optional("top_k", c.sampler.top_k);
    o.get_optional("top_p", c.sampler.top_p);
    o.get("seed", c.sampler.seed);
    o.finish();
  }
  if (const auto* p = r.sub("grpo")) {
    ObjectReader o(*p, "grpo");
    o.get("group_size", c.grpo.group_size);
    o.get("batch_labels", c.grpo.batch_labels);
    o.get("minibatch", c.grpo.minibatch);
    o.get("inner_epochs", c.grpo.inner_epochs);
    o.get("clip_eps", c.grpo.clip_eps);
    o.get("kl_beta", c.grpo.kl_beta);
    o.get("temperature", c.grpo.temperature);
    o.get("lr", c.grpo.lr);
    o.get("iterations", c.grpo.iterations);
    o.get("seed", c.grpo.seed);
    o.get("checkpoint_every", c.grpo.checkpoint_every);
    o.get("labels", c.grpo.labels);
    o.finish();
  }
  if (const auto* p = r.sub("reward")) c.reward = detail::reward_from_json(*p, "reward");
  r.finish();
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["output_dir"] = c.output_dir;
  j["policy"] = to_json(c.policy);
  j["codebook"] = {{"seed", c.codebook.seed}, {"level_gain", c.codebook.level_gain}};
  j["dataset"] = to_json(c.dataset);
  j["pretrain"] = {{"epochs", c.pretrain.epochs}, {"lr", c.pretrain.lr}, {"minibatch", c.pretrain.minibatch},
                   {"label_dropout_p", c.pretrain.label_dropout_p}, {"seed", c.pretrain.seed},
                   {"eval_samples", c.pretrain.eval_samples},
                   {"stop_below", c.pretrain.stop_below ? nlohmann::json(*c.pretrain.stop_below) : nlohmann::json(nullptr)}};
  j["sampler"] = {{"temperature", c.sampler.temperature}, {"cfg_scale", c.sampler.cfg_scale},
                  {"top_k", c.sampler.top_k ? nlohmann::json(*c.sampler.top_k) : nlohmann::json(nullptr)},
                  {"top_p", c.sampler.top_p ? nlohmann::json(*c.sampler.top_p) : nlohmann::json(nullptr)},
                  {"seed", c.sampler.seed}};
  j["grpo"] = {{"group_size", c.grpo.group_size}, {"batch_labels", c.grpo.batch_labels},
               {"minibatch", c.grpo.minibatch}, {"inner_epochs", c.grpo.inner_epochs},
               {"clip_eps", c.grpo.clip_eps}, {"kl_beta", c.grpo.kl_beta}, {"temperature", c.grpo.temperature},
               {"lr", c.grpo.lr}, {"iterations", c.grpo.iterations}, {"seed", c.grpo.seed},
               {"checkpoint_every", c.grpo.checkpoint_every}, {"labels", c.grpo.labels}};
  j["reward"] = detail::reward_to_json(c.reward);
  return j;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace scalegrpo
