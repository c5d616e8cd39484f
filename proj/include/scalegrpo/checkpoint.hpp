#pragma once

// Binary checkpoint: u32 LE header length, JSON header, then sections of
// (u64 LE element count, float32 LE values) in header order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "scalegrpo/adam.hpp"
#include "scalegrpo/error.hpp"
#include "scalegrpo/msvq.hpp"
#include "scalegrpo/policy.hpp"
#include "scalegrpo/pretrain.hpp"

namespace scalegrpo {

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json schedule_to_json(const ScaleSchedule& s) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& sc : s.scales()) out.push_back({sc.h, sc.w});
  return out;
}

inline ScaleSchedule schedule_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw InvalidArgument("schedule must be a list of [h, w] pairs");
  std::vector<Scale> s;
  for (const auto& e : j) {
    if (!e.is_array() || e.size() != 2) throw InvalidArgument("schedule entries must be [h, w] pairs");
    s.push_back({e[0].get<int>(), e[1].get<int>()});
  }
  return ScaleSchedule(std::move(s));
}

inline nlohmann::json to_json(const PolicyConfig& c) {
  return {{"schedule", schedule_to_json(c.schedule)}, {"vocab_size", c.vocab_size}, {"latent_dim", c.latent_dim},
          {"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"n_classes", c.n_classes}};
}

inline nlohmann::json to_json(const DatasetConfig& c) {
  return {{"n_classes", c.n_classes}, {"samples_per_class", c.samples_per_class}, {"height", c.height},
          {"width", c.width}, {"noise_amp", c.noise_amp}, {"brightness_jitter", c.brightness_jitter},
          {"hue_radius", c.hue_radius}, {"seed", c.seed}};
}

struct Checkpoint {
  PolicyConfig policy;
  Codebook codebook{2, 1, {0.0, 0.0}, 0, 1.0};
  PolicyParams params;
  std::optional<PolicyParams> params_ref;  // absent: the reference is `params`
  AdamState adam;
  std::int64_t iteration = 0;
  std::optional<DatasetConfig> dataset;    // base colours for class fidelity
  nlohmann::json lineage = nlohmann::json::object();

  Architecture architecture() const { return Architecture(policy, codebook); }
  const PolicyParams& reference() const { return params_ref ? *params_ref : params; }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
template <typename Range>
void put_section(std::string& out, const Range& values) {
  put_u64(out, values.size());
  for (const auto v : values) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<float> section(std::size_t expected, const char* name) {
    const auto n = uint(8);
    if (n != expected)
      throw CheckpointError(std::string("checkpoint section ") + name + " holds " + std::to_string(n) +
                            " values, expected " + std::to_string(expected));
    std::vector<float> out(n);
    for (auto& v : out) v = std::bit_cast<float>(static_cast<std::uint32_t>(uint(4)));
    return out;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
  }
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  const Architecture arch = ck.architecture();
  arch.check_params(ck.params);
  if (ck.params_ref) arch.check_params(*ck.params_ref);
  const bool moments = !ck.adam.empty();
  if (moments && (ck.adam.m.size() != ck.params.values.size() || ck.adam.v.size() != ck.params.values.size()))
    throw InvalidArgument("optimizer moments do not match the parameter count");
  nlohmann::json h;
  h["format_version"] = kCheckpointVersion;
  h["policy_config"] = to_json(ck.policy);
  h["schedule"] = schedule_to_json(ck.policy.schedule);
  h["V"] = ck.policy.vocab_size;
  h["codebook"] = {{"seed", ck.codebook.seed()}, {"level_gain", ck.codebook.level_gain()}, {"dim", ck.codebook.dim()}};
  h["iteration"] = ck.iteration;
  h["adam_step"] = ck.adam.step;
  h["has_moments"] = moments;
  h["has_params_ref"] = ck.params_ref.has_value();
  h["dataset"] = ck.dataset ? to_json(*ck.dataset) : nlohmann::json(nullptr);
  h["lineage"] = ck.lineage;
  std::vector<std::string> sections{"codebook", "params"};
  if (ck.params_ref) sections.push_back("params_ref");
  if (moments) {
    sections.push_back("adam_m");
    sections.push_back("adam_v");
  }
  h["sections"] = sections;
  const std::string header = h.dump();
  std::string out;
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  detail::put_section(out, ck.codebook.entries());
  detail::put_section(out, ck.params.values);
  if (ck.params_ref) detail::put_section(out, ck.params_ref->values);
  if (moments) {
    detail::put_section(out, ck.adam.m);
    detail::put_section(out, ck.adam.v);
  }
  return out;
}

inline DatasetConfig dataset_from_header(const nlohmann::json& j) {
  DatasetConfig d;
  d.n_classes = j.at("n_classes").get<int>();
  d.samples_per_class = j.at("samples_per_class").get<int>();
  d.height = j.at("height").get<int>();
  d.width = j.at("width").get<int>();
  d.noise_amp = j.at("noise_amp").get<double>();
  d.brightness_jitter = j.at("brightness_jitter").get<double>();
  d.hue_radius = j.at("hue_radius").get<double>();
  d.seed = j.at("seed").get<std::uint64_t>();
  return d;
}

inline Checkpoint deserialize(std::string_view bytes) {
  detail::Reader r(bytes);
  const auto hlen = r.uint(4);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(r.take(static_cast<std::size_t>(hlen)));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  try {
    const int version = h.at("format_version").get<int>();
    if (version != kCheckpointVersion)
      throw CheckpointError("unknown checkpoint format_version " + std::to_string(version), true);
    Checkpoint ck;
    const auto& pc = h.at("policy_config");
    ck.policy.schedule = schedule_from_json(pc.at("schedule"));
    ck.policy.vocab_size = pc.at("vocab_size").get<int>();
    ck.policy.latent_dim = pc.at("latent_dim").get<int>();
    ck.policy.d_model = pc.at("d_model").get<int>();
    ck.policy.n_layers = pc.at("n_layers").get<int>();
    ck.policy.n_heads = pc.at("n_heads").get<int>();
    ck.policy.n_classes = pc.at("n_classes").get<int>();
    ck.policy.validate();
    const auto& cb = h.at("codebook");
    const int dim = cb.at("dim").get<int>();
    const auto entries = r.section(static_cast<std::size_t>(ck.policy.vocab_size) * dim, "codebook");
    ck.codebook = Codebook(ck.policy.vocab_size, dim, std::vector<double>(entries.begin(), entries.end()),
                           cb.at("seed").get<std::uint64_t>(), cb.at("level_gain").get<double>());
    const Architecture arch(ck.policy, ck.codebook);
    ck.params.values = r.section(arch.param_count(), "params");
    if (h.at("has_params_ref").get<bool>()) ck.params_ref = PolicyParams{r.section(arch.param_count(), "params_ref")};
    ck.adam.step = h.at("adam_step").get<std::int64_t>();
    if (h.at("has_moments").get<bool>()) {
      ck.adam.m = r.section(arch.param_count(), "adam_m");
      ck.adam.v = r.section(arch.param_count(), "adam_v");
    }
    ck.iteration = h.at("iteration").get<std::int64_t>();
    if (!h.at("dataset").is_null()) ck.dataset = dataset_from_header(h.at("dataset"));
    ck.lineage = h.at("lineage");
    if (!r.done()) throw CheckpointError("trailing bytes after the last checkpoint section");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw CheckpointError(std::string("inconsistent checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = serialize(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

}  // namespace scalegrpo
