#pragma once

// Scalar rewards on decoded images.

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <future>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "scalegrpo/error.hpp"
#include "scalegrpo/msvq.hpp"

namespace scalegrpo {

// Mean of 0.2989 R + 0.5870 G + 0.1140 B over all pixels.
inline double brightness(const Image& img) {
  double s = 0.0;
  for (int i = 0; i < img.height(); ++i)
    for (int j = 0; j < img.width(); ++j) s += 0.2989 * img(i, j, 0) + 0.5870 * img(i, j, 1) + 0.1140 * img(i, j, 2);
  return s / (static_cast<double>(img.height()) * img.width());
}

enum class ThresholdMode { kBright, kDark };

// bright: 1 iff b >= threshold (0.8); dark: 1 iff b < threshold (0.2).
inline double threshold_reward(double b, ThresholdMode mode, std::optional<double> threshold = std::nullopt) {
  if (!std::isfinite(b)) throw InvalidArgument("brightness must be finite");
  if (mode == ThresholdMode::kBright) return b >= threshold.value_or(0.8) ? 1.0 : 0.0;
  return b < threshold.value_or(0.2) ? 1.0 : 0.0;
}

inline std::string base64_encode(std::string_view in) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const auto n = (static_cast<unsigned char>(in[i]) << 16) | (static_cast<unsigned char>(in[i + 1]) << 8) |
                   static_cast<unsigned char>(in[i + 2]);
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += kAlphabet[(n >> 6) & 63];
    out += kAlphabet[n & 63];
  }
  if (i < in.size()) {
    const bool two = i + 1 < in.size();
    const auto n = (static_cast<unsigned char>(in[i]) << 16) | (two ? static_cast<unsigned char>(in[i + 1]) << 8 : 0);
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += two ? kAlphabet[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::string base64_decode(std::string_view in) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (in.size() % 4 != 0) throw InvalidArgument("base64 length must be a multiple of 4");
  std::string out;
  for (std::size_t i = 0; i < in.size(); i += 4) {
    int v[4];
    for (int k = 0; k < 4; ++k) {
      v[k] = in[i + static_cast<std::size_t>(k)] == '=' ? 0 : value(in[i + static_cast<std::size_t>(k)]);
      if (v[k] < 0) throw InvalidArgument("invalid base64 character");
    }
    const int n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out += static_cast<char>((n >> 16) & 255);
    if (in[i + 2] != '=') out += static_cast<char>((n >> 8) & 255);
    if (in[i + 3] != '=') out += static_cast<char>(n & 255);
  }
  return out;
}

/// Where and what to ask a scoring sidecar for.
struct RemoteEndpoint {
  std::string url;                  // e.g. "http://127.0.0.1:8500"
  std::string reward = "aesthetic"; // "aesthetic" | "clip" | "echo_brightness"
  std::optional<std::string> prompt;
  double timeout_s = 10.0;
  int max_in_flight = 4;
};

namespace detail {

inline std::string next_request_id() {
  static std::atomic<std::uint64_t> counter{0};
  return "req-" + std::to_string(counter.fetch_add(1));
}

inline httplib::Client make_client(const RemoteEndpoint& ep) {
  httplib::Client cli(ep.url);
  const auto t = std::chrono::duration<double>(ep.timeout_s);
  const auto us = std::chrono::duration_cast<std::chrono::microseconds>(t);
  cli.set_connection_timeout(us);
  cli.set_read_timeout(us);
  cli.set_write_timeout(us);
  return cli;
}

}  // namespace detail

/// POST /score. Transport failures are retried once, then reported as
/// RewardUnavailable; responses that break the schema raise ProtocolError.
inline double remote_score(const RemoteEndpoint& ep, const Image& image) {
  if (ep.url.empty()) throw RewardUnavailable("no scorer endpoint configured");
  const std::string id = detail::next_request_id();
  nlohmann::json req{{"id", id}, {"reward", ep.reward}, {"image_ppm_b64", base64_encode(to_ppm(image))}};
  req["prompt"] = ep.prompt ? nlohmann::json(*ep.prompt) : nlohmann::json(nullptr);
  const std::string body = req.dump();

  httplib::Result res;
  for (int attempt = 0; attempt < 2; ++attempt) {
    auto cli = detail::make_client(ep);
    res = cli.Post("/score", body, "application/json");
    if (res) break;
  }
  if (!res) throw RewardUnavailable("scorer at " + ep.url + " unreachable: " + httplib::to_string(res.error()));
  if (res->status == 503) throw RewardUnavailable("scorer at " + ep.url + " has no model loaded (503)");
  if (res->status != 200)
    throw ProtocolError("scorer answered HTTP " + std::to_string(res->status) + ": " + res->body);
  nlohmann::json resp;
  try {
    resp = nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("scorer response is not JSON: ") + e.what());
  }
  if (!resp.is_object() || !resp.contains("id") || !resp["id"].is_string() || !resp.contains("score") ||
      !resp["score"].is_number())
    throw ProtocolError("scorer response does not match {\"id\": string, \"score\": number}");
  if (resp["id"].get<std::string>() != id)
    throw ProtocolError("scorer response id '" + resp["id"].get<std::string>() + "' does not match request '" + id + "'");
  const double score = resp["score"].get<double>();
  if (!std::isfinite(score)) throw ProtocolError("scorer returned a non-finite score");
  return score;
}

// GET /health; true when the sidecar answers 200.
inline bool probe_scorer(const RemoteEndpoint& ep) {
  if (ep.url.empty()) return false;
  auto cli = detail::make_client(ep);
  const auto res = cli.Get("/health");
  return res && res->status == 200;
}

enum class RewardKind { kBrightnessRaw, kBrightThreshold, kDarkThreshold, kRemote, kWeightedSum };

struct RewardSpec;

struct WeightedReward {
  std::vector<RewardSpec> spec;  // exactly one element; vector for the recursive type
  double weight = 1.0;
};

struct RewardSpec {
  RewardKind kind = RewardKind::kBrightThreshold;
  double bright_threshold = 0.8;
  double dark_threshold = 0.2;
  RemoteEndpoint remote;
  std::vector<WeightedReward> components;

  static RewardSpec bright() { return {RewardKind::kBrightThreshold, 0.8, 0.2, {}, {}}; }
  static RewardSpec dark() { return {RewardKind::kDarkThreshold, 0.8, 0.2, {}, {}}; }
  static RewardSpec raw_brightness() { return {RewardKind::kBrightnessRaw, 0.8, 0.2, {}, {}}; }
  static RewardSpec remote_scorer(RemoteEndpoint ep) { return {RewardKind::kRemote, 0.8, 0.2, std::move(ep), {}}; }
  static RewardSpec weighted(std::vector<std::pair<RewardSpec, double>> parts) {
    RewardSpec s;
    s.kind = RewardKind::kWeightedSum;
    for (auto& [spec, w] : parts) s.components.push_back({{std::move(spec)}, w});
    return s;
  }

  bool uses_remote() const {
    if (kind == RewardKind::kRemote) return true;
    for (const auto& c : components)
      if (c.spec.front().uses_remote()) return true;
    return false;
  }
};

inline double score(const RewardSpec& spec, const Image& image);

// sum of weight_i * score_i, evaluated left to right.
inline double weighted_sum(const std::vector<WeightedReward>& components, const Image& image) {
  if (components.empty()) throw InvalidArgument("weighted reward needs at least one component");
  double total = 0.0;
  for (const auto& c : components) {
    if (c.spec.size() != 1) throw InvalidArgument("weighted reward component must hold exactly one spec");
    if (!std::isfinite(c.weight)) throw InvalidArgument("reward weights must be finite");
    total += c.weight * score(c.spec.front(), image);
  }
  return total;
}

inline double score(const RewardSpec& spec, const Image& image) {
  switch (spec.kind) {
    case RewardKind::kBrightnessRaw: return brightness(image);
    case RewardKind::kBrightThreshold:
      return threshold_reward(brightness(image), ThresholdMode::kBright, spec.bright_threshold);
    case RewardKind::kDarkThreshold:
      return threshold_reward(brightness(image), ThresholdMode::kDark, spec.dark_threshold);
    case RewardKind::kRemote: return remote_score(spec.remote, image);
    case RewardKind::kWeightedSum: return weighted_sum(spec.components, image);
  }
  throw InvalidArgument("unknown reward kind");
}

/// Scores a batch. Remote-backed specs run up to `max_in_flight` requests
/// concurrently; each result lands at its image's index.
inline std::vector<double> score_batch(const RewardSpec& spec, const std::vector<const Image*>& images) {
  std::vector<double> out(images.size());
  if (!spec.uses_remote()) {
    for (std::size_t n = 0; n < images.size(); ++n) out[n] = score(spec, *images[n]);
    return out;
  }
  const std::size_t limit = static_cast<std::size_t>(std::max(1, spec.kind == RewardKind::kRemote ? spec.remote.max_in_flight : 1));
  for (std::size_t start = 0; start < images.size(); start += limit) {
    std::vector<std::future<double>> pending;
    const std::size_t end = std::min(images.size(), start + limit);
    for (std::size_t n = start; n < end; ++n)
      pending.push_back(std::async(std::launch::async, [&spec, img = images[n]] { return score(spec, *img); }));
    std::exception_ptr first_error;
    for (std::size_t n = start; n < end; ++n) {
      try {
        out[n] = pending[n - start].get();
      } catch (...) {
        if (!first_error) first_error = std::current_exception();
      }
    }
    if (first_error) std::rethrow_exception(first_error);
  }
  return out;
}

}  // namespace scalegrpo
