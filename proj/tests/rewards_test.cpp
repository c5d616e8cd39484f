#include <gtest/gtest.h>

#include <thread>

#include "scalegrpo/rewards.hpp"
#include "scalegrpo/rng.hpp"

namespace scalegrpo {
namespace {

Image solid(double r, double g, double b, int h = 4, int w = 4) {
  Image img(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      img.set(i, j, 0, r);
      img.set(i, j, 1, g);
      img.set(i, j, 2, b);
    }
  return img;
}

Image random_image(Rng& rng, int h = 8, int w = 8) {
  Image img(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c) img.set(i, j, c, rng.uniform());
  return img;
}

TEST(Brightness, Examples) {
  EXPECT_EQ(brightness(solid(0, 0, 0)), 0.0);
  EXPECT_NEAR(brightness(solid(1, 1, 1)), 0.9999, 1e-12);
  EXPECT_NEAR(brightness(solid(1, 0, 0)), 0.2989, 1e-12);
}

TEST(Brightness, InvariantUnderPixelPermutation) {
  Rng rng(1);
  const auto img = random_image(rng);
  Image flipped(8, 8);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j)
      for (int c = 0; c < 3; ++c) flipped.set(7 - i, (j * 3) % 8, c, img(i, j, c));
  EXPECT_NEAR(brightness(img), brightness(flipped), 1e-12);
}

TEST(ThresholdReward, Boundaries) {
  EXPECT_EQ(threshold_reward(0.85, ThresholdMode::kBright), 1.0);
  EXPECT_EQ(threshold_reward(0.8, ThresholdMode::kBright), 1.0);
  EXPECT_EQ(threshold_reward(0.79999, ThresholdMode::kBright), 0.0);
  EXPECT_EQ(threshold_reward(0.2, ThresholdMode::kDark), 0.0);
  EXPECT_EQ(threshold_reward(0.19999, ThresholdMode::kDark), 1.0);
}

TEST(ThresholdReward, MonotoneAndBinary) {
  double prev_bright = 0.0, prev_dark = 1.0;
  for (int n = 0; n <= 1000; ++n) {
    const double b = n / 1000.0;
    const double rb = threshold_reward(b, ThresholdMode::kBright);
    const double rd = threshold_reward(b, ThresholdMode::kDark);
    EXPECT_TRUE(rb == 0.0 || rb == 1.0);
    EXPECT_TRUE(rd == 0.0 || rd == 1.0);
    EXPECT_GE(rb, prev_bright);
    EXPECT_LE(rd, prev_dark);
    prev_bright = rb;
    prev_dark = rd;
  }
}

TEST(WeightedSum, Examples) {
  const auto white = solid(1, 1, 1);
  EXPECT_NEAR(score(RewardSpec::weighted({{RewardSpec::raw_brightness(), 1.0}}), white), 0.9999, 1e-12);
  EXPECT_NEAR(score(RewardSpec::weighted({{RewardSpec::raw_brightness(), 2.0}}), white), 1.9998, 1e-12);
  EXPECT_THROW(weighted_sum({}, white), InvalidArgument);
}

TEST(Base64, RoundTrip) {
  for (const std::string& s : std::vector<std::string>{"", "a", "ab", "abc", "abcd", std::string("\0\xff\x10", 3)})
    EXPECT_EQ(base64_decode(base64_encode(s)), s);
  EXPECT_EQ(base64_encode("Man"), "TWFu");
  EXPECT_EQ(base64_encode("Ma"), "TWE=");
}

// In-process sidecar speaking the scoring protocol.
class StubScorer {
 public:
  enum class Mode { kConstant, kEchoBrightness, kWrongId, kMalformed, kUnavailable };

  explicit StubScorer(Mode mode) : mode_(mode) {
    server_.Post("/score", [this](const httplib::Request& req, httplib::Response& res) {
      ++requests_;
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (...) {
        res.status = 400;
        return;
      }
      switch (mode_) {
        case Mode::kUnavailable: res.status = 503; return;
        case Mode::kMalformed: res.set_content("{\"id\": 3}", "application/json"); return;
        case Mode::kWrongId:
          res.set_content(nlohmann::json{{"id", "nope"}, {"score", 1.0}}.dump(), "application/json");
          return;
        case Mode::kConstant:
          res.set_content(nlohmann::json{{"id", body["id"]}, {"score", 5.0}}.dump(), "application/json");
          return;
        case Mode::kEchoBrightness: {
          const auto img = from_ppm(base64_decode(body["image_ppm_b64"].get<std::string>()));
          res.set_content(nlohmann::json{{"id", body["id"]}, {"score", brightness(img)}}.dump(), "application/json");
          return;
        }
      }
    });
    server_.Get("/health", [](const httplib::Request&, httplib::Response& res) { res.status = 200; });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubScorer() {
    server_.stop();
    thread_.join();
  }

  RemoteEndpoint endpoint(std::string reward = "echo_brightness") const {
    RemoteEndpoint ep;
    ep.url = "http://127.0.0.1:" + std::to_string(port_);
    ep.reward = std::move(reward);
    ep.timeout_s = 5.0;
    return ep;
  }
  int requests() const { return requests_.load(); }

 private:
  Mode mode_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<int> requests_{0};
};

TEST(RemoteScore, ConstantStub) {
  StubScorer stub(StubScorer::Mode::kConstant);
  EXPECT_EQ(remote_score(stub.endpoint("aesthetic"), solid(0.2, 0.3, 0.4)), 5.0);
  EXPECT_TRUE(probe_scorer(stub.endpoint()));
}

TEST(RemoteScore, EchoBrightnessMatchesLocal) {
  StubScorer stub(StubScorer::Mode::kEchoBrightness);
  Rng rng(4);
  for (int n = 0; n < 5; ++n) {
    const auto img = random_image(rng);
    EXPECT_NEAR(remote_score(stub.endpoint(), img), brightness(img), 1e-3);
  }
}

TEST(RemoteScore, UnreachableAfterOneRetry) {
  RemoteEndpoint ep;
  {
    StubScorer stub(StubScorer::Mode::kConstant);
    ep = stub.endpoint();
  }  // server gone, port closed
  ep.timeout_s = 0.5;
  EXPECT_THROW(remote_score(ep, solid(0, 0, 0)), RewardUnavailable);
  EXPECT_FALSE(probe_scorer(ep));
}

TEST(RemoteScore, ServiceUnavailable) {
  StubScorer stub(StubScorer::Mode::kUnavailable);
  EXPECT_THROW(remote_score(stub.endpoint(), solid(0, 0, 0)), RewardUnavailable);
}

TEST(RemoteScore, ProtocolViolations) {
  StubScorer wrong(StubScorer::Mode::kWrongId);
  EXPECT_THROW(remote_score(wrong.endpoint(), solid(0, 0, 0)), ProtocolError);
  StubScorer malformed(StubScorer::Mode::kMalformed);
  EXPECT_THROW(remote_score(malformed.endpoint(), solid(0, 0, 0)), ProtocolError);
}

TEST(ScoreBatch, RemoteResultsKeepImageOrder) {
  StubScorer stub(StubScorer::Mode::kEchoBrightness);
  auto spec = RewardSpec::remote_scorer(stub.endpoint());
  spec.remote.max_in_flight = 3;
  Rng rng(9);
  std::vector<Image> imgs;
  for (int n = 0; n < 10; ++n) imgs.push_back(random_image(rng));
  std::vector<const Image*> ptrs;
  for (const auto& i : imgs) ptrs.push_back(&i);
  const auto scores = score_batch(spec, ptrs);
  for (std::size_t n = 0; n < imgs.size(); ++n) EXPECT_NEAR(scores[n], brightness(imgs[n]), 1e-3);
  EXPECT_EQ(stub.requests(), 10);
}

TEST(ScoreBatch, CompositeMixesLocalAndRemote) {
  StubScorer stub(StubScorer::Mode::kConstant);
  const auto spec = RewardSpec::weighted({{RewardSpec::raw_brightness(), 2.0},
                                          {RewardSpec::remote_scorer(stub.endpoint("aesthetic")), 0.1}});
  const auto white = solid(1, 1, 1);
  EXPECT_NEAR(score_batch(spec, {&white})[0], 1.9998 + 0.5, 1e-12);
}

}  // namespace
}  // namespace scalegrpo
