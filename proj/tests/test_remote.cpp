#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <functional>
#include <mutex>
#include <thread>

#include "icm/remote.hpp"
#include "test_support.hpp"

using namespace icm;
using icm::testing::F;
using icm::testing::T;

namespace {

// Local HTTP backend; `handler` decides each reply.
class FakeBackend {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  explicit FakeBackend(Handler h) : handler_(std::move(h)) {
    server_.Post("/v1/label_logprobs", [this](const httplib::Request& req, httplib::Response& res) {
      {
        std::lock_guard lock(m_);
        requests_.push_back(req.body);
        auth_.push_back(req.get_header_value("Authorization"));
      }
      handler_(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeBackend() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  std::vector<std::string> requests() {
    std::lock_guard lock(m_);
    return requests_;
  }
  std::vector<std::string> auth() {
    std::lock_guard lock(m_);
    return auth_;
  }

 private:
  httplib::Server server_;
  Handler handler_;
  int port_ = 0;
  std::thread thread_;
  std::mutex m_;
  std::vector<std::string> requests_, auth_;
};

void reply(httplib::Response& res, double t, double f) {
  res.set_content(nlohmann::json{{"logprobs", {{"True", t}, {"False", f}}}}.dump(), "application/json");
}

BackendConfig config_for(const std::string& url) {
  BackendConfig c;
  c.base_url = url;
  c.model_name = "m";
  c.auth_token_env_name = "ICM_TEST_TOKEN_UNSET";
  c.max_retries = 2;
  c.retry_base_delay = 0.01;
  c.request_timeout = 2.0;
  return c;
}

Prediction ask(RemotePredictor& p, const Dataset& ds) {
  ContextWindow w;
  w.entries.push_back({0, &ds[0], T()});
  return p.label_distribution(w, ds[1]);
}

}  // namespace

TEST(RemoteProtocol, RecordedExchange) {
  std::ifstream in(std::string(ICM_FIXTURE_DIR) + "/remote_exchange.json");
  ASSERT_TRUE(in);
  const auto fx = nlohmann::json::parse(in);
  BackendConfig cfg;
  cfg.model_name = fx["config"]["model"];
  const std::vector<std::string> labels = fx["config"]["labels"];

  std::vector<Example> ex(3);
  const char* claims[] = {"2 + 2 = 4", "3 + 3 = 7", "5 + 5 = 10"};
  for (int i = 0; i < 3; ++i) {
    ex[i].id = "x" + std::to_string(i);
    ex[i].claim_text = claims[i];
  }
  Dataset ds(std::move(ex), LabelSpace{});
  ContextWindow w;
  w.entries.push_back({0, &ds[0], T()});
  w.entries.push_back({1, &ds[1], F()});
  EXPECT_EQ(make_logprob_request(cfg, render_prompt(w, ds[2], ds.label_space()), labels), fx["request"]);

  auto p = normalize_log_probs(parse_logprob_response(fx["response"].dump(), labels, "fixture"));
  EXPECT_NEAR(p.prob(T()), fx["expected_probabilities"]["True"].get<double>(), 1e-9);
  EXPECT_NEAR(p.prob(F()), fx["expected_probabilities"]["False"].get<double>(), 1e-9);
}

TEST(RemoteProtocol, MalformedResponses) {
  const std::vector<std::string> labels = {"True", "False"};
  EXPECT_THROW(parse_logprob_response("not json", labels, "e"), BackendError);
  EXPECT_THROW(parse_logprob_response(R"({"scores":{}})", labels, "e"), BackendError);
  EXPECT_THROW(parse_logprob_response(R"({"logprobs":{"True":-1}})", labels, "e"), BackendError);
  EXPECT_THROW(parse_logprob_response(R"({"logprobs":{"True":-1,"False":"x"}})", labels, "e"), BackendError);
}

TEST(BackendConfig, Validation) {
  BackendConfig c;
  EXPECT_THROW(c.validate(), ConfigError);
  c.base_url = "localhost:1";
  EXPECT_THROW(RemotePredictor(LabelSpace{}, c), ConfigError);
  c.base_url = "http://localhost:1";
  c.max_in_flight = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RemotePredictor, RenormalizesOverLabels) {
  FakeBackend be([](const httplib::Request&, httplib::Response& res) { reply(res, -1.0, -3.0); });
  RemotePredictor p(LabelSpace{}, config_for(be.url()));
  auto ds = icm::testing::plain_dataset(2);
  auto pred = ask(p, ds);
  EXPECT_TRUE(is_normalized(pred));
  EXPECT_NEAR(pred.prob(T()), 1.0 / (1.0 + std::exp(-2.0)), 1e-12);
  EXPECT_EQ(p.forward_passes(), 1u);
  auto body = nlohmann::json::parse(be.requests().at(0));
  EXPECT_EQ(body["prompt"], "claim 0 True\n\nclaim 1");
  EXPECT_EQ(body["temperature"], 0);
  EXPECT_EQ(body["candidates"], (std::vector<std::string>{"True", "False"}));
}

TEST(RemotePredictor, RetriesServerErrors) {
  int calls = 0;
  FakeBackend be([&](const httplib::Request&, httplib::Response& res) {
    if (++calls == 1) {
      res.status = 503;
      return;
    }
    reply(res, -0.5, -0.9);
  });
  RemotePredictor p(LabelSpace{}, config_for(be.url()));
  auto ds = icm::testing::plain_dataset(2);
  EXPECT_NO_THROW(ask(p, ds));
  EXPECT_EQ(p.attempts(), 2u);
}

TEST(RemotePredictor, GivesUpAfterRetries) {
  FakeBackend be([](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  RemotePredictor p(LabelSpace{}, config_for(be.url()));
  auto ds = icm::testing::plain_dataset(2);
  try {
    ask(p, ds);
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.endpoint(), be.url());
  }
  EXPECT_EQ(p.attempts(), 3u);
  EXPECT_EQ(p.forward_passes(), 0u);
}

TEST(RemotePredictor, AuthFailureIsNotRetried) {
  FakeBackend be([](const httplib::Request&, httplib::Response& res) { res.status = 401; });
  RemotePredictor p(LabelSpace{}, config_for(be.url()));
  auto ds = icm::testing::plain_dataset(2);
  EXPECT_THROW(ask(p, ds), AuthError);
  EXPECT_EQ(p.attempts(), 1u);
}

TEST(RemotePredictor, MalformedBodyIsBackendError) {
  FakeBackend be([](const httplib::Request&, httplib::Response& res) { res.set_content("{}", "application/json"); });
  RemotePredictor p(LabelSpace{}, config_for(be.url()));
  auto ds = icm::testing::plain_dataset(2);
  EXPECT_THROW(ask(p, ds), BackendError);
}

TEST(RemotePredictor, TokenFromEnvironment) {
  FakeBackend be([](const httplib::Request&, httplib::Response& res) { reply(res, -1.0, -1.0); });
  auto cfg = config_for(be.url());
  cfg.auth_token_env_name = "ICM_TEST_REMOTE_TOKEN";
  ::setenv("ICM_TEST_REMOTE_TOKEN", "s3cret", 1);
  RemotePredictor p(LabelSpace{}, cfg);
  auto ds = icm::testing::plain_dataset(2);
  ask(p, ds);
  ::unsetenv("ICM_TEST_REMOTE_TOKEN");
  ask(p, ds);
  auto auth = be.auth();
  ASSERT_EQ(auth.size(), 2u);
  EXPECT_EQ(auth[0], "Bearer s3cret");
  EXPECT_EQ(auth[1], "");
  EXPECT_EQ(p.identity().find("s3cret"), std::string::npos);
}

TEST(RemotePredictor, UnreachableNamesEndpoint) {
  auto cfg = config_for("http://127.0.0.1:1");
  cfg.max_retries = 1;
  RemotePredictor p(LabelSpace{}, cfg);
  auto ds = icm::testing::plain_dataset(2);
  try {
    ask(p, ds);
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_NE(std::string(e.what()).find("http://127.0.0.1:1"), std::string::npos);
  }
}
