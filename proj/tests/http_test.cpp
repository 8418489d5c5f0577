#include <gtest/gtest.h>

#include <atomic>
#include <mutex>
#include <thread>

#include "rerank/http_backend.hpp"

using namespace rerank;

namespace {

// Local chat-completions endpoint driven by a handler.
class FakeServer {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  explicit FakeServer(Handler handler) : handler_(std::move(handler)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++hits_;
      {
        std::lock_guard lock(mutex_);
        last_body_ = req.body;
        last_auth_ = req.get_header_value("Authorization");
      }
      handler_(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int hits() const { return hits_.load(); }
  std::string last_body() const {
    std::lock_guard lock(mutex_);
    return last_body_;
  }
  std::string last_auth() const {
    std::lock_guard lock(mutex_);
    return last_auth_;
  }

 private:
  Handler handler_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<int> hits_{0};
  mutable std::mutex mutex_;
  std::string last_body_, last_auth_;
};

std::string completion(const std::string& content, int prompt_tokens = 0) {
  nlohmann::json j;
  j["choices"] = {{{"message", {{"role", "assistant"}, {"content", content}}}}};
  if (prompt_tokens > 0) j["usage"] = {{"prompt_tokens", prompt_tokens}, {"completion_tokens", 3}};
  return j.dump();
}

ChatRequest hello(std::string text = "hello") {
  ChatRequest req;
  req.messages = {{"user", std::move(text)}};
  req.seed = 42;
  return req;
}

HttpConfig config_for(const FakeServer& s) {
  HttpConfig c;
  c.base_url = s.url();
  c.model_id = "test-model";
  c.api_key = "sk-test-secret";
  c.timeout_ms = 5000;
  return c;
}

struct RecordedSleeps {
  std::vector<long> ms;
  HttpBackend::Sleeper sleeper() {
    return [this](std::chrono::milliseconds d) { ms.push_back(d.count()); };
  }
};

}  // namespace

TEST(Http, SendsRequestAndParsesReply) {
  FakeServer server([](const httplib::Request&, httplib::Response& res) {
    res.set_content(completion("answer: 3"), "application/json");
  });
  HttpBackend backend(config_for(server));
  EXPECT_EQ(backend.complete(hello()).text, "answer: 3");
  EXPECT_EQ(server.last_auth(), "Bearer sk-test-secret");
  const auto body = nlohmann::json::parse(server.last_body());
  EXPECT_EQ(body["model"], "test-model");
  EXPECT_EQ(body["messages"][0]["content"], "hello");
  EXPECT_EQ(body["seed"], 42);
  EXPECT_EQ(body["temperature"], 0.0);
}

TEST(Http, RetriesRateLimitsWithBackoff) {
  std::atomic<int> n{0};
  FakeServer server([&](const httplib::Request&, httplib::Response& res) {
    if (n++ < 2) {
      res.status = 429;
      return;
    }
    res.set_content(completion("ok"), "application/json");
  });
  RecordedSleeps sleeps;
  HttpBackend backend(config_for(server), sleeps.sleeper());
  EXPECT_EQ(backend.complete(hello()).text, "ok");
  EXPECT_EQ(server.hits(), 3);
  EXPECT_EQ(sleeps.ms, (std::vector<long>{250, 500}));
}

TEST(Http, ServerErrorsExhaustBudget) {
  FakeServer server([](const httplib::Request&, httplib::Response& res) { res.status = 503; });
  RecordedSleeps sleeps;
  auto cfg = config_for(server);
  cfg.retry_budget = 2;
  HttpBackend backend(cfg, sleeps.sleeper());
  try {
    backend.complete(hello());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "backend_unavailable");
    EXPECT_EQ(e.kind(), ErrorKind::backend);
  }
  EXPECT_EQ(server.hits(), 3);
}

TEST(Http, ClientErrorSurfacesBodyWithoutRetry) {
  FakeServer server([](const httplib::Request&, httplib::Response& res) {
    res.status = 400;
    res.set_content(R"({"error": "bad model"})", "application/json");
  });
  HttpBackend backend(config_for(server), RecordedSleeps{}.sleeper());
  try {
    backend.complete(hello());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "http_error");
    const std::string what = e.what();
    EXPECT_NE(what.find("400"), std::string::npos);
    EXPECT_NE(what.find("bad model"), std::string::npos);
    EXPECT_EQ(what.find("sk-test-secret"), std::string::npos);
  }
  EXPECT_EQ(server.hits(), 1);
}

TEST(Http, MalformedReply) {
  FakeServer server([](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"choices": []})", "application/json");
  });
  HttpBackend backend(config_for(server));
  try {
    backend.complete(hello());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "invalid_response");
  }
}

TEST(Http, UnreachableServer) {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  HttpConfig cfg;
  cfg.base_url = "http://127.0.0.1:" + std::to_string(port);
  cfg.model_id = "m";
  cfg.retry_budget = 1;
  cfg.timeout_ms = 500;
  RecordedSleeps sleeps;
  HttpBackend backend(cfg, sleeps.sleeper());
  try {
    backend.complete(hello());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "backend_unavailable");
  }
  EXPECT_EQ(sleeps.ms.size(), 1u);
}

TEST(Http, CalibratesTokenLengthFromUsage) {
  FakeServer server([](const httplib::Request&, httplib::Response& res) {
    res.set_content(completion("ok", 10), "application/json");
  });
  HttpBackend backend(config_for(server));
  EXPECT_EQ(backend.chars_per_token(), 4.0);
  EXPECT_EQ(backend.token_length("abcdefgh"), 2u);
  backend.complete(hello(std::string(60, 'x')));
  EXPECT_EQ(backend.chars_per_token(), 6.0);
  EXPECT_EQ(backend.token_length(std::string(60, 'y')), 10u);
  EXPECT_EQ(backend.token_length(""), 1u);
}

TEST(Http, EndpointResolution) {
  const auto endpoint = [](const std::string& base) {
    HttpConfig c;
    c.base_url = base;
    c.model_id = "m";
    return HttpBackend(c).endpoint();
  };
  EXPECT_EQ(endpoint("http://localhost:8000"), "/v1/chat/completions");
  EXPECT_EQ(endpoint("https://api.example.com/v1"), "/v1/chat/completions");
  EXPECT_EQ(endpoint("https://api.example.com/v1/"), "/v1/chat/completions");
  EXPECT_EQ(endpoint("http://host/proxy"), "/proxy/v1/chat/completions");
}

TEST(Http, AttemptShiftsSeed) {
  auto req = hello();
  req.attempt = 2;
  EXPECT_EQ(HttpBackend::request_body(req, "m")["seed"], 44);
}

TEST(Http, MissingModelId) {
  HttpConfig c;
  EXPECT_THROW(HttpBackend{c}, Error);
}
