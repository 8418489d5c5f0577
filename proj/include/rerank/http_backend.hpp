#pragma once

// OpenAI-compatible chat-completions client. Include only where needed:
// cpp-httplib is large.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <string>
#include <thread>

#include <spdlog/spdlog.h>

#include "httplib.h"
#include "json.hpp"
#include "rerank/backend.hpp"
#include "rerank/error.hpp"

namespace rerank {

inline constexpr const char* kApiKeyEnv = "LLM_API_KEY";

struct HttpConfig {
  std::string base_url = "http://127.0.0.1:8000";
  std::string model_id;
  // Empty: read from LLM_API_KEY at construction.
  std::string api_key;
  long timeout_ms = 60'000;
  int retry_budget = 3;
  std::size_t parallelism = 1;
  long backoff_ms = 250;
  long max_backoff_ms = 8'000;
};

class HttpBackend final : public Backend {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  explicit HttpBackend(HttpConfig config, Sleeper sleeper = {})
      : Backend(config.parallelism), config_(std::move(config)), sleeper_(std::move(sleeper)) {
    if (config_.model_id.empty()) throw Error(ErrorKind::usage, "missing_model_id");
    if (config_.api_key.empty()) {
      if (const char* env = std::getenv(kApiKeyEnv)) config_.api_key = env;
    }
    split_url();
    if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  }

  BackendKind kind() const override { return BackendKind::http; }
  std::string model_id() const override { return config_.model_id; }

  // Characters per token, learned from usage metadata; 4 until calibrated.
  double chars_per_token() const {
    std::lock_guard lock(mutex_);
    return prompt_tokens_ > 0 ? static_cast<double>(prompt_chars_) / prompt_tokens_ : 4.0;
  }

  std::size_t token_length(std::string_view text) const override {
    const double est = static_cast<double>(text.size()) / chars_per_token();
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(est)));
  }

  const std::string& endpoint() const noexcept { return path_; }

  static nlohmann::json request_body(const ChatRequest& req, const std::string& model) {
    nlohmann::json body;
    body["model"] = model;
    body["messages"] = nlohmann::json::array();
    for (const auto& m : req.messages) {
      body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    }
    body["temperature"] = req.temperature;
    // Attempt-specific seed so retries sample afresh.
    body["seed"] = static_cast<std::int64_t>((req.seed + static_cast<std::uint64_t>(req.attempt)) &
                                             0x7fffffffffffffffULL);
    return body;
  }

 protected:
  ChatReply do_complete(const ChatRequest& req) override {
    const std::string body = request_body(req, config_.model_id).dump();
    std::size_t prompt_chars = 0;
    for (const auto& m : req.messages) prompt_chars += m.content.size();

    long delay = config_.backoff_ms;
    std::string last_problem;
    for (int attempt = 0; attempt <= config_.retry_budget; ++attempt) {
      if (attempt > 0) {
        sleeper_(std::chrono::milliseconds(delay));
        delay = std::min(delay * 2, config_.max_backoff_ms);
      }
      httplib::Client client(origin_);
      const auto secs = config_.timeout_ms / 1000;
      const auto usecs = (config_.timeout_ms % 1000) * 1000;
      client.set_connection_timeout(secs, usecs);
      client.set_read_timeout(secs, usecs);
      client.set_write_timeout(secs, usecs);
      httplib::Headers headers;
      if (!config_.api_key.empty()) {
        headers.emplace("Authorization", "Bearer " + config_.api_key);
      }
      const auto res = client.Post(path_, headers, body, "application/json");
      if (!res) {
        last_problem = httplib::to_string(res.error());
        spdlog::warn("{}: request failed ({}), attempt {}", config_.model_id, last_problem,
                     attempt + 1);
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_problem = "HTTP " + std::to_string(res->status);
        spdlog::warn("{}: {} on attempt {}", config_.model_id, last_problem, attempt + 1);
        continue;
      }
      if (res->status < 200 || res->status >= 300) {
        throw Error(ErrorKind::backend, "http_error",
                    "HTTP " + std::to_string(res->status) + ": " + res->body);
      }
      return parse_reply(res->body, prompt_chars);
    }
    throw Error(ErrorKind::backend, "backend_unavailable",
                config_.model_id + " after " + std::to_string(config_.retry_budget + 1) +
                    " attempts: " + last_problem);
  }

 private:
  void split_url() {
    const auto scheme_end = config_.base_url.find("://");
    const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
    const auto path_start = config_.base_url.find('/', host_start);
    origin_ = config_.base_url.substr(0, path_start);
    std::string prefix = path_start == std::string::npos ? "" : config_.base_url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    const bool has_v1 = prefix.size() >= 3 && prefix.compare(prefix.size() - 3, 3, "/v1") == 0;
    path_ = prefix + (has_v1 ? "/chat/completions" : "/v1/chat/completions");
  }

  ChatReply parse_reply(const std::string& text, std::size_t prompt_chars) {
    ChatReply reply;
    try {
      const auto j = nlohmann::json::parse(text);
      reply.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
      if (j.contains("usage") && j["usage"].is_object()) {
        reply.usage.prompt_tokens = j["usage"].value("prompt_tokens", std::size_t{0});
        reply.usage.completion_tokens = j["usage"].value("completion_tokens", std::size_t{0});
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::backend, "invalid_response", e.what());
    }
    if (reply.usage.prompt_tokens > 0) {
      std::lock_guard lock(mutex_);
      prompt_chars_ += prompt_chars;
      prompt_tokens_ += reply.usage.prompt_tokens;
    }
    return reply;
  }

  HttpConfig config_;
  Sleeper sleeper_;
  std::string origin_;
  std::string path_;
  mutable std::mutex mutex_;
  std::size_t prompt_chars_ = 0;
  std::size_t prompt_tokens_ = 0;
};

}  // namespace rerank
