#pragma once

#include <cstddef>
#include <cstdint>
#include <semaphore>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rerank/core.hpp"
#include "rerank/error.hpp"

namespace rerank {

enum class BackendKind { simulated, http };

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatRequest {
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  // Sampling seed. Simulated backends derive all randomness from it; HTTP
  // backends forward it as the OpenAI "seed" field.
  std::uint64_t seed = 0;
  // Retry counter; a retry with a higher attempt samples afresh.
  int attempt = 0;
  // In-process routing hint for simulated backends ("answer", "select",
  // "score"). Never sent over the wire.
  std::string purpose;
};

struct Usage {
  std::size_t prompt_tokens = 0;
  std::size_t completion_tokens = 0;
};

struct ChatReply {
  std::string text;
  Usage usage;
};

// Black-box chat model. complete() is safe to call from several threads; at
// most parallelism() calls run at once.
class Backend {
 public:
  explicit Backend(std::size_t parallelism)
      : parallelism_(parallelism == 0 ? 1 : parallelism),
        gate_(static_cast<std::ptrdiff_t>(parallelism_)) {}
  virtual ~Backend() = default;

  Backend(const Backend&) = delete;
  Backend& operator=(const Backend&) = delete;

  ChatReply complete(const ChatRequest& req) {
    if (req.messages.empty()) {
      throw Error(ErrorKind::usage, "invalid_request", "messages must be non-empty");
    }
    gate_.acquire();
    struct Release {
      std::counting_semaphore<kMaxParallelism>& s;
      ~Release() { s.release(); }
    } release{gate_};
    return do_complete(req);
  }

  virtual BackendKind kind() const = 0;
  virtual std::string model_id() const = 0;

  // Token length the backend assigns to a piece of element text.
  virtual std::size_t token_length(std::string_view text) const { return whitespace_tokens(text); }

  std::size_t parallelism() const noexcept { return parallelism_; }

  static constexpr std::ptrdiff_t kMaxParallelism = 1024;

 protected:
  virtual ChatReply do_complete(const ChatRequest& req) = 0;

 private:
  std::size_t parallelism_;
  std::counting_semaphore<kMaxParallelism> gate_;
};

// Re-assigns every element's token_len with the backend's tokenizer estimate.
inline void assign_token_lengths(Task& task, const Backend& backend) {
  for (auto& e : task.elements) e.token_len = std::max<std::size_t>(1, backend.token_length(e.text));
}

// Runs `attempt_fn(attempt)` up to 1 + retries times; the last error escapes.
template <typename Fn>
auto with_retries(int retries, Fn&& attempt_fn) {
  for (int attempt = 0;; ++attempt) {
    try {
      return attempt_fn(attempt);
    } catch (const Error&) {
      if (attempt >= retries) throw;
    }
  }
}

}  // namespace rerank
