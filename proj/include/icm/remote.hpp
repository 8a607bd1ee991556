#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "icm/error.hpp"
#include "icm/predictor.hpp"

namespace icm {

struct BackendConfig {
  std::string base_url;  // scheme://host[:port][/path]; path defaults to /v1/label_logprobs
  std::string model_name;
  std::string auth_token_env_name = "ICM_BACKEND_TOKEN";
  double request_timeout = 30.0;
  int max_retries = 3;
  double retry_base_delay = 0.5;
  std::size_t max_in_flight = 4;

  void validate() const {
    if (base_url.empty()) throw ConfigError("backend_url is required");
    if (max_retries < 0) throw ConfigError("max_retries must be >= 0");
    if (max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
    if (!(request_timeout > 0.0)) throw ConfigError("request_timeout must be positive");
    if (!(retry_base_delay >= 0.0)) throw ConfigError("retry_base_delay must be non-negative");
  }
};

inline constexpr const char* kDefaultBackendPath = "/v1/label_logprobs";

namespace detail {

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline Endpoint split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError("backend_url needs a scheme: " + url);
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, kDefaultBackendPath};
  return {url.substr(0, slash), url.substr(slash)};
}

class Semaphore {
 public:
  explicit Semaphore(std::size_t n) : free_(n) {}
  void acquire() {
    std::unique_lock lock(m_);
    cv_.wait(lock, [&] { return free_ > 0; });
    --free_;
  }
  void release() {
    {
      std::lock_guard lock(m_);
      ++free_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex m_;
  std::condition_variable cv_;
  std::size_t free_;
};

}  // namespace detail

// Request body:  {"model": str, "prompt": str, "candidates": [label tokens], "temperature": 0}
// Response body: {"logprobs": {token: log-probability, ...}}
inline nlohmann::json make_logprob_request(const BackendConfig& cfg, const std::string& prompt,
                                           const std::vector<std::string>& labels) {
  return {{"model", cfg.model_name}, {"prompt", prompt}, {"candidates", labels}, {"temperature", 0}};
}

// Raw per-label scores from a response body, in label order. Throws
// BackendError when the body is malformed or a label is missing.
inline std::vector<double> parse_logprob_response(const std::string& body, const std::vector<std::string>& labels,
                                                  const std::string& endpoint) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error&) {
    throw BackendError("malformed backend response", endpoint);
  }
  if (!j.is_object() || !j.contains("logprobs") || !j["logprobs"].is_object())
    throw BackendError("backend response lacks a logprobs object", endpoint);
  std::vector<double> raw;
  for (const auto& tok : labels) {
    auto it = j["logprobs"].find(tok);
    if (it == j["logprobs"].end()) throw BackendError("label token missing from backend response: " + tok, endpoint);
    if (!it->is_number()) throw BackendError("non-numeric logprob for label " + tok, endpoint);
    raw.push_back(it->get<double>());
  }
  return raw;
}

// Remote inference backend reading label log-probabilities at zero
// temperature. Not pure: the backend may change under us.
class RemotePredictor final : public Predictor {
 public:
  RemotePredictor(LabelSpace labels, BackendConfig cfg)
      : Predictor(std::move(labels)), cfg_(std::move(cfg)), slots_(cfg_.max_in_flight) {
    cfg_.validate();
    endpoint_ = detail::split_url(cfg_.base_url);
  }

  std::string identity() const override { return "remote:" + cfg_.base_url + "#" + cfg_.model_name; }
  std::size_t max_in_flight() const override { return cfg_.max_in_flight; }
  std::uint64_t attempts() const noexcept { return attempts_.load(); }
  const BackendConfig& config() const noexcept { return cfg_; }

  std::vector<double> remote_label_logprobs(const std::string& prompt) {
    const std::vector<std::string> labels = label_space().tokens();
    const std::string body = make_logprob_request(cfg_, prompt, labels).dump();
    httplib::Headers headers;
    if (const char* tok = std::getenv(cfg_.auth_token_env_name.c_str()); tok && *tok)
      headers.emplace("Authorization", std::string("Bearer ") + tok);

    slots_.acquire();
    struct Release {
      detail::Semaphore& s;
      ~Release() { s.release(); }
    } release{slots_};

    httplib::Client client(endpoint_.origin);
    const auto timeout = std::chrono::duration<double>(cfg_.request_timeout);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));

    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) {
        const double delay = cfg_.retry_base_delay * static_cast<double>(1u << (attempt - 1));
        std::this_thread::sleep_for(std::chrono::duration<double>(delay));
      }
      attempts_.fetch_add(1);
      auto res = client.Post(endpoint_.path, headers, body, "application/json");
      if (!res) {
        last_error = "transport failure: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 401 || res->status == 403)
        throw AuthError("authentication failed (HTTP " + std::to_string(res->status) + ")", cfg_.base_url);
      if (res->status >= 500 || res->status == 429) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200)
        throw BackendError("unexpected HTTP " + std::to_string(res->status), cfg_.base_url);
      return parse_logprob_response(res->body, labels, cfg_.base_url);
    }
    throw BackendError("backend unreachable after " + std::to_string(cfg_.max_retries + 1) +
                           " attempts (" + last_error + ")",
                       cfg_.base_url);
  }

 protected:
  Prediction query(const ContextWindow& context, const Example& target) override {
    Prediction p = normalize_log_probs(remote_label_logprobs(render_prompt(context, target, label_space())));
    p.forward_pass_cost = 1;
    return p;
  }

 private:
  BackendConfig cfg_;
  detail::Endpoint endpoint_;
  detail::Semaphore slots_;
  std::atomic<std::uint64_t> attempts_{0};
};

}  // namespace icm
