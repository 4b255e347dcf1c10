#pragma once

#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "flowtint/errors.hpp"
#include "flowtint/image.hpp"
#include "flowtint/reward.hpp"

namespace flowtint {

// Instruction sent with every scoring request. It pins the scorer to the
// color-similarity rubric: overall tone, saturation, and brightness, with
// local inconsistencies acting as deductions, on a 0-5 scale.
inline std::string scorer_prompt(bool judge_mode) {
  std::string p =
      "You are a strict color-harmony rater. Compare the two attached images: the first is the "
      "reference, the second is a candidate result. Judge only their visual color similarity on "
      "three axes: overall color tone tendency, color saturation, and brightness distribution. "
      "Weigh the overall atmosphere first; clear color mismatches of key local elements lower the "
      "rating. Ignore content, composition, subject matter, and sharpness entirely. Rate 0 (colors "
      "unrelated or opposite on two or more axes) through 5 (no perceptible color difference on any "
      "axis).";
  p += judge_mode
           ? " Respond with JSON of the form {\"score\": [n], \"reasoning\": \"...\"}."
           : " Respond with the single number only.";
  return p;
}

struct EndpointConfig {
  std::string host = "127.0.0.1";
  int port = 0;
  std::string path = "/score";
  int timeout_ms = 5000;
  int retries = 2;          // retries after the first attempt
  std::string mode = "logits";  // "logits" | "judge"
  std::vector<double> tokens = {1, 2, 3, 4, 5};
};

struct RemoteCallReport {
  int attempts = 0;
  int retries_used = 0;
};

inline ScoreDistribution remote_score(const ImageTensor& reference, const ImageTensor& prediction,
                                      const EndpointConfig& cfg, RemoteCallReport* report = nullptr) {
  nlohmann::json body{{"prompt", scorer_prompt(cfg.mode == "judge")},
                      {"reference", base64_encode(encode_png(reference))},
                      {"prediction", base64_encode(encode_png(prediction))},
                      {"mode", cfg.mode}};
  const std::string payload = body.dump();

  httplib::Client client(cfg.host, cfg.port);
  client.set_connection_timeout(0, cfg.timeout_ms * 1000);
  client.set_read_timeout(cfg.timeout_ms / 1000, (cfg.timeout_ms % 1000) * 1000);

  std::string last_error;
  for (int attempt = 0; attempt <= cfg.retries; ++attempt) {
    if (report) {
      report->attempts = attempt + 1;
      report->retries_used = attempt;
    }
    auto res = client.Post(cfg.path, payload, "application/json");
    if (!res || res->status < 200 || res->status >= 300) {
      last_error = res ? "HTTP status " + std::to_string(res->status) : "transport failure or timeout";
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception&) {
      throw ProtocolError("remote scorer returned unparsable body", res->body);
    }
    if (j.contains("logits")) {
      auto logits = j.at("logits").get<std::vector<double>>();
      if (logits.size() != cfg.tokens.size())
        throw ProtocolError("remote scorer logits length does not match the token set", res->body);
      return ScoreDistribution::from_logits(std::move(logits), cfg.tokens);
    }
    if (j.contains("score")) {
      const auto& s = j.at("score");
      double value;
      if (s.is_array()) {
        if (s.empty()) throw ProtocolError("remote scorer returned an empty score array", res->body);
        value = s[0].get<double>();
      } else {
        value = s.get<double>();
      }
      return ScoreDistribution::delta(value, cfg.tokens);
    }
    throw ProtocolError("remote scorer response has neither logits nor score", res->body);
  }
  throw RemoteError("remote scorer failed after " + std::to_string(cfg.retries + 1) +
                    " attempts: " + last_error);
}

inline ScorerFn make_remote_scorer(const EndpointConfig& cfg) {
  return [cfg](const ImageTensor& ref, const ImageTensor& pred) { return remote_score(ref, pred, cfg); };
}

inline ScorerFn make_proxy_scorer(const ProxyParams& params = {}) {
  return [params](const ImageTensor& ref, const ImageTensor& pred) { return proxy_score(ref, pred, params); };
}

}  // namespace flowtint
