#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowtint/errors.hpp"
#include "flowtint/image.hpp"

namespace flowtint {

// Distribution over a discrete score-token set M (default 1..5).
struct ScoreDistribution {
  std::vector<double> tokens;
  std::vector<double> logits;
  std::vector<double> probs;

  static ScoreDistribution from_logits(std::vector<double> logits_in,
                                       std::vector<double> tokens_in = {1, 2, 3, 4, 5}) {
    if (tokens_in.empty()) throw ConfigError("ScoreDistribution: empty token set");
    if (logits_in.size() != tokens_in.size())
      throw DimensionError("ScoreDistribution: logits/token count mismatch");
    ScoreDistribution d;
    d.tokens = std::move(tokens_in);
    d.logits = std::move(logits_in);
    double mx = *std::max_element(d.logits.begin(), d.logits.end());
    double sum = 0.0;
    d.probs.resize(d.logits.size());
    for (size_t i = 0; i < d.logits.size(); ++i) {
      d.probs[i] = std::exp(d.logits[i] - mx);
      sum += d.probs[i];
    }
    for (double& p : d.probs) p /= sum;
    return d;
  }

  // All mass on the token closest to `score`.
  static ScoreDistribution delta(double score, std::vector<double> tokens_in = {1, 2, 3, 4, 5}) {
    if (tokens_in.empty()) throw ConfigError("ScoreDistribution: empty token set");
    size_t best = 0;
    for (size_t i = 1; i < tokens_in.size(); ++i)
      if (std::abs(tokens_in[i] - score) < std::abs(tokens_in[best] - score)) best = i;
    ScoreDistribution d;
    d.tokens = std::move(tokens_in);
    d.logits.assign(d.tokens.size(), -1e9);
    d.logits[best] = 0.0;
    d.probs.assign(d.tokens.size(), 0.0);
    d.probs[best] = 1.0;
    return d;
  }
};

inline double expected_score(const ScoreDistribution& dist) {
  if (dist.tokens.empty()) throw ConfigError("expected_score: empty token set");
  double s = 0.0;
  for (size_t i = 0; i < dist.tokens.size(); ++i) s += dist.tokens[i] * dist.probs[i];
  return s;
}

// ---------------------------------------------------------------------------
// Deterministic rubric proxy for the scorer: channel-statistics distances for
// tone, saturation and brightness, folded into logits over the score bands.

struct ProxyParams {
  double kappa = 20.0;
  // Band centers for scores 1..5; calibrated once on the fixture set.
  std::array<double, 5> centers = {0.55, 0.38, 0.25, 0.13, 0.0};
};

inline std::array<double, 3> channel_means(const ImageTensor& img) {
  std::array<double, 3> m{};
  const double n = static_cast<double>(img.h) * img.w;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) m[c] += img.at(y, x, c) / n;
  return m;
}

inline double mean_spread(const ImageTensor& img) {
  double s = 0.0;
  const double n = static_cast<double>(img.h) * img.w;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double r = img.at(y, x, 0), g = img.at(y, x, 1), b = img.at(y, x, 2);
      s += (std::max({r, g, b}) - std::min({r, g, b})) / n;
    }
  return s;
}

inline std::array<double, 8> luma_hist8(const ImageTensor& img) {
  std::array<double, 8> h{};
  const double n = static_cast<double>(img.h) * img.w;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      int bin = std::min(7, static_cast<int>(luma_at(img, y, x) * 8.0));
      h[bin] += 1.0 / n;
    }
  return h;
}

inline double proxy_distance(const ImageTensor& reference, const ImageTensor& prediction) {
  if (!reference.same_shape(prediction)) throw DimensionError("proxy_score: image dimensions differ");
  auto mr = channel_means(reference), mp = channel_means(prediction);
  double dt = 0.0;
  for (int c = 0; c < 3; ++c) dt += (mr[c] - mp[c]) * (mr[c] - mp[c]);
  dt = std::sqrt(dt);
  double ds = std::abs(mean_spread(reference) - mean_spread(prediction));
  auto hr = luma_hist8(reference), hp = luma_hist8(prediction);
  double db = 0.0;
  for (int i = 0; i < 8; ++i) db += std::abs(hr[i] - hp[i]);
  return (dt + ds + db) / 3.0;
}

inline ScoreDistribution proxy_score(const ImageTensor& reference, const ImageTensor& prediction,
                                     const ProxyParams& params = {}) {
  double d = proxy_distance(reference, prediction);
  std::vector<double> logits(5);
  for (int k = 0; k < 5; ++k) logits[k] = -params.kappa * std::abs(d - params.centers[k]);
  return ScoreDistribution::from_logits(std::move(logits));
}

// ---------------------------------------------------------------------------
// Group-wise reward standardization over online rollouts and offline anchors.

enum class SampleOrigin { online, offline };

struct ScoredSample {
  ImageTensor image;
  SampleOrigin origin = SampleOrigin::online;
  double raw_score = 0.0;
  double reward = 0.0;
};

struct RolloutGroup {
  std::vector<ScoredSample> members;  // online first, then offline, index-ordered
  double mu = 0.0;
  double sigma = 0.0;
};

// clip((s - mu)/sigma, -1, 1)/2 + 1/2 with population sigma over the full
// group. sigma == 0 maps everyone to the neutral reward 0.5.
inline void normalize_group(RolloutGroup& group) {
  const size_t g = group.members.size();
  if (g < 2) throw DataError("normalize_group: need at least 2 members");
  double mu = 0.0;
  for (const auto& m : group.members) mu += m.raw_score;
  mu /= static_cast<double>(g);
  double var = 0.0;
  for (const auto& m : group.members) var += (m.raw_score - mu) * (m.raw_score - mu);
  var /= static_cast<double>(g);
  double sigma = std::sqrt(var);
  group.mu = mu;
  group.sigma = sigma;
  for (auto& m : group.members) {
    if (sigma == 0.0) {
      m.reward = 0.5;
    } else {
      double z = std::clamp((m.raw_score - mu) / sigma, -1.0, 1.0);
      m.reward = 0.5 * z + 0.5;
    }
  }
}

using ScorerFn = std::function<ScoreDistribution(const ImageTensor& reference, const ImageTensor& prediction)>;

// Online members are scored by the scorer's expected score; offline members
// keep their human raw score verbatim. Then the whole group is standardized.
inline void score_group(RolloutGroup& group, const ImageTensor& reference, const ScorerFn& scorer) {
  for (size_t i = 0; i < group.members.size(); ++i) {
    auto& m = group.members[i];
    if (m.origin == SampleOrigin::online) {
      try {
        m.raw_score = expected_score(scorer(reference, m.image));
      } catch (const Error& e) {
        throw Error(e.kind(), "score_group: member " + std::to_string(i) + ": " + e.what());
      }
    }
  }
  normalize_group(group);
}

// ---------------------------------------------------------------------------
// Offline anchors, keyed by context id. One context may carry several anchors
// with different human scores.

struct OfflineAnchor {
  std::string context_id;
  std::string image_path;  // relative to the anchor store file
  ImageTensor image;
  double human_score = 0.0;
  std::string note;
};

using AnchorPool = std::map<std::string, std::vector<OfflineAnchor>>;

inline AnchorPool load_anchors(const std::filesystem::path& path, double score_min = 1.0,
                               double score_max = 5.0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read anchor store " + path.string());
  AnchorPool pool;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    OfflineAnchor a;
    a.context_id = j.at("context_id");
    a.image_path = j.at("image");
    a.human_score = j.at("human_score");
    a.note = j.value("note", "");
    if (a.human_score < score_min || a.human_score > score_max)
      throw DataError("anchor for " + a.context_id + ": human_score outside score range");
    a.image = read_png((path.parent_path() / a.image_path).string());
    pool[a.context_id].push_back(std::move(a));
  }
  return pool;
}

inline void save_anchors(const std::filesystem::path& path, const std::vector<OfflineAnchor>& anchors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write anchor store " + path.string());
  for (const auto& a : anchors) {
    out << nlohmann::json{{"context_id", a.context_id},
                          {"image", a.image_path},
                          {"human_score", a.human_score},
                          {"note", a.note}}
               .dump()
        << "\n";
  }
}

}  // namespace flowtint
