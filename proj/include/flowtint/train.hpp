#pragma once

#include <chrono>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/sha.h>

#include "flowtint/checkpoint.hpp"
#include "flowtint/dataforge.hpp"
#include "flowtint/errors.hpp"
#include "flowtint/flow.hpp"
#include "flowtint/net.hpp"
#include "flowtint/reward.hpp"
#include "flowtint/rng.hpp"

namespace flowtint {

struct NftConfig {
  double beta = 0.5;
  int group_online = 9;
  int group_offline = 2;
  int train_steps_per_round = 4;
  int rollout_steps = 6;
  double learn_rate = 1e-4;
  std::uint64_t seed = 0;
  // Missing anchors: proceed online-only with a warning (default) or fail hard.
  bool allow_online_only_fallback = true;

  void validate() const {
    if (beta <= 0.0) throw ConfigError("nft config: beta must be > 0");
    if (group_online + group_offline < 2) throw ConfigError("nft config: total group size must be >= 2");
    if (group_online < 1) throw ConfigError("nft config: need at least one online sample");
    if (rollout_steps < 1) throw ConfigError("nft config: rollout_steps must be >= 1");
    if (train_steps_per_round < 1) throw ConfigError("nft config: train_steps_per_round must be >= 1");
  }
};

using PolicySnapshot = VelocityField;  // frozen-by-copy weights of pi_old

inline std::pair<Vec, Vec> implicit_policies(const Vec& v_old, const Vec& v_theta, double beta) {
  check_same_shape(v_old, v_theta, "implicit_policies");
  if (beta <= 0.0) throw DomainError("implicit_policies: beta must be > 0");
  Vec v_plus(v_old.size()), v_minus(v_old.size());
  for (size_t i = 0; i < v_old.size(); ++i) {
    v_plus[i] = (1.0 - beta) * v_old[i] + beta * v_theta[i];
    v_minus[i] = (1.0 + beta) * v_old[i] - beta * v_theta[i];
  }
  return {std::move(v_plus), std::move(v_minus)};
}

// Deterministic token ids for the task phrase.
inline std::vector<int> tokenize_prompt(const std::string& prompt, const NetConfig& cfg) {
  std::vector<int> ids;
  std::istringstream ss(prompt);
  std::string word;
  while (ss >> word && static_cast<int>(ids.size()) < cfg.max_prompt) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : word) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
    ids.push_back(static_cast<int>(h % cfg.vocab));
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Negative-aware loss: reward-weighted flow matching of the implicit positive
// and negative policies against the forward-process target velocity.

struct NftEval {
  double loss = 0.0;
  Grads grads;
};

inline NftEval nft_loss_eval(const VelocityField& field, const PolicySnapshot& snapshot,
                             const ScoredSample& sample, const ConditioningContext& ctx, double t,
                             std::uint64_t noise_seed, double beta, bool want_grads,
                             const std::string& sample_id = "") {
  if (sample.reward < 0.0 || sample.reward > 1.0)
    throw DomainError("nft_loss: reward outside [0,1]");
  const double r = sample.reward;
  const Vec& x0 = sample.image.data;
  Vec x1 = standard_normal(x0.size(), noise_seed);
  Vec xt = interpolate(x0, x1, t);
  Vec v = target_velocity(x0, x1);

  Vec v_old = forward(snapshot, xt, ctx, t);
  ForwardTrace trace;
  Vec v_theta = forward_traced(field, xt, ctx, t, trace);
  auto [v_plus, v_minus] = implicit_policies(v_old, v_theta, beta);

  const double n = static_cast<double>(v.size());
  double loss = 0.0;
  for (size_t i = 0; i < v.size(); ++i) {
    double dp = v_plus[i] - v[i];
    double dm = v_minus[i] - v[i];
    loss += (r * dp * dp + (1.0 - r) * dm * dm) / n;
  }
  if (!std::isfinite(loss))
    throw NumericError("nft_loss: non-finite loss (sample " + sample_id + ", t=" + std::to_string(t) + ")");

  NftEval out;
  out.loss = loss;
  if (want_grads) {
    // dL/dv_theta = (2 beta / n) * [ r (v_plus - v) - (1-r)(v_minus - v) ]
    Vec dv(v.size());
    for (size_t i = 0; i < v.size(); ++i)
      dv[i] = (2.0 * beta / n) * (r * (v_plus[i] - v[i]) - (1.0 - r) * (v_minus[i] - v[i]));
    out.grads = backward(field, trace, dv);
  }
  return out;
}

inline double nft_loss(const VelocityField& field, const PolicySnapshot& snapshot,
                       const ScoredSample& sample, const ConditioningContext& ctx, double t,
                       std::uint64_t noise_seed, double beta) {
  return nft_loss_eval(field, snapshot, sample, ctx, t, noise_seed, beta, false).loss;
}

// ---------------------------------------------------------------------------
// Stage 1: supervised flow matching on quadruplets, cold-start adapter only.

struct TrainItem {
  ImageTensor source;
  ImageTensor reference;
  ImageTensor target;  // empty for unpaired items
  std::vector<int> prompt;
  std::string context_id;
};

inline std::vector<TrainItem> load_items(const DatasetManifest& m, const NetConfig& cfg) {
  std::vector<TrainItem> items;
  if (m.kind == "paired") {
    for (const auto& r : m.paired) {
      TrainItem it;
      it.source = read_png((m.dir / r.source_path).string());
      it.reference = read_png((m.dir / r.reference_path).string());
      it.target = read_png((m.dir / r.target_path).string());
      it.prompt = tokenize_prompt(r.prompt, cfg);
      it.context_id = r.source_path;
      items.push_back(std::move(it));
    }
  } else {
    for (const auto& r : m.unpaired) {
      TrainItem it;
      it.source = read_png((m.dir / r.source_path).string());
      it.reference = read_png((m.dir / r.reference_path).string());
      it.prompt = tokenize_prompt(r.prompt, cfg);
      it.context_id = r.source_path;
      items.push_back(std::move(it));
    }
  }
  return items;
}

inline double cold_start_step(VelocityField& field, const std::vector<TrainItem>& batch, double lr,
                              std::uint64_t seed, std::uint64_t step, AdamState* opt = nullptr) {
  if (!has_stage(field, Stage::cold_start))
    throw ConfigError("cold_start_step: no cold-start adapter attached");
  if (has_stage(field, Stage::post_training))
    throw ConfigError("cold_start_step: post-training adapter present; stage order violated");
  if (batch.empty()) throw DataError("cold_start_step: empty batch");

  Grads total = Grads::zeros(field);
  double loss_sum = 0.0;
  for (size_t i = 0; i < batch.size(); ++i) {
    const TrainItem& it = batch[i];
    Rng rng = Rng::from(seed, {0x51ull, step, i});
    // Density proportional to t^2: with the head's clean-image parameterization
    // the velocity residual carries a 1/t^2 factor, so this keeps the effective
    // weight on the clean-image error uniform across the path.
    double t = std::cbrt(rng.uniform());
    std::uint64_t noise_seed = Rng::derive(seed, {0x52ull, step, i});
    Vec x1 = standard_normal(it.target.data.size(), noise_seed);
    Vec xt = interpolate(it.target.data, x1, t);
    Vec v = target_velocity(it.target.data, x1);
    ConditioningContext ctx{it.source, it.reference, it.prompt};
    ForwardTrace trace;
    Vec pred = forward_traced(field, xt, ctx, t, trace);
    loss_sum += fm_loss(pred, v);
    Vec dv(v.size());
    for (size_t j = 0; j < v.size(); ++j) dv[j] = 2.0 * (pred[j] - v[j]) / static_cast<double>(v.size());
    total.add_scaled(backward(field, trace, dv), 1.0 / static_cast<double>(batch.size()));
  }
  if (opt)
    apply_adam(field, total, lr, *opt);
  else
    apply_sgd(field, total, lr);
  field.step_counter += 1;
  return loss_sum / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Stage 2: one sampling / scoring / fine-tuning round over a hybrid group.

struct RoundResult {
  RolloutGroup group;
  double group_loss = 0.0;
  bool online_only = false;
};

inline RoundResult rl_round(VelocityField& field, const NftConfig& cfg, const TrainItem& context,
                            const ScorerFn& scorer, const AnchorPool& anchors, std::uint64_t round,
                            std::ostream* log = nullptr, AdamState* opt = nullptr) {
  cfg.validate();
  if (!has_stage(field, Stage::cold_start) || !has_stage(field, Stage::post_training))
    throw ConfigError("rl_round: requires a frozen cold-start adapter and a post-training adapter");

  auto t_start = std::chrono::steady_clock::now();
  PolicySnapshot snapshot = field;
  ConditioningContext ctx{context.source, context.reference, context.prompt};

  RoundResult result;
  RolloutGroup& group = result.group;
  const int hw = field.cfg.image_size;
  for (int g = 0; g < cfg.group_online; ++g) {
    std::uint64_t stream = Rng::derive(cfg.seed, {0x60ull, round, static_cast<std::uint64_t>(g)});
    auto fn = [&](const Vec& x, double t) { return forward(snapshot, x, ctx, t); };
    ScoredSample s;
    s.image = euler_sample_with(fn, hw, hw, cfg.rollout_steps, stream);
    s.origin = SampleOrigin::online;
    group.members.push_back(std::move(s));
  }

  auto it = anchors.find(context.context_id);
  int offline_used = 0;
  if (cfg.group_offline > 0) {
    if (it == anchors.end() || it->second.empty()) {
      if (!cfg.allow_online_only_fallback)
        throw DataError("rl_round: no offline anchors for context " + context.context_id);
      result.online_only = true;
    } else {
      for (const auto& a : it->second) {
        if (offline_used >= cfg.group_offline) break;
        ScoredSample s;
        s.image = a.image;
        s.origin = SampleOrigin::offline;
        s.raw_score = a.human_score;
        group.members.push_back(std::move(s));
        ++offline_used;
      }
    }
  }

  score_group(group, context.reference, scorer);

  double step_loss = 0.0;
  for (int step = 0; step < cfg.train_steps_per_round; ++step) {
    Grads total = Grads::zeros(field);
    step_loss = 0.0;
    for (size_t i = 0; i < group.members.size(); ++i) {
      Rng rng = Rng::from(cfg.seed, {0x71ull, round, static_cast<std::uint64_t>(step), i});
      double t = std::cbrt(rng.uniform());  // same t^2 density as the cold stage
      std::uint64_t noise_seed = Rng::derive(cfg.seed, {0x72ull, round, static_cast<std::uint64_t>(step), i});
      NftEval ev = nft_loss_eval(field, snapshot, group.members[i], ctx, t, noise_seed, cfg.beta, true,
                                 context.context_id + "#" + std::to_string(i));
      step_loss += ev.loss / static_cast<double>(group.members.size());
      total.add_scaled(ev.grads, 1.0 / static_cast<double>(group.members.size()));
    }
    if (opt)
      apply_adam(field, total, cfg.learn_rate, *opt);
    else
      apply_sgd(field, total, cfg.learn_rate);
    field.step_counter += 1;
  }
  result.group_loss = step_loss;

  if (log) {
    auto wall =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t_start);
    std::vector<double> raws, rewards;
    for (const auto& m : group.members) {
      raws.push_back(m.raw_score);
      rewards.push_back(m.reward);
    }
    nlohmann::json j{{"round", round},          {"context_id", context.context_id},
                     {"raw_scores", raws},      {"rewards", rewards},
                     {"mu", group.mu},          {"sigma", group.sigma},
                     {"group_loss", step_loss}, {"wall_ms", wall.count()}};
    if (result.online_only) j["warning"] = "no offline anchors; proceeding online-only";
    (*log) << j.dump() << "\n";
  }
  return result;
}

// ---------------------------------------------------------------------------
// Weight checksums for stage-isolation checks.

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), digest);
  std::ostringstream os;
  for (unsigned char c : digest) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(c);
  return os.str();
}

inline std::string base_checksum(const VelocityField& f) {
  std::ostringstream os(std::ios::binary);
  detail::put_linear_base(os, f.patch_embed);
  for (const auto& be : f.branch_embed) detail::put_f32s(os, be);
  detail::put_f32s(os, f.pos_embed.a);
  detail::put_f32s(os, f.src_inject.a);
  detail::put_f32s(os, f.ref_inject.a);
  detail::put_f32s(os, f.prompt_embed.a);
  for (const auto& blk : f.blocks) {
    detail::put_linear_base(os, blk.q);
    detail::put_linear_base(os, blk.k);
    detail::put_linear_base(os, blk.v);
    detail::put_linear_base(os, blk.o);
    detail::put_linear_base(os, blk.mlp1);
    detail::put_linear_base(os, blk.mlp2);
  }
  detail::put_linear_base(os, f.head);
  return sha256_hex(os.str());
}

inline std::string adapter_checksum(const VelocityField& f, Stage stage) {
  std::ostringstream os(std::ios::binary);
  for (int id = 0; id < f.adapted_count(); ++id)
    for (const auto& ad : f.adapted(id).adapters)
      if (ad.stage_tag == stage) {
        detail::put_f32s(os, ad.A.a);
        detail::put_f32s(os, ad.B.a);
      }
  return sha256_hex(os.str());
}

}  // namespace flowtint
