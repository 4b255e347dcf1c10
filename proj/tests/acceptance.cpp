// Acceptance suite: one test case per shipped guarantee, each emitting a
// single "ACCEPTANCE NN <name>: PASS/FAIL" line so the gate is scriptable.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "flowtint/dataforge.hpp"
#include "flowtint/eval.hpp"
#include "flowtint/metrics.hpp"
#include "flowtint/remote.hpp"
#include "flowtint/train.hpp"

using namespace flowtint;
namespace fs = std::filesystem;

namespace {

void report(int num, const char* what, bool ok) {
  std::printf("ACCEPTANCE %02d %s: %s\n", num, what, ok ? "PASS" : "FAIL");
  std::fflush(stdout);
  CHECK_MESSAGE(ok, "acceptance criterion ", num, " (", what, ")");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

NetConfig tiny_config() {
  NetConfig cfg;
  cfg.image_size = 4;
  cfg.patch = 2;
  cfg.hidden = 4;
  cfg.heads = 2;
  cfg.blocks = 1;
  cfg.mlp_mult = 1;
  cfg.vocab = 8;
  cfg.max_prompt = 2;
  return cfg;
}

NetConfig small_config() {
  NetConfig cfg;
  cfg.image_size = 8;
  cfg.patch = 4;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.blocks = 2;
  cfg.mlp_mult = 2;
  cfg.vocab = 16;
  cfg.max_prompt = 4;
  return cfg;
}

ConditioningContext make_ctx(const NetConfig& cfg, std::uint64_t seed, int prompt_len = 2) {
  ConditioningContext ctx;
  Rng r1 = Rng::from(seed, {1});
  Rng r2 = Rng::from(seed, {2});
  ctx.source = procedural_image(cfg.image_size, r1);
  ctx.reference = procedural_image(cfg.image_size, r2);
  for (int i = 0; i < prompt_len; ++i) ctx.prompt.push_back((i * 3 + 1) % cfg.vocab);
  return ctx;
}

Vec make_latent(const NetConfig& cfg, std::uint64_t seed) {
  return standard_normal(static_cast<size_t>(cfg.latent_dim()), seed);
}

// One synthetic quadruplet: two crops of a shared procedural base, both graded
// by the same random preset. `strength` exaggerates the preset away from
// identity so the color gap between source and target is clearly learnable.
TrainItem make_quad(const NetConfig& cfg, std::uint64_t seed, int i, double strength) {
  Rng rng = Rng::from(seed, {0xda7aull, static_cast<std::uint64_t>(i)});
  ImageTensor base = procedural_image(cfg.image_size * 2, rng);
  ImageTensor crop1 = quantize_roundtrip(random_crop(base, cfg.image_size, rng));
  ImageTensor crop2 = quantize_roundtrip(random_crop(base, cfg.image_size, rng));
  Preset p = random_preset(rng);
  if (strength != 1.0) {
    for (int c = 0; c < 3; ++c) {
      p.lift[c] *= strength;
      p.gain[c] = 1.0 + (p.gain[c] - 1.0) * strength;
      p.gamma[c] = std::pow(p.gamma[c], strength);
    }
    p.saturation = std::max(0.05, 1.0 + (p.saturation - 1.0) * strength);
    p.hue_deg *= strength;
  }
  TrainItem it;
  it.source = crop1;
  it.target = apply_preset(crop1, p);
  it.reference = apply_preset(crop2, p);
  it.prompt = tokenize_prompt(kDefaultPrompt, cfg);
  it.context_id = "q" + std::to_string(i);
  return it;
}

// ---------------------------------------------------------------------------
// Shared fixtures for the learning criteria. The supervised stage is trained
// once and reused by the reward-tuning criteria that build on its checkpoint.

constexpr std::uint64_t kFixtureSeed = 1234;

struct ColdStageFixture {
  NetConfig cfg;                  // library defaults: 16x16, hidden 64
  VelocityField field;            // cold adapter trained, then frozen
  std::vector<TrainItem> held;    // 3 hardest held-out quadruplets
  double ma_first = 0.0;          // moving average of the first 50 losses
  double ma_last = 0.0;           // moving average of the last 50 losses
  double train_seconds = 0.0;
};

const ColdStageFixture& cold_stage() {
  static ColdStageFixture fx = [] {
    ColdStageFixture f;
    f.cfg = NetConfig{};

    // 35 quadruplets; the 3 with the largest source->target color gap
    // (lowest PSNR) are held out, 32 train.
    std::vector<TrainItem> items;
    for (int i = 0; i < 35; ++i) items.push_back(make_quad(f.cfg, kFixtureSeed, i, 1.6));
    std::vector<int> order(items.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return psnr(items[a].source, items[a].target) < psnr(items[b].source, items[b].target);
    });
    std::vector<TrainItem> train;
    for (size_t k = 0; k < order.size(); ++k)
      (k < 3 ? f.held : train).push_back(items[order[k]]);

    f.field = make_field(f.cfg, kFixtureSeed);
    attach_adapter(f.field, 16, 16.0, Stage::cold_start, kFixtureSeed);

    auto t0 = std::chrono::steady_clock::now();
    AdamState opt;
    std::vector<double> losses;
    for (int s = 0; s < 2000; ++s) {
      Rng pick = Rng::from(kFixtureSeed, {0xba7cull, static_cast<std::uint64_t>(s)});
      std::vector<TrainItem> batch;
      for (int i = 0; i < 8; ++i) batch.push_back(train[pick.below(train.size())]);
      losses.push_back(cold_start_step(f.field, batch, 0.003, kFixtureSeed, f.field.step_counter, &opt));
    }
    f.train_seconds = seconds_since(t0);

    auto window_mean = [&](size_t lo) {
      double m = 0.0;
      for (size_t i = lo; i < lo + 50; ++i) m += losses[i] / 50.0;
      return m;
    };
    f.ma_first = window_mean(0);
    f.ma_last = window_mean(losses.size() - 50);

    set_stage_frozen(f.field, Stage::cold_start, true);
    return f;
  }();
  return fx;
}

// Unpaired reward-tuning fixture on top of the cold stage: 16 training tuples
// and 4 held-out tuples, chosen once as the first candidates whose cold-stage
// outputs already pass the content gate (so success_ratio starts at 1.0).
const std::vector<TrainItem>& rl_train_tuples() {
  static std::vector<TrainItem> items = [] {
    std::vector<TrainItem> v;
    for (int i = 0; i < 16; ++i)
      v.push_back(make_quad(cold_stage().cfg, kFixtureSeed ^ 0x9e9eull, 100 + i, 1.0));
    return v;
  }();
  return items;
}

const std::vector<std::pair<int, TrainItem>>& rl_held_tuples() {
  static std::vector<std::pair<int, TrainItem>> items = [] {
    std::vector<std::pair<int, TrainItem>> v;
    for (int id : {117, 118, 123, 127})
      v.emplace_back(id, make_quad(cold_stage().cfg, kFixtureSeed ^ 0x9e9eull, id, 1.0));
    return v;
  }();
  return items;
}

struct HeldEval {
  double mean_score = 0.0;
  int success_count = 0;
  int local_count = 0;  // tile-level content check at a relaxed threshold
};

constexpr double kLocalTileThreshold = 0.5;

HeldEval eval_held(const VelocityField& field) {
  HeldEval he;
  const int hw = field.cfg.image_size;
  for (const auto& [id, it] : rl_held_tuples()) {
    ConditioningContext ctx{it.source, it.reference, it.prompt};
    auto fn = [&](const Vec& x, double t) { return forward(field, x, ctx, t); };
    ImageTensor out = euler_sample_with(fn, hw, hw, 28,
                                        Rng::derive(kFixtureSeed, {0xeba1ull, static_cast<std::uint64_t>(id)}));
    he.mean_score += expected_score(proxy_score(it.reference, out)) / rl_held_tuples().size();
    he.success_count += success(it.source, out) ? 1 : 0;
    he.local_count += local_check(it.source, out, kLocalTileThreshold) ? 1 : 0;
  }
  return he;
}

// Runs the post-training stage from the frozen cold checkpoint; `anchors`
// empty means online-only groups.
VelocityField run_post_stage(const AnchorPool& anchors, int group_offline) {
  VelocityField field = cold_stage().field;
  attach_adapter(field, 8, 8.0, Stage::post_training, kFixtureSeed ^ 0x77ull);
  NftConfig nft;
  nft.beta = 0.5;
  nft.group_online = 32;
  nft.group_offline = group_offline;
  nft.train_steps_per_round = 4;
  nft.rollout_steps = 6;
  nft.learn_rate = 0.7;
  nft.seed = kFixtureSeed;
  ScorerFn scorer = make_proxy_scorer();
  const auto& train = rl_train_tuples();
  for (int r = 0; r < 30; ++r)
    rl_round(field, nft, train[static_cast<size_t>(r) % train.size()], scorer, anchors,
             static_cast<std::uint64_t>(r));
  return field;
}

struct PostStageFixture {
  HeldEval before;
  HeldEval after;
  double seconds = 0.0;
};

const PostStageFixture& post_stage_online() {
  static PostStageFixture fx = [] {
    PostStageFixture f;
    auto t0 = std::chrono::steady_clock::now();
    f.before = eval_held(cold_stage().field);
    VelocityField tuned = run_post_stage(AnchorPool{}, 0);
    f.after = eval_held(tuned);
    f.seconds = seconds_since(t0);
    return f;
  }();
  return fx;
}

// ---------------------------------------------------------------------------
// In-process scorer stub for the protocol criterion.

struct StubServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;

  explicit StubServer(httplib::Server::Handler handler) {
    server.Post("/score", std::move(handler));
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }

  ~StubServer() {
    server.stop();
    thread.join();
  }

  EndpointConfig endpoint() const {
    EndpointConfig cfg;
    cfg.host = "127.0.0.1";
    cfg.port = port;
    cfg.timeout_ms = 2000;
    return cfg;
  }
};

// ---------------------------------------------------------------------------
// CLI plumbing for the determinism criterion.

std::string cli_path() {
  const char* p = std::getenv("FLOWTINT_CLI");
  REQUIRE_MESSAGE(p != nullptr, "FLOWTINT_CLI must point at the built binary");
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  static int counter = 0;
  fs::path sink = fs::temp_directory_path() / ("flowtint_acc_cli_" + std::to_string(counter++) + ".log");
  std::string cmd = cli_path() + " " + args + " >" + sink.string() + " 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("acceptance 01") {
  auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  bool ok = true;
  for (int trial = 0; trial < 1000 && ok; ++trial) {
    const size_t n = 1 + rng.below(64);
    Vec v_old(n), v_theta(n);
    for (double& v : v_old) v = rng.normal();
    for (double& v : v_theta) v = rng.normal();
    double beta = rng.uniform(0.01, 2.0);
    auto [v_plus, v_minus] = implicit_policies(v_old, v_theta, beta);
    for (size_t i = 0; i < n; ++i)
      if (std::abs(v_plus[i] + v_minus[i] - 2.0 * v_old[i]) > 1e-12) ok = false;
  }
  ok = ok && seconds_since(t0) < 1.0;
  report(1, "implicit positive/negative mixtures average to the old policy", ok);
}

TEST_CASE("acceptance 02") {
  auto t0 = std::chrono::steady_clock::now();
  NetConfig cfg = tiny_config();
  VelocityField f = make_field(cfg, 201);
  attach_adapter(f, 1, 1.0, Stage::cold_start, 202);
  Rng rng(203);
  int trainable = 0;
  for (int id = 0; id < f.adapted_count(); ++id) {
    auto& ad = f.adapted(id).adapters[0];
    for (double& v : ad.B.a) v = 0.3 * rng.normal();
    for (double& v : ad.A.a) v += 0.1 * rng.normal();
    trainable += static_cast<int>(ad.A.a.size() + ad.B.a.size());
  }
  bool ok = trainable <= 500;

  // at field == snapshot the positive and negative policies coincide with the
  // old policy, so the gradient is proportional to (2r - 1)
  PolicySnapshot snapshot = f;
  ConditioningContext ctx = make_ctx(cfg, 204);
  Rng ir = Rng::from(205, {1});
  ScoredSample sample;
  sample.image = procedural_image(cfg.image_size, ir);

  auto grads_for = [&](double r) {
    sample.reward = r;
    NftEval ev = nft_loss_eval(f, snapshot, sample, ctx, 0.4, 206, 0.5, true);
    return project_adapter_grads(f, ev.grads);
  };
  AdapterGrads g1 = grads_for(1.0);
  AdapterGrads g0 = grads_for(0.0);
  AdapterGrads gh = grads_for(0.5);

  double scale = 0.0;
  for (const auto& [dA, dB] : g1.per_linear) {
    for (double v : dA.a) scale = std::max(scale, std::abs(v));
    for (double v : dB.a) scale = std::max(scale, std::abs(v));
  }
  ok = ok && scale > 0.0;
  auto check_all = [&](const AdapterGrads& a, const AdapterGrads& b, double sign, double tol) {
    for (size_t i = 0; i < a.per_linear.size(); ++i) {
      for (size_t j = 0; j < a.per_linear[i].first.a.size(); ++j)
        if (std::abs(a.per_linear[i].first.a[j] - sign * b.per_linear[i].first.a[j]) > tol * scale)
          ok = false;
      for (size_t j = 0; j < a.per_linear[i].second.a.size(); ++j)
        if (std::abs(a.per_linear[i].second.a[j] - sign * b.per_linear[i].second.a[j]) > tol * scale)
          ok = false;
    }
  };
  check_all(g1, g0, -1.0, 1e-6);  // antisymmetric around the neutral reward
  AdapterGrads zero = gh;
  for (auto& [dA, dB] : zero.per_linear) {
    for (double& v : dA.a) v = 0.0;
    for (double& v : dB.a) v = 0.0;
  }
  check_all(gh, zero, 1.0, 1e-9);  // vanishes exactly at r = 1/2
  ok = ok && seconds_since(t0) < 10.0;
  report(2, "gradient antisymmetry at the policy fixed point", ok);
}

TEST_CASE("acceptance 03") {
  auto t0 = std::chrono::steady_clock::now();
  NetConfig cfg = small_config();
  VelocityField f = make_field(cfg, 301);
  attach_adapter(f, 2, 2.0, Stage::cold_start, 302);
  Rng rng(303);
  for (int id = 0; id < f.adapted_count(); ++id) {
    auto& ad = f.adapted(id).adapters[0];
    for (double& v : ad.B.a) v = 0.3 * rng.normal();
    for (double& v : ad.A.a) v += 0.1 * rng.normal();
  }
  ConditioningContext ctx = make_ctx(cfg, 304);
  Vec xt = make_latent(cfg, 305);
  const double t = 0.35;

  // scalar probe loss L = sum_i c_i * out_i, so d_out = c exactly
  Vec c(static_cast<size_t>(cfg.latent_dim()));
  for (double& v : c) v = rng.normal();
  auto loss_of = [&]() {
    Vec out = forward(f, xt, ctx, t);
    double s = 0.0;
    for (size_t i = 0; i < out.size(); ++i) s += c[i] * out[i];
    return s;
  };

  ForwardTrace trace;
  forward_traced(f, xt, ctx, t, trace);
  Grads g = backward(f, trace, c);
  AdapterGrads ag = project_adapter_grads(f, g);

  // enumerate every trainable coordinate, then sample 200 deterministically
  struct Coord {
    int id;
    bool in_A;
    size_t j;
  };
  std::vector<Coord> coords;
  for (int id = 0; id < f.adapted_count(); ++id) {
    const auto& ad = f.adapted(id).adapters[0];
    for (size_t j = 0; j < ad.A.a.size(); ++j) coords.push_back({id, true, j});
    for (size_t j = 0; j < ad.B.a.size(); ++j) coords.push_back({id, false, j});
  }
  Rng shuffle(306);
  for (size_t i = coords.size(); i > 1; --i) std::swap(coords[i - 1], coords[shuffle.below(i)]);
  const size_t sample_n = std::min<size_t>(200, coords.size());

  const double h = 1e-4;
  int ok_count = 0;
  for (size_t s = 0; s < sample_n; ++s) {
    const Coord& cd = coords[s];
    auto& ad = f.adapted(cd.id).adapters[0];
    double& p = cd.in_A ? ad.A.a[cd.j] : ad.B.a[cd.j];
    double analytic = cd.in_A ? ag.per_linear[cd.id].first.a[cd.j] : ag.per_linear[cd.id].second.a[cd.j];
    double keep = p;
    p = keep + h;
    double lp = loss_of();
    p = keep - h;
    double lm = loss_of();
    p = keep;
    double fd = (lp - lm) / (2.0 * h);
    double denom = std::max({std::abs(fd), std::abs(analytic), 1e-6});
    if (std::abs(fd - analytic) / denom < 1e-3) ++ok_count;
  }
  bool ok = sample_n == 200 && ok_count >= 198 && seconds_since(t0) < 30.0;
  report(3, "adapter gradients match finite differences", ok);
}

TEST_CASE("acceptance 04") {
  // independent brute-force implementation, written from the definition
  auto brute = [](const std::vector<double>& raw) {
    const double g = static_cast<double>(raw.size());
    double mu = 0.0;
    for (double r : raw) mu += r;
    mu /= g;
    double var = 0.0;
    for (double r : raw) var += (r - mu) * (r - mu);
    var /= g;
    double sigma = std::sqrt(var);
    std::vector<double> out(raw.size());
    for (size_t i = 0; i < raw.size(); ++i) {
      if (sigma == 0.0) {
        out[i] = 0.5;
      } else {
        double z = std::clamp((raw[i] - mu) / sigma, -1.0, 1.0);
        out[i] = 0.5 * z + 0.5;
      }
    }
    return out;
  };
  auto normalize = [](const std::vector<double>& raw) {
    RolloutGroup grp;
    for (double r : raw) {
      ScoredSample s;
      s.raw_score = r;
      grp.members.push_back(std::move(s));
    }
    normalize_group(grp);
    std::vector<double> out;
    for (const auto& m : grp.members) out.push_back(m.reward);
    return out;
  };

  bool ok = true;
  // hand-computed case: z-scores clip at +-1, the middle member sits at the mean
  std::vector<double> tab = normalize({1.0, 2.0, 3.0});
  ok = ok && std::abs(tab[0] - 0.0) < 1e-12 && std::abs(tab[1] - 0.5) < 1e-12 &&
       std::abs(tab[2] - 1.0) < 1e-12;

  Rng rng(401);
  for (int trial = 0; trial < 100 && ok; ++trial) {
    // dyadic raw scores and power-of-two group sizes keep every intermediate
    // value exactly representable, so the invariance checks can demand
    // bit-exact equality instead of a tolerance
    const size_t g = size_t{2} << rng.below(3);  // 2, 4 or 8
    std::vector<double> raw(g);
    for (double& r : raw) r = 1.0 + static_cast<double>(rng.below(257)) / 64.0;
    if (trial % 10 == 0) raw.assign(g, raw[0]);  // exercise the sigma == 0 branch

    std::vector<double> lib = normalize(raw);
    std::vector<double> ref = brute(raw);
    for (size_t i = 0; i < g; ++i)
      if (std::abs(lib[i] - ref[i]) > 1e-12) ok = false;

    // shift by an integer and scale by a power of two: rewards must not move
    double c = static_cast<double>(rng.below(13)) - 6.0;
    double s = std::ldexp(1.0, static_cast<int>(rng.below(6)) - 2);
    std::vector<double> shifted(g), scaled(g);
    for (size_t i = 0; i < g; ++i) {
      shifted[i] = raw[i] + c;
      scaled[i] = raw[i] * s;
    }
    if (normalize(shifted) != lib) ok = false;
    if (normalize(scaled) != lib) ok = false;
  }
  report(4, "group reward normalization matches brute force and invariances", ok);
}

TEST_CASE("acceptance 05") {
  bool ok = true;
  // tabulated case 1: uniform logits put the expectation at the token mean
  ok = ok && std::abs(expected_score(ScoreDistribution::from_logits({7, 7, 7, 7, 7})) - 3.0) < 1e-12;
  // tabulated case 2: a delta lands on the nearest token
  ok = ok && std::abs(expected_score(ScoreDistribution::delta(4.2)) - 4.0) < 1e-12;
  // tabulated case 3: probs {1/8,1/8,1/8,1/8,1/2} -> 10/8 + 5/2 = 3.75
  ok = ok &&
       std::abs(expected_score(ScoreDistribution::from_logits({0, 0, 0, 0, std::log(4.0)})) - 3.75) < 1e-12;

  // linearity in the probability vector over 100 random mixtures
  Rng rng(501);
  std::vector<double> tokens{1, 2, 3, 4, 5};
  auto random_probs = [&] {
    std::vector<double> p(5);
    double sum = 0.0;
    for (double& v : p) {
      v = rng.uniform() + 1e-3;
      sum += v;
    }
    for (double& v : p) v /= sum;
    return p;
  };
  for (int trial = 0; trial < 100 && ok; ++trial) {
    std::vector<double> p = random_probs(), q = random_probs();
    double lam = rng.uniform();
    ScoreDistribution dp{tokens, {}, p}, dq{tokens, {}, q};
    ScoreDistribution mix{tokens, {}, {}};
    mix.probs.resize(5);
    for (int i = 0; i < 5; ++i) mix.probs[i] = lam * p[i] + (1.0 - lam) * q[i];
    double lhs = expected_score(mix);
    double rhs = lam * expected_score(dp) + (1.0 - lam) * expected_score(dq);
    if (std::abs(lhs - rhs) > 1e-12) ok = false;
  }
  report(5, "expected score matches hand-computed cases and is linear", ok);
}

TEST_CASE("acceptance 06") {
  NetConfig cfg = small_config();
  const int n_img = cfg.tokens_per_image();
  bool ok = true;
  for (int trial = 0; trial < 50 && ok; ++trial) {
    std::uint64_t seed = 600 + static_cast<std::uint64_t>(trial);
    VelocityField f = make_field(cfg, seed);
    ConditioningContext ctx = make_ctx(cfg, seed ^ 0xabcull);
    Vec xt = make_latent(cfg, seed ^ 0xdefull);

    ForwardTrace base;
    forward_traced(f, xt, ctx, 0.4, base);
    const BranchLayout& l = base.layout;

    // (a) perturbing all main-branch inputs must leave both image branches
    // bit-identical in every block
    Vec xt_a = xt;
    for (double& v : xt_a) v += 0.37;
    ConditioningContext ctx_a = ctx;
    ctx_a.prompt[0] = (ctx.prompt[0] + 1) % cfg.vocab;
    ForwardTrace pa;
    forward_traced(f, xt_a, ctx_a, 0.4, pa);
    for (size_t b = 0; b < base.block.size(); ++b)
      for (int row = l.ref_lo; row < l.src_hi; ++row)
        for (int d = 0; d < cfg.hidden; ++d) {
          if (base.block[b].x_attn(row, d) != pa.block[b].x_attn(row, d)) ok = false;
          if (base.block[b].x_out(row, d) != pa.block[b].x_out(row, d)) ok = false;
        }

    // (b) perturbing a later latent token must leave earlier main rows
    // bit-identical
    int j = 1 + trial % (n_img - 1);
    Vec xt_b = xt;
    std::vector<double> delta(cfg.patch_dim(), 1.0);
    unpatch_add(xt_b.data(), cfg, j, delta.data());
    ForwardTrace pb;
    forward_traced(f, xt_b, ctx, 0.4, pb);
    int row_j = l.main_lo + static_cast<int>(ctx.prompt.size()) + j;
    for (size_t b = 0; b < base.block.size(); ++b)
      for (int row = l.main_lo; row < row_j; ++row)
        for (int d = 0; d < cfg.hidden; ++d)
          if (base.block[b].x_out(row, d) != pb.block[b].x_out(row, d)) ok = false;

    // (c) the reference branch must reach the output
    ConditioningContext ctx_c = ctx;
    for (double& v : ctx_c.reference.data) v = std::min(1.0, v + 0.2);
    if (forward(f, xt, ctx_c, 0.4) == base.out) ok = false;
  }
  report(6, "attention mask isolates branches with zero leak", ok);
}

TEST_CASE("acceptance 07") {
  NetConfig cfg = small_config();
  VelocityField f = make_field(cfg, 701);
  attach_adapter(f, 2, 2.0, Stage::cold_start, 702);

  std::vector<TrainItem> items;
  for (int i = 0; i < 6; ++i) items.push_back(make_quad(cfg, 703, i, 1.0));

  bool ok = true;
  std::string base_before = base_checksum(f);
  AdamState opt;
  for (int s = 0; s < 100; ++s) {
    std::vector<TrainItem> batch{items[s % items.size()], items[(s + 1) % items.size()]};
    cold_start_step(f, batch, 0.003, 704, f.step_counter, &opt);
  }
  ok = ok && base_checksum(f) == base_before;
  std::string cold_after_train = adapter_checksum(f, Stage::cold_start);

  set_stage_frozen(f, Stage::cold_start, true);
  attach_adapter(f, 2, 2.0, Stage::post_training, 705);
  std::string post_at_attach = adapter_checksum(f, Stage::post_training);
  NftConfig nft;
  nft.group_online = 2;
  nft.group_offline = 0;
  nft.train_steps_per_round = 1;
  nft.rollout_steps = 2;
  nft.learn_rate = 1e-3;
  nft.seed = 706;
  ScorerFn scorer = make_proxy_scorer();
  for (int r = 0; r < 20; ++r)
    rl_round(f, nft, items[static_cast<size_t>(r) % items.size()], scorer, AnchorPool{},
             static_cast<std::uint64_t>(r));
  ok = ok && base_checksum(f) == base_before;
  ok = ok && adapter_checksum(f, Stage::cold_start) == cold_after_train;
  // sanity: the unfrozen stage did move
  ok = ok && adapter_checksum(f, Stage::post_training) != post_at_attach;
  report(7, "base and frozen-stage weights never change", ok);
}

TEST_CASE("acceptance 08") {
  const ColdStageFixture& fx = cold_stage();
  bool ok = fx.ma_last < 0.5 * fx.ma_first;

  const int hw = fx.cfg.image_size;
  for (size_t i = 0; i < fx.held.size(); ++i) {
    const TrainItem& it = fx.held[i];
    ConditioningContext ctx{it.source, it.reference, it.prompt};
    auto fn = [&](const Vec& x, double t) { return forward(fx.field, x, ctx, t); };
    ImageTensor out = euler_sample_with(fn, hw, hw, 28, Rng::derive(kFixtureSeed, {0xe7a1ull, i}));
    double gain = psnr(out, it.target) - psnr(it.source, it.target);
    if (gain < 5.0) ok = false;
  }
  ok = ok && fx.train_seconds < 900.0;
  report(8, "cold-start stage learns the toy preset-transfer task", ok);
}

TEST_CASE("acceptance 09") {
  const PostStageFixture& fx = post_stage_online();
  bool ok = fx.after.mean_score - fx.before.mean_score >= 0.2;
  ok = ok && fx.before.success_count == 4 && fx.after.success_count == 4;
  ok = ok && fx.seconds < 1200.0;
  report(9, "reward fine-tuning improves held-out scores with content intact", ok);
}

TEST_CASE("acceptance 10") {
  // two suppressive anchors per training context: verbatim reference copies
  // carrying the lowest human score, to penalize reference-copy collapse
  AnchorPool anchors;
  for (const auto& it : rl_train_tuples()) {
    for (int k = 0; k < 2; ++k) {
      OfflineAnchor a;
      a.context_id = it.context_id;
      a.image = it.reference;
      a.human_score = 1.0;
      anchors[it.context_id].push_back(std::move(a));
    }
  }
  VelocityField tuned = run_post_stage(anchors, 2);
  HeldEval anchored = eval_held(tuned);
  report(10, "offline anchors do not hurt local content preservation",
         anchored.local_count >= post_stage_online().after.local_count);
}

TEST_CASE("acceptance 11") {
  const std::string tiny =
      "--hidden 16 --heads 2 --blocks 1 --adapter-rank 4 --learn-rate 0.02 --batch-size 2 --seed 77 ";
  fs::path root = fs::temp_directory_path() / "flowtint_acceptance_e2e";
  fs::remove_all(root);

  auto pipeline = [&](const std::string& run) {
    fs::path d = root / run;
    fs::create_directories(d);
    std::string ds = (d / "ds").string();
    std::string rl = (d / "rl").string();
    bool ok = true;
    ok = ok && run_cli("synth --kind cold-start --n 6 --eval 2 --out " + ds + " --seed 77") == 0;
    ok = ok && run_cli("synth --kind rl --n 6 --eval 2 --out " + rl + " --seed 77") == 0;
    ok = ok && run_cli(tiny + "train --stage cold --data " + ds + "/train_manifest.jsonl --steps 6 --out " +
                       (d / "cold.ckpt").string()) == 0;
    ok = ok && run_cli(tiny +
                       "--g-online 2 --g-offline 0 --t-rollout 2 --steps-per-round 1 "
                       "train --stage rl --rounds 2 --data " +
                       rl + "/train_manifest.jsonl --init " + (d / "cold.ckpt").string() + " --out " +
                       (d / "rl.ckpt").string() + " --log " + (d / "rounds.jsonl").string()) == 0;
    ok = ok && run_cli("--seed 77 eval --steps 2 --ckpt " + (d / "rl.ckpt").string() + " --data " + rl +
                       "/eval_manifest.jsonl --out " + (d / "report.json").string() + " --csv " +
                       (d / "report.csv").string()) == 0;
    return ok;
  };

  bool ok = pipeline("a") && pipeline("b");
  for (const char* rel : {"ds/train_manifest.jsonl", "ds/eval_manifest.jsonl", "ds/imgs/000000_src.png",
                          "rl/train_manifest.jsonl", "cold.ckpt", "rl.ckpt", "rounds.jsonl", "report.json",
                          "report.csv"}) {
    std::string a = slurp(root / "a" / rel), b = slurp(root / "b" / rel);
    if (a.empty() || a != b) ok = false;
  }
  fs::remove_all(root);
  report(11, "full pipeline is byte-deterministic across runs", ok);
}

TEST_CASE("acceptance 12") {
  Rng r1 = Rng::from(1200, {1});
  Rng r2 = Rng::from(1200, {2});
  ImageTensor ref = procedural_image(16, r1);
  ImageTensor pred = procedural_image(16, r2);
  bool ok = true;

  {  // logits mode
    StubServer stub([](const httplib::Request&, httplib::Response& res) {
      res.set_content(nlohmann::json{{"logits", {0.0, 0.0, 0.0, 0.0, std::log(4.0)}}}.dump(),
                      "application/json");
    });
    if (std::abs(expected_score(remote_score(ref, pred, stub.endpoint())) - 3.75) > 1e-12) ok = false;
  }
  {  // judge mode with JSON score + reasoning
    StubServer stub([&](const httplib::Request& req, httplib::Response& res) {
      auto j = nlohmann::json::parse(req.body);
      if (j.at("mode") != "judge") ok = false;
      res.set_content(nlohmann::json{{"score", {4}}, {"reasoning", "close tones"}}.dump(),
                      "application/json");
    });
    EndpointConfig cfg = stub.endpoint();
    cfg.mode = "judge";
    if (std::abs(expected_score(remote_score(ref, pred, cfg)) - 4.0) > 1e-12) ok = false;
  }
  {  // transient failures are retried until success
    std::atomic<int> calls{0};
    StubServer stub([&](const httplib::Request&, httplib::Response& res) {
      if (++calls <= 2) {
        res.status = 503;
        res.set_content("busy", "text/plain");
      } else {
        res.set_content(nlohmann::json{{"score", 5}}.dump(), "application/json");
      }
    });
    EndpointConfig cfg = stub.endpoint();
    cfg.retries = 2;
    RemoteCallReport rep;
    if (std::abs(expected_score(remote_score(ref, pred, cfg, &rep)) - 5.0) > 1e-12) ok = false;
    if (rep.attempts != 3 || calls.load() != 3) ok = false;
  }
  {  // malformed body raises a protocol error that preserves the payload
    StubServer stub([](const httplib::Request&, httplib::Response& res) {
      res.set_content("this is not json", "text/plain");
    });
    bool threw = false;
    try {
      remote_score(ref, pred, stub.endpoint());
    } catch (const ProtocolError& e) {
      threw = e.raw_payload == "this is not json";
    }
    if (!threw) ok = false;
  }
  report(12, "remote scorer client speaks the protocol", ok);
}
