// flowtint: reference-based color preset transfer, desk scale.
// Commands: synth, train, sample, eval, score.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <string>

#include "flowtint/checkpoint.hpp"
#include "flowtint/dataforge.hpp"
#include "flowtint/errors.hpp"
#include "flowtint/eval.hpp"
#include "flowtint/metrics.hpp"
#include "flowtint/net.hpp"
#include "flowtint/remote.hpp"
#include "flowtint/reward.hpp"
#include "flowtint/train.hpp"

namespace flowtint {
namespace {

// ---------------------------------------------------------------------------
// RunConfig: one declarative document covering every tunable. The key table
// below is the single source of truth for JSON parsing, CLI flags, the help
// text, and resolved-config logging.

struct RunConfig {
  std::uint64_t seed = 0;

  int image_size = 16;
  int patch = 4;
  int hidden = 64;
  int heads = 2;
  int blocks = 2;
  int mlp_mult = 2;
  int vocab = 32;
  int max_prompt = 8;

  int adapter_rank = 8;
  double adapter_alpha = 16.0;
  double learn_rate = 1e-2;
  int batch_size = 4;

  double beta = 0.5;
  int g_online = 9;
  int g_offline = 2;
  int t_rollout = 6;
  int steps_per_round = 4;

  std::string reward = "proxy";  // proxy | remote
  std::string endpoint = "127.0.0.1:0/score";
  std::string scorer_mode = "logits";  // logits | judge
  int timeout_ms = 5000;
  int retries = 2;

  int eval_steps = 28;
  double content_threshold = kContentThreshold;

  int resolution = 16;
  double mismatch_ratio = 200.0 / 3200.0;
  double tau_lo = 0.6;
  double tau_hi = 0.95;
  int pool_size = 64;
  int pool_resolution = 32;
};

// Visits every config key once: f(json_key, description, field_reference).
template <class F>
void for_each_key(RunConfig& c, F&& f) {
  f("seed", "master RNG seed for every derived stream", c.seed);
  f("image-size", "working resolution (square)", c.image_size);
  f("patch", "patch edge for tokenization", c.patch);
  f("hidden", "transformer hidden width", c.hidden);
  f("heads", "attention heads", c.heads);
  f("blocks", "transformer blocks", c.blocks);
  f("mlp-mult", "mlp expansion factor", c.mlp_mult);
  f("vocab", "prompt token vocabulary size", c.vocab);
  f("max-prompt", "maximum prompt tokens", c.max_prompt);
  f("adapter-rank", "low-rank adapter rank", c.adapter_rank);
  f("adapter-alpha", "low-rank adapter scaling alpha", c.adapter_alpha);
  f("learn-rate", "gradient-descent step size", c.learn_rate);
  f("batch-size", "cold-start minibatch size", c.batch_size);
  f("beta", "policy mixing coefficient for fine-tuning", c.beta);
  f("g-online", "fresh rollouts per scoring group", c.g_online);
  f("g-offline", "offline anchors per scoring group", c.g_offline);
  f("t-rollout", "denoising steps for training rollouts", c.t_rollout);
  f("steps-per-round", "optimizer steps per fine-tuning round", c.steps_per_round);
  f("reward", "reward backend: proxy | remote", c.reward);
  f("endpoint", "remote scorer endpoint host:port/path", c.endpoint);
  f("scorer-mode", "remote scorer protocol: logits | judge", c.scorer_mode);
  f("timeout-ms", "remote scorer timeout in milliseconds", c.timeout_ms);
  f("retries", "remote scorer retries after the first attempt", c.retries);
  f("eval-steps", "denoising steps for sampling and evaluation", c.eval_steps);
  f("content-threshold", "content-similarity pass threshold", c.content_threshold);
  f("resolution", "dataset crop resolution", c.resolution);
  f("mismatch-ratio", "fraction of references given a content mismatch", c.mismatch_ratio);
  f("tau-lo", "retrieval similarity band lower edge", c.tau_lo);
  f("tau-hi", "retrieval similarity band upper edge", c.tau_hi);
  f("pool-size", "procedural pool image count", c.pool_size);
  f("pool-resolution", "procedural pool image edge", c.pool_resolution);
}

nlohmann::json config_to_json(RunConfig& c) {
  nlohmann::json j;
  for_each_key(c, [&](const char* key, const char*, auto& field) { j[key] = field; });
  return j;
}

void apply_config_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("config file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file " + path + ": expected a JSON object");
  std::set<std::string> known;
  for_each_key(c, [&](const char* key, const char*, auto&) { known.insert(key); });
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("config file " + path + ": unknown key '" + key + "'");
  for_each_key(c, [&](const char* key, const char*, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config file " + path + ": bad value for '" + key + "'");
    }
  });
}

NetConfig net_config(const RunConfig& c) {
  NetConfig n;
  n.image_size = c.image_size;
  n.patch = c.patch;
  n.hidden = c.hidden;
  n.heads = c.heads;
  n.blocks = c.blocks;
  n.mlp_mult = c.mlp_mult;
  n.vocab = c.vocab;
  n.max_prompt = c.max_prompt;
  n.validate();
  return n;
}

NftConfig nft_config(const RunConfig& c) {
  NftConfig n;
  n.beta = c.beta;
  n.group_online = c.g_online;
  n.group_offline = c.g_offline;
  n.train_steps_per_round = c.steps_per_round;
  n.rollout_steps = c.t_rollout;
  n.learn_rate = c.learn_rate;
  n.seed = c.seed;
  n.validate();
  return n;
}

EndpointConfig endpoint_config(const RunConfig& c) {
  EndpointConfig e;
  auto colon = c.endpoint.find(':');
  if (colon == std::string::npos) throw ConfigError("endpoint must look like host:port/path");
  e.host = c.endpoint.substr(0, colon);
  auto slash = c.endpoint.find('/', colon);
  std::string port = c.endpoint.substr(colon + 1, slash == std::string::npos ? std::string::npos
                                                                             : slash - colon - 1);
  try {
    e.port = std::stoi(port);
  } catch (const std::exception&) {
    throw ConfigError("endpoint port is not a number: '" + port + "'");
  }
  if (slash != std::string::npos) e.path = c.endpoint.substr(slash);
  e.timeout_ms = c.timeout_ms;
  e.retries = c.retries;
  e.mode = c.scorer_mode;
  return e;
}

ScorerFn make_scorer(const RunConfig& c) {
  if (c.reward == "proxy") return make_proxy_scorer();
  if (c.reward == "remote") return make_remote_scorer(endpoint_config(c));
  throw ConfigError("reward must be 'proxy' or 'remote', got '" + c.reward + "'");
}

void log_resolved_config(RunConfig& c, const std::string& command) {
  nlohmann::json j = config_to_json(c);
  j["command"] = command;
  std::cerr << "resolved-config " << j.dump() << "\n";
}

// ---------------------------------------------------------------------------
// Commands.

struct SynthArgs {
  std::string kind;
  int n = 32;
  int eval_k = 4;
  std::string pool_dir;
  std::string out_dir;
};

int cmd_synth(RunConfig& cfg, const SynthArgs& a) {
  fs::path out(a.out_dir);
  fs::path pool = a.pool_dir.empty() ? out / "pool" : fs::path(a.pool_dir);
  if (!fs::is_directory(pool) || fs::is_empty(pool)) {
    if (cfg.pool_resolution < cfg.resolution)
      throw ConfigError("pool-resolution must be >= resolution");
    make_pool(pool, cfg.pool_size, cfg.pool_resolution, cfg.seed);
    std::cout << "pool: generated " << cfg.pool_size << " images at " << pool << "\n";
  }

  DatasetManifest m;
  if (a.kind == "cold-start") {
    SynthOptions opt;
    opt.count = a.n;
    opt.mismatch_ratio = cfg.mismatch_ratio;
    opt.resolution = cfg.resolution;
    opt.seed = cfg.seed;
    m = synth_cold_start(pool, out, opt);
  } else if (a.kind == "rl") {
    RetrieveOptions opt;
    opt.count = a.n;
    opt.resolution = cfg.resolution;
    opt.tau_lo = cfg.tau_lo;
    opt.tau_hi = cfg.tau_hi;
    opt.seed = cfg.seed;
    std::vector<std::string> skips;
    opt.skip_log = &skips;
    m = retrieve_pairs(pool, out, opt);
    for (const auto& s : skips) std::cerr << "skip: " << s << "\n";
  } else {
    throw ConfigError("--kind must be 'cold-start' or 'rl', got '" + a.kind + "'");
  }

  auto [train, eval] = split_eval(m, static_cast<size_t>(a.eval_k), cfg.seed);
  save_manifest(train, out / "train_manifest.jsonl");
  save_manifest(eval, out / "eval_manifest.jsonl");
  std::cout << "synth " << a.kind << ": " << train.size() << " train / " << eval.size()
            << " eval records in " << out << "\n";
  return 0;
}

struct TrainArgs {
  std::string stage;
  std::string data;
  std::string out;
  std::string init;
  std::string anchors;
  std::string log;
  int steps = 200;
  int rounds = 30;
};

int cmd_train(RunConfig& cfg, const TrainArgs& a) {
  NetConfig net = net_config(cfg);
  DatasetManifest manifest = load_manifest(a.data);

  if (a.stage == "cold") {
    if (manifest.kind != "paired")
      throw DataError("train --stage cold needs a paired manifest, got '" + manifest.kind + "'");
    VelocityField field = a.init.empty() ? make_field(net, cfg.seed) : load_checkpoint(a.init);
    if (!has_stage(field, Stage::cold_start))
      attach_adapter(field, cfg.adapter_rank, cfg.adapter_alpha, Stage::cold_start, cfg.seed);
    std::vector<TrainItem> items = load_items(manifest, field.cfg);
    if (items.empty()) throw DataError("train: manifest has no records");

    double loss = 0.0;
    AdamState opt;
    for (int s = 0; s < a.steps; ++s) {
      Rng pick = Rng::from(cfg.seed, {0xba7cull, field.step_counter});
      std::vector<TrainItem> batch;
      for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(items[pick.below(items.size())]);
      loss = cold_start_step(field, batch, cfg.learn_rate, cfg.seed, field.step_counter, &opt);
      if (a.steps <= 10 || s % std::max(1, a.steps / 10) == 0 || s + 1 == a.steps)
        std::cout << "step " << field.step_counter << " loss " << loss << "\n";
    }
    save_checkpoint(a.out, field);
    std::cout << "cold checkpoint written to " << a.out << " (final loss " << loss << ")\n";
    return 0;
  }

  if (a.stage == "rl") {
    if (a.init.empty())
      throw ConfigError("train --stage rl requires --init with a cold-start checkpoint");
    if (manifest.kind != "unpaired")
      throw DataError("train --stage rl needs an unpaired manifest, got '" + manifest.kind + "'");
    VelocityField field = load_checkpoint(a.init);
    if (!has_stage(field, Stage::cold_start))
      throw ConfigError("train --stage rl: checkpoint has no cold-start adapter; run --stage cold first");
    if (!has_stage(field, Stage::post_training)) {
      set_stage_frozen(field, Stage::cold_start, true);
      attach_adapter(field, cfg.adapter_rank, cfg.adapter_alpha, Stage::post_training, cfg.seed);
    }
    std::vector<TrainItem> items = load_items(manifest, field.cfg);
    if (items.empty()) throw DataError("train: manifest has no records");
    AnchorPool anchors;
    if (!a.anchors.empty()) anchors = load_anchors(a.anchors);
    ScorerFn scorer = make_scorer(cfg);
    NftConfig nft = nft_config(cfg);

    std::ofstream log_file;
    std::ostream* log = &std::cout;
    if (!a.log.empty()) {
      log_file.open(a.log, std::ios::binary);
      if (!log_file) throw DataError("cannot write training log " + a.log);
      log = &log_file;
    }
    AdamState opt;
    for (int r = 0; r < a.rounds; ++r) {
      const TrainItem& ctx = items[static_cast<size_t>(r) % items.size()];
      rl_round(field, nft, ctx, scorer, anchors, static_cast<std::uint64_t>(r), log, &opt);
    }
    save_checkpoint(a.out, field);
    std::cout << "fine-tuned checkpoint written to " << a.out << "\n";
    return 0;
  }

  throw ConfigError("--stage must be 'cold' or 'rl', got '" + a.stage + "'");
}

struct SampleArgs {
  std::string ckpt;
  std::string source;
  std::string reference;
  std::string out;
  std::string prompt = kDefaultPrompt;
  int steps = 0;  // 0: use eval-steps from config
};

int cmd_sample(RunConfig& cfg, const SampleArgs& a) {
  VelocityField field = load_checkpoint(a.ckpt);
  ImageTensor src = center_crop(read_png(a.source), field.cfg.image_size);
  ImageTensor ref = center_crop(read_png(a.reference), field.cfg.image_size);
  ConditioningContext ctx{src, ref, tokenize_prompt(a.prompt, field.cfg)};
  auto fn = [&](const Vec& x, double t) { return forward(field, x, ctx, t); };
  int steps = a.steps > 0 ? a.steps : cfg.eval_steps;
  std::uint64_t stream = Rng::derive(cfg.seed, {0x5a3ull});
  ImageTensor out = euler_sample_with(fn, field.cfg.image_size, field.cfg.image_size, steps, stream);
  write_png(a.out, out);
  std::cout << "sample written to " << a.out << " (" << steps << " steps)\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string csv;
  int steps = 0;
};

int cmd_eval(RunConfig& cfg, const EvalArgs& a) {
  VelocityField field = load_checkpoint(a.ckpt);
  DatasetManifest manifest = load_manifest(a.data);
  EvalOptions opt;
  opt.steps = a.steps > 0 ? a.steps : cfg.eval_steps;
  opt.content_threshold = cfg.content_threshold;
  opt.seed = cfg.seed;
  EvalReport rep = evaluate(manifest, field, make_scorer(cfg), opt);
  write_report_json(rep, a.out);
  if (!a.csv.empty()) write_report_csv(rep, a.csv);

  std::cout << "rows " << rep.rows.size();
  if (rep.paired_rows > 0)
    std::cout << "  mean_psnr " << rep.mean_psnr << "  mean_ssim " << rep.mean_ssim;
  std::cout << "  mean_score " << rep.mean_score << "  success_ratio " << rep.success_ratio
            << "  local_ratio " << rep.local_ratio << "\n";
  std::cout << "report written to " << a.out << "\n";
  return 0;
}

struct ScoreArgs {
  std::string reference;
  std::string prediction;
};

int cmd_score(RunConfig& cfg, const ScoreArgs& a) {
  ImageTensor ref = read_png(a.reference);
  ImageTensor pred = read_png(a.prediction);
  double s = expected_score(make_scorer(cfg)(ref, pred));
  std::cout << "expected_score " << s << "\n";
  return 0;
}

std::string config_key_help(RunConfig& c) {
  std::string out = "Config keys (JSON file via --config; same names as flags):\n";
  for_each_key(c, [&](const char* key, const char* desc, auto&) {
    out += "  ";
    out += key;
    out += ": ";
    out += desc;
    out += "\n";
  });
  return out;
}

int run(int argc, char** argv) {
  RunConfig cfg;

  // phase 1: apply --config before flags, so flags > file > defaults
  for (int i = 1; i < argc - 1; ++i)
    if (std::string(argv[i]) == "--config") apply_config_file(cfg, argv[i + 1]);

  CLI::App app{"flowtint: reference-based color preset transfer pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file (flags override file values)");
  for_each_key(cfg, [&](const char* key, const char* desc, auto& field) {
    app.add_option(std::string("--") + key, field, desc);
  });
  app.footer(config_key_help(cfg));

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate dataset manifests");
  synth->fallthrough();
  synth->add_option("--kind", sa.kind, "cold-start | rl")->required();
  synth->add_option("--n", sa.n, "records to synthesize");
  synth->add_option("--eval", sa.eval_k, "records held out for evaluation");
  synth->add_option("--pool", sa.pool_dir, "image pool directory (generated when missing)");
  synth->add_option("--out", sa.out_dir, "output dataset directory")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "run a training stage");
  train->fallthrough();
  train->add_option("--stage", ta.stage, "cold | rl")->required();
  train->add_option("--data", ta.data, "manifest path")->required();
  train->add_option("--out", ta.out, "checkpoint output path")->required();
  train->add_option("--init", ta.init, "checkpoint to start from (required for rl)");
  train->add_option("--steps", ta.steps, "cold-start optimizer steps");
  train->add_option("--rounds", ta.rounds, "fine-tuning rounds");
  train->add_option("--anchors", ta.anchors, "offline anchor store (line-delimited JSON)");
  train->add_option("--log", ta.log, "round log path (default: stdout)");

  SampleArgs pa;
  auto* sample = app.add_subcommand("sample", "run the sampler on one pair");
  sample->fallthrough();
  sample->add_option("--ckpt", pa.ckpt, "checkpoint path")->required();
  sample->add_option("--source", pa.source, "source image (PNG)")->required();
  sample->add_option("--reference", pa.reference, "reference image (PNG)")->required();
  sample->add_option("--out", pa.out, "output image path")->required();
  sample->add_option("--prompt", pa.prompt, "task prompt");
  sample->add_option("--steps", pa.steps, "denoising steps (default: eval-steps)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  eval->fallthrough();
  eval->add_option("--ckpt", ea.ckpt, "checkpoint path")->required();
  eval->add_option("--data", ea.data, "manifest path")->required();
  eval->add_option("--out", ea.out, "JSON report path")->required();
  eval->add_option("--csv", ea.csv, "optional per-row CSV path");
  eval->add_option("--steps", ea.steps, "denoising steps (default: eval-steps)");

  ScoreArgs ca;
  auto* score = app.add_subcommand("score", "score one reference/prediction pair");
  score->fallthrough();
  score->add_option("--reference", ca.reference, "reference image (PNG)")->required();
  score->add_option("--prediction", ca.prediction, "prediction image (PNG)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (const char* env = std::getenv("FLOWTINT_SEED")) {
    try {
      cfg.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("FLOWTINT_SEED is not a number: '") + env + "'");
    }
  }

  if (synth->parsed()) {
    log_resolved_config(cfg, "synth");
    return cmd_synth(cfg, sa);
  }
  if (train->parsed()) {
    log_resolved_config(cfg, "train");
    return cmd_train(cfg, ta);
  }
  if (sample->parsed()) {
    log_resolved_config(cfg, "sample");
    return cmd_sample(cfg, pa);
  }
  if (eval->parsed()) {
    log_resolved_config(cfg, "eval");
    return cmd_eval(cfg, ea);
  }
  if (score->parsed()) {
    log_resolved_config(cfg, "score");
    return cmd_score(cfg, ca);
  }
  return 2;
}

}  // namespace
}  // namespace flowtint

int main(int argc, char** argv) {
  try {
    return flowtint::run(argc, argv);
  } catch (const flowtint::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
