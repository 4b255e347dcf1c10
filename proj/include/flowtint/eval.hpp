#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowtint/dataforge.hpp"
#include "flowtint/metrics.hpp"
#include "flowtint/net.hpp"
#include "flowtint/reward.hpp"
#include "flowtint/train.hpp"

namespace flowtint {

constexpr const char* kReportSchema = "flowtint-report-v1";

struct EvalRow {
  std::string id;
  std::optional<double> psnr;
  std::optional<double> ssim;
  double expected_score = 0.0;
  bool success = false;
  bool local_ok = false;
  std::string skip_reason;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  double mean_score = 0.0;
  double success_ratio = 0.0;
  double local_ratio = 0.0;
  int paired_rows = 0;
};

struct EvalOptions {
  int steps = 28;
  double content_threshold = kContentThreshold;
  std::uint64_t seed = 0;
};

inline void aggregate(EvalReport& rep) {
  if (rep.rows.empty()) return;
  double sp = 0.0, ss = 0.0, sc = 0.0;
  int np = 0, succ = 0, loc = 0;
  for (const auto& r : rep.rows) {
    if (r.psnr && r.ssim) {
      sp += *r.psnr;
      ss += *r.ssim;
      ++np;
    }
    sc += r.expected_score;
    succ += r.success ? 1 : 0;
    loc += r.local_ok ? 1 : 0;
  }
  rep.paired_rows = np;
  rep.mean_psnr = np ? sp / np : 0.0;
  rep.mean_ssim = np ? ss / np : 0.0;
  rep.mean_score = sc / static_cast<double>(rep.rows.size());
  rep.success_ratio = succ / static_cast<double>(rep.rows.size());
  rep.local_ratio = loc / static_cast<double>(rep.rows.size());
}

inline EvalReport evaluate(const DatasetManifest& manifest, const VelocityField& field,
                           const ScorerFn& scorer, const EvalOptions& opt = {}) {
  EvalReport rep;
  const bool paired = manifest.kind == "paired";
  const int hw = field.cfg.image_size;
  const size_t count = manifest.size();
  for (size_t i = 0; i < count; ++i) {
    EvalRow row;
    ImageTensor src, ref, tgt;
    std::string prompt;
    if (paired) {
      const auto& r = manifest.paired[i];
      row.id = r.source_path;
      src = read_png((manifest.dir / r.source_path).string());
      ref = read_png((manifest.dir / r.reference_path).string());
      prompt = r.prompt;
      try {
        tgt = read_png((manifest.dir / r.target_path).string());
      } catch (const Error& e) {
        row.skip_reason = std::string("target unavailable: ") + e.what();
      }
    } else {
      const auto& r = manifest.unpaired[i];
      row.id = r.source_path;
      src = read_png((manifest.dir / r.source_path).string());
      ref = read_png((manifest.dir / r.reference_path).string());
      prompt = r.prompt;
    }
    ConditioningContext ctx{src, ref, tokenize_prompt(prompt, field.cfg)};
    auto fn = [&](const Vec& x, double t) { return forward(field, x, ctx, t); };
    std::uint64_t stream = Rng::derive(opt.seed, {0xe7a1ull, i});
    ImageTensor out = euler_sample_with(fn, hw, hw, opt.steps, stream);

    if (paired && row.skip_reason.empty()) {
      row.psnr = psnr(out, tgt);
      row.ssim = ssim(out, tgt);
    }
    row.expected_score = expected_score(scorer(ref, out));
    row.success = success(src, out, opt.content_threshold);
    row.local_ok = local_check(src, out, opt.content_threshold);
    rep.rows.push_back(std::move(row));
  }
  aggregate(rep);
  return rep;
}

inline void write_report_json(const EvalReport& rep, const std::filesystem::path& path) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : rep.rows) {
    nlohmann::json j{{"id", r.id},
                     {"expected_score", r.expected_score},
                     {"success", r.success},
                     {"local_ok", r.local_ok}};
    if (r.psnr) j["psnr"] = *r.psnr;
    if (r.ssim) j["ssim"] = *r.ssim;
    if (!r.skip_reason.empty()) j["skip_reason"] = r.skip_reason;
    rows.push_back(std::move(j));
  }
  nlohmann::json agg{{"mean_score", rep.mean_score},
                     {"success_ratio", rep.success_ratio},
                     {"local_ratio", rep.local_ratio}};
  if (rep.paired_rows > 0) {
    agg["mean_psnr"] = rep.mean_psnr;
    agg["mean_ssim"] = rep.mean_ssim;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write report " + path.string());
  out << nlohmann::json{{"schema", kReportSchema}, {"rows", rows}, {"aggregate", agg}}.dump(2) << "\n";
}

inline void write_report_csv(const EvalReport& rep, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write plot data " + path.string());
  bool paired = rep.paired_rows > 0;
  out << (paired ? "id,psnr,ssim,expected_score,success,local_ok\n"
                 : "id,expected_score,success,local_ok\n");
  for (const auto& r : rep.rows) {
    out << r.id << ",";
    if (paired) out << (r.psnr ? std::to_string(*r.psnr) : "") << "," << (r.ssim ? std::to_string(*r.ssim) : "") << ",";
    out << r.expected_score << "," << (r.success ? 1 : 0) << "," << (r.local_ok ? 1 : 0) << "\n";
  }
}

}  // namespace flowtint
