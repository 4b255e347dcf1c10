#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowtint/errors.hpp"
#include "flowtint/image.hpp"
#include "flowtint/preset.hpp"
#include "flowtint/rng.hpp"

namespace flowtint {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kManifestSchema = "flowtint-manifest-v1";
constexpr const char* kDefaultPrompt = "transfer the color preset of the reference image to the source image";

struct QuadrupletRecord {
  std::string source_path;
  std::string reference_path;
  std::string target_path;
  std::string prompt;
  std::string preset_id;
  Preset preset;
  bool augmented = false;

  bool operator==(const QuadrupletRecord&) const = default;
};

struct UnpairedRecord {
  std::string source_path;
  std::string reference_path;
  std::string prompt;
  double retrieval_similarity = 0.0;

  bool operator==(const UnpairedRecord&) const = default;
};

// Line-delimited manifest; all image paths are relative to `dir` so dataset
// folders stay relocatable.
struct DatasetManifest {
  std::string kind;  // "paired" | "unpaired"
  std::vector<QuadrupletRecord> paired;
  std::vector<UnpairedRecord> unpaired;
  fs::path dir;

  size_t size() const { return kind == "paired" ? paired.size() : unpaired.size(); }

  bool operator==(const DatasetManifest& o) const {
    return kind == o.kind && paired == o.paired && unpaired == o.unpaired;
  }
};

inline json preset_to_json(const Preset& p) {
  return json{{"lift", p.lift}, {"gain", p.gain}, {"gamma", p.gamma},
              {"saturation", p.saturation}, {"hue_deg", p.hue_deg}};
}

inline Preset preset_from_json(const json& j) {
  Preset p;
  for (int c = 0; c < 3; ++c) {
    p.lift[c] = j.at("lift")[c];
    p.gain[c] = j.at("gain")[c];
    p.gamma[c] = j.at("gamma")[c];
  }
  p.saturation = j.at("saturation");
  p.hue_deg = j.at("hue_deg");
  return p;
}

inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << json{{"schema", kManifestSchema}, {"kind", m.kind}}.dump() << "\n";
  if (m.kind == "paired") {
    for (const auto& r : m.paired) {
      out << json{{"source", r.source_path}, {"reference", r.reference_path}, {"target", r.target_path},
                  {"prompt", r.prompt},      {"preset_id", r.preset_id},      {"preset", preset_to_json(r.preset)},
                  {"augmented", r.augmented}}
                 .dump()
          << "\n";
    }
  } else {
    for (const auto& r : m.unpaired) {
      out << json{{"source", r.source_path}, {"reference", r.reference_path}, {"prompt", r.prompt},
                  {"similarity", r.retrieval_similarity}}
                 .dump()
          << "\n";
    }
  }
}

inline DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read manifest " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty manifest " + path.string());
  json header = json::parse(line);
  if (header.value("schema", "") != kManifestSchema)
    throw DataError("manifest " + path.string() + ": unknown schema");
  DatasetManifest m;
  m.kind = header.at("kind");
  m.dir = path.parent_path();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (m.kind == "paired") {
      QuadrupletRecord r;
      r.source_path = j.at("source");
      r.reference_path = j.at("reference");
      r.target_path = j.at("target");
      r.prompt = j.at("prompt");
      r.preset_id = j.at("preset_id");
      r.preset = preset_from_json(j.at("preset"));
      r.augmented = j.at("augmented");
      m.paired.push_back(std::move(r));
    } else {
      UnpairedRecord r;
      r.source_path = j.at("source");
      r.reference_path = j.at("reference");
      r.prompt = j.at("prompt");
      r.retrieval_similarity = j.at("similarity");
      m.unpaired.push_back(std::move(r));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Toy retrieval embedding: 16 histogram bins per channel plus a 4x4 averaged
// luma grid, L2-normalized. Dimension 64.

struct ToyEmbedding {
  static constexpr int kDim = 64;
  std::array<double, kDim> v{};

  double dot(const ToyEmbedding& o) const {
    double s = 0.0;
    for (int i = 0; i < kDim; ++i) s += v[i] * o.v[i];
    return s;
  }
};

inline std::array<double, 16> luma_grid4(const ImageTensor& img) {
  std::array<double, 16> grid{};
  std::array<int, 16> counts{};
  for (int y = 0; y < img.h; ++y) {
    int gy = std::min(3, y * 4 / img.h);
    for (int x = 0; x < img.w; ++x) {
      int gx = std::min(3, x * 4 / img.w);
      grid[gy * 4 + gx] += luma_at(img, y, x);
      counts[gy * 4 + gx] += 1;
    }
  }
  for (int i = 0; i < 16; ++i)
    if (counts[i] > 0) grid[i] /= counts[i];
  return grid;
}

inline ToyEmbedding embed(const ImageTensor& img) {
  ToyEmbedding e;
  const double n_px = static_cast<double>(img.h) * img.w;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) {
        int bin = std::min(15, static_cast<int>(img.at(y, x, c) * 16.0));
        e.v[c * 16 + bin] += 1.0 / n_px;
      }
  auto grid = luma_grid4(img);
  for (int i = 0; i < 16; ++i) e.v[48 + i] = grid[i];
  double norm = std::sqrt(e.dot(e));
  if (norm > 0.0)
    for (double& x : e.v) x /= norm;
  return e;
}

// ---------------------------------------------------------------------------
// Procedural pool images: corner-gradient fields with smooth random blobs,
// so the repo needs no external downloads.

inline ImageTensor procedural_image(int size, Rng& rng) {
  ImageTensor img(size, size);
  double corner[4][3];
  for (auto& c : corner)
    for (double& v : c) v = rng.uniform();
  for (int y = 0; y < size; ++y) {
    double fy = size > 1 ? static_cast<double>(y) / (size - 1) : 0.0;
    for (int x = 0; x < size; ++x) {
      double fx = size > 1 ? static_cast<double>(x) / (size - 1) : 0.0;
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = (1 - fy) * ((1 - fx) * corner[0][c] + fx * corner[1][c]) +
                          fy * ((1 - fx) * corner[2][c] + fx * corner[3][c]);
    }
  }
  int blobs = 2 + static_cast<int>(rng.below(4));
  for (int b = 0; b < blobs; ++b) {
    double cx = rng.uniform() * size, cy = rng.uniform() * size;
    double rad = rng.uniform(0.1, 0.35) * size;
    double col[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double d2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (rad * rad);
        double w = std::exp(-d2);
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = (1 - w) * img.at(y, x, c) + w * col[c];
      }
  }
  img.clamp01();
  return img;
}

inline std::vector<fs::path> make_pool(const fs::path& dir, int count, int size, std::uint64_t seed) {
  fs::create_directories(dir);
  std::vector<fs::path> paths;
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::from(seed, {0x9001ull, static_cast<std::uint64_t>(i)});
    char name[32];
    std::snprintf(name, sizeof(name), "pool_%05d.png", i);
    fs::path p = dir / name;
    write_png(p.string(), procedural_image(size, rng));
    paths.push_back(p);
  }
  return paths;
}

inline std::vector<fs::path> list_pool(const fs::path& dir) {
  std::vector<fs::path> paths;
  if (!fs::is_directory(dir)) throw DataError("pool directory not found: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".png") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw DataError("pool directory has no PNG images: " + dir.string());
  return paths;
}

inline ImageTensor center_crop(const ImageTensor& img, int size) {
  if (img.h < size || img.w < size)
    throw DataError("image smaller than crop size " + std::to_string(size));
  if (img.h == size && img.w == size) return img;
  int oy = (img.h - size) / 2, ox = (img.w - size) / 2;
  ImageTensor out(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(oy + y, ox + x, c);
  return out;
}

inline ImageTensor random_crop(const ImageTensor& img, int size, Rng& rng) {
  if (img.h < size || img.w < size)
    throw DataError("random_crop: crop size " + std::to_string(size) + " exceeds image " +
                    std::to_string(img.h) + "x" + std::to_string(img.w));
  int oy = static_cast<int>(rng.below(img.h - size + 1));
  int ox = static_cast<int>(rng.below(img.w - size + 1));
  ImageTensor out(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(oy + y, ox + x, c);
  return out;
}

// Re-quantize through the 8-bit on-disk representation so manifest invariants
// remain verifiable from files.
inline ImageTensor quantize_roundtrip(const ImageTensor& img) {
  ImageTensor out(img.h, img.w);
  for (size_t i = 0; i < img.data.size(); ++i) out.data[i] = quantize8(img.data[i]) / 255.0;
  return out;
}

// Toy analogue of instruction-guided content augmentation: drop a solid shape
// covering 5-15% of the area into the reference.
inline void insert_random_shape(ImageTensor& img, Rng& rng) {
  double frac = rng.uniform(0.05, 0.15);
  bool disc = rng.below(2) == 0;
  double col[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
  if (disc) {
    double rad = std::sqrt(frac * img.h * img.w / std::numbers::pi);
    double cx = rng.uniform() * img.w, cy = rng.uniform() * img.h;
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= rad * rad)
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = col[c];
  } else {
    int area = std::max(1, static_cast<int>(frac * img.h * img.w));
    int rw = std::max(1, std::min(img.w, static_cast<int>(std::sqrt(static_cast<double>(area)))));
    int rh = std::max(1, std::min(img.h, area / rw));
    int oy = static_cast<int>(rng.below(std::max(1, img.h - rh + 1)));
    int ox = static_cast<int>(rng.below(std::max(1, img.w - rw + 1)));
    for (int y = oy; y < std::min(img.h, oy + rh); ++y)
      for (int x = ox; x < std::min(img.w, ox + rw); ++x)
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = col[c];
  }
}

struct SynthOptions {
  int count = 3200;
  double mismatch_ratio = 200.0 / 3200.0;
  int resolution = 16;
  std::string prompt = kDefaultPrompt;
  std::uint64_t seed = 0;
};

// Cold-start quadruplets: two distinct crops of one pool image stand in for
// two frames of a video; the same random preset grades both.
inline DatasetManifest synth_cold_start(const fs::path& pool_dir, const fs::path& out_dir,
                                        const SynthOptions& opt) {
  if (opt.count < 1) throw DataError("synth_cold_start: count must be >= 1");
  auto pool = list_pool(pool_dir);
  fs::create_directories(out_dir / "imgs");
  DatasetManifest m;
  m.kind = "paired";
  m.dir = out_dir;
  for (int i = 0; i < opt.count; ++i) {
    Rng rng = Rng::from(opt.seed, {0xc01dull, static_cast<std::uint64_t>(i)});
    const ImageTensor base = read_png(pool[rng.below(pool.size())].string());
    ImageTensor crop1 = quantize_roundtrip(random_crop(base, opt.resolution, rng));
    ImageTensor crop2 = quantize_roundtrip(random_crop(base, opt.resolution, rng));
    Preset preset = random_preset(rng);
    ImageTensor target = apply_preset(crop1, preset);
    ImageTensor reference = apply_preset(crop2, preset);
    bool augmented = rng.uniform() < opt.mismatch_ratio;
    if (augmented) insert_random_shape(reference, rng);

    char stem[32];
    std::snprintf(stem, sizeof(stem), "%06d", i);
    QuadrupletRecord r;
    r.source_path = std::string("imgs/") + stem + "_src.png";
    r.reference_path = std::string("imgs/") + stem + "_ref.png";
    r.target_path = std::string("imgs/") + stem + "_tgt.png";
    r.prompt = opt.prompt;
    r.preset_id = std::string("preset_") + stem;
    r.preset = preset;
    r.augmented = augmented;
    write_png((out_dir / r.source_path).string(), crop1);
    write_png((out_dir / r.reference_path).string(), reference);
    write_png((out_dir / r.target_path).string(), target);
    m.paired.push_back(std::move(r));
  }
  return m;
}

struct RetrieveOptions {
  int count = 1500;
  int resolution = 16;
  double tau_lo = 0.6;
  double tau_hi = 0.95;
  std::string prompt = kDefaultPrompt;
  std::uint64_t seed = 0;
  std::vector<std::string>* skip_log = nullptr;
};

// Unpaired tuples for the RL stage: nearest pool neighbor by embedding cosine
// inside the related-but-distinct similarity band.
inline DatasetManifest retrieve_pairs(const fs::path& pool_dir, const fs::path& out_dir,
                                      const RetrieveOptions& opt) {
  auto pool = list_pool(pool_dir);
  if (pool.size() < 2) throw DataError("retrieve_pairs: pool must hold at least 2 images");
  fs::create_directories(out_dir / "imgs");

  std::vector<ImageTensor> crops;
  std::vector<ToyEmbedding> embs;
  crops.reserve(pool.size());
  for (const auto& p : pool) {
    crops.push_back(center_crop(read_png(p.string()), opt.resolution));
    embs.push_back(embed(crops.back()));
  }

  DatasetManifest m;
  m.kind = "unpaired";
  m.dir = out_dir;
  for (int i = 0; i < opt.count; ++i) {
    Rng rng = Rng::from(opt.seed, {0x5e7ull, static_cast<std::uint64_t>(i)});
    size_t ref_idx = rng.below(pool.size());
    int best = -1;
    double best_sim = -2.0;
    for (size_t j = 0; j < pool.size(); ++j) {
      if (j == ref_idx) continue;
      double sim = embs[ref_idx].dot(embs[j]);
      if (sim >= opt.tau_lo && sim <= opt.tau_hi && sim > best_sim) {
        best_sim = sim;
        best = static_cast<int>(j);
      }
    }
    if (best < 0) {
      if (opt.skip_log)
        opt.skip_log->push_back("record " + std::to_string(i) + ": no neighbor of " +
                                pool[ref_idx].filename().string() + " inside similarity band");
      continue;
    }
    char stem[32];
    std::snprintf(stem, sizeof(stem), "%06d", i);
    UnpairedRecord r;
    r.source_path = std::string("imgs/") + stem + "_src.png";
    r.reference_path = std::string("imgs/") + stem + "_ref.png";
    r.prompt = opt.prompt;
    r.retrieval_similarity = best_sim;
    write_png((out_dir / r.source_path).string(), crops[best]);
    write_png((out_dir / r.reference_path).string(), crops[ref_idx]);
    m.unpaired.push_back(std::move(r));
  }
  if (m.unpaired.empty()) throw DataError("retrieve_pairs: every record was skipped (empty manifest)");
  return m;
}

inline std::pair<DatasetManifest, DatasetManifest> split_eval(const DatasetManifest& m, size_t k,
                                                              std::uint64_t seed) {
  if (k >= m.size()) throw DataError("split_eval: k must be smaller than the manifest size");
  std::vector<size_t> idx(m.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng = Rng::from(seed, {0x5b11ull});
  for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);

  DatasetManifest train, eval;
  train.kind = eval.kind = m.kind;
  train.dir = eval.dir = m.dir;
  std::vector<bool> in_eval(m.size(), false);
  for (size_t i = 0; i < k; ++i) in_eval[idx[i]] = true;
  for (size_t i = 0; i < m.size(); ++i) {
    if (m.kind == "paired")
      (in_eval[i] ? eval.paired : train.paired).push_back(m.paired[i]);
    else
      (in_eval[i] ? eval.unpaired : train.unpaired).push_back(m.unpaired[i]);
  }
  return {train, eval};
}

}  // namespace flowtint
