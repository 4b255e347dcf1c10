#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "flowtint/dataforge.hpp"

using namespace flowtint;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("flowtint_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("identity preset is bit-exact") {
  Rng rng(1);
  ImageTensor img = procedural_image(16, rng);
  Preset id;
  CHECK(apply_preset(img, id).data == img.data);
}

TEST_CASE("gamma-only preset squares a constant image") {
  ImageTensor img(4, 4, 0.25);
  Preset p;
  p.gamma = {2.0, 2.0, 2.0};
  ImageTensor out = apply_preset(img, p);
  for (double v : out.data) CHECK(v == doctest::Approx(0.0625).epsilon(1e-12));
}

TEST_CASE("zero saturation collapses to grayscale") {
  Rng rng(2);
  ImageTensor img = procedural_image(16, rng);
  Preset p;
  p.saturation = 0.0;
  ImageTensor out = apply_preset(img, p);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      CHECK(out.at(y, x, 0) == doctest::Approx(out.at(y, x, 1)).epsilon(1e-12));
      CHECK(out.at(y, x, 1) == doctest::Approx(out.at(y, x, 2)).epsilon(1e-12));
    }
}

TEST_CASE("preset validation") {
  Preset p;
  p.gain = {0.0, 1.0, 1.0};
  CHECK_THROWS_AS(apply_preset(ImageTensor(2, 2), p), DataError);
  Preset q;
  q.hue_deg = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(apply_preset(ImageTensor(2, 2), q), DataError);
}

TEST_CASE("preset outputs stay in range") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    ImageTensor img = procedural_image(16, rng);
    Preset p = random_preset(rng);
    ImageTensor out = apply_preset(img, p);
    for (double v : out.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("embed is unit norm and separates brightness") {
  Rng rng(4);
  ImageTensor img = procedural_image(16, rng);
  auto e = embed(img);
  CHECK(e.dot(e) == doctest::Approx(1.0).epsilon(1e-12));

  ImageTensor dark(16, 16, 0.2), bright(16, 16, 0.8);
  CHECK(embed(dark).dot(embed(bright)) < 1.0 - 1e-6);
}

TEST_CASE("embedding is flip-invariant for a horizontally symmetric image") {
  // constant-in-x rows: flipping horizontally changes nothing the embedding sees
  ImageTensor img(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = (y / 4) * 0.2 + c * 0.05;
  ImageTensor flipped(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) flipped.at(y, x, c) = img.at(y, 15 - x, c);
  CHECK(embed(img).v == embed(flipped).v);
}

TEST_CASE("synth_cold_start invariants hold when re-verified from disk") {
  auto pool_dir = temp_dir("pool_a");
  auto out_dir = temp_dir("synth_a");
  make_pool(pool_dir, 6, 32, 77);
  SynthOptions opt;
  opt.count = 12;
  opt.seed = 5;
  DatasetManifest m = synth_cold_start(pool_dir, out_dir, opt);
  save_manifest(m, out_dir / "manifest.jsonl");
  DatasetManifest loaded = load_manifest(out_dir / "manifest.jsonl");
  CHECK(loaded == m);
  for (const auto& r : loaded.paired) {
    ImageTensor src = read_png((out_dir / r.source_path).string());
    ImageTensor tgt = read_png((out_dir / r.target_path).string());
    if (r.augmented) continue;  // augmentation only touches the reference
    ImageTensor recomputed = quantize_roundtrip(apply_preset(src, r.preset));
    CHECK(recomputed.data == tgt.data);
  }
}

TEST_CASE("synth determinism") {
  auto pool_dir = temp_dir("pool_b");
  make_pool(pool_dir, 4, 32, 1);
  SynthOptions opt;
  opt.count = 6;
  opt.seed = 9;
  auto m1 = synth_cold_start(pool_dir, temp_dir("synth_b1"), opt);
  auto m2 = synth_cold_start(pool_dir, temp_dir("synth_b2"), opt);
  REQUIRE(m1.paired.size() == m2.paired.size());
  for (size_t i = 0; i < m1.paired.size(); ++i) {
    CHECK(m1.paired[i].preset == m2.paired[i].preset);
    CHECK(m1.paired[i].augmented == m2.paired[i].augmented);
  }
}

TEST_CASE("retrieve_pairs respects the similarity band and never self-pairs") {
  auto pool_dir = temp_dir("pool_c");
  auto out_dir = temp_dir("rl_c");
  make_pool(pool_dir, 12, 32, 3);
  RetrieveOptions opt;
  opt.count = 20;
  opt.tau_lo = 0.2;
  opt.tau_hi = 0.999;
  opt.seed = 4;
  DatasetManifest m = retrieve_pairs(pool_dir, out_dir, opt);
  CHECK(!m.unpaired.empty());
  for (const auto& r : m.unpaired) {
    CHECK(r.retrieval_similarity >= opt.tau_lo);
    CHECK(r.retrieval_similarity <= opt.tau_hi);
    CHECK(r.source_path != r.reference_path);
    ImageTensor s = read_png((out_dir / r.source_path).string());
    ImageTensor ref = read_png((out_dir / r.reference_path).string());
    CHECK(s.data != ref.data);
  }
}

TEST_CASE("a pool of exact duplicates yields no records below tau_hi < 1") {
  auto pool_dir = temp_dir("pool_d");
  Rng rng(8);
  ImageTensor img = procedural_image(32, rng);
  for (int i = 0; i < 4; ++i) write_png((pool_dir / ("dup" + std::to_string(i) + ".png")).string(), img);
  RetrieveOptions opt;
  opt.count = 5;
  opt.tau_hi = 0.999999;
  std::vector<std::string> skips;
  opt.skip_log = &skips;
  CHECK_THROWS_AS(retrieve_pairs(pool_dir, temp_dir("rl_d"), opt), DataError);
  CHECK(skips.size() == 5);
}

TEST_CASE("split_eval partitions deterministically") {
  DatasetManifest m;
  m.kind = "unpaired";
  for (int i = 0; i < 20; ++i) {
    UnpairedRecord r;
    r.source_path = "s" + std::to_string(i);
    r.reference_path = "r" + std::to_string(i);
    r.prompt = "p";
    m.unpaired.push_back(r);
  }
  auto [train, eval] = split_eval(m, 5, 42);
  CHECK(train.size() == 15);
  CHECK(eval.size() == 5);
  std::set<std::string> seen;
  for (const auto& r : train.unpaired) seen.insert(r.source_path);
  for (const auto& r : eval.unpaired) CHECK(seen.insert(r.source_path).second);
  CHECK(seen.size() == 20);

  auto [train2, eval2] = split_eval(m, 5, 42);
  CHECK(train == train2);
  CHECK(eval == eval2);
  CHECK_THROWS_AS(split_eval(m, 20, 1), DataError);
}

TEST_CASE("manifest round-trip") {
  auto dir = temp_dir("mani");
  DatasetManifest m;
  m.kind = "paired";
  Rng rng(6);
  for (int i = 0; i < 3; ++i) {
    QuadrupletRecord r;
    r.source_path = "imgs/a" + std::to_string(i) + ".png";
    r.reference_path = "imgs/b.png";
    r.target_path = "imgs/c.png";
    r.prompt = kDefaultPrompt;
    r.preset_id = "p" + std::to_string(i);
    r.preset = random_preset(rng);
    r.augmented = i == 1;
    m.paired.push_back(r);
  }
  save_manifest(m, dir / "m.jsonl");
  CHECK(load_manifest(dir / "m.jsonl") == m);
}

TEST_CASE("crop errors") {
  ImageTensor small(8, 8);
  Rng rng(1);
  CHECK_THROWS_AS(random_crop(small, 16, rng), DataError);
  CHECK_THROWS_AS(center_crop(small, 16), DataError);
}
