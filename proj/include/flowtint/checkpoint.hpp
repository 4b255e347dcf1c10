#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "flowtint/errors.hpp"
#include "flowtint/net.hpp"

namespace flowtint {

// Checkpoint archive, all floats little-endian 32-bit, fixed field order:
//   magic "FLTCKPT1"
//   u32 x8: image_size, patch, hidden, heads, blocks, mlp_mult, vocab, max_prompt
//   u64 step_counter
//   base weights: patch_embed {W,b}; branch_embed[0..2]; pos_embed;
//     src_inject; ref_inject; prompt_embed;
//     per block {q,k,v,o,mlp1,mlp2} each {W,b}; head {W,b}
//   u32 adapter entry count; per entry:
//     u32 linear_id, u32 rank, f32 alpha, u8 stage_tag, u8 frozen, A, B

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_f32(std::ostream& os, double v) {
  float f = static_cast<float>(v);
  os.write(reinterpret_cast<const char*>(&f), 4);
}
inline void put_f32s(std::ostream& os, const std::vector<double>& v) {
  for (double x : v) put_f32(os, x);
}

inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline double get_f32(std::istream& is) {
  float f = 0;
  is.read(reinterpret_cast<char*>(&f), 4);
  return static_cast<double>(f);
}
inline void get_f32s(std::istream& is, std::vector<double>& v) {
  for (double& x : v) x = get_f32(is);
}

inline void put_linear_base(std::ostream& os, const Linear& l) {
  put_f32s(os, l.W.a);
  put_f32s(os, l.b);
}
inline void get_linear_base(std::istream& is, Linear& l) {
  get_f32s(is, l.W.a);
  get_f32s(is, l.b);
}

}  // namespace detail

constexpr char kCheckpointMagic[8] = {'F', 'L', 'T', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint(const std::filesystem::path& path, const VelocityField& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 8);
  for (int v : {f.cfg.image_size, f.cfg.patch, f.cfg.hidden, f.cfg.heads, f.cfg.blocks, f.cfg.mlp_mult,
                f.cfg.vocab, f.cfg.max_prompt})
    detail::put_u32(os, static_cast<std::uint32_t>(v));
  detail::put_u64(os, f.step_counter);
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

  std::uint32_t count = 0;
  for (int id = 0; id < f.adapted_count(); ++id) count += static_cast<std::uint32_t>(f.adapted(id).adapters.size());
  detail::put_u32(os, count);
  for (int id = 0; id < f.adapted_count(); ++id) {
    for (const auto& ad : f.adapted(id).adapters) {
      detail::put_u32(os, static_cast<std::uint32_t>(id));
      detail::put_u32(os, static_cast<std::uint32_t>(ad.rank));
      detail::put_f32(os, ad.alpha);
      char stage = static_cast<char>(ad.stage_tag);
      char frozen = ad.frozen ? 1 : 0;
      os.write(&stage, 1);
      os.write(&frozen, 1);
      detail::put_f32s(os, ad.A.a);
      detail::put_f32s(os, ad.B.a);
    }
  }
  if (!os) throw DataError("checkpoint write failed for " + path.string());
}

inline VelocityField load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DataError("not a flowtint checkpoint: " + path.string());
  NetConfig cfg;
  cfg.image_size = static_cast<int>(detail::get_u32(is));
  cfg.patch = static_cast<int>(detail::get_u32(is));
  cfg.hidden = static_cast<int>(detail::get_u32(is));
  cfg.heads = static_cast<int>(detail::get_u32(is));
  cfg.blocks = static_cast<int>(detail::get_u32(is));
  cfg.mlp_mult = static_cast<int>(detail::get_u32(is));
  cfg.vocab = static_cast<int>(detail::get_u32(is));
  cfg.max_prompt = static_cast<int>(detail::get_u32(is));
  cfg.validate();
  VelocityField f = make_field(cfg, 0);
  f.step_counter = detail::get_u64(is);
  detail::get_linear_base(is, f.patch_embed);
  for (auto& be : f.branch_embed) detail::get_f32s(is, be);
  detail::get_f32s(is, f.pos_embed.a);
  detail::get_f32s(is, f.src_inject.a);
  detail::get_f32s(is, f.ref_inject.a);
  detail::get_f32s(is, f.prompt_embed.a);
  for (auto& blk : f.blocks) {
    detail::get_linear_base(is, blk.q);
    detail::get_linear_base(is, blk.k);
    detail::get_linear_base(is, blk.v);
    detail::get_linear_base(is, blk.o);
    detail::get_linear_base(is, blk.mlp1);
    detail::get_linear_base(is, blk.mlp2);
  }
  detail::get_linear_base(is, f.head);

  std::uint32_t count = detail::get_u32(is);
  for (std::uint32_t e = 0; e < count; ++e) {
    std::uint32_t id = detail::get_u32(is);
    if (id >= static_cast<std::uint32_t>(f.adapted_count()))
      throw DataError("checkpoint: adapter references unknown linear");
    Linear& lin = f.adapted(static_cast<int>(id));
    LowRankAdapter ad;
    ad.rank = static_cast<int>(detail::get_u32(is));
    ad.alpha = detail::get_f32(is);
    char stage = 0, frozen = 0;
    is.read(&stage, 1);
    is.read(&frozen, 1);
    ad.stage_tag = static_cast<Stage>(stage);
    ad.frozen = frozen != 0;
    ad.A = Mat(ad.rank, lin.in_dim());
    ad.B = Mat(lin.out_dim(), ad.rank);
    detail::get_f32s(is, ad.A.a);
    detail::get_f32s(is, ad.B.a);
    lin.adapters.push_back(std::move(ad));
  }
  if (!is) throw DataError("truncated checkpoint " + path.string());
  return f;
}

}  // namespace flowtint
