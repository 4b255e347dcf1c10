#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "flowtint/errors.hpp"
#include "flowtint/flow.hpp"
#include "flowtint/image.hpp"
#include "flowtint/rng.hpp"

namespace flowtint {

// ---------------------------------------------------------------------------
// Small dense linear algebra; row-major.

struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

  double& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
};

// ---------------------------------------------------------------------------

struct NetConfig {
  int image_size = 16;
  int patch = 4;
  int hidden = 64;
  int heads = 2;
  int blocks = 2;
  int mlp_mult = 2;
  int vocab = 32;
  int max_prompt = 8;

  int patch_dim() const { return patch * patch * 3; }
  int grid() const { return image_size / patch; }
  int tokens_per_image() const { return grid() * grid(); }
  int latent_dim() const { return image_size * image_size * 3; }

  void validate() const {
    if (image_size <= 0 || patch <= 0 || image_size % patch != 0)
      throw ConfigError("net config: image_size must be a positive multiple of patch");
    if (hidden <= 0 || heads <= 0 || hidden % heads != 0)
      throw ConfigError("net config: hidden must be a positive multiple of heads");
    if (blocks < 1 || mlp_mult < 1 || vocab < 1 || max_prompt < 0)
      throw ConfigError("net config: invalid block/mlp/vocab settings");
  }

  bool operator==(const NetConfig&) const = default;
};

struct ConditioningContext {
  ImageTensor source;
  ImageTensor reference;
  std::vector<int> prompt;
};

// Contiguous half-open token spans, ordered ref < src < main.
struct BranchLayout {
  int ref_lo = 0, ref_hi = 0;
  int src_lo = 0, src_hi = 0;
  int main_lo = 0, main_hi = 0;

  int size() const { return main_hi; }

  void validate() const {
    if (ref_lo != 0 || ref_hi < ref_lo || src_lo != ref_hi || src_hi < src_lo || main_lo != src_hi ||
        main_hi <= main_lo)
      throw DataError("branch layout: spans must be contiguous, ordered ref < src < main, with non-empty main");
    if (ref_hi == ref_lo || src_hi == src_lo)
      throw DataError("branch layout: empty image branch");
  }
};

struct AttentionMask {
  int n = 0;
  std::vector<std::uint8_t> allowed;  // n*n, (q,k)

  bool at(int q, int k) const { return allowed[static_cast<size_t>(q) * n + k] != 0; }
};

// Image branches attend only within themselves; the main branch is causal
// among its own tokens and sees both image branches in full.
inline AttentionMask build_mask(const BranchLayout& layout) {
  layout.validate();
  AttentionMask m;
  m.n = layout.size();
  m.allowed.assign(static_cast<size_t>(m.n) * m.n, 0);
  auto set = [&](int q, int k) { m.allowed[static_cast<size_t>(q) * m.n + k] = 1; };
  for (int q = layout.ref_lo; q < layout.ref_hi; ++q)
    for (int k = layout.ref_lo; k < layout.ref_hi; ++k) set(q, k);
  for (int q = layout.src_lo; q < layout.src_hi; ++q)
    for (int k = layout.src_lo; k < layout.src_hi; ++k) set(q, k);
  for (int q = layout.main_lo; q < layout.main_hi; ++q) {
    for (int k = layout.ref_lo; k < layout.src_hi; ++k) set(q, k);
    for (int k = layout.main_lo; k <= q; ++k) set(q, k);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Low-rank adapters and adaptable linears.

enum class Stage : std::uint8_t { cold_start = 0, post_training = 1 };

struct LowRankAdapter {
  int rank = 0;
  double alpha = 0.0;
  Stage stage_tag = Stage::cold_start;
  bool frozen = false;
  Mat A;  // rank x in
  Mat B;  // out x rank, zero at attach so a fresh adapter is a no-op
};

struct Linear {
  Mat W;  // out x in
  Vec b;  // out
  std::vector<LowRankAdapter> adapters;

  int out_dim() const { return W.rows; }
  int in_dim() const { return W.cols; }

  // base_W + sum over adapters of (alpha/rank) * B * A
  Mat effective() const {
    Mat e = W;
    for (const auto& ad : adapters) {
      double scale = ad.alpha / ad.rank;
      for (int o = 0; o < e.rows; ++o)
        for (int r = 0; r < ad.rank; ++r) {
          double br = scale * ad.B(o, r);
          if (br == 0.0) continue;
          for (int i = 0; i < e.cols; ++i) e(o, i) += br * ad.A(r, i);
        }
    }
    return e;
  }
};

inline void init_linear(Linear& lin, int out, int in, Rng& rng) {
  lin.W = Mat(out, in);
  lin.b.assign(out, 0.0);
  double scale = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& w : lin.W.a) w = rng.uniform(-1.0, 1.0) * scale;
}

// y = Weff * x + b, rows of X treated independently.
inline void matmul_wt(const Mat& w, const Vec& bias, const Mat& x, Mat& y) {
  y = Mat(x.rows, w.rows);
  for (int r = 0; r < x.rows; ++r)
    for (int o = 0; o < w.rows; ++o) {
      double acc = bias.empty() ? 0.0 : bias[o];
      for (int i = 0; i < w.cols; ++i) acc += w(o, i) * x(r, i);
      y(r, o) = acc;
    }
}

// ---------------------------------------------------------------------------

struct AttnBlock {
  Linear q, k, v, o;
  Linear mlp1, mlp2;
};

// Conditional velocity network: three token branches (reference, source,
// main = text + noisy latent), structured-mask attention, frozen base, and a
// stack of low-rank adapters on the attention projections and output head.
struct VelocityField {
  NetConfig cfg;
  Linear patch_embed;                // hidden x patch_dim
  std::array<Vec, 3> branch_embed;   // ref, src, main
  Mat pos_embed;                     // tokens_per_image x hidden, shared across branches
  Mat src_inject;                    // hidden x patch_dim: aligned source patch into main tokens
  Mat ref_inject;                    // hidden x patch_dim: aligned reference patch into main tokens
  Mat prompt_embed;                  // vocab x hidden
  std::vector<AttnBlock> blocks;
  Linear head;                       // patch_dim x hidden
  std::uint64_t step_counter = 0;

  // Adapted linears in fixed order: per block q,k,v,o,mlp1,mlp2, then the head.
  int adapted_count() const { return cfg.blocks * 6 + 1; }

  Linear& adapted(int id) {
    if (id == cfg.blocks * 6) return head;
    AttnBlock& blk = blocks[id / 6];
    switch (id % 6) {
      case 0: return blk.q;
      case 1: return blk.k;
      case 2: return blk.v;
      case 3: return blk.o;
      case 4: return blk.mlp1;
      default: return blk.mlp2;
    }
  }
  const Linear& adapted(int id) const { return const_cast<VelocityField*>(this)->adapted(id); }
};

inline VelocityField make_field(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  VelocityField f;
  f.cfg = cfg;
  Rng rng = Rng::from(seed, {0xf1e1dull});
  init_linear(f.patch_embed, cfg.hidden, cfg.patch_dim(), rng);
  for (auto& be : f.branch_embed) {
    be.assign(cfg.hidden, 0.0);
    for (double& v : be) v = rng.uniform(-0.5, 0.5);
  }
  // Shared positional codes let a main token key onto its aligned source and
  // reference patches even when its own content is pure noise.
  f.pos_embed = Mat(cfg.tokens_per_image(), cfg.hidden);
  for (double& v : f.pos_embed.a) v = rng.uniform(-0.5, 0.5);
  // Direct conditioning: each noisy main token also carries its aligned source
  // and reference patches, so the trainable layers learn the color mapping
  // instead of spending capacity on cross-branch retrieval.
  double inj_scale = 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim()));
  f.src_inject = Mat(cfg.hidden, cfg.patch_dim());
  f.ref_inject = Mat(cfg.hidden, cfg.patch_dim());
  for (double& v : f.src_inject.a) v = rng.uniform(-1.0, 1.0) * inj_scale;
  for (double& v : f.ref_inject.a) v = rng.uniform(-1.0, 1.0) * inj_scale;
  f.prompt_embed = Mat(cfg.vocab, cfg.hidden);
  for (double& v : f.prompt_embed.a) v = rng.uniform(-0.5, 0.5);
  f.blocks.resize(cfg.blocks);
  for (auto& blk : f.blocks) {
    init_linear(blk.q, cfg.hidden, cfg.hidden, rng);
    init_linear(blk.k, cfg.hidden, cfg.hidden, rng);
    init_linear(blk.v, cfg.hidden, cfg.hidden, rng);
    init_linear(blk.o, cfg.hidden, cfg.hidden, rng);
    init_linear(blk.mlp1, cfg.hidden * cfg.mlp_mult, cfg.hidden, rng);
    init_linear(blk.mlp2, cfg.hidden, cfg.hidden * cfg.mlp_mult, rng);
  }
  init_linear(f.head, cfg.patch_dim(), cfg.hidden, rng);
  return f;
}

// Appends a fresh B=0 adapter to every attention projection and the head.
inline void attach_adapter(VelocityField& field, int rank, double alpha, Stage stage,
                           std::uint64_t seed) {
  if (rank < 1) throw ConfigError("attach_adapter: rank must be >= 1");
  Rng rng = Rng::from(seed, {0x10a4ull, static_cast<std::uint64_t>(stage)});
  for (int id = 0; id < field.adapted_count(); ++id) {
    Linear& lin = field.adapted(id);
    if (rank > lin.in_dim() || rank > lin.out_dim())
      throw ConfigError("attach_adapter: rank exceeds matrix dimensions");
    LowRankAdapter ad;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.stage_tag = stage;
    ad.A = Mat(rank, lin.in_dim());
    double scale = 1.0 / std::sqrt(static_cast<double>(lin.in_dim()));
    for (double& v : ad.A.a) v = rng.uniform(-1.0, 1.0) * scale;
    ad.B = Mat(lin.out_dim(), rank);
    lin.adapters.push_back(std::move(ad));
  }
}

inline void set_stage_frozen(VelocityField& field, Stage stage, bool frozen) {
  for (int id = 0; id < field.adapted_count(); ++id)
    for (auto& ad : field.adapted(id).adapters)
      if (ad.stage_tag == stage) ad.frozen = frozen;
}

inline bool has_stage(const VelocityField& field, Stage stage) {
  for (int id = 0; id < field.adapted_count(); ++id)
    for (const auto& ad : field.adapted(id).adapters)
      if (ad.stage_tag == stage) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Forward pass with a trace for backprop and for mask-leak inspection.

struct BlockTrace {
  Mat x_in;           // block input
  Mat weff_q, weff_k, weff_v, weff_o, weff_m1, weff_m2;
  Mat q, k, v;        // n x hidden
  std::vector<Mat> probs;  // per head, n x n (zero on masked keys)
  Mat attn_concat;    // n x hidden, pre output projection
  Mat x_attn;         // after attention residual ("post-attention features")
  Mat mlp_h;          // n x hidden*mult, post tanh
  Mat x_out;          // after mlp residual
};

struct ForwardTrace {
  BranchLayout layout;
  AttentionMask mask;
  Mat x0;  // embedded tokens
  std::vector<BlockTrace> block;
  Mat weff_head;
  Vec out;
  double time_denom = 1.0;
};

// The head predicts the clean image estimate; the velocity is recovered as
// v = (x_t - x0_hat) / max(t, floor). Along the interpolation path this is the
// exact target velocity, and it keeps Euler rollouts anchored to the clean
// estimate instead of accumulating integration drift. The floor bounds the
// 1/t factor for the few training draws with t near zero.
inline constexpr double kTimeFloor = 0.05;

inline BranchLayout make_layout(const NetConfig& cfg, int prompt_len) {
  BranchLayout l;
  int n_img = cfg.tokens_per_image();
  l.ref_lo = 0;
  l.ref_hi = n_img;
  l.src_lo = n_img;
  l.src_hi = 2 * n_img;
  l.main_lo = 2 * n_img;
  l.main_hi = 2 * n_img + prompt_len + n_img;
  return l;
}

inline void patch_vector(const double* flat, const NetConfig& cfg, int token, double* out) {
  int g = cfg.grid();
  int py = token / g, px = token % g;
  int idx = 0;
  for (int y = 0; y < cfg.patch; ++y)
    for (int x = 0; x < cfg.patch; ++x)
      for (int c = 0; c < 3; ++c)
        out[idx++] = flat[((static_cast<size_t>(py * cfg.patch + y)) * cfg.image_size + px * cfg.patch + x) * 3 + c];
}

inline void unpatch_add(double* flat, const NetConfig& cfg, int token, const double* patch) {
  int g = cfg.grid();
  int py = token / g, px = token % g;
  int idx = 0;
  for (int y = 0; y < cfg.patch; ++y)
    for (int x = 0; x < cfg.patch; ++x)
      for (int c = 0; c < 3; ++c)
        flat[((static_cast<size_t>(py * cfg.patch + y)) * cfg.image_size + px * cfg.patch + x) * 3 + c] += patch[idx++];
}

inline Vec time_embedding(const NetConfig& cfg, double t) {
  Vec e(cfg.hidden);
  int half = cfg.hidden / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
    e[2 * i] = std::sin(t * freq * 100.0);
    e[2 * i + 1] = std::cos(t * freq * 100.0);
  }
  if (cfg.hidden % 2) e[cfg.hidden - 1] = t;
  return e;
}

inline Vec forward_traced(const VelocityField& field, const Vec& xt, const ConditioningContext& ctx,
                          double t, ForwardTrace& trace) {
  const NetConfig& cfg = field.cfg;
  if (static_cast<int>(xt.size()) != cfg.latent_dim())
    throw DimensionError("forward: latent size mismatch");
  if (t < 0.0 || t > 1.0) throw DomainError("forward: t outside [0,1]");
  if (ctx.source.h != cfg.image_size || ctx.source.w != cfg.image_size ||
      ctx.reference.h != cfg.image_size || ctx.reference.w != cfg.image_size)
    throw DimensionError("forward: conditioning image dimensions do not match the net");
  if (static_cast<int>(ctx.prompt.size()) > cfg.max_prompt)
    throw DataError("forward: prompt longer than the configured maximum");
  for (int id : ctx.prompt)
    if (id < 0 || id >= cfg.vocab) throw DataError("forward: prompt token id outside vocabulary");

  const int n_img = cfg.tokens_per_image();
  const int n_text = static_cast<int>(ctx.prompt.size());
  trace.layout = make_layout(cfg, n_text);
  trace.mask = build_mask(trace.layout);
  const int n = trace.layout.size();
  const int h = cfg.hidden;
  const int pd = cfg.patch_dim();

  Mat weff_pe = field.patch_embed.effective();
  Vec temb = time_embedding(cfg, t);
  std::vector<double> pbuf(pd);

  Mat x(n, h);
  auto embed_patch = [&](const double* flat, int token, int row, int branch, bool with_time) {
    patch_vector(flat, cfg, token, pbuf.data());
    for (int d = 0; d < h; ++d) {
      double acc = field.patch_embed.b[d];
      for (int i = 0; i < pd; ++i) acc += weff_pe(d, i) * pbuf[i];
      acc += field.branch_embed[branch][d];
      acc += field.pos_embed(token, d);
      if (with_time) acc += temb[d];
      x(row, d) = acc;
    }
  };
  for (int i = 0; i < n_img; ++i) embed_patch(ctx.reference.data.data(), i, trace.layout.ref_lo + i, 0, false);
  for (int i = 0; i < n_img; ++i) embed_patch(ctx.source.data.data(), i, trace.layout.src_lo + i, 1, false);
  for (int j = 0; j < n_text; ++j) {
    int row = trace.layout.main_lo + j;
    for (int d = 0; d < h; ++d)
      x(row, d) = field.prompt_embed(ctx.prompt[j], d) + field.branch_embed[2][d] + temb[d];
  }
  std::vector<double> sbuf(pd), rbuf(pd);
  for (int i = 0; i < n_img; ++i) {
    int row = trace.layout.main_lo + n_text + i;
    embed_patch(xt.data(), i, row, 2, true);
    patch_vector(ctx.source.data.data(), cfg, i, sbuf.data());
    patch_vector(ctx.reference.data.data(), cfg, i, rbuf.data());
    for (int d = 0; d < h; ++d) {
      double acc = 0.0;
      for (int p = 0; p < pd; ++p)
        acc += field.src_inject(d, p) * sbuf[p] + field.ref_inject(d, p) * rbuf[p];
      x(row, d) += acc;
    }
  }
  trace.x0 = x;

  const int hd = h / cfg.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  trace.block.clear();
  trace.block.resize(cfg.blocks);

  for (int b = 0; b < cfg.blocks; ++b) {
    BlockTrace& bt = trace.block[b];
    const AttnBlock& blk = field.blocks[b];
    bt.x_in = x;
    bt.weff_q = blk.q.effective();
    bt.weff_k = blk.k.effective();
    bt.weff_v = blk.v.effective();
    bt.weff_o = blk.o.effective();
    matmul_wt(bt.weff_q, blk.q.b, x, bt.q);
    matmul_wt(bt.weff_k, blk.k.b, x, bt.k);
    matmul_wt(bt.weff_v, blk.v.b, x, bt.v);

    bt.attn_concat = Mat(n, h);
    bt.probs.assign(cfg.heads, Mat(n, n));
    for (int head_i = 0; head_i < cfg.heads; ++head_i) {
      Mat& probs = bt.probs[head_i];
      const int off = head_i * hd;
      for (int qi = 0; qi < n; ++qi) {
        // masked logits are -inf: masked keys get exactly zero weight
        double mx = -1e300;
        std::vector<double> s(n, 0.0);
        for (int kj = 0; kj < n; ++kj) {
          if (!trace.mask.at(qi, kj)) continue;
          double acc = 0.0;
          for (int d = 0; d < hd; ++d) acc += bt.q(qi, off + d) * bt.k(kj, off + d);
          s[kj] = acc * inv_sqrt;
          if (s[kj] > mx) mx = s[kj];
        }
        double sum = 0.0;
        for (int kj = 0; kj < n; ++kj) {
          if (!trace.mask.at(qi, kj)) continue;
          probs(qi, kj) = std::exp(s[kj] - mx);
          sum += probs(qi, kj);
        }
        for (int kj = 0; kj < n; ++kj) {
          if (!trace.mask.at(qi, kj)) continue;
          probs(qi, kj) /= sum;
          for (int d = 0; d < hd; ++d) bt.attn_concat(qi, off + d) += probs(qi, kj) * bt.v(kj, off + d);
        }
      }
    }

    Mat attn_out;
    matmul_wt(bt.weff_o, blk.o.b, bt.attn_concat, attn_out);
    bt.x_attn = Mat(n, h);
    for (size_t i = 0; i < x.a.size(); ++i) bt.x_attn.a[i] = x.a[i] + attn_out.a[i];

    bt.weff_m1 = blk.mlp1.effective();
    bt.weff_m2 = blk.mlp2.effective();
    Mat h1;
    matmul_wt(bt.weff_m1, blk.mlp1.b, bt.x_attn, h1);
    for (double& v : h1.a) v = std::tanh(v);
    bt.mlp_h = h1;
    Mat h2;
    matmul_wt(bt.weff_m2, blk.mlp2.b, h1, h2);
    bt.x_out = Mat(n, h);
    for (size_t i = 0; i < x.a.size(); ++i) bt.x_out.a[i] = bt.x_attn.a[i] + h2.a[i];
    x = bt.x_out;
  }

  trace.weff_head = field.head.effective();
  Vec out(cfg.latent_dim(), 0.0);
  std::vector<double> patch_out(pd);
  for (int i = 0; i < n_img; ++i) {
    int row = trace.layout.main_lo + n_text + i;
    for (int p = 0; p < pd; ++p) {
      double acc = field.head.b[p];
      for (int d = 0; d < h; ++d) acc += trace.weff_head(p, d) * x(row, d);
      patch_out[p] = acc;
    }
    unpatch_add(out.data(), cfg, i, patch_out.data());
  }
  trace.time_denom = std::max(t, kTimeFloor);
  for (size_t j = 0; j < out.size(); ++j) out[j] = (xt[j] - out[j]) / trace.time_denom;
  for (double v : out)
    if (!std::isfinite(v)) throw NumericError("forward: non-finite network output");
  trace.out = out;
  return out;
}

inline Vec forward(const VelocityField& field, const Vec& xt, const ConditioningContext& ctx, double t) {
  ForwardTrace trace;
  return forward_traced(field, xt, ctx, t, trace);
}

// ---------------------------------------------------------------------------
// Backward pass. Gradients are reported as effective-weight gradients of the
// adapted linears; they project onto adapter factors at update time. The base
// and all embedding tables are frozen by construction, so backprop stops at
// the token embeddings.

struct Grads {
  std::vector<Mat> dw;  // per adapted linear id

  static Grads zeros(const VelocityField& field) {
    Grads g;
    g.dw.reserve(field.adapted_count());
    for (int id = 0; id < field.adapted_count(); ++id) {
      const Linear& lin = field.adapted(id);
      g.dw.emplace_back(lin.out_dim(), lin.in_dim());
    }
    return g;
  }

  void add_scaled(const Grads& o, double s) {
    for (size_t i = 0; i < dw.size(); ++i)
      for (size_t j = 0; j < dw[i].a.size(); ++j) dw[i].a[j] += s * o.dw[i].a[j];
  }

  void scale(double s) {
    for (auto& m : dw)
      for (double& v : m.a) v *= s;
  }

  double max_abs() const {
    double m = 0.0;
    for (const auto& mat : dw)
      for (double v : mat.a) m = std::max(m, std::abs(v));
    return m;
  }
};

// dW += dy^T * x over token rows
inline void accum_dw(Mat& dw, const Mat& dy, const Mat& x) {
  for (int r = 0; r < x.rows; ++r)
    for (int o = 0; o < dw.rows; ++o) {
      double g = dy(r, o);
      if (g == 0.0) continue;
      for (int i = 0; i < dw.cols; ++i) dw(o, i) += g * x(r, i);
    }
}

// dx += dy * Weff
inline void accum_dx(Mat& dx, const Mat& dy, const Mat& weff) {
  for (int r = 0; r < dx.rows; ++r)
    for (int o = 0; o < weff.rows; ++o) {
      double g = dy(r, o);
      if (g == 0.0) continue;
      for (int i = 0; i < weff.cols; ++i) dx(r, i) += g * weff(o, i);
    }
}

inline Grads backward(const VelocityField& field, const ForwardTrace& trace, const Vec& d_out) {
  const NetConfig& cfg = field.cfg;
  Grads grads = Grads::zeros(field);
  const int n = trace.layout.size();
  const int h = cfg.hidden;
  const int pd = cfg.patch_dim();
  const int n_img = cfg.tokens_per_image();
  const int n_text = trace.layout.main_hi - trace.layout.main_lo - n_img;
  const int hd = h / cfg.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const int head_id = cfg.blocks * 6;

  // head; v = (x_t - head_raw) / time_denom, so d(head_raw) = -d_out / time_denom
  const double head_scale = -1.0 / trace.time_denom;
  const Mat& x_final = trace.block.back().x_out;
  Mat dx(n, h);
  std::vector<double> dpatch(pd);
  for (int i = 0; i < n_img; ++i) {
    int row = trace.layout.main_lo + n_text + i;
    patch_vector(d_out.data(), cfg, i, dpatch.data());
    for (int p = 0; p < pd; ++p) {
      double g = dpatch[p] * head_scale;
      if (g == 0.0) continue;
      for (int d = 0; d < h; ++d) {
        grads.dw[head_id](p, d) += g * x_final(row, d);
        dx(row, d) += g * trace.weff_head(p, d);
      }
    }
  }

  for (int b = cfg.blocks - 1; b >= 0; --b) {
    const BlockTrace& bt = trace.block[b];
    const AttnBlock& blk = field.blocks[b];

    // mlp: x_out = x_attn + W2 * tanh(W1 * x_attn + b1) + b2
    accum_dw(grads.dw[b * 6 + 5], dx, bt.mlp_h);
    Mat dh1(n, h * cfg.mlp_mult);
    accum_dx(dh1, dx, bt.weff_m2);
    for (size_t i = 0; i < dh1.a.size(); ++i) {
      double th = bt.mlp_h.a[i];
      dh1.a[i] *= (1.0 - th * th);
    }
    Mat dx_attn = dx;  // residual branch
    accum_dw(grads.dw[b * 6 + 4], dh1, bt.x_attn);
    accum_dx(dx_attn, dh1, bt.weff_m1);

    // attention: x_attn = x_in + Wo * concat(heads) + bo
    Mat dconcat(n, h);
    accum_dx(dconcat, dx_attn, bt.weff_o);
    accum_dw(grads.dw[b * 6 + 3], dx_attn, bt.attn_concat);

    Mat dq(n, h), dk(n, h), dv(n, h);
    for (int head_i = 0; head_i < cfg.heads; ++head_i) {
      const Mat& probs = bt.probs[head_i];
      const int off = head_i * hd;
      for (int qi = 0; qi < n; ++qi) {
        // dP and the softmax Jacobian over allowed keys
        double dot_pd = 0.0;
        std::vector<double> dp(n, 0.0);
        for (int kj = 0; kj < n; ++kj) {
          double p = probs(qi, kj);
          if (p == 0.0) continue;
          double acc = 0.0;
          for (int d = 0; d < hd; ++d) {
            acc += dconcat(qi, off + d) * bt.v(kj, off + d);
            dv(kj, off + d) += p * dconcat(qi, off + d);
          }
          dp[kj] = acc;
          dot_pd += p * acc;
        }
        for (int kj = 0; kj < n; ++kj) {
          double p = probs(qi, kj);
          if (p == 0.0) continue;
          double ds = p * (dp[kj] - dot_pd) * inv_sqrt;
          if (ds == 0.0) continue;
          for (int d = 0; d < hd; ++d) {
            dq(qi, off + d) += ds * bt.k(kj, off + d);
            dk(kj, off + d) += ds * bt.q(qi, off + d);
          }
        }
      }
    }

    Mat dx_in = dx_attn;  // residual branch
    accum_dw(grads.dw[b * 6 + 0], dq, bt.x_in);
    accum_dx(dx_in, dq, bt.weff_q);
    accum_dw(grads.dw[b * 6 + 1], dk, bt.x_in);
    accum_dx(dx_in, dk, bt.weff_k);
    accum_dw(grads.dw[b * 6 + 2], dv, bt.x_in);
    accum_dx(dx_in, dv, bt.weff_v);
    dx = dx_in;
  }
  return grads;
}

// Projects effective-weight gradients onto the unfrozen adapter factors and
// takes a plain gradient-descent step. Frozen adapters and the base are
// untouched.
inline void apply_sgd(VelocityField& field, const Grads& grads, double lr) {
  for (int id = 0; id < field.adapted_count(); ++id) {
    Linear& lin = field.adapted(id);
    const Mat& dw = grads.dw[id];
    for (auto& ad : lin.adapters) {
      if (ad.frozen) continue;
      double scale = ad.alpha / ad.rank;
      Mat dA(ad.rank, lin.in_dim());
      Mat dB(lin.out_dim(), ad.rank);
      for (int r = 0; r < ad.rank; ++r)
        for (int i = 0; i < lin.in_dim(); ++i) {
          double acc = 0.0;
          for (int o = 0; o < lin.out_dim(); ++o) acc += ad.B(o, r) * dw(o, i);
          dA(r, i) = scale * acc;
        }
      for (int o = 0; o < lin.out_dim(); ++o)
        for (int r = 0; r < ad.rank; ++r) {
          double acc = 0.0;
          for (int i = 0; i < lin.in_dim(); ++i) acc += dw(o, i) * ad.A(r, i);
          dB(o, r) = scale * acc;
        }
      for (size_t i = 0; i < ad.A.a.size(); ++i) ad.A.a[i] -= lr * dA.a[i];
      for (size_t i = 0; i < ad.B.a.size(); ++i) ad.B.a[i] -= lr * dB.a[i];
    }
  }
}

// Adam moments for every unfrozen adapter factor pair, laid out to mirror the
// adapter stacks. Lazily sized on first use so callers can default-construct.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  // per adapted id, per adapter index: mA, vA, mB, vB
  std::vector<std::vector<std::array<Mat, 4>>> moments;
};

// Same factor projection as apply_sgd, but with Adam's moment-scaled step;
// the uniform per-coordinate scaling gets attention logits moving much faster
// than raw gradient descent at this scale.
inline void apply_adam(VelocityField& field, const Grads& grads, double lr, AdamState& st) {
  if (st.moments.empty()) st.moments.resize(static_cast<size_t>(field.adapted_count()));
  st.t += 1;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (int id = 0; id < field.adapted_count(); ++id) {
    Linear& lin = field.adapted(id);
    if (st.moments[id].size() != lin.adapters.size()) st.moments[id].resize(lin.adapters.size());
    const Mat& dw = grads.dw[id];
    for (size_t a = 0; a < lin.adapters.size(); ++a) {
      auto& ad = lin.adapters[a];
      if (ad.frozen) continue;
      double scale = ad.alpha / ad.rank;
      Mat dA(ad.rank, lin.in_dim());
      Mat dB(lin.out_dim(), ad.rank);
      for (int r = 0; r < ad.rank; ++r)
        for (int i = 0; i < lin.in_dim(); ++i) {
          double acc = 0.0;
          for (int o = 0; o < lin.out_dim(); ++o) acc += ad.B(o, r) * dw(o, i);
          dA(r, i) = scale * acc;
        }
      for (int o = 0; o < lin.out_dim(); ++o)
        for (int r = 0; r < ad.rank; ++r) {
          double acc = 0.0;
          for (int i = 0; i < lin.in_dim(); ++i) acc += dw(o, i) * ad.A(r, i);
          dB(o, r) = scale * acc;
        }
      auto& mo = st.moments[id][a];
      if (mo[0].a.empty()) {
        mo[0] = Mat(ad.rank, lin.in_dim());
        mo[1] = Mat(ad.rank, lin.in_dim());
        mo[2] = Mat(lin.out_dim(), ad.rank);
        mo[3] = Mat(lin.out_dim(), ad.rank);
      }
      auto step = [&](Mat& p, const Mat& g, Mat& m, Mat& v) {
        for (size_t j = 0; j < p.a.size(); ++j) {
          m.a[j] = st.beta1 * m.a[j] + (1.0 - st.beta1) * g.a[j];
          v.a[j] = st.beta2 * v.a[j] + (1.0 - st.beta2) * g.a[j] * g.a[j];
          p.a[j] -= lr * (m.a[j] / c1) / (std::sqrt(v.a[j] / c2) + st.eps);
        }
      };
      step(ad.A, dA, mo[0], mo[1]);
      step(ad.B, dB, mo[2], mo[3]);
    }
  }
}

// Gradients of the scalar loss w.r.t. unfrozen adapter factors, for gradient
// verification; same projection as apply_sgd without the update.
struct AdapterGrads {
  std::vector<std::pair<Mat, Mat>> per_linear;  // (dA, dB) per adapted id, empty mats when frozen

  double dot(const AdapterGrads& o) const {
    double s = 0.0;
    for (size_t i = 0; i < per_linear.size(); ++i) {
      for (size_t j = 0; j < per_linear[i].first.a.size(); ++j)
        s += per_linear[i].first.a[j] * o.per_linear[i].first.a[j];
      for (size_t j = 0; j < per_linear[i].second.a.size(); ++j)
        s += per_linear[i].second.a[j] * o.per_linear[i].second.a[j];
    }
    return s;
  }
};

inline AdapterGrads project_adapter_grads(const VelocityField& field, const Grads& grads) {
  AdapterGrads out;
  for (int id = 0; id < field.adapted_count(); ++id) {
    const Linear& lin = field.adapted(id);
    Mat dA, dB;
    for (const auto& ad : lin.adapters) {
      if (ad.frozen) continue;
      double scale = ad.alpha / ad.rank;
      dA = Mat(ad.rank, lin.in_dim());
      dB = Mat(lin.out_dim(), ad.rank);
      const Mat& dw = grads.dw[id];
      for (int r = 0; r < ad.rank; ++r)
        for (int i = 0; i < lin.in_dim(); ++i) {
          double acc = 0.0;
          for (int o = 0; o < lin.out_dim(); ++o) acc += ad.B(o, r) * dw(o, i);
          dA(r, i) = scale * acc;
        }
      for (int o = 0; o < lin.out_dim(); ++o)
        for (int r = 0; r < ad.rank; ++r) {
          double acc = 0.0;
          for (int i = 0; i < lin.in_dim(); ++i) acc += dw(o, i) * ad.A(r, i);
          dB(o, r) = scale * acc;
        }
      break;  // one unfrozen stage at a time
    }
    out.per_linear.emplace_back(std::move(dA), std::move(dB));
  }
  return out;
}

}  // namespace flowtint
