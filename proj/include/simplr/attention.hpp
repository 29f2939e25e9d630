#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "simplr/ops.hpp"
#include "simplr/rng.hpp"
#include "simplr/tape.hpp"

// Window-based sparse attention. A query attends to a small grid of bilinear
// samples taken from a reference window it first refines (translates, then
// rescales) from its own features. Scale-aware variants run the same grid
// attention over a pyramid of anchor windows per query and blend the results.

namespace simplr {

// Normalized center-size window over the image: all four entries in image
// fractions, (x, y) the center.
struct ReferenceWindow {
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;
};

// Geometric anchor ladder: square windows of side base_size * 2^j texels,
// expressed as fractions of image_size.
struct AnchorSet {
  double base_size = 0.0;
  int count = 0;
  double image_size = 0.0;

  AnchorSet() = default;
  AnchorSet(double base, int n, double image) : base_size(base), count(n), image_size(image) {
    if (base <= 0.0 || image <= 0.0 || n < 1)
      throw Error("anchor set: need base > 0, image > 0, count >= 1");
  }

  double normalized(int j) const {
    if (j < 0 || j >= count) throw Error("anchor set: scale index " + std::to_string(j) + " out of range");
    return base_size * std::pow(2.0, j) / image_size;
  }
};

// Offset temperature for the j-th anchor scale: larger windows move in larger
// steps. Powers of two keep consecutive ratios exactly 2.
inline double scale_temperature(int j, double lambda) {
  if (lambda <= 0.0) throw Error("scale_temperature: lambda must be positive");
  return std::pow(2.0, j) / lambda;
}

struct AttentionConfig {
  int dim = 32;
  int heads = 4;
  int grid = 2;         // per-window sample grid (g x g)
  int scale_count = 1;  // anchors for the scale-aware variants
  double lambda = 1.0;
  bool per_scale_offsets = true;  // adaptive variant: separate offsets per anchor

  int head_dim() const { return dim / heads; }

  void validate(const char* who) const {
    if (dim < 1 || heads < 1 || dim % heads != 0)
      throw Error(std::string(who) + ": heads " + std::to_string(heads) + " must divide dim " +
                  std::to_string(dim));
    if (grid < 1) throw Error(std::string(who) + ": grid must be >= 1");
    if (scale_count < 1) throw Error(std::string(who) + ": scale_count must be >= 1");
    if (lambda <= 0.0) throw Error(std::string(who) + ": lambda must be positive");
  }
};

// Round-robin head-to-scale map: head i serves anchor scale i mod m.
inline std::vector<int> head_scale_assignment(int heads, int scales) {
  if (scales < 1 || heads < scales || heads % scales != 0)
    throw Error("head_scale_assignment: scales " + std::to_string(scales) +
                " must divide heads " + std::to_string(heads));
  std::vector<int> a(static_cast<size_t>(heads));
  for (int i = 0; i < heads; ++i) a[static_cast<size_t>(i)] = i % scales;
  return a;
}

// ---------------------------------------------------------------------------
// Window refinement

// Applies an effective offset (already in normalized units): translate by
// (ox, oy), then grow by (ow, oh), each stepped by `temperature`. Extents are
// clamped from below so a window can never collapse past one texel.
inline ReferenceWindow refine_window(const ReferenceWindow& r, const std::array<double, 4>& offsets,
                                     double temperature, double min_w, double min_h) {
  ReferenceWindow out;
  out.x = r.x + temperature * offsets[0];
  out.y = r.y + temperature * offsets[1];
  out.w = std::max(r.w + temperature * offsets[2], min_w);
  out.h = std::max(r.h + temperature * offsets[3], min_h);
  return out;
}

// Tape variant over rows of [k,4] windows. `raw_offsets` come straight from a
// linear head and are first scaled by the window extents ([w,h,w,h]), so a
// unit of predicted offset moves the window by its own size.
inline Var refine_windows(Tape& t, Var raw_offsets, const Tensor& windows, double temperature,
                          double min_w, double min_h) {
  if (windows.rank() != 2 || windows.shape[1] != 4)
    throw Error("refine_windows: windows must be [k,4], got " + shape_str(windows.shape));
  const Tensor& off = t.val(raw_offsets);
  if (off.shape != windows.shape)
    throw Error("refine_windows: offsets " + shape_str(off.shape) + " vs windows " +
                shape_str(windows.shape));
  Var wins = t.constant(windows);
  Var wh = slice(wins, 1, 2, 2);
  Var whwh = concat({wh, wh}, 1);
  Var refined = add(wins, scale(mul(raw_offsets, whwh), temperature));
  Var xy = slice(refined, 1, 0, 2);
  Var w = clamp_min(slice(refined, 1, 2, 1), min_w);
  Var h = clamp_min(slice(refined, 1, 3, 1), min_h);
  return concat({xy, w, h}, 1);
}

// ---------------------------------------------------------------------------
// Grid sampling

// Centers of the g x g cells of a unit window, as offsets from the window
// center in units of the window size. Row-major over (row, col).
inline void unit_grid_offsets(int g, std::vector<double>& u, std::vector<double>& v) {
  u.resize(static_cast<size_t>(g) * g);
  v.resize(static_cast<size_t>(g) * g);
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c) {
      u[static_cast<size_t>(r * g + c)] = (c + 0.5) / g - 0.5;
      v[static_cast<size_t>(r * g + c)] = (r + 0.5) / g - 0.5;
    }
}

// Plain-point version used when sample locations are needed as values (mask
// lookups); must stay in lockstep with sample_grid below.
inline void grid_points_plain(const ReferenceWindow& r, int g, std::vector<double>& px,
                              std::vector<double>& py) {
  std::vector<double> u, v;
  unit_grid_offsets(g, u, v);
  px.resize(u.size());
  py.resize(v.size());
  for (size_t i = 0; i < u.size(); ++i) {
    px[i] = r.x + r.w * u[i];
    py[i] = r.y + r.h * v[i];
  }
}

// Bilinear-samples a g x g grid of points spanning each window. windows
// [k,4] (differentiable), map [H,W,c] -> [k, g*g, c].
inline Var sample_grid(Tape& t, Var map, Var windows, int g) {
  const Tensor& wv = t.val(windows);
  if (wv.rank() != 2 || wv.shape[1] != 4)
    throw Error("sample_grid: windows must be [k,4], got " + shape_str(wv.shape));
  const Tensor& mv = t.val(map);
  if (mv.rank() != 3) throw Error("sample_grid: map must be [H,W,c], got " + shape_str(mv.shape));
  const int k = wv.shape[0];
  const int g2 = g * g;
  std::vector<double> u, v;
  unit_grid_offsets(g, u, v);
  Tensor cu({1, g2}), cv({1, g2});
  for (int i = 0; i < g2; ++i) {
    cu.data[static_cast<size_t>(i)] = u[static_cast<size_t>(i)];
    cv.data[static_cast<size_t>(i)] = v[static_cast<size_t>(i)];
  }
  Var x = slice(windows, 1, 0, 1);
  Var y = slice(windows, 1, 1, 1);
  Var w = slice(windows, 1, 2, 1);
  Var h = slice(windows, 1, 3, 1);
  Var px = add(x, mul(w, t.constant(cu)));  // [k,g2]
  Var py = add(y, mul(h, t.constant(cv)));
  Var pts = concat({reshape(px, {k, g2, 1}), reshape(py, {k, g2, 1})}, 2);
  Var sampled = bilinear_sample(map, reshape(pts, {k * g2, 2}));
  return reshape(sampled, {k, g2, mv.shape[2]});
}

// ---------------------------------------------------------------------------
// Parameter bundles

struct LinearParams {
  Parameter* w = nullptr;
  Parameter* b = nullptr;
};

inline LinearParams make_linear(ParamStore& ps, const std::string& prefix, int in, int out,
                                Rng& rng, bool zero_init = false, bool bias = true) {
  Tensor w({in, out});
  if (!zero_init) {
    double bound = std::sqrt(6.0 / (in + out));
    Rng local = rng.split(prefix);
    for (double& v : w.data) v = local.uniform(-bound, bound);
  }
  LinearParams lp;
  lp.w = &ps.create(prefix + ".w", std::move(w));
  if (bias) lp.b = &ps.create(prefix + ".b", Tensor::zeros({out}));
  return lp;
}

inline Var apply_linear(Tape& t, Var x, const LinearParams& lp) {
  if (!lp.b) return matmul(x, t.param(*lp.w));
  return linear(x, t.param(*lp.w), t.param(*lp.b));
}

// Shared by box attention and its scale-aware variants. The offset head emits
// 4 numbers per head (times scale_count for per-scale offsets); the scale head
// exists only for the adaptive variant.
struct BoxAttentionParams {
  LinearParams offset;              // dim -> 4 * heads [* scale_count]
  LinearParams value;               // dim -> dim
  LinearParams scale_logits;        // dim -> heads * scale_count (adaptive only)
  Parameter* rel_pos = nullptr;     // [heads, grid*grid, dim]
  LinearParams out;                 // dim -> dim
};

enum class BoxAttentionKind { kBox, kFixedScale, kAdaptiveScale };

inline BoxAttentionParams make_box_attention_params(ParamStore& ps, const std::string& prefix,
                                                    const AttentionConfig& cfg,
                                                    BoxAttentionKind kind, Rng& rng) {
  cfg.validate(prefix.c_str());
  BoxAttentionParams p;
  int off_out = 4 * cfg.heads;
  if (kind == BoxAttentionKind::kAdaptiveScale && cfg.per_scale_offsets)
    off_out = 4 * cfg.heads * cfg.scale_count;
  // offsets start at zero so the first refinement leaves windows in place
  p.offset = make_linear(ps, prefix + ".offset", cfg.dim, off_out, rng, /*zero_init=*/true);
  p.value = make_linear(ps, prefix + ".value", cfg.dim, cfg.dim, rng);
  if (kind == BoxAttentionKind::kAdaptiveScale)
    p.scale_logits = make_linear(ps, prefix + ".scale", cfg.dim, cfg.heads * cfg.scale_count, rng,
                                 /*zero_init=*/true);
  Tensor rel({cfg.heads, cfg.grid * cfg.grid, cfg.dim});
  Rng local = rng.split(prefix + ".rel_pos");
  for (double& v : rel.data) v = 0.02 * local.normal();
  p.rel_pos = &ps.create(prefix + ".rel_pos", std::move(rel));
  p.out = make_linear(ps, prefix + ".out", cfg.dim, cfg.dim, rng);
  return p;
}

struct MaskedAttentionParams {
  LinearParams offset;     // dim -> 4 * heads
  LinearParams bin_score;  // dim -> 4 * heads (one logit per 2x2 bin per head)
  LinearParams value;      // map_dim -> dim (map may come from a wider encoder)
  LinearParams out;        // dim -> dim
};

inline MaskedAttentionParams make_masked_attention_params(ParamStore& ps,
                                                          const std::string& prefix,
                                                          const AttentionConfig& cfg, Rng& rng,
                                                          int map_dim = 0) {
  cfg.validate(prefix.c_str());
  if (cfg.grid % 2 != 0)
    throw Error(prefix + ": masked instance attention needs an even grid, got " +
                std::to_string(cfg.grid));
  if (map_dim == 0) map_dim = cfg.dim;
  MaskedAttentionParams p;
  p.offset = make_linear(ps, prefix + ".offset", cfg.dim, 4 * cfg.heads, rng, /*zero_init=*/true);
  p.bin_score = make_linear(ps, prefix + ".bin", cfg.dim, 4 * cfg.heads, rng);
  p.value = make_linear(ps, prefix + ".value", map_dim, cfg.dim, rng);
  p.out = make_linear(ps, prefix + ".out", cfg.dim, cfg.dim, rng);
  return p;
}

struct SelfAttentionParams {
  LinearParams q, k, v, out;
};

inline SelfAttentionParams make_self_attention_params(ParamStore& ps, const std::string& prefix,
                                                      const AttentionConfig& cfg, Rng& rng) {
  cfg.validate(prefix.c_str());
  SelfAttentionParams p;
  p.q = make_linear(ps, prefix + ".q", cfg.dim, cfg.dim, rng);
  // no key bias: softmax is invariant to it (it shifts every score in a row
  // by the same amount), so it would be an untrainable dead weight
  p.k = make_linear(ps, prefix + ".k", cfg.dim, cfg.dim, rng, /*zero_init=*/false, /*bias=*/false);
  p.v = make_linear(ps, prefix + ".v", cfg.dim, cfg.dim, rng);
  p.out = make_linear(ps, prefix + ".out", cfg.dim, cfg.dim, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Core grid attention shared by the box/fixed/adaptive front-ends

namespace detail {

// Attention over the grid cells: scores are dot products of the full-dim
// query with this head's relative position embeddings.
inline Var attention_scores_alpha(Tape& t, Var queries, Var head_rel_pos) {
  Var scores = matmul(queries, permute(head_rel_pos, {1, 0}));
  return softmax(scores, 1);
}

inline Var head_rel_pos_slice(Tape& t, const BoxAttentionParams& p, const AttentionConfig& cfg,
                              int head) {
  Var rel = t.param(*p.rel_pos);  // [n, g2, d]
  Var h = slice(rel, 0, head, 1);
  return reshape(h, {cfg.grid * cfg.grid, cfg.dim});
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Box attention: each query refines one reference window and attends to a
// g x g grid of bilinear samples from it.

inline Var box_attention(Tape& t, Var map, Var queries, const Tensor& windows,
                         const AttentionConfig& cfg, const BoxAttentionParams& p,
                         std::vector<Var>* alphas_out = nullptr) {
  cfg.validate("box_attention");
  const Tensor& qv = t.val(queries);
  const Tensor& mv = t.val(map);
  if (qv.rank() != 2 || qv.shape[1] != cfg.dim)
    throw Error("box_attention: queries must be [k," + std::to_string(cfg.dim) + "], got " +
                shape_str(qv.shape));
  if (windows.rank() != 2 || windows.shape[0] != qv.shape[0] || windows.shape[1] != 4)
    throw Error("box_attention: windows " + shape_str(windows.shape) + " do not match queries " +
                shape_str(qv.shape));
  const int k = qv.shape[0];
  const int dh = cfg.head_dim();
  const double min_w = 1.0 / mv.shape[1], min_h = 1.0 / mv.shape[0];

  Var value_map = apply_linear(t, reshape(map, {mv.shape[0] * mv.shape[1], cfg.dim}), p.value);
  value_map = reshape(value_map, mv.shape);
  Var raw_all = apply_linear(t, queries, p.offset);  // [k, 4n]

  std::vector<Var> heads;
  heads.reserve(static_cast<size_t>(cfg.heads));
  for (int i = 0; i < cfg.heads; ++i) {
    Var raw = slice(raw_all, 1, 4 * i, 4);
    Var refined = refine_windows(t, raw, windows, 1.0, min_w, min_h);
    Var head_map = slice(value_map, 2, i * dh, dh);
    Var grid_feats = sample_grid(t, head_map, refined, cfg.grid);
    Var rel = detail::head_rel_pos_slice(t, p, cfg, i);
    Var alpha = detail::attention_scores_alpha(t, queries, rel);
    if (alphas_out) alphas_out->push_back(alpha);
    Var out = matmul(reshape(alpha, {k, 1, cfg.grid * cfg.grid}), grid_feats);
    heads.push_back(reshape(out, {k, dh}));
  }
  return apply_linear(t, concat(heads, 1), p.out);
}

// Fixed-scale variant: queries carry no windows of their own; head i uses a
// square anchor of scale (i mod m) centered on the query position.
inline Var fixed_scale_attention(Tape& t, Var map, Var queries, const Tensor& positions,
                                 const AnchorSet& anchors, const AttentionConfig& cfg,
                                 const BoxAttentionParams& p,
                                 std::vector<Var>* alphas_out = nullptr) {
  cfg.validate("fixed_scale_attention");
  const Tensor& qv = t.val(queries);
  if (positions.rank() != 2 || positions.shape[0] != qv.shape[0] || positions.shape[1] != 2)
    throw Error("fixed_scale_attention: positions " + shape_str(positions.shape) +
                " do not match queries " + shape_str(qv.shape));
  if (anchors.count != cfg.scale_count)
    throw Error("fixed_scale_attention: anchor count " + std::to_string(anchors.count) +
                " != scale_count " + std::to_string(cfg.scale_count));
  auto assign = head_scale_assignment(cfg.heads, cfg.scale_count);
  const Tensor& mv = t.val(map);
  const int k = qv.shape[0];
  const int dh = cfg.head_dim();
  const double min_w = 1.0 / mv.shape[1], min_h = 1.0 / mv.shape[0];

  Var value_map = apply_linear(t, reshape(map, {mv.shape[0] * mv.shape[1], cfg.dim}), p.value);
  value_map = reshape(value_map, mv.shape);
  Var raw_all = apply_linear(t, queries, p.offset);

  std::vector<Var> heads;
  for (int i = 0; i < cfg.heads; ++i) {
    double a = anchors.normalized(assign[static_cast<size_t>(i)]);
    Tensor windows({k, 4});
    for (int q = 0; q < k; ++q) {
      windows.at2(q, 0) = positions.at2(q, 0);
      windows.at2(q, 1) = positions.at2(q, 1);
      windows.at2(q, 2) = a;
      windows.at2(q, 3) = a;
    }
    Var raw = slice(raw_all, 1, 4 * i, 4);
    Var refined = refine_windows(t, raw, windows, 1.0, min_w, min_h);
    Var head_map = slice(value_map, 2, i * dh, dh);
    Var grid_feats = sample_grid(t, head_map, refined, cfg.grid);
    Var rel = detail::head_rel_pos_slice(t, p, cfg, i);
    Var alpha = detail::attention_scores_alpha(t, queries, rel);
    if (alphas_out) alphas_out->push_back(alpha);
    Var out = matmul(reshape(alpha, {k, 1, cfg.grid * cfg.grid}), grid_feats);
    heads.push_back(reshape(out, {k, dh}));
  }
  return apply_linear(t, concat(heads, 1), p.out);
}

struct AdaptiveScaleResult {
  Var output;         // [k, dim]
  Var scale_weights;  // [k, heads, scales]
};

// Adaptive variant: every head refines a window at each anchor scale (offsets
// tempered by 2^j / lambda), attends over each, and blends the per-scale
// features with softmax weights predicted from the query.
inline AdaptiveScaleResult adaptive_scale_attention(Tape& t, Var map, Var queries,
                                                    const Tensor& positions,
                                                    const AnchorSet& anchors,
                                                    const AttentionConfig& cfg,
                                                    const BoxAttentionParams& p,
                                                    std::vector<Var>* alphas_out = nullptr) {
  cfg.validate("adaptive_scale_attention");
  const Tensor& qv = t.val(queries);
  if (positions.rank() != 2 || positions.shape[0] != qv.shape[0] || positions.shape[1] != 2)
    throw Error("adaptive_scale_attention: positions " + shape_str(positions.shape) +
                " do not match queries " + shape_str(qv.shape));
  if (anchors.count != cfg.scale_count)
    throw Error("adaptive_scale_attention: anchor count " + std::to_string(anchors.count) +
                " != scale_count " + std::to_string(cfg.scale_count));
  const Tensor& mv = t.val(map);
  const int k = qv.shape[0];
  const int m = cfg.scale_count;
  const int dh = cfg.head_dim();
  const double min_w = 1.0 / mv.shape[1], min_h = 1.0 / mv.shape[0];

  Var value_map = apply_linear(t, reshape(map, {mv.shape[0] * mv.shape[1], cfg.dim}), p.value);
  value_map = reshape(value_map, mv.shape);
  Var raw_all = apply_linear(t, queries, p.offset);        // [k, 4nm] or [k, 4n]
  Var sw_all = apply_linear(t, queries, p.scale_logits);   // [k, n*m]

  std::vector<Var> heads;
  std::vector<Var> weights_per_head;
  for (int i = 0; i < cfg.heads; ++i) {
    Var head_map = slice(value_map, 2, i * dh, dh);
    Var rel = detail::head_rel_pos_slice(t, p, cfg, i);
    Var alpha = detail::attention_scores_alpha(t, queries, rel);  // [k, g2]
    if (alphas_out) alphas_out->push_back(alpha);
    Var alpha_b = reshape(alpha, {k, 1, cfg.grid * cfg.grid});

    std::vector<Var> per_scale;
    for (int j = 0; j < m; ++j) {
      Var raw = cfg.per_scale_offsets ? slice(raw_all, 1, 4 * (i * m + j), 4)
                                      : slice(raw_all, 1, 4 * i, 4);
      double a = anchors.normalized(j);
      Tensor windows({k, 4});
      for (int q = 0; q < k; ++q) {
        windows.at2(q, 0) = positions.at2(q, 0);
        windows.at2(q, 1) = positions.at2(q, 1);
        windows.at2(q, 2) = a;
        windows.at2(q, 3) = a;
      }
      Var refined = refine_windows(t, raw, windows, scale_temperature(j, cfg.lambda), min_w, min_h);
      Var grid_feats = sample_grid(t, head_map, refined, cfg.grid);
      Var feat = matmul(alpha_b, grid_feats);  // [k, 1, dh]
      per_scale.push_back(feat);
    }
    Var stacked = concat(per_scale, 1);                       // [k, m, dh]
    Var sw = softmax(slice(sw_all, 1, i * m, m), 1);          // [k, m]
    Var blended = matmul(reshape(sw, {k, 1, m}), stacked);    // [k, 1, dh]
    heads.push_back(reshape(blended, {k, dh}));
    weights_per_head.push_back(reshape(sw, {k, 1, m}));
  }
  AdaptiveScaleResult res;
  res.output = apply_linear(t, concat(heads, 1), p.out);
  res.scale_weights = concat(weights_per_head, 1);  // [k, n, m]
  return res;
}

// ---------------------------------------------------------------------------
// Masked instance attention

// Bin index (2x2) of each cell of a g x g grid, row-major; quadrants of the
// window.
inline std::vector<int> grid_bin_index(int g) {
  std::vector<int> idx(static_cast<size_t>(g) * g);
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c)
      idx[static_cast<size_t>(r * g + c)] = (r >= g / 2 ? 2 : 0) + (c >= g / 2 ? 1 : 0);
  return idx;
}

constexpr double kMaskNegInf = -1e9;

// Builds the additive mask for one query's grid points against that query's
// previous mask logits ([Hm, Wm], logit > 0 means foreground). Rows where
// everything would be masked fall back to all-zero (no mask).
inline void fill_mask_row(const Tensor& prev_logits, const std::vector<double>& px,
                          const std::vector<double>& py, double* out_row) {
  const int Hm = prev_logits.shape[0], Wm = prev_logits.shape[1];
  const size_t n = px.size();
  bool any_open = false;
  for (size_t j = 0; j < n; ++j) {
    double fx = std::clamp(px[j] * Wm - 0.5, 0.0, static_cast<double>(Wm - 1));
    double fy = std::clamp(py[j] * Hm - 0.5, 0.0, static_cast<double>(Hm - 1));
    int x0 = std::min(static_cast<int>(fx), Wm - 1);
    int y0 = std::min(static_cast<int>(fy), Hm - 1);
    int x1 = std::min(x0 + 1, Wm - 1);
    int y1 = std::min(y0 + 1, Hm - 1);
    double tx = fx - x0, ty = fy - y0;
    double v = (1 - ty) * ((1 - tx) * prev_logits.at2(y0, x0) + tx * prev_logits.at2(y0, x1)) +
               ty * ((1 - tx) * prev_logits.at2(y1, x0) + tx * prev_logits.at2(y1, x1));
    out_row[j] = v > 0.0 ? 0.0 : kMaskNegInf;
    any_open |= (v > 0.0);
  }
  if (!any_open)
    for (size_t j = 0; j < n; ++j) out_row[j] = 0.0;
}

// RoI attention for instance queries: the window is split into a 2x2 grid of
// bins, a linear head scores each bin, and the score is repeated over that
// bin's (g/2)x(g/2) sample cells. Previous-layer mask logits (one [Hm,Wm] map
// per query, or nullptr on the first layer) gate background cells out.
// Thresholding those logits is a discrete choice, so `frozen_gate` can replay
// gates captured from an earlier pass (one [k, g*g] tensor per head) and
// `gate_out` collects the gates actually applied.
inline Var masked_instance_attention(Tape& t, Var map, Var queries, const Tensor& windows,
                                     const std::vector<Tensor>* prev_mask_logits,
                                     const AttentionConfig& cfg, const MaskedAttentionParams& p,
                                     std::vector<Var>* alphas_out = nullptr,
                                     const std::vector<Tensor>* frozen_gate = nullptr,
                                     std::vector<Tensor>* gate_out = nullptr) {
  cfg.validate("masked_instance_attention");
  if (cfg.grid % 2 != 0)
    throw Error("masked_instance_attention: grid must be even, got " + std::to_string(cfg.grid));
  const Tensor& qv = t.val(queries);
  const Tensor& mv = t.val(map);
  if (windows.rank() != 2 || windows.shape[0] != qv.shape[0] || windows.shape[1] != 4)
    throw Error("masked_instance_attention: windows " + shape_str(windows.shape) +
                " do not match queries " + shape_str(qv.shape));
  const int k = qv.shape[0];
  const int g = cfg.grid, g2 = g * g;
  const int dh = cfg.head_dim();
  const double min_w = 1.0 / mv.shape[1], min_h = 1.0 / mv.shape[0];
  if (prev_mask_logits && static_cast<int>(prev_mask_logits->size()) != k)
    throw Error("masked_instance_attention: need one previous mask per query");
  if (frozen_gate) {
    if (static_cast<int>(frozen_gate->size()) != cfg.heads)
      throw Error("masked_instance_attention: frozen gate needs one mask per head, got " +
                  std::to_string(frozen_gate->size()));
    for (const Tensor& m : *frozen_gate)
      if (m.rank() != 2 || m.shape[0] != k || m.shape[1] != g2)
        throw Error("masked_instance_attention: frozen gate must be [" + std::to_string(k) +
                    "," + std::to_string(g2) + "], got " + shape_str(m.shape));
  }
  if (mv.shape[2] != p.value.w->value.shape[0])
    throw Error("masked_instance_attention: map has " + std::to_string(mv.shape[2]) +
                " channels but the value projection expects " +
                std::to_string(p.value.w->value.shape[0]));

  Var value_map = apply_linear(t, reshape(map, {mv.shape[0] * mv.shape[1], mv.shape[2]}), p.value);
  value_map = reshape(value_map, {mv.shape[0], mv.shape[1], cfg.dim});
  Var raw_all = apply_linear(t, queries, p.offset);     // [k, 4n]
  Var bins_all = apply_linear(t, queries, p.bin_score); // [k, 4n]
  auto bin_of_cell = grid_bin_index(g);

  std::vector<Var> heads;
  for (int i = 0; i < cfg.heads; ++i) {
    Var raw = slice(raw_all, 1, 4 * i, 4);
    Var refined = refine_windows(t, raw, windows, 1.0, min_w, min_h);
    Var head_map = slice(value_map, 2, i * dh, dh);
    Var grid_feats = sample_grid(t, head_map, refined, g);  // [k, g2, dh]

    Var bin_scores = slice(bins_all, 1, 4 * i, 4);          // [k, 4]
    Var cell_scores = gather(bin_scores, 1, bin_of_cell);   // [k, g2]

    if (frozen_gate) {
      Tensor mask = (*frozen_gate)[static_cast<size_t>(i)];
      if (gate_out) gate_out->push_back(mask);
      cell_scores = add(cell_scores, t.constant(std::move(mask)));
    } else if (prev_mask_logits) {
      const Tensor& rw = t.val(refined);
      Tensor mask({k, g2});
      std::vector<double> px, py;
      for (int q = 0; q < k; ++q) {
        ReferenceWindow w{rw.at2(q, 0), rw.at2(q, 1), rw.at2(q, 2), rw.at2(q, 3)};
        grid_points_plain(w, g, px, py);
        fill_mask_row((*prev_mask_logits)[static_cast<size_t>(q)], px, py,
                      mask.data.data() + static_cast<size_t>(q) * g2);
      }
      if (gate_out) gate_out->push_back(mask);
      cell_scores = add(cell_scores, t.constant(std::move(mask)));
    }
    Var alpha = softmax(cell_scores, 1);
    if (alphas_out) alphas_out->push_back(alpha);
    Var out = matmul(reshape(alpha, {k, 1, g2}), grid_feats);
    heads.push_back(reshape(out, {k, dh}));
  }
  return apply_linear(t, concat(heads, 1), p.out);
}

// ---------------------------------------------------------------------------
// Dense self-attention (decoder queries talk to each other)

// pos, when valid, is added to queries and keys only; values see the raw
// content features.
inline Var self_attention(Tape& t, Var queries, Var pos, const AttentionConfig& cfg,
                          const SelfAttentionParams& p) {
  cfg.validate("self_attention");
  const Tensor& qv = t.val(queries);
  if (qv.rank() != 2 || qv.shape[1] != cfg.dim)
    throw Error("self_attention: queries must be [k," + std::to_string(cfg.dim) + "], got " +
                shape_str(qv.shape));
  const int k = qv.shape[0];
  const int dh = cfg.head_dim();
  Var qk_in = pos.valid() ? add(queries, pos) : queries;
  Var Q = apply_linear(t, qk_in, p.q);
  Var K = apply_linear(t, qk_in, p.k);
  Var V = apply_linear(t, queries, p.v);
  std::vector<Var> heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int i = 0; i < cfg.heads; ++i) {
    Var Qh = slice(Q, 1, i * dh, dh);
    Var Kh = slice(K, 1, i * dh, dh);
    Var Vh = slice(V, 1, i * dh, dh);
    Var scores = scale(matmul(Qh, permute(Kh, {1, 0})), inv_sqrt);
    Var alpha = softmax(scores, 1);
    heads.push_back(matmul(alpha, Vh));
  }
  return apply_linear(t, concat(heads, 1), p.out);
}

}  // namespace simplr
