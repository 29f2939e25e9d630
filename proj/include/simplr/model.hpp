#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "simplr/attention.hpp"
#include "simplr/container.hpp"

// The full detector: a small ViT backbone over image patches, a single
// convolution projection into the head dimension, an encoder whose layers run
// window-based attention with every texel as a query, class-agnostic object
// proposals, and a decoder that alternates query self-attention with masked
// instance attention into the encoder map. One prediction set (class logits,
// boxes, mask logits) is emitted per decoder layer so every layer can be
// supervised.

namespace simplr {

// ---------------------------------------------------------------------------
// Configuration

struct ModelConfig {
  // image and backbone
  int image_size = 64;
  int patch = 8;
  int backbone_dim = 64;
  int backbone_heads = 4;
  int backbone_depth = 4;
  int backbone_window = 4;             // side of a windowed-attention tile, in tokens
  std::vector<int> global_blocks = {2, 4};  // 1-based block indices with full attention
  bool backbone_posenc = true;

  // detection head
  int encoder_dim = 32;
  int decoder_dim = 32;
  int heads = 4;
  int decoder_heads = 0;               // 0 reuses the encoder head count
  int encoder_scale_den = 8;           // encoder map at 1/encoder_scale_den of the image
  int queries = 25;
  int encoder_layers = 2;
  int decoder_layers = 2;
  std::string mechanism = "adaptive";  // box | fixed | adaptive
  int scale_count = 4;
  double anchor_base = 4.0;            // smallest anchor side, in image pixels
  double lambda = 0.0;                 // temperature denominator; 0 picks 2^(m-1)
  bool per_scale_offsets = true;
  int encoder_grid = 2;
  int decoder_grid = 14;
  int ffn_ratio = 4;
  int num_classes = 3;                 // real classes; a no-object slot is appended
  bool iterative_windows = true;       // refine decoder windows from each box prediction

  // panoptic additions
  bool panoptic = false;
  int pixel_scale_den = 4;             // mask features at 1/4 of the image
  int pixel_layers = 1;                // attention layers stacked on the upsampled map

  int gn_groups = 8;

  int backbone_side() const { return image_size / patch; }
  int encoder_side() const { return image_size / encoder_scale_den; }
  int pixel_side() const {
    return panoptic ? image_size / pixel_scale_den : encoder_side();
  }
  int class_channels() const { return num_classes + 1; }
  int decoder_heads_or_default() const { return decoder_heads > 0 ? decoder_heads : heads; }
  double lambda_or_default() const {
    return lambda > 0.0 ? lambda : std::pow(2.0, scale_count - 1);
  }

  BoxAttentionKind kind() const {
    if (mechanism == "box") return BoxAttentionKind::kBox;
    if (mechanism == "fixed") return BoxAttentionKind::kFixedScale;
    if (mechanism == "adaptive") return BoxAttentionKind::kAdaptiveScale;
    throw Error("model: unknown attention mechanism '" + mechanism +
                "' (expected box, fixed, or adaptive)");
  }

  AttentionConfig encoder_attention() const {
    AttentionConfig a;
    a.dim = encoder_dim;
    a.heads = heads;
    a.grid = encoder_grid;
    a.scale_count = mechanism == "box" ? 1 : scale_count;
    a.lambda = lambda_or_default();
    a.per_scale_offsets = per_scale_offsets;
    return a;
  }

  AttentionConfig decoder_self_attention() const {
    AttentionConfig a;
    a.dim = decoder_dim;
    a.heads = decoder_heads_or_default();
    return a;
  }

  AttentionConfig decoder_cross_attention() const {
    AttentionConfig a;
    a.dim = decoder_dim;
    a.heads = decoder_heads_or_default();
    a.grid = decoder_grid;
    return a;
  }

  void validate() const {
    auto fail = [](const std::string& msg) { throw Error("model config: " + msg); };
    if (image_size < 1 || patch < 1 || image_size % patch != 0)
      fail("image size " + std::to_string(image_size) + " is not divisible by patch " +
           std::to_string(patch));
    if (encoder_scale_den != 4 && encoder_scale_den != 8 && encoder_scale_den != 16)
      fail("encoder feature scale must be 1/4, 1/8, or 1/16");
    if (image_size % encoder_scale_den != 0)
      fail("image size is not divisible by the encoder scale denominator");
    if (backbone_depth < 1) fail("backbone needs at least one block");
    if (backbone_dim % backbone_heads != 0) fail("backbone dim must divide into its heads");
    if (backbone_dim % 4 != 0) fail("backbone dim must be divisible by 4 for sine-cosine encoding");
    if (backbone_window < 1 || backbone_side() % backbone_window != 0)
      fail("token grid side " + std::to_string(backbone_side()) +
           " is not divisible by window " + std::to_string(backbone_window));
    for (int g : global_blocks)
      if (g < 1 || g > backbone_depth)
        fail("global block index " + std::to_string(g) + " outside 1.." +
             std::to_string(backbone_depth));
    if (encoder_dim % heads != 0 || decoder_dim % decoder_heads_or_default() != 0)
      fail("head dims must divide into the head count");
    if (encoder_dim % 4 != 0 || decoder_dim % 4 != 0)
      fail("head dims must be divisible by 4 for sine-cosine encoding");
    if (encoder_dim % gn_groups != 0)
      fail("encoder dim must be divisible by the group-norm group count");
    if (queries < 1) fail("need at least one query");
    if (queries > encoder_side() * encoder_side())
      fail("query count " + std::to_string(queries) + " exceeds the " +
           std::to_string(encoder_side() * encoder_side()) + " encoder texels");
    if (encoder_layers < 0 || decoder_layers < 1)
      fail("need a non-negative encoder depth and at least one decoder layer");
    if (scale_count < 1) fail("scale count must be positive");
    if (mechanism != "box" && heads % scale_count != 0)
      fail("head count must be a multiple of the scale count");
    if (anchor_base <= 0.0) fail("anchor base must be positive");
    if (encoder_grid < 1 || decoder_grid < 2 || decoder_grid % 2 != 0)
      fail("encoder grid must be >= 1 and decoder grid even and >= 2");
    if (ffn_ratio < 1) fail("feed-forward ratio must be positive");
    if (num_classes < 1) fail("need at least one real class");
    if (panoptic && (pixel_scale_den < 1 || image_size % pixel_scale_den != 0))
      fail("image size is not divisible by the pixel scale denominator");
    if (panoptic && pixel_layers < 0) fail("pixel head depth cannot be negative");
    kind();  // rejects unknown mechanism strings
  }
};

// Full-scale preset. Constructible for completeness; all tests and the
// training loop run the small default above. The windowed blocks use 16-token
// tiles so the 64-token side divides evenly.
inline ModelConfig base_model_config() {
  ModelConfig c;
  c.image_size = 1024;
  c.patch = 16;
  c.backbone_dim = 768;
  c.backbone_heads = 12;
  c.backbone_depth = 12;
  c.backbone_window = 16;
  c.global_blocks = {3, 6, 9, 12};
  c.encoder_dim = 384;
  c.decoder_dim = 256;
  c.heads = 12;
  c.decoder_heads = 8;  // 256 does not split across 12 heads; keep 32 dims per head
  c.encoder_scale_den = 8;
  c.queries = 300;
  c.encoder_layers = 6;
  c.decoder_layers = 6;
  c.scale_count = 4;
  c.anchor_base = 32.0;
  c.num_classes = 80;
  return c;
}

// ---------------------------------------------------------------------------
// Small parameter bundles shared by every stage

struct LayerNormParams {
  Parameter* gain = nullptr;
  Parameter* shift = nullptr;
};

inline LayerNormParams make_layer_norm(ParamStore& ps, const std::string& prefix, int dim) {
  LayerNormParams p;
  p.gain = &ps.create(prefix + ".gain", Tensor::full({dim}, 1.0));
  p.shift = &ps.create(prefix + ".shift", Tensor({dim}));
  return p;
}

inline Var apply_layer_norm(Tape& t, Var x, const LayerNormParams& p) {
  return layer_norm(x, t.param(*p.gain), t.param(*p.shift));
}

struct MlpParams {
  std::vector<LinearParams> layers;
};

inline MlpParams make_mlp(ParamStore& ps, const std::string& prefix, int in, int hidden, int out,
                          int depth, Rng& rng, bool zero_last = false) {
  if (depth < 1) throw Error(prefix + ": mlp needs at least one layer");
  MlpParams p;
  int d = in;
  for (int i = 0; i < depth; ++i) {
    const int d_out = i + 1 == depth ? out : hidden;
    p.layers.push_back(make_linear(ps, prefix + "." + std::to_string(i), d, d_out, rng,
                                   zero_last && i + 1 == depth));
    d = d_out;
  }
  return p;
}

inline Var apply_mlp(Tape& t, Var x, const MlpParams& p) {
  for (size_t i = 0; i < p.layers.size(); ++i) {
    x = apply_linear(t, x, p.layers[i]);
    if (i + 1 < p.layers.size()) x = relu(x);
  }
  return x;
}

inline Parameter& make_conv_weight(ParamStore& ps, const std::string& name, int kh, int kw,
                                   int ci, int co, Rng& rng) {
  Tensor w({kh, kw, ci, co});
  const double limit = std::sqrt(6.0 / (kh * kw * ci + kh * kw * co));
  Rng local = rng.split(name);
  for (double& v : w.data) v = local.uniform(-limit, limit);
  return ps.create(name, std::move(w));
}

// Bias that starts classification logits at a rare-positive prior so focal
// losses are not swamped by easy negatives in the first steps.
inline double rare_class_bias() { return -std::log((1.0 - 0.01) / 0.01); }

inline double inv_sigmoid_value(double p) {
  p = std::min(1.0 - 1e-6, std::max(1e-6, p));
  return std::log(p / (1.0 - p));
}

// ---------------------------------------------------------------------------
// Positional encoding

// Row-major texel centers of an h-by-w grid, normalized to [0,1].
inline void texel_centers(int h, int w, std::vector<double>& xs, std::vector<double>& ys) {
  xs.clear();
  ys.clear();
  xs.reserve(static_cast<size_t>(h) * w);
  ys.reserve(static_cast<size_t>(h) * w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      xs.push_back((c + 0.5) / w);
      ys.push_back((r + 0.5) / h);
    }
}

// Fixed sine-cosine features of normalized (x, y) positions: half the
// channels encode x, half encode y, interleaving sin and cos over a geometric
// frequency ladder.
inline Tensor sincos_embed(const std::vector<double>& xs, const std::vector<double>& ys,
                           int dim) {
  if (xs.size() != ys.size())
    throw Error("sincos_embed: coordinate lists differ in length");
  if (dim % 4 != 0)
    throw Error("sincos_embed: dim must be divisible by 4, got " + std::to_string(dim));
  const int n = static_cast<int>(xs.size());
  const int half = dim / 2;
  const double two_pi = 2.0 * std::acos(-1.0);
  Tensor out({n, dim});
  for (int i = 0; i < n; ++i)
    for (int f = 0; f < half / 2; ++f) {
      const double inv = 1.0 / std::pow(10000.0, 2.0 * f / half);
      out.at2(i, 2 * f) = std::sin(two_pi * xs[static_cast<size_t>(i)] * inv);
      out.at2(i, 2 * f + 1) = std::cos(two_pi * xs[static_cast<size_t>(i)] * inv);
      out.at2(i, half + 2 * f) = std::sin(two_pi * ys[static_cast<size_t>(i)] * inv);
      out.at2(i, half + 2 * f + 1) = std::cos(two_pi * ys[static_cast<size_t>(i)] * inv);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Backbone: patchify + transformer blocks, windowed except where configured

struct BackboneBlockParams {
  LayerNormParams ln1;
  SelfAttentionParams attn;
  LayerNormParams ln2;
  LinearParams ffn1, ffn2;
  bool global = false;
};

struct BackboneParams {
  Parameter* patch_w = nullptr;
  Parameter* patch_b = nullptr;
  std::vector<BackboneBlockParams> blocks;
  LayerNormParams final_ln;
};

inline BackboneParams make_backbone(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
  BackboneParams p;
  p.patch_w = &make_conv_weight(ps, "backbone.patch.w", cfg.patch, cfg.patch, 3,
                                cfg.backbone_dim, rng);
  p.patch_b = &ps.create("backbone.patch.b", Tensor({cfg.backbone_dim}));
  AttentionConfig acfg;
  acfg.dim = cfg.backbone_dim;
  acfg.heads = cfg.backbone_heads;
  for (int i = 0; i < cfg.backbone_depth; ++i) {
    const std::string pre = "backbone.b" + std::to_string(i);
    BackboneBlockParams b;
    b.ln1 = make_layer_norm(ps, pre + ".ln1", cfg.backbone_dim);
    b.attn = make_self_attention_params(ps, pre + ".attn", acfg, rng);
    b.ln2 = make_layer_norm(ps, pre + ".ln2", cfg.backbone_dim);
    b.ffn1 = make_linear(ps, pre + ".ffn1", cfg.backbone_dim, cfg.ffn_ratio * cfg.backbone_dim,
                         rng);
    b.ffn2 = make_linear(ps, pre + ".ffn2", cfg.ffn_ratio * cfg.backbone_dim, cfg.backbone_dim,
                         rng);
    b.global = std::find(cfg.global_blocks.begin(), cfg.global_blocks.end(), i + 1) !=
               cfg.global_blocks.end();
    p.blocks.push_back(b);
  }
  p.final_ln = make_layer_norm(ps, "backbone.ln", cfg.backbone_dim);
  return p;
}

// Token order that groups each win-by-win tile contiguously, window-major.
inline std::vector<int> window_permutation(int h, int w, int win) {
  std::vector<int> perm;
  perm.reserve(static_cast<size_t>(h) * w);
  for (int wr = 0; wr < h / win; ++wr)
    for (int wc = 0; wc < w / win; ++wc)
      for (int r = 0; r < win; ++r)
        for (int c = 0; c < win; ++c) perm.push_back((wr * win + r) * w + wc * win + c);
  return perm;
}

inline Var backbone_forward(Tape& t, Var image, const ModelConfig& cfg,
                            const BackboneParams& p) {
  const Tensor& iv = t.val(image);
  if (iv.rank() != 3 || iv.shape[2] != 3)
    throw Error("backbone_forward: image must be [H,W,3], got " + shape_str(iv.shape));
  if (iv.shape[0] % cfg.patch != 0 || iv.shape[1] % cfg.patch != 0)
    throw Error("backbone_forward: image " + shape_str(iv.shape) +
                " is not divisible by patch size " + std::to_string(cfg.patch));
  const int hb = iv.shape[0] / cfg.patch, wb = iv.shape[1] / cfg.patch;
  const int tokens = hb * wb;

  Var x = conv2d(image, t.param(*p.patch_w), t.param(*p.patch_b), cfg.patch);
  x = reshape(x, {tokens, cfg.backbone_dim});
  if (cfg.backbone_posenc) {
    std::vector<double> xs, ys;
    texel_centers(hb, wb, xs, ys);
    x = add(x, t.constant(sincos_embed(xs, ys, cfg.backbone_dim)));
  }

  AttentionConfig acfg;
  acfg.dim = cfg.backbone_dim;
  acfg.heads = cfg.backbone_heads;
  const int win = cfg.backbone_window;
  for (const BackboneBlockParams& b : p.blocks) {
    Var h = apply_layer_norm(t, x, b.ln1);
    Var a;
    if (b.global || win * win == tokens) {
      a = self_attention(t, h, Var{}, acfg, b.attn);
    } else {
      if (hb % win != 0 || wb % win != 0)
        throw Error("backbone_forward: token grid " + std::to_string(hb) + "x" +
                    std::to_string(wb) + " is not divisible by window " + std::to_string(win));
      std::vector<int> perm = window_permutation(hb, wb, win);
      Var hp = gather(h, 0, perm);
      const int ws = win * win;
      std::vector<Var> outs;
      for (int w0 = 0; w0 < tokens; w0 += ws)
        outs.push_back(self_attention(t, slice(hp, 0, w0, ws), Var{}, acfg, b.attn));
      std::vector<int> inv(perm.size());
      for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
      a = gather(concat(outs, 0), 0, inv);
    }
    x = add(x, a);
    Var h2 = apply_layer_norm(t, x, b.ln2);
    x = add(x, apply_linear(t, gelu(apply_linear(t, h2, b.ffn1)), b.ffn2));
  }
  x = apply_layer_norm(t, x, p.final_ln);
  return reshape(x, {hb, wb, cfg.backbone_dim});
}

// ---------------------------------------------------------------------------
// Projection from backbone scale/dim into the head's single-scale map

struct ProjectionStage {
  enum Kind { kConv1x1, kDeconv, kStride2 } kind = kConv1x1;
  Parameter* w = nullptr;
  Parameter* b = nullptr;
  LayerNormParams gn;  // group-norm gain and shift
};

struct ProjectionParams {
  std::vector<ProjectionStage> stages;
};

inline ProjectionParams make_projection(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
  const int bs = cfg.backbone_side(), es = cfg.encoder_side();
  ProjectionParams p;
  int d_in = cfg.backbone_dim;
  int idx = 0;
  auto stage = [&](ProjectionStage::Kind kind, int k) {
    const std::string pre = "project.s" + std::to_string(idx++);
    ProjectionStage s;
    s.kind = kind;
    s.w = &make_conv_weight(ps, pre + ".w", k, k, d_in, cfg.encoder_dim, rng);
    s.b = &ps.create(pre + ".b", Tensor({cfg.encoder_dim}));
    s.gn = make_layer_norm(ps, pre + ".gn", cfg.encoder_dim);
    p.stages.push_back(s);
    d_in = cfg.encoder_dim;
  };
  if (es == bs) {
    stage(ProjectionStage::kConv1x1, 1);
  } else if (es == 2 * bs) {
    stage(ProjectionStage::kDeconv, 2);
  } else if (es == 4 * bs) {
    stage(ProjectionStage::kDeconv, 2);
    stage(ProjectionStage::kDeconv, 2);
  } else if (2 * es == bs) {
    stage(ProjectionStage::kStride2, 2);
  } else {
    throw Error("project_features: no projection from a " + std::to_string(bs) +
                "-texel backbone side to a " + std::to_string(es) + "-texel head side");
  }
  return p;
}

inline Var project_features(Tape& t, Var map, const ModelConfig& cfg,
                            const ProjectionParams& p) {
  Var x = map;
  for (const ProjectionStage& s : p.stages) {
    switch (s.kind) {
      case ProjectionStage::kConv1x1:
        x = conv2d(x, t.param(*s.w), t.param(*s.b), 1);
        break;
      case ProjectionStage::kDeconv:
        x = deconv2x(x, t.param(*s.w), t.param(*s.b));
        break;
      case ProjectionStage::kStride2:
        x = conv2d(x, t.param(*s.w), t.param(*s.b), 2);
        break;
    }
    x = group_norm(x, cfg.gn_groups, t.param(*s.gn.gain), t.param(*s.gn.shift));
  }
  return x;
}

// ---------------------------------------------------------------------------
// Encoder: every texel is a query at its own position

struct EncoderLayerParams {
  BoxAttentionParams attn;
  LayerNormParams ln1;
  LinearParams ffn1, ffn2;
  LayerNormParams ln2;
};

inline std::vector<EncoderLayerParams> make_encoder_layers(ParamStore& ps,
                                                           const std::string& prefix,
                                                           int count, const ModelConfig& cfg,
                                                           Rng& rng) {
  const AttentionConfig acfg = cfg.encoder_attention();
  std::vector<EncoderLayerParams> out;
  for (int i = 0; i < count; ++i) {
    const std::string pre = prefix + ".l" + std::to_string(i);
    EncoderLayerParams l;
    l.attn = make_box_attention_params(ps, pre + ".attn", acfg, cfg.kind(), rng);
    l.ln1 = make_layer_norm(ps, pre + ".ln1", cfg.encoder_dim);
    l.ffn1 = make_linear(ps, pre + ".ffn1", cfg.encoder_dim, cfg.ffn_ratio * cfg.encoder_dim,
                         rng);
    l.ffn2 = make_linear(ps, pre + ".ffn2", cfg.ffn_ratio * cfg.encoder_dim, cfg.encoder_dim,
                         rng);
    l.ln2 = make_layer_norm(ps, pre + ".ln2", cfg.encoder_dim);
    out.push_back(l);
  }
  return out;
}

struct EncoderResult {
  Var map;            // same shape as the input
  Var scale_weights;  // [texels, heads, scales] from the last layer; adaptive only
};

inline EncoderResult encoder_stack(Tape& t, Var map, const ModelConfig& cfg,
                                   const std::vector<EncoderLayerParams>& layers) {
  const Tensor& mv = t.val(map);
  if (mv.rank() != 3 || mv.shape[2] != cfg.encoder_dim)
    throw Error("encoder_stack: map must be [H,W," + std::to_string(cfg.encoder_dim) +
                "], got " + shape_str(mv.shape));
  const int he = mv.shape[0], we = mv.shape[1], d = mv.shape[2];
  const int n = he * we;

  std::vector<double> xs, ys;
  texel_centers(he, we, xs, ys);
  Tensor positions({n, 2});
  for (int i = 0; i < n; ++i) {
    positions.at2(i, 0) = xs[static_cast<size_t>(i)];
    positions.at2(i, 1) = ys[static_cast<size_t>(i)];
  }
  const Tensor pos_embed = sincos_embed(xs, ys, d);
  const AnchorSet anchors(cfg.anchor_base, cfg.scale_count, cfg.image_size);
  // the plain box mechanism has no per-head scales; give every texel the
  // middle rung of the anchor ladder as its fixed reference window
  const double mid = anchors.normalized(cfg.scale_count / 2);
  Tensor windows({n, 4});
  for (int i = 0; i < n; ++i) {
    windows.at2(i, 0) = xs[static_cast<size_t>(i)];
    windows.at2(i, 1) = ys[static_cast<size_t>(i)];
    windows.at2(i, 2) = mid;
    windows.at2(i, 3) = mid;
  }

  const AttentionConfig acfg = cfg.encoder_attention();
  const BoxAttentionKind kind = cfg.kind();
  EncoderResult res;
  Var x = reshape(map, {n, d});
  for (size_t li = 0; li < layers.size(); ++li) {
    const EncoderLayerParams& L = layers[li];
    Var map3 = reshape(x, {he, we, d});
    Var q_in = add(x, t.constant(pos_embed));
    Var a;
    if (kind == BoxAttentionKind::kBox) {
      a = box_attention(t, map3, q_in, windows, acfg, L.attn);
    } else if (kind == BoxAttentionKind::kFixedScale) {
      a = fixed_scale_attention(t, map3, q_in, positions, anchors, acfg, L.attn);
    } else {
      AdaptiveScaleResult r =
          adaptive_scale_attention(t, map3, q_in, positions, anchors, acfg, L.attn);
      a = r.output;
      if (li + 1 == layers.size()) res.scale_weights = r.scale_weights;
    }
    x = apply_layer_norm(t, add(x, a), L.ln1);
    Var f = apply_linear(t, relu(apply_linear(t, x, L.ffn1)), L.ffn2);
    x = apply_layer_norm(t, add(x, f), L.ln2);
  }
  res.map = reshape(x, {he, we, d});
  return res;
}

// ---------------------------------------------------------------------------
// Two-stage proposals: objectness + box regression per texel, top-k as queries

struct ProposalParams {
  LinearParams objectness;  // encoder_dim -> 1
  LinearParams delta;       // encoder_dim -> 4, zero at init so boxes start at anchors
  LinearParams query_proj;  // encoder_dim -> decoder_dim
};

inline ProposalParams make_proposal(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
  ProposalParams p;
  p.objectness = make_linear(ps, "proposal.obj", cfg.encoder_dim, 1, rng);
  p.objectness.b->value.data[0] = rare_class_bias();
  p.delta = make_linear(ps, "proposal.delta", cfg.encoder_dim, 4, rng, /*zero_init=*/true);
  p.query_proj = make_linear(ps, "proposal.query", cfg.encoder_dim, cfg.decoder_dim, rng);
  return p;
}

// Indices of the k largest scores, descending, row-major index breaking ties.
inline std::vector<int> top_k_indices(const Tensor& scores, int k) {
  std::vector<int> idx(static_cast<size_t>(scores.numel()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return scores.data[static_cast<size_t>(a)] > scores.data[static_cast<size_t>(b)];
  });
  idx.resize(static_cast<size_t>(k));
  return idx;
}

struct ProposalResult {
  Var objectness;             // [texels] logits
  Var boxes;                  // [texels, 4] normalized cx,cy,w,h
  std::vector<int> selected;  // top-k texel indices, best first
  Tensor windows;             // [k, 4] detached copies of the selected boxes
  Var queries;                // [k, decoder_dim]
};

// Pins the detector's discrete choices to externally supplied values: the
// proposal selection, the reference windows, and the decoder's mask gates.
// All of these are plain data by design (no gradient flows through them), so
// finite-difference checks of the whole detector must hold them fixed while
// probing; capturing one forward's choices and replaying them does exactly
// that. Leaving `gates` empty keeps the gates live.
struct DetectorOverride {
  std::vector<int> selected;
  Tensor windows;
  std::vector<std::vector<Tensor>> gates;  // [layer][head], each [k, grid^2]
};

inline ProposalResult propose_objects(Tape& t, Var enc_map, int k, const ModelConfig& cfg,
                                      const ProposalParams& p,
                                      const DetectorOverride* frozen = nullptr) {
  const Tensor& mv = t.val(enc_map);
  if (mv.rank() != 3)
    throw Error("propose_objects: map must be rank 3, got " + shape_str(mv.shape));
  const int he = mv.shape[0], we = mv.shape[1], d = mv.shape[2];
  const int n = he * we;
  if (k < 1 || k > n)
    throw Error("propose_objects: need 1 <= k <= " + std::to_string(n) + " proposals, got " +
                std::to_string(k));

  Var x = reshape(enc_map, {n, d});
  ProposalResult r;
  r.objectness = reshape(apply_linear(t, x, p.objectness), {n});

  std::vector<double> xs, ys;
  texel_centers(he, we, xs, ys);
  const AnchorSet anchors(cfg.anchor_base, cfg.scale_count, cfg.image_size);
  const double mid = anchors.normalized(cfg.scale_count / 2);
  Tensor base({n, 4});
  for (int i = 0; i < n; ++i) {
    base.at2(i, 0) = inv_sigmoid_value(xs[static_cast<size_t>(i)]);
    base.at2(i, 1) = inv_sigmoid_value(ys[static_cast<size_t>(i)]);
    base.at2(i, 2) = inv_sigmoid_value(mid);
    base.at2(i, 3) = inv_sigmoid_value(mid);
  }
  r.boxes = sigmoid(add(apply_linear(t, x, p.delta), t.constant(base)));

  if (frozen) {
    if (static_cast<int>(frozen->selected.size()) != k || frozen->windows.rank() != 2 ||
        frozen->windows.shape[0] != k || frozen->windows.shape[1] != 4)
      throw Error("propose_objects: frozen selection does not describe " + std::to_string(k) +
                  " proposals");
    r.selected = frozen->selected;
    r.windows = frozen->windows;
  } else {
    r.selected = top_k_indices(t.val(r.objectness), k);
    const Tensor& bv = t.val(r.boxes);
    r.windows = Tensor({k, 4});
    for (int i = 0; i < k; ++i)
      for (int c = 0; c < 4; ++c) r.windows.at2(i, c) = bv.at2(r.selected[i], c);
  }
  r.queries = apply_linear(t, gather(x, 0, r.selected), p.query_proj);
  return r;
}

// ---------------------------------------------------------------------------
// Mask prediction: query embedding dotted with every pixel feature

inline Var predict_masks(Tape& t, Var queries, Var pixel_map, const MlpParams& embed) {
  const Tensor& pv = t.val(pixel_map);
  if (pv.rank() != 3)
    throw Error("predict_masks: pixel features must be rank 3, got " + shape_str(pv.shape));
  const int h = pv.shape[0], w = pv.shape[1], dp = pv.shape[2];
  Var e = apply_mlp(t, queries, embed);
  const Tensor& ev = t.val(e);
  if (ev.shape[1] != dp)
    throw Error("predict_masks: query embedding dim " + std::to_string(ev.shape[1]) +
                " does not match pixel feature dim " + std::to_string(dp));
  Var flat = reshape(pixel_map, {h * w, dp});
  Var logits = matmul(e, permute(flat, {1, 0}));
  return reshape(logits, {ev.shape[0], h, w});
}

// ---------------------------------------------------------------------------
// Decoder: self-attention among queries, masked attention into the map, FFN;
// box/class/mask heads shared across layers

struct DecoderLayerParams {
  SelfAttentionParams self;
  LayerNormParams ln1;
  MaskedAttentionParams cross;
  LayerNormParams ln2;
  LinearParams ffn1, ffn2;
  LayerNormParams ln3;
};

struct HeadParams {
  LinearParams cls;     // decoder_dim -> classes + 1 (last slot = no object)
  MlpParams box_delta;  // decoder_dim -> ... -> 4
  MlpParams mask_embed; // decoder_dim -> ... -> pixel feature dim
};

inline std::vector<DecoderLayerParams> make_decoder_layers(ParamStore& ps,
                                                           const ModelConfig& cfg, Rng& rng) {
  const AttentionConfig self_cfg = cfg.decoder_self_attention();
  const AttentionConfig cross_cfg = cfg.decoder_cross_attention();
  std::vector<DecoderLayerParams> out;
  for (int i = 0; i < cfg.decoder_layers; ++i) {
    const std::string pre = "decoder.l" + std::to_string(i);
    DecoderLayerParams l;
    l.self = make_self_attention_params(ps, pre + ".self", self_cfg, rng);
    l.ln1 = make_layer_norm(ps, pre + ".ln1", cfg.decoder_dim);
    l.cross = make_masked_attention_params(ps, pre + ".cross", cross_cfg, rng,
                                           /*map_dim=*/cfg.encoder_dim);
    l.ln2 = make_layer_norm(ps, pre + ".ln2", cfg.decoder_dim);
    l.ffn1 = make_linear(ps, pre + ".ffn1", cfg.decoder_dim, cfg.ffn_ratio * cfg.decoder_dim,
                         rng);
    l.ffn2 = make_linear(ps, pre + ".ffn2", cfg.ffn_ratio * cfg.decoder_dim, cfg.decoder_dim,
                         rng);
    l.ln3 = make_layer_norm(ps, pre + ".ln3", cfg.decoder_dim);
    out.push_back(l);
  }
  return out;
}

inline HeadParams make_heads(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
  HeadParams h;
  h.cls = make_linear(ps, "heads.cls", cfg.decoder_dim, cfg.class_channels(), rng);
  for (double& v : h.cls.b->value.data) v = rare_class_bias();
  h.box_delta = make_mlp(ps, "heads.box", cfg.decoder_dim, cfg.decoder_dim, 4, 3, rng,
                         /*zero_last=*/true);
  h.mask_embed = make_mlp(ps, "heads.mask", cfg.decoder_dim, cfg.decoder_dim, cfg.encoder_dim,
                          3, rng);
  return h;
}

struct LayerPrediction {
  Var cls;          // [k, classes + 1]
  Var boxes;        // [k, 4]
  Var mask_logits;  // [k, Hp, Wp]
  Tensor windows;   // the reference windows this layer attended with
};

struct DetectionOutput {
  std::vector<LayerPrediction> layers;
  // the additive {0,-1e9} masks each layer's cross attention applied, per
  // head ([k, grid^2]); empty for the first layer, which has no previous mask
  std::vector<std::vector<Tensor>> gates;
};

inline DetectionOutput decoder_forward(Tape& t, Var queries, const Tensor& initial_windows,
                                       Var enc_map, Var pixel_map, const ModelConfig& cfg,
                                       const std::vector<DecoderLayerParams>& layers,
                                       const HeadParams& heads,
                                       const std::vector<std::vector<Tensor>>* frozen_gates =
                                           nullptr) {
  const Tensor& qv = t.val(queries);
  if (qv.rank() != 2 || qv.shape[1] != cfg.decoder_dim)
    throw Error("decoder_forward: queries must be [k," + std::to_string(cfg.decoder_dim) +
                "], got " + shape_str(qv.shape));
  const int k = qv.shape[0];
  if (initial_windows.rank() != 2 || initial_windows.shape[0] != k ||
      initial_windows.shape[1] != 4)
    throw Error("decoder_forward: windows " + shape_str(initial_windows.shape) +
                " do not match " + std::to_string(k) + " queries");
  if (frozen_gates && frozen_gates->size() != layers.size())
    throw Error("decoder_forward: " + std::to_string(frozen_gates->size()) +
                " frozen gate sets for " + std::to_string(layers.size()) + " layers");

  const AttentionConfig self_cfg = cfg.decoder_self_attention();
  const AttentionConfig cross_cfg = cfg.decoder_cross_attention();
  Tensor windows = initial_windows;
  std::vector<Tensor> prev_masks;
  DetectionOutput out;
  Var x = queries;
  for (const DecoderLayerParams& L : layers) {
    std::vector<double> cx(static_cast<size_t>(k)), cy(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
      cx[static_cast<size_t>(i)] = windows.at2(i, 0);
      cy[static_cast<size_t>(i)] = windows.at2(i, 1);
    }
    Var pos = t.constant(sincos_embed(cx, cy, cfg.decoder_dim));
    x = apply_layer_norm(t, add(x, self_attention(t, x, pos, self_cfg, L.self)), L.ln1);
    const size_t li = out.layers.size();
    const std::vector<Tensor>* gate =
        frozen_gates && !(*frozen_gates)[li].empty() ? &(*frozen_gates)[li] : nullptr;
    out.gates.emplace_back();
    Var a = masked_instance_attention(t, enc_map, x, windows,
                                      prev_masks.empty() ? nullptr : &prev_masks, cross_cfg,
                                      L.cross, nullptr, gate, &out.gates.back());
    x = apply_layer_norm(t, add(x, a), L.ln2);
    Var f = apply_linear(t, relu(apply_linear(t, x, L.ffn1)), L.ffn2);
    x = apply_layer_norm(t, add(x, f), L.ln3);

    LayerPrediction pred;
    pred.windows = windows;
    pred.cls = apply_linear(t, x, heads.cls);
    Tensor base({k, 4});
    for (int i = 0; i < k; ++i)
      for (int c = 0; c < 4; ++c) base.at2(i, c) = inv_sigmoid_value(windows.at2(i, c));
    pred.boxes = sigmoid(add(apply_mlp(t, x, heads.box_delta), t.constant(base)));
    pred.mask_logits = predict_masks(t, x, pixel_map, heads.mask_embed);

    // next layer sees this layer's masks and (optionally) boxes as plain
    // values; refinement targets move without gradients flowing between layers
    const Tensor& ml = t.val(pred.mask_logits);
    const int mh = ml.shape[1], mw = ml.shape[2];
    prev_masks.assign(static_cast<size_t>(k), Tensor({mh, mw}));
    for (int q = 0; q < k; ++q)
      std::copy_n(ml.data.begin() + static_cast<size_t>(q) * mh * mw,
                  static_cast<size_t>(mh) * mw, prev_masks[static_cast<size_t>(q)].data.begin());
    if (cfg.iterative_windows) windows = t.val(pred.boxes);

    out.layers.push_back(std::move(pred));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Panoptic pixel features and final segment merge

struct PixelHeadParams {
  std::vector<EncoderLayerParams> layers;
};

inline PixelHeadParams make_pixel_head(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
  PixelHeadParams p;
  p.layers = make_encoder_layers(ps, "pixel", cfg.pixel_layers, cfg, rng);
  return p;
}

// Resamples the encoder map to the pixel grid (1/4 scale by default) and runs
// the configured attention layers on top. Zero layers leaves the plain
// upsample.
inline Var panoptic_pixel_head(Tape& t, Var enc_map, const ModelConfig& cfg,
                               const PixelHeadParams& p) {
  const Tensor& mv = t.val(enc_map);
  const int hp = cfg.image_size / cfg.pixel_scale_den;
  const int wp = hp;
  Var up = enc_map;
  if (mv.shape[0] != hp || mv.shape[1] != wp) {
    std::vector<double> xs, ys;
    texel_centers(hp, wp, xs, ys);
    Tensor pts({hp * wp, 2});
    for (int i = 0; i < hp * wp; ++i) {
      pts.at2(i, 0) = xs[static_cast<size_t>(i)];
      pts.at2(i, 1) = ys[static_cast<size_t>(i)];
    }
    up = reshape(bilinear_sample(enc_map, t.constant(pts)), {hp, wp, mv.shape[2]});
  }
  return encoder_stack(t, up, cfg, p.layers).map;
}

struct Segment {
  int query = 0;
  int class_id = 0;
  double score = 0.0;
  int area = 0;
};

struct PanopticOutput {
  Tensor segment_map;  // [Hp, Wp]; value = index into segments, -1 for void
  std::vector<Segment> segments;
};

// Resolves per-query masks into a flat segmentation. A query claims a texel
// when its mask probability clears 0.5; the claimant with the highest
// class-score * mask-probability wins (lower query index on ties). Segments
// smaller than min_area are dropped and their texels handed to the next-best
// surviving claimant, or void.
inline PanopticOutput panoptic_merge(const Tensor& cls_logits, const Tensor& mask_logits,
                                     int min_area = 16) {
  if (cls_logits.rank() != 2 || mask_logits.rank() != 3 ||
      cls_logits.shape[0] != mask_logits.shape[0])
    throw Error("panoptic_merge: expected [k,C+1] logits and [k,H,W] masks, got " +
                shape_str(cls_logits.shape) + " and " + shape_str(mask_logits.shape));
  const int k = cls_logits.shape[0];
  const int classes = cls_logits.shape[1] - 1;
  const int h = mask_logits.shape[1], w = mask_logits.shape[2];

  std::vector<int> best_class(static_cast<size_t>(k), 0);
  std::vector<double> score(static_cast<size_t>(k), 0.0);
  std::vector<char> keep(static_cast<size_t>(k), 0);
  for (int q = 0; q < k; ++q) {
    double best = cls_logits.at2(q, 0);
    int arg = 0;
    for (int c = 1; c < classes; ++c)
      if (cls_logits.at2(q, c) > best) {
        best = cls_logits.at2(q, c);
        arg = c;
      }
    best_class[static_cast<size_t>(q)] = arg;
    score[static_cast<size_t>(q)] = sigmoid_value(best);
    keep[static_cast<size_t>(q)] = best > cls_logits.at2(q, classes) ? 1 : 0;
  }

  auto claim = [&](int q, int y, int x) {
    const double prob = sigmoid_value(mask_logits.at3(q, y, x));
    return prob > 0.5 ? score[static_cast<size_t>(q)] * prob : -1.0;
  };

  std::vector<int> owner(static_cast<size_t>(h) * w, -1);
  std::vector<int> area(static_cast<size_t>(k), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double best = 0.0;
      int arg = -1;
      for (int q = 0; q < k; ++q) {
        if (!keep[static_cast<size_t>(q)]) continue;
        const double c = claim(q, y, x);
        if (c > best) {
          best = c;
          arg = q;
        }
      }
      owner[static_cast<size_t>(y) * w + x] = arg;
      if (arg >= 0) ++area[static_cast<size_t>(arg)];
    }

  std::vector<char> dropped(static_cast<size_t>(k), 0);
  for (int q = 0; q < k; ++q)
    if (area[static_cast<size_t>(q)] > 0 && area[static_cast<size_t>(q)] < min_area)
      dropped[static_cast<size_t>(q)] = 1;

  // hand texels of dropped segments to the best surviving claimant
  std::vector<int> final_area(static_cast<size_t>(k), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int& o = owner[static_cast<size_t>(y) * w + x];
      if (o >= 0 && dropped[static_cast<size_t>(o)]) {
        double best = 0.0;
        int arg = -1;
        for (int q = 0; q < k; ++q) {
          if (!keep[static_cast<size_t>(q)] || dropped[static_cast<size_t>(q)]) continue;
          const double c = claim(q, y, x);
          if (c > best) {
            best = c;
            arg = q;
          }
        }
        o = arg;
      }
      if (o >= 0) ++final_area[static_cast<size_t>(o)];
    }

  PanopticOutput out;
  out.segment_map = Tensor({h, w});
  std::vector<int> segment_of(static_cast<size_t>(k), -1);
  for (int q = 0; q < k; ++q)
    if (final_area[static_cast<size_t>(q)] > 0) {
      segment_of[static_cast<size_t>(q)] = static_cast<int>(out.segments.size());
      out.segments.push_back(Segment{q, best_class[static_cast<size_t>(q)],
                                     score[static_cast<size_t>(q)],
                                     final_area[static_cast<size_t>(q)]});
    }
  for (int i = 0; i < h * w; ++i)
    out.segment_map.data[static_cast<size_t>(i)] =
        owner[static_cast<size_t>(i)] >= 0
            ? static_cast<double>(segment_of[static_cast<size_t>(owner[static_cast<size_t>(i)])])
            : -1.0;
  return out;
}

// ---------------------------------------------------------------------------
// Whole detector

struct DetectorParams {
  BackboneParams backbone;
  ProjectionParams project;
  std::vector<EncoderLayerParams> encoder;
  ProposalParams proposal;
  std::vector<DecoderLayerParams> decoder;
  HeadParams heads;
  PixelHeadParams pixel;
};

inline DetectorParams make_detector(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  DetectorParams p;
  p.backbone = make_backbone(ps, cfg, rng);
  p.project = make_projection(ps, cfg, rng);
  p.encoder = make_encoder_layers(ps, "encoder", cfg.encoder_layers, cfg, rng);
  p.proposal = make_proposal(ps, cfg, rng);
  p.decoder = make_decoder_layers(ps, cfg, rng);
  p.heads = make_heads(ps, cfg, rng);
  if (cfg.panoptic) p.pixel = make_pixel_head(ps, cfg, rng);
  return p;
}

struct DetectorOutput {
  Var proposal_logits;        // [texels]
  Var proposal_boxes;         // [texels, 4]
  std::vector<int> selected;  // texels promoted to queries
  Tensor initial_windows;     // [k, 4]
  DetectionOutput detections;
  Var scale_weights;          // last encoder layer; invalid unless adaptive
};

inline DetectorOutput detector_forward(Tape& t, const Tensor& image, const ModelConfig& cfg,
                                       const DetectorParams& p,
                                       const DetectorOverride* frozen = nullptr) {
  if (image.rank() != 3 || image.shape[0] != cfg.image_size ||
      image.shape[1] != cfg.image_size || image.shape[2] != 3)
    throw Error("detector_forward: image must be [" + std::to_string(cfg.image_size) + "," +
                std::to_string(cfg.image_size) + ",3], got " + shape_str(image.shape));
  Var img = t.constant(image);
  Var bmap = backbone_forward(t, img, cfg, p.backbone);
  Var feat = project_features(t, bmap, cfg, p.project);
  EncoderResult enc = encoder_stack(t, feat, cfg, p.encoder);
  ProposalResult prop = propose_objects(t, enc.map, cfg.queries, cfg, p.proposal, frozen);
  Var pixel_map = cfg.panoptic ? panoptic_pixel_head(t, enc.map, cfg, p.pixel) : enc.map;

  DetectorOutput out;
  out.proposal_logits = prop.objectness;
  out.proposal_boxes = prop.boxes;
  out.selected = prop.selected;
  out.initial_windows = prop.windows;
  out.scale_weights = enc.scale_weights;
  out.detections = decoder_forward(t, prop.queries, prop.windows, enc.map, pixel_map, cfg,
                                   p.decoder, p.heads,
                                   frozen && !frozen->gates.empty() ? &frozen->gates : nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: tensor container plus a key=value sidecar describing the config

inline std::string model_config_text(const ModelConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "image_size=" << c.image_size << "\n";
  os << "patch=" << c.patch << "\n";
  os << "backbone_dim=" << c.backbone_dim << "\n";
  os << "backbone_heads=" << c.backbone_heads << "\n";
  os << "backbone_depth=" << c.backbone_depth << "\n";
  os << "backbone_window=" << c.backbone_window << "\n";
  os << "global_blocks=";
  for (size_t i = 0; i < c.global_blocks.size(); ++i)
    os << (i ? "," : "") << c.global_blocks[i];
  os << "\n";
  os << "backbone_posenc=" << (c.backbone_posenc ? 1 : 0) << "\n";
  os << "encoder_dim=" << c.encoder_dim << "\n";
  os << "decoder_dim=" << c.decoder_dim << "\n";
  os << "heads=" << c.heads << "\n";
  os << "decoder_heads=" << c.decoder_heads << "\n";
  os << "encoder_scale_den=" << c.encoder_scale_den << "\n";
  os << "queries=" << c.queries << "\n";
  os << "encoder_layers=" << c.encoder_layers << "\n";
  os << "decoder_layers=" << c.decoder_layers << "\n";
  os << "mechanism=" << c.mechanism << "\n";
  os << "scale_count=" << c.scale_count << "\n";
  os << "anchor_base=" << c.anchor_base << "\n";
  os << "lambda=" << c.lambda << "\n";
  os << "per_scale_offsets=" << (c.per_scale_offsets ? 1 : 0) << "\n";
  os << "encoder_grid=" << c.encoder_grid << "\n";
  os << "decoder_grid=" << c.decoder_grid << "\n";
  os << "ffn_ratio=" << c.ffn_ratio << "\n";
  os << "num_classes=" << c.num_classes << "\n";
  os << "iterative_windows=" << (c.iterative_windows ? 1 : 0) << "\n";
  os << "panoptic=" << (c.panoptic ? 1 : 0) << "\n";
  os << "pixel_scale_den=" << c.pixel_scale_den << "\n";
  os << "pixel_layers=" << c.pixel_layers << "\n";
  os << "gn_groups=" << c.gn_groups << "\n";
  return os.str();
}

inline ModelConfig parse_model_config(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  auto as_int = [&](const std::string& v) { return std::stoi(v); };
  auto as_bool = [&](const std::string& v) { return as_int(v) != 0; };
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const size_t a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    const size_t b = line.find_last_not_of(" \t\r");
    line = line.substr(a, b - a + 1);
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw Error("model config: line " + std::to_string(lineno) + " is not key=value: " + line);
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "image_size") c.image_size = as_int(val);
    else if (key == "patch") c.patch = as_int(val);
    else if (key == "backbone_dim") c.backbone_dim = as_int(val);
    else if (key == "backbone_heads") c.backbone_heads = as_int(val);
    else if (key == "backbone_depth") c.backbone_depth = as_int(val);
    else if (key == "backbone_window") c.backbone_window = as_int(val);
    else if (key == "global_blocks") {
      c.global_blocks.clear();
      std::istringstream vs(val);
      std::string item;
      while (std::getline(vs, item, ','))
        if (!item.empty()) c.global_blocks.push_back(as_int(item));
    } else if (key == "backbone_posenc") c.backbone_posenc = as_bool(val);
    else if (key == "encoder_dim") c.encoder_dim = as_int(val);
    else if (key == "decoder_dim") c.decoder_dim = as_int(val);
    else if (key == "heads") c.heads = as_int(val);
    else if (key == "decoder_heads") c.decoder_heads = as_int(val);
    else if (key == "encoder_scale_den") c.encoder_scale_den = as_int(val);
    else if (key == "queries") c.queries = as_int(val);
    else if (key == "encoder_layers") c.encoder_layers = as_int(val);
    else if (key == "decoder_layers") c.decoder_layers = as_int(val);
    else if (key == "mechanism") c.mechanism = val;
    else if (key == "scale_count") c.scale_count = as_int(val);
    else if (key == "anchor_base") c.anchor_base = std::stod(val);
    else if (key == "lambda") c.lambda = std::stod(val);
    else if (key == "per_scale_offsets") c.per_scale_offsets = as_bool(val);
    else if (key == "encoder_grid") c.encoder_grid = as_int(val);
    else if (key == "decoder_grid") c.decoder_grid = as_int(val);
    else if (key == "ffn_ratio") c.ffn_ratio = as_int(val);
    else if (key == "num_classes") c.num_classes = as_int(val);
    else if (key == "iterative_windows") c.iterative_windows = as_bool(val);
    else if (key == "panoptic") c.panoptic = as_bool(val);
    else if (key == "pixel_scale_den") c.pixel_scale_den = as_int(val);
    else if (key == "pixel_layers") c.pixel_layers = as_int(val);
    else if (key == "gn_groups") c.gn_groups = as_int(val);
    else throw Error("model config: unknown key '" + key + "'");
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg, ParamStore& ps) {
  std::vector<NamedTensor> records;
  for (Parameter* p : ps.all())
    records.push_back(NamedTensor{p->name, p->value, /*store_f32=*/false});
  write_container(path, records);
  std::ofstream os(path + ".cfg", std::ios::trunc);
  if (!os) throw Error("checkpoint: cannot write " + path + ".cfg");
  os << model_config_text(cfg);
  if (!os) throw Error("checkpoint: write failed for " + path + ".cfg");
}

inline ModelConfig read_checkpoint_config(const std::string& path) {
  std::ifstream is(path + ".cfg");
  if (!is) throw Error("checkpoint: missing config sidecar " + path + ".cfg");
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_model_config(text);
}

// Fills an existing store, built from cfg, with the values saved at path.
// Refuses configs that differ from the sidecar and any missing, extra, or
// reshaped record.
inline void load_checkpoint(const std::string& path, const ModelConfig& cfg, ParamStore& ps) {
  std::ifstream is(path + ".cfg");
  if (!is) throw Error("checkpoint: missing config sidecar " + path + ".cfg");
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (text != model_config_text(cfg))
    throw Error("checkpoint: config in " + path + ".cfg does not match the requested model");
  std::set<std::string> seen;
  for (const NamedTensor& r : read_container(path)) {
    if (!ps.has(r.name))
      throw Error("checkpoint: " + path + " contains unknown parameter " + r.name);
    Parameter& p = ps.get(r.name);
    if (p.value.shape != r.tensor.shape)
      throw Error("checkpoint: parameter " + r.name + " has shape " +
                  shape_str(r.tensor.shape) + ", expected " + shape_str(p.value.shape));
    p.value = r.tensor;
    seen.insert(r.name);
  }
  for (Parameter* p : ps.all())
    if (!seen.count(p->name))
      throw Error("checkpoint: " + path + " is missing parameter " + p->name);
}

}  // namespace simplr
